//! Pixel-level segmentation metrics: confusion counts, DSC, precision,
//! recall, precision–recall curves with average precision, and ROC AUC.
//!
//! Degenerate denominators follow fixed conventions:
//! * DSC with no predicted and no true positives is 1;
//! * precision with no predicted positives is 1 if nothing was missed
//!   (`fn = 0`), else 0;
//! * recall with no true positives is 1 if nothing was falsely flagged
//!   (`fp = 0`), else 0.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar metrics are reported at this operating point by default.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// PR-curve CSVs are thinned to at most this many points.
pub const MAX_CURVE_POINTS: usize = 2000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn dsc(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn precision(&self) -> f64 {
        match self.tp + self.fp {
            0 if self.fn_ == 0 => 1.0,
            0 => 0.0,
            d => self.tp as f64 / d as f64,
        }
    }

    pub fn recall(&self) -> f64 {
        match self.tp + self.fn_ {
            0 if self.fp == 0 => 1.0,
            0 => 0.0,
            d => self.tp as f64 / d as f64,
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

pub fn dsc(c: &ConfusionCounts) -> f64 {
    c.dsc()
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    c.precision()
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    c.recall()
}

fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::Data(format!("ground-truth mask must be binary, found {v}"))),
        None => Ok(()),
    }
}

fn check_pair(n_scores: usize, labels: &[u8]) -> Result<()> {
    if n_scores != labels.len() {
        return Err(Error::Shape(format!(
            "prediction has {n_scores} pixels but mask has {}",
            labels.len()
        )));
    }
    check_labels(labels)
}

/// Counts pixels with `p >= threshold` as predicted positive.
pub fn confusion<P: Copy + Into<f64>>(probs: &[P], mask: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    check_pair(probs.len(), mask)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0,1), got {threshold}"
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in probs.iter().zip(mask) {
        match (p.into() >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Agreement between two annotators, one taken as reference.
pub fn inter_rater_dsc(a: &[u8], b: &[u8]) -> Result<f64> {
    check_pair(a.len(), b)?;
    check_labels(a)?;
    let mut c = ConfusionCounts::default();
    for (&x, &y) in a.iter().zip(b) {
        match (y == 1, x == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c.dsc())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision–recall points in order of decreasing threshold (so recall is
/// non-decreasing along the list).
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

impl PrCurve {
    /// Evenly thinned copy keeping the first and last point; AP is unchanged.
    pub fn decimated(&self, max_points: usize) -> PrCurve {
        let n = self.points.len();
        if n <= max_points || max_points < 2 {
            return self.clone();
        }
        let points = (0..max_points)
            .map(|i| self.points[i * (n - 1) / (max_points - 1)])
            .collect();
        PrCurve { points, ap: self.ap }
    }
}

fn sorted_desc<P: Copy + Into<f64>>(scores: &[P], labels: &[u8]) -> Vec<(f64, u8)> {
    let mut pairs: Vec<(f64, u8)> = scores.iter().map(|&s| s.into()).zip(labels.iter().copied()).collect();
    pairs.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

/// Sweeps every distinct score as a threshold (`score >= t` is positive) and
/// computes `AP = Σ (R_n − R_{n−1}) P_n`.
pub fn pr_curve<P: Copy + Into<f64>>(scores: &[P], labels: &[u8]) -> Result<PrCurve> {
    check_pair(scores.len(), labels)?;
    if let Some(s) = scores.iter().map(|&s| s.into()).find(|s: &f64| s.is_nan()) {
        return Err(Error::Data(format!("score {s} is not a number")));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count() as u64;
    if positives == 0 {
        return Err(Error::Data(
            "average precision is undefined without positive pixels".into(),
        ));
    }
    let pairs = sorted_desc(scores, labels);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PrPoint {
            threshold: t,
            precision,
            recall,
        });
    }
    Ok(PrCurve { points, ap })
}

pub fn average_precision<P: Copy + Into<f64>>(scores: &[P], labels: &[u8]) -> Result<f64> {
    pr_curve(scores, labels).map(|c| c.ap)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed exactly in integer half-units.
pub fn roc_auc<P: Copy + Into<f64>>(scores: &[P], labels: &[u8]) -> Result<f64> {
    check_pair(scores.len(), labels)?;
    let mut pairs = sorted_desc(scores, labels);
    pairs.reverse();
    let pos = pairs.iter().filter(|p| p.1 == 1).count() as u128;
    let neg = pairs.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("AUC needs both positive and negative pixels".into()));
    }
    let mut half_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        let (mut p, mut n) = (0u128, 0u128);
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 == 1 {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        half_wins += p * (2 * neg_below + n);
        neg_below += n;
    }
    Ok(half_wins as f64 / (2 * pos * neg) as f64)
}

/// How scalar metrics combine over a test set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// One confusion matrix and one PR curve over all pixels.
    #[default]
    Pooled,
    /// Per-image metrics averaged over images.
    PerImage,
}

impl FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Averaging::Pooled),
            "per_image" | "per-image" => Ok(Averaging::PerImage),
            other => Err(Error::InvalidArgument(format!(
                "unknown averaging `{other}` (expected pooled|per_image)"
            ))),
        }
    }
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Averaging::Pooled => "pooled",
            Averaging::PerImage => "per_image",
        })
    }
}

/// One image's foreground probabilities with its ground truth.
#[derive(Clone, Copy, Debug)]
pub struct Prediction<'a> {
    pub probs: &'a [f32],
    pub mask: &'a [u8],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub averaging: Averaging,
    pub pooled: ConfusionCounts,
    pub per_image: Vec<ConfusionCounts>,
    pub precision: f64,
    pub recall: f64,
    pub dsc: f64,
    pub ap: f64,
    pub auc: f64,
    /// Pooled PR curve (always computed over all pixels).
    pub curve: PrCurve,
}

impl EvalReport {
    pub const CSV_HEADER: [&'static str; 5] = ["Precision", "Recall", "DSC", "AP", "AUC"];

    pub fn scores(&self) -> [f64; 5] {
        [self.precision, self.recall, self.dsc, self.ap, self.auc]
    }

    /// Single-row CSV in the order Precision, Recall, DSC, AP, AUC.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::CSV_HEADER)?;
        w.write_record(self.scores().map(|v| v.to_string()))?;
        w.flush()?;
        Ok(())
    }

    /// Reads back the five scores written by [`EvalReport::write_csv`].
    pub fn read_scores_csv(path: &Path) -> Result<[f64; 5]> {
        let mut r = csv::Reader::from_path(path)?;
        if r.headers()?.iter().collect::<Vec<_>>() != Self::CSV_HEADER {
            return Err(Error::Data(format!("{} is not an evaluation CSV", path.display())));
        }
        let row = r
            .records()
            .next()
            .ok_or_else(|| Error::Data(format!("{} has no data row", path.display())))??;
        let mut out = [0.0; 5];
        for (o, f) in out.iter_mut().zip(row.iter()) {
            *o = f
                .parse()
                .map_err(|_| Error::Data(format!("bad number `{f}` in {}", path.display())))?;
        }
        Ok(out)
    }
}

/// Evaluates a test set. The PR curve and AUC in pooled mode use every
/// pixel of every image; in per-image mode AP and AUC are averaged over the
/// images on which they are defined.
pub fn evaluate(predictions: &[Prediction<'_>], threshold: f64, averaging: Averaging) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let per_image = predictions
        .iter()
        .map(|p| confusion(p.probs, p.mask, threshold))
        .collect::<Result<Vec<_>>>()?;
    let pooled: ConfusionCounts = per_image.iter().copied().sum();
    let scores: Vec<f32> = predictions.iter().flat_map(|p| p.probs.iter().copied()).collect();
    let labels: Vec<u8> = predictions.iter().flat_map(|p| p.mask.iter().copied()).collect();
    let curve = pr_curve(&scores, &labels)?;
    let (precision, recall, dsc, ap, auc) = match averaging {
        Averaging::Pooled => (
            pooled.precision(),
            pooled.recall(),
            pooled.dsc(),
            curve.ap,
            roc_auc(&scores, &labels)?,
        ),
        Averaging::PerImage => {
            let n = per_image.len() as f64;
            let mean = |f: fn(&ConfusionCounts) -> f64| per_image.iter().map(f).sum::<f64>() / n;
            let aps: Vec<f64> = predictions
                .iter()
                .filter(|p| p.mask.contains(&1))
                .map(|p| average_precision(p.probs, p.mask))
                .collect::<Result<_>>()?;
            let aucs: Vec<f64> = predictions
                .iter()
                .filter(|p| p.mask.contains(&1) && p.mask.contains(&0))
                .map(|p| roc_auc(p.probs, p.mask))
                .collect::<Result<_>>()?;
            let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            (
                mean(ConfusionCounts::precision),
                mean(ConfusionCounts::recall),
                mean(ConfusionCounts::dsc),
                avg(&aps),
                avg(&aucs),
            )
        }
    };
    Ok(EvalReport {
        threshold,
        averaging,
        pooled,
        per_image,
        precision,
        recall,
        dsc,
        ap,
        auc,
        curve,
    })
}

/// Writes `# ap=<value>` followed by `threshold,precision,recall` rows.
pub fn write_pr_curve_csv(curve: &PrCurve, path: &Path) -> Result<()> {
    let curve = curve.decimated(MAX_CURVE_POINTS);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# ap={}", curve.ap)?;
    writeln!(f, "threshold,precision,recall")?;
    for p in &curve.points {
        writeln!(f, "{},{},{}", p.threshold, p.precision, p.recall)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_pr_curve_csv(path: &Path) -> Result<PrCurve> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let malformed = |line: usize, what: &str| Error::Data(format!("{}:{line}: {what}", path.display()));
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut ap = None;
    let mut points = Vec::new();
    let mut saw_header = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("ap=") {
                ap = Some(v.parse::<f64>().map_err(|_| malformed(i + 1, "bad ap value"))?);
            }
            continue;
        }
        if !saw_header {
            if line != "threshold,precision,recall" {
                return Err(malformed(i + 1, "expected header threshold,precision,recall"));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [t, p, r] = fields[..] else {
            return Err(malformed(i + 1, "expected three columns"));
        };
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| malformed(i + 1, "bad number"));
        let point = PrPoint {
            threshold: num(t)?,
            precision: num(p)?,
            recall: num(r)?,
        };
        if !(0.0..=1.0).contains(&point.precision) || !(0.0..=1.0).contains(&point.recall) {
            return Err(malformed(i + 1, "precision and recall must lie in [0,1]"));
        }
        points.push(point);
    }
    let ap = ap.ok_or_else(|| malformed(0, "missing `# ap=` line"))?;
    if points.is_empty() {
        return Err(malformed(0, "no curve points"));
    }
    Ok(PrCurve { points, ap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn hand_case_scalars() {
        let c = counts(2, 1, 1, 0);
        assert_eq!(c.dsc(), 4.0 / 6.0);
        assert_eq!(c.precision(), 2.0 / 3.0);
        assert_eq!(c.recall(), 2.0 / 3.0);
    }

    #[test]
    fn degenerate_conventions() {
        assert_eq!(counts(0, 0, 0, 10).dsc(), 1.0);
        assert_eq!(counts(0, 0, 0, 10).precision(), 1.0);
        assert_eq!(counts(0, 0, 3, 10).precision(), 0.0);
        assert_eq!(counts(0, 0, 0, 10).recall(), 1.0);
        assert_eq!(counts(0, 2, 0, 10).recall(), 0.0);
    }

    #[test]
    fn confusion_basics() {
        let mask = [1u8, 0, 1, 0, 0];
        let probs: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
        for t in [0.1, 0.5, 0.9] {
            let c = confusion(&probs, &mask, t).unwrap();
            assert_eq!((c.fp, c.fn_, c.tp), (0, 0, 2));
        }
        let c = confusion(&[0.0f64; 5], &mask, 0.5).unwrap();
        assert_eq!((c.tp, c.fn_), (0, 2));
        assert!(confusion(&[0.0f64; 4], &mask, 0.5).is_err());
        assert!(confusion(&probs, &mask, 1.0).is_err());
        assert!(confusion(&probs, &[2u8, 0, 0, 0, 0], 0.5).is_err());
    }

    #[test]
    fn hand_ap_case() {
        let scores = [0.9f64, 0.8, 0.7, 0.3];
        let labels = [1u8, 0, 1, 0];
        let ap = average_precision(&scores, &labels).unwrap();
        assert!((ap - (0.5 + (2.0 / 3.0) * 0.5)).abs() < 1e-15);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn perfect_and_tied_scores() {
        let labels = [0u8, 0, 1, 1, 0];
        let perfect = [0.1f64, 0.2, 0.9, 0.8, 0.3];
        assert_eq!(average_precision(&perfect, &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&perfect, &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.4f64; 5], &labels).unwrap(), 0.5);
        assert!(roc_auc(&perfect, &[1u8; 5]).is_err());
        assert!(pr_curve(&perfect, &[0u8; 5]).is_err());
    }

    #[test]
    fn inter_rater() {
        let a = [1u8, 1, 0, 0];
        assert_eq!(inter_rater_dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(inter_rater_dsc(&a, &[0, 0, 1, 1]).unwrap(), 0.0);
        let b = [1u8, 0, 1, 0];
        assert_eq!(inter_rater_dsc(&a, &b).unwrap(), inter_rater_dsc(&b, &a).unwrap());
        assert!(inter_rater_dsc(&a, &[1u8, 0]).is_err());
    }

    #[test]
    fn recall_non_decreasing_along_curve() {
        let scores = [0.2f64, 0.9, 0.4, 0.4, 0.7, 0.1];
        let labels = [0u8, 1, 1, 0, 0, 1];
        let c = pr_curve(&scores, &labels).unwrap();
        assert_eq!(c.points.len(), 5);
        assert!(c
            .points
            .windows(2)
            .all(|w| w[0].threshold > w[1].threshold && w[0].recall <= w[1].recall));
        assert_eq!(c.points.last().unwrap().recall, 1.0);
    }

    #[test]
    fn evaluate_pooled_and_per_image() {
        let p1 = [0.9f32, 0.1, 0.6, 0.2];
        let m1 = [1u8, 0, 0, 0];
        let p2 = [0.3f32, 0.8, 0.7, 0.1];
        let m2 = [1u8, 1, 0, 0];
        let preds = [
            Prediction { probs: &p1, mask: &m1 },
            Prediction { probs: &p2, mask: &m2 },
        ];
        let pooled = evaluate(&preds, 0.5, Averaging::Pooled).unwrap();
        assert_eq!(pooled.pooled, pooled.per_image[0] + pooled.per_image[1]);
        assert_eq!(pooled.dsc, pooled.pooled.dsc());
        let per = evaluate(&preds, 0.5, Averaging::PerImage).unwrap();
        let expect = (per.per_image[0].dsc() + per.per_image[1].dsc()) / 2.0;
        assert_eq!(per.dsc, expect);
        assert_eq!(per.curve, pooled.curve);
    }

    #[test]
    fn csv_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let scores: Vec<f64> = (0..5000).map(|i| ((i * 7919) % 5003) as f64 / 5003.0).collect();
        let labels: Vec<u8> = (0..5000).map(|i| u8::from(i % 3 == 0)).collect();
        let curve = pr_curve(&scores, &labels).unwrap();
        let path = dir.path().join("pr.csv");
        write_pr_curve_csv(&curve, &path).unwrap();
        let back = read_pr_curve_csv(&path).unwrap();
        assert_eq!(back.ap, curve.ap);
        assert!(back.points.len() <= MAX_CURVE_POINTS);
        assert_eq!(back.points.first(), curve.points.first());
        assert_eq!(back.points.last(), curve.points.last());

        let p: Vec<f32> = scores.iter().map(|&s| s as f32).collect();
        let report = evaluate(
            &[Prediction {
                probs: &p,
                mask: &labels,
            }],
            0.5,
            Averaging::Pooled,
        )
        .unwrap();
        let path = dir.path().join("report.csv");
        report.write_csv(&path).unwrap();
        assert!(std::fs::read_to_string(&path)
            .unwrap()
            .starts_with("Precision,Recall,DSC,AP,AUC\n"));
        assert_eq!(EvalReport::read_scores_csv(&path).unwrap(), report.scores());
    }

    #[test]
    fn malformed_curve_csv_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "# ap=0.5\nthreshold,precision,recall\n0.5,abc,0.1\n").unwrap();
        assert!(read_pr_curve_csv(&path).is_err());
        std::fs::write(&path, "threshold,precision,recall\n0.5,0.5,0.1\n").unwrap();
        assert!(read_pr_curve_csv(&path).is_err());
    }

    proptest! {
        #[test]
        fn dsc_is_harmonic_mean(tp in 1u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
            let c = counts(tp, fp, fn_, 0);
            let (p, r) = (c.precision(), c.recall());
            prop_assert!((c.dsc() - 2.0 * p * r / (p + r)).abs() < 1e-12);
        }

        #[test]
        fn monotone_transform_invariance(
            raw in prop::collection::vec((0u32..256, 0u8..2), 2..200)
        ) {
            let labels: Vec<u8> = raw.iter().map(|r| r.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let s: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 256.0).collect();
            let t: Vec<f64> = s.iter().map(|&x| 3.0 * x * x * x + x - 7.0).collect();
            prop_assert!((average_precision(&s, &labels).unwrap() - average_precision(&t, &labels).unwrap()).abs() < 1e-12);
            prop_assert!((roc_auc(&s, &labels).unwrap() - roc_auc(&t, &labels).unwrap()).abs() < 1e-12);
        }
    }
}

//! The architecture × loss × vendor experiment grid.

use std::path::Path;
use std::time::Instant;

use log::{info, warn};

use crate::checkpoint::save_checkpoint;
use crate::data::{filter_annotated_samples, load_dataset, DatasetManifest, Sample, Split, Vendor, VendorFilter};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_pr_curve_csv, Averaging, EvalReport, Prediction};
use crate::losses::Objective;
use crate::models::{Architecture, Model};
use crate::train::{
    predict, train_on, write_log_csv, TrainConfig, TrainingData, ValidationData, CHECKPOINT_FILE, LOG_FILE,
};

pub const MATRIX_HEADER: [&str; 9] = [
    "Train",
    "Test",
    "Loss",
    "Model",
    "Precision",
    "Recall",
    "DSC",
    "AP",
    "AUC",
];

/// Which cells to run.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixSpec {
    pub archs: Vec<Architecture>,
    pub losses: Vec<Objective>,
    pub vendors: Vec<VendorFilter>,
}

impl Default for MatrixSpec {
    fn default() -> Self {
        Self {
            archs: Architecture::ALL.to_vec(),
            losses: vec![Objective::CrossEntropy, Objective::Dice],
            vendors: VendorFilter::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixRow {
    pub train_vendors: VendorFilter,
    pub test_vendors: VendorFilter,
    pub loss: Objective,
    pub arch: Architecture,
    pub best_epoch: usize,
    pub train_seconds: f64,
    pub report: EvalReport,
}

/// Test subsets a model trained on `train` is scored on: its own vendor, or
/// each vendor separately plus both together for joint training.
pub fn test_sets(train: VendorFilter) -> Vec<VendorFilter> {
    match train {
        VendorFilter::Both => vec![VendorFilter::Cirrus, VendorFilter::Spectralis, VendorFilter::Both],
        single => vec![single],
    }
}

fn subset(samples: &[Sample], vendors: VendorFilter) -> Vec<Sample> {
    samples
        .iter()
        .filter(|s| vendors.accepts(s.scan.vendor))
        .cloned()
        .collect()
}

fn score(
    preds: &[(Vendor, Vec<f32>)],
    test: &[Sample],
    vendors: VendorFilter,
    threshold: f64,
    averaging: Averaging,
) -> Result<Option<EvalReport>> {
    let items: Vec<Prediction<'_>> = preds
        .iter()
        .zip(test)
        .filter(|((v, _), _)| vendors.accepts(*v))
        .map(|((_, p), s)| Prediction {
            probs: p,
            mask: s.mask.pixels().data(),
        })
        .collect();
    if items.iter().all(|p| !p.mask.contains(&1)) {
        return Ok(None);
    }
    evaluate(&items, threshold, averaging).map(Some)
}

/// Trains every cell of `spec` on `manifest` and scores the best-epoch model
/// on the test split. `configure` supplies the training config of each cell;
/// its `arch`, `loss` and `vendors` fields are overwritten.
///
/// With `out_dir`, each cell gets a `{train}_{loss}_{arch}` directory holding
/// its checkpoint, training log and PR curves.
pub fn run_matrix(
    manifest: &DatasetManifest,
    spec: &MatrixSpec,
    configure: &dyn Fn(Architecture, Objective, VendorFilter) -> TrainConfig,
    threshold: f64,
    averaging: Averaging,
    out_dir: Option<&Path>,
) -> Result<Vec<MatrixRow>> {
    if spec.archs.is_empty() || spec.losses.is_empty() || spec.vendors.is_empty() {
        return Err(Error::InvalidArgument("experiment matrix has no cells".into()));
    }
    let train_all = filter_annotated_samples(load_dataset(manifest, VendorFilter::Both, &[Split::Train])?);
    let val_all = filter_annotated_samples(load_dataset(manifest, VendorFilter::Both, &[Split::Val])?);
    let test_all = filter_annotated_samples(load_dataset(manifest, VendorFilter::Both, &[Split::Test])?);
    let mut rows = Vec::new();
    for &vendors in &spec.vendors {
        let train = subset(&train_all, vendors);
        let val = subset(&val_all, vendors);
        let test = subset(&test_all, vendors);
        if let Some((split, _)) = [("train", &train), ("val", &val), ("test", &test)]
            .into_iter()
            .find(|(_, s)| s.is_empty())
        {
            warn!("skipping {vendors} cells: no annotated {vendors} {split} images");
            continue;
        }
        for &loss in &spec.losses {
            for &arch in &spec.archs {
                let mut cfg = configure(arch, loss, vendors);
                cfg.arch = arch;
                cfg.loss = loss;
                cfg.vendors = vendors;
                let cell = format!("{}_{}_{}", vendors.tag(), loss.tag(), arch.tag());
                let cell_dir = out_dir.map(|d| d.join(&cell));
                let started = Instant::now();
                let outcome = train_on(&cfg, TrainingData::Images(&train), ValidationData::Images(&val), None)?;
                let train_seconds = started.elapsed().as_secs_f64();
                let preds = predict_all(&outcome.best_model, &test)?;
                if let Some(dir) = &cell_dir {
                    std::fs::create_dir_all(dir)?;
                    save_checkpoint(&outcome.best_model, &dir.join(CHECKPOINT_FILE))?;
                    write_log_csv(&outcome.log, &dir.join(LOG_FILE))?;
                    std::fs::write(dir.join("train.toml"), cfg.to_toml_string())?;
                }
                for test_vendors in test_sets(vendors) {
                    let Some(report) = score(&preds, &test, test_vendors, threshold, averaging)? else {
                        continue;
                    };
                    if let Some(dir) = &cell_dir {
                        write_pr_curve_csv(&report.curve, &dir.join(format!("pr_{}.csv", test_vendors.tag())))?;
                    }
                    info!(
                        "{cell} on {test_vendors}: AP {:.4}, DSC {:.4} (best epoch {}, {:.0} s)",
                        report.ap, report.dsc, outcome.best_epoch, train_seconds
                    );
                    rows.push(MatrixRow {
                        train_vendors: vendors,
                        test_vendors,
                        loss,
                        arch,
                        best_epoch: outcome.best_epoch,
                        train_seconds,
                        report,
                    });
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(
            "no cell of the experiment matrix has train, val and test data".into(),
        ));
    }
    if let Some(dir) = out_dir {
        write_matrix_csv(&rows, &dir.join("matrix.csv"))?;
    }
    Ok(rows)
}

fn predict_all(model: &Model<f32>, test: &[Sample]) -> Result<Vec<(Vendor, Vec<f32>)>> {
    test.iter()
        .map(|s| Ok((s.scan.vendor, predict(model, &s.scan.pixels)?.into_data())))
        .collect()
}

pub fn write_matrix_csv(rows: &[MatrixRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MATRIX_HEADER)?;
    for r in rows {
        let mut rec = vec![
            r.train_vendors.tag().to_string(),
            r.test_vendors.tag().to_string(),
            r.loss.to_string(),
            r.arch.to_string(),
        ];
        rec.extend(r.report.scores().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

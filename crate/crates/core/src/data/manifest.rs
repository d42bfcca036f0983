use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_mask_png, Disease, Sample, Split, Vendor};
use crate::error::{Error, Result};

/// Train/val/test scan proportions of the reference study (119/6/20 scans).
pub const TABLE1_FRACTIONS: [f64; 3] = [119.0 / 145.0, 6.0 / 145.0, 20.0 / 145.0];

/// One manifest row. Paths are relative to the manifest's directory unless
/// absolute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub scan_id: String,
    pub slice_index: u32,
    pub vendor: Vendor,
    pub disease: Disease,
    pub split: Option<Split>,
    pub image_path: String,
    pub mask_path: String,
}

impl ManifestEntry {
    /// Key identifying the OCT volume this slice belongs to.
    pub fn volume_key(&self) -> (String, String) {
        (self.patient_id.clone(), self.scan_id.clone())
    }
}

/// CSV manifest with columns
/// `patient_id,scan_id,slice_index,vendor,disease,split,image_path,mask_path`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Self {
        Self {
            entries,
            root: root.into(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let expected = [
            "patient_id",
            "scan_id",
            "slice_index",
            "vendor",
            "disease",
            "split",
            "image_path",
            "mask_path",
        ];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Data(format!(
                "manifest {} has columns {:?}, expected {:?}",
                path.display(),
                headers.iter().collect::<Vec<_>>(),
                expected
            )));
        }
        let entries = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { entries, root })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        if self.entries.is_empty() {
            writer.write_record([
                "patient_id",
                "scan_id",
                "slice_index",
                "vendor",
                "disease",
                "split",
                "image_path",
                "mask_path",
            ])?;
        }
        for e in &self.entries {
            writer.serialize(e)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn patients(&self, split: Split) -> BTreeSet<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == Some(split))
            .map(|e| e.patient_id.as_str())
            .collect()
    }

    pub fn scan_count(&self, split: Split) -> usize {
        self.entries
            .iter()
            .filter(|e| e.split == Some(split))
            .map(|e| (&e.patient_id, &e.scan_id))
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn filter(&self, keep: impl Fn(&ManifestEntry) -> bool) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
            root: self.root.clone(),
        }
    }
}

/// Keeps the entries whose mask file holds at least one positive pixel.
pub fn filter_annotated(manifest: &DatasetManifest) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for e in &manifest.entries {
        if read_mask_png(&manifest.resolve(&e.mask_path))?.positives() > 0 {
            entries.push(e.clone());
        }
    }
    Ok(DatasetManifest {
        entries,
        root: manifest.root.clone(),
    })
}

/// In-memory counterpart of [`filter_annotated`].
pub fn filter_annotated_samples(samples: Vec<Sample>) -> Vec<Sample> {
    samples.into_iter().filter(|s| s.mask.positives() > 0).collect()
}

/// Assigns every patient (and so every slice of that patient) to exactly one
/// of train/val/test, aiming at `fractions` of the scan (volume) count.
///
/// Patients are visited largest first, ties in seeded random order, and each
/// goes to the split furthest below its target.
pub fn split_by_patient(manifest: &DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be in [0,1] and sum to 1, got {fractions:?}"
        )));
    }
    let mut scans: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in &manifest.entries {
        scans.entry(&e.patient_id).or_default().insert(&e.scan_id);
    }
    let active: Vec<usize> = (0..3).filter(|&s| fractions[s] > 0.0).collect();
    if scans.len() < active.len() {
        return Err(Error::InvalidArgument(format!(
            "{} patient(s) cannot fill {} non-empty splits",
            scans.len(),
            active.len()
        )));
    }
    let total: usize = scans.values().map(BTreeSet::len).sum();
    let targets = largest_remainder(total, fractions);

    let mut patients: Vec<(&str, usize)> = scans.iter().map(|(p, s)| (*p, s.len())).collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    patients.sort_by_key(|p| std::cmp::Reverse(p.1));

    let mut assigned = [0usize; 3];
    let mut members = [0usize; 3];
    let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
    let remaining_after = |i: usize| patients.len() - i - 1;
    for (i, (patient, count)) in patients.iter().enumerate() {
        // Reserve enough patients so that no active split ends up empty.
        let empty_active = active.iter().filter(|&&s| members[s] == 0).count();
        let candidates: Vec<usize> = if empty_active > remaining_after(i) {
            active.iter().copied().filter(|&s| members[s] == 0).collect()
        } else {
            active.clone()
        };
        let s = *candidates
            .iter()
            .max_by(|&&a, &&b| {
                let da = targets[a] as i64 - assigned[a] as i64;
                let db = targets[b] as i64 - assigned[b] as i64;
                da.cmp(&db).then(b.cmp(&a))
            })
            .expect("at least one active split");
        assigned[s] += count;
        members[s] += 1;
        split_of.insert(patient, Split::ALL[s]);
    }
    let entries = manifest
        .entries
        .iter()
        .map(|e| ManifestEntry {
            split: Some(split_of[e.patient_id.as_str()]),
            ..e.clone()
        })
        .collect();
    Ok(DatasetManifest {
        entries,
        root: manifest.root.clone(),
    })
}

fn largest_remainder(total: usize, fractions: [f64; 3]) -> [usize; 3] {
    let raw = fractions.map(|f| f * total as f64);
    let mut out = raw.map(|r| r.floor() as usize);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .total_cmp(&(raw[a] - raw[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = total - out.iter().sum::<usize>();
    for s in order {
        if left == 0 {
            break;
        }
        out[s] += 1;
        left -= 1;
    }
    out
}

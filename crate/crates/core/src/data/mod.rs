//! OCT B-scans, label masks, and the pipeline that turns them into training
//! patches.

mod io;
mod manifest;
mod patches;
mod phantom;
mod preprocess;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, read_image_png, read_mask_png, write_image_png, write_mask_png, Sample};
pub use manifest::{
    filter_annotated, filter_annotated_samples, split_by_patient, DatasetManifest, ManifestEntry, TABLE1_FRACTIONS,
};
pub use patches::{extract_patch, sample_patches, PatchPair, PatchSampler, PATCH_COLS, PATCH_ROWS};
pub use phantom::{generate_phantom, write_phantom, Focus, Phantom, PhantomParams, PhantomVendors};
pub use preprocess::{normalize_scan, rescale_bscan, rescale_rows_bilinear, rescale_rows_nearest};

/// Row count every B-scan is resampled to.
pub const TARGET_ROWS: usize = 320;
/// Column count shared by both vendors.
pub const TARGET_COLS: usize = 512;

/// Dense row-major 2D array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("grid dims must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        assert!(rows > 0 && cols > 0, "grid dims must be positive");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies the window `[r, r + h) × [c, c + w)`.
    pub fn crop(&self, r: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if r + h > self.rows || c + w > self.cols || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({r},{c}) exceeds grid {}x{}",
                self.rows, self.cols
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for row in r..r + h {
            data.extend_from_slice(&self.row(row)[c..c + w]);
        }
        Ok(Self { rows: h, cols: w, data })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vendor {
    Cirrus,
    Spectralis,
}

impl Vendor {
    pub const ALL: [Vendor; 2] = [Vendor::Cirrus, Vendor::Spectralis];

    /// Native (rows, cols) of a B-scan.
    pub fn native_dims(self) -> (usize, usize) {
        match self {
            Vendor::Cirrus => (1024, 512),
            Vendor::Spectralis => (496, 512),
        }
    }

    /// Native (row, column) pixel size in micrometres.
    pub fn native_pixel_size_um(self) -> (f64, f64) {
        match self {
            Vendor::Cirrus => (1.96, 11.74),
            Vendor::Spectralis => (3.87, 11.23),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Vendor::Cirrus => "cirrus",
            Vendor::Spectralis => "spectralis",
        }
    }
}

impl fmt::Display for Vendor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Vendor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cirrus" => Ok(Vendor::Cirrus),
            "spectralis" => Ok(Vendor::Spectralis),
            other => Err(Error::InvalidArgument(format!(
                "unknown vendor `{other}` (expected cirrus|spectralis)"
            ))),
        }
    }
}

/// Which vendors a training or evaluation run draws from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VendorFilter {
    Cirrus,
    Spectralis,
    #[default]
    Both,
}

impl VendorFilter {
    pub const ALL: [VendorFilter; 3] = [VendorFilter::Cirrus, VendorFilter::Spectralis, VendorFilter::Both];

    pub fn accepts(self, vendor: Vendor) -> bool {
        match self {
            VendorFilter::Cirrus => vendor == Vendor::Cirrus,
            VendorFilter::Spectralis => vendor == Vendor::Spectralis,
            VendorFilter::Both => true,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            VendorFilter::Cirrus => "cirrus",
            VendorFilter::Spectralis => "spectralis",
            VendorFilter::Both => "both",
        }
    }
}

impl fmt::Display for VendorFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for VendorFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cirrus" => Ok(VendorFilter::Cirrus),
            "spectralis" => Ok(VendorFilter::Spectralis),
            "both" => Ok(VendorFilter::Both),
            other => Err(Error::InvalidArgument(format!(
                "unknown vendor selection `{other}` (expected cirrus|spectralis|both)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Disease {
    #[serde(rename = "AMD")]
    Amd,
    #[serde(rename = "DME")]
    Dme,
    #[serde(rename = "RVO")]
    Rvo,
}

impl Disease {
    pub const ALL: [Disease; 3] = [Disease::Amd, Disease::Dme, Disease::Rvo];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected train|val|test)"
            ))),
        }
    }
}

/// One OCT B-scan with its acquisition metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct BScan {
    pub pixels: Grid<f32>,
    pub vendor: Vendor,
    pub row_pixel_size_um: f64,
    pub col_pixel_size_um: f64,
    pub patient_id: String,
    pub scan_id: String,
    pub slice_index: u32,
}

impl BScan {
    /// A scan at the vendor's native geometry.
    pub fn native(
        pixels: Grid<f32>,
        vendor: Vendor,
        patient_id: &str,
        scan_id: &str,
        slice_index: u32,
    ) -> Result<Self> {
        if pixels.dims() != vendor.native_dims() {
            return Err(Error::Data(format!(
                "{vendor} B-scan must be {:?}, got {:?}",
                vendor.native_dims(),
                pixels.dims()
            )));
        }
        let (row_um, col_um) = vendor.native_pixel_size_um();
        Ok(Self {
            pixels,
            vendor,
            row_pixel_size_um: row_um,
            col_pixel_size_um: col_um,
            patient_id: patient_id.to_string(),
            scan_id: scan_id.to_string(),
            slice_index,
        })
    }
}

/// Binary HRF annotation; 1 marks a focus pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pixels: Grid<u8>,
}

impl LabelMask {
    pub fn new(pixels: Grid<u8>) -> Result<Self> {
        if let Some(v) = pixels.data().iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("label mask must be binary, found value {v}")));
        }
        Ok(Self { pixels })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            pixels: Grid::filled(rows, cols, 0),
        }
    }

    pub fn pixels(&self) -> &Grid<u8> {
        &self.pixels
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dims()
    }

    pub fn positives(&self) -> usize {
        self.pixels.data().iter().filter(|&&v| v == 1).count()
    }

    pub fn set(&mut self, r: usize, c: usize, positive: bool) {
        self.pixels.set(r, c, u8::from(positive));
    }

    pub fn crop(&self, r: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            pixels: self.pixels.crop(r, c, h, w)?,
        })
    }
}

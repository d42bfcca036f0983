use std::collections::BTreeMap;
use std::path::Path;

use image::{ImageBuffer, Luma};

use super::{
    normalize_scan, rescale_bscan, BScan, DatasetManifest, Grid, LabelMask, ManifestEntry, Split, VendorFilter,
};
use crate::error::{Error, Result};

/// A preprocessed slice: rescaled to 320×512 and volume-normalised to [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub entry: ManifestEntry,
    pub scan: BScan,
    pub mask: LabelMask,
}

fn ensure_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::NotFound(path.to_path_buf()))
    }
}

/// Reads a grayscale PNG as raw intensities (16-bit scale).
pub fn read_image_png(path: &Path) -> Result<Grid<f32>> {
    ensure_exists(path)?;
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Grid::new(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(f32::from).collect(),
    )
}

/// Writes intensities as a 16-bit grayscale PNG, rounding and clamping to
/// `0..=65535`.
pub fn write_image_png(path: &Path, pixels: &Grid<f32>) -> Result<()> {
    let data: Vec<u16> = pixels
        .data()
        .iter()
        .map(|&v| v.round().clamp(0.0, 65535.0) as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(pixels.cols() as u32, pixels.rows() as u32, data).expect("buffer matches dims");
    buf.save(path)?;
    Ok(())
}

/// Reads an 8-bit mask PNG; 0 is background, 255 (or 1) is foreground.
pub fn read_mask_png(path: &Path) -> Result<LabelMask> {
    ensure_exists(path)?;
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let mut data = img.into_raw();
    for v in &mut data {
        *v = match *v {
            0 => 0,
            1 | 255 => 1,
            other => {
                return Err(Error::Data(format!(
                    "mask {} contains value {other}; expected 0 or 255",
                    path.display()
                )))
            }
        };
    }
    LabelMask::new(Grid::new(h as usize, w as usize, data)?)
}

pub fn write_mask_png(path: &Path, mask: &LabelMask) -> Result<()> {
    let (h, w) = mask.dims();
    let data: Vec<u8> = mask.pixels().data().iter().map(|&v| v * 255).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer matches dims");
    buf.save(path)?;
    Ok(())
}

/// Loads, rescales and normalises every manifest entry that passes the vendor
/// and split filters. Normalisation statistics span each whole volume
/// (all selected slices sharing patient and scan id).
pub fn load_dataset(manifest: &DatasetManifest, vendors: VendorFilter, splits: &[Split]) -> Result<Vec<Sample>> {
    let selected: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| vendors.accepts(e.vendor) && e.split.is_some_and(|s| splits.contains(&s)))
        .collect();
    let mut volumes: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, e) in selected.iter().enumerate() {
        volumes.entry(e.volume_key()).or_default().push(i);
    }
    let mut out: Vec<Option<Sample>> = vec![None; selected.len()];
    for idx in volumes.values() {
        let mut scans = Vec::with_capacity(idx.len());
        let mut masks = Vec::with_capacity(idx.len());
        for &i in idx {
            let e = selected[i];
            let pixels = read_image_png(&manifest.resolve(&e.image_path))?;
            let mask = read_mask_png(&manifest.resolve(&e.mask_path))?;
            let scan = BScan::native(pixels, e.vendor, &e.patient_id, &e.scan_id, e.slice_index)?;
            let (scan, mask) = rescale_bscan(&scan, &mask)?;
            scans.push(scan);
            masks.push(mask);
        }
        let scans = normalize_scan(&scans)?;
        for ((&i, scan), mask) in idx.iter().zip(scans).zip(masks) {
            out[i] = Some(Sample {
                entry: selected[i].clone(),
                scan,
                mask,
            });
        }
    }
    Ok(out
        .into_iter()
        .map(|s| s.expect("every selected entry loaded"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(3, 4, (0..12).map(|i| (i * 5000) as f32).collect()).unwrap();
        let p = dir.path().join("img.png");
        write_image_png(&p, &g).unwrap();
        assert_eq!(read_image_png(&p).unwrap(), g);

        let mut m = LabelMask::zeros(3, 4);
        m.set(1, 2, true);
        let p = dir.path().join("mask.png");
        write_mask_png(&p, &m).unwrap();
        assert_eq!(read_mask_png(&p).unwrap(), m);
    }

    #[test]
    fn non_binary_mask_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(2, 1, vec![0, 128]).unwrap();
        buf.save(&p).unwrap();
        assert!(read_mask_png(&p).is_err());
        assert!(matches!(
            read_mask_png(&dir.path().join("none.png")),
            Err(Error::NotFound(_))
        ));
    }
}

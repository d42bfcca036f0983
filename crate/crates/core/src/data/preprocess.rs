use log::warn;

use super::{BScan, Grid, LabelMask, TARGET_ROWS};
use crate::error::{Error, Result};

/// Source coordinate of output row `i` under half-pixel-centre alignment.
fn source_row(i: usize, in_rows: usize, out_rows: usize) -> f64 {
    (i as f64 + 0.5) * in_rows as f64 / out_rows as f64 - 0.5
}

/// Linear interpolation along rows; columns are left untouched.
pub fn rescale_rows_bilinear(img: &Grid<f32>, out_rows: usize) -> Result<Grid<f32>> {
    let (in_rows, cols) = img.dims();
    let mut out = Vec::with_capacity(out_rows * cols);
    for i in 0..out_rows {
        let src = source_row(i, in_rows, out_rows).clamp(0.0, (in_rows - 1) as f64);
        let r0 = src.floor() as usize;
        let r1 = (r0 + 1).min(in_rows - 1);
        let t = src - r0 as f64;
        let (a, b) = (img.row(r0), img.row(r1));
        // a + (b - a) t keeps constant rows exactly constant.
        out.extend(
            a.iter()
                .zip(b)
                .map(|(&a, &b)| (a as f64 + (b as f64 - a as f64) * t) as f32),
        );
    }
    Grid::new(out_rows, cols, out)
}

/// Nearest-neighbour resampling along rows.
pub fn rescale_rows_nearest<T: Copy>(img: &Grid<T>, out_rows: usize) -> Result<Grid<T>> {
    let (in_rows, cols) = img.dims();
    let mut out = Vec::with_capacity(out_rows * cols);
    for i in 0..out_rows {
        let src = ((i as f64 + 0.5) * in_rows as f64 / out_rows as f64).floor() as usize;
        out.extend_from_slice(img.row(src.min(in_rows - 1)));
    }
    Grid::new(out_rows, cols, out)
}

/// Resamples a native-geometry scan and its mask to 320 rows.
pub fn rescale_bscan(scan: &BScan, mask: &LabelMask) -> Result<(BScan, LabelMask)> {
    let native = scan.vendor.native_dims();
    if scan.pixels.dims() != native {
        return Err(Error::Data(format!(
            "{} scan {}/{} slice {} has dims {:?}, expected native {:?}",
            scan.vendor,
            scan.patient_id,
            scan.scan_id,
            scan.slice_index,
            scan.pixels.dims(),
            native
        )));
    }
    if mask.dims() != native {
        return Err(Error::Data(format!(
            "mask dims {:?} differ from scan dims {:?}",
            mask.dims(),
            native
        )));
    }
    let pixels = rescale_rows_bilinear(&scan.pixels, TARGET_ROWS)?;
    let mask = LabelMask::new(rescale_rows_nearest(mask.pixels(), TARGET_ROWS)?)?;
    let row_pixel_size_um = native.0 as f64 * scan.row_pixel_size_um / TARGET_ROWS as f64;
    Ok((
        BScan {
            pixels,
            row_pixel_size_um,
            ..scan.clone()
        },
        mask,
    ))
}

/// Min-max normalisation over every pixel of a volume (all its B-scans).
/// A constant volume maps to zeros.
pub fn normalize_scan(scans: &[BScan]) -> Result<Vec<BScan>> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in scans {
        for &v in s.pixels.data() {
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite pixel in scan {}/{}",
                    s.patient_id, s.scan_id
                )));
            }
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
    }
    if scans.is_empty() || lo > hi {
        return Err(Error::Data("cannot normalise an empty volume".into()));
    }
    let range = hi - lo;
    if range == 0.0 {
        warn!(
            "constant volume {}/{} (value {lo}); normalised to zeros",
            scans[0].patient_id, scans[0].scan_id
        );
    }
    Ok(scans
        .iter()
        .map(|s| {
            let mut out = s.clone();
            for v in out.pixels.data_mut() {
                *v = if range == 0.0 {
                    0.0
                } else {
                    ((*v as f64 - lo) / range) as f32
                };
            }
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vendor;
    use proptest::prelude::*;

    fn scan(vendor: Vendor, f: impl Fn(usize, usize) -> f32) -> BScan {
        let (r, c) = vendor.native_dims();
        let data = (0..r * c).map(|i| f(i / c, i % c)).collect();
        BScan::native(Grid::new(r, c, data).unwrap(), vendor, "p1", "s1", 0).unwrap()
    }

    #[test]
    fn row_pixel_sizes() {
        let m = LabelMask::zeros(1024, 512);
        let (c, _) = rescale_bscan(&scan(Vendor::Cirrus, |_, _| 1.0), &m).unwrap();
        assert!((c.row_pixel_size_um - 6.272).abs() < 1e-12);
        let m = LabelMask::zeros(496, 512);
        let (s, _) = rescale_bscan(&scan(Vendor::Spectralis, |_, _| 1.0), &m).unwrap();
        assert!((s.row_pixel_size_um - 496.0 * 3.87 / 320.0).abs() < 1e-12);
        assert_eq!(s.pixels.dims(), (320, 512));
        assert_eq!(s.col_pixel_size_um, 11.23);
    }

    #[test]
    fn constants_preserved() {
        let s = scan(Vendor::Cirrus, |_, _| 0.37);
        let mut mask = LabelMask::zeros(1024, 512);
        for r in 0..1024 {
            for c in 0..512 {
                mask.set(r, c, true);
            }
        }
        let (out, m) = rescale_bscan(&s, &mask).unwrap();
        assert!(out.pixels.data().iter().all(|&v| v == 0.37));
        assert!(m.pixels().data().iter().all(|&v| v == 1));
    }

    #[test]
    fn wrong_dims_rejected() {
        let mut s = scan(Vendor::Spectralis, |_, _| 0.0);
        s.pixels = Grid::filled(500, 512, 0.0);
        assert!(rescale_bscan(&s, &LabelMask::zeros(500, 512)).is_err());
    }

    #[test]
    fn bilinear_matches_hand_values() {
        // 4 rows -> 2 rows: output row i samples source row 2i + 0.5.
        let g = Grid::new(4, 1, vec![0.0, 2.0, 4.0, 8.0]).unwrap();
        assert_eq!(rescale_rows_bilinear(&g, 2).unwrap().data(), &[1.0, 6.0]);
        // 2 rows -> 4 rows: sources -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
        let g = Grid::new(2, 1, vec![0.0, 4.0]).unwrap();
        assert_eq!(rescale_rows_bilinear(&g, 4).unwrap().data(), &[0.0, 1.0, 3.0, 4.0]);
        assert_eq!(rescale_rows_nearest(&g, 4).unwrap().data(), &[0.0, 0.0, 4.0, 4.0]);
    }

    #[test]
    fn normalization_examples() {
        let mut a = scan(Vendor::Spectralis, |_, _| 112.0);
        a.pixels.set(0, 0, 12.0);
        a.pixels.set(0, 1, 212.0);
        let out = normalize_scan(&[a]).unwrap();
        assert_eq!(out[0].pixels.get(0, 2), 0.5);
        assert_eq!(out[0].pixels.get(0, 0), 0.0);
        assert_eq!(out[0].pixels.get(0, 1), 1.0);

        let unit = scan(Vendor::Spectralis, |r, c| if (r + c) % 2 == 0 { 0.0 } else { 1.0 });
        assert_eq!(normalize_scan(std::slice::from_ref(&unit)).unwrap()[0], unit);

        let flat = scan(Vendor::Spectralis, |_, _| 5.0);
        assert!(normalize_scan(&[flat]).unwrap()[0]
            .pixels
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_is_volume_wide() {
        let a = scan(Vendor::Spectralis, |_, _| 10.0);
        let mut b = scan(Vendor::Spectralis, |_, _| 10.0);
        b.pixels.set(5, 5, 30.0);
        let out = normalize_scan(&[a, b]).unwrap();
        assert!(out[0].pixels.data().iter().all(|&v| v == 0.0));
        assert_eq!(out[1].pixels.get(5, 5), 1.0);
    }

    proptest! {
        #[test]
        fn normalization_extrema_and_idempotence(vals in prop::collection::vec(-1e4f32..1e4, 8)) {
            prop_assume!(vals.iter().any(|&v| v != vals[0]));
            let mut s = scan(Vendor::Spectralis, |_, _| vals[0]);
            for (i, &v) in vals.iter().enumerate() {
                s.pixels.set(i, i, v);
            }
            let once = normalize_scan(&[s]).unwrap();
            let d = once[0].pixels.data();
            let lo = d.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = d.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert_eq!((lo, hi), (0.0, 1.0));
            let twice = normalize_scan(&once).unwrap();
            prop_assert_eq!(&twice, &once);
        }

        #[test]
        fn masks_stay_binary(bits in prop::collection::vec(0u8..2, 1024)) {
            let mut grid = Grid::filled(1024, 512, 0u8);
            for (r, &b) in bits.iter().enumerate() {
                grid.set(r, r % 512, b);
            }
            let m = LabelMask::new(grid).unwrap();
            let (_, out) = rescale_bscan(&scan(Vendor::Cirrus, |_, _| 0.0), &m).unwrap();
            prop_assert!(out.pixels().data().iter().all(|&v| v <= 1));
        }
    }
}

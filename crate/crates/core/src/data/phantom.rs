//! Synthetic OCT-like B-scans with exactly known HRF annotations.
//!
//! Each volume gets a curved stack of retinal bands of differing
//! reflectivity over a dark vitreous and a fading choroid. Foci are bright
//! ellipses placed inside the retina, brighter than every band. Foci radii
//! are specified in rescaled (320-row) pixels and stretched along rows at
//! native resolution so they come out round after vendor rescaling.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use log::info;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    split_by_patient, write_image_png, write_mask_png, BScan, DatasetManifest, Disease, Grid, LabelMask, ManifestEntry,
    Vendor, VendorFilter, TABLE1_FRACTIONS, TARGET_ROWS,
};
use crate::error::{Error, Result};

pub type PhantomVendors = VendorFilter;

/// Full-scale raw intensity of the 16-bit images.
const FULL_SCALE: f64 = 65535.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub images: usize,
    pub slices_per_scan: usize,
    /// Inclusive range of foci drawn per image.
    pub foci_per_image: (usize, usize),
    /// Inclusive range of focus radii in rescaled pixels.
    pub focus_radius: (f64, f64),
    /// Number of retinal bands in the background model.
    pub layers: usize,
    pub noise_std: f64,
    pub vendors: PhantomVendors,
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            images: 20,
            slices_per_scan: 5,
            foci_per_image: (1, 6),
            focus_radius: (2.0, 4.5),
            layers: 6,
            noise_std: 0.03,
            vendors: VendorFilter::Both,
            split_fractions: TABLE1_FRACTIONS,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.images == 0 || self.slices_per_scan == 0 || self.layers == 0 {
            return bad("images, slices_per_scan and layers must be positive".into());
        }
        let (lo, hi) = self.focus_radius;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!(
                "focus radius range must satisfy 0 < min <= max, got {lo}..{hi}"
            ));
        }
        if self.foci_per_image.0 > self.foci_per_image.1 {
            return bad(format!("foci_per_image range is empty: {:?}", self.foci_per_image));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        // Foci live inside the retina, which spans well under half the depth.
        let diameter = 2.0 * hi + 1.0;
        if diameter > TARGET_ROWS as f64 / 4.0 || diameter > 512.0 {
            return bad(format!(
                "focus diameter {diameter:.1} px does not fit inside the retina of a {TARGET_ROWS}-row image"
            ));
        }
        Ok(())
    }
}

/// An elliptical focus in native pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Focus {
    pub row: f64,
    pub col: f64,
    pub radius_rows: f64,
    pub radius_cols: f64,
    pub intensity: f64,
}

impl Focus {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        let dy = (r as f64 - self.row) / self.radius_rows;
        let dx = (c as f64 - self.col) / self.radius_cols;
        dy * dy + dx * dx <= 1.0
    }

    /// Marks every lattice point inside the ellipse.
    pub fn rasterize(&self, mask: &mut LabelMask) {
        let (rows, cols) = mask.dims();
        let r0 = (self.row - self.radius_rows).floor().max(0.0) as usize;
        let r1 = ((self.row + self.radius_rows).ceil() as usize).min(rows - 1);
        let c0 = (self.col - self.radius_cols).floor().max(0.0) as usize;
        let c1 = ((self.col + self.radius_cols).ceil() as usize).min(cols - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                if self.contains(r, c) {
                    mask.set(r, c, true);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub scans: Vec<BScan>,
    pub masks: Vec<LabelMask>,
    pub foci: Vec<Vec<Focus>>,
    pub manifest: DatasetManifest,
}

/// Per-volume retinal geometry, in fractions of image depth.
struct Volume {
    vendor: Vendor,
    top: f64,
    amplitude: f64,
    period: f64,
    phase: f64,
    thickness: Vec<f64>,
    intensity: Vec<f64>,
}

impl Volume {
    fn draw(vendor: Vendor, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let retina_depth = rng.random_range(0.28..0.36);
        let mut thickness: Vec<f64> = (0..layers).map(|_| rng.random_range(0.6..1.4)).collect();
        let total: f64 = thickness.iter().sum();
        thickness.iter_mut().for_each(|t| *t *= retina_depth / total);
        // Alternating dim/bright bands; the outermost band (RPE-like) is the brightest.
        let mut intensity: Vec<f64> = (0..layers)
            .map(|i| {
                let base = if i % 2 == 0 { 0.32 } else { 0.18 };
                base + rng.random_range(-0.04..0.04)
            })
            .collect();
        if let Some(last) = intensity.last_mut() {
            *last = rng.random_range(0.48..0.56);
        }
        Self {
            vendor,
            top: rng.random_range(0.22..0.32),
            amplitude: rng.random_range(0.01..0.05),
            period: rng.random_range(0.8..1.6),
            phase: rng.random_range(0.0..2.0 * PI),
            thickness,
            intensity,
        }
    }

    /// Band boundaries (fractions of depth) at a column, for one slice.
    fn boundaries(&self, col_frac: f64, slice_shift: f64) -> Vec<f64> {
        let top = self.top + self.amplitude * (2.0 * PI * col_frac / self.period + self.phase + slice_shift).sin();
        let mut out = Vec::with_capacity(self.thickness.len() + 1);
        let mut y = top;
        out.push(y);
        for (i, t) in self.thickness.iter().enumerate() {
            // Gentle independent undulation per band.
            y += t * (1.0 + 0.15 * (2.0 * PI * col_frac * (i + 2) as f64 + self.phase * i as f64).sin());
            out.push(y);
        }
        out
    }

    fn background(&self, depth: f64, bounds: &[f64]) -> f64 {
        let (top, bottom) = (bounds[0], bounds[bounds.len() - 1]);
        if depth < top {
            0.04
        } else if depth >= bottom {
            // Choroid fading with depth.
            0.04 + 0.22 * (-(depth - bottom) / 0.12).exp()
        } else {
            let band = bounds.windows(2).position(|w| depth < w[1]).unwrap_or(bounds.len() - 2);
            self.intensity[band]
        }
    }
}

struct Layout {
    entries: Vec<ManifestEntry>,
    volume_of: Vec<usize>,
    volumes: Vec<Vendor>,
}

fn layout(params: &PhantomParams) -> Result<Layout> {
    params.validate()?;
    let n_volumes = params.images.div_ceil(params.slices_per_scan);
    let volumes: Vec<Vendor> = (0..n_volumes)
        .map(|v| match params.vendors {
            VendorFilter::Cirrus => Vendor::Cirrus,
            VendorFilter::Spectralis => Vendor::Spectralis,
            VendorFilter::Both => Vendor::ALL[v % 2],
        })
        .collect();
    let mut entries = Vec::with_capacity(params.images);
    let mut volume_of = Vec::with_capacity(params.images);
    for i in 0..params.images {
        let v = i / params.slices_per_scan;
        let slice = (i % params.slices_per_scan) as u32;
        // Every third patient contributes two volumes.
        let patient = v - v / 3;
        let scan = v % 3 / 2;
        let stem = format!("P{patient:04}_S{scan}_{slice:03}");
        entries.push(ManifestEntry {
            patient_id: format!("P{patient:04}"),
            scan_id: format!("S{scan}"),
            slice_index: slice,
            vendor: volumes[v],
            disease: Disease::ALL[patient % 3],
            split: None,
            image_path: format!("images/{stem}.png"),
            mask_path: format!("masks/{stem}_mask.png"),
        });
        volume_of.push(v);
    }
    let manifest = split_by_patient(&DatasetManifest::new(entries, ""), params.split_fractions, params.seed)?;
    Ok(Layout {
        entries: manifest.entries,
        volume_of,
        volumes,
    })
}

/// Renders images lazily so large phantoms never sit in memory at once.
struct Renderer<'p> {
    params: &'p PhantomParams,
    layout: Layout,
    geometry: Vec<Volume>,
}

impl<'p> Renderer<'p> {
    fn new(params: &'p PhantomParams) -> Result<Self> {
        let layout = layout(params)?;
        let geometry = layout
            .volumes
            .iter()
            .enumerate()
            .map(|(v, &vendor)| {
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
                rng.set_stream(1 << 32 | v as u64);
                Volume::draw(vendor, params.layers, &mut rng)
            })
            .collect();
        Ok(Self {
            params,
            layout,
            geometry,
        })
    }

    fn render(&self, i: usize) -> Result<(BScan, LabelMask, Vec<Focus>)> {
        let entry = &self.layout.entries[i];
        let volume = &self.geometry[self.layout.volume_of[i]];
        let mut rng = ChaCha8Rng::seed_from_u64(self.params.seed);
        rng.set_stream(i as u64);
        let (rows, cols) = volume.vendor.native_dims();
        let stretch = rows as f64 / TARGET_ROWS as f64;
        let slice_shift = 0.05 * entry.slice_index as f64;

        let mut values = vec![0.0f64; rows * cols];
        let mut retina = Vec::with_capacity(cols);
        for c in 0..cols {
            let bounds = volume.boundaries(c as f64 / cols as f64, slice_shift);
            retina.push((bounds[0], bounds[bounds.len() - 1]));
            for r in 0..rows {
                values[r * cols + c] = volume.background(r as f64 / rows as f64, &bounds);
            }
        }

        let (lo, hi) = self.params.foci_per_image;
        let count = rng.random_range(lo..=hi);
        let mut mask = LabelMask::zeros(rows, cols);
        let mut foci = Vec::with_capacity(count);
        for _ in 0..count {
            let radius = if self.params.focus_radius.0 == self.params.focus_radius.1 {
                self.params.focus_radius.0
            } else {
                rng.random_range(self.params.focus_radius.0..=self.params.focus_radius.1)
            };
            let (ry, rx) = (radius * stretch, radius);
            let col = rng.random_range(rx + 1.0..cols as f64 - rx - 2.0);
            let (top, bottom) = retina[col as usize];
            let (top, bottom) = (top * rows as f64 + ry + 1.0, bottom * rows as f64 - ry - 1.0);
            let row = if bottom > top {
                rng.random_range(top..bottom)
            } else {
                (top + bottom) / 2.0
            };
            let focus = Focus {
                row,
                col,
                radius_rows: ry,
                radius_cols: rx,
                intensity: rng.random_range(0.8..0.95),
            };
            focus.rasterize(&mut mask);
            foci.push(focus);
        }
        for f in &foci {
            let r0 = (f.row - f.radius_rows).floor().max(0.0) as usize;
            let r1 = ((f.row + f.radius_rows).ceil() as usize).min(rows - 1);
            let c0 = (f.col - f.radius_cols).floor().max(0.0) as usize;
            let c1 = ((f.col + f.radius_cols).ceil() as usize).min(cols - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    if f.contains(r, c) {
                        let v = &mut values[r * cols + c];
                        *v = v.max(f.intensity);
                    }
                }
            }
        }

        let noise = Normal::new(0.0, self.params.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        let pixels: Vec<f32> = values
            .into_iter()
            .map(|v| {
                let n = if self.params.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                ((v + n).clamp(0.0, 1.0) * FULL_SCALE).round() as f32
            })
            .collect();
        let scan = BScan::native(
            Grid::new(rows, cols, pixels)?,
            volume.vendor,
            &entry.patient_id,
            &entry.scan_id,
            entry.slice_index,
        )?;
        Ok((scan, mask, foci))
    }
}

/// Builds a phantom dataset in memory (native vendor geometry, raw 16-bit
/// intensities, exact masks) with a patient-wise split manifest.
pub fn generate_phantom(params: &PhantomParams) -> Result<Phantom> {
    let renderer = Renderer::new(params)?;
    let mut scans = Vec::with_capacity(params.images);
    let mut masks = Vec::with_capacity(params.images);
    let mut foci = Vec::with_capacity(params.images);
    for i in 0..params.images {
        let (s, m, f) = renderer.render(i)?;
        scans.push(s);
        masks.push(m);
        foci.push(f);
    }
    Ok(Phantom {
        scans,
        masks,
        foci,
        manifest: DatasetManifest::new(renderer.layout.entries, ""),
    })
}

/// Renders a phantom straight to `dir` as `images/*.png`, `masks/*.png` and
/// `manifest.csv`, one image at a time.
pub fn write_phantom(params: &PhantomParams, dir: &Path) -> Result<DatasetManifest> {
    let renderer = Renderer::new(params)?;
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for i in 0..params.images {
        let (scan, mask, _) = renderer.render(i)?;
        let e = &renderer.layout.entries[i];
        write_image_png(&dir.join(&e.image_path), &scan.pixels)?;
        write_mask_png(&dir.join(&e.mask_path), &mask)?;
    }
    let manifest = DatasetManifest::new(renderer.layout.entries, dir);
    manifest.write(&dir.join("manifest.csv"))?;
    info!("wrote {} phantom images to {}", params.images, dir.display());
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, rescale_bscan, Split};

    fn small(images: usize) -> PhantomParams {
        PhantomParams {
            images,
            slices_per_scan: 2,
            seed: 11,
            ..PhantomParams::default()
        }
    }

    #[test]
    fn disc_of_radius_two_has_thirteen_pixels() {
        let oracle = (-2i32..=2)
            .flat_map(|dy| (-2i32..=2).map(move |dx| dy * dy + dx * dx))
            .filter(|&d| d <= 4)
            .count();
        assert_eq!(oracle, 13);
        let mut m = LabelMask::zeros(20, 20);
        Focus {
            row: 10.0,
            col: 7.0,
            radius_rows: 2.0,
            radius_cols: 2.0,
            intensity: 1.0,
        }
        .rasterize(&mut m);
        assert_eq!(m.positives(), oracle);
    }

    #[test]
    fn zero_foci_gives_empty_masks() {
        let p = generate_phantom(&PhantomParams {
            foci_per_image: (0, 0),
            ..small(6)
        })
        .unwrap();
        assert!(p.masks.iter().all(|m| m.positives() == 0));
    }

    #[test]
    fn deterministic_bits() {
        let a = generate_phantom(&small(6)).unwrap();
        let b = generate_phantom(&small(6)).unwrap();
        assert_eq!(a.scans, b.scans);
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.manifest, b.manifest);
        let c = generate_phantom(&PhantomParams { seed: 12, ..small(6) }).unwrap();
        assert_ne!(a.scans, c.scans);
    }

    #[test]
    fn foci_are_brighter_and_masks_match_foci() {
        let p = generate_phantom(&PhantomParams {
            noise_std: 0.0,
            ..small(6)
        })
        .unwrap();
        for ((scan, mask), foci) in p.scans.iter().zip(&p.masks).zip(&p.foci) {
            assert_eq!(scan.pixels.dims(), scan.vendor.native_dims());
            let mut expected = LabelMask::zeros(mask.dims().0, mask.dims().1);
            foci.iter().for_each(|f| f.rasterize(&mut expected));
            assert_eq!(&expected, mask);
            let max_bg = scan
                .pixels
                .data()
                .iter()
                .zip(mask.pixels().data())
                .filter(|(_, &m)| m == 0)
                .map(|(&v, _)| v)
                .fold(0.0f32, f32::max);
            let min_fg = scan
                .pixels
                .data()
                .iter()
                .zip(mask.pixels().data())
                .filter(|(_, &m)| m == 1)
                .map(|(&v, _)| v)
                .fold(f32::INFINITY, f32::min);
            assert!(min_fg > max_bg, "{min_fg} <= {max_bg}");
        }
    }

    #[test]
    fn foci_stay_round_after_rescale() {
        let p = generate_phantom(&PhantomParams {
            foci_per_image: (1, 1),
            focus_radius: (4.0, 4.0),
            vendors: VendorFilter::Cirrus,
            split_fractions: [1.0, 0.0, 0.0],
            ..small(2)
        })
        .unwrap();
        let (_, m) = rescale_bscan(&p.scans[0], &p.masks[0]).unwrap();
        // Area of a radius-4 disc is about 50 pixels.
        assert!((35..=65).contains(&m.positives()), "{}", m.positives());
    }

    #[test]
    fn oversized_foci_rejected() {
        assert!(generate_phantom(&PhantomParams {
            focus_radius: (2.0, 60.0),
            ..small(2)
        })
        .is_err());
    }

    #[test]
    fn vendors_alternate_and_patients_split() {
        let p = generate_phantom(&small(12)).unwrap();
        let vendors: Vec<Vendor> = p.scans.iter().map(|s| s.vendor).collect();
        assert!(vendors.contains(&Vendor::Cirrus) && vendors.contains(&Vendor::Spectralis));
        assert!(p.manifest.entries.iter().all(|e| e.split.is_some()));
        let sets = Split::ALL.map(|s| p.manifest.patients(s));
        assert!(sets[0].is_disjoint(&sets[2]) && sets[0].is_disjoint(&sets[1]));
    }

    #[test]
    fn written_phantom_loads_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let params = small(6);
        let m = write_phantom(&params, dir.path()).unwrap();
        let reread = DatasetManifest::read(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(reread.entries, m.entries);
        let samples = load_dataset(&reread, VendorFilter::Both, &Split::ALL).unwrap();
        assert_eq!(samples.len(), 6);
        let mem = generate_phantom(&params).unwrap();
        for (s, (scan, mask)) in samples.iter().zip(mem.scans.iter().zip(&mem.masks)) {
            assert_eq!(s.scan.pixels.dims(), (320, 512));
            let (_, rm) = rescale_bscan(scan, mask).unwrap();
            assert_eq!(rm, s.mask);
            assert!(s.scan.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Grid, LabelMask};
use crate::error::{Error, Result};

pub const PATCH_ROWS: usize = 128;
pub const PATCH_COLS: usize = 32;

/// Co-located image and label windows.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub x: Grid<f32>,
    pub y: LabelMask,
    /// Index of the source image in whatever collection it was drawn from.
    pub source: usize,
    pub row: usize,
    pub col: usize,
}

pub fn extract_patch(image: &Grid<f32>, mask: &LabelMask, source: usize, row: usize, col: usize) -> Result<PatchPair> {
    if image.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "image {:?} and mask {:?} differ in size",
            image.dims(),
            mask.dims()
        )));
    }
    Ok(PatchPair {
        x: image.crop(row, col, PATCH_ROWS, PATCH_COLS)?,
        y: mask.crop(row, col, PATCH_ROWS, PATCH_COLS)?,
        source,
        row,
        col,
    })
}

/// Seeded patch-offset generator.
///
/// With `foreground_bias = 0` (the default) offsets are uniform over every
/// valid top-left position. A positive bias is the probability of instead
/// centring the draw on a random annotated pixel.
#[derive(Clone, Debug)]
pub struct PatchSampler {
    rng: ChaCha8Rng,
    foreground_bias: f64,
}

impl PatchSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            foreground_bias: 0.0,
        }
    }

    pub fn with_foreground_bias(mut self, bias: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&bias) {
            return Err(Error::InvalidArgument(format!(
                "foreground bias must lie in [0,1], got {bias}"
            )));
        }
        self.foreground_bias = bias;
        Ok(self)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Top-left corner of the next window on an image of the given size.
    pub fn offset(&mut self, mask: &LabelMask) -> Result<(usize, usize)> {
        let (rows, cols) = mask.dims();
        if rows < PATCH_ROWS || cols < PATCH_COLS {
            return Err(Error::Shape(format!(
                "{PATCH_ROWS}x{PATCH_COLS} patch does not fit a {rows}x{cols} image"
            )));
        }
        let (max_r, max_c) = (rows - PATCH_ROWS, cols - PATCH_COLS);
        if self.foreground_bias > 0.0 && self.rng.random_bool(self.foreground_bias) {
            let positives: Vec<usize> = mask
                .pixels()
                .data()
                .iter()
                .enumerate()
                .filter_map(|(i, &v)| (v == 1).then_some(i))
                .collect();
            if !positives.is_empty() {
                let p = positives[self.rng.random_range(0..positives.len())];
                let (pr, pc) = (p / cols, p % cols);
                let r_lo = pr.saturating_sub(PATCH_ROWS - 1);
                let c_lo = pc.saturating_sub(PATCH_COLS - 1);
                let r = self.rng.random_range(r_lo..=pr.min(max_r));
                let c = self.rng.random_range(c_lo..=pc.min(max_c));
                return Ok((r, c));
            }
        }
        Ok((self.rng.random_range(0..=max_r), self.rng.random_range(0..=max_c)))
    }

    pub fn sample(&mut self, image: &Grid<f32>, mask: &LabelMask, source: usize) -> Result<PatchPair> {
        let (r, c) = self.offset(mask)?;
        extract_patch(image, mask, source, r, c)
    }
}

/// Draws `k` uniformly placed 128×32 windows from one image.
pub fn sample_patches(image: &Grid<f32>, mask: &LabelMask, k: usize, seed: u64) -> Result<Vec<PatchPair>> {
    let mut sampler = PatchSampler::new(seed);
    (0..k).map(|_| sampler.sample(image, mask, 0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{TARGET_COLS, TARGET_ROWS};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn ramp() -> (Grid<f32>, LabelMask) {
        let img = Grid::new(
            TARGET_ROWS,
            TARGET_COLS,
            (0..TARGET_ROWS * TARGET_COLS).map(|i| i as f32).collect(),
        )
        .unwrap();
        let mut m = LabelMask::zeros(TARGET_ROWS, TARGET_COLS);
        m.set(200, 300, true);
        (img, m)
    }

    #[test]
    fn zero_count_is_empty() {
        let (img, m) = ramp();
        assert!(sample_patches(&img, &m, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn deterministic_and_exact_subwindows() {
        let (img, m) = ramp();
        let a = sample_patches(&img, &m, 50, 9).unwrap();
        let b = sample_patches(&img, &m, 50, 9).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert_eq!(p.x.dims(), (PATCH_ROWS, PATCH_COLS));
            for r in 0..PATCH_ROWS {
                for c in 0..PATCH_COLS {
                    assert_eq!(p.x.get(r, c), img.get(p.row + r, p.col + c));
                    assert_eq!(p.y.pixels().get(r, c), m.pixels().get(p.row + r, p.col + c));
                }
            }
        }
    }

    #[test]
    fn too_small_image_rejected() {
        let img = Grid::filled(100, 512, 0.0f32);
        assert!(sample_patches(&img, &LabelMask::zeros(100, 512), 1, 0).is_err());
    }

    #[test]
    fn foreground_bias_hits_the_focus() {
        let (img, m) = ramp();
        let mut s = PatchSampler::new(4).with_foreground_bias(1.0).unwrap();
        for _ in 0..100 {
            assert_eq!(s.sample(&img, &m, 0).unwrap().y.positives(), 1);
        }
        assert!(PatchSampler::new(0).with_foreground_bias(1.5).is_err());
    }

    fn chi_square_p(counts: &[u64], total: u64) -> f64 {
        let expected = total as f64 / counts.len() as f64;
        let stat: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
        1.0 - dist.cdf(stat)
    }

    #[test]
    fn offsets_uniform_chi_square() {
        // 193 x 481 valid top-left positions; marginals plus a coarse joint binning.
        let (_, m) = ramp();
        let n = 10_000u64;
        let mut s = PatchSampler::new(2024);
        let (nr, nc) = (TARGET_ROWS - PATCH_ROWS + 1, TARGET_COLS - PATCH_COLS + 1);
        assert_eq!((nr, nc), (193, 481));
        let mut rows = vec![0u64; nr];
        let mut cols = vec![0u64; nc];
        let mut joint = vec![0u64; 13 * 37];
        for _ in 0..n {
            let (r, c) = s.offset(&m).unwrap();
            rows[r] += 1;
            cols[c] += 1;
            joint[(r / 15).min(12) * 37 + (c / 13).min(36)] += 1;
        }
        assert!(chi_square_p(&rows, n) > 0.01);
        assert!(chi_square_p(&cols, n) > 0.01);
        // 193 = 12 * 15 + 13 and 481 = 37 * 13, so bin widths differ slightly at the edge row band.
        let expected: Vec<f64> = (0..13 * 37)
            .map(|b| {
                let rw = if b / 37 == 12 { 13.0 } else { 15.0 };
                n as f64 * rw * 13.0 / (nr * nc) as f64
            })
            .collect();
        let stat: f64 = joint
            .iter()
            .zip(&expected)
            .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
            .sum();
        let p = 1.0 - ChiSquared::new((joint.len() - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "joint chi-square p = {p}");
    }
}

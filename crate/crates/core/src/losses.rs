//! Training objectives: pixel-wise cross-entropy (binary and multi-class)
//! and the smooth Dice loss.
//!
//! Every loss comes in two forms: a plain function returning a
//! [`LossValue`], and a graph node (`*_node`) that participates in
//! backpropagation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{sigmoid, softmax_channels, Graph, Var};
use crate::models::OutputMode;
use crate::tensor::{Real, Tensor};

/// Smoothing term used when none is given.
pub const DEFAULT_DICE_EPSILON: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T: Real> {
    pub scalar: T,
    /// Per-pixel contributions, for the cross-entropy losses.
    pub per_pixel: Option<Tensor<T>>,
}

/// Which training objective to minimise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[serde(rename = "ce")]
    CrossEntropy,
    Dice,
}

impl Objective {
    pub const ALL: [Objective; 2] = [Objective::CrossEntropy, Objective::Dice];

    pub fn tag(self) -> &'static str {
        match self {
            Objective::CrossEntropy => "ce",
            Objective::Dice => "dice",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::CrossEntropy => "CE",
            Objective::Dice => "Dice",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" | "cross_entropy" => Ok(Objective::CrossEntropy),
            "dice" => Ok(Objective::Dice),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss `{other}` (expected ce|dice)"
            ))),
        }
    }
}

/// How the Dice sums are scoped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceReduction {
    /// One Dice ratio over every pixel in the batch.
    #[default]
    Batch,
    /// Dice per leading-axis sample, then averaged.
    PerImage,
}

fn check_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{what}: prediction {:?} vs target {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn check_binary<T: Real>(targets: &Tensor<T>, what: &str) -> Result<()> {
    if let Some(v) = targets.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return invalid(format!("{what}: targets must be 0 or 1, found {v:?}"));
    }
    Ok(())
}

fn check_one_hot<T: Real>(targets: &Tensor<T>) -> Result<()> {
    check_binary(targets, "multiclass cross-entropy")?;
    let (n, c, h, w) = targets.dims4()?;
    let plane = h * w;
    let t = targets.data();
    for i in 0..n {
        for px in 0..plane {
            let hot = (0..c).filter(|&j| t[(i * c + j) * plane + px] == T::one()).count();
            if hot != 1 {
                return invalid(format!(
                    "multiclass cross-entropy: pixel {px} of sample {i} has {hot} hot channels, expected 1"
                ));
            }
        }
    }
    Ok(())
}

/// `max(z,0) - z·y + ln(1 + e^{-|z|})`, i.e. `-y ln σ(z) - (1-y) ln(1-σ(z))`.
#[inline]
fn bce_pixel<T: Real>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

pub(crate) fn bce_forward<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<LossValue<T>> {
    check_same_shape(logits, targets, "binary cross-entropy")?;
    check_binary(targets, "binary cross-entropy")?;
    let per: Vec<T> = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&z, &y)| bce_pixel(z, y))
        .collect();
    let scalar = per.iter().copied().sum::<T>() / T::from_f64(per.len() as f64);
    Ok(LossValue {
        scalar,
        per_pixel: Some(Tensor::new(logits.shape().to_vec(), per)?),
    })
}

pub(crate) fn bce_backward<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>, upstream: T) -> Vec<T> {
    let scale = upstream / T::from_f64(logits.numel() as f64);
    logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&z, &y)| (sigmoid(z) - y) * scale)
        .collect()
}

pub(crate) fn softmax_ce_forward<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<LossValue<T>> {
    check_same_shape(logits, targets, "multiclass cross-entropy")?;
    check_one_hot(targets)?;
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let z = logits.data();
    let t = targets.data();
    let mut per = Vec::with_capacity(n * plane);
    for i in 0..n {
        for px in 0..plane {
            let at = |j: usize| (i * c + j) * plane + px;
            let m = (0..c).map(|j| z[at(j)]).fold(T::neg_infinity(), T::max);
            let lse = m + (0..c).map(|j| (z[at(j)] - m).exp()).sum::<T>().ln();
            let picked: T = (0..c).map(|j| t[at(j)] * z[at(j)]).sum();
            per.push(lse - picked);
        }
    }
    let scalar = per.iter().copied().sum::<T>() / T::from_f64(per.len() as f64);
    Ok(LossValue {
        scalar,
        per_pixel: Some(Tensor::new(vec![n, 1, h, w], per)?),
    })
}

pub(crate) fn softmax_ce_backward<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>, upstream: T) -> Result<Vec<T>> {
    let (n, _, h, w) = logits.dims4()?;
    let p = softmax_channels(logits)?;
    let scale = upstream / T::from_f64((n * h * w) as f64);
    Ok(p.data()
        .iter()
        .zip(targets.data())
        .map(|(&pi, &yi)| (pi - yi) * scale)
        .collect())
}

fn dice_groups<T: Real>(probs: &Tensor<T>, per_image: bool) -> usize {
    if per_image {
        probs.shape()[0]
    } else {
        1
    }
}

/// Returns (intersection, target sum, prediction sum) per group.
fn dice_sums<T: Real>(probs: &[T], targets: &[T], groups: usize) -> Vec<(T, T, T)> {
    let len = probs.len() / groups;
    probs
        .chunks(len)
        .zip(targets.chunks(len))
        .map(|(p, y)| {
            let mut inter = T::zero();
            let mut sy = T::zero();
            let mut sp = T::zero();
            for (&pi, &yi) in p.iter().zip(y) {
                inter += pi * yi;
                sy += yi;
                sp += pi;
            }
            (inter, sy, sp)
        })
        .collect()
}

pub(crate) fn dice_forward<T: Real>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
    epsilon: T,
    per_image: bool,
) -> Result<LossValue<T>> {
    check_same_shape(probs, targets, "dice loss")?;
    check_binary(targets, "dice loss")?;
    if !(epsilon > T::zero()) {
        return invalid(format!("dice loss epsilon must be > 0, got {epsilon:?}"));
    }
    if let Some(p) = probs.data().iter().find(|&&p| !(p >= T::zero() && p <= T::one())) {
        return invalid(format!("dice loss probabilities must lie in [0,1], found {p:?}"));
    }
    let groups = dice_groups(probs, per_image);
    let two = T::from_f64(2.0);
    let total: T = dice_sums(probs.data(), targets.data(), groups)
        .into_iter()
        .map(|(inter, sy, sp)| T::one() - (two * inter + epsilon) / (sy + sp + epsilon))
        .sum();
    Ok(LossValue {
        scalar: total / T::from_f64(groups as f64),
        per_pixel: None,
    })
}

pub(crate) fn dice_backward<T: Real>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
    epsilon: T,
    per_image: bool,
    upstream: T,
) -> Vec<T> {
    let groups = dice_groups(probs, per_image);
    let len = probs.numel() / groups;
    let two = T::from_f64(2.0);
    let scale = upstream / T::from_f64(groups as f64);
    let sums = dice_sums(probs.data(), targets.data(), groups);
    let mut grad = Vec::with_capacity(probs.numel());
    for (gi, &(inter, sy, sp)) in sums.iter().enumerate() {
        let denom = sy + sp + epsilon;
        let num = two * inter + epsilon;
        let d2 = denom * denom;
        for &y in &targets.data()[gi * len..(gi + 1) * len] {
            // d/dp [1 - num/denom] = -(2y·denom - num) / denom²
            grad.push(-(two * y * denom - num) / d2 * scale);
        }
    }
    grad
}

/// Mean binary cross-entropy between sigmoid(`logits`) and binary `targets`.
pub fn binary_cross_entropy<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<LossValue<T>> {
    bce_forward(logits, targets)
}

/// Mean over pixels of `-Σ_j y_j ln softmax(z)_j` for `[N, J, H, W]` logits
/// and one-hot targets.
pub fn multiclass_cross_entropy<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<LossValue<T>> {
    softmax_ce_forward(logits, targets)
}

/// `1 - (2 Σ y p + ε) / (Σ y + Σ p + ε)` summed over the whole batch.
pub fn dice_loss<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>, epsilon: T) -> Result<LossValue<T>> {
    dice_forward(probs, targets, epsilon, false)
}

pub fn dice_loss_with<T: Real>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
    epsilon: T,
    reduction: DiceReduction,
) -> Result<LossValue<T>> {
    dice_forward(probs, targets, epsilon, reduction == DiceReduction::PerImage)
}

pub fn binary_cross_entropy_node<T: Real>(g: &mut Graph<'_, T>, logits: Var, targets: Tensor<T>) -> Result<Var> {
    g.binary_cross_entropy(logits, targets)
}

pub fn multiclass_cross_entropy_node<T: Real>(g: &mut Graph<'_, T>, logits: Var, targets: Tensor<T>) -> Result<Var> {
    g.softmax_cross_entropy(logits, targets)
}

pub fn dice_loss_node<T: Real>(
    g: &mut Graph<'_, T>,
    probs: Var,
    targets: Tensor<T>,
    epsilon: T,
    reduction: DiceReduction,
) -> Result<Var> {
    g.dice(probs, targets, epsilon, reduction == DiceReduction::PerImage)
}

/// Two-channel one-hot encoding `[background, foreground]` of a binary mask
/// shaped `[N, 1, H, W]`.
pub fn one_hot_binary<T: Real>(mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = mask.dims4()?;
    if c != 1 {
        return shape_err(format!("one_hot_binary expects one channel, got {c}"));
    }
    check_binary(mask, "one_hot_binary")?;
    let plane = h * w;
    let mut data = Vec::with_capacity(2 * mask.numel());
    for i in 0..n {
        let m = &mask.data()[i * plane..(i + 1) * plane];
        data.extend(m.iter().map(|&y| T::one() - y));
        data.extend_from_slice(m);
    }
    Tensor::new(vec![n, 2, h, w], data)
}

/// Builds the training objective on top of raw network logits.
///
/// `mask` is the binary `[N, 1, H, W]` target. In softmax mode the
/// cross-entropy uses a one-hot encoding and Dice uses the foreground
/// channel probability.
pub fn objective_node<T: Real>(
    g: &mut Graph<'_, T>,
    logits: Var,
    mask: &Tensor<T>,
    objective: Objective,
    out_mode: OutputMode,
    epsilon: T,
    reduction: DiceReduction,
) -> Result<Var> {
    match (objective, out_mode) {
        (Objective::CrossEntropy, OutputMode::BinarySigmoid) => binary_cross_entropy_node(g, logits, mask.clone()),
        (Objective::CrossEntropy, OutputMode::Softmax) => {
            multiclass_cross_entropy_node(g, logits, one_hot_binary(mask)?)
        }
        (Objective::Dice, OutputMode::BinarySigmoid) => {
            let p = g.sigmoid(logits);
            dice_loss_node(g, p, mask.clone(), epsilon, reduction)
        }
        (Objective::Dice, OutputMode::Softmax) => {
            let p = g.softmax_channels(logits)?;
            let fg = g.select_channel(p, 1)?;
            dice_loss_node(g, fg, mask.clone(), epsilon, reduction)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let l = binary_cross_entropy(&t(&[1, 1, 1, 3], &[0.0; 3]), &t(&[1, 1, 1, 3], &[1.0, 0.0, 1.0])).unwrap();
        assert!((l.scalar - std::f64::consts::LN_2).abs() < 1e-15);
        for v in l.per_pixel.unwrap().data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_saturated_correct_prediction_is_zero() {
        let l = binary_cross_entropy(&t(&[2], &[800.0, -800.0]), &t(&[2], &[1.0, 0.0])).unwrap();
        assert_eq!(l.scalar, 0.0);
        let wrong = binary_cross_entropy(&t(&[1], &[800.0]), &t(&[1], &[0.0])).unwrap();
        assert!(wrong.scalar.is_finite() && (wrong.scalar - 800.0).abs() < 1e-9);
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        assert!(binary_cross_entropy(&t(&[2], &[0.0, 0.0]), &t(&[2], &[0.5, 1.0])).is_err());
        assert!(binary_cross_entropy(&t(&[2], &[0.0, 0.0]), &t(&[1], &[1.0])).is_err());
    }

    #[test]
    fn multiclass_equal_logits_is_ln2() {
        let logits = t(&[1, 2, 1, 2], &[0.3, -1.0, 0.3, -1.0]);
        let targets = t(&[1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        let l = multiclass_cross_entropy(&logits, &targets).unwrap();
        assert!((l.scalar - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn multiclass_confident_correct_is_zero() {
        let logits = t(&[1, 2, 1, 1], &[-300.0, 300.0]);
        let targets = t(&[1, 2, 1, 1], &[0.0, 1.0]);
        assert_eq!(multiclass_cross_entropy(&logits, &targets).unwrap().scalar, 0.0);
    }

    #[test]
    fn multiclass_rejects_non_one_hot() {
        let logits = t(&[1, 2, 1, 1], &[0.0, 0.0]);
        assert!(multiclass_cross_entropy(&logits, &t(&[1, 2, 1, 1], &[1.0, 1.0])).is_err());
        assert!(multiclass_cross_entropy(&logits, &t(&[1, 2, 1, 1], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn dice_perfect_and_empty_are_zero() {
        let y = t(&[4], &[1.0, 0.0, 1.0, 1.0]);
        for eps in [1e-6, 1.0, 10.0] {
            assert_eq!(dice_loss(&y, &y, eps).unwrap().scalar, 0.0);
            let z = t(&[4], &[0.0; 4]);
            assert_eq!(dice_loss(&z, &z, eps).unwrap().scalar, 0.0);
        }
    }

    #[test]
    fn dice_hand_value() {
        // 1 - (2·0.5 + 1) / (1 + 1 + 1) = 1/3
        let l = dice_loss(&t(&[2], &[0.5, 0.5]), &t(&[2], &[1.0, 0.0]), 1.0).unwrap();
        let independent = 1.0 - (2.0 * (1.0 * 0.5 + 0.0 * 0.5) + 1.0) / ((1.0 + 0.0) + (0.5 + 0.5) + 1.0);
        assert!((l.scalar - independent).abs() < 1e-15);
        assert!((l.scalar - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dice_rejects_bad_epsilon_and_probabilities() {
        let y = t(&[2], &[1.0, 0.0]);
        assert!(dice_loss(&y, &y, 0.0).is_err());
        assert!(dice_loss(&y, &y, -1.0).is_err());
        assert!(dice_loss(&t(&[2], &[1.5, 0.0]), &y, 1.0).is_err());
    }

    #[test]
    fn dice_per_image_averages_images() {
        let p = t(&[2, 1, 1, 2], &[1.0, 0.0, 0.5, 0.5]);
        let y = t(&[2, 1, 1, 2], &[1.0, 0.0, 1.0, 0.0]);
        let per = dice_loss_with(&p, &y, 1.0, DiceReduction::PerImage).unwrap().scalar;
        assert!((per - (0.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
        let batch = dice_loss_with(&p, &y, 1.0, DiceReduction::Batch).unwrap().scalar;
        assert!((batch - (1.0 - 4.0 / 5.0)).abs() < 1e-15);
    }

    #[test]
    fn one_hot_layout() {
        let m = t(&[1, 1, 1, 3], &[0.0, 1.0, 1.0]);
        assert_eq!(one_hot_binary(&m).unwrap().data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn bce_label_flip_symmetry(z in prop::collection::vec(-30.0f64..30.0, 1..32), bits in prop::collection::vec(any::<bool>(), 32)) {
            let n = z.len();
            let y: Vec<f64> = bits[..n].iter().map(|&b| b as u8 as f64).collect();
            let flipped_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
            let neg_z: Vec<f64> = z.iter().map(|v| -v).collect();
            let a = binary_cross_entropy(&t(&[n], &z), &t(&[n], &y)).unwrap().scalar;
            let b = binary_cross_entropy(&t(&[n], &neg_z), &t(&[n], &flipped_y)).unwrap().scalar;
            prop_assert!((a - b).abs() < 1e-10);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn two_class_softmax_matches_binary(z in prop::collection::vec(-20.0f64..20.0, 1..16), bits in prop::collection::vec(any::<bool>(), 16)) {
            let n = z.len();
            let y: Vec<f64> = bits[..n].iter().map(|&b| b as u8 as f64).collect();
            // logits (0, z) per pixel: channel 1 is foreground.
            let mut two = vec![0.0; n];
            two.extend_from_slice(&z);
            let mask = t(&[1, 1, 1, n], &y);
            let mc = multiclass_cross_entropy(&t(&[1, 2, 1, n], &two), &one_hot_binary(&mask).unwrap()).unwrap().scalar;
            let bin = binary_cross_entropy(&t(&[1, 1, 1, n], &z), &mask).unwrap().scalar;
            prop_assert!((mc - bin).abs() < 1e-10);
        }

        #[test]
        fn dice_in_unit_interval_and_decreases_toward_target(
            p in prop::collection::vec(0.0f64..1.0, 2..24),
            bits in prop::collection::vec(any::<bool>(), 24),
            eps in 0.01f64..5.0,
            pick in 0usize..24,
        ) {
            let n = p.len();
            let y: Vec<f64> = bits[..n].iter().map(|&b| b as u8 as f64).collect();
            let base = dice_loss(&t(&[n], &p), &t(&[n], &y), eps).unwrap().scalar;
            prop_assert!((0.0..1.0).contains(&base));
            let positives: Vec<usize> = (0..n).filter(|&i| y[i] == 1.0).collect();
            if !positives.is_empty() {
                let i = positives[pick % positives.len()];
                if p[i] < 0.99 {
                    let mut q = p.clone();
                    q[i] = (p[i] + 0.01).min(1.0);
                    let moved = dice_loss(&t(&[n], &q), &t(&[n], &y), eps).unwrap().scalar;
                    prop_assert!(moved < base);
                }
            }
        }
    }
}

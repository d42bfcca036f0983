//! Reverse-mode automatic differentiation over a recorded operation graph.
//!
//! A [`Graph`] is built fresh for every evaluation: leaves are inputs or
//! parameters (parameters may be borrowed to avoid copies), every op appends
//! a node holding its forward value, and [`Graph::backward`] walks the nodes
//! in reverse applying each op's explicit backward formula.

use std::borrow::Cow;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::conv::{self, ConvSpec};
use crate::error::{invalid, shape_err, Result};
use crate::losses;
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        spec: ConvSpec,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxChannels(Var),
    SelectChannel {
        input: Var,
        channel: usize,
    },
    ConcatChannels(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    BinaryCrossEntropy {
        logits: Var,
        targets: Tensor<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Tensor<T>,
    },
    Dice {
        probs: Var,
        targets: Tensor<T>,
        epsilon: T,
        per_image: bool,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// A single-evaluation computation graph.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every tracked leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Adds the gradient of `var` (if any) into `tensor.grad`.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Adds an owned leaf. It is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let tracked = t.requires_grad();
        self.push(Cow::Owned(t), Op::Leaf, tracked)
    }

    /// Adds a constant input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Adds a borrowed, differentiated leaf (a model parameter).
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Adds a borrowed leaf that is never differentiated.
    pub fn frozen(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        let node = self.nodes.swap_remove(v.0);
        node.value.into_owned()
    }

    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let tracked = self.tracked(x);
        self.push(Cow::Owned(value), op, tracked)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let y = conv::conv2d(self.value(input), self.value(weight), self.value(bias), &spec)?;
        let tracked = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        Ok(self.push(
            Cow::Owned(y),
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            tracked,
        ))
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let y = conv::conv_transpose2d(self.value(input), self.value(weight), self.value(bias), &spec)?;
        let tracked = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        Ok(self.push(
            Cow::Owned(y),
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                spec,
            },
            tracked,
        ))
    }

    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let (y, argmax) = conv::max_pool2d(self.value(input))?;
        Ok(self.unary(input, y, Op::MaxPool2d { input, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.unary(x, y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.unary(x, y, Op::Sigmoid(x))
    }

    /// Per-pixel softmax over the channel axis of an `[N, J, H, W]` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let y = softmax_channels(self.value(x))?;
        Ok(self.unary(x, y, Op::SoftmaxChannels(x)))
    }

    /// Extracts channel `channel` of an `[N, C, H, W]` tensor as `[N, 1, H, W]`.
    pub fn select_channel(&mut self, input: Var, channel: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if channel >= c {
            return invalid(format!("channel {channel} out of range for {c} channels"));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * plane);
        for i in 0..n {
            let start = (i * c + channel) * plane;
            data.extend_from_slice(&x.data()[start..start + plane]);
        }
        let y = Tensor::new(vec![n, 1, h, w], data)?;
        Ok(self.unary(input, y, Op::SelectChannel { input, channel }))
    }

    /// Stacks `a` and `b` along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = concat_channels(self.value(a), self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Cow::Owned(y), Op::ConcatChannels(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(format!("add: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Cow::Owned(y), Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(format!("mul: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Cow::Owned(y), Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.unary(x, y, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.unary(x, y, Op::Sum(x))
    }

    pub(crate) fn binary_cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let loss = losses::bce_forward(self.value(logits), &targets)?;
        let y = Tensor::scalar(loss.scalar);
        Ok(self.unary(logits, y, Op::BinaryCrossEntropy { logits, targets }))
    }

    pub(crate) fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let loss = losses::softmax_ce_forward(self.value(logits), &targets)?;
        let y = Tensor::scalar(loss.scalar);
        Ok(self.unary(logits, y, Op::SoftmaxCrossEntropy { logits, targets }))
    }

    pub(crate) fn dice(&mut self, probs: Var, targets: Tensor<T>, epsilon: T, per_image: bool) -> Result<Var> {
        let loss = losses::dice_forward(self.value(probs), &targets, epsilon, per_image)?;
        let y = Tensor::scalar(loss.scalar);
        Ok(self.unary(
            probs,
            y,
            Op::Dice {
                probs,
                targets,
                epsilon,
                per_image,
            },
        ))
    }

    /// Hash of every piecewise-linear branch taken during the forward pass
    /// (ReLU signs, max-pool winners). Two evaluations with equal signatures
    /// lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let numel = self.value(root).numel();
        if numel != 1 {
            return invalid(format!("backward needs a scalar root, got {numel} elements"));
        }
        self.backward_with_seed(root, vec![T::one()])
    }

    /// Backpropagates an arbitrary upstream gradient `seed` from `root`.
    pub fn backward_with_seed(&self, root: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        if seed.len() != self.value(root).numel() {
            return shape_err("backward seed does not match root shape");
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, g, &mut grads)?;
        }
        // Only leaves keep their gradient; everything else was consumed above.
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'a, T>, g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let dy = Tensor::new(out.shape().to_vec(), g)?;
                let (dx, dw, db) = conv::conv2d_backward(self.value(*input), self.value(*weight), spec, &dy)?;
                self.route(*input, dx.into_data(), grads);
                self.route(*weight, dw.into_data(), grads);
                self.route(*bias, db.into_data(), grads);
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let dy = Tensor::new(out.shape().to_vec(), g)?;
                let (dx, dw, db) = conv::conv_transpose2d_backward(self.value(*input), self.value(*weight), spec, &dy)?;
                self.route(*input, dx.into_data(), grads);
                self.route(*weight, dw.into_data(), grads);
                self.route(*bias, db.into_data(), grads);
            }
            Op::MaxPool2d { input, argmax } => {
                let dy = Tensor::new(out.shape().to_vec(), g)?;
                let dx = conv::max_pool2d_backward(self.value(*input).shape(), argmax, &dy)?;
                self.route(*input, dx.into_data(), grads);
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gi)| if v > T::zero() { gi } else { T::zero() })
                    .collect();
                self.route(*x, dx, grads);
            }
            Op::Sigmoid(x) => {
                let dx = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, gi)| gi * s * (T::one() - s))
                    .collect();
                self.route(*x, dx, grads);
            }
            Op::SoftmaxChannels(x) => {
                let (n, c, h, w) = out.dims4()?;
                let plane = h * w;
                let p = out.data();
                let mut dx = vec![T::zero(); p.len()];
                for i in 0..n {
                    let base = i * c * plane;
                    for px in 0..plane {
                        let mut dot = T::zero();
                        for j in 0..c {
                            let k = base + j * plane + px;
                            dot += g[k] * p[k];
                        }
                        for j in 0..c {
                            let k = base + j * plane + px;
                            dx[k] = p[k] * (g[k] - dot);
                        }
                    }
                }
                self.route(*x, dx, grads);
            }
            Op::SelectChannel { input, channel } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let plane = h * w;
                let mut dx = vec![T::zero(); n * c * plane];
                for i in 0..n {
                    let dst = (i * c + channel) * plane;
                    dx[dst..dst + plane].copy_from_slice(&g[i * plane..(i + 1) * plane]);
                }
                self.route(*input, dx, grads);
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for i in 0..n {
                    let base = i * (ca + cb) * plane;
                    da.extend_from_slice(&g[base..base + ca * plane]);
                    db.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                self.route(*a, da, grads);
                self.route(*b, db, grads);
            }
            Op::Add(a, b) => {
                if self.tracked(*b) {
                    self.route(*b, g.clone(), grads);
                }
                self.route(*a, g, grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.tracked(*a) {
                    let da = g.iter().zip(vb).map(|(&gi, &y)| gi * y).collect();
                    self.route(*a, da, grads);
                }
                if self.tracked(*b) {
                    let db = g.iter().zip(va).map(|(&gi, &x)| gi * x).collect();
                    self.route(*b, db, grads);
                }
            }
            Op::Scale(x, factor) => {
                let dx = g.into_iter().map(|gi| gi * *factor).collect();
                self.route(*x, dx, grads);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.route(*x, vec![g[0]; n], grads);
            }
            Op::BinaryCrossEntropy { logits, targets } => {
                let dx = losses::bce_backward(self.value(*logits), targets, g[0]);
                self.route(*logits, dx, grads);
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let dx = losses::softmax_ce_backward(self.value(*logits), targets, g[0])?;
                self.route(*logits, dx, grads);
            }
            Op::Dice {
                probs,
                targets,
                epsilon,
                per_image,
            } => {
                let dx = losses::dice_backward(self.value(*probs), targets, *epsilon, *per_image, g[0]);
                self.route(*probs, dx, grads);
            }
        }
        Ok(())
    }

    fn route(&self, to: Var, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        if self.tracked(to) {
            accumulate(&mut grads[to.0], g);
        }
    }
}

/// Logistic function, evaluated without overflow for any finite input.
#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Channel softmax of an `[N, J, H, W]` tensor with per-pixel max subtraction.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let z = x.data();
    let mut out = vec![T::zero(); z.len()];
    for i in 0..n {
        let base = i * c * plane;
        for px in 0..plane {
            let mut m = T::neg_infinity();
            for j in 0..c {
                m = m.max(z[base + j * plane + px]);
            }
            let mut total = T::zero();
            for j in 0..c {
                let e = (z[base + j * plane + px] - m).exp();
                out[base + j * plane + px] = e;
                total += e;
            }
            for j in 0..c {
                out[base + j * plane + px] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return shape_err(format!(
            "concat_channels needs equal N,H,W: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let plane = ha * wa;
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..na {
        data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::new(vec![na, ca + cb, ha, wa], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid(0.0f64), 0.5);
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn sigmoid_is_finite_at_extremes() {
        // e^-500 = 7.124576406741285532e-218 (50-digit reference value)
        let tiny = 7.124576406741285532e-218;
        let lo = sigmoid(-500.0f64);
        assert!(lo > 0.0 && ((lo - tiny) / tiny).abs() < 1e-14);
        // 1 - 7.1e-218 rounds to exactly 1.0 in double precision.
        let hi = sigmoid(500.0f64);
        assert!(hi.is_finite());
        assert_eq!(hi, 1.0);
        let hi32 = sigmoid(500.0f32);
        assert!(hi32.is_finite() && sigmoid(-500.0f32) >= 0.0);
    }

    #[test]
    fn softmax_equal_logits_are_uniform() {
        let x = Tensor::<f64>::full(vec![1, 2, 3, 3], 0.7);
        let p = softmax_channels(&x).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let x = Tensor::<f64>::new(vec![1, 2, 1, 1], vec![1000.0, -1000.0]).unwrap();
        let p = softmax_channels(&x).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn concat_shapes_and_sum() {
        let a = Tensor::<f64>::from_fn(vec![1, 2, 4, 4], |i| i as f64);
        let b = Tensor::<f64>::zeros(vec![1, 3, 4, 4]);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 5, 4, 4]);
        assert_eq!(c.sum(), a.sum());
        assert!(concat_channels(&a, &Tensor::zeros(vec![1, 3, 4, 5])).is_err());
    }

    #[test]
    fn backward_of_sum_over_concat_is_all_ones() {
        let a = Tensor::<f64>::from_fn(vec![2, 2, 3, 3], |i| i as f64).with_requires_grad(true);
        let b = Tensor::<f64>::from_fn(vec![2, 1, 3, 3], |i| -(i as f64)).with_requires_grad(true);
        let mut g = Graph::new();
        let va = g.leaf(a);
        let vb = g.leaf(b);
        let c = g.concat_channels(va, vb).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(va).unwrap().iter().all(|&v| v == 1.0));
        assert!(grads.get(vb).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![3], 2.0));
        let w = g.leaf(Tensor::full(vec![3], 1.0).with_requires_grad(true));
        let y = g.mul(x, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(vec![3], 2.0).with_requires_grad(true));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gradients_land_in_tensor_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(vec![2], 3.0).with_requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        let mut t = Tensor::full(vec![2], 3.0).with_requires_grad(true);
        grads.accumulate_into(x, &mut t).unwrap();
        assert_eq!(t.grad().unwrap(), &[6.0, 6.0]);
    }
}

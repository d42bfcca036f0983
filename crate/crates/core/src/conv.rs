//! 2-d convolution, transposed convolution and max pooling kernels on NCHW
//! tensors. These are the raw forward/backward routines; the autograd graph
//! in [`crate::graph`] calls into them.
//!
//! Convolutions lower to `im2col` followed by a GEMM. A transposed
//! convolution is implemented literally as the adjoint of the strided
//! convolution with the same spec, so `conv_transpose2d` forward is the
//! input-gradient pass of `conv2d` and vice versa.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero padding chosen so the output is `ceil(H / stride)`; any odd
    /// remainder goes to the bottom/right edge.
    Same,
    /// No padding.
    Valid,
}

/// Hyperparameters of one convolution layer.
///
/// For [`conv_transpose2d`] the channel fields describe the transposed
/// operator itself: `in_channels` is what it consumes and `out_channels`
/// what it produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// 3×3, stride 1, `same` padding.
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (3, 3),
            stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn with_kernel(mut self, kh: usize, kw: usize) -> Self {
        self.kernel = (kh, kw);
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if self.in_channels == 0 || self.out_channels == 0 {
            return invalid(format!(
                "channel counts must be positive (in={}, out={})",
                self.in_channels, self.out_channels
            ));
        }
        if kh == 0 || kw == 0 || self.stride == 0 {
            return invalid(format!(
                "kernel ({kh}x{kw}) and stride ({}) must be positive",
                self.stride
            ));
        }
        if self.padding == Padding::Same && self.stride == 1 && (kh % 2 == 0 || kw % 2 == 0) {
            return invalid(format!("`same` padding needs odd kernel dims, got {kh}x{kw}"));
        }
        Ok(())
    }

    /// Weight shape `[out, in, kh, kw]` for a forward convolution.
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    /// Weight shape `[in, out, kh, kw]` for a transposed convolution.
    pub fn transposed_weight_shape(&self) -> [usize; 4] {
        [self.in_channels, self.out_channels, self.kernel.0, self.kernel.1]
    }

    /// Spatial bookkeeping for a forward convolution over an `h × w` input.
    pub fn geometry(&self, h: usize, w: usize) -> Result<ConvGeometry> {
        self.validate()?;
        let (kh, kw) = self.kernel;
        let s = self.stride;
        let (out_h, pad_top) = axis_geometry(h, kh, s, self.padding, "height")?;
        let (out_w, pad_left) = axis_geometry(w, kw, s, self.padding, "width")?;
        Ok(ConvGeometry {
            in_h: h,
            in_w: w,
            out_h,
            out_w,
            kh,
            kw,
            stride: s,
            pad_top,
            pad_left,
        })
    }

    /// Output spatial size of the transposed convolution applied to `h × w`.
    pub fn transposed_output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        if h == 0 || w == 0 {
            return invalid(format!("transposed conv input dims must be positive, got {h}x{w}"));
        }
        let (kh, kw) = self.kernel;
        let s = self.stride;
        Ok(match self.padding {
            Padding::Same => (h * s, w * s),
            Padding::Valid => ((h - 1) * s + kh, (w - 1) * s + kw),
        })
    }
}

fn axis_geometry(len: usize, k: usize, s: usize, padding: Padding, axis: &str) -> Result<(usize, usize)> {
    if len == 0 {
        return invalid(format!("input {axis} must be positive"));
    }
    match padding {
        Padding::Same => {
            let out = len.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(len);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if len < k {
                return shape_err(format!(
                    "input {axis} {len} is smaller than kernel {axis} {k} under `valid` padding"
                ));
            }
            Ok(((len - k) / s + 1, 0))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    /// Range of output columns `ox` whose tap `kj` lands inside the input.
    #[inline]
    fn valid_range(out: usize, len: usize, s: usize, pad: usize, k: usize) -> (usize, usize) {
        // need 0 <= o*s + k - pad < len
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(s) };
        let hi = if len + pad > k {
            ((len + pad - k - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Output columns per GEMM. Small samples are grouped into one tile and
/// large images are split into bands of output rows, so the unfolded matrix
/// stays cache-sized and deep, low-resolution layers still get wide GEMMs.
const TILE_COLUMNS: usize = 4096;

/// Output rows `oy0..oy1` of one sample, stored from column `col` of a tile.
#[derive(Clone, Copy, Debug)]
struct Segment {
    sample: usize,
    oy0: usize,
    oy1: usize,
    col: usize,
}

struct Tile {
    width: usize,
    segments: Vec<Segment>,
}

fn tiles(n: usize, out_h: usize, out_w: usize, target: usize) -> Vec<Tile> {
    let ohw = out_h * out_w;
    let mut out = Vec::new();
    if ohw >= target {
        let rows = (target / out_w).max(1);
        for sample in 0..n {
            for oy0 in (0..out_h).step_by(rows) {
                let oy1 = (oy0 + rows).min(out_h);
                out.push(Tile {
                    width: (oy1 - oy0) * out_w,
                    segments: vec![Segment {
                        sample,
                        oy0,
                        oy1,
                        col: 0,
                    }],
                });
            }
        }
    } else {
        let per = (target / ohw).max(1);
        for first in (0..n).step_by(per) {
            let last = (first + per).min(n);
            out.push(Tile {
                width: (last - first) * ohw,
                segments: (first..last)
                    .map(|sample| Segment {
                        sample,
                        oy0: 0,
                        oy1: out_h,
                        col: (sample - first) * ohw,
                    })
                    .collect(),
            });
        }
    }
    out
}

impl Segment {
    fn len(&self, out_w: usize) -> usize {
        (self.oy1 - self.oy0) * out_w
    }
}

/// Copies the segment's pixels of every channel of an `[N, ch, out_h·out_w]`
/// buffer into a `ch × ld` tile.
fn gather<T: Real>(src: &[T], channels: usize, ohw: usize, out_w: usize, segs: &[Segment], dst: &mut [T], ld: usize) {
    for s in segs {
        let len = s.len(out_w);
        for c in 0..channels {
            let from = (s.sample * channels + c) * ohw + s.oy0 * out_w;
            dst[c * ld + s.col..c * ld + s.col + len].copy_from_slice(&src[from..from + len]);
        }
    }
}

/// Inverse of [`gather`].
fn scatter<T: Real>(src: &[T], ld: usize, channels: usize, ohw: usize, out_w: usize, segs: &[Segment], dst: &mut [T]) {
    for s in segs {
        let len = s.len(out_w);
        for c in 0..channels {
            let to = (s.sample * channels + c) * ohw + s.oy0 * out_w;
            dst[to..to + len].copy_from_slice(&src[c * ld + s.col..c * ld + s.col + len]);
        }
    }
}

/// Unfolds output rows `seg.oy0..seg.oy1` of one `C×H×W` sample into rows
/// `(c·kh + ki)·kw + kj` of a `(C·kh·kw) × ld` matrix, from column `seg.col`.
fn im2col<T: Real>(x: &[T], channels: usize, g: &ConvGeometry, seg: &Segment, cols: &mut [T], ld: usize) {
    let hw = g.in_h * g.in_w;
    let s = g.stride;
    for c in 0..channels {
        let plane = &x[c * hw..(c + 1) * hw];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = ConvGeometry::valid_range(g.out_h, g.in_h, s, g.pad_top, ki);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let base = row * ld + seg.col;
                let (ox_lo, ox_hi) = ConvGeometry::valid_range(g.out_w, g.in_w, s, g.pad_left, kj);
                for oy in seg.oy0..seg.oy1 {
                    let start = base + (oy - seg.oy0) * g.out_w;
                    let out_row = &mut cols[start..start + g.out_w];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let iy = oy * s + ki - g.pad_top;
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    out_row[..ox_lo].fill(T::zero());
                    out_row[ox_hi..].fill(T::zero());
                    if s == 1 {
                        let ix0 = ox_lo + kj - g.pad_left;
                        out_row[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            out_row[ox] = src[ox * s + kj - g.pad_left];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters and accumulates tile columns back into `x`.
fn col2im<T: Real>(cols: &[T], ld: usize, channels: usize, g: &ConvGeometry, seg: &Segment, x: &mut [T]) {
    let hw = g.in_h * g.in_w;
    let s = g.stride;
    for c in 0..channels {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = ConvGeometry::valid_range(g.out_h, g.in_h, s, g.pad_top, ki);
            let (oy_lo, oy_hi) = (oy_lo.max(seg.oy0), oy_hi.min(seg.oy1));
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let base = row * ld + seg.col;
                let (ox_lo, ox_hi) = ConvGeometry::valid_range(g.out_w, g.in_w, s, g.pad_left, kj);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ki - g.pad_top;
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let start = base + (oy - seg.oy0) * g.out_w;
                    let col_row = &cols[start..start + g.out_w];
                    if s == 1 {
                        let ix0 = ox_lo + kj - g.pad_left;
                        for (d, &v) in dst[ix0..ix0 + (ox_hi - ox_lo)].iter_mut().zip(&col_row[ox_lo..ox_hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox * s + kj - g.pad_left] += col_row[ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_weights<T: Real>(w: &Tensor<T>, expected: [usize; 4], what: &str) -> Result<()> {
    if w.shape() != expected {
        let names = ["dim0", "dim1", "kernel height", "kernel width"];
        let bad = w
            .shape()
            .iter()
            .zip(expected.iter())
            .position(|(a, b)| a != b)
            .map(|i| names[i])
            .unwrap_or("rank");
        return shape_err(format!(
            "{what} weight shape {:?} inconsistent with spec (expected {expected:?}, offending {bad})",
            w.shape()
        ));
    }
    Ok(())
}

fn check_bias<T: Real>(b: &Tensor<T>, channels: usize, what: &str) -> Result<()> {
    if b.shape() != [channels] {
        return shape_err(format!(
            "{what} bias shape {:?} must be [{channels}] (output channels)",
            b.shape()
        ));
    }
    Ok(())
}

fn add_bias<T: Real>(y: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in y.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_bias_grad<T: Real>(dy: &[T], plane: usize, db: &mut [T]) {
    for (chunk, acc) in dy.chunks(plane).zip(db.iter_mut()) {
        *acc += chunk.iter().copied().sum::<T>();
    }
}

fn conv_input_geometry<T: Real>(x: &Tensor<T>, spec: &ConvSpec) -> Result<(usize, usize, usize, usize, ConvGeometry)> {
    let (n, c, h, w) = x.dims4()?;
    if c != spec.in_channels {
        return shape_err(format!(
            "conv2d input channels {c} != spec in_channels {}",
            spec.in_channels
        ));
    }
    let g = spec.geometry(h, w)?;
    Ok((n, c, h, w, g))
}
/// Forward 2-d convolution. `weights` is `[out, in, kh, kw]`, `bias` is `[out]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    conv2d_tiled(x, weights, bias, spec, TILE_COLUMNS)
}

fn conv2d_tiled<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
    tile: usize,
) -> Result<Tensor<T>> {
    let (n, c, _, _, g) = conv_input_geometry(x, spec)?;
    check_weights(weights, spec.weight_shape(), "conv2d")?;
    check_bias(bias, spec.out_channels, "conv2d")?;
    let co = spec.out_channels;
    let k = c * g.kh * g.kw;
    let ohw = g.out_h * g.out_w;
    let in_stride = c * g.in_h * g.in_w;
    let plan = tiles(n, g.out_h, g.out_w, tile);
    let max_w = plan.iter().map(|t| t.width).max().unwrap_or(0);
    let mut out = vec![T::zero(); n * co * ohw];
    let mut cols = vec![T::zero(); k * max_w];
    let mut ys = vec![T::zero(); co * max_w];
    for t in &plan {
        let tw = t.width;
        for s in &t.segments {
            let xs = &x.data()[s.sample * in_stride..(s.sample + 1) * in_stride];
            im2col(xs, c, &g, s, &mut cols, tw);
        }
        T::gemm(
            co,
            k,
            tw,
            T::one(),
            weights.data(),
            k,
            1,
            &cols,
            tw,
            1,
            T::zero(),
            &mut ys,
            tw,
            1,
        );
        scatter(&ys, tw, co, ohw, g.out_w, &t.segments, &mut out);
    }
    for sample in out.chunks_mut(co * ohw) {
        add_bias(sample, bias.data(), ohw);
    }
    Tensor::new(vec![n, co, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    conv2d_backward_tiled(x, weights, spec, dy, TILE_COLUMNS)
}

fn conv2d_backward_tiled<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    tile: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w, g) = conv_input_geometry(x, spec)?;
    check_weights(weights, spec.weight_shape(), "conv2d")?;
    let co = spec.out_channels;
    if dy.shape() != [n, co, g.out_h, g.out_w] {
        return shape_err(format!(
            "conv2d upstream gradient {:?} != output shape {:?}",
            dy.shape(),
            [n, co, g.out_h, g.out_w]
        ));
    }
    let k = c * g.kh * g.kw;
    let ohw = g.out_h * g.out_w;
    let in_stride = c * h * w;
    let plan = tiles(n, g.out_h, g.out_w, tile);
    let max_w = plan.iter().map(|t| t.width).max().unwrap_or(0);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); weights.numel()];
    let mut db = vec![T::zero(); co];
    let mut cols = vec![T::zero(); k * max_w];
    let mut dcols = vec![T::zero(); k * max_w];
    let mut dys = vec![T::zero(); co * max_w];
    for t in &plan {
        let tw = t.width;
        for s in &t.segments {
            let xs = &x.data()[s.sample * in_stride..(s.sample + 1) * in_stride];
            im2col(xs, c, &g, s, &mut cols, tw);
        }
        gather(dy.data(), co, ohw, g.out_w, &t.segments, &mut dys, tw);
        // dW += dY · colsᵀ
        T::gemm(co, tw, k, T::one(), &dys, tw, 1, &cols, 1, tw, T::one(), &mut dw, k, 1);
        // dcols = Wᵀ · dY
        T::gemm(
            k,
            co,
            tw,
            T::one(),
            weights.data(),
            1,
            k,
            &dys,
            tw,
            1,
            T::zero(),
            &mut dcols,
            tw,
            1,
        );
        for s in &t.segments {
            let dxs = &mut dx[s.sample * in_stride..(s.sample + 1) * in_stride];
            col2im(&dcols, tw, c, &g, s, dxs);
        }
    }
    for sample in dy.data().chunks(co * ohw) {
        accumulate_bias_grad(sample, ohw, &mut db);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(weights.shape().to_vec(), dw)?,
        Tensor::new(vec![co], db)?,
    ))
}

fn transposed_geometry<T: Real>(x: &Tensor<T>, spec: &ConvSpec) -> Result<(usize, usize, ConvGeometry)> {
    let (n, c, h, w) = x.dims4()?;
    if c != spec.in_channels {
        return shape_err(format!(
            "conv_transpose2d input channels {c} != spec in_channels {}",
            spec.in_channels
        ));
    }
    let (oh, ow) = spec.transposed_output_size(h, w)?;
    // Geometry of the forward convolution this operator is the adjoint of.
    let g = spec.geometry(oh, ow)?;
    if (g.out_h, g.out_w) != (h, w) {
        return shape_err(format!(
            "conv_transpose2d: adjoint geometry maps {oh}x{ow} to {}x{} instead of {h}x{w}",
            g.out_h, g.out_w
        ));
    }
    Ok((n, c, g))
}
/// Fractionally strided convolution. `weights` is `[in, out, kh, kw]`,
/// `bias` is `[out]`. With `same` padding the spatial dims are multiplied by
/// the stride exactly.
pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    conv_transpose2d_tiled(x, weights, bias, spec, TILE_COLUMNS)
}

fn conv_transpose2d_tiled<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
    tile: usize,
) -> Result<Tensor<T>> {
    let (n, ci, g) = transposed_geometry(x, spec)?;
    check_weights(weights, spec.transposed_weight_shape(), "conv_transpose2d")?;
    check_bias(bias, spec.out_channels, "conv_transpose2d")?;
    let co = spec.out_channels;
    let k = co * g.kh * g.kw;
    let hw = g.out_h * g.out_w;
    let ohw = g.in_h * g.in_w;
    let plan = tiles(n, g.out_h, g.out_w, tile);
    let max_w = plan.iter().map(|t| t.width).max().unwrap_or(0);
    let mut out = vec![T::zero(); n * co * ohw];
    let mut xt = vec![T::zero(); ci * max_w];
    let mut cols = vec![T::zero(); k * max_w];
    for t in &plan {
        let tw = t.width;
        gather(x.data(), ci, hw, g.out_w, &t.segments, &mut xt, tw);
        T::gemm(
            k,
            ci,
            tw,
            T::one(),
            weights.data(),
            1,
            k,
            &xt,
            tw,
            1,
            T::zero(),
            &mut cols,
            tw,
            1,
        );
        for s in &t.segments {
            let ys = &mut out[s.sample * co * ohw..(s.sample + 1) * co * ohw];
            col2im(&cols, tw, co, &g, s, ys);
        }
    }
    for sample in out.chunks_mut(co * ohw) {
        add_bias(sample, bias.data(), ohw);
    }
    Tensor::new(vec![n, co, g.in_h, g.in_w], out)
}

/// Gradients of [`conv_transpose2d`] with respect to input, weights and bias.
pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    conv_transpose2d_backward_tiled(x, weights, spec, dy, TILE_COLUMNS)
}

fn conv_transpose2d_backward_tiled<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    tile: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, ci, g) = transposed_geometry(x, spec)?;
    check_weights(weights, spec.transposed_weight_shape(), "conv_transpose2d")?;
    let co = spec.out_channels;
    if dy.shape() != [n, co, g.in_h, g.in_w] {
        return shape_err(format!(
            "conv_transpose2d upstream gradient {:?} != output shape {:?}",
            dy.shape(),
            [n, co, g.in_h, g.in_w]
        ));
    }
    let k = co * g.kh * g.kw;
    let hw = g.out_h * g.out_w;
    let ohw = g.in_h * g.in_w;
    let plan = tiles(n, g.out_h, g.out_w, tile);
    let max_w = plan.iter().map(|t| t.width).max().unwrap_or(0);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); weights.numel()];
    let mut db = vec![T::zero(); co];
    let mut cols = vec![T::zero(); k * max_w];
    let mut xt = vec![T::zero(); ci * max_w];
    let mut dxt = vec![T::zero(); ci * max_w];
    for t in &plan {
        let tw = t.width;
        for s in &t.segments {
            let dys = &dy.data()[s.sample * co * ohw..(s.sample + 1) * co * ohw];
            im2col(dys, co, &g, s, &mut cols, tw);
        }
        gather(x.data(), ci, hw, g.out_w, &t.segments, &mut xt, tw);
        // dX = W · im2col(dY)
        T::gemm(
            ci,
            k,
            tw,
            T::one(),
            weights.data(),
            k,
            1,
            &cols,
            tw,
            1,
            T::zero(),
            &mut dxt,
            tw,
            1,
        );
        scatter(&dxt, tw, ci, hw, g.out_w, &t.segments, &mut dx);
        // dW += X · im2col(dY)ᵀ
        T::gemm(ci, tw, k, T::one(), &xt, tw, 1, &cols, 1, tw, T::one(), &mut dw, k, 1);
    }
    for sample in dy.data().chunks(co * ohw) {
        accumulate_bias_grad(sample, ohw, &mut db);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(weights.shape().to_vec(), dw)?,
        Tensor::new(vec![co], db)?,
    ))
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output element, the flat index of the winning input element.
pub fn max_pool2d<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("max_pool2d needs even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let d = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn max_pool2d_backward<T: Real>(input_shape: &[usize], argmax: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    if dy.numel() != argmax.len() {
        return shape_err("max_pool2d upstream gradient does not match pooled output");
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let buf = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        buf[idx] += g;
    }
    Ok(dx)
}

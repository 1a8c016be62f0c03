//! Dense row-major `f64` tensors and the numeric kernels the layers use.
//!
//! Weights of a layer with `m` output channels are always stored with the
//! output channel as the leading axis, so each filter is a contiguous run of
//! `d` values and the weight tensor can be read as an `m x d` matrix without
//! copying.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "extents must be positive, got {shape:?}"
        );
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// 1-D tensor over `data`.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|x| x * factor)
    }

    pub fn abs(&self) -> Tensor {
        self.map(f64::abs)
    }

    /// Elementwise sign with `sign(0) = +1`, so every output is exactly ±1.
    pub fn sign(&self) -> Tensor {
        self.map(sign)
    }

    pub fn l1_norm(&self) -> f64 {
        l1_norm(&self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn l1_norm(values: &[f64]) -> f64 {
    values.iter().map(|x| x.abs()).sum()
}

/// Which kind of layer a weight tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// `(m, n, kh, kw)` convolution filters.
    Conv,
    /// `(m, n)` fully connected weights.
    Linear,
}

/// Read-only `rows x cols` view of a weight tensor; row `i` is the flattened
/// filter of output channel `i`.
#[derive(Debug, Clone, Copy)]
pub struct WeightMatrixView<'a> {
    rows: usize,
    cols: usize,
    data: &'a [f64],
}

impl<'a> WeightMatrixView<'a> {
    pub fn from_slice(data: &'a [f64], rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::shape(format!(
                "cannot view {} values as {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &'a [f64] {
        self.data
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &'a [f64]> + 'a {
        self.data.chunks_exact(self.cols)
    }

    /// Copies the viewed values back into a tensor of `shape`.
    pub fn to_tensor(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.to_vec())
    }
}

pub fn reshape_as_matrix(weights: &Tensor, kind: LayerKind) -> Result<WeightMatrixView<'_>> {
    let shape = weights.shape();
    match (kind, shape.len()) {
        (LayerKind::Conv, 4) | (LayerKind::Linear, 2) => {
            let rows = shape[0];
            let cols = shape[1..].iter().product();
            WeightMatrixView::from_slice(weights.data(), rows, cols)
        }
        _ => Err(Error::shape(format!(
            "{kind:?} weights must be rank {}, got shape {shape:?}",
            if kind == LayerKind::Conv { 4 } else { 2 }
        ))),
    }
}

/// `C = A * B` for row-major `A (m x k)` and `B (k x n)` slices, overwriting `c`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_strided(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c, 0.0);
}

/// General product with explicit (row, column) strides for `a` and `b`, so
/// transposed operands need no copy. `c` is row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    gemm_into(m, k, n, a, a_strides, b, b_strides, c, n, beta);
}

/// As [`gemm_strided`], with rows of `c` spaced `c_row_stride` apart.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    c_row_stride: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c_row_stride >= n && c.len() >= (m - 1) * c_row_stride + n);
    if k == 0 {
        for row in c.chunks_mut(c_row_stride).take(m) {
            row[..n].iter_mut().for_each(|x| *x *= beta);
        }
        return;
    }
    // SAFETY: callers pass slices whose extents cover every index reachable
    // through the given strides; the extent of `c` is checked above and it
    // is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), b.data(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// Geometry of a stride/padding 2-D convolution over `N x C x H x W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Rows of the unfolded input: one per (channel, ky, kx).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds the input into a `patch_len x (N * out_h * out_w)` matrix; column
/// `n * P + p` holds the receptive field of output position `p` of sample `n`.
/// Output columns `lo..hi` whose input column for kernel offset `kx` falls
/// inside the image.
fn valid_span(kx: usize, ow: usize, g: &ConvGeometry) -> (usize, usize) {
    let lo = (g.padding.saturating_sub(kx)).div_ceil(g.stride);
    let hi = ((g.width + g.padding).saturating_sub(kx)).div_ceil(g.stride).min(ow);
    (lo.min(hi), hi)
}

pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let positions = oh * ow;
    let total_cols = g.batch * positions;
    let mut cols = vec![0.0; g.patch_len() * total_cols];
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst_row = &mut cols[row * total_cols..(row + 1) * total_cols];
                for n in 0..g.batch {
                    let plane = &input[(n * g.in_channels + c) * g.height * g.width..]
                        [..g.height * g.width];
                    let dst = &mut dst_row[n * positions..(n + 1) * positions];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.width..][..g.width];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        let (lo, hi) = valid_span(kx, ow, g);
                        if g.stride == 1 {
                            let start = (lo + kx) as isize - pad;
                            dst_row[lo..hi].copy_from_slice(&src_row[start as usize..][..hi - lo]);
                        } else {
                            for (ox, d) in dst_row.iter_mut().enumerate().take(hi).skip(lo) {
                                *d = src_row[(ox * g.stride + kx) - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let positions = oh * ow;
    let total_cols = g.batch * positions;
    let mut out = vec![0.0; g.batch * g.in_channels * g.height * g.width];
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src_row = &cols[row * total_cols..(row + 1) * total_cols];
                for n in 0..g.batch {
                    let plane = &mut out[(n * g.in_channels + c) * g.height * g.width..]
                        [..g.height * g.width];
                    let src = &src_row[n * positions..(n + 1) * positions];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * g.width..][..g.width];
                        let src_row = &src[oy * ow..(oy + 1) * ow];
                        let (lo, hi) = valid_span(kx, ow, g);
                        for ox in lo..hi {
                            dst_row[ox * g.stride + kx - g.padding] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_geometry(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<ConvGeometry> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 4 || ws.len() != 4 || is[1] != ws[1] {
        return Err(Error::shape(format!(
            "conv2d: input {is:?} incompatible with weight {ws:?}"
        )));
    }
    if stride == 0 || is[2] + 2 * padding < ws[2] || is[3] + 2 * padding < ws[3] {
        return Err(Error::shape(format!(
            "conv2d: kernel {:?} does not fit input {:?} (padding {padding}, stride {stride})",
            &ws[2..],
            &is[2..]
        )));
    }
    Ok(ConvGeometry {
        batch: is[0],
        in_channels: is[1],
        height: is[2],
        width: is[3],
        kernel_h: ws[2],
        kernel_w: ws[3],
        stride,
        padding,
    })
}

/// Result of a convolution forward pass; `cols` is kept for the backward pass.
pub struct ConvForward {
    pub output: Tensor,
    pub cols: Vec<f64>,
    pub geometry: ConvGeometry,
}

pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<ConvForward> {
    let g = conv_geometry(input, weight, stride, padding)?;
    let out_channels = weight.shape()[0];
    if let Some(b) = bias {
        if b.len() != out_channels {
            return Err(Error::shape(format!(
                "conv2d: bias length {} for {out_channels} channels",
                b.len()
            )));
        }
    }
    let cols = im2col(input.data(), &g);
    let positions = g.positions();
    let total_cols = g.batch * positions;
    let patch = g.patch_len();
    let mut out = vec![0.0; g.batch * out_channels * positions];
    for (n, dst) in out.chunks_exact_mut(out_channels * positions).enumerate() {
        gemm_into(
            out_channels,
            patch,
            positions,
            weight.data(),
            (patch as isize, 1),
            &cols[n * positions..],
            (total_cols as isize, 1),
            dst,
            positions,
            0.0,
        );
        if let Some(b) = bias {
            for (row, &bv) in dst.chunks_exact_mut(positions).zip(b.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    let output = Tensor::new(vec![g.batch, out_channels, g.out_h(), g.out_w()], out)?;
    Ok(ConvForward {
        output,
        cols,
        geometry: g,
    })
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    grad_output: &Tensor,
    cols: &[f64],
    geometry: &ConvGeometry,
    weight: &Tensor,
) -> Result<ConvGrads> {
    let (weight, bias, input) = conv2d_backward_impl(grad_output, cols, geometry, weight, true)?;
    Ok(ConvGrads {
        input: input.expect("input gradient requested"),
        weight,
        bias,
    })
}

/// Weight and bias gradients only; for a first layer whose input gradient
/// nobody reads.
pub fn conv2d_param_grads(
    grad_output: &Tensor,
    cols: &[f64],
    geometry: &ConvGeometry,
    weight: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (weight, bias, _) = conv2d_backward_impl(grad_output, cols, geometry, weight, false)?;
    Ok((weight, bias))
}

fn conv2d_backward_impl(
    grad_output: &Tensor,
    cols: &[f64],
    geometry: &ConvGeometry,
    weight: &Tensor,
    want_input: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let g = geometry;
    let out_channels = weight.shape()[0];
    let expected = [g.batch, out_channels, g.out_h(), g.out_w()];
    if grad_output.shape() != expected {
        return Err(Error::shape(format!(
            "conv2d backward: gradient {:?}, expected {expected:?}",
            grad_output.shape()
        )));
    }
    let positions = g.positions();
    let total_cols = g.batch * positions;
    let patch = g.patch_len();

    let go = grad_output.data();
    let per_sample = out_channels * positions;
    let mut grad_bias = vec![0.0; out_channels];
    for sample in go.chunks_exact(per_sample) {
        for (b, row) in grad_bias.iter_mut().zip(sample.chunks_exact(positions)) {
            *b += row.iter().sum::<f64>();
        }
    }

    // dW = sum over samples of G_n * cols_n^T
    let mut grad_weight = vec![0.0; out_channels * patch];
    for n in 0..g.batch {
        gemm_strided(
            out_channels,
            positions,
            patch,
            &go[n * per_sample..],
            (positions as isize, 1),
            &cols[n * positions..],
            (1, total_cols as isize),
            &mut grad_weight,
            if n == 0 { 0.0 } else { 1.0 },
        );
    }

    let weight_grad = Tensor::new(weight.shape().to_vec(), grad_weight)?;
    let bias_grad = Tensor::new(vec![out_channels], grad_bias)?;
    if !want_input {
        return Ok((weight_grad, bias_grad, None));
    }
    // dcols_n = W^T * G_n
    let mut grad_cols = vec![0.0; patch * total_cols];
    for n in 0..g.batch {
        gemm_into(
            patch,
            out_channels,
            positions,
            weight.data(),
            (1, patch as isize),
            &go[n * per_sample..],
            (positions as isize, 1),
            &mut grad_cols[n * positions..],
            total_cols,
            0.0,
        );
    }
    let input = Tensor::new(vec![g.batch, g.in_channels, g.height, g.width], col2im(&grad_cols, g))?;
    Ok((weight_grad, bias_grad, Some(input)))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    input.check_same_shape(grad_output, "relu backward")?;
    Ok(input.zip_map(grad_output, |x, g| if x > 0.0 { g } else { 0.0 }))
}

pub struct PoolForward {
    pub output: Tensor,
    /// Flat input index that won each output cell.
    pub argmax: Vec<usize>,
}

/// Non-overlapping max pooling with a square `window`; trailing rows and
/// columns that do not fill a window are dropped.
pub fn maxpool2d_forward(input: &Tensor, window: usize) -> Result<PoolForward> {
    let s = input.shape();
    if s.len() != 4 || window == 0 || s[2] < window || s[3] < window {
        return Err(Error::shape(format!(
            "maxpool2d: window {window} over input {s:?}"
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / window, w / window);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * window + dy) * w + ox * window + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(PoolForward {
        output: Tensor::new(vec![n, c, oh, ow], out)?,
        argmax,
    })
}

pub fn maxpool2d_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_output: &Tensor,
) -> Result<Tensor> {
    if grad_output.len() != argmax.len() {
        return Err(Error::shape(format!(
            "maxpool2d backward: {} gradients for {} pooled cells",
            grad_output.len(),
            argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let gi = grad.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_output.data()) {
        gi[idx] += g;
    }
    Ok(grad)
}

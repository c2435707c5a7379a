//! Dense tensor storage and the numeric kernels every layer is built on.
//!
//! Tensors are flat row-major `f64` buffers; image tensors use
//! channel-major (C, H, W) order and batches prepend a batch dimension.
//! Each kernel has a hand-derived backward counterpart whose contract is
//! agreement with central finite differences.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "buffer of {} values cannot fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Tensor {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| crate::rng::normal(rng) * std).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} values) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_assign shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Output extent of a strided window sweep: floor((n + 2p - k) / s) + 1.
pub fn out_extent(n: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = n + 2 * padding;
    if padded < k {
        return Err(Error::shape(format!(
            "window {k} does not fit input extent {n} with padding {padding}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

// ---------------------------------------------------------------------------
// Matrix products on flat slices. `a` is M x K, row-major.
// ---------------------------------------------------------------------------

/// out[m][n] = sum_k a[m][k] * b[k][n]; out is zeroed first.
pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|v| *v = 0.0);
    for mi in 0..m {
        let a_row = &a[mi * k..(mi + 1) * k];
        let out_row = &mut out[mi * n..(mi + 1) * n];
        for (ki, &a_val) in a_row.iter().enumerate() {
            let b_row = &b[ki * n..(ki + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_val * bv;
            }
        }
    }
}

/// out[m][j] = sum_t a[m][t] * b[j][t] (a · b^T); out is zeroed first.
pub fn mm_abt(a: &[f64], b: &[f64], m: usize, t: usize, j: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * t);
    debug_assert_eq!(b.len(), j * t);
    debug_assert_eq!(out.len(), m * j);
    for mi in 0..m {
        let a_row = &a[mi * t..(mi + 1) * t];
        let out_row = &mut out[mi * j..(mi + 1) * j];
        for (ji, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[ji * t..(ji + 1) * t];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
}

/// out[k][t] = sum_o a[o][k] * b[o][t] (a^T · b); out is zeroed first.
pub fn mm_atb(a: &[f64], b: &[f64], o_dim: usize, k: usize, t: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), o_dim * k);
    debug_assert_eq!(b.len(), o_dim * t);
    debug_assert_eq!(out.len(), k * t);
    out.iter_mut().for_each(|v| *v = 0.0);
    for oi in 0..o_dim {
        let a_row = &a[oi * k..(oi + 1) * k];
        let b_row = &b[oi * t..(oi + 1) * t];
        for (ki, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[ki * t..(ki + 1) * t];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Standard matrix product of a (M x K) and b (K x N).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(format!(
            "matmul expects rank-2 tensors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    mm(a.data(), b.data(), m, k, n, out.data_mut());
    Ok(out)
}

// ---------------------------------------------------------------------------
// Convolution via im2col.
// ---------------------------------------------------------------------------

/// Unpack (C, H, W) into columns: row (c*kh+i)*kw+j, column oh*out_w+ow
/// holds input[c][oh*s+i-p][ow*s+j-p], zero where the window overlaps the
/// padding border.
pub fn im2col(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
    col: &mut [f64],
) {
    let t = out_h * out_w;
    debug_assert_eq!(col.len(), c_in * kh * kw * t);
    debug_assert_eq!(input.len(), c_in * h * w);
    for c in 0..c_in {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((c * kh + ki) * kw + kj) * t..((c * kh + ki) * kw + kj + 1) * t];
                for oh in 0..out_h {
                    let iy = (oh * stride + ki) as isize - padding as isize;
                    let dst = &mut row[oh * out_w..(oh + 1) * out_w];
                    if iy < 0 || iy as usize >= h {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let ix = (ow * stride + kj) as isize - padding as isize;
                        *d = if ix < 0 || ix as usize >= w { 0.0 } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add of an im2col matrix back onto the (C, H, W) input grid;
/// adjoint of `im2col`.
pub fn col2im(
    col: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
    grad_input: &mut [f64],
) {
    let t = out_h * out_w;
    debug_assert_eq!(col.len(), c_in * kh * kw * t);
    debug_assert_eq!(grad_input.len(), c_in * h * w);
    for c in 0..c_in {
        let plane = &mut grad_input[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &col[((c * kh + ki) * kw + kj) * t..((c * kh + ki) * kw + kj + 1) * t];
                for oh in 0..out_h {
                    let iy = (oh * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oh * out_w..(oh + 1) * out_w];
                    for (ow, &v) in src.iter().enumerate() {
                        let ix = (ow * stride + kj) as isize - padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if input.rank() != 3 {
        return Err(Error::shape(format!("conv2d input must be (C,H,W), got {:?}", input.shape())));
    }
    if kernels.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d kernels must be (Co,Ci,kh,kw), got {:?}",
            kernels.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d stride must be positive".to_string()));
    }
    let (c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (c_out, kc, kh, kw) = (kernels.dim(0), kernels.dim(1), kernels.dim(2), kernels.dim(3));
    if kc != c_in {
        return Err(Error::shape(format!(
            "kernel input channels {kc} do not match input channels {c_in}"
        )));
    }
    let out_h = out_extent(h, kh, stride, padding)?;
    out_extent(w, kw, stride, padding)?;
    Ok((c_in, h, w, c_out, kh, kw, out_h))
}

/// 2-D convolution of one (C,H,W) image with (Co,Ci,kh,kw) kernels.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (c_in, h, w, c_out, kh, kw, out_h) = conv_dims(input, kernels, stride, padding)?;
    let out_w = out_extent(w, kw, stride, padding)?;
    if bias.len() != c_out {
        return Err(Error::shape(format!(
            "bias length {} does not match output channels {c_out}",
            bias.len()
        )));
    }
    let k = c_in * kh * kw;
    let t = out_h * out_w;
    let mut col = vec![0.0; k * t];
    im2col(input.data(), c_in, h, w, kh, kw, stride, padding, out_h, out_w, &mut col);
    let mut out = Tensor::zeros(&[c_out, out_h, out_w]);
    mm(kernels.data(), &col, c_out, k, t, out.data_mut());
    for (o, &b) in bias.data().iter().enumerate() {
        out.data_mut()[o * t..(o + 1) * t].iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

/// Gradients of a scalar function through `conv2d` w.r.t. input, kernels
/// and bias, given the gradient at the output.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c_in, h, w, c_out, kh, kw, out_h) = conv_dims(input, kernels, stride, padding)?;
    let out_w = out_extent(w, kw, stride, padding)?;
    if grad_out.shape() != [c_out, out_h, out_w] {
        return Err(Error::shape(format!(
            "grad_out shape {:?} does not match conv output ({c_out},{out_h},{out_w})",
            grad_out.shape()
        )));
    }
    let k = c_in * kh * kw;
    let t = out_h * out_w;
    let mut col = vec![0.0; k * t];
    im2col(input.data(), c_in, h, w, kh, kw, stride, padding, out_h, out_w, &mut col);

    let mut grad_bias = Tensor::zeros(&[c_out]);
    for o in 0..c_out {
        grad_bias.data_mut()[o] = grad_out.data()[o * t..(o + 1) * t].iter().sum();
    }

    let mut grad_kernels = Tensor::zeros(kernels.shape());
    mm_abt(grad_out.data(), &col, c_out, t, k, grad_kernels.data_mut());

    let mut grad_col = vec![0.0; k * t];
    mm_atb(kernels.data(), grad_out.data(), c_out, k, t, &mut grad_col);
    let mut grad_input = Tensor::zeros(input.shape());
    col2im(&grad_col, c_in, h, w, kh, kw, stride, padding, out_h, out_w, grad_input.data_mut());

    Ok((grad_input, grad_kernels, grad_bias))
}

// ---------------------------------------------------------------------------
// Pooling.
// ---------------------------------------------------------------------------

fn pool_dims(
    input: &Tensor,
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    if input.rank() != 3 {
        return Err(Error::shape(format!("pool input must be (C,H,W), got {:?}", input.shape())));
    }
    if window == 0 || stride == 0 {
        return Err(Error::shape("pool window and stride must be positive".to_string()));
    }
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let out_h = out_extent(h, window, stride, padding)?;
    let out_w = out_extent(w, window, stride, padding)?;
    Ok((c, h, w, out_h, out_w))
}

/// Mean over each window. Windows overlapping the zero-padding border
/// still divide by the full window area.
pub fn avg_pool(input: &Tensor, window: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (c, h, w, out_h, out_w) = pool_dims(input, window, stride, padding)?;
    let area = (window * window) as f64;
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ci in 0..c {
        let plane = &input.data()[ci * h * w..(ci + 1) * h * w];
        let out_plane = &mut out.data_mut()[ci * out_h * out_w..(ci + 1) * out_h * out_w];
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut sum = 0.0;
                for ki in 0..window {
                    let iy = (oh * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kj in 0..window {
                        let ix = (ow * stride + kj) as isize - padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            sum += plane[iy as usize * w + ix as usize];
                        }
                    }
                }
                out_plane[oh * out_w + ow] = sum / area;
            }
        }
    }
    Ok(out)
}

/// Adjoint of `avg_pool`: spreads each output gradient uniformly over its
/// window (padding cells drop their share).
pub fn avg_pool_backward(
    input_shape: &[usize],
    window: usize,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let out_h = out_extent(h, window, stride, padding)?;
    let out_w = out_extent(w, window, stride, padding)?;
    if grad_out.shape() != [c, out_h, out_w] {
        return Err(Error::shape(format!(
            "avg_pool grad_out shape {:?} does not match ({c},{out_h},{out_w})",
            grad_out.shape()
        )));
    }
    let area = (window * window) as f64;
    let mut grad_input = Tensor::zeros(input_shape);
    for ci in 0..c {
        let g_plane = &grad_out.data()[ci * out_h * out_w..(ci + 1) * out_h * out_w];
        let in_plane = &mut grad_input.data_mut()[ci * h * w..(ci + 1) * h * w];
        for oh in 0..out_h {
            for ow in 0..out_w {
                let g = g_plane[oh * out_w + ow] / area;
                for ki in 0..window {
                    let iy = (oh * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kj in 0..window {
                        let ix = (ow * stride + kj) as isize - padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            in_plane[iy as usize * w + ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
    Ok(grad_input)
}

/// Maximum over each window together with the flat input index that won,
/// -1 when a padded zero beat every in-bounds value (no gradient flows).
/// In-bounds values win ties against the padding.
pub fn max_pool_with_indices(
    input: &Tensor,
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<i64>)> {
    let (c, h, w, out_h, out_w) = pool_dims(input, window, stride, padding)?;
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let mut indices = vec![-1i64; c * out_h * out_w];
    for ci in 0..c {
        let plane = &input.data()[ci * h * w..(ci + 1) * h * w];
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = -1i64;
                let mut saw_padding = false;
                for ki in 0..window {
                    let iy = (oh * stride + ki) as isize - padding as isize;
                    for kj in 0..window {
                        let ix = (ow * stride + kj) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h || ix < 0 || (ix as usize) >= w {
                            saw_padding = true;
                            continue;
                        }
                        let v = plane[iy as usize * w + ix as usize];
                        if v > best {
                            best = v;
                            best_idx = (ci * h * w + iy as usize * w + ix as usize) as i64;
                        }
                    }
                }
                if saw_padding && 0.0 > best {
                    best = 0.0;
                    best_idx = -1;
                }
                let flat = ci * out_h * out_w + oh * out_w + ow;
                out.data_mut()[flat] = best;
                indices[flat] = best_idx;
            }
        }
    }
    Ok((out, indices))
}

pub fn max_pool(input: &Tensor, window: usize, stride: usize, padding: usize) -> Result<Tensor> {
    max_pool_with_indices(input, window, stride, padding).map(|(t, _)| t)
}

/// Routes each output gradient to the input element that produced the max.
pub fn max_pool_backward(
    input_shape: &[usize],
    indices: &[i64],
    grad_out: &Tensor,
) -> Result<Tensor> {
    if indices.len() != grad_out.len() {
        return Err(Error::shape(format!(
            "max_pool indices length {} does not match grad_out {}",
            indices.len(),
            grad_out.len()
        )));
    }
    let mut grad_input = Tensor::zeros(input_shape);
    for (&idx, &g) in indices.iter().zip(grad_out.data()) {
        if idx >= 0 {
            grad_input.data_mut()[idx as usize] += g;
        }
    }
    Ok(grad_input)
}

// ---------------------------------------------------------------------------
// ReLU.
// ---------------------------------------------------------------------------

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor { shape: input.shape.clone(), data }
}

/// Upstream gradient masked by (input > 0).
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape != grad_out.shape {
        return Err(Error::shape(format!(
            "relu grad shape {:?} does not match input {:?}",
            grad_out.shape, input.shape
        )));
    }
    let data = input
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor { shape: input.shape.clone(), data })
}

/// Smallest |x| over the tensor; distance of the last forward to the ReLU
/// kink, used by the finite-difference checks to skip non-smooth points.
pub fn min_abs(values: &[f64]) -> f64 {
    values.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

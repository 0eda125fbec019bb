//! Dense `f64` tensors and the numeric kernels the recurrent cells are built from.
//!
//! Tensors are row-major with at most five axes. Convolution, layer
//! normalization and the space-to-depth rearrangement accept either a single
//! sample (`[C, H, W]`) or a batch (`[N, C, H, W]`); batched calls treat every
//! sample independently.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 5;

const BLOB_MAGIC: &[u8; 4] = b"TMUT";
pub const BLOB_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        validate_shape(shape).expect("invalid tensor shape");
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn index_outer(&self, index: usize) -> Result<Tensor> {
        if self.rank() < 2 || index >= self.shape[0] {
            return Err(Error::Usage(format!(
                "outer index {index} out of range for shape {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("cannot stack zero tensors".into()))?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        Tensor::new(&shape, data)
    }

    pub fn write_blob<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BLOB_MAGIC)?;
        w.write_all(&BLOB_VERSION.to_le_bytes())?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.numel() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_blob<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "tensor magic")?;
        if &magic != BLOB_MAGIC {
            return Err(Error::format("bad magic in tensor blob"));
        }
        let version = read_u32(r)?;
        if version != BLOB_VERSION {
            return Err(Error::format(format!(
                "unsupported tensor blob version {version} (expected {BLOB_VERSION})"
            )));
        }
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(format!("tensor blob rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        validate_shape(&shape).map_err(|e| Error::format(e.to_string()))?;
        let numel: usize = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::format("tensor blob extents overflow"))?;
        let mut bytes = vec![0u8; numel * 8];
        read_exact(r, &mut bytes, "tensor data")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, data)
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::config(format!(
            "tensor rank must be 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::config(format!("tensor extents must be >= 1, got {shape:?}")));
    }
    Ok(())
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(format!("truncated input while reading {what}")),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "u32")?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, "u64")?;
    Ok(u64::from_le_bytes(b))
}

/// Convolution filter bank `[out, in, k, k]` with an optional per-output bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::config(format!(
                "convolution weights must be [out, in, k, k], got {s:?}"
            )));
        }
        if s[2] % 2 == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {}", s[2])));
        }
        if let Some(b) = &bias {
            if b.shape() != [s[0]] {
                return Err(Error::shape("ConvKernel bias", &[s[0]], b.shape()));
            }
        }
        Ok(ConvKernel { weights, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[2]
    }
}

/// Elementwise weight with the exact `[C, H, W]` shape of a memory state.
#[derive(Clone, Debug, PartialEq)]
pub struct HadamardWeight {
    pub weights: Tensor,
}

impl HadamardWeight {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rank() != 3 {
            return Err(Error::config(format!(
                "hadamard weight must be [C, H, W], got {:?}",
                weights.shape()
            )));
        }
        Ok(HadamardWeight { weights })
    }

    /// `weights ⊙ state`, broadcasting over a leading batch axis if present.
    pub fn apply(&self, state: &Tensor) -> Result<Tensor> {
        mul_broadcast(state, &self.weights)
    }
}

/// Splits a rank-3 or rank-4 image tensor into `(batch, C, H, W)`.
pub(crate) fn image_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Usage(format!(
            "{op} expects [C, H, W] or [N, C, H, W], got {:?}",
            t.shape()
        ))),
    }
}

fn image_shape_like(t: &Tensor, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if t.rank() == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

/// `C = A·B + beta·C` with `A: m×k`, `B: k×n`, either optionally transposed
/// in storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // row-major (or transposed row-major) matrices of exactly those sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds zero-padded `k×k` neighbourhoods into a `[C·k·k, N·H·W]` matrix.
fn im2col(input: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let cols_n = n * hw;
    let mut cols = vec![0.0; c * k * k * cols_n];
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let row_buf = &mut cols[row * cols_n..(row + 1) * cols_n];
                let oy = dy as isize - pad;
                let ox = dx as isize - pad;
                for b in 0..n {
                    let plane = &input[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                    let dst = &mut row_buf[b * hw..(b + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                        let dst_row = &mut dst[y * w..(y + 1) * w];
                        let x0 = (-ox).max(0) as usize;
                        let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                        for x in x0..x1 {
                            dst_row[x] = src_row[(x as isize + ox) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im(cols: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let cols_n = n * hw;
    let mut out = vec![0.0; n * c * hw];
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let row_buf = &cols[row * cols_n..(row + 1) * cols_n];
                let oy = dy as isize - pad;
                let ox = dx as isize - pad;
                for b in 0..n {
                    let src = &row_buf[b * hw..(b + 1) * hw];
                    let plane = &mut out[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-ox).max(0) as usize;
                        let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                        for x in x0..x1 {
                            plane[sy as usize * w + (x as isize + ox) as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_conv(input: &Tensor, kernel: &ConvKernel) -> Result<(usize, usize, usize, usize)> {
    let dims = image_dims(input, "conv2d")?;
    if dims.1 != kernel.in_channels() {
        return Err(Error::shape("conv2d", input.shape(), kernel.weights.shape()));
    }
    Ok(dims)
}

/// Same-padded 2-D convolution (cross-correlation, stride 1).
pub fn conv2d(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    check_conv(input, kernel)?;
    let cols = conv_columns(input, kernel.size())?;
    conv2d_with_columns(input, &cols, kernel)
}

/// Column matrix `[C·k·k, N·H·W]` of a same-padded convolution input.
pub(crate) fn conv_columns(input: &Tensor, k: usize) -> Result<Vec<f64>> {
    let (n, c, h, w) = image_dims(input, "conv2d")?;
    Ok(if k == 1 {
        batch_major_to_channel_major(input.data(), n, c, h * w)
    } else {
        im2col(input.data(), n, c, h, w, k)
    })
}

/// [`conv2d`] given the precomputed [`conv_columns`] of `input`.
pub(crate) fn conv2d_with_columns(input: &Tensor, cols: &[f64], kernel: &ConvKernel) -> Result<Tensor> {
    let (n, c_in, h, w) = check_conv(input, kernel)?;
    let c_out = kernel.out_channels();
    let k = kernel.size();
    let hw = h * w;
    let cols_n = n * hw;
    let mut tmp = vec![0.0; c_out * cols_n];
    gemm(c_out, c_in * k * k, cols_n, kernel.weights.data(), false, cols, false, 0.0, &mut tmp);
    let mut out = channel_major_to_batch_major(&tmp, n, c_out, hw);
    if let Some(bias) = &kernel.bias {
        for b in 0..n {
            for (co, &bv) in bias.data().iter().enumerate() {
                for v in &mut out[(b * c_out + co) * hw..(b * c_out + co + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(&image_shape_like(input, n, c_out, h, w), out)
}

/// Adjoint of [`conv_columns`]: folds a column gradient back onto an image
/// shaped like `input`.
pub(crate) fn columns_to_image(dcols: &[f64], input: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = image_dims(input, "conv2d")?;
    let data = if k == 1 {
        channel_major_to_batch_major(dcols, n, c, h * w)
    } else {
        col2im(dcols, n, c, h, w, k)
    };
    Tensor::new(input.shape(), data)
}

/// Image-layout tensor as a `[C, N·H·W]` matrix.
pub(crate) fn to_channel_major(t: &Tensor) -> Result<Vec<f64>> {
    let (n, c, h, w) = image_dims(t, "conv2d")?;
    Ok(batch_major_to_channel_major(t.data(), n, c, h * w))
}

/// `[N, C, HW]` → `[C, N·HW]`.
fn batch_major_to_channel_major(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    if n == 1 {
        return x.to_vec();
    }
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ci in 0..c {
            let src = &x[(b * c + ci) * hw..(b * c + ci + 1) * hw];
            out[ci * n * hw + b * hw..ci * n * hw + (b + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// `[C, N·HW]` → `[N, C, HW]`.
fn channel_major_to_batch_major(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    if n == 1 {
        return x.to_vec();
    }
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ci in 0..c {
            out[(b * c + ci) * hw..(b * c + ci + 1) * hw]
                .copy_from_slice(&x[ci * n * hw + b * hw..ci * n * hw + (b + 1) * hw]);
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
#[cfg(test)]
pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[cfg(test)]
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
    want_weights: bool,
    want_bias: bool,
) -> Result<ConvGrads> {
    let (n, c_in, h, w) = image_dims(input, "conv2d_backward")?;
    let ws = weights.shape();
    let (c_out, k) = (ws[0], ws[2]);
    let hw = h * w;
    let cols_n = n * hw;
    let ckk = c_in * k * k;
    let dout = batch_major_to_channel_major(grad_out.data(), n, c_out, hw);

    let grad_weights = if want_weights {
        let cols = if k == 1 {
            batch_major_to_channel_major(input.data(), n, c_in, hw)
        } else {
            im2col(input.data(), n, c_in, h, w, k)
        };
        let mut gw = vec![0.0; c_out * ckk];
        // dW = dOut · colsᵀ
        gemm(c_out, cols_n, ckk, &dout, false, &cols, true, 0.0, &mut gw);
        Some(Tensor::new(ws, gw)?)
    } else {
        None
    };

    let grad_input = if want_input {
        let mut dcols = vec![0.0; ckk * cols_n];
        // dCols = Wᵀ · dOut
        gemm(ckk, c_out, cols_n, weights.data(), true, &dout, false, 0.0, &mut dcols);
        let gi = if k == 1 {
            channel_major_to_batch_major(&dcols, n, c_in, hw)
        } else {
            col2im(&dcols, n, c_in, h, w, k)
        };
        Some(Tensor::new(input.shape(), gi)?)
    } else {
        None
    };

    let grad_bias = if want_bias {
        let mut gb = vec![0.0; c_out];
        for (co, g) in gb.iter_mut().enumerate() {
            *g = dout[co * cols_n..(co + 1) * cols_n].iter().sum();
        }
        Some(Tensor::new(&[c_out], gb)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

/// Per-sample layout used by [`layer_norm`]: `(batch, channels, plane)`.
pub(crate) fn norm_dims(input: &Tensor) -> Result<(usize, usize, usize)> {
    let s = input.shape();
    match s.len() {
        1 => Ok((1, s[0], 1)),
        2 => Ok((1, s[0], s[1])),
        3 => Ok((1, s[0], s[1] * s[2])),
        4 => Ok((s[0], s[1], s[2] * s[3])),
        _ => Err(Error::Usage(format!("layer_norm: unsupported shape {s:?}"))),
    }
}

/// Saved statistics from a layer-norm forward pass.
pub(crate) struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Layer normalization over every feature of a sample, followed by a
/// per-channel affine map. Rank-4 inputs are normalized per batch entry.
pub fn layer_norm(input: &Tensor, gain: &Tensor, shift: &Tensor, epsilon: f64) -> Result<Tensor> {
    Ok(layer_norm_cached(input, gain, shift, epsilon)?.0)
}

pub(crate) fn layer_norm_cached(
    input: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    epsilon: f64,
) -> Result<(Tensor, LayerNormCache)> {
    if !(epsilon > 0.0) {
        return Err(Error::config(format!("layer_norm epsilon must be > 0, got {epsilon}")));
    }
    let (n, c, plane) = norm_dims(input)?;
    if gain.shape() != [c] {
        return Err(Error::shape("layer_norm gain", &[c], gain.shape()));
    }
    if shift.shape() != [c] {
        return Err(Error::shape("layer_norm shift", &[c], shift.shape()));
    }
    let per = c * plane;
    let mut normalized = vec![0.0; input.numel()];
    let mut out = vec![0.0; input.numel()];
    let mut inv_std = Vec::with_capacity(n);
    for b in 0..n {
        let x = &input.data()[b * per..(b + 1) * per];
        let mean = x.iter().sum::<f64>() / per as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        let is = 1.0 / (var + epsilon).sqrt();
        inv_std.push(is);
        for ci in 0..c {
            let (g, s) = (gain.data()[ci], shift.data()[ci]);
            for p in 0..plane {
                let i = b * per + ci * plane + p;
                let xh = (input.data()[i] - mean) * is;
                normalized[i] = xh;
                out[i] = g * xh + s;
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), out)?,
        LayerNormCache {
            normalized: Tensor::new(input.shape(), normalized)?,
            inv_std,
        },
    ))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    Hadamard,
    Add,
    Sub,
    Scale(f64),
}

/// Applies `op` pointwise. Unary ops take one operand, binary ops two of
/// identical shape.
pub fn elementwise(op: Elementwise, operands: &[&Tensor]) -> Result<Tensor> {
    let arity = match op {
        Elementwise::Sigmoid | Elementwise::Tanh | Elementwise::Scale(_) => 1,
        _ => 2,
    };
    if operands.len() != arity {
        return Err(Error::Usage(format!(
            "{op:?} takes {arity} operand(s), got {}",
            operands.len()
        )));
    }
    let a = operands[0];
    match op {
        Elementwise::Sigmoid => Ok(a.map(sigmoid)),
        Elementwise::Tanh => Ok(a.map(f64::tanh)),
        Elementwise::Scale(s) => Ok(a.map(|v| v * s)),
        Elementwise::Hadamard => a.zip_map(operands[1], "hadamard", |x, y| x * y),
        Elementwise::Add => a.zip_map(operands[1], "add", |x, y| x + y),
        Elementwise::Sub => a.zip_map(operands[1], "sub", |x, y| x - y),
    }
}

/// `x ⊙ w` where `w` matches the trailing axes of `x` (batch broadcast).
pub fn mul_broadcast(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let inner = w.numel();
    if x.shape().len() < w.shape().len() || x.shape()[x.rank() - w.rank()..] != *w.shape() {
        return Err(Error::shape("mul_broadcast", x.shape(), w.shape()));
    }
    let mut out = x.data().to_vec();
    for chunk in out.chunks_exact_mut(inner) {
        for (v, wv) in chunk.iter_mut().zip(w.data()) {
            *v *= wv;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Moves each `factor×factor` pixel block into channels:
/// `[P, H, W]` → `[P·f², H/f, W/f]`. Channel `p·f² + dy·f + dx` holds the
/// pixel at offset `(dy, dx)` of every block.
pub fn space_to_depth(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = image_dims(input, "space_to_depth")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::config(format!(
            "space_to_depth: extents {h}x{w} not divisible by factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let oc = c * factor * factor;
    let mut out = vec![0.0; input.numel()];
    let src = input.data();
    for b in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y % factor, x % factor);
                    let co = (ci * factor + dy) * factor + dx;
                    let dst = ((b * oc + co) * oh + y / factor) * ow + x / factor;
                    out[dst] = src[((b * c + ci) * h + y) * w + x];
                }
            }
        }
    }
    Tensor::new(&image_shape_like(input, n, oc, oh, ow), out)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = image_dims(input, "depth_to_space")?;
    let f2 = factor * factor;
    if factor == 0 || c % f2 != 0 {
        return Err(Error::config(format!(
            "depth_to_space: {c} channels not divisible by factor² = {f2}"
        )));
    }
    let (oc, oh, ow) = (c / f2, h * factor, w * factor);
    let mut out = vec![0.0; input.numel()];
    let src = input.data();
    for b in 0..n {
        for co in 0..oc {
            for y in 0..oh {
                for x in 0..ow {
                    let (dy, dx) = (y % factor, x % factor);
                    let ci = (co * factor + dy) * factor + dx;
                    let s = ((b * c + ci) * h + y / factor) * w + x / factor;
                    out[((b * oc + co) * oh + y) * ow + x] = src[s];
                }
            }
        }
    }
    Tensor::new(&image_shape_like(input, n, oc, oh, ow), out)
}

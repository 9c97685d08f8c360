//! Full-precision kernels shared by the inference path and the autograd
//! graph. Both paths call the same functions in the same order, so a
//! network evaluated either way produces bit-identical values.

use crate::bits::conv_out_dim;
use crate::error::{Error, Result};
use crate::tensor::RealTensor;

/// Accumulation order used by a matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GemmOrder {
    /// Blocked BLAS-style kernel. Deterministic, but the summation order is
    /// internal to the kernel. Exact whenever all partial sums are integers.
    Blocked,
    /// Every output accumulates its inner dimension front to back starting
    /// from zero, so a plain scalar loop reproduces it exactly.
    Sequential,
}

/// Row-major view of an operand, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// Logical `rows x cols` view of data stored as `cols x rows`.
    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        if self.transposed {
            self.data[c * self.rows + r]
        } else {
            self.data[r * self.cols + c]
        }
    }
}

/// `c = a·b + beta·c` with `c` row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64, order: GemmOrder) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimensions");
    assert_eq!(c.len(), m * n, "gemm output size");
    assert!(a.data.len() >= m * k && b.data.len() >= k * n);
    if m == 0 || n == 0 {
        return;
    }
    match order {
        GemmOrder::Blocked => {
            let (rsa, csa) = a.strides();
            let (rsb, csb) = b.strides();
            // SAFETY: operand and output extents were checked above and the
            // strides describe exactly those row-major / transposed buffers.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a.data.as_ptr(),
                    rsa,
                    csa,
                    b.data.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        GemmOrder::Sequential => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a.at(i, p) * b.at(p, j);
                    }
                    let dst = &mut c[i * n + j];
                    *dst = if beta == 0.0 { acc } else { beta * *dst + acc };
                }
            }
        }
    }
}

/// Convolution geometry. `pad_value` fills out-of-range taps: binary layers
/// pad with `-1` (zero binarizes to `-1`), full-precision layers with `0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_value: f64,
}

/// Shape bookkeeping for a batched im2col convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn taps(&self, k: usize) -> usize {
        self.c * k * k
    }

    pub fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

pub(crate) fn conv_dims(x: &RealTensor, w: &RealTensor, g: &ConvGeom) -> Result<ConvDims> {
    let (n, c, h, wd) = x.nchw()?;
    let (co, ci, kh, kw) = w.nchw()?;
    if ci != c || kh != g.kernel || kw != g.kernel {
        return Err(Error::dim(format!(
            "conv weight {:?} does not match input channels {c} and kernel {}",
            w.shape(),
            g.kernel
        )));
    }
    let ho = conv_out_dim(h, g.kernel, g.stride, g.pad)?;
    let wo = conv_out_dim(wd, g.kernel, g.stride, g.pad)?;
    Ok(ConvDims {
        n,
        c,
        h,
        w: wd,
        co,
        ho,
        wo,
    })
}

/// Patch matrix `[c·k·k, n·ho·wo]`, rows ordered `(channel, ky, kx)` to match
/// `[c_out, c_in, k, k]` weights.
pub(crate) fn im2col(x: &[f64], d: &ConvDims, g: &ConvGeom) -> Vec<f64> {
    let k = g.kernel;
    let l = d.ho * d.wo;
    let ncols = d.n * l;
    let mut col = vec![0.0; d.taps(k) * ncols];
    for s in 0..d.n {
        for ch in 0..d.c {
            let plane = &x[(s * d.c + ch) * d.h * d.w..(s * d.c + ch + 1) * d.h * d.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let dst = &mut col[row * ncols + s * l..row * ncols + (s + 1) * l];
                    for oy in 0..d.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for ox in 0..d.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            dst[oy * d.wo + ox] = if iy < 0
                                || ix < 0
                                || iy >= d.h as isize
                                || ix >= d.w as isize
                            {
                                g.pad_value
                            } else {
                                plane[iy as usize * d.w + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a patch-matrix gradient back onto the input, skipping pads.
pub(crate) fn col2im(col: &[f64], d: &ConvDims, g: &ConvGeom, dx: &mut [f64]) {
    let k = g.kernel;
    let l = d.ho * d.wo;
    let ncols = d.n * l;
    for s in 0..d.n {
        for ch in 0..d.c {
            let plane = &mut dx[(s * d.c + ch) * d.h * d.w..(s * d.c + ch + 1) * d.h * d.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let src = &col[row * ncols + s * l..row * ncols + (s + 1) * l];
                    for oy in 0..d.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for ox in 0..d.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            plane[iy as usize * d.w + ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[c_out, n·L]` → NCHW.
pub(crate) fn flat_to_nchw(flat: &[f64], d: &ConvDims) -> RealTensor {
    let l = d.ho * d.wo;
    let ncols = d.n * l;
    let mut out = vec![0.0; flat.len()];
    for s in 0..d.n {
        for o in 0..d.co {
            out[(s * d.co + o) * l..(s * d.co + o + 1) * l]
                .copy_from_slice(&flat[o * ncols + s * l..o * ncols + (s + 1) * l]);
        }
    }
    RealTensor::new([d.n, d.co, d.ho, d.wo], out).expect("conv output shape")
}

/// NCHW → `[c_out, n·L]`.
pub(crate) fn nchw_to_flat(t: &[f64], d: &ConvDims) -> Vec<f64> {
    let l = d.ho * d.wo;
    let ncols = d.n * l;
    let mut out = vec![0.0; t.len()];
    for s in 0..d.n {
        for o in 0..d.co {
            out[o * ncols + s * l..o * ncols + (s + 1) * l]
                .copy_from_slice(&t[(s * d.co + o) * l..(s * d.co + o + 1) * l]);
        }
    }
    out
}

/// Dense convolution of NCHW `x` with `[c_out, c_in, k, k]` weights.
pub fn conv2d(x: &RealTensor, w: &RealTensor, g: &ConvGeom, order: GemmOrder) -> Result<RealTensor> {
    Ok(conv2d_with_cols(x, w, g, order)?.0)
}

pub(crate) fn conv2d_with_cols(
    x: &RealTensor,
    w: &RealTensor,
    g: &ConvGeom,
    order: GemmOrder,
) -> Result<(RealTensor, Vec<f64>, ConvDims)> {
    let d = conv_dims(x, w, g)?;
    let col = im2col(x.data(), &d, g);
    let taps = d.taps(g.kernel);
    let mut flat = vec![0.0; d.co * d.cols()];
    gemm(
        MatRef::new(w.data(), d.co, taps),
        MatRef::new(&col, taps, d.cols()),
        &mut flat,
        0.0,
        order,
    );
    Ok((flat_to_nchw(&flat, &d), col, d))
}

/// Inference-time normalization: `((x − mean)·inv_std)·gamma + beta` with
/// `inv_std = 1/sqrt(var + eps)`.
pub fn batch_norm(
    x: &RealTensor,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<RealTensor> {
    let (n, c, h, w) = x.nchw()?;
    for (name, v) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        if v.len() != c {
            return Err(Error::dim(format!("batch norm {name} has {} entries for {c} channels", v.len())));
        }
    }
    let hw = h * w;
    let mut out = x.clone();
    let d = out.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            for v in &mut d[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                *v = ((*v - mean[ch]) * inv) * gamma[ch] + beta[ch];
            }
        }
    }
    Ok(out)
}

/// Per-channel parametric activation:
/// `z = x − shift_in; y = (z > 0 ? z : slope·z) + shift_out`.
pub fn rprelu(x: &RealTensor, shift_in: &[f64], slope: &[f64], shift_out: &[f64]) -> Result<RealTensor> {
    let (n, c, h, w) = x.nchw()?;
    if shift_in.len() != c || slope.len() != c || shift_out.len() != c {
        return Err(Error::dim(format!("activation parameters do not match {c} channels")));
    }
    let hw = h * w;
    let mut out = x.clone();
    let d = out.data_mut();
    for s in 0..n {
        for ch in 0..c {
            for v in &mut d[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                let z = *v - shift_in[ch];
                *v = (if z > 0.0 { z } else { slope[ch] * z }) + shift_out[ch];
            }
        }
    }
    Ok(out)
}

pub(crate) fn pool_out(d: usize) -> usize {
    d.div_ceil(2)
}

/// 2x2 stride-2 average pooling; edge windows average their valid taps.
pub fn avg_pool2(x: &RealTensor) -> Result<RealTensor> {
    let (n, c, h, w) = x.nchw()?;
    let (ho, wo) = (pool_out(h), pool_out(w));
    let src = x.data();
    let mut out = RealTensor::zeros([n, c, ho, wo]);
    let dst = out.data_mut();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        acc += src[(p * h + y) * w + xx];
                        cnt += 1.0;
                    }
                }
                dst[(p * ho + oy) * wo + ox] = acc / cnt;
            }
        }
    }
    Ok(out)
}

/// 2x2 stride-2 max pooling; returns the argmax flat input index per output.
pub fn max_pool2(x: &RealTensor) -> Result<(RealTensor, Vec<usize>)> {
    let (n, c, h, w) = x.nchw()?;
    let (ho, wo) = (pool_out(h), pool_out(w));
    let src = x.data();
    let mut out = RealTensor::zeros([n, c, ho, wo]);
    let mut arg = vec![0; n * c * ho * wo];
    let dst = out.data_mut();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        let i = (p * h + y) * w + xx;
                        if src[i] > best {
                            best = src[i];
                            bi = i;
                        }
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                dst[o] = best;
                arg[o] = bi;
            }
        }
    }
    Ok((out, arg))
}

/// Concatenates `x` with itself along channels.
pub fn dup_channels(x: &RealTensor) -> Result<RealTensor> {
    let (n, c, h, w) = x.nchw()?;
    let per = c * h * w;
    let mut out = Vec::with_capacity(2 * x.len());
    for s in 0..n {
        let chunk = &x.data()[s * per..(s + 1) * per];
        out.extend_from_slice(chunk);
        out.extend_from_slice(chunk);
    }
    RealTensor::new([n, 2 * c, h, w], out)
}

/// Global average pooling NCHW → `[n, c]`.
pub fn global_avg_pool(x: &RealTensor) -> Result<RealTensor> {
    let (n, c, h, w) = x.nchw()?;
    let hw = h * w;
    let d = x.data();
    let out = (0..n * c)
        .map(|p| d[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    RealTensor::new([n, c], out)
}

/// `x·w + b` with `x: [n, k]`, `w: [k, m]`, sequential accumulation.
pub fn linear(x: &RealTensor, w: &RealTensor, b: Option<&[f64]>) -> Result<RealTensor> {
    let (n, k) = x.matrix_dims()?;
    let (wk, m) = w.matrix_dims()?;
    if wk != k {
        return Err(Error::dim(format!("linear: input width {k} vs weight rows {wk}")));
    }
    if let Some(b) = b {
        if b.len() != m {
            return Err(Error::dim(format!("linear: bias has {} entries for {m} outputs", b.len())));
        }
    }
    let mut out = vec![0.0; n * m];
    gemm(
        MatRef::new(x.data(), n, k),
        MatRef::new(w.data(), k, m),
        &mut out,
        0.0,
        GemmOrder::Sequential,
    );
    if let Some(b) = b {
        for row in out.chunks_mut(m) {
            for (o, bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
    }
    RealTensor::new([n, m], out)
}

/// Multiplies channel `c` of NCHW `x` by `scale[c]`.
pub fn scale_channels(x: &RealTensor, scale: &[f64]) -> Result<RealTensor> {
    let (n, c, h, w) = x.nchw()?;
    if scale.len() != c {
        return Err(Error::dim(format!("{} scales for {c} channels", scale.len())));
    }
    let hw = h * w;
    let mut out = x.clone();
    let d = out.data_mut();
    for s in 0..n {
        for ch in 0..c {
            for v in &mut d[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                *v *= scale[ch];
            }
        }
    }
    Ok(out)
}

/// Adds a per-`(sample, channel)` value `v: [n, c]` over all positions.
pub fn add_channel_bias(x: &RealTensor, v: &RealTensor) -> Result<RealTensor> {
    let (n, c, h, w) = x.nchw()?;
    if v.shape() != [n, c] {
        return Err(Error::dim(format!("channel bias {:?} for input {:?}", v.shape(), x.shape())));
    }
    let hw = h * w;
    let mut out = x.clone();
    let d = out.data_mut();
    for p in 0..n * c {
        let b = v.data()[p];
        for e in &mut d[p * hw..(p + 1) * hw] {
            *e += b;
        }
    }
    Ok(out)
}

/// `m[i, j] + v[j]` for `m: [n, c]`.
pub fn add_row(m: &RealTensor, v: &[f64]) -> Result<RealTensor> {
    let (_, c) = m.matrix_dims()?;
    if v.len() != c {
        return Err(Error::dim(format!("row vector of {} for width {c}", v.len())));
    }
    let mut out = m.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (a, b) in row.iter_mut().zip(v) {
            *a += b;
        }
    }
    Ok(out)
}

pub fn add(a: &RealTensor, b: &RealTensor) -> Result<RealTensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("add: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_gemm_matches_loop_and_blocked() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let mut c1 = vec![0.0; 15];
        let mut c2 = vec![0.0; 15];
        gemm(MatRef::new(&a, 3, 4), MatRef::new(&b, 4, 5), &mut c1, 0.0, GemmOrder::Sequential);
        gemm(MatRef::new(&a, 3, 4), MatRef::new(&b, 4, 5), &mut c2, 0.0, GemmOrder::Blocked);
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a[i * 4 + p] * b[p * 5 + j];
                }
                assert_eq!(c1[i * 5 + j], acc);
                assert!((c2[i * 5 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_operands() {
        // a stored as 4x3, used as 3x4
        let a: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
        let mut c = vec![0.0; 6];
        gemm(MatRef::t(&a, 3, 4), MatRef::new(&b, 4, 2), &mut c, 0.0, GemmOrder::Blocked);
        for i in 0..3 {
            for j in 0..2 {
                let acc: f64 = (0..4).map(|p| a[p * 3 + i] * b[p * 2 + j]).sum();
                assert_eq!(c[i * 2 + j], acc);
            }
        }
    }

    #[test]
    fn avg_pool_odd_edges() {
        let x = RealTensor::new([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let y = avg_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[3.0, 4.5, 7.5, 9.0]);
    }

    #[test]
    fn conv_pad_value_fills_border() {
        let x = RealTensor::zeros([1, 1, 1, 1]);
        let w = RealTensor::full([1, 1, 3, 3], 1.0);
        let g = ConvGeom { kernel: 3, stride: 1, pad: 1, pad_value: -1.0 };
        let y = conv2d(&x, &w, &g, GemmOrder::Sequential).unwrap();
        assert_eq!(y.data(), &[-8.0]);
    }
}

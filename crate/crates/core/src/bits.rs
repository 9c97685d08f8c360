//! Sign-packed binary tensors and the XNOR/popcount kernels built on them.
//!
//! Bit `1` encodes `+1` and bit `0` encodes `-1`. A value binarizes to `+1`
//! only when it is strictly greater than its threshold, so `x == threshold`
//! (and therefore zero at threshold zero) maps to `-1`. Spatial zero padding
//! follows the same rule and contributes `-1`.
//!
//! Storage is row-major with 64 bits per word. NCHW activations are stored
//! channel-last: one row per `(n, y, x)` position holding `c` bits, which is
//! the layout the GEMM and im2col kernels consume directly. Bits past the
//! logical row length are kept at zero and every kernel masks them anyway.

use crate::error::{Error, Result};
use crate::tensor::RealTensor;

pub const WORD_BITS: usize = 64;

/// Logical shape of a [`BitTensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitShape {
    Matrix { rows: usize, cols: usize },
    Nchw { n: usize, c: usize, h: usize, w: usize },
}

impl BitShape {
    pub fn rows(&self) -> usize {
        match *self {
            BitShape::Matrix { rows, .. } => rows,
            BitShape::Nchw { n, h, w, .. } => n * h * w,
        }
    }

    /// Valid bits per row.
    pub fn cols(&self) -> usize {
        match *self {
            BitShape::Matrix { cols, .. } => cols,
            BitShape::Nchw { c, .. } => c,
        }
    }
}

pub(crate) fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Mask selecting the valid bits of the last word of a `len`-bit row.
#[inline]
fn tail_mask(len: usize) -> u64 {
    match len % WORD_BITS {
        0 => !0,
        r => (1u64 << r) - 1,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: BitShape,
    words_per_row: usize,
    words: Vec<u64>,
}

/// One packed row with its valid-bit count.
#[derive(Clone, Copy, Debug)]
pub struct BitRow<'a> {
    pub words: &'a [u64],
    pub len: usize,
}

impl BitTensor {
    /// All-`-1` tensor.
    pub fn zeros(shape: BitShape) -> Self {
        let words_per_row = words_for(shape.cols());
        Self {
            shape,
            words_per_row,
            words: vec![0; words_per_row * shape.rows()],
        }
    }

    pub fn from_fn(shape: BitShape, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut t = Self::zeros(shape);
        for r in 0..shape.rows() {
            for c in 0..shape.cols() {
                if f(r, c) {
                    t.set(r, c, true);
                }
            }
        }
        t
    }

    pub fn shape(&self) -> BitShape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.rows()
    }

    pub fn cols(&self) -> usize {
        self.shape.cols()
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub(crate) fn row_words_mut(&mut self, r: usize) -> &mut [u64] {
        let wpr = self.words_per_row;
        &mut self.words[r * wpr..(r + 1) * wpr]
    }

    pub fn row(&self, r: usize) -> BitRow<'_> {
        let wpr = self.words_per_row;
        BitRow {
            words: &self.words[r * wpr..(r + 1) * wpr],
            len: self.cols(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        assert!(c < self.cols(), "bit column {c} out of range");
        let w = self.words[r * self.words_per_row + c / WORD_BITS];
        (w >> (c % WORD_BITS)) & 1 == 1
    }

    /// Value `+1`/`-1` of one element.
    pub fn sign(&self, r: usize, c: usize) -> i32 {
        if self.get(r, c) {
            1
        } else {
            -1
        }
    }

    pub(crate) fn set(&mut self, r: usize, c: usize, bit: bool) {
        assert!(c < self.cols(), "bit column {c} out of range");
        let idx = r * self.words_per_row + c / WORD_BITS;
        let m = 1u64 << (c % WORD_BITS);
        if bit {
            self.words[idx] |= m;
        } else {
            self.words[idx] &= !m;
        }
    }

    /// True when every bit beyond the logical row length is zero.
    pub fn padding_is_clean(&self) -> bool {
        if self.words_per_row == 0 {
            return true;
        }
        let mask = tail_mask(self.cols());
        (0..self.rows()).all(|r| self.words[(r + 1) * self.words_per_row - 1] & !mask == 0)
    }

    /// Re-labels the logical shape. Row count and row length must agree.
    pub fn with_shape(mut self, shape: BitShape) -> Result<Self> {
        if shape.rows() != self.rows() || shape.cols() != self.cols() {
            return Err(Error::dim(format!(
                "cannot view {:?} as {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Position `(n, y, x)` → row index of an NCHW tensor.
    pub fn nchw_row(&self, n: usize, y: usize, x: usize) -> usize {
        match self.shape {
            BitShape::Nchw { h, w, .. } => (n * h + y) * w + x,
            BitShape::Matrix { .. } => panic!("nchw_row on a matrix-shaped BitTensor"),
        }
    }
}

/// Reads up to 64 bits starting at bit `off`.
#[inline]
fn read_bits(src: &[u64], off: usize, n: usize) -> u64 {
    debug_assert!(n > 0 && n <= WORD_BITS);
    let wi = off / WORD_BITS;
    let sh = off % WORD_BITS;
    let mut v = src[wi] >> sh;
    if sh != 0 && sh + n > WORD_BITS {
        v |= src[wi + 1] << (WORD_BITS - sh);
    }
    if n < WORD_BITS {
        v &= (1u64 << n) - 1;
    }
    v
}

/// Writes the low `n` bits of `v` at bit `off`.
#[inline]
fn write_bits(dst: &mut [u64], off: usize, n: usize, v: u64) {
    let wi = off / WORD_BITS;
    let sh = off % WORD_BITS;
    let lo_mask = if n == WORD_BITS { !0 } else { (1u64 << n) - 1 };
    dst[wi] = (dst[wi] & !(lo_mask << sh)) | (v << sh);
    if sh + n > WORD_BITS {
        let hi = sh + n - WORD_BITS;
        let m = (1u64 << hi) - 1;
        dst[wi + 1] = (dst[wi + 1] & !m) | (v >> (WORD_BITS - sh));
    }
}

/// Copies `len` bits from `src[src_off..]` into `dst[dst_off..]`.
pub(crate) fn copy_bits(src: &[u64], src_off: usize, dst: &mut [u64], dst_off: usize, len: usize) {
    let mut done = 0;
    while done < len {
        let n = (len - done).min(WORD_BITS);
        let v = read_bits(src, src_off + done, n);
        write_bits(dst, dst_off + done, n, v);
        done += n;
    }
}

/// Binarizes `x` against `threshold`: bit set iff `x > threshold`.
///
/// `x` is NCHW (rank 4) or a `[rows, cols]` matrix whose columns play the
/// role of channels. `threshold` holds one value (broadcast), one per
/// channel, or one per `(sample, channel)` pair.
pub fn pack(x: &RealTensor, threshold: &[f64]) -> Result<BitTensor> {
    let (n, c, h, w, shape) = match *x.shape() {
        [n, c, h, w] => (n, c, h, w, BitShape::Nchw { n, c, h, w }),
        [rows, cols] => (rows, cols, 1, 1, BitShape::Matrix { rows, cols }),
        _ => {
            return Err(Error::dim(format!(
                "pack expects a rank-2 or rank-4 tensor, got {:?}",
                x.shape()
            )))
        }
    };
    let per_sample = match threshold.len() {
        1 => false,
        l if l == c => false,
        l if l == n * c && n > 1 => true,
        l => {
            return Err(Error::dim(format!(
                "threshold length {l} matches neither 1, channels ({c}) nor samples*channels ({})",
                n * c
            )))
        }
    };
    let thr = |s: usize, ch: usize| -> f64 {
        if threshold.len() == 1 {
            threshold[0]
        } else if per_sample {
            threshold[s * c + ch]
        } else {
            threshold[ch]
        }
    };
    let mut out = BitTensor::zeros(shape);
    let data = x.data();
    let hw = h * w;
    if let BitShape::Matrix { .. } = shape {
        for r in 0..n {
            let row = out.row_words_mut(r);
            for ch in 0..c {
                if data[r * c + ch] > thr(r, ch) {
                    row[ch / WORD_BITS] |= 1 << (ch % WORD_BITS);
                }
            }
        }
        return Ok(out);
    }
    for s in 0..n {
        for ch in 0..c {
            let t = thr(s, ch);
            let plane = &data[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            let (wi, bit) = (ch / WORD_BITS, 1u64 << (ch % WORD_BITS));
            for (p, &v) in plane.iter().enumerate() {
                if v > t {
                    let r = s * hw + p;
                    out.words[r * out.words_per_row + wi] |= bit;
                }
            }
        }
    }
    Ok(out)
}

/// Expands bits back to `{-1, +1}` values in the tensor's logical layout.
pub fn unpack(b: &BitTensor) -> RealTensor {
    match b.shape {
        BitShape::Matrix { rows, cols } => {
            RealTensor::from_fn([rows, cols], |i| f64::from(b.sign(i / cols, i % cols)))
        }
        BitShape::Nchw { n, c, h, w } => {
            let hw = h * w;
            RealTensor::from_fn([n, c, h, w], |i| {
                let s = i / (c * hw);
                let ch = (i / hw) % c;
                let p = i % hw;
                f64::from(b.sign(s * hw + p, ch))
            })
        }
    }
}

/// Integer dot product of two `±1` rows: `2·popcount(XNOR(a, w)) − n`.
pub fn xnor_dot(a: BitRow<'_>, w: BitRow<'_>) -> Result<i64> {
    if a.len != w.len || a.words.len() != w.words.len() {
        return Err(Error::dim(format!(
            "xnor_dot length mismatch: {} vs {} bits",
            a.len, w.len
        )));
    }
    Ok(xnor_dot_words(a.words, w.words, a.len))
}

#[inline]
pub(crate) fn xnor_dot_words(a: &[u64], w: &[u64], len: usize) -> i64 {
    if len == 0 {
        return 0;
    }
    let last = a.len() - 1;
    let mut matches = 0u32;
    for i in 0..last {
        matches += (!(a[i] ^ w[i])).count_ones();
    }
    matches += (!(a[last] ^ w[last]) & tail_mask(len)).count_ones();
    2 * i64::from(matches) - len as i64
}

/// Per-output-channel non-negative scale factors.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleVector(Vec<f64>);

impl ScaleVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "scale entries must be finite and non-negative, got {v}"
            )));
        }
        Ok(Self(values))
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![1.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Granularity of the weight scale factor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// One factor per output filter.
    #[default]
    PerFilter,
    /// One factor shared by the whole layer.
    PerLayer,
}

/// Mean absolute value of each filter (`‖w_j‖₁ / fan_in`).
pub fn weight_scale(w: &RealTensor) -> Result<ScaleVector> {
    weight_scale_with(w, ScaleMode::PerFilter)
}

pub fn weight_scale_with(w: &RealTensor, mode: ScaleMode) -> Result<ScaleVector> {
    if w.is_empty() || w.ndim() < 2 {
        return Err(Error::InvalidArgument(format!(
            "weight_scale needs a non-empty [out, ...] tensor, got {:?}",
            w.shape()
        )));
    }
    let out = w.shape()[0];
    let fan_in = w.len() / out;
    let scales = match mode {
        ScaleMode::PerFilter => w
            .data()
            .chunks(fan_in)
            .map(|f| f.iter().map(|v| v.abs()).sum::<f64>() / fan_in as f64)
            .collect(),
        ScaleMode::PerLayer => {
            let s = w.data().iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
            vec![s; out]
        }
    };
    Ok(ScaleVector(scales))
}

/// Packs `[c_out, c_in, k, k]` (or `[c_out, c_in]`) filters into rows of
/// `k·k·c_in` bits ordered `(ky, kx, channel)`, matching [`im2col_bits`].
pub fn pack_filters(w: &RealTensor) -> Result<BitTensor> {
    let (co, ci, kh, kw) = match *w.shape() {
        [co, ci, kh, kw] => (co, ci, kh, kw),
        [co, ci] => (co, ci, 1, 1),
        _ => {
            return Err(Error::dim(format!(
                "filters must be [out, in, k, k] or [out, in], got {:?}",
                w.shape()
            )))
        }
    };
    let cols = kh * kw * ci;
    let d = w.data();
    Ok(BitTensor::from_fn(
        BitShape::Matrix { rows: co, cols },
        |o, col| {
            let pos = col / ci;
            let ch = col % ci;
            let (ky, kx) = (pos / kw, pos % kw);
            d[((o * ci + ch) * kh + ky) * kw + kx] > 0.0
        },
    ))
}

/// XNOR/popcount products of every row of `a` with every row of `w`,
/// before scaling. Result is row-major `[a.rows, w.rows]`.
pub fn binary_gemm_counts(a: &BitTensor, w: &BitTensor) -> Result<Vec<i64>> {
    if a.cols() != w.cols() {
        return Err(Error::dim(format!(
            "binary_gemm inner dimensions differ: {} vs {}",
            a.cols(),
            w.cols()
        )));
    }
    let (m, n, len) = (a.rows(), w.rows(), a.cols());
    let mut out = vec![0i64; m * n];
    for i in 0..m {
        let ar = a.row(i).words;
        let dst = &mut out[i * n..(i + 1) * n];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = xnor_dot_words(ar, w.row(j).words, len);
        }
    }
    Ok(out)
}

/// `out[i, j] = scale[j] · xnor_dot(a_i, w_j)`, shape `[a.rows, w.rows]`.
pub fn binary_gemm(a: &BitTensor, w: &BitTensor, scale: &ScaleVector) -> Result<RealTensor> {
    if scale.len() != w.rows() {
        return Err(Error::dim(format!(
            "scale has {} entries for {} output columns",
            scale.len(),
            w.rows()
        )));
    }
    let counts = binary_gemm_counts(a, w)?;
    let n = w.rows();
    let s = scale.as_slice();
    let data = counts
        .iter()
        .enumerate()
        .map(|(i, &v)| s[i % n] * v as f64)
        .collect();
    RealTensor::new([a.rows(), n], data)
}

/// Output spatial extent of a convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if input + 2 * pad < kernel {
        return Err(Error::dim(format!(
            "kernel {kernel} does not fit input {input} with padding {pad}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Materializes conv patches: one row per output position `(n, oy, ox)`
/// with `k·k·c` bits ordered `(ky, kx, channel)`. Out-of-range taps stay
/// zero, i.e. `-1`.
pub fn im2col_bits(
    a: &BitTensor,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(BitTensor, usize, usize)> {
    let BitShape::Nchw { n, c, h, w } = a.shape else {
        return Err(Error::dim("binary conv input must be NCHW".to_string()));
    };
    let ho = conv_out_dim(h, kernel, stride, pad)?;
    let wo = conv_out_dim(w, kernel, stride, pad)?;
    let mut cols = BitTensor::zeros(BitShape::Matrix {
        rows: n * ho * wo,
        cols: kernel * kernel * c,
    });
    for s in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let r = (s * ho + oy) * wo + ox;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src_row = (s * h + iy as usize) * w + ix as usize;
                        let src = a.row(src_row).words;
                        let dst = cols.row_words_mut(r);
                        copy_bits(src, 0, dst, (ky * kernel + kx) * c, c);
                    }
                }
            }
        }
    }
    Ok((cols, ho, wo))
}

/// Binary convolution via bit im2col and [`binary_gemm`]; NCHW output.
///
/// `w` holds `c_out` rows of `k·k·c_in` bits as produced by
/// [`pack_filters`]; the kernel size is inferred from the row length.
pub fn binary_conv2d(
    a: &BitTensor,
    w: &BitTensor,
    scale: &ScaleVector,
    stride: usize,
    pad: usize,
) -> Result<RealTensor> {
    let BitShape::Nchw { n, c, .. } = a.shape else {
        return Err(Error::dim("binary conv input must be NCHW".to_string()));
    };
    if c == 0 || w.cols() % c != 0 {
        return Err(Error::dim(format!(
            "filter rows of {} bits do not match {c} input channels",
            w.cols()
        )));
    }
    let taps = w.cols() / c;
    let kernel = (taps as f64).sqrt().round() as usize;
    if kernel * kernel != taps {
        return Err(Error::dim(format!("filter taps {taps} are not a square kernel")));
    }
    let (cols, ho, wo) = im2col_bits(a, kernel, stride, pad)?;
    let flat = binary_gemm(&cols, w, scale)?;
    let co = w.rows();
    let hw = ho * wo;
    let f = flat.data();
    let out = RealTensor::from_fn([n, co, ho, wo], |i| {
        let s = i / (co * hw);
        let o = (i / hw) % co;
        let p = i % hw;
        f[(s * hw + p) * co + o]
    });
    Ok(out)
}

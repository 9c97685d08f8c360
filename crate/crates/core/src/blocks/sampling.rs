//! Long-short range token sampling and shift-based token reconstruction.
//!
//! A sampling offset `(r1, r2)` moves along height and width respectively.
//! Reconstruction splits the channels into four quartiles; quartile `q` of
//! the output token at `(y, x)` is read from the input token at
//! `((y + r1_q) mod h, (x + r2_q) mod w)`. Indices wrap around, so every
//! reconstruction is a bit permutation with no parameters and no arithmetic.

use serde::{Deserialize, Serialize};

use crate::bits::{copy_bits, BitShape, BitTensor};
use crate::error::{Error, Result};
use crate::tensor::RealTensor;

/// Interaction distance of a branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingRange {
    /// The token itself.
    Pointwise,
    /// Neighbours one token away.
    Short,
    /// Tokens half the feature map away.
    Long,
}

impl SamplingRange {
    pub fn tag(self) -> char {
        match self {
            SamplingRange::Pointwise => 'P',
            SamplingRange::Short => 'S',
            SamplingRange::Long => 'L',
        }
    }
}

/// Token offset along `(height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingOffset {
    pub r1: isize,
    pub r2: isize,
    pub range: SamplingRange,
}

/// Position `(y, x)` shifted by `off`, wrapping at the borders.
pub fn sample_index(pos: (usize, usize), off: SamplingOffset, h: usize, w: usize) -> (usize, usize) {
    (
        (pos.0 as isize + off.r1).rem_euclid(h as isize) as usize,
        (pos.1 as isize + off.r2).rem_euclid(w as isize) as usize,
    )
}

/// Per-quartile offsets of a range at resolution `h x w`. Odd extents use
/// `floor(h/2)`, `floor(w/2)` for the long range.
pub fn quartile_offsets(range: SamplingRange, h: usize, w: usize) -> [SamplingOffset; 4] {
    let (dh, dw) = match range {
        SamplingRange::Pointwise => (0, 0),
        SamplingRange::Short => (1, 1),
        SamplingRange::Long => ((h / 2) as isize, (w / 2) as isize),
    };
    let o = |r1, r2| SamplingOffset { r1, r2, range };
    [o(-dh, 0), o(dh, 0), o(0, -dw), o(0, dw)]
}

fn check_quartiles(c: usize) -> Result<()> {
    if c % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "token reconstruction needs channels divisible by 4, got {c}"
        )));
    }
    Ok(())
}

/// Reconstructs tokens from four sampled neighbours (one per quartile).
pub fn reconstruct(a: &BitTensor, offsets: &[SamplingOffset; 4]) -> Result<BitTensor> {
    let BitShape::Nchw { n, c, h, w } = a.shape() else {
        return Err(Error::dim("reconstruction needs an NCHW BitTensor".to_string()));
    };
    check_quartiles(c)?;
    let q = c / 4;
    let mut out = BitTensor::zeros(a.shape());
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                let dst_row = (s * h + y) * w + x;
                for (qi, off) in offsets.iter().enumerate() {
                    let (sy, sx) = sample_index((y, x), *off, h, w);
                    let src = a.row((s * h + sy) * w + sx).words;
                    copy_bits(src, qi * q, out.row_words_mut(dst_row), qi * q, q);
                }
            }
        }
    }
    Ok(out)
}

/// Short-range reconstruction, offsets `[(-1,0), (1,0), (0,-1), (0,1)]`.
pub fn reconstruct_short(a: &BitTensor) -> Result<BitTensor> {
    let BitShape::Nchw { h, w, .. } = a.shape() else {
        return Err(Error::dim("reconstruction needs an NCHW BitTensor".to_string()));
    };
    reconstruct(a, &quartile_offsets(SamplingRange::Short, h, w))
}

/// Long-range reconstruction, offsets `[(-h/2,0), (h/2,0), (0,-w/2), (0,w/2)]`.
pub fn reconstruct_long(a: &BitTensor) -> Result<BitTensor> {
    let BitShape::Nchw { h, w, .. } = a.shape() else {
        return Err(Error::dim("reconstruction needs an NCHW BitTensor".to_string()));
    };
    reconstruct(a, &quartile_offsets(SamplingRange::Long, h, w))
}

/// The same permutation applied to a full-precision NCHW tensor.
pub fn shift_real(x: &RealTensor, offsets: &[SamplingOffset; 4]) -> Result<RealTensor> {
    let (n, c, h, w) = x.nchw()?;
    check_quartiles(c)?;
    let q = c / 4;
    let src = x.data();
    let mut out = RealTensor::zeros([n, c, h, w]);
    let dst = out.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let off = offsets[ch / q];
            let base = (s * c + ch) * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let (sy, sx) = sample_index((y, xx), off, h, w);
                    dst[base + y * w + xx] = src[base + sy * w + sx];
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`shift_real`]: routes each output gradient back to its source.
pub(crate) fn shift_real_adjoint(up: &[f64], shape: (usize, usize, usize, usize), offsets: &[SamplingOffset; 4]) -> Vec<f64> {
    let (n, c, h, w) = shape;
    let q = c / 4;
    let mut g = vec![0.0; up.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = offsets[ch / q];
            let base = (s * c + ch) * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let (sy, sx) = sample_index((y, xx), off, h, w);
                    g[base + sy * w + sx] += up[base + y * w + xx];
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::{pack, unpack};

    #[test]
    fn sample_index_wraps() {
        let off = SamplingOffset { r1: 1, r2: 0, range: SamplingRange::Short };
        assert_eq!(sample_index((7, 3), off, 8, 8), (0, 3));
        let id = SamplingOffset { r1: 0, r2: 0, range: SamplingRange::Pointwise };
        assert_eq!(sample_index((5, 2), id, 8, 8), (5, 2));
        let neg = SamplingOffset { r1: -1, r2: -1, range: SamplingRange::Short };
        assert_eq!(sample_index((0, 0), neg, 4, 6), (3, 5));
    }

    #[test]
    fn half_shift_twice_is_identity() {
        let (h, w) = (6, 4);
        let off = SamplingOffset { r1: 3, r2: 2, range: SamplingRange::Long };
        for y in 0..h {
            for x in 0..w {
                let once = sample_index((y, x), off, h, w);
                assert_eq!(sample_index(once, off, h, w), (y, x));
            }
        }
    }

    #[test]
    fn impulse_moves_down_under_minus_one_offset() {
        let (h, w) = (4, 4);
        let x = RealTensor::from_fn([1, 4, h, w], |i| {
            let ch = i / (h * w);
            let p = i % (h * w);
            if ch == 0 && p == 5 { 1.0 } else { -1.0 }
        });
        let bits = pack(&x, &[0.0]).unwrap();
        let out = unpack(&reconstruct_short(&bits).unwrap());
        // (1,1) -> (2,1)
        let hot: Vec<usize> = (0..h * w).filter(|&p| out.data()[p] > 0.0).collect();
        assert_eq!(hot, vec![2 * w + 1]);
    }

    #[test]
    fn constant_planes_are_fixed_points() {
        let x = RealTensor::from_fn([1, 4, 3, 5], |i| if (i / 15) % 2 == 0 { 1.0 } else { -1.0 });
        let bits = pack(&x, &[0.0]).unwrap();
        assert_eq!(reconstruct_short(&bits).unwrap(), bits);
        assert_eq!(reconstruct_long(&bits).unwrap(), bits);
    }

    #[test]
    fn two_by_two_long_equals_short() {
        let x = RealTensor::from_fn([2, 8, 2, 2], |i| ((i * 7919) % 13) as f64 - 6.0);
        let bits = pack(&x, &[0.0]).unwrap();
        assert_eq!(reconstruct_long(&bits).unwrap(), reconstruct_short(&bits).unwrap());
    }

    #[test]
    fn rejects_indivisible_channels() {
        let bits = BitTensor::zeros(BitShape::Nchw { n: 1, c: 6, h: 2, w: 2 });
        assert!(reconstruct_short(&bits).is_err());
        assert!(reconstruct_long(&bits).is_err());
    }

    #[test]
    fn real_shift_matches_bit_shift() {
        let x = RealTensor::from_fn([2, 8, 5, 3], |i| ((i * 31) % 7) as f64 - 3.0);
        let offs = quartile_offsets(SamplingRange::Long, 5, 3);
        let bits = reconstruct(&pack(&x, &[0.0]).unwrap(), &offs).unwrap();
        let real = shift_real(&unpack(&pack(&x, &[0.0]).unwrap()), &offs).unwrap();
        assert_eq!(unpack(&bits), real);
    }
}

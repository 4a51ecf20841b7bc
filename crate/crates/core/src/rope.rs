// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rotary position embedding over adjacent pairs `(x[2i], x[2i+1])`.

use crate::error::{Error, Result};

/// Rotation frequency of plane `i` in a head of width `head_dim`:
/// `rope_base^(-2i / head_dim)`.
pub fn plane_frequency(plane: usize, head_dim: usize, rope_base: f64) -> f64 {
    rope_base.powf(-2.0 * plane as f64 / head_dim as f64)
}

/// Rotates each 2-plane of `x` by `position * rope_base^(-2i/len)`.
pub fn apply_rope(x: &[f64], position: usize, rope_base: f64) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    apply_rope_in_place(&mut out, position, rope_base)?;
    Ok(out)
}

pub fn apply_rope_in_place(x: &mut [f64], position: usize, rope_base: f64) -> Result<()> {
    if x.len() % 2 != 0 {
        return Err(Error::Dimension(format!(
            "rotary embedding needs an even length, got {}",
            x.len()
        )));
    }
    let dim = x.len();
    for (i, pair) in x.chunks_exact_mut(2).enumerate() {
        let angle = position as f64 * plane_frequency(i, dim, rope_base);
        rotate(pair, angle.cos(), angle.sin());
    }
    Ok(())
}

#[inline]
fn rotate(pair: &mut [f64], cos: f64, sin: f64) {
    let (a, b) = (pair[0], pair[1]);
    pair[0] = a * cos - b * sin;
    pair[1] = a * sin + b * cos;
}

/// Precomputed cos/sin per (position, plane) for one head width.
#[derive(Debug, Clone)]
pub struct RopeTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(head_dim: usize, max_positions: usize, rope_base: f64) -> Result<Self> {
        if head_dim % 2 != 0 {
            return Err(Error::Dimension(format!(
                "rotary embedding needs an even head_dim, got {head_dim}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(half * max_positions);
        let mut sin = Vec::with_capacity(half * max_positions);
        for pos in 0..max_positions {
            for i in 0..half {
                let angle = pos as f64 * plane_frequency(i, head_dim, rope_base);
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(Self { half, cos, sin })
    }

    /// Rotates one head vector in place.
    #[inline]
    pub fn rotate(&self, x: &mut [f64], position: usize) {
        let base = position * self.half;
        for (i, pair) in x.chunks_exact_mut(2).enumerate() {
            rotate(pair, self.cos[base + i], self.sin[base + i]);
        }
    }

    /// Applies the transpose (inverse) rotation; used to pull gradients back
    /// through the embedding.
    #[inline]
    pub fn rotate_back(&self, x: &mut [f64], position: usize) {
        let base = position * self.half;
        for (i, pair) in x.chunks_exact_mut(2).enumerate() {
            rotate(pair, self.cos[base + i], -self.sin[base + i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn position_zero_is_identity() {
        let x = [0.3, -1.2, 4.0, 0.5];
        assert_eq!(apply_rope(&x, 0, 10000.0).unwrap(), x.to_vec());
    }

    #[test]
    fn hand_evaluated_rotation() {
        // head_dim 4, base 1e4: plane frequencies 1 and 1e4^(-1/2) = 1e-2
        let out = apply_rope(&[1.0, 0.0, 1.0, 0.0], 1, 10000.0).unwrap();
        let expected = [1f64.cos(), 1f64.sin(), 0.01f64.cos(), 0.01f64.sin()];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn odd_length_is_a_dimension_error() {
        assert!(matches!(
            apply_rope(&[1.0, 2.0, 3.0], 2, 10000.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn table_matches_direct_rotation() {
        let table = RopeTable::new(6, 40, 500.0).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        for pos in [0, 1, 7, 39] {
            let mut y = x;
            table.rotate(&mut y, pos);
            let direct = apply_rope(&x, pos, 500.0).unwrap();
            for (a, b) in y.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
            table.rotate_back(&mut y, pos);
            for (a, b) in y.iter().zip(&x) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn plane_norms_preserved(
            v in prop::collection::vec(-10.0f64..10.0, 1..8),
            pos in 0usize..4096,
            base in 2.0f64..1e6,
        ) {
            let mut x = v.clone();
            x.extend(v.iter().rev());
            let y = apply_rope(&x, pos, base).unwrap();
            for (a, b) in x.chunks_exact(2).zip(y.chunks_exact(2)) {
                let na = a[0].hypot(a[1]);
                let nb = b[0].hypot(b[1]);
                prop_assert!((na - nb).abs() < 1e-9);
            }
        }
    }
}

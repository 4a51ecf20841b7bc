// SPDX-License-Identifier: MIT OR Apache-2.0

//! Post-softmax attention: the causal softmax kernel, captured attention
//! records, and the hook seam where interventions rewrite attention weights
//! before they multiply the values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::TokenSegmentation;

/// Tolerance on row sums checked at the hook boundary.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Softmax of `scores[..visible]` written into `out`; entries from `visible`
/// onward are set to zero.
pub fn softmax_prefix(scores: &[f64], visible: usize, out: &mut [f64]) -> Result<()> {
    if visible == 0 {
        return Err(Error::Contract(
            "causal softmax over a fully masked row".into(),
        ));
    }
    let visible = visible.min(scores.len());
    let max = scores[..visible]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("attention scores".into()));
    }
    let mut sum = 0.0;
    for (o, &s) in out[..visible].iter_mut().zip(&scores[..visible]) {
        let e = (s - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in &mut out[..visible] {
        *o *= inv;
    }
    for o in &mut out[visible..] {
        *o = 0.0;
    }
    Ok(())
}

/// Row-wise causal softmax of a `[rows, cols]` score block whose rows are the
/// query positions `cols - rows .. cols`.
pub fn causal_softmax(scores: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if scores.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{} scores for a {rows}x{cols} block",
            scores.len()
        )));
    }
    if rows > cols {
        return Err(Error::Shape(format!(
            "{rows} query rows cannot attend causally over {cols} keys"
        )));
    }
    let first = cols - rows;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &scores[r * cols..(r + 1) * cols];
        softmax_prefix(row, first + r + 1, &mut out[r * cols..(r + 1) * cols])?;
    }
    Ok(out)
}

/// Post-softmax attention of one head: `[rows, cols]`, row-major, where the
/// rows are the last `rows` positions of a `cols`-long sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl AttentionRecord {
    pub fn first_query(&self) -> usize {
        self.cols - self.rows
    }

    /// Attention row of absolute query position `query`.
    pub fn row(&self, query: usize) -> &[f64] {
        let r = query - self.first_query();
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Entry `(query, key)` in absolute positions.
    pub fn at(&self, query: usize, key: usize) -> f64 {
        self.row(query)[key]
    }
}

/// Prefill (whole prompt) or incremental decode (one new query row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

/// Where a hook is being invoked.
#[derive(Debug, Clone, Copy)]
pub struct HookContext<'a> {
    pub layer: usize,
    pub head: usize,
    pub phase: Phase,
    pub segmentation: &'a TokenSegmentation,
}

/// Mutable view over the attention rows of one head for a block of query
/// positions `first_query .. first_query + rows`.
#[derive(Debug)]
pub struct AttentionRows<'a> {
    data: &'a mut [f64],
    cols: usize,
    first_query: usize,
}

impl<'a> AttentionRows<'a> {
    pub fn new(data: &'a mut [f64], cols: usize, first_query: usize) -> Self {
        debug_assert!(cols > 0 && data.len() % cols == 0);
        Self {
            data,
            cols,
            first_query,
        }
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn first_query(&self) -> usize {
        self.first_query
    }

    pub fn queries(&self) -> std::ops::Range<usize> {
        self.first_query..self.first_query + self.rows()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data
    }

    /// Verifies each row is a causal probability distribution: entries are
    /// finite and nonnegative, zero past the query position, summing to 1
    /// within [`ROW_SUM_TOLERANCE`]. Returns the offending query and reason.
    pub fn check(&self) -> std::result::Result<(), (usize, String)> {
        for r in 0..self.rows() {
            let query = self.first_query + r;
            let row = self.row(r);
            let mut sum = 0.0;
            for (j, &a) in row.iter().enumerate() {
                if !a.is_finite() || a < 0.0 {
                    return Err((query, format!("entry {j} = {a}")));
                }
                if j > query && a != 0.0 {
                    return Err((query, format!("future key {j} has weight {a}")));
                }
                sum += a;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err((query, format!("row sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Rewrites post-softmax attention before it multiplies the values.
///
/// Implementations must be deterministic and leave every row a causal
/// probability distribution; the decoder checks this after each call.
pub trait AttentionHook: Send + Sync {
    fn rewrite(&self, ctx: &HookContext<'_>, rows: &mut AttentionRows<'_>) -> Result<()>;

    /// When true the head contributes a zero vector to its layer's attention
    /// output.
    fn masks_head(&self, _layer: usize, _head: usize) -> bool {
        false
    }
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHook;

impl AttentionHook for IdentityHook {
    fn rewrite(&self, _ctx: &HookContext<'_>, _rows: &mut AttentionRows<'_>) -> Result<()> {
        Ok(())
    }
}

/// Applies hooks in order; a head is masked if any member masks it.
#[derive(Default)]
pub struct HookChain {
    hooks: Vec<Box<dyn AttentionHook>>,
}

impl HookChain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, hook: impl AttentionHook + 'static) -> Self {
        self.hooks.push(Box::new(hook));
        self
    }

    pub fn len(&self) -> usize {
        self.hooks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }
}

impl AttentionHook for HookChain {
    fn rewrite(&self, ctx: &HookContext<'_>, rows: &mut AttentionRows<'_>) -> Result<()> {
        for h in &self.hooks {
            h.rewrite(ctx, rows)?;
        }
        Ok(())
    }

    fn masks_head(&self, layer: usize, head: usize) -> bool {
        self.hooks.iter().any(|h| h.masks_head(layer, head))
    }
}

/// Multiplies `row[j]` by `scale` for every listed column and renormalizes
/// when anything changed. Columns outside the row are ignored.
pub(crate) fn scale_columns_and_renormalize(
    row: &mut [f64],
    groups: &[(&[usize], f64)],
) -> Result<bool> {
    let mut touched = false;
    for &(cols, scale) in groups {
        if scale == 1.0 {
            continue;
        }
        for &j in cols {
            if let Some(a) = row.get_mut(j) {
                if *a != 0.0 {
                    *a *= scale;
                    touched = true;
                }
            }
        }
    }
    if touched {
        renormalize(row)?;
    }
    Ok(touched)
}

pub(crate) fn renormalize(row: &mut [f64]) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if !(sum.is_finite() && sum > 0.0) {
        return Err(Error::NonFinite(format!("row sum {sum} after rescaling")));
    }
    let inv = 1.0 / sum;
    for a in row.iter_mut() {
        *a *= inv;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_scores_give_uniform_weights() {
        let p = causal_softmax(&[0.7; 4], 1, 4).unwrap();
        for x in p {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_invariance_is_exact_for_constant_rows() {
        let a = causal_softmax(&[0.0, 0.0, 0.0], 1, 3).unwrap();
        let b = causal_softmax(&[5.0, 5.0, 5.0], 1, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn log_scores_give_proportional_weights() {
        let s = [1f64.ln(), 2f64.ln(), 3f64.ln()];
        let p = causal_softmax(&s, 1, 3).unwrap();
        for (x, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_block_masks_future() {
        let p = causal_softmax(&[1.0; 9], 3, 3).unwrap();
        assert_eq!(p[1], 0.0);
        assert_eq!(p[2], 0.0);
        assert_eq!(p[5], 0.0);
        assert!((p[3] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut out = [0.0; 3];
        assert!(matches!(
            softmax_prefix(&[1.0, 2.0, 3.0], 0, &mut out),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn row_check_flags_future_mass() {
        let mut data = vec![0.5, 0.5, 0.0, 0.0];
        let rows = AttentionRows::new(&mut data, 2, 0);
        assert_eq!(rows.check().unwrap_err().0, 0);
    }

    proptest! {
        #[test]
        fn rows_are_probability_distributions(
            scores in prop::collection::vec(-30.0f64..30.0, 1..40),
            shift in -100.0f64..100.0,
        ) {
            let n = scores.len();
            let p = causal_softmax(&scores, 1, n).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let q = causal_softmax(&shifted, 1, n).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

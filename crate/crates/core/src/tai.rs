// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token-level attention intervention.
//!
//! Visual tokens are ranked by how much attention they receive from the
//! other visual tokens (head-averaged). Tokens above a large fraction of the
//! maximum are sinks; tokens above a small fraction (and not sinks) are
//! salient. Text-query rows then have their salient columns scaled by `k`,
//! their sink columns by `delta`, and are renormalized.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{scale_columns_and_renormalize, AttentionHook, AttentionRecord, AttentionRows, HookContext};
use crate::error::{Error, FieldError, Result};
use crate::model::DecodeState;
use crate::segmentation::TokenSegmentation;

/// Head-averaged attention each visual token receives from the other visual
/// tokens of one layer. `scores[m]` belongs to position `vis_start + m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceptionScores {
    pub layer: usize,
    pub vis_start: usize,
    pub scores: Vec<f64>,
}

impl ReceptionScores {
    pub fn max(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualTokenClasses {
    pub layer: usize,
    /// Absolute positions, ascending.
    pub salient: Vec<usize>,
    /// Absolute positions, ascending.
    pub sink: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaiParams {
    pub k: f64,
    pub delta: f64,
    pub tau_salient: f64,
    pub tau_sink: f64,
    pub start_layer: usize,
}

impl Default for TaiParams {
    /// The captioning setting: `k = 10`, `delta = 0.4`.
    fn default() -> Self {
        Self {
            k: 10.0,
            delta: 0.4,
            tau_salient: 1.0 / 20.0,
            tau_sink: 0.5,
            start_layer: 2,
        }
    }
}

impl TaiParams {
    /// The yes/no probing setting: `k = delta = 20`.
    pub fn probing() -> Self {
        Self {
            k: 20.0,
            delta: 20.0,
            ..Self::default()
        }
    }

    /// Scales of one, so rewriting is the identity.
    pub fn identity() -> Self {
        Self {
            k: 1.0,
            delta: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let p = |f: &str| format!("{prefix}.{f}");
        if !(self.k.is_finite() && self.k > 0.0) {
            errs.push(FieldError::new(p("k"), "must be a finite value above 0"));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            errs.push(FieldError::new(p("delta"), "must be a finite value above 0"));
        }
        for (name, tau) in [("tau_salient", self.tau_salient), ("tau_sink", self.tau_sink)] {
            if !(tau > 0.0 && tau <= 1.0) {
                errs.push(FieldError::new(p(name), "must lie in (0, 1]"));
            }
        }
        if self.tau_sink <= self.tau_salient {
            errs.push(FieldError::new(p("tau_sink"), "must exceed tau_salient"));
        }
        errs
    }
}

/// `R(j) = (1/H) sum_h sum_{i in vis, i != j} A_h[i, j]` over the records of
/// one layer (one record per head).
pub fn reception_scores(
    records: &[&AttentionRecord],
    seg: &TokenSegmentation,
    num_heads: usize,
) -> Result<ReceptionScores> {
    let layer = check_layer_records(records, num_heads)?;
    let vis = seg.vis;
    for r in records {
        if vis.end > r.cols || vis.start < r.first_query() {
            return Err(Error::OutOfRange(format!(
                "visual range [{}, {}) not covered by a {}x{} record",
                vis.start, vis.end, r.rows, r.cols
            )));
        }
    }
    let mut scores = vec![0.0; vis.len()];
    for r in records {
        for i in vis.range() {
            let row = r.row(i);
            for (m, j) in vis.range().enumerate() {
                if i != j {
                    scores[m] += row[j];
                }
            }
        }
    }
    let h = records.len() as f64;
    for s in &mut scores {
        *s /= h;
    }
    Ok(ReceptionScores {
        layer,
        vis_start: vis.start,
        scores,
    })
}

/// Validates that `records` hold exactly heads `0..num_heads` of one layer.
pub(crate) fn check_layer_records(records: &[&AttentionRecord], num_heads: usize) -> Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| Error::MissingData("no attention records for layer".into()))?;
    let layer = first.layer;
    let mut seen = vec![false; num_heads];
    for r in records {
        if r.layer != layer {
            return Err(Error::Shape(format!(
                "records mix layers {layer} and {}",
                r.layer
            )));
        }
        match seen.get_mut(r.head) {
            Some(s) if !*s => *s = true,
            _ => {
                return Err(Error::Shape(format!(
                    "unexpected or duplicate head {} in layer {layer}",
                    r.head
                )))
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::MissingData(format!(
            "head {missing} of layer {layer} was not captured"
        )));
    }
    Ok(layer)
}

/// Positions whose score strictly exceeds `tau * max`.
pub fn threshold_select(scores: &ReceptionScores, tau: f64) -> Result<Vec<usize>> {
    if scores.scores.is_empty() {
        return Err(Error::Contract("no visual tokens to select from".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::OutOfRange(format!("tau {tau} outside (0, 1]")));
    }
    let cut = tau * scores.max();
    Ok(scores
        .scores
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > cut)
        .map(|(m, _)| scores.vis_start + m)
        .collect())
}

/// Sinks clear `tau_sink`; salient tokens clear `tau_salient` and are not sinks.
pub fn classify_visual_tokens(scores: &ReceptionScores, params: &TaiParams) -> Result<VisualTokenClasses> {
    let sink = threshold_select(scores, params.tau_sink)?;
    let salient = threshold_select(scores, params.tau_salient)?
        .into_iter()
        .filter(|j| sink.binary_search(j).is_err())
        .collect();
    Ok(VisualTokenClasses {
        layer: scores.layer,
        salient,
        sink,
    })
}

/// Rescales salient and sink columns of every text-query row, then
/// renormalizes those rows. Other rows are left untouched.
pub fn tai_rewrite(
    rows: &mut AttentionRows<'_>,
    classes: &VisualTokenClasses,
    params: &TaiParams,
    seg: &TokenSegmentation,
) -> Result<()> {
    if rows.rows() == 0 || rows.cols() == 0 {
        return Err(Error::Shape("empty attention rows".into()));
    }
    if !(params.k.is_finite() && params.delta.is_finite()) {
        return Err(Error::NonFinite("TAI scale".into()));
    }
    let groups = [
        (classes.salient.as_slice(), params.k),
        (classes.sink.as_slice(), params.delta),
    ];
    for r in 0..rows.rows() {
        let query = rows.first_query() + r;
        if !seg.is_text(query) {
            continue;
        }
        scale_columns_and_renormalize(rows.row_mut(r), &groups)?;
    }
    Ok(())
}

/// Classifies the visual tokens of every captured layer of a prefill state
/// and caches the result in the state.
pub fn classify_visual_tokens_at_prefill(
    state: &mut DecodeState,
    params: &TaiParams,
    num_layers: usize,
    num_heads: usize,
) -> Result<Vec<VisualTokenClasses>> {
    let mut out = Vec::with_capacity(num_layers);
    for layer in 0..num_layers {
        let records = state.layer_records(layer);
        if records.is_empty() {
            if layer >= params.start_layer {
                return Err(Error::MissingData(format!(
                    "prefill attention of layer {layer} was not captured"
                )));
            }
            out.push(VisualTokenClasses {
                layer,
                salient: Vec::new(),
                sink: Vec::new(),
            });
            continue;
        }
        let scores = reception_scores(&records, &state.segmentation, num_heads)?;
        out.push(classify_visual_tokens(&scores, params)?);
    }
    state.visual_classes = Some(out.clone());
    Ok(out)
}

/// JSON view `{layer: {salient: [...], sink: [...]}}`.
pub fn classes_to_json(classes: &[VisualTokenClasses]) -> serde_json::Value {
    #[derive(Serialize)]
    struct Entry<'a> {
        salient: &'a [usize],
        sink: &'a [usize],
    }
    let map: BTreeMap<String, Entry<'_>> = classes
        .iter()
        .map(|c| {
            (
                c.layer.to_string(),
                Entry {
                    salient: &c.salient,
                    sink: &c.sink,
                },
            )
        })
        .collect();
    serde_json::to_value(map).expect("plain data serializes")
}

/// Applies TAI with per-layer classes frozen at prefill.
#[derive(Debug, Clone)]
pub struct TaiHook {
    params: TaiParams,
    classes: Vec<VisualTokenClasses>,
}

impl TaiHook {
    pub fn new(params: TaiParams, classes: Vec<VisualTokenClasses>) -> Self {
        Self { params, classes }
    }

    pub fn classes(&self) -> &[VisualTokenClasses] {
        &self.classes
    }
}

impl AttentionHook for TaiHook {
    fn rewrite(&self, ctx: &HookContext<'_>, rows: &mut AttentionRows<'_>) -> Result<()> {
        if ctx.layer < self.params.start_layer {
            return Ok(());
        }
        match self.classes.get(ctx.layer) {
            Some(classes) => tai_rewrite(rows, classes, &self.params, ctx.segmentation),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(v: &[f64]) -> ReceptionScores {
        ReceptionScores {
            layer: 0,
            vis_start: 0,
            scores: v.to_vec(),
        }
    }

    /// One head over a prompt that is entirely visual with causal-uniform rows.
    fn uniform_causal(n: usize, layer: usize, head: usize) -> AttentionRecord {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                data[i * n + j] = 1.0 / (i + 1) as f64;
            }
        }
        AttentionRecord { layer, head, rows: n, cols: n, data }
    }

    #[test]
    fn single_visual_token_receives_nothing() {
        let rec = uniform_causal(1, 0, 0);
        let seg = TokenSegmentation::contiguous(0, 1, 0);
        let r = reception_scores(&[&rec], &seg, 1).unwrap();
        assert_eq!(r.scores, vec![0.0]);
    }

    #[test]
    fn hand_summed_reception() {
        let rec = uniform_causal(3, 0, 0);
        let seg = TokenSegmentation::contiguous(0, 3, 0);
        let r = reception_scores(&[&rec], &seg, 1).unwrap();
        let want = [0.5 + 1.0 / 3.0, 1.0 / 3.0, 0.0];
        for (a, b) in r.scores.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_heads_average_out() {
        let a = uniform_causal(4, 0, 0);
        let b = uniform_causal(4, 0, 1);
        let seg = TokenSegmentation::contiguous(1, 3, 0);
        let one = reception_scores(&[&a], &seg, 1).unwrap();
        let two = reception_scores(&[&a, &b], &seg, 2).unwrap();
        assert_eq!(one.scores, two.scores);
    }

    #[test]
    fn missing_head_is_reported() {
        let a = uniform_causal(4, 0, 0);
        let seg = TokenSegmentation::contiguous(1, 3, 0);
        assert!(matches!(
            reception_scores(&[&a], &seg, 2),
            Err(Error::MissingData(_))
        ));
    }

    #[test]
    fn out_of_bounds_segmentation() {
        let a = uniform_causal(3, 0, 0);
        let seg = TokenSegmentation::contiguous(1, 3, 0);
        assert!(matches!(
            reception_scores(&[&a], &seg, 1),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn hand_thresholds() {
        let r = scores(&[10.0, 3.0, 0.4, 0.2]);
        assert_eq!(threshold_select(&r, 0.5).unwrap(), vec![0]);
        assert_eq!(threshold_select(&r, 1.0 / 20.0).unwrap(), vec![0, 1]);
        assert!(threshold_select(&r, 1.0).unwrap().is_empty());
        assert!(threshold_select(&scores(&[0.0, 0.0]), 0.1).unwrap().is_empty());
        assert!(threshold_select(&r, 0.0).is_err());
    }

    #[test]
    fn hand_classification() {
        let c = classify_visual_tokens(&scores(&[10.0, 3.0, 0.4, 0.2]), &TaiParams::default()).unwrap();
        assert_eq!(c.sink, vec![0]);
        assert_eq!(c.salient, vec![1]);
        let flat = classify_visual_tokens(&scores(&[2.0; 5]), &TaiParams::default()).unwrap();
        assert_eq!(flat.sink, vec![0, 1, 2, 3, 4]);
        assert!(flat.salient.is_empty());
        let at_max = threshold_select(&scores(&[2.0; 5]), 1.0).unwrap();
        assert!(at_max.is_empty());
        let dom = classify_visual_tokens(&scores(&[0.1, 9.0, 0.3]), &TaiParams::default()).unwrap();
        assert_eq!(dom.sink, vec![1]);
        assert!(!dom.salient.contains(&1));
    }

    #[test]
    fn hand_renormalization() {
        let seg = TokenSegmentation::contiguous(0, 3, 1);
        let mut data = vec![0.4, 0.3, 0.2, 0.1];
        let classes = VisualTokenClasses { layer: 0, salient: vec![1], sink: vec![] };
        let params = TaiParams { k: 2.0, ..TaiParams::default() };
        tai_rewrite(&mut AttentionRows::new(&mut data, 4, 3), &classes, &params, &seg).unwrap();
        let want = [0.4 / 1.3, 0.6 / 1.3, 0.2 / 1.3, 0.1 / 1.3];
        for (a, b) in data.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((data[0] - 0.3077).abs() < 5e-5 && (data[1] - 0.4615).abs() < 5e-5);
    }

    #[test]
    fn unit_scales_are_bit_identical() {
        let seg = TokenSegmentation::contiguous(0, 3, 1);
        let orig = vec![0.4, 0.3, 0.2, 0.1];
        let mut data = orig.clone();
        let classes = VisualTokenClasses { layer: 0, salient: vec![1], sink: vec![0] };
        tai_rewrite(&mut AttentionRows::new(&mut data, 4, 3), &classes, &TaiParams::identity(), &seg).unwrap();
        assert_eq!(data, orig);
    }

    #[test]
    fn visual_query_rows_untouched() {
        let seg = TokenSegmentation::contiguous(0, 2, 1);
        let mut data = vec![0.5, 0.5, 0.0, 0.2, 0.3, 0.5];
        let classes = VisualTokenClasses { layer: 0, salient: vec![0], sink: vec![] };
        tai_rewrite(&mut AttentionRows::new(&mut data, 3, 1), &classes, &TaiParams::default(), &seg).unwrap();
        assert_eq!(&data[..3], &[0.5, 0.5, 0.0]);
        assert!(data[3] > 0.2);
    }

    #[test]
    fn salient_mass_grows_with_k() {
        let seg = TokenSegmentation::contiguous(0, 3, 1);
        let classes = VisualTokenClasses { layer: 0, salient: vec![1], sink: vec![] };
        let mut last = 0.0;
        for k in [1.0, 2.0, 5.0, 10.0, 20.0] {
            let mut data = vec![0.4, 0.3, 0.2, 0.1];
            let params = TaiParams { k, ..TaiParams::default() };
            tai_rewrite(&mut AttentionRows::new(&mut data, 4, 3), &classes, &params, &seg).unwrap();
            assert!(data[1] > last);
            last = data[1];
        }
    }

    #[test]
    fn params_validation() {
        assert!(TaiParams::default().validate("tai").is_empty());
        let bad = TaiParams { k: 0.0, tau_sink: 0.01, ..TaiParams::default() };
        let errs = bad.validate("tai");
        assert!(errs.iter().any(|e| e.path == "tai.k"));
        assert!(errs.iter().any(|e| e.path == "tai.tau_sink"));
    }

    #[test]
    fn json_export_shape() {
        let c = vec![VisualTokenClasses { layer: 2, salient: vec![5, 6], sink: vec![4] }];
        assert_eq!(
            classes_to_json(&c).to_string(),
            r#"{"2":{"salient":[5,6],"sink":[4]}}"#
        );
    }

    proptest! {
        #[test]
        fn threshold_nesting(
            v in prop::collection::vec(0.0f64..100.0, 1..50),
            a in 0.001f64..1.0,
            b in 0.001f64..1.0,
        ) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let r = scores(&v);
            let big = threshold_select(&r, lo).unwrap();
            let small = threshold_select(&r, hi).unwrap();
            prop_assert!(small.iter().all(|j| big.contains(j)));
            prop_assert!(threshold_select(&r, 1.0).unwrap().is_empty());
        }

        #[test]
        fn rewrite_keeps_rows_stochastic_and_ratios(
            raw in prop::collection::vec(0.01f64..1.0, 6..24),
            k in 0.1f64..30.0,
            delta in 0.1f64..30.0,
        ) {
            let n = raw.len();
            let sum: f64 = raw.iter().sum();
            let orig: Vec<f64> = raw.iter().map(|x| x / sum).collect();
            let seg = TokenSegmentation::contiguous(1, n - 2, 1);
            let classes = VisualTokenClasses { layer: 0, salient: vec![1, 2], sink: vec![3] };
            let mut data = orig.clone();
            let params = TaiParams { k, delta, ..TaiParams::default() };
            tai_rewrite(&mut AttentionRows::new(&mut data, n, n - 1), &classes, &params, &seg).unwrap();
            let s: f64 = data.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            let r0 = data[0] / data[n - 1];
            prop_assert!((r0 / (orig[0] / orig[n - 1]) - 1.0).abs() < 1e-9);
        }
    }
}

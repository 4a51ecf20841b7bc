// SPDX-License-Identifier: MIT OR Apache-2.0

//! Head-level attention intervention.
//!
//! Heads are typed from the prefill attention of the instruction rows:
//! visual-sensitive heads by a z-score rule on visual mass, text- and
//! system-dominant heads by an absolute threshold on the per-row fraction of
//! attention they spend on that group. Dominant heads then have the
//! matching columns scaled by `1 - alpha` and their rows renormalized.
//! Visual heads are never suppressed; they feed analysis and masking.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionHook, AttentionRecord, AttentionRows, HookContext};
use crate::config::ModelConfig;
use crate::error::{Error, FieldError, Result};
use crate::model::DecodeState;
use crate::segmentation::{TokenGroup, TokenSegmentation};
use crate::tai::check_layer_records;

/// Per-head group masses of one layer, each a fraction of one text row's
/// attention budget (summed over text rows, divided by their count).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub layer: usize,
    pub vis: Vec<f64>,
    pub txt: Vec<f64>,
    pub sys: Vec<f64>,
    /// Mean of `vis` across heads.
    pub mean: f64,
    /// Population standard deviation of `vis` across heads.
    pub std: f64,
}

impl HeadStats {
    pub fn group(&self, group: TokenGroup) -> &[f64] {
        match group {
            TokenGroup::Visual => &self.vis,
            TokenGroup::Text => &self.txt,
            TokenGroup::System => &self.sys,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerHeads {
    pub visual: Vec<usize>,
    pub text: Vec<usize>,
    pub system: Vec<usize>,
}

/// Head types per layer, fixed at prefill.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadClassification {
    pub layers: Vec<LayerHeads>,
}

impl HeadClassification {
    pub fn is_text(&self, layer: usize, head: usize) -> bool {
        self.layers.get(layer).is_some_and(|l| l.text.contains(&head))
    }

    pub fn is_system(&self, layer: usize, head: usize) -> bool {
        self.layers
            .get(layer)
            .is_some_and(|l| l.system.contains(&head))
    }

    pub fn is_visual(&self, layer: usize, head: usize) -> bool {
        self.layers
            .get(layer)
            .is_some_and(|l| l.visual.contains(&head))
    }

    /// JSON view `{layer: {visual: [...], text: [...], system: [...]}}`.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<String, &LayerHeads> = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, heads)| (l.to_string(), heads))
            .collect();
        serde_json::to_value(map).expect("plain data serializes")
    }
}

/// Layer interval `[start, end)`; `end = None` runs to the last layer.
/// Serialized as `[start, end]` with `null` for an open end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, Option<usize>)", into = "(usize, Option<usize>)")]
pub struct LayerSpan {
    pub start: usize,
    pub end: Option<usize>,
}

impl LayerSpan {
    pub const ALL: LayerSpan = LayerSpan { start: 0, end: None };

    pub const fn new(start: usize, end: usize) -> Self {
        Self {
            start,
            end: Some(end),
        }
    }

    pub fn contains(&self, layer: usize) -> bool {
        layer >= self.start && self.end.map_or(true, |e| layer < e)
    }
}

impl From<(usize, Option<usize>)> for LayerSpan {
    fn from((start, end): (usize, Option<usize>)) -> Self {
        Self { start, end }
    }
}

impl From<LayerSpan> for (usize, Option<usize>) {
    fn from(s: LayerSpan) -> Self {
        (s.start, s.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HaiParams {
    /// z-score multiplier for visual heads.
    pub lambda_vis: f64,
    /// Absolute per-row fraction threshold for text-dominant heads.
    pub lambda_txt: f64,
    /// Absolute per-row fraction threshold for system-dominant heads.
    pub lambda_sys: f64,
    pub alpha_txt: f64,
    pub alpha_sys: f64,
    pub txt_layers: LayerSpan,
    pub sys_layers: LayerSpan,
}

impl Default for HaiParams {
    /// LLaVA-style setting.
    fn default() -> Self {
        Self {
            lambda_vis: 1.0,
            lambda_txt: 0.3,
            lambda_sys: 0.8,
            alpha_txt: 1.0,
            alpha_sys: 0.6,
            txt_layers: LayerSpan::new(0, 8),
            sys_layers: LayerSpan::ALL,
        }
    }
}

impl HaiParams {
    /// Milder suppression for models with few (resampled) visual tokens.
    pub fn compressed_visual() -> Self {
        Self {
            alpha_txt: 0.6,
            alpha_sys: 0.4,
            ..Self::default()
        }
    }

    pub fn identity() -> Self {
        Self {
            alpha_txt: 0.0,
            alpha_sys: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let p = |f: &str| format!("{prefix}.{f}");
        for (name, a) in [("alpha_txt", self.alpha_txt), ("alpha_sys", self.alpha_sys)] {
            if !(0.0..=1.0).contains(&a) {
                errs.push(FieldError::new(p(name), "must lie in [0, 1]"));
            }
        }
        for (name, x) in [
            ("lambda_vis", self.lambda_vis),
            ("lambda_txt", self.lambda_txt),
            ("lambda_sys", self.lambda_sys),
        ] {
            if !x.is_finite() {
                errs.push(FieldError::new(p(name), "must be finite"));
            }
        }
        for (name, s) in [("txt_layers", self.txt_layers), ("sys_layers", self.sys_layers)] {
            if s.end.is_some_and(|e| e < s.start) {
                errs.push(FieldError::new(p(name), "end precedes start"));
            }
        }
        errs
    }
}

/// Per-head attention from text rows to `group`, divided by the number of
/// text rows.
pub fn head_group_mass(
    records: &[&AttentionRecord],
    seg: &TokenSegmentation,
    group: TokenGroup,
) -> Result<Vec<f64>> {
    let cols = records.first().map_or(0, |r| r.cols);
    if seg.group_spans(group, cols).iter().all(|s| s.is_empty()) {
        return Err(Error::Contract(format!("token group {group:?} is empty")));
    }
    group_mass(records, seg, group)
}

fn group_mass(records: &[&AttentionRecord], seg: &TokenSegmentation, group: TokenGroup) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let queries: Vec<usize> = (r.first_query()..r.cols).filter(|&i| seg.is_text(i)).collect();
        if queries.is_empty() {
            return Err(Error::Contract(
                "no text query rows to measure head attention from".into(),
            ));
        }
        let spans = seg.group_spans(group, r.cols);
        let mut total = 0.0;
        for &i in &queries {
            let row = r.row(i);
            for span in &spans {
                for j in span.range() {
                    total += row[j];
                }
            }
        }
        out.push(total / queries.len() as f64);
    }
    Ok(out)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Group masses and visual-mass spread of one layer. Empty groups yield
/// zero masses.
pub fn head_stats(records: &[&AttentionRecord], seg: &TokenSegmentation, num_heads: usize) -> Result<HeadStats> {
    let layer = check_layer_records(records, num_heads)?;
    let mut sorted: Vec<&AttentionRecord> = records.to_vec();
    sorted.sort_by_key(|r| r.head);
    let vis = group_mass(&sorted, seg, TokenGroup::Visual)?;
    let txt = group_mass(&sorted, seg, TokenGroup::Text)?;
    let sys = group_mass(&sorted, seg, TokenGroup::System)?;
    let (mean, std) = mean_std(&vis);
    Ok(HeadStats {
        layer,
        vis,
        txt,
        sys,
        mean,
        std,
    })
}

/// Heads whose visual mass strictly exceeds `mean + lambda * std`.
pub fn identify_visual_heads(stats: &HeadStats, lambda_vis: f64) -> Result<Vec<usize>> {
    if stats.vis.len() < 2 {
        return Err(Error::Contract(
            "visual-head selection needs at least two heads".into(),
        ));
    }
    let cut = stats.mean + lambda_vis * stats.std;
    Ok(stats
        .vis
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > cut)
        .map(|(h, _)| h)
        .collect())
}

/// Heads whose per-row mass on `group` strictly exceeds `lambda`.
pub fn identify_dominant_heads(stats: &HeadStats, group: TokenGroup, lambda: f64) -> Vec<usize> {
    if !(0.0..=1.0).contains(&lambda) {
        log::warn!("dominance threshold {lambda} for {group:?} lies outside [0, 1]");
    }
    stats
        .group(group)
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > lambda)
        .map(|(h, _)| h)
        .collect()
}

pub fn classify_layer(stats: &HeadStats, params: &HaiParams) -> Result<LayerHeads> {
    Ok(LayerHeads {
        visual: identify_visual_heads(stats, params.lambda_vis)?,
        text: identify_dominant_heads(stats, TokenGroup::Text, params.lambda_txt),
        system: identify_dominant_heads(stats, TokenGroup::System, params.lambda_sys),
    })
}

/// Head statistics of every layer of a state that captured its prefill.
pub fn prefill_head_stats(state: &DecodeState, config: &ModelConfig) -> Result<Vec<HeadStats>> {
    (0..config.num_layers)
        .map(|layer| {
            let records = state.layer_records(layer);
            if records.is_empty() {
                return Err(Error::MissingData(format!(
                    "prefill attention of layer {layer} was not captured"
                )));
            }
            head_stats(&records, state.segmentation(), config.num_heads)
        })
        .collect()
}

/// Types every head from the captured prefill attention and caches the
/// result in the state.
pub fn classify_heads_at_prefill(
    state: &mut DecodeState,
    params: &HaiParams,
    config: &ModelConfig,
) -> Result<HeadClassification> {
    let stats = prefill_head_stats(state, config)?;
    let layers = stats
        .iter()
        .map(|s| classify_layer(s, params))
        .collect::<Result<Vec<_>>>()?;
    let classes = HeadClassification { layers };
    state.head_classes = Some(classes.clone());
    Ok(classes)
}

/// A row whose suppressed columns held all of its mass; it was replaced by a
/// uniform distribution over the remaining visible columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DegenerateRow {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
}

/// Suppresses text and/or system columns of the text-query rows of a
/// dominant head, then renormalizes.
pub fn hai_rewrite(
    rows: &mut AttentionRows<'_>,
    classes: &HeadClassification,
    params: &HaiParams,
    seg: &TokenSegmentation,
    layer: usize,
    head: usize,
) -> Result<Vec<DegenerateRow>> {
    let txt_scale = (classes.is_text(layer, head) && params.txt_layers.contains(layer))
        .then_some(1.0 - params.alpha_txt)
        .filter(|&s| s != 1.0);
    let sys_scale = (classes.is_system(layer, head) && params.sys_layers.contains(layer))
        .then_some(1.0 - params.alpha_sys)
        .filter(|&s| s != 1.0);
    if txt_scale.is_none() && sys_scale.is_none() {
        return Ok(Vec::new());
    }
    let mut degenerate = Vec::new();
    for r in 0..rows.rows() {
        let query = rows.first_query() + r;
        if !seg.is_text(query) {
            continue;
        }
        let row = rows.row_mut(r);
        let visible = (query + 1).min(row.len());
        let suppressed = |j: usize| {
            (txt_scale.is_some() && seg.is_text(j)) || (sys_scale.is_some() && seg.sys.contains(j))
        };
        let mut sum = 0.0;
        for (j, a) in row[..visible].iter_mut().enumerate() {
            if let Some(s) = txt_scale.filter(|_| seg.is_text(j)) {
                *a *= s;
            } else if let Some(s) = sys_scale.filter(|_| seg.sys.contains(j)) {
                *a *= s;
            }
            sum += *a;
        }
        if sum > 0.0 && sum.is_finite() {
            let inv = 1.0 / sum;
            row[..visible].iter_mut().for_each(|a| *a *= inv);
            continue;
        }
        let support = (0..visible).filter(|&j| !suppressed(j)).count();
        if support == 0 {
            return Err(Error::DegenerateRow { query });
        }
        let u = 1.0 / support as f64;
        for (j, a) in row[..visible].iter_mut().enumerate() {
            *a = if suppressed(j) { 0.0 } else { u };
        }
        degenerate.push(DegenerateRow { layer, head, query });
    }
    Ok(degenerate)
}

/// Applies HAI with a classification frozen at prefill.
#[derive(Debug, Clone)]
pub struct HaiHook {
    params: HaiParams,
    classes: HeadClassification,
}

impl HaiHook {
    pub fn new(params: HaiParams, classes: HeadClassification) -> Self {
        Self { params, classes }
    }

    pub fn classes(&self) -> &HeadClassification {
        &self.classes
    }

    /// `(layer, head)` pairs whose attention this hook rescales.
    pub fn suppressed_heads(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (l, heads) in self.classes.layers.iter().enumerate() {
            let mut hs: Vec<usize> = Vec::new();
            if self.params.alpha_txt != 0.0 && self.params.txt_layers.contains(l) {
                hs.extend(&heads.text);
            }
            if self.params.alpha_sys != 0.0 && self.params.sys_layers.contains(l) {
                hs.extend(&heads.system);
            }
            hs.sort_unstable();
            hs.dedup();
            out.extend(hs.into_iter().map(|h| (l, h)));
        }
        out
    }
}

impl AttentionHook for HaiHook {
    fn rewrite(&self, ctx: &HookContext<'_>, rows: &mut AttentionRows<'_>) -> Result<()> {
        let degenerate = hai_rewrite(rows, &self.classes, &self.params, ctx.segmentation, ctx.layer, ctx.head)?;
        for d in degenerate {
            log::warn!(
                "degenerate attention row at layer {}, head {}, query {}: fell back to uniform",
                d.layer,
                d.head,
                d.query
            );
        }
        Ok(())
    }
}

/// Zeroes the attention output of selected heads.
#[derive(Debug, Clone)]
pub struct MaskHeads {
    num_heads: usize,
    masked: Vec<bool>,
    pairs: Vec<(usize, usize)>,
}

impl MaskHeads {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Hook that zeroes the listed `(layer, head)` outputs.
pub fn mask_heads(config: &ModelConfig, pairs: &[(usize, usize)]) -> Result<MaskHeads> {
    let mut masked = vec![false; config.num_layers * config.num_heads];
    let mut kept = Vec::new();
    for &(l, h) in pairs {
        if l >= config.num_layers || h >= config.num_heads {
            return Err(Error::OutOfRange(format!(
                "head ({l}, {h}) outside a {}x{} model",
                config.num_layers, config.num_heads
            )));
        }
        let slot = &mut masked[l * config.num_heads + h];
        if !*slot {
            *slot = true;
            kept.push((l, h));
        }
    }
    kept.sort_unstable();
    Ok(MaskHeads {
        num_heads: config.num_heads,
        masked,
        pairs: kept,
    })
}

impl AttentionHook for MaskHeads {
    fn rewrite(&self, _ctx: &HookContext<'_>, _rows: &mut AttentionRows<'_>) -> Result<()> {
        Ok(())
    }

    fn masks_head(&self, layer: usize, head: usize) -> bool {
        self.masked
            .get(layer * self.num_heads + head)
            .copied()
            .unwrap_or(false)
    }
}

/// The `n` heads with the largest mass on `group` in every layer of
/// `layers`; ties go to the lower head index.
pub fn top_heads(stats: &[HeadStats], group: TokenGroup, layers: LayerSpan, n: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for s in stats.iter().filter(|s| layers.contains(s.layer)) {
        let masses = s.group(group);
        if n > masses.len() {
            return Err(Error::OutOfRange(format!(
                "asked for {n} heads but layer {} has {}",
                s.layer,
                masses.len()
            )));
        }
        let mut order: Vec<usize> = (0..masses.len()).collect();
        order.sort_by(|&a, &b| masses[b].total_cmp(&masses[a]).then(a.cmp(&b)));
        let mut picked: Vec<usize> = order.into_iter().take(n).collect();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|h| (s.layer, h)));
    }
    Ok(out)
}

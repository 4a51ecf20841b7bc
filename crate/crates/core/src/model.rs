// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm decoder with rotary attention, prefill and cached greedy decode.
//!
//! Block: `x += Wo·Attn(RMSNorm(x))`, then `x += W2·SiLU(W1·RMSNorm(x))`;
//! logits are `U·RMSNorm(x)`. Activations are `f64`; weights stay `f32`.
//! Prefill and decode share the per-row kernels below, so a cached decode
//! reproduces a full forward pass over the same tokens exactly.

use serde::{Deserialize, Serialize};

use crate::attention::{softmax_prefix, AttentionHook, AttentionRecord, AttentionRows, HookContext, Phase};
use crate::error::{Error, Result};
use crate::hai::HeadClassification;
use crate::rope::RopeTable;
use crate::segmentation::{Span, TokenSegmentation};
use crate::tai::VisualTokenClasses;
use crate::weights::{LayerWeights, ModelWeights};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Which layers keep their full attention matrices during prefill.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capture {
    #[default]
    None,
    All,
    Layers(Span),
}

impl Capture {
    pub fn wants(&self, layer: usize) -> bool {
        match self {
            Capture::None => false,
            Capture::All => true,
            Capture::Layers(span) => span.contains(layer),
        }
    }

    /// Parses `none`, `all` or `layers=a..b` (half-open).
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "none" => Ok(Capture::None),
            "all" => Ok(Capture::All),
            other => {
                let spec = other.strip_prefix("layers=").ok_or_else(|| {
                    Error::Usage(format!("capture must be none, all or layers=a..b, got {other:?}"))
                })?;
                let (a, b) = spec
                    .split_once("..")
                    .ok_or_else(|| Error::Usage(format!("bad layer range {spec:?}")))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Usage(format!("bad layer index {s:?}")))
                };
                Ok(Capture::Layers(Span::new(parse(a)?, parse(b)?)))
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LayerCache {
    /// `[positions, model_dim]`, rotary already applied.
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

/// Session state between decode steps.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub(crate) tokens: Vec<u32>,
    pub(crate) segmentation: TokenSegmentation,
    pub(crate) cache: Vec<LayerCache>,
    pub(crate) capture: Capture,
    pub(crate) records: Vec<AttentionRecord>,
    pub(crate) head_classes: Option<HeadClassification>,
    pub(crate) visual_classes: Option<Vec<VisualTokenClasses>>,
    pub(crate) logits: Vec<f64>,
    model_dim: usize,
}

impl DecodeState {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn segmentation(&self) -> &TokenSegmentation {
        &self.segmentation
    }

    /// Number of positions consumed (and cached).
    pub fn position(&self) -> usize {
        self.tokens.len()
    }

    pub fn cache_len(&self) -> usize {
        self.cache
            .first()
            .map_or(0, |c| c.keys.len() / self.model_dim)
    }

    pub fn capture(&self) -> Capture {
        self.capture
    }

    /// Captured prefill attention, ordered by `(layer, head)`.
    pub fn records(&self) -> &[AttentionRecord] {
        &self.records
    }

    pub fn record(&self, layer: usize, head: usize) -> Option<&AttentionRecord> {
        self.records
            .iter()
            .find(|r| r.layer == layer && r.head == head)
    }

    /// Captured records of one layer, in head order.
    pub fn layer_records(&self, layer: usize) -> Vec<&AttentionRecord> {
        self.records.iter().filter(|r| r.layer == layer).collect()
    }

    /// Logits at the most recent position.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn head_classes(&self) -> Option<&HeadClassification> {
        self.head_classes.as_ref()
    }

    pub fn visual_classes(&self) -> Option<&[VisualTokenClasses]> {
        self.visual_classes.as_deref()
    }
}

/// Output of one greedy step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Greedy pick from the logits held by the state before the step.
    pub token: u32,
    /// Logits after consuming `token`.
    pub logits: Vec<f64>,
    /// The new query row of every head, `1 x (position + 1)`, post-hook.
    pub attention: Vec<AttentionRecord>,
}

/// Result of a full (uncached) pass over a token sequence.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[tokens, vocab]`
    pub logits: Vec<f64>,
    pub vocab_size: usize,
    pub records: Vec<AttentionRecord>,
}

impl ForwardOutput {
    pub fn position_logits(&self, pos: usize) -> &[f64] {
        &self.logits[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// `out[r] = sum_c w[r, c] * x[c]` for row-major `w: [out.len(), x.len()]`.
#[inline]
pub(crate) fn matvec(w: &[f32], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += *a as f64 * b;
        }
        *o = acc;
    }
}

/// `out[c] += sum_r w[r, c] * g[r]`, the transpose product used by backprop.
#[inline]
pub(crate) fn matvec_t_acc(w: &[f32], g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += *a as f64 * gr;
        }
    }
}

/// RMS normalization; returns the RMS used.
#[inline]
pub(crate) fn rms_norm(x: &[f64], gain: &[f32], out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let rms = (ms + NORM_EPS).sqrt();
    let inv = 1.0 / rms;
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * *g as f64;
    }
    rms
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn embed(weights: &ModelWeights, token: u32, out: &mut [f64]) -> Result<()> {
    let d = weights.config.model_dim;
    let t = token as usize;
    if t >= weights.config.vocab_size {
        return Err(Error::OutOfRange(format!(
            "token id {t} outside vocabulary of {}",
            weights.config.vocab_size
        )));
    }
    for (o, w) in out.iter_mut().zip(&weights.embedding[t * d..(t + 1) * d]) {
        *o = *w as f64;
    }
    Ok(())
}

/// Attention scores of one query against keys `0..visible` of one head.
#[inline]
fn head_scores(q: &[f64], keys: &[f64], model_dim: usize, head_off: usize, scale: f64, out: &mut [f64]) {
    let hd = q.len();
    for (j, s) in out.iter_mut().enumerate() {
        let k = &keys[j * model_dim + head_off..j * model_dim + head_off + hd];
        let mut acc = 0.0;
        for (a, b) in q.iter().zip(k) {
            acc += a * b;
        }
        *s = acc * scale;
    }
}

/// `out = sum_j a[j] * v_j` over one head's slice of the value cache.
#[inline]
fn head_mix(a: &[f64], values: &[f64], model_dim: usize, head_off: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    let hd = out.len();
    for (j, &w) in a.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let v = &values[j * model_dim + head_off..j * model_dim + head_off + hd];
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
}

fn ffn_block(layer: &LayerWeights, x: &[f64], h2: &mut [f64], u: &mut [f64], act: &mut [f64], f: &mut [f64]) -> f64 {
    let rms = rms_norm(x, &layer.ffn_norm, h2);
    matvec(&layer.w1, h2, u);
    for (a, z) in act.iter_mut().zip(u.iter()) {
        *a = silu(*z);
    }
    matvec(&layer.w2, act, f);
    rms
}

fn check_hook(
    hook: &dyn AttentionHook,
    ctx: &HookContext<'_>,
    rows: &mut AttentionRows<'_>,
) -> Result<()> {
    hook.rewrite(ctx, rows)?;
    rows.check().map_err(|(query, reason)| Error::HookContract {
        layer: ctx.layer,
        head: ctx.head,
        query,
        reason,
    })
}

// ---------------------------------------------------------------------------
// Full-sequence pass
// ---------------------------------------------------------------------------

/// Post-softmax edit applied without the row-sum contract; used by the
/// finite-difference saliency oracle to perturb single attention entries.
pub(crate) type RawEdit<'a> = &'a dyn Fn(usize, usize, &mut [f64]);

/// Intermediates of a full pass, kept for reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub(crate) struct LayerTape {
    pub x_in: Vec<f64>,
    pub rms_attn: Vec<f64>,
    pub h: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Per head `[n, n]`.
    pub attn: Vec<Vec<f64>>,
    pub masked: Vec<bool>,
    pub x_mid: Vec<f64>,
    pub rms_ffn: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Tape {
    pub layers: Vec<LayerTape>,
    pub x_out: Vec<f64>,
    pub rms_final: Vec<f64>,
}

pub(crate) struct SequencePass {
    pub logits: Vec<f64>,
    pub records: Vec<AttentionRecord>,
    pub cache: Vec<LayerCache>,
    pub tape: Option<Tape>,
}

pub(crate) struct PassOptions<'a> {
    pub hook: Option<&'a dyn AttentionHook>,
    pub capture: Capture,
    pub edit: Option<RawEdit<'a>>,
    pub record_tape: bool,
    pub all_logits: bool,
}

pub(crate) fn run_sequence(
    weights: &ModelWeights,
    tokens: &[u32],
    seg: &TokenSegmentation,
    opts: PassOptions<'_>,
) -> Result<SequencePass> {
    let cfg = &weights.config;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Shape("empty token sequence".into()));
    }
    if n > cfg.max_seq_len {
        return Err(Error::MaxLength {
            max: cfg.max_seq_len,
        });
    }
    seg.validate_for(n)?;
    let (d, hd, nh, f, v) = (
        cfg.model_dim,
        cfg.head_dim,
        cfg.num_heads,
        cfg.ffn_dim,
        cfg.vocab_size,
    );
    let rope = RopeTable::new(hd, n, cfg.rope_base)?;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = vec![0.0; n * d];
    for (i, &t) in tokens.iter().enumerate() {
        embed(weights, t, &mut x[i * d..(i + 1) * d])?;
    }

    let mut records = Vec::new();
    let mut cache = Vec::with_capacity(cfg.num_layers);
    let mut tape = opts.record_tape.then(Tape::default);

    let mut h = vec![0.0; n * d];
    let mut q = vec![0.0; n * d];
    let mut o = vec![0.0; n * d];
    let mut proj = vec![0.0; d];
    let mut h2 = vec![0.0; d];
    let mut u = vec![0.0; f];
    let mut act = vec![0.0; f];
    let mut ff = vec![0.0; d];
    let mut scores = vec![0.0; n];

    for (l, layer) in weights.layers.iter().enumerate() {
        let mut lt = tape.as_ref().map(|_| LayerTape {
            x_in: x.clone(),
            rms_attn: vec![0.0; n],
            attn: Vec::with_capacity(nh),
            masked: Vec::with_capacity(nh),
            rms_ffn: vec![0.0; n],
            u: vec![0.0; n * f],
            ..LayerTape::default()
        });
        let mut keys = vec![0.0; n * d];
        let mut values = vec![0.0; n * d];
        for i in 0..n {
            let row = i * d..(i + 1) * d;
            let rms = rms_norm(&x[row.clone()], &layer.attn_norm, &mut h[row.clone()]);
            if let Some(lt) = lt.as_mut() {
                lt.rms_attn[i] = rms;
            }
            matvec(&layer.wq, &h[row.clone()], &mut q[row.clone()]);
            matvec(&layer.wk, &h[row.clone()], &mut keys[row.clone()]);
            matvec(&layer.wv, &h[row.clone()], &mut values[row.clone()]);
            for head in 0..nh {
                let hs = i * d + head * hd..i * d + (head + 1) * hd;
                rope.rotate(&mut q[hs.clone()], i);
                rope.rotate(&mut keys[hs], i);
            }
        }

        for head in 0..nh {
            let off = head * hd;
            let mut attn = vec![0.0; n * n];
            for i in 0..n {
                let qi = &q[i * d + off..i * d + off + hd];
                head_scores(qi, &keys, d, off, scale, &mut scores[..i + 1]);
                softmax_prefix(&scores[..i + 1], i + 1, &mut attn[i * n..(i + 1) * n])?;
            }
            if let Some(edit) = opts.edit {
                edit(l, head, &mut attn);
            }
            if let Some(hook) = opts.hook {
                let ctx = HookContext {
                    layer: l,
                    head,
                    phase: Phase::Prefill,
                    segmentation: seg,
                };
                check_hook(hook, &ctx, &mut AttentionRows::new(&mut attn, n, 0))?;
            }
            let masked = opts.hook.is_some_and(|hk| hk.masks_head(l, head));
            for i in 0..n {
                let out = &mut o[i * d + off..i * d + off + hd];
                if masked {
                    out.iter_mut().for_each(|z| *z = 0.0);
                } else {
                    head_mix(&attn[i * n..i * n + i + 1], &values, d, off, out);
                }
            }
            if opts.capture.wants(l) {
                records.push(AttentionRecord {
                    layer: l,
                    head,
                    rows: n,
                    cols: n,
                    data: attn.clone(),
                });
            }
            if let Some(lt) = lt.as_mut() {
                lt.attn.push(attn);
                lt.masked.push(masked);
            }
        }

        for i in 0..n {
            let row = i * d..(i + 1) * d;
            matvec(&layer.wo, &o[row.clone()], &mut proj);
            for (xv, p) in x[row.clone()].iter_mut().zip(&proj) {
                *xv += p;
            }
        }
        if let Some(lt) = lt.as_mut() {
            lt.x_mid = x.clone();
        }
        for i in 0..n {
            let row = i * d..(i + 1) * d;
            let rms = ffn_block(layer, &x[row.clone()], &mut h2, &mut u, &mut act, &mut ff);
            if let Some(lt) = lt.as_mut() {
                lt.rms_ffn[i] = rms;
                lt.u[i * f..(i + 1) * f].copy_from_slice(&u);
            }
            for (xv, p) in x[row].iter_mut().zip(&ff) {
                *xv += p;
            }
        }
        if let (Some(tape), Some(mut lt)) = (tape.as_mut(), lt) {
            lt.h = h.clone();
            lt.q = q.clone();
            lt.k = keys.clone();
            lt.v = values.clone();
            tape.layers.push(lt);
        }
        cache.push(LayerCache { keys, values });
    }

    let first_logit_row = if opts.all_logits { 0 } else { n - 1 };
    let mut logits = vec![0.0; (n - first_logit_row) * v];
    let mut hf = vec![0.0; d];
    let mut rms_final = vec![0.0; n];
    for i in 0..n {
        if i < first_logit_row && tape.is_none() {
            continue;
        }
        rms_final[i] = rms_norm(&x[i * d..(i + 1) * d], &weights.final_norm, &mut hf);
        if i >= first_logit_row {
            let r = i - first_logit_row;
            matvec(&weights.unembedding, &hf, &mut logits[r * v..(r + 1) * v]);
        }
    }
    if let Some(t) = tape.as_mut() {
        t.x_out = x;
        t.rms_final = rms_final;
    }
    Ok(SequencePass {
        logits,
        records,
        cache,
        tape,
    })
}

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

/// Full uncached pass returning the logits of every position. Positions at or
/// after `seg.resp_start` are treated as (teacher-forced) responses.
pub fn forward(
    weights: &ModelWeights,
    tokens: &[u32],
    seg: &TokenSegmentation,
    hook: Option<&dyn AttentionHook>,
    capture: Capture,
) -> Result<ForwardOutput> {
    let pass = run_sequence(
        weights,
        tokens,
        seg,
        PassOptions {
            hook,
            capture,
            edit: None,
            record_tape: false,
            all_logits: true,
        },
    )?;
    Ok(ForwardOutput {
        logits: pass.logits,
        vocab_size: weights.config.vocab_size,
        records: pass.records,
    })
}

/// Processes the prompt, filling the key/value cache. With `hook` set, every
/// attention matrix passes through it before multiplying the values.
pub fn prefill(
    weights: &ModelWeights,
    tokens: &[u32],
    seg: &TokenSegmentation,
    hook: Option<&dyn AttentionHook>,
    capture: Capture,
) -> Result<DecodeState> {
    if seg.resp_start != tokens.len() {
        seg.validate()?;
        return Err(Error::Segmentation(format!(
            "layout describes a {}-token prompt but {} tokens were given",
            seg.resp_start,
            tokens.len()
        )));
    }
    let pass = run_sequence(
        weights,
        tokens,
        seg,
        PassOptions {
            hook,
            capture,
            edit: None,
            record_tape: false,
            all_logits: false,
        },
    )?;
    Ok(DecodeState {
        tokens: tokens.to_vec(),
        segmentation: *seg,
        cache: pass.cache,
        capture,
        records: pass.records,
        head_classes: None,
        visual_classes: None,
        logits: pass.logits,
        model_dim: weights.config.model_dim,
    })
}

/// Index of the largest logit; ties resolve to the lowest id.
pub fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Appends `token` to the session, returning its logits and the new
/// attention row of every head.
pub fn feed_token(
    state: &mut DecodeState,
    weights: &ModelWeights,
    token: u32,
    hook: Option<&dyn AttentionHook>,
) -> Result<(Vec<f64>, Vec<AttentionRecord>)> {
    let cfg = &weights.config;
    let pos = state.tokens.len();
    if pos >= cfg.max_seq_len {
        return Err(Error::MaxLength {
            max: cfg.max_seq_len,
        });
    }
    if state.model_dim != cfg.model_dim || state.cache.len() != cfg.num_layers {
        return Err(Error::Shape("decode state does not match these weights".into()));
    }
    let (d, hd, nh, f, v) = (
        cfg.model_dim,
        cfg.head_dim,
        cfg.num_heads,
        cfg.ffn_dim,
        cfg.vocab_size,
    );
    let rope = RopeTable::new(hd, pos + 1, cfg.rope_base)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let seg = state.segmentation;

    let mut x = vec![0.0; d];
    embed(weights, token, &mut x)?;
    let mut h = vec![0.0; d];
    let mut q = vec![0.0; d];
    let mut k = vec![0.0; d];
    let mut val = vec![0.0; d];
    let mut o = vec![0.0; d];
    let mut proj = vec![0.0; d];
    let mut h2 = vec![0.0; d];
    let mut u = vec![0.0; f];
    let mut act = vec![0.0; f];
    let mut ff = vec![0.0; d];
    let mut scores = vec![0.0; pos + 1];
    let mut rows = Vec::with_capacity(cfg.num_layers * nh);

    for (l, layer) in weights.layers.iter().enumerate() {
        rms_norm(&x, &layer.attn_norm, &mut h);
        matvec(&layer.wq, &h, &mut q);
        matvec(&layer.wk, &h, &mut k);
        matvec(&layer.wv, &h, &mut val);
        for head in 0..nh {
            let hs = head * hd..(head + 1) * hd;
            rope.rotate(&mut q[hs.clone()], pos);
            rope.rotate(&mut k[hs], pos);
        }
        let lc = &mut state.cache[l];
        lc.keys.extend_from_slice(&k);
        lc.values.extend_from_slice(&val);
        for head in 0..nh {
            let off = head * hd;
            let mut attn = vec![0.0; pos + 1];
            head_scores(&q[off..off + hd], &lc.keys, d, off, scale, &mut scores);
            softmax_prefix(&scores, pos + 1, &mut attn)?;
            if let Some(hook) = hook {
                let ctx = HookContext {
                    layer: l,
                    head,
                    phase: Phase::Decode,
                    segmentation: &seg,
                };
                check_hook(hook, &ctx, &mut AttentionRows::new(&mut attn, pos + 1, pos))?;
            }
            let out = &mut o[off..off + hd];
            if hook.is_some_and(|hk| hk.masks_head(l, head)) {
                out.iter_mut().for_each(|z| *z = 0.0);
            } else {
                head_mix(&attn, &lc.values, d, off, out);
            }
            rows.push(AttentionRecord {
                layer: l,
                head,
                rows: 1,
                cols: pos + 1,
                data: attn,
            });
        }
        matvec(&layer.wo, &o, &mut proj);
        for (xv, p) in x.iter_mut().zip(&proj) {
            *xv += p;
        }
        ffn_block(layer, &x, &mut h2, &mut u, &mut act, &mut ff);
        for (xv, p) in x.iter_mut().zip(&ff) {
            *xv += p;
        }
    }
    let mut hf = vec![0.0; d];
    rms_norm(&x, &weights.final_norm, &mut hf);
    let mut logits = vec![0.0; v];
    matvec(&weights.unembedding, &hf, &mut logits);
    state.tokens.push(token);
    state.logits.clone_from(&logits);
    Ok((logits, rows))
}

/// One greedy step: picks the argmax of the current logits, feeds it, and
/// returns the choice with the resulting logits and attention rows.
pub fn decode_step(
    state: &mut DecodeState,
    weights: &ModelWeights,
    hook: Option<&dyn AttentionHook>,
) -> Result<StepOutput> {
    let token = argmax(&state.logits);
    let (logits, attention) = feed_token(state, weights, token, hook)?;
    Ok(StepOutput {
        token,
        logits,
        attention,
    })
}

/// Greedy continuation of a prefilled state; returns the emitted tokens.
pub fn generate(
    state: &mut DecodeState,
    weights: &ModelWeights,
    hook: Option<&dyn AttentionHook>,
    max_new_tokens: usize,
) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(max_new_tokens);
    for _ in 0..max_new_tokens {
        if state.position() >= weights.config.max_seq_len {
            break;
        }
        out.push(decode_step(state, weights, hook)?.token);
    }
    Ok(out)
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention saliency and directional information flow.
//!
//! The loss is the teacher-forced mean negative log-likelihood of the
//! response tokens. Each post-softmax attention matrix is treated as a free
//! variable; its gradient is obtained by a hand-written reverse pass over
//! the whole decoder. Saliency of layer `l` is `|sum_h A_h * dL/dA_h|`.
//! Flow between groups averages saliency over source/target pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{fmt_opt, Csv};
use crate::model::{matvec_t_acc, run_sequence, sigmoid, Capture, PassOptions, RawEdit, Tape};
use crate::rope::RopeTable;
use crate::segmentation::{TokenGroup, TokenSegmentation};
use crate::weights::ModelWeights;

/// Prompt plus teacher-forced response. Targets are `tokens[seg.resp_start..]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyTask {
    pub tokens: Vec<u32>,
    pub segmentation: TokenSegmentation,
    /// Positive multiplier on the loss.
    #[serde(default = "one")]
    pub loss_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl SaliencyTask {
    pub fn new(prompt: &[u32], response: &[u32], segmentation: TokenSegmentation) -> Self {
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(response);
        Self {
            tokens,
            segmentation,
            loss_scale: 1.0,
        }
    }

    pub fn targets(&self) -> &[u32] {
        &self.tokens[self.segmentation.resp_start.min(self.tokens.len())..]
    }

    fn check(&self, weights: &ModelWeights) -> Result<()> {
        self.segmentation.validate_for(self.tokens.len())?;
        if self.targets().is_empty() {
            return Err(Error::Contract("saliency needs at least one response target".into()));
        }
        if self.segmentation.resp_start == 0 {
            return Err(Error::Contract("the first response token has no predecessor".into()));
        }
        if !(self.loss_scale.is_finite() && self.loss_scale > 0.0) {
            return Err(Error::OutOfRange(format!("loss scale {} must be positive", self.loss_scale)));
        }
        if self.tokens.len() > weights.config.max_seq_len {
            return Err(Error::MaxLength {
                max: weights.config.max_seq_len,
            });
        }
        Ok(())
    }
}

/// Head-summed saliency of one layer, `[n, n]` row-major (query, key).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMatrix {
    pub layer: usize,
    pub size: usize,
    pub data: Vec<f64>,
}

impl SaliencyMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }
}

/// Mean NLL of `tokens[t]` under the logits at `t - 1`, for `t >= resp_start`.
pub fn nll_from_logits(logits: &[f64], vocab: usize, tokens: &[u32], resp_start: usize) -> Result<f64> {
    if resp_start == 0 || resp_start >= tokens.len() {
        return Err(Error::Contract("no response targets".into()));
    }
    let mut total = 0.0;
    for t in resp_start..tokens.len() {
        let row = &logits[(t - 1) * vocab..t * vocab];
        total += log_sum_exp(row) - row[tokens[t] as usize];
    }
    let loss = total / (tokens.len() - resp_start) as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("response loss".into()));
    }
    Ok(loss)
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Teacher-forced mean NLL of the task's response, times its loss scale.
pub fn response_loss(weights: &ModelWeights, task: &SaliencyTask) -> Result<f64> {
    task.check(weights)?;
    let pass = run_sequence(
        weights,
        &task.tokens,
        &task.segmentation,
        PassOptions {
            hook: None,
            capture: Capture::None,
            edit: None,
            record_tape: false,
            all_logits: true,
        },
    )?;
    Ok(task.loss_scale
        * nll_from_logits(&pass.logits, weights.config.vocab_size, &task.tokens, task.segmentation.resp_start)?)
}

/// Attention matrices and their loss gradients, per layer and head.
#[derive(Debug, Clone)]
pub struct AttentionGradients {
    pub loss: f64,
    pub size: usize,
    /// `[layer][head]`, each `[n, n]`.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// `[layer][head]`, each `[n, n]`; zero above the diagonal.
    pub gradient: Vec<Vec<Vec<f64>>>,
}

impl AttentionGradients {
    /// `|sum_h A_h * dA_h|` per layer.
    pub fn saliency(&self) -> Vec<SaliencyMatrix> {
        combine(&self.attention, &self.gradient, self.size)
    }
}

fn combine(attn: &[Vec<Vec<f64>>], grad: &[Vec<Vec<f64>>], n: usize) -> Vec<SaliencyMatrix> {
    attn.iter()
        .zip(grad)
        .enumerate()
        .map(|(layer, (a, g))| {
            let mut data = vec![0.0; n * n];
            for (ah, gh) in a.iter().zip(g) {
                for ((s, x), y) in data.iter_mut().zip(ah).zip(gh) {
                    *s += x * y;
                }
            }
            data.iter_mut().for_each(|s| *s = s.abs());
            SaliencyMatrix {
                layer,
                size: n,
                data,
            }
        })
        .collect()
}

/// `dx` of `y = x * g / rms` given `dy`.
fn rms_norm_backward(x: &[f64], gain: &[f32], rms: f64, dy: &[f64], dx: &mut [f64]) {
    let dim = x.len() as f64;
    let dot: f64 = x
        .iter()
        .zip(gain)
        .zip(dy)
        .map(|((x, g), d)| x * *g as f64 * d)
        .sum();
    let inv = 1.0 / rms;
    let c = dot / (dim * rms * rms * rms);
    for (((o, x), g), d) in dx.iter_mut().zip(x).zip(gain).zip(dy) {
        *o += *g as f64 * d * inv - x * c;
    }
}

/// Loss gradients with respect to every post-softmax attention matrix.
pub fn attention_gradients(weights: &ModelWeights, task: &SaliencyTask) -> Result<AttentionGradients> {
    task.check(weights)?;
    let cfg = &weights.config;
    let pass = run_sequence(
        weights,
        &task.tokens,
        &task.segmentation,
        PassOptions {
            hook: None,
            capture: Capture::None,
            edit: None,
            record_tape: true,
            all_logits: true,
        },
    )?;
    let tape: Tape = pass.tape.expect("tape requested");
    let (n, d, hd, nh, f, v) = (
        task.tokens.len(),
        cfg.model_dim,
        cfg.head_dim,
        cfg.num_heads,
        cfg.ffn_dim,
        cfg.vocab_size,
    );
    let resp = task.segmentation.resp_start;
    let loss = task.loss_scale * nll_from_logits(&pass.logits, v, &task.tokens, resp)?;
    let weight = task.loss_scale / (n - resp) as f64;

    // Output layer.
    let mut dx = vec![0.0; n * d];
    let mut dhf = vec![0.0; d];
    for t in resp..n {
        let i = t - 1;
        let row = &pass.logits[i * v..(i + 1) * v];
        let lse = log_sum_exp(row);
        let dlogits: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(c, &z)| weight * ((z - lse).exp() - if c == task.tokens[t] as usize { 1.0 } else { 0.0 }))
            .collect();
        dhf.iter_mut().for_each(|z| *z = 0.0);
        matvec_t_acc(&weights.unembedding, &dlogits, &mut dhf);
        let x = &tape.x_out[i * d..(i + 1) * d];
        rms_norm_backward(x, &weights.final_norm, tape.rms_final[i], &dhf, &mut dx[i * d..(i + 1) * d]);
    }

    let rope = RopeTable::new(hd, n, cfg.rope_base)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut gradient = vec![Vec::new(); cfg.num_layers];
    let mut attention = vec![Vec::new(); cfg.num_layers];
    let mut da = vec![0.0; f];
    let mut du = vec![0.0; f];
    let mut dh2 = vec![0.0; d];

    for l in (0..cfg.num_layers).rev() {
        let layer = &weights.layers[l];
        let lt = &tape.layers[l];

        // Feed-forward block: dx currently holds dL/dx_out.
        let mut dmid = dx.clone();
        for i in 0..n {
            let xm = &lt.x_mid[i * d..(i + 1) * d];
            let u = &lt.u[i * f..(i + 1) * f];
            da.iter_mut().for_each(|z| *z = 0.0);
            matvec_t_acc(&layer.w2, &dx[i * d..(i + 1) * d], &mut da);
            for ((g, a), &z) in du.iter_mut().zip(&da).zip(u) {
                let s = sigmoid(z);
                *g = a * s * (1.0 + z * (1.0 - s));
            }
            dh2.iter_mut().for_each(|z| *z = 0.0);
            matvec_t_acc(&layer.w1, &du, &mut dh2);
            rms_norm_backward(xm, &layer.ffn_norm, lt.rms_ffn[i], &dh2, &mut dmid[i * d..(i + 1) * d]);
        }

        // Attention block.
        let mut dout = vec![0.0; n * d];
        for i in 0..n {
            matvec_t_acc(&layer.wo, &dmid[i * d..(i + 1) * d], &mut dout[i * d..(i + 1) * d]);
        }
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut layer_grads = Vec::with_capacity(nh);
        for head in 0..nh {
            let off = head * hd;
            let a = &lt.attn[head];
            let mut g = vec![0.0; n * n];
            if !lt.masked[head] {
                for i in 0..n {
                    let doi = &dout[i * d + off..i * d + off + hd];
                    for j in 0..=i {
                        let vj = &lt.v[j * d + off..j * d + off + hd];
                        g[i * n + j] = doi.iter().zip(vj).map(|(x, y)| x * y).sum();
                        let w = a[i * n + j];
                        if w != 0.0 {
                            for (t, x) in dv[j * d + off..j * d + off + hd].iter_mut().zip(doi) {
                                *t += w * x;
                            }
                        }
                    }
                    let dot: f64 = (0..=i).map(|j| a[i * n + j] * g[i * n + j]).sum();
                    let qi = &lt.q[i * d + off..i * d + off + hd];
                    for j in 0..=i {
                        let ds = a[i * n + j] * (g[i * n + j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &lt.k[j * d + off..j * d + off + hd];
                        for (t, x) in dq[i * d + off..i * d + off + hd].iter_mut().zip(kj) {
                            *t += ds * x;
                        }
                        for (t, x) in dk[j * d + off..j * d + off + hd].iter_mut().zip(qi) {
                            *t += ds * x;
                        }
                    }
                }
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("attention gradient at layer {l}, head {head}")));
            }
            layer_grads.push(g);
        }
        for i in 0..n {
            for head in 0..nh {
                let hs = i * d + head * hd..i * d + (head + 1) * hd;
                rope.rotate_back(&mut dq[hs.clone()], i);
                rope.rotate_back(&mut dk[hs], i);
            }
        }
        let mut dh = vec![0.0; d];
        dx.clone_from(&dmid);
        for i in 0..n {
            let row = i * d..(i + 1) * d;
            dh.iter_mut().for_each(|z| *z = 0.0);
            matvec_t_acc(&layer.wq, &dq[row.clone()], &mut dh);
            matvec_t_acc(&layer.wk, &dk[row.clone()], &mut dh);
            matvec_t_acc(&layer.wv, &dv[row.clone()], &mut dh);
            rms_norm_backward(&lt.x_in[row.clone()], &layer.attn_norm, lt.rms_attn[i], &dh, &mut dx[row]);
        }
        gradient[l] = layer_grads;
        attention[l] = lt.attn.clone();
    }
    Ok(AttentionGradients {
        loss,
        size: n,
        attention,
        gradient,
    })
}

/// Per-layer saliency `|sum_h A_h * dL/dA_h|` from the analytic gradient.
pub fn attention_saliency(weights: &ModelWeights, task: &SaliencyTask) -> Result<Vec<SaliencyMatrix>> {
    Ok(attention_gradients(weights, task)?.saliency())
}

/// Central-difference estimate of every `dL/dA_h[i, j]` (causal entries),
/// each entry perturbed by `+-epsilon` without renormalizing its row.
pub fn finite_diff_gradients(weights: &ModelWeights, task: &SaliencyTask, epsilon: f64) -> Result<AttentionGradients> {
    task.check(weights)?;
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::OutOfRange(format!("epsilon {epsilon} must be positive")));
    }
    let cfg = &weights.config;
    let n = task.tokens.len();
    let resp = task.segmentation.resp_start;
    type PerHead = Vec<Vec<Vec<f64>>>;
    let run = |edit: Option<RawEdit<'_>>| -> Result<(f64, PerHead)> {
        let pass = run_sequence(
            weights,
            &task.tokens,
            &task.segmentation,
            PassOptions {
                hook: None,
                capture: if edit.is_none() { Capture::All } else { Capture::None },
                edit,
                record_tape: false,
                all_logits: true,
            },
        )?;
        let loss = task.loss_scale * nll_from_logits(&pass.logits, cfg.vocab_size, &task.tokens, resp)?;
        let mut attn = vec![vec![Vec::new(); cfg.num_heads]; cfg.num_layers];
        for r in pass.records {
            attn[r.layer][r.head] = r.data;
        }
        Ok((loss, attn))
    };
    let (loss, attention) = run(None)?;
    let mut gradient = vec![vec![vec![0.0; n * n]; cfg.num_heads]; cfg.num_layers];
    for (l, layer_grad) in gradient.iter_mut().enumerate() {
        for (h, head_grad) in layer_grad.iter_mut().enumerate() {
            for i in 0..n {
                for j in 0..=i {
                    let shifted = |delta: f64| {
                        let edit = move |layer: usize, head: usize, a: &mut [f64]| {
                            if layer == l && head == h {
                                a[i * n + j] += delta;
                            }
                        };
                        run(Some(&edit)).map(|(loss, _)| loss)
                    };
                    let g = (shifted(epsilon)? - shifted(-epsilon)?) / (2.0 * epsilon);
                    if !g.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "finite difference at layer {l}, head {h}, entry ({i}, {j})"
                        )));
                    }
                    head_grad[i * n + j] = g;
                }
            }
        }
    }
    Ok(AttentionGradients {
        loss,
        size: n,
        attention,
        gradient,
    })
}

/// Finite-difference counterpart of [`attention_saliency`].
pub fn finite_diff_saliency(weights: &ModelWeights, task: &SaliencyTask, epsilon: f64) -> Result<Vec<SaliencyMatrix>> {
    Ok(finite_diff_gradients(weights, task, epsilon)?.saliency())
}

/// Mean saliency per directed group pair; `None` where the pair set is empty.
/// `S_ab` averages `I(i, j)` over sources `j` in `a` and targets `i` in `b`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowSummary {
    pub layer: usize,
    pub s_sv: Option<f64>,
    pub s_vv: Option<f64>,
    pub s_vt: Option<f64>,
    pub s_st: Option<f64>,
    pub s_tt: Option<f64>,
    pub s_ss: Option<f64>,
}

impl FlowSummary {
    pub const PAIRS: [(&'static str, TokenGroup, TokenGroup); 6] = [
        ("S_sv", TokenGroup::System, TokenGroup::Visual),
        ("S_vv", TokenGroup::Visual, TokenGroup::Visual),
        ("S_vt", TokenGroup::Visual, TokenGroup::Text),
        ("S_st", TokenGroup::System, TokenGroup::Text),
        ("S_tt", TokenGroup::Text, TokenGroup::Text),
        ("S_ss", TokenGroup::System, TokenGroup::System),
    ];

    pub fn values(&self) -> [Option<f64>; 6] {
        [self.s_sv, self.s_vv, self.s_vt, self.s_st, self.s_tt, self.s_ss]
    }

    fn set(&mut self, idx: usize, x: Option<f64>) {
        match idx {
            0 => self.s_sv = x,
            1 => self.s_vv = x,
            2 => self.s_vt = x,
            3 => self.s_st = x,
            4 => self.s_tt = x,
            _ => self.s_ss = x,
        }
    }
}

/// Mean of `I(i, j)` for `j` in `source`, `i` in `target`, `j <= i` unless
/// the pair is visual-to-visual and `vv_causal_only` is off.
pub fn flow_pair(
    sal: &SaliencyMatrix,
    seg: &TokenSegmentation,
    source: TokenGroup,
    target: TokenGroup,
    vv_causal_only: bool,
) -> Option<f64> {
    let n = sal.size;
    let causal = vv_causal_only || !(source == TokenGroup::Visual && target == TokenGroup::Visual);
    let (mut sum, mut count) = (0.0, 0usize);
    for ts in seg.group_spans(target, n) {
        for i in ts.range() {
            for ss in seg.group_spans(source, n) {
                for j in ss.range() {
                    if causal && j > i {
                        continue;
                    }
                    sum += sal.at(i, j);
                    count += 1;
                }
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

pub fn flow_summary(sal: &[SaliencyMatrix], seg: &TokenSegmentation, vv_causal_only: bool) -> Vec<FlowSummary> {
    sal.iter()
        .map(|m| {
            let mut s = FlowSummary {
                layer: m.layer,
                ..FlowSummary::default()
            };
            for (idx, (_, a, b)) in FlowSummary::PAIRS.iter().enumerate() {
                s.set(idx, flow_pair(m, seg, *a, *b, vv_causal_only));
            }
            s
        })
        .collect()
}

/// Per-layer mean over samples of each defined value.
pub fn mean_flow(samples: &[Vec<FlowSummary>]) -> Vec<FlowSummary> {
    let layers = samples.iter().map(Vec::len).max().unwrap_or(0);
    (0..layers)
        .map(|layer| {
            let mut out = FlowSummary {
                layer,
                ..FlowSummary::default()
            };
            for idx in 0..6 {
                let vals: Vec<f64> = samples
                    .iter()
                    .filter_map(|s| s.get(layer).and_then(|f| f.values()[idx]))
                    .collect();
                out.set(idx, (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64));
            }
            out
        })
        .collect()
}

/// CSV `layer,S_sv,S_vv,S_vt,S_st,S_tt,S_ss`; absent values are empty cells.
pub fn flow_csv(flows: &[FlowSummary]) -> String {
    let mut header = vec!["layer"];
    header.extend(FlowSummary::PAIRS.iter().map(|p| p.0));
    let mut csv = Csv::new(&header);
    for f in flows {
        let mut row = vec![f.layer.to_string()];
        row.extend(f.values().iter().map(|x| fmt_opt(*x)));
        csv.row(row);
    }
    csv.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::fixtures::random_model;

    fn task(seed: u64) -> (ModelWeights, SaliencyTask) {
        let cfg = ModelConfig::new(2, 2, 8, 12, 32);
        let w = random_model(seed, cfg).unwrap();
        let seg = TokenSegmentation::contiguous(1, 3, 2);
        let t = SaliencyTask::new(&[1, 2, 3, 4, 5, 6], &[7, 8, 9], seg);
        (w, t)
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = 7;
        let logits = vec![0.3; 3 * v];
        let loss = nll_from_logits(&logits, v, &[0, 1, 2], 1).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
        assert!(nll_from_logits(&logits, v, &[0, 1, 2], 3).is_err());
    }

    #[test]
    fn confident_logits_give_zero_loss() {
        let mut logits = vec![-1e3; 2 * 4];
        logits[2] = 0.0;
        logits[4 + 1] = 0.0;
        let loss = nll_from_logits(&logits, 4, &[0, 2, 1], 1).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn loss_matches_direct_log_softmax() {
        let (w, t) = task(3);
        let out = crate::model::forward(&w, &t.tokens, &t.segmentation, None, Capture::None).unwrap();
        let mut want = 0.0;
        for pos in 6..9 {
            let z = out.position_logits(pos - 1);
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let s: f64 = z.iter().map(|x| (x - m).exp()).sum();
            want -= z[t.tokens[pos] as usize] - m - s.ln();
        }
        want /= 3.0;
        assert!((response_loss(&w, &t).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (w, t) = task(5);
        let a = attention_gradients(&w, &t).unwrap();
        let b = finite_diff_gradients(&w, &t, 1e-4).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        for l in 0..2 {
            for h in 0..2 {
                for (x, y) in a.gradient[l][h].iter().zip(&b.gradient[l][h]) {
                    assert!((x - y).abs() <= 1e-6 + 1e-4 * y.abs(), "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn zero_unembedding_gives_zero_saliency() {
        let (mut w, t) = task(2);
        w.unembedding.iter_mut().for_each(|x| *x = 0.0);
        for m in attention_saliency(&w, &t).unwrap() {
            assert!(m.data.iter().all(|&x| x == 0.0));
        }
        for m in finite_diff_saliency(&w, &t, 1e-4).unwrap() {
            assert!(m.data.iter().all(|&x| x.abs() < 1e-8));
        }
    }

    #[test]
    fn saliency_is_causal_and_nonnegative() {
        let (w, t) = task(9);
        for m in attention_saliency(&w, &t).unwrap() {
            for i in 0..m.size {
                for j in 0..m.size {
                    assert!(m.at(i, j) >= 0.0);
                    if j > i {
                        assert_eq!(m.at(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn loss_scale_scales_saliency() {
        let (w, t) = task(4);
        let base = attention_saliency(&w, &t).unwrap();
        let scaled = attention_saliency(&w, &SaliencyTask { loss_scale: 4.0, ..t.clone() }).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(4.0 * x, *y);
            }
        }
        let f1 = flow_summary(&base, &t.segmentation, true);
        let f3 = flow_summary(&attention_saliency(&w, &SaliencyTask { loss_scale: 3.0, ..t.clone() }).unwrap(), &t.segmentation, true);
        for (a, b) in f1.iter().zip(&f3) {
            for (x, y) in a.values().iter().zip(b.values()) {
                let (x, y) = (x.unwrap(), y.unwrap());
                assert!((3.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn empty_targets_are_rejected() {
        let (w, _) = task(1);
        let seg = TokenSegmentation::contiguous(1, 3, 2);
        let t = SaliencyTask::new(&[1, 2, 3, 4, 5, 6], &[], seg);
        assert!(response_loss(&w, &t).is_err());
        assert!(attention_saliency(&w, &t).is_err());
    }

    #[test]
    fn hand_intra_visual_mean() {
        // sys {0}, vis {1, 2}; I(2,1) = 0.6, diagonal 0.2
        let seg = TokenSegmentation::contiguous(1, 2, 0);
        let mut data = vec![0.0; 9];
        data[4] = 0.2;
        data[8] = 0.2;
        data[2 * 3 + 1] = 0.6;
        let m = SaliencyMatrix { layer: 0, size: 3, data };
        let vv = flow_pair(&m, &seg, TokenGroup::Visual, TokenGroup::Visual, true).unwrap();
        assert!((vv - 1.0 / 3.0).abs() < 1e-15);
        let all = flow_pair(&m, &seg, TokenGroup::Visual, TokenGroup::Visual, false).unwrap();
        assert!((all - 0.25).abs() < 1e-15);
        assert_eq!(flow_pair(&m, &seg, TokenGroup::Visual, TokenGroup::Text, true), None);
    }

    #[test]
    fn constant_saliency_gives_constant_flow() {
        let n = 9;
        let seg = TokenSegmentation::contiguous(2, 3, 2);
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                data[i * n + j] = 0.7;
            }
        }
        let f = flow_summary(&[SaliencyMatrix { layer: 0, size: n, data }], &seg, true);
        for x in f[0].values() {
            assert!((x.unwrap() - 0.7).abs() < 1e-12);
        }
        let csv = flow_csv(&f);
        assert_eq!(csv.lines().next().unwrap(), "layer,S_sv,S_vv,S_vt,S_st,S_tt,S_ss");
        assert_eq!(csv.lines().nth(1).unwrap(), "0,0.7,0.7,0.7,0.7,0.7,0.7");
    }

    #[test]
    fn mean_flow_skips_absent_values() {
        let a = FlowSummary { layer: 0, s_sv: Some(1.0), ..Default::default() };
        let b = FlowSummary { layer: 0, s_sv: Some(3.0), s_vv: Some(2.0), ..Default::default() };
        let m = mean_flow(&[vec![a], vec![b]]);
        assert_eq!(m[0].s_sv, Some(2.0));
        assert_eq!(m[0].s_vv, Some(2.0));
        assert_eq!(m[0].s_tt, None);
    }
}

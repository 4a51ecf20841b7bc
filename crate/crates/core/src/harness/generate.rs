// SPDX-License-Identifier: MIT OR Apache-2.0

//! `generate`: plan, hooked prefill, timed greedy decode.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ensure_dir, percentile, write_json, RunSettings};
use crate::dump::write_attention_file;
use crate::error::Result;
use crate::intervention::{plan, InterventionConfig, InterventionPlan};
use crate::model::{decode_step, prefill, Capture, DecodeState};
use crate::segmentation::TokenSegmentation;
use crate::weights::ModelWeights;

/// Wall-clock measurements; excluded when comparing reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub step_latency_ms: Vec<f64>,
    pub decode_seconds: f64,
    pub tokens_per_second: f64,
    pub p50_ms: Option<f64>,
    pub p95_ms: Option<f64>,
}

impl Timing {
    pub fn from_steps(step_seconds: &[f64]) -> Self {
        let total: f64 = step_seconds.iter().sum();
        let ms: Vec<f64> = step_seconds.iter().map(|s| s * 1e3).collect();
        Self {
            p50_ms: percentile(&ms, 50.0),
            p95_ms: percentile(&ms, 95.0),
            step_latency_ms: ms,
            decode_seconds: total,
            tokens_per_second: if total > 0.0 { step_seconds.len() as f64 / total } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub prompt_len: usize,
    pub generated: Vec<u32>,
    pub intervention: serde_json::Value,
    pub dumps: Vec<String>,
    pub timing: Timing,
}

/// A prefilled session with its plan.
pub struct Session {
    pub plan: InterventionPlan,
    pub state: DecodeState,
}

impl Session {
    pub fn start(
        weights: &ModelWeights,
        prompt: &[u32],
        seg: &TokenSegmentation,
        config: &InterventionConfig,
        capture: Capture,
    ) -> Result<Self> {
        let plan = plan(weights, prompt, seg, config)?;
        let state = prefill(weights, prompt, seg, plan.hook(), capture)?;
        Ok(Self { plan, state })
    }

    /// Greedy decode of up to `max_new` tokens with per-step timings.
    pub fn decode(&mut self, weights: &ModelWeights, max_new: usize) -> Result<(Vec<u32>, Vec<f64>)> {
        let mut tokens = Vec::with_capacity(max_new);
        let mut steps = Vec::with_capacity(max_new);
        let hook = self.plan.hook();
        for _ in 0..max_new {
            if self.state.position() >= weights.config.max_seq_len {
                log::warn!("stopped at the maximum sequence length {}", weights.config.max_seq_len);
                break;
            }
            let t0 = Instant::now();
            let step = decode_step(&mut self.state, weights, hook)?;
            steps.push(t0.elapsed().as_secs_f64());
            tokens.push(step.token);
        }
        Ok((tokens, steps))
    }
}

/// Runs a session and returns the report without writing anything.
pub fn run(settings: &RunSettings, dump_dir: Option<&Path>) -> Result<RunReport> {
    let capture = settings.capture.unwrap_or(Capture::None);
    let mut session = Session::start(
        &settings.weights,
        &settings.prompt,
        &settings.segmentation,
        &settings.intervention,
        capture,
    )?;
    let mut dumps = Vec::new();
    if let (Some(dir), false) = (dump_dir, session.state.records().is_empty()) {
        ensure_dir(dir)?;
        let path = dir.join("attention.atnd");
        write_attention_file(&path, session.state.records())?;
        dumps.push(path.display().to_string());
    }
    let (generated, steps) = session.decode(&settings.weights, settings.max_new_tokens)?;
    Ok(RunReport {
        prompt_len: settings.prompt.len(),
        generated,
        intervention: session.plan.summary(),
        dumps,
        timing: Timing::from_steps(&steps),
    })
}

/// `generate`: writes `report.json` (and `attention.atnd` when capturing).
pub fn cmd_generate(settings: &RunSettings) -> Result<RunReport> {
    ensure_dir(&settings.out)?;
    let report = run(settings, Some(&settings.out))?;
    write_json(&settings.out.join("report.json"), &report)?;
    Ok(report)
}

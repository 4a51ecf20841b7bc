// SPDX-License-Identifier: MIT OR Apache-2.0

//! `bench`: decode throughput of the baseline against TAI only, HAI only
//! and both, over the same prompt. One warmup run per variant is discarded;
//! repetitions run sequentially.

use serde::{Deserialize, Serialize};

use super::generate::{Session, Timing};
use super::{ensure_dir, median, percentile, write_json, write_text, RunSettings};
use crate::error::{Error, Result};
use crate::format::{fmt_opt, Csv};
use crate::intervention::InterventionConfig;
use crate::model::Capture;
use crate::segmentation::TokenSegmentation;
use crate::weights::ModelWeights;

pub const DEFAULT_REPETITIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub tps_runs: Vec<f64>,
    pub median_tps: f64,
    pub p50_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    /// `median_tps / baseline median_tps`.
    pub relative: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repetitions: usize,
    pub max_new_tokens: usize,
    pub prompt_len: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, variant: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Baseline, TAI-only, HAI-only and full variants of `full`. When `full`
/// lacks a level, the captioning preset supplies it.
pub fn variants(full: &InterventionConfig) -> Result<Vec<(String, InterventionConfig)>> {
    let preset = InterventionConfig::preset("llava-chair")?;
    let mut full = full.clone();
    full.tai = full.tai.or(preset.tai);
    full.hai = full.hai.or(preset.hai);
    let tai_only = InterventionConfig {
        hai: None,
        mask: Vec::new(),
        ..full.clone()
    };
    let hai_only = InterventionConfig {
        tai: None,
        mask: Vec::new(),
        ..full.clone()
    };
    Ok(vec![
        ("baseline".into(), InterventionConfig::default()),
        ("tai".into(), tai_only),
        ("hai".into(), hai_only),
        ("full".into(), full),
    ])
}

fn timed_run(
    weights: &ModelWeights,
    prompt: &[u32],
    seg: &TokenSegmentation,
    config: &InterventionConfig,
    max_new: usize,
) -> Result<(Vec<u32>, Timing)> {
    let mut s = Session::start(weights, prompt, seg, config, Capture::None)?;
    let (tokens, steps) = s.decode(weights, max_new)?;
    Ok((tokens, Timing::from_steps(&steps)))
}

pub fn run_bench(
    weights: &ModelWeights,
    prompt: &[u32],
    seg: &TokenSegmentation,
    full: &InterventionConfig,
    max_new: usize,
    repetitions: usize,
) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(Error::Usage(format!("bench needs at least 3 repetitions, got {repetitions}")));
    }
    if max_new == 0 {
        return Err(Error::Usage("bench needs max_new_tokens >= 1".into()));
    }
    let mut rows: Vec<BenchRow> = Vec::new();
    for (name, cfg) in variants(full)? {
        timed_run(weights, prompt, seg, &cfg, max_new)?;
        let mut tps = Vec::with_capacity(repetitions);
        let mut steps_ms = Vec::new();
        let mut tokens = 0;
        for _ in 0..repetitions {
            let (t, timing) = timed_run(weights, prompt, seg, &cfg, max_new)?;
            tokens = t.len();
            tps.push(timing.tokens_per_second);
            steps_ms.extend(timing.step_latency_ms);
        }
        let median_tps = median(&tps).expect("repetitions >= 3");
        rows.push(BenchRow {
            variant: name,
            tps_runs: tps,
            median_tps,
            p50_ms: percentile(&steps_ms, 50.0),
            p95_ms: percentile(&steps_ms, 95.0),
            relative: 1.0,
            tokens,
        });
    }
    let base = rows[0].median_tps;
    for r in &mut rows {
        r.relative = if base > 0.0 { r.median_tps / base } else { 0.0 };
    }
    Ok(BenchReport {
        repetitions,
        max_new_tokens: max_new,
        prompt_len: prompt.len(),
        rows,
    })
}

pub fn bench_csv(report: &BenchReport) -> String {
    let mut csv = Csv::new(&["variant", "median_tps", "p50_ms", "p95_ms", "relative"]);
    for r in &report.rows {
        csv.row([
            r.variant.clone(),
            fmt_opt(Some(r.median_tps)),
            fmt_opt(r.p50_ms),
            fmt_opt(r.p95_ms),
            fmt_opt(Some(r.relative)),
        ]);
    }
    csv.finish()
}

/// `bench`: writes `bench.json` and `bench.csv`.
pub fn cmd_bench(settings: &RunSettings, repetitions: usize) -> Result<BenchReport> {
    let report = run_bench(
        &settings.weights,
        &settings.prompt,
        &settings.segmentation,
        &settings.intervention,
        settings.max_new_tokens,
        repetitions,
    )?;
    ensure_dir(&settings.out)?;
    write_json(&settings.out.join("bench.json"), &report)?;
    write_text(&settings.out.join("bench.csv"), &bench_csv(&report))?;
    Ok(report)
}

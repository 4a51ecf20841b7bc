// SPDX-License-Identifier: MIT OR Apache-2.0

//! `ablate`: zero the top heads of one type in every layer and compare the
//! greedy output with the unmasked baseline.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ensure_dir, write_json, write_text, RunSettings};
use crate::error::{Error, Result};
use crate::format::Csv;
use crate::hai::{mask_heads, prefill_head_stats, top_heads, HeadStats, LayerSpan};
use crate::model::{generate, prefill, Capture};
use crate::segmentation::TokenGroup;

pub const DEFAULT_TOP_N: usize = 4;
/// Layers eligible in shallow mode.
pub const SHALLOW_LAYERS: LayerSpan = LayerSpan::new(0, 8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    MaskVisual,
    MaskSystem,
    MaskText,
    MaskTextShallow,
    MaskRandom,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::MaskVisual,
        AblationMode::MaskSystem,
        AblationMode::MaskText,
        AblationMode::MaskTextShallow,
        AblationMode::MaskRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::MaskVisual => "mask-visual",
            AblationMode::MaskSystem => "mask-system",
            AblationMode::MaskText => "mask-text",
            AblationMode::MaskTextShallow => "mask-text-shallow",
            AblationMode::MaskRandom => "mask-random",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown ablation mode {s:?}")))
    }
}

/// Heads to mask for `mode`: the `top_n` by group mass per layer, or
/// `top_n` seeded random heads per layer.
pub fn select_heads(stats: &[HeadStats], mode: AblationMode, top_n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    match mode {
        AblationMode::MaskVisual => top_heads(stats, TokenGroup::Visual, LayerSpan::ALL, top_n),
        AblationMode::MaskSystem => top_heads(stats, TokenGroup::System, LayerSpan::ALL, top_n),
        AblationMode::MaskText => top_heads(stats, TokenGroup::Text, LayerSpan::ALL, top_n),
        AblationMode::MaskTextShallow => top_heads(stats, TokenGroup::Text, SHALLOW_LAYERS, top_n),
        AblationMode::MaskRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::new();
            for s in stats {
                let h = s.vis.len();
                if top_n > h {
                    return Err(Error::OutOfRange(format!(
                        "asked for {top_n} heads but layer {} has {h}",
                        s.layer
                    )));
                }
                let mut picked = sample(&mut rng, h, top_n).into_vec();
                picked.sort_unstable();
                out.extend(picked.into_iter().map(|x| (s.layer, x)));
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub mode: AblationMode,
    pub heads: Vec<(usize, usize)>,
    pub generated: Vec<u32>,
    pub same_as_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub top_n: usize,
    pub baseline: Vec<u32>,
    pub runs: Vec<AblationRun>,
}

pub fn run(settings: &RunSettings, modes: &[AblationMode], top_n: usize) -> Result<AblationReport> {
    let w = &settings.weights;
    let seg = &settings.segmentation;
    let mut base_state = prefill(w, &settings.prompt, seg, None, Capture::All)?;
    let stats = prefill_head_stats(&base_state, &w.config)?;
    let baseline = generate(&mut base_state, w, None, settings.max_new_tokens)?;
    let mut runs = Vec::with_capacity(modes.len());
    for &mode in modes {
        let heads = select_heads(&stats, mode, top_n, settings.seed)?;
        let mask = mask_heads(&w.config, &heads)?;
        let mut st = prefill(w, &settings.prompt, seg, Some(&mask), Capture::None)?;
        let generated = generate(&mut st, w, Some(&mask), settings.max_new_tokens)?;
        runs.push(AblationRun {
            mode,
            same_as_baseline: generated == baseline,
            heads,
            generated,
        });
    }
    Ok(AblationReport { top_n, baseline, runs })
}

fn join(tokens: &[u32]) -> String {
    tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// `ablate`: writes `ablate.json` and `ablate.csv`.
pub fn cmd_ablate(settings: &RunSettings, modes: &[AblationMode], top_n: usize) -> Result<AblationReport> {
    let report = run(settings, modes, top_n)?;
    ensure_dir(&settings.out)?;
    write_json(&settings.out.join("ablate.json"), &report)?;
    let mut csv = Csv::new(&["mode", "masked_heads", "generated", "same_as_baseline"]);
    csv.row(["baseline".to_string(), "0".into(), join(&report.baseline), "1".into()]);
    for r in &report.runs {
        csv.row([
            r.mode.to_string(),
            r.heads.len().to_string(),
            join(&r.generated),
            if r.same_as_baseline { "1" } else { "0" }.to_string(),
        ]);
    }
    write_text(&settings.out.join("ablate.csv"), &csv.finish())?;
    Ok(report)
}

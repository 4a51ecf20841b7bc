// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small verbs: `metrics`, `inspect` and `fixture`.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{ensure_dir, write_json, PromptFile, RunSettings, SegmentationSpec};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fixtures::{pathology_config, pathology_spec, FixtureSpec};
use crate::format::fmt_opt;
use crate::hai::{HaiParams, HeadClassification};
use crate::intervention::{plan, InterventionConfig};
use crate::metrics::{chair_scores, pope_scores, read_jsonl, CaptionAnnotation, ChairScores, PopeRecord, PopeScores};
use crate::segmentation::TokenSegmentation;
use crate::tai::{classes_to_json, TaiParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chair: Option<ChairScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pope: Option<PopeScores>,
}

impl MetricsReport {
    /// Two-column `metric value` table; absent values print as `-`.
    pub fn table(&self) -> String {
        let mut rows: Vec<(&str, String)> = Vec::new();
        let cell = |v: Option<f64>| {
            let s = fmt_opt(v);
            if s.is_empty() {
                "-".to_string()
            } else {
                s
            }
        };
        if let Some(c) = &self.chair {
            rows.push(("CHAIR_i", cell(c.chair_i)));
            rows.push(("CHAIR_s", cell(Some(c.chair_s))));
            rows.push(("recall", cell(c.recall)));
            rows.push(("captions", c.captions.to_string()));
        }
        if let Some(p) = &self.pope {
            rows.push(("accuracy", cell(Some(p.accuracy))));
            rows.push(("precision", cell(p.precision)));
            rows.push(("pope_recall", cell(p.recall)));
            rows.push(("f1", cell(p.f1)));
            rows.push(("answers", (p.tp + p.fp + p.tn + p.fn_).to_string()));
        }
        let mut out = String::from("metric\tvalue\n");
        for (k, v) in rows {
            out.push_str(k);
            out.push('\t');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

pub fn compute_metrics(chair: Option<&Path>, pope: Option<&Path>) -> Result<MetricsReport> {
    if chair.is_none() && pope.is_none() {
        return Err(Error::Usage("metrics needs --chair and/or --pope".into()));
    }
    let chair = match chair {
        Some(p) => Some(chair_scores(&read_jsonl::<CaptionAnnotation>(p)?)?),
        None => None,
    };
    let pope = match pope {
        Some(p) => Some(pope_scores(&read_jsonl::<PopeRecord>(p)?)?),
        None => None,
    };
    Ok(MetricsReport { chair, pope })
}

/// `metrics`: writes `metrics.json` into `out`.
pub fn cmd_metrics(chair: Option<&Path>, pope: Option<&Path>, out: &Path) -> Result<MetricsReport> {
    let report = compute_metrics(chair, pope)?;
    ensure_dir(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

/// `inspect`: the frozen classifications of the configured intervention, or
/// of default parameters when none is configured.
pub fn cmd_inspect(settings: &RunSettings) -> Result<serde_json::Value> {
    let mut config = settings.intervention.clone();
    if config.tai.is_none() && config.hai.is_none() {
        config = InterventionConfig {
            tai: Some(TaiParams::default()),
            hai: Some(HaiParams::default()),
            ..config
        };
    }
    let p = plan(&settings.weights, &settings.prompt, &settings.segmentation, &config)?;
    let visual = p.visual_classes().map(classes_to_json);
    let heads = p
        .hai
        .as_ref()
        .map(|h| h.classes().to_json())
        .unwrap_or_else(|| HeadClassification::default().to_json());
    Ok(serde_json::json!({
        "segmentation": settings.segmentation,
        "visual_tokens": visual,
        "heads": heads,
        "masked_heads": config.mask,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    Random,
    Pathology,
}

impl std::str::FromStr for FixtureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(FixtureKind::Random),
            "pathology" => Ok(FixtureKind::Pathology),
            _ => Err(Error::Usage(format!("unknown fixture kind {s:?} (random or pathology)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixtureRequest {
    pub kind: FixtureKind,
    pub seed: u64,
    /// Defaults to the pathology dimensions.
    pub config: Option<ModelConfig>,
    pub sys: usize,
    pub vis: usize,
    pub instr: usize,
    /// File name inside the output directory; `.json` selects JSON weights.
    pub weights_name: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct FixtureFiles {
    pub weights: PathBuf,
    pub prompt: PathBuf,
    pub fixture: PathBuf,
}

pub fn fixture_spec(req: &FixtureRequest) -> Result<FixtureSpec> {
    let config = req.config.unwrap_or_else(pathology_config);
    match req.kind {
        FixtureKind::Pathology => pathology_spec(req.seed, config, req.sys, req.vis, req.instr),
        FixtureKind::Random => {
            let spec = FixtureSpec {
                seed: req.seed,
                config,
                layout: TokenSegmentation::contiguous(req.sys, req.vis, req.instr),
                pathology: None,
            };
            spec.validate()?;
            Ok(spec)
        }
    }
}

/// `fixture`: writes weights, `prompt.json` and `fixture.json` into `out`.
pub fn cmd_fixture(req: &FixtureRequest, out: &Path) -> Result<FixtureFiles> {
    let f = fixture_spec(req)?.build()?;
    ensure_dir(out)?;
    let files = FixtureFiles {
        weights: out.join(&req.weights_name),
        prompt: out.join("prompt.json"),
        fixture: out.join("fixture.json"),
    };
    f.weights.save(&files.weights)?;
    write_json(
        &files.prompt,
        &PromptFile {
            tokens: f.prompt.clone(),
            segmentation: Some(SegmentationSpec::Explicit(f.spec.layout)),
        },
    )?;
    write_json(&files.fixture, &f.spec)?;
    Ok(files)
}

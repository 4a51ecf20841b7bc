// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command implementations behind the `attnflow` binary.
//!
//! A run is described by a versioned JSON [`RunConfig`] and/or command-line
//! overrides, resolved into [`RunSettings`]. Relative paths in a config file
//! are taken relative to the file's directory.

pub mod ablate;
pub mod analyze;
pub mod bench;
pub mod generate;
pub mod tools;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, FieldError, Result};
use crate::intervention::InterventionConfig;
use crate::model::Capture;
use crate::segmentation::TokenSegmentation;
use crate::weights::ModelWeights;

pub const RUN_CONFIG_VERSION: u32 = 1;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 64;
pub const DEFAULT_OUT_DIR: &str = "attnflow-out";

/// Either a layout preset name or explicit spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SegmentationSpec {
    Preset(String),
    Explicit(TokenSegmentation),
}

impl SegmentationSpec {
    pub fn resolve(&self, prompt_len: usize) -> Result<TokenSegmentation> {
        match self {
            SegmentationSpec::Preset(name) => TokenSegmentation::preset(name, prompt_len),
            SegmentationSpec::Explicit(seg) => Ok(*seg),
        }
    }
}

/// Prompt token file: `{"tokens": [...], "segmentation": ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptFile {
    pub tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationSpec>,
}

fn default_max_new() -> usize {
    DEFAULT_MAX_NEW_TOKENS
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub weights: PathBuf,
    pub prompt: PathBuf,
    /// Overrides the prompt file's segmentation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervention: Option<InterventionConfig>,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    /// `none`, `all` or `layers=a..b`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Teacher-forced response for saliency; greedy baseline output if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Vec<u32>>,
    /// Restrict visual-to-visual flow to `i >= j`.
    #[serde(default = "yes")]
    pub vv_causal_only: bool,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub prompt: Option<PathBuf>,
    pub preset: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub capture: Option<String>,
    pub no_tai: bool,
    pub no_hai: bool,
    pub max_new_tokens: Option<usize>,
}

/// A fully loaded run.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub weights: ModelWeights,
    pub weights_path: PathBuf,
    pub prompt: Vec<u32>,
    pub segmentation: TokenSegmentation,
    pub intervention: InterventionConfig,
    pub max_new_tokens: usize,
    /// `None` when neither the config nor the command line set it.
    pub capture: Option<Capture>,
    pub out: PathBuf,
    pub seed: u64,
    pub response: Option<Vec<u32>>,
    pub vv_causal_only: bool,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_prompt(path: &Path) -> Result<PromptFile> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn parse_run_config(path: &Path) -> Result<RunConfig> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

impl RunSettings {
    pub fn resolve(ov: &Overrides) -> Result<Self> {
        let (file, base) = match &ov.config {
            Some(p) => (
                Some(parse_run_config(p)?),
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (None, PathBuf::new()),
        };
        let rel = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let mut errs = Vec::new();

        if let Some(f) = &file {
            if f.version != RUN_CONFIG_VERSION {
                errs.push(FieldError::new(
                    "version",
                    format!("unsupported version {}, expected {RUN_CONFIG_VERSION}", f.version),
                ));
            }
        }
        let weights_path = ov
            .weights
            .clone()
            .or_else(|| file.as_ref().map(|f| rel(&f.weights)));
        let prompt_path = ov
            .prompt
            .clone()
            .or_else(|| file.as_ref().map(|f| rel(&f.prompt)));
        for (name, p) in [("weights", &weights_path), ("prompt", &prompt_path)] {
            match p {
                None => errs.push(FieldError::new(name, "required (config file or --".to_string() + name + ")")),
                Some(p) if !p.exists() => errs.push(FieldError::new(name, format!("{} does not exist", p.display()))),
                _ => {}
            }
        }
        let capture_text = ov
            .capture
            .clone()
            .or_else(|| file.as_ref().and_then(|f| f.capture.clone()));
        let capture = match capture_text.as_deref().map(Capture::parse) {
            None => None,
            Some(Ok(c)) => Some(c),
            Some(Err(e)) => {
                errs.push(FieldError::new("capture", e.to_string()));
                None
            }
        };
        let mut intervention = match &ov.preset {
            Some(name) => match InterventionConfig::preset(name) {
                Ok(c) => c,
                Err(e) => {
                    errs.push(FieldError::new("preset", e.to_string()));
                    InterventionConfig::default()
                }
            },
            None => file
                .as_ref()
                .and_then(|f| f.intervention.clone())
                .unwrap_or_default(),
        };
        if ov.no_tai {
            intervention.tai = None;
        }
        if ov.no_hai {
            intervention.hai = None;
        }
        errs.extend(intervention.field_errors(None).into_iter().map(|mut e| {
            e.path = format!("intervention.{}", e.path);
            e
        }));
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }

        let weights_path = weights_path.expect("checked above");
        let prompt_path = prompt_path.expect("checked above");
        let weights = ModelWeights::load(&weights_path)?;
        let prompt_file = load_prompt(&prompt_path)?;
        let spec = file
            .as_ref()
            .and_then(|f| f.segmentation.clone())
            .or(prompt_file.segmentation.clone())
            .ok_or_else(|| {
                Error::Config(vec![FieldError::new(
                    "segmentation",
                    "not given in the config or the prompt file",
                )])
            })?;
        let segmentation = spec.resolve(prompt_file.tokens.len())?;
        segmentation.validate()?;
        if segmentation.resp_start != prompt_file.tokens.len() {
            return Err(Error::Config(vec![FieldError::new(
                "segmentation",
                format!(
                    "layout covers {} positions but the prompt has {} tokens",
                    segmentation.resp_start,
                    prompt_file.tokens.len()
                ),
            )]));
        }
        if let Err(Error::Config(e)) = intervention.validate(Some(&weights.config)) {
            return Err(Error::Config(
                e.into_iter()
                    .map(|mut f| {
                        f.path = format!("intervention.{}", f.path);
                        f
                    })
                    .collect(),
            ));
        }
        Ok(Self {
            weights,
            weights_path,
            prompt: prompt_file.tokens,
            segmentation,
            intervention,
            max_new_tokens: ov
                .max_new_tokens
                .or(file.as_ref().map(|f| f.max_new_tokens))
                .unwrap_or(DEFAULT_MAX_NEW_TOKENS),
            capture,
            out: ov
                .out
                .clone()
                .or_else(|| file.as_ref().and_then(|f| f.out.as_ref().map(|o| rel(o))))
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
            seed: ov.seed.or(file.as_ref().map(|f| f.seed)).unwrap_or(0),
            response: file.as_ref().and_then(|f| f.response.clone()),
            vv_causal_only: file.as_ref().map_or(true, |f| f.vv_causal_only),
        })
    }
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Nearest-rank percentile of `samples` (any order); `None` when empty.
pub fn percentile(samples: &[f64], p: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    Some(s[rank.min(s.len()) - 1])
}

pub fn median(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Intervention configuration and the combined TAI + HAI hook.
//!
//! Planning runs an unhooked prefill with full capture, classifies visual
//! tokens and heads from it, and freezes the result in an
//! [`InterventionPlan`]. The plan applies TAI, then HAI, to every attention
//! matrix and masks any listed heads.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionHook, AttentionRows, HookContext};
use crate::config::ModelConfig;
use crate::error::{Error, FieldError, Result};
use crate::hai::{classify_heads_at_prefill, mask_heads, prefill_head_stats, HaiHook, HaiParams, HeadStats, MaskHeads};
use crate::model::{prefill, Capture, DecodeState};
use crate::segmentation::TokenSegmentation;
use crate::tai::{classify_visual_tokens_at_prefill, TaiHook, TaiParams, VisualTokenClasses};
use crate::weights::ModelWeights;

pub const CONFIG_VERSION: u32 = 1;

/// Preset names accepted by [`InterventionConfig::preset`].
pub const PRESETS: [&str; 5] = ["llava", "llava-chair", "minigpt4", "identity", "baseline"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionConfig {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tai: Option<TaiParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hai: Option<HaiParams>,
    /// `(layer, head)` pairs whose output is zeroed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mask: Vec<(usize, usize)>,
}

impl Default for InterventionConfig {
    /// No intervention.
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            tai: None,
            hai: None,
            mask: Vec::new(),
        }
    }
}

impl InterventionConfig {
    /// Named parameter sets:
    /// * `llava`: yes/no probing, `k = delta = 20`, default HAI;
    /// * `llava-chair`: captioning, `k = 10`, `delta = 0.4`, default HAI;
    /// * `minigpt4`: HAI only, `alpha_txt = 0.6`, `alpha_sys = 0.4`;
    /// * `identity`: unit scales and zero suppression;
    /// * `baseline`: nothing.
    pub fn preset(name: &str) -> Result<Self> {
        let (tai, hai) = match name {
            "llava" => (Some(TaiParams::probing()), Some(HaiParams::default())),
            "llava-chair" => (Some(TaiParams::default()), Some(HaiParams::default())),
            "minigpt4" => (None, Some(HaiParams::compressed_visual())),
            "identity" => (Some(TaiParams::identity()), Some(HaiParams::identity())),
            "baseline" => (None, None),
            other => {
                return Err(Error::Usage(format!(
                    "unknown preset {other:?}; known: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            version: CONFIG_VERSION,
            tai,
            hai,
            mask: Vec::new(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            Error::Config(vec![FieldError::new(
                format!("<json>:{}:{}", e.line(), e.column()),
                e.to_string(),
            )])
        })?;
        let errs = cfg.field_errors(None);
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tai.is_none() && self.hai.is_none() && self.mask.is_empty()
    }

    /// Field-level problems; mask entries are range-checked when `model` is given.
    pub fn field_errors(&self, model: Option<&ModelConfig>) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.version != CONFIG_VERSION {
            errs.push(FieldError::new(
                "version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.version),
            ));
        }
        if let Some(t) = &self.tai {
            errs.extend(t.validate("tai"));
        }
        if let Some(h) = &self.hai {
            errs.extend(h.validate("hai"));
        }
        if let Some(m) = model {
            for (i, &(l, h)) in self.mask.iter().enumerate() {
                if l >= m.num_layers || h >= m.num_heads {
                    errs.push(FieldError::new(
                        format!("mask[{i}]"),
                        format!("head ({l}, {h}) outside a {}x{} model", m.num_layers, m.num_heads),
                    ));
                }
            }
        }
        errs
    }

    pub fn validate(&self, model: Option<&ModelConfig>) -> Result<()> {
        let errs = self.field_errors(model);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Frozen intervention for one prompt.
#[derive(Debug, Clone)]
pub struct InterventionPlan {
    pub tai: Option<TaiHook>,
    pub hai: Option<HaiHook>,
    pub mask: Option<MaskHeads>,
    /// Head statistics of the planning prefill (empty if not needed).
    pub head_stats: Vec<HeadStats>,
}

impl InterventionPlan {
    pub fn is_empty(&self) -> bool {
        self.tai.is_none() && self.hai.is_none() && self.mask.as_ref().map_or(true, MaskHeads::is_empty)
    }

    pub fn visual_classes(&self) -> Option<&[VisualTokenClasses]> {
        self.tai.as_ref().map(TaiHook::classes)
    }

    /// The hook to pass to the decoder, or `None` when there is nothing to do.
    pub fn hook(&self) -> Option<&dyn AttentionHook> {
        (!self.is_empty()).then_some(self as &dyn AttentionHook)
    }

    /// Sizes of the classified sets, for reports.
    pub fn summary(&self) -> serde_json::Value {
        let tai = self.tai.as_ref().map(|t| {
            t.classes()
                .iter()
                .map(|c| serde_json::json!({"layer": c.layer, "salient": c.salient.len(), "sink": c.sink.len()}))
                .collect::<Vec<_>>()
        });
        let hai = self.hai.as_ref().map(|h| {
            let layers: Vec<_> = h
                .classes()
                .layers
                .iter()
                .enumerate()
                .map(|(l, c)| {
                    serde_json::json!({"layer": l, "visual": c.visual.len(), "text": c.text.len(), "system": c.system.len()})
                })
                .collect();
            serde_json::json!({"layers": layers, "suppressed_heads": h.suppressed_heads()})
        });
        serde_json::json!({
            "tai": tai,
            "hai": hai,
            "masked_heads": self.mask.as_ref().map(|m| m.pairs().to_vec()).unwrap_or_default(),
        })
    }
}

impl AttentionHook for InterventionPlan {
    fn rewrite(&self, ctx: &HookContext<'_>, rows: &mut AttentionRows<'_>) -> Result<()> {
        if let Some(t) = &self.tai {
            t.rewrite(ctx, rows)?;
        }
        if let Some(h) = &self.hai {
            h.rewrite(ctx, rows)?;
        }
        Ok(())
    }

    fn masks_head(&self, layer: usize, head: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m.masks_head(layer, head))
    }
}

/// Classifies from `baseline`, a state whose prefill captured every layer.
pub fn plan_from_state(
    baseline: &mut DecodeState,
    weights: &ModelWeights,
    config: &InterventionConfig,
) -> Result<InterventionPlan> {
    config.validate(Some(&weights.config))?;
    let cfg = &weights.config;
    let tai = match &config.tai {
        Some(p) => {
            let classes = classify_visual_tokens_at_prefill(baseline, p, cfg.num_layers, cfg.num_heads)?;
            Some(TaiHook::new(*p, classes))
        }
        None => None,
    };
    let (hai, head_stats) = match &config.hai {
        Some(p) => {
            let classes = classify_heads_at_prefill(baseline, p, cfg)?;
            (Some(HaiHook::new(*p, classes)), prefill_head_stats(baseline, cfg)?)
        }
        None => (None, Vec::new()),
    };
    let mask = if config.mask.is_empty() {
        None
    } else {
        Some(mask_heads(cfg, &config.mask)?)
    };
    Ok(InterventionPlan {
        tai,
        hai,
        mask,
        head_stats,
    })
}

/// Runs the planning prefill when classification is needed.
pub fn plan(
    weights: &ModelWeights,
    prompt: &[u32],
    seg: &TokenSegmentation,
    config: &InterventionConfig,
) -> Result<InterventionPlan> {
    config.validate(Some(&weights.config))?;
    let capture = if config.tai.is_some() || config.hai.is_some() {
        Capture::All
    } else {
        Capture::None
    };
    let mut baseline = prefill(weights, prompt, seg, None, capture)?;
    plan_from_state(&mut baseline, weights, config)
}

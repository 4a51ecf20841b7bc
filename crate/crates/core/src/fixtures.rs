// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded model generators.
//!
//! `random_model` draws every projection from `N(0, 1/fan_in)` with a
//! ChaCha8 stream seeded by `seed`, in a fixed tensor order: embedding, then
//! per layer `wq, wk, wv, wo, w1, w2`, then the unembedding. Norm gains are
//! one. The embedding uses unit variance.
//!
//! `pathology_model` hand-builds a model with two designated heads:
//!
//! * a copy head whose rotary query/key pair peaks at distance one, reads a
//!   "prior" feature carried only by `prior_token`, and raises that token's
//!   logit;
//! * a visual head whose keys read a visual flag carried by the visual
//!   vocabulary, and which raises `grounded_token`'s logit with half the
//!   copy head's gain.
//!
//! With `prior_token` placed just before the last prompt position the
//! baseline emits it; silencing the copy head's text attention leaves the
//! visual pathway in charge.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rope::plane_frequency;
use crate::segmentation::TokenSegmentation;
use crate::weights::{LayerWeights, ModelWeights};

/// Designated heads and tokens of a pathology fixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pathology {
    pub copy_head: (usize, usize),
    pub visual_head: (usize, usize),
    pub grounded_token: u32,
    pub prior_token: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    pub seed: u64,
    pub config: ModelConfig,
    pub layout: TokenSegmentation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pathology: Option<Pathology>,
}

/// A generated model with a prompt matching its layout.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub weights: ModelWeights,
    pub prompt: Vec<u32>,
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.layout.validate()?;
        if self.layout.resp_start > self.config.max_seq_len {
            return Err(Error::Shape(format!(
                "layout needs {} positions, model allows {}",
                self.layout.resp_start, self.config.max_seq_len
            )));
        }
        if let Some(p) = &self.pathology {
            let c = &self.config;
            for (name, (l, h)) in [("copy_head", p.copy_head), ("visual_head", p.visual_head)] {
                if l >= c.num_layers || h >= c.num_heads {
                    return Err(Error::OutOfRange(format!(
                        "{name} ({l}, {h}) outside a {}x{} model",
                        c.num_layers, c.num_heads
                    )));
                }
            }
            if p.copy_head == p.visual_head {
                return Err(Error::Contract("copy and visual heads must differ".into()));
            }
            if p.grounded_token == p.prior_token {
                return Err(Error::Contract(
                    "grounded_token and prior_token must differ".into(),
                ));
            }
            let text_pool = text_pool_len(c.vocab_size) as u32;
            if p.grounded_token >= text_pool || p.prior_token >= text_pool {
                return Err(Error::OutOfRange(format!(
                    "pathology tokens must be text ids below {text_pool}"
                )));
            }
            if self.layout.instr.len() < 2 {
                return Err(Error::Segmentation(
                    "pathology prompts need at least two instruction tokens".into(),
                ));
            }
        }
        Ok(())
    }

    /// Builds the weights and a seeded prompt.
    pub fn build(&self) -> Result<Fixture> {
        self.validate()?;
        let weights = match &self.pathology {
            None => random_model(self.seed, self.config)?,
            Some(_) => pathology_model(self)?,
        };
        let prompt = fixture_prompt(self.seed, &self.config, &self.layout, self.pathology.as_ref());
        Ok(Fixture {
            spec: self.clone(),
            weights,
            prompt,
        })
    }
}

/// Ids `[0, text_pool_len)` are text tokens, the rest visual tokens.
pub fn text_pool_len(vocab_size: usize) -> usize {
    vocab_size.div_ceil(2)
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("positive finite std")
}

fn fill(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f32> {
    let dist = normal(std);
    (0..len).map(|_| dist.sample(rng) as f32).collect()
}

/// Deterministic random decoder for `seed`.
pub fn random_model(seed: u64, config: ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f, v) = (config.model_dim, config.ffn_dim, config.vocab_size);
    let embedding = fill(&mut rng, v * d, 1.0);
    let sd = 1.0 / (d as f64).sqrt();
    let sf = 1.0 / (f as f64).sqrt();
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            attn_norm: vec![1.0; d],
            wq: fill(&mut rng, d * d, sd),
            wk: fill(&mut rng, d * d, sd),
            wv: fill(&mut rng, d * d, sd),
            wo: fill(&mut rng, d * d, sd),
            ffn_norm: vec![1.0; d],
            w1: fill(&mut rng, f * d, sd),
            w2: fill(&mut rng, d * f, sf),
        })
        .collect();
    let unembedding = fill(&mut rng, v * d, sd);
    Ok(ModelWeights {
        config,
        embedding,
        layers,
        final_norm: vec![1.0; d],
        unembedding,
    })
}

/// Seeded prompt for `layout`: text ids for system and instruction
/// positions, visual ids for the visual block. With a pathology, its two
/// tokens are kept out of the draw and `prior_token` sits at the
/// second-to-last position.
pub fn fixture_prompt(
    seed: u64,
    config: &ModelConfig,
    layout: &TokenSegmentation,
    pathology: Option<&Pathology>,
) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_70c3);
    let text_pool = text_pool_len(config.vocab_size) as u32;
    let reserved: Vec<u32> = pathology
        .map(|p| vec![p.prior_token, p.grounded_token])
        .unwrap_or_default();
    let n = layout.resp_start;
    let mut tokens = Vec::with_capacity(n);
    for i in 0..n {
        let t = if layout.vis.contains(i) && (text_pool as usize) < config.vocab_size {
            rng.gen_range(text_pool..config.vocab_size as u32)
        } else {
            loop {
                let t = rng.gen_range(0..text_pool);
                if !reserved.contains(&t) || text_pool as usize <= reserved.len() {
                    break t;
                }
            }
        };
        tokens.push(t);
    }
    if let (Some(p), true) = (pathology, n >= 2) {
        tokens[n - 2] = p.prior_token;
    }
    tokens
}

/// Picks pathology heads and tokens for `seed` and a layout of
/// `sys + vis + instr` positions.
pub fn pathology_spec(
    seed: u64,
    config: ModelConfig,
    sys_len: usize,
    vis_len: usize,
    instr_len: usize,
) -> Result<FixtureSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let heads: Vec<(usize, usize)> = (0..config.num_layers)
        .flat_map(|l| (0..config.num_heads).map(move |h| (l, h)))
        .collect();
    if heads.len() < 2 {
        return Err(Error::Infeasible("pathology fixtures need at least two heads".into()));
    }
    let picked: Vec<_> = heads.choose_multiple(&mut rng, 2).copied().collect();
    let pool = text_pool_len(config.vocab_size) as u32;
    if pool < 3 {
        return Err(Error::Infeasible("vocabulary too small for a pathology fixture".into()));
    }
    let prior = rng.gen_range(0..pool);
    let grounded = loop {
        let g = rng.gen_range(0..pool);
        if g != prior {
            break g;
        }
    };
    let spec = FixtureSpec {
        seed,
        config,
        layout: TokenSegmentation::contiguous(sys_len, vis_len, instr_len),
        pathology: Some(Pathology {
            copy_head: picked[0],
            visual_head: picked[1],
            grounded_token: grounded,
            prior_token: prior,
        }),
    };
    spec.validate()?;
    Ok(spec)
}

// Residual dimensions with a fixed role in pathology models.
const DIM_BIAS: usize = 0;
const DIM_VISUAL: usize = 1;
const DIM_PRIOR: usize = 2;
const DIM_PRIOR_OUT: usize = 3;
const DIM_GROUND_OUT: usize = 4;
const DIM_FILL: usize = 5;
const FIRST_FREE_DIM: usize = 6;

/// Pre-softmax logit gap the designated heads keep over competing keys.
pub const PATHOLOGY_MARGIN: f64 = 12.0;
const COPY_GAIN: f32 = 0.01;
const VISUAL_GAIN: f32 = 0.005;
const READOUT: f32 = 400.0;

/// Smallest `sum_p (1 - cos((delta - 1) * theta_p))` over distances
/// `0..max_seq_len` other than one.
fn copy_head_min_deficit(head_dim: usize, max_seq_len: usize, rope_base: f64) -> f64 {
    let planes = head_dim / 2;
    (0..max_seq_len)
        .filter(|&delta| delta != 1)
        .map(|delta| {
            let t = delta as f64 - 1.0;
            (0..planes)
                .map(|p| 1.0 - (t * plane_frequency(p, head_dim, rope_base)).cos())
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Hand-built model for a spec with a pathology; see the module docs.
pub fn pathology_model(spec: &FixtureSpec) -> Result<ModelWeights> {
    spec.validate()?;
    let p = spec
        .pathology
        .ok_or_else(|| Error::Contract("spec has no pathology".into()))?;
    let cfg = spec.config;
    let (d, hd, v) = (cfg.model_dim, cfg.head_dim, cfg.vocab_size);
    if hd < 4 {
        return Err(Error::Infeasible(format!(
            "pathology heads need head_dim >= 4, got {hd}"
        )));
    }
    if d <= FIRST_FREE_DIM {
        return Err(Error::Infeasible(format!(
            "pathology models need model_dim > {FIRST_FREE_DIM}, got {d}"
        )));
    }
    let min_deficit = copy_head_min_deficit(hd, cfg.max_seq_len, cfg.rope_base);
    if min_deficit.is_nan() || min_deficit <= 1e-3 {
        return Err(Error::Infeasible(format!(
            "rotary planes cannot separate distance one over {} positions",
            cfg.max_seq_len
        )));
    }
    let slow = plane_frequency(hd / 2 - 1, hd, cfg.rope_base);
    let cos_min = ((cfg.max_seq_len as f64 - 1.0) * slow).min(std::f64::consts::PI).cos();
    if cos_min < 0.1 {
        return Err(Error::Infeasible(format!(
            "slowest rotary plane turns too far over {} positions",
            cfg.max_seq_len
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut w = ModelWeights::zeros(cfg)?;
    let text_pool = text_pool_len(v);
    let free = FIRST_FREE_DIM..d;

    // Embeddings: bias 1, visual flag, prior flag, noise on free dims, and a
    // filler so every row has squared norm `d` (unit RMS).
    let noise = normal(0.5);
    for t in 0..v {
        let row = &mut w.embedding[t * d..(t + 1) * d];
        row[DIM_BIAS] = 1.0;
        row[DIM_VISUAL] = if t >= text_pool { 1.0 } else { 0.0 };
        row[DIM_PRIOR] = if t == p.prior_token as usize { 1.0 } else { 0.0 };
        let mut free_sq = 0.0;
        for j in free.clone() {
            let x = noise.sample(&mut rng);
            row[j] = x as f32;
            free_sq += x * x;
        }
        let fixed_sq: f64 = row[..FIRST_FREE_DIM].iter().map(|&x| (x as f64).powi(2)).sum();
        let budget = d as f64 - fixed_sq - 0.25;
        if free_sq > budget {
            let s = (budget / free_sq).sqrt();
            for j in free.clone() {
                row[j] = (row[j] as f64 * s) as f32;
            }
            free_sq = budget;
        }
        row[DIM_FILL] = (d as f64 - fixed_sq - free_sq).max(0.0).sqrt() as f32;
    }

    // Uninvolved heads: random queries and keys, tiny outputs into free dims.
    let qk = normal(1.0 / (d as f64).sqrt());
    let out = normal(1e-3);
    for (l, layer) in w.layers.iter_mut().enumerate() {
        for h in 0..cfg.num_heads {
            if (l, h) == p.copy_head || (l, h) == p.visual_head {
                continue;
            }
            for r in h * hd..(h + 1) * hd {
                for c in 0..d {
                    layer.wq[r * d + c] = qk.sample(&mut rng) as f32;
                    layer.wk[r * d + c] = qk.sample(&mut rng) as f32;
                    layer.wv[r * d + c] = qk.sample(&mut rng) as f32;
                }
                for o in free.clone() {
                    layer.wo[o * d + r] = out.sample(&mut rng) as f32;
                }
            }
        }
    }

    // Copy head: q = a, k = R(theta) a per plane, both read from the bias.
    let scale = (hd as f64).sqrt();
    let weight = PATHOLOGY_MARGIN * scale / min_deficit;
    let amp = weight.sqrt();
    {
        let (l, h) = p.copy_head;
        let layer = &mut w.layers[l];
        for plane in 0..hd / 2 {
            let theta = plane_frequency(plane, hd, cfg.rope_base);
            let r0 = h * hd + 2 * plane;
            layer.wq[r0 * d + DIM_BIAS] = amp as f32;
            layer.wk[r0 * d + DIM_BIAS] = (amp * theta.cos()) as f32;
            layer.wk[(r0 + 1) * d + DIM_BIAS] = (amp * theta.sin()) as f32;
        }
        layer.wv[(h * hd) * d + DIM_PRIOR] = 1.0;
        layer.wo[DIM_PRIOR_OUT * d + h * hd] = COPY_GAIN;
    }

    // Visual head: query reads the bias, key reads the visual flag, both on
    // the slowest plane so distance barely matters.
    {
        let (l, h) = p.visual_head;
        let layer = &mut w.layers[l];
        let amp = (PATHOLOGY_MARGIN * scale / cos_min).sqrt();
        let r0 = h * hd + hd - 2;
        layer.wq[r0 * d + DIM_BIAS] = amp as f32;
        layer.wk[r0 * d + DIM_VISUAL] = amp as f32;
        layer.wv[(h * hd) * d + DIM_VISUAL] = 1.0;
        layer.wo[DIM_GROUND_OUT * d + h * hd] = VISUAL_GAIN;
    }

    // Readout: the two designated tokens read their pathway, every other
    // token gets a small random row.
    let small = normal(0.01);
    for t in 0..v {
        let row = &mut w.unembedding[t * d..(t + 1) * d];
        if t == p.prior_token as usize {
            row[DIM_PRIOR_OUT] = READOUT;
        } else if t == p.grounded_token as usize {
            row[DIM_GROUND_OUT] = READOUT;
        } else {
            for x in row.iter_mut() {
                *x = small.sample(&mut rng) as f32;
            }
        }
    }
    w.validate()?;
    Ok(w)
}

/// Default pathology geometry: 2 layers, 4 heads of width 8, 64 tokens.
pub fn pathology_config() -> ModelConfig {
    ModelConfig::new(2, 4, 32, 64, 64)
}

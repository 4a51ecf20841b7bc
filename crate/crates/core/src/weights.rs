// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model parameters and their on-disk containers.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! "ATNF"                       magic, 4 bytes
//! u8                           version (1)
//! u32 x 7                      num_layers, num_heads, model_dim, head_dim,
//!                              ffn_dim, vocab_size, max_seq_len
//! f64                          rope_base
//! u32                          tensor count
//! per tensor:
//!   u32 name_len, name bytes (UTF-8)
//!   u32 rank, u32 x rank dims
//!   f32 x prod(dims)           row-major
//! ```
//!
//! The JSON mirror carries the same tensors for tiny hand-made fixtures.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ATNF";
pub const FORMAT_VERSION: u8 = 1;
const JSON_FORMAT: &str = "ATNF-json";

/// Parameters of one decoder block. Matrices are row-major `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub ffn_norm: Vec<f32>,
    /// `[ffn_dim, model_dim]`
    pub w1: Vec<f32>,
    /// `[model_dim, ffn_dim]`
    pub w2: Vec<f32>,
}

impl LayerWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let f = cfg.ffn_dim;
        Self {
            attn_norm: vec![1.0; d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            ffn_norm: vec![1.0; d],
            w1: vec![0.0; f * d],
            w2: vec![0.0; d * f],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `[vocab_size, model_dim]`
    pub embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `[vocab_size, model_dim]`
    pub unembedding: Vec<f32>,
}

impl ModelWeights {
    /// All projections zero, norm gains one.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let v = config.vocab_size;
        Ok(Self {
            config,
            embedding: vec![0.0; v * d],
            layers: (0..config.num_layers)
                .map(|_| LayerWeights::zeros(&config))
                .collect(),
            final_norm: vec![1.0; d],
            unembedding: vec![0.0; v * d],
        })
    }

    /// Checks tensor shapes against the config and that every entry is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.num_layers {
            return Err(Error::Shape(format!(
                "{} layers present, config says {}",
                self.layers.len(),
                self.config.num_layers
            )));
        }
        for (name, dims, data) in self.named_tensors() {
            let expected: usize = dims.iter().product();
            if data.len() != expected {
                return Err(Error::Shape(format!(
                    "tensor {name} has {} entries, expected {expected} for dims {dims:?}",
                    data.len()
                )));
            }
            if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {name} entry {pos}")));
            }
        }
        Ok(())
    }

    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let c = &self.config;
        let (d, f, v) = (c.model_dim, c.ffn_dim, c.vocab_size);
        let mut out: Vec<(String, Vec<usize>, &[f32])> =
            vec![("embed".into(), vec![v, d], &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), vec![d], &layer.attn_norm));
            out.push((format!("layers.{l}.wq"), vec![d, d], &layer.wq));
            out.push((format!("layers.{l}.wk"), vec![d, d], &layer.wk));
            out.push((format!("layers.{l}.wv"), vec![d, d], &layer.wv));
            out.push((format!("layers.{l}.wo"), vec![d, d], &layer.wo));
            out.push((format!("layers.{l}.ffn_norm"), vec![d], &layer.ffn_norm));
            out.push((format!("layers.{l}.w1"), vec![f, d], &layer.w1));
            out.push((format!("layers.{l}.w2"), vec![d, f], &layer.w2));
        }
        out.push(("final_norm".into(), vec![d], &self.final_norm));
        out.push(("unembed".into(), vec![v, d], &self.unembedding));
        out
    }

    fn from_tensor_map(
        config: ModelConfig,
        mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    ) -> Result<Self> {
        let mut weights = ModelWeights::zeros(config)?;
        let mut take = |name: &str, dims: &[usize], dst: &mut Vec<f32>| -> Result<()> {
            let (got_dims, data) = tensors
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if got_dims != dims {
                return Err(Error::Shape(format!(
                    "tensor {name} has dims {got_dims:?}, expected {dims:?}"
                )));
            }
            *dst = data;
            Ok(())
        };
        let (d, f, v) = (config.model_dim, config.ffn_dim, config.vocab_size);
        take("embed", &[v, d], &mut weights.embedding)?;
        for (l, layer) in weights.layers.iter_mut().enumerate() {
            take(&format!("layers.{l}.attn_norm"), &[d], &mut layer.attn_norm)?;
            take(&format!("layers.{l}.wq"), &[d, d], &mut layer.wq)?;
            take(&format!("layers.{l}.wk"), &[d, d], &mut layer.wk)?;
            take(&format!("layers.{l}.wv"), &[d, d], &mut layer.wv)?;
            take(&format!("layers.{l}.wo"), &[d, d], &mut layer.wo)?;
            take(&format!("layers.{l}.ffn_norm"), &[d], &mut layer.ffn_norm)?;
            take(&format!("layers.{l}.w1"), &[f, d], &mut layer.w1)?;
            take(&format!("layers.{l}.w2"), &[d, f], &mut layer.w2)?;
        }
        take("final_norm", &[d], &mut weights.final_norm)?;
        take("unembed", &[v, d], &mut weights.unembedding)?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        weights.validate()?;
        Ok(weights)
    }

    // ---- binary container ----

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        let c = &self.config;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(FORMAT_VERSION);
        for v in [
            c.num_layers,
            c.num_heads,
            c.model_dim,
            c.head_dim,
            c.ffn_dim,
            c.vocab_size,
            c.max_seq_len,
        ] {
            buf.extend_from_slice(&to_u32(v)?.to_le_bytes());
        }
        buf.extend_from_slice(&c.rope_base.to_le_bytes());
        let tensors = self.named_tensors();
        buf.extend_from_slice(&to_u32(tensors.len())?.to_le_bytes());
        for (name, dims, data) in tensors {
            buf.extend_from_slice(&to_u32(name.len())?.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&to_u32(dims.len())?.to_le_bytes());
            for d in dims {
                buf.extend_from_slice(&to_u32(d)?.to_le_bytes());
            }
            for x in data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)
            .map_err(|e| Error::io("<weights writer>", e))
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<weights reader>", e))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, expected \"ATNF\"".into()));
        }
        let version = cur.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut ints = [0usize; 7];
        for v in ints.iter_mut() {
            *v = cur.u32()? as usize;
        }
        let rope_base = f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        let config = ModelConfig {
            num_layers: ints[0],
            num_heads: ints[1],
            model_dim: ints[2],
            head_dim: ints[3],
            ffn_dim: ints[4],
            vocab_size: ints[5],
            max_seq_len: ints[6],
            rope_base,
        };
        config.validate()?;
        let count = cur.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = cur.take(n.checked_mul(4).ok_or_else(|| {
                Error::Format(format!("tensor {name} is too large"))
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if tensors.insert(name.clone(), (dims, data)).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - cur.pos
            )));
        }
        Self::from_tensor_map(config, tensors)
    }

    // ---- JSON mirror ----

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let doc = JsonWeights {
            format: JSON_FORMAT.into(),
            version: FORMAT_VERSION,
            config: self.config,
            tensors: self
                .named_tensors()
                .into_iter()
                .map(|(name, dims, data)| JsonTensor {
                    name,
                    dims,
                    data: data.to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: JsonWeights = serde_json::from_str(text)?;
        if doc.format != JSON_FORMAT || doc.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "expected format {JSON_FORMAT} version {FORMAT_VERSION}, got {} version {}",
                doc.format, doc.version
            )));
        }
        doc.config.validate()?;
        let mut tensors = BTreeMap::new();
        for t in doc.tensors {
            if tensors.insert(t.name.clone(), (t.dims, t.data)).is_some() {
                return Err(Error::Format(format!("duplicate tensor {}", t.name)));
            }
        }
        Self::from_tensor_map(doc.config, tensors)
    }

    /// Loads either container, picking by the leading magic bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(MAGIC) {
            Self::read_binary(bytes.as_slice())
        } else {
            let text = std::str::from_utf8(&bytes)
                .map_err(|_| Error::Format(format!("{} is neither ATNF nor UTF-8 JSON", path.display())))?;
            Self::from_json(text)
        }
    }

    /// Writes JSON when the path ends in `.json`, the binary container otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "json") {
            let text = self.to_json()?;
            std::fs::write(path, text).map_err(|e| Error::io(path, e))
        } else {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            self.write_binary(std::io::BufWriter::new(file))
        }
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of file at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonWeights {
    format: String,
    version: u8,
    config: ModelConfig,
    tensors: Vec<JsonTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonTensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

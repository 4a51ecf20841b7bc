// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention and saliency dumps.
//!
//! A dump is a stream of records. Each record is a little-endian `u32`
//! header length, a JSON header `{kind, layer, head, rows, cols}`, then
//! `rows * cols` little-endian `f32` values in row-major order. The stream
//! ends with an index block: a JSON array of `{offset, kind, layer, head,
//! rows, cols}`, its byte length as `u64`, and the magic `ATNFIDX1`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::error::{Error, Result};
use crate::saliency::SaliencyMatrix;

pub const INDEX_MAGIC: &[u8; 8] = b"ATNFIDX1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DumpKind {
    Attention,
    Saliency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpHeader {
    pub kind: DumpKind,
    pub layer: usize,
    /// `None` for head-summed saliency.
    pub head: Option<usize>,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub offset: u64,
    #[serde(flatten)]
    pub header: DumpHeader,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub header: DumpHeader,
    pub data: Vec<f64>,
}

pub struct DumpWriter<W: Write> {
    out: W,
    offset: u64,
    index: Vec<IndexEntry>,
}

impl<W: Write> DumpWriter<W> {
    pub fn new(out: W) -> Self {
        Self {
            out,
            offset: 0,
            index: Vec::new(),
        }
    }

    pub fn write(&mut self, header: DumpHeader, data: &[f64]) -> Result<()> {
        if data.len() != header.rows * header.cols {
            return Err(Error::Shape(format!(
                "{} values for a {}x{} record",
                data.len(),
                header.rows,
                header.cols
            )));
        }
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(4 + json.len() + 4 * data.len());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for &x in data {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        self.out.write_all(&buf).map_err(|e| Error::io("<dump>", e))?;
        self.index.push(IndexEntry {
            offset: self.offset,
            header,
        });
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn write_attention(&mut self, r: &AttentionRecord) -> Result<()> {
        self.write(
            DumpHeader {
                kind: DumpKind::Attention,
                layer: r.layer,
                head: Some(r.head),
                rows: r.rows,
                cols: r.cols,
            },
            &r.data,
        )
    }

    pub fn write_saliency(&mut self, m: &SaliencyMatrix) -> Result<()> {
        self.write(
            DumpHeader {
                kind: DumpKind::Saliency,
                layer: m.layer,
                head: None,
                rows: m.size,
                cols: m.size,
            },
            &m.data,
        )
    }

    /// Appends the index block and returns the sink.
    pub fn finish(mut self) -> Result<W> {
        let index = serde_json::to_vec(&self.index)?;
        let mut tail = index;
        tail.extend_from_slice(&(tail.len() as u64).to_le_bytes());
        tail.extend_from_slice(INDEX_MAGIC);
        self.out.write_all(&tail).map_err(|e| Error::io("<dump>", e))?;
        self.out.flush().map_err(|e| Error::io("<dump>", e))?;
        Ok(self.out)
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Parses a dump; the index block is checked against the records found.
pub fn read_dump(bytes: &[u8]) -> Result<Vec<DumpRecord>> {
    let n = bytes.len();
    if n < 16 || &bytes[n - 8..] != INDEX_MAGIC {
        return Err(format_err("dump lacks the index magic"));
    }
    let index_len = u64::from_le_bytes(bytes[n - 16..n - 8].try_into().expect("8 bytes")) as usize;
    let body_end = (n - 16)
        .checked_sub(index_len)
        .ok_or_else(|| format_err("index length exceeds file"))?;
    let index: Vec<IndexEntry> = serde_json::from_slice(&bytes[body_end..n - 16])?;

    let mut records = Vec::with_capacity(index.len());
    let mut pos = 0usize;
    while pos < body_end {
        let entry = index
            .get(records.len())
            .ok_or_else(|| format_err("record missing from index"))?;
        if entry.offset as usize != pos {
            return Err(format_err(format!("index offset {} != record start {pos}", entry.offset)));
        }
        let take = |from: usize, len: usize| -> Result<&[u8]> {
            bytes
                .get(from..from + len)
                .filter(|_| from + len <= body_end)
                .ok_or_else(|| format_err("truncated record"))
        };
        let hlen = u32::from_le_bytes(take(pos, 4)?.try_into().expect("4 bytes")) as usize;
        let header: DumpHeader = serde_json::from_slice(take(pos + 4, hlen)?)?;
        if header != entry.header {
            return Err(format_err("record header disagrees with index"));
        }
        let count = header.rows * header.cols;
        let raw = take(pos + 4 + hlen, 4 * count)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        records.push(DumpRecord { header, data });
        pos += 4 + hlen + 4 * count;
    }
    if records.len() != index.len() {
        return Err(format_err("index lists records that are not present"));
    }
    Ok(records)
}

pub fn read_dump_file(path: impl AsRef<Path>) -> Result<Vec<DumpRecord>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_dump(&bytes)
}

pub fn write_attention_file(path: impl AsRef<Path>, records: &[AttentionRecord]) -> Result<()> {
    let mut w = DumpWriter::new(Vec::new());
    for r in records {
        w.write_attention(r)?;
    }
    let path = path.as_ref();
    std::fs::write(path, w.finish()?).map_err(|e| Error::io(path, e))
}

pub fn write_saliency_file(path: impl AsRef<Path>, matrices: &[SaliencyMatrix]) -> Result<()> {
    let mut w = DumpWriter::new(Vec::new());
    for m in matrices {
        w.write_saliency(m)?;
    }
    let path = path.as_ref();
    std::fs::write(path, w.finish()?).map_err(|e| Error::io(path, e))
}

/// Attention records of a dump, in file order.
pub fn attention_records(records: &[DumpRecord]) -> Result<Vec<AttentionRecord>> {
    records
        .iter()
        .filter(|r| r.header.kind == DumpKind::Attention)
        .map(|r| {
            let head = r
                .header
                .head
                .ok_or_else(|| format_err("attention record without a head"))?;
            Ok(AttentionRecord {
                layer: r.header.layer,
                head,
                rows: r.header.rows,
                cols: r.header.cols,
                data: r.data.clone(),
            })
        })
        .collect()
}

/// Saliency matrices of a dump, in file order.
pub fn saliency_matrices(records: &[DumpRecord]) -> Result<Vec<SaliencyMatrix>> {
    records
        .iter()
        .filter(|r| r.header.kind == DumpKind::Saliency)
        .map(|r| {
            if r.header.rows != r.header.cols {
                return Err(format_err("saliency record is not square"));
            }
            Ok(SaliencyMatrix {
                layer: r.header.layer,
                size: r.header.rows,
                data: r.data.clone(),
            })
        })
        .collect()
}

/// Rounds values through `f32`, as a dump round trip would.
pub fn dump_precision(data: &[f64]) -> Vec<f64> {
    data.iter().map(|&x| x as f32 as f64).collect()
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Object-hallucination scores for captions and yes/no probing.
//!
//! Caption scores aggregate over the whole set: `chair_i` is the fraction of
//! object mentions that are not in the caption's ground truth, `chair_s` the
//! fraction of captions with at least one such mention, and `recall` the
//! fraction of ground-truth objects that were mentioned. Objects compare as
//! trimmed lowercase strings; each caption counts an object once.

use std::collections::BTreeSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionAnnotation {
    pub id: serde_json::Value,
    pub mentioned: Vec<String>,
    pub truth: Vec<String>,
}

fn normalized(objects: &[String]) -> BTreeSet<String> {
    objects.iter().map(|o| o.trim().to_lowercase()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    /// `None` when nothing was mentioned.
    pub chair_i: Option<f64>,
    pub chair_s: f64,
    /// `None` when no caption has ground-truth objects.
    pub recall: Option<f64>,
    pub captions: usize,
    pub mentions: usize,
    pub hallucinated: usize,
}

pub fn chair_scores(annotations: &[CaptionAnnotation]) -> Result<ChairScores> {
    if annotations.is_empty() {
        return Err(Error::Contract("no caption annotations".into()));
    }
    let (mut mentions, mut hallucinated, mut bad_captions, mut truth_total, mut covered) = (0, 0, 0, 0, 0);
    for a in annotations {
        let m = normalized(&a.mentioned);
        let t = normalized(&a.truth);
        let h = m.difference(&t).count();
        mentions += m.len();
        hallucinated += h;
        bad_captions += usize::from(h > 0);
        truth_total += t.len();
        covered += m.intersection(&t).count();
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(ChairScores {
        chair_i: ratio(hallucinated, mentions),
        chair_s: bad_captions as f64 / annotations.len() as f64,
        recall: ratio(covered, truth_total),
        captions: annotations.len(),
        mentions,
        hallucinated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_lowercase().as_str() {
            "yes" => Some(Answer::Yes),
            "no" => Some(Answer::No),
            _ => None,
        }
    }
}

fn answer<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Answer, D::Error> {
    let s = String::deserialize(d)?;
    Answer::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("expected yes or no, got {s:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopeRecord {
    pub id: serde_json::Value,
    #[serde(deserialize_with = "answer")]
    pub pred: Answer,
    #[serde(deserialize_with = "answer")]
    pub label: Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeScores {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Binary scores with "yes" as the positive class.
pub fn pope_scores(records: &[PopeRecord]) -> Result<PopeScores> {
    if records.is_empty() {
        return Err(Error::Contract("no yes/no records".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for r in records {
        match (r.pred, r.label) {
            (Answer::Yes, Answer::Yes) => tp += 1,
            (Answer::Yes, Answer::No) => fp += 1,
            (Answer::No, Answer::No) => tn += 1,
            (Answer::No, Answer::Yes) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(PopeScores {
        accuracy: (tp + tn) as f64 / records.len() as f64,
        precision,
        recall,
        f1,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Parses JSON lines; blank lines are skipped. Errors cite 1-based lines.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, source: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    if out.is_empty() {
        return Err(Error::Usage(format!("{source} holds no records")));
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, &path.display().to_string())
}

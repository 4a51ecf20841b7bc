// SPDX-License-Identifier: MIT OR Apache-2.0

//! `analyze`: reception scores, head statistics and saliency flow of the
//! unhooked model, computed from the dumps it writes so that replaying the
//! dumps reproduces every table.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{ensure_dir, write_json, write_text, RunSettings};
use crate::attention::AttentionRecord;
use crate::dump::{attention_records, read_dump_file, saliency_matrices, write_attention_file, write_saliency_file};
use crate::error::{Error, Result};
use crate::format::{fmt_g6, Csv};
use crate::hai::{head_stats, identify_dominant_heads, identify_visual_heads, HaiParams, HeadClassification, LayerHeads};
use crate::model::{generate, prefill, Capture};
use crate::saliency::{attention_saliency, flow_csv, flow_summary, SaliencyMatrix, SaliencyTask};
use crate::segmentation::{TokenGroup, TokenSegmentation};
use crate::tai::{classes_to_json, classify_visual_tokens, reception_scores, TaiParams, VisualTokenClasses};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisTables {
    pub reception_csv: String,
    pub heads_csv: String,
    pub flow_csv: Option<String>,
    pub visual_classes: serde_json::Value,
    pub head_classes: serde_json::Value,
}

fn by_layer(records: &[AttentionRecord]) -> BTreeMap<usize, Vec<&AttentionRecord>> {
    let mut map: BTreeMap<usize, Vec<&AttentionRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.layer).or_default().push(r);
    }
    for v in map.values_mut() {
        v.sort_by_key(|r| r.head);
    }
    map
}

/// Every analysis table from dumped attention and saliency.
pub fn tables_from_dumps(
    attention: &[AttentionRecord],
    saliency: &[SaliencyMatrix],
    seg: &TokenSegmentation,
    num_heads: usize,
    tai: &TaiParams,
    hai: &HaiParams,
    vv_causal_only: bool,
) -> Result<AnalysisTables> {
    let mut reception = Csv::new(&["layer", "position", "score", "class"]);
    let mut heads = Csv::new(&["layer", "head", "vis", "txt", "sys", "visual", "text", "system"]);
    let mut vclasses: Vec<VisualTokenClasses> = Vec::new();
    let mut hclasses = HeadClassification::default();
    for (layer, records) in by_layer(attention) {
        if !seg.vis.is_empty() {
            let scores = reception_scores(&records, seg, num_heads)?;
            let classes = classify_visual_tokens(&scores, tai)?;
            for (m, s) in scores.scores.iter().enumerate() {
                let pos = scores.vis_start + m;
                let class = if classes.sink.contains(&pos) {
                    "sink"
                } else if classes.salient.contains(&pos) {
                    "salient"
                } else {
                    "other"
                };
                reception.row([layer.to_string(), pos.to_string(), fmt_g6(*s), class.to_string()]);
            }
            vclasses.push(classes);
        }
        let stats = head_stats(&records, seg, num_heads)?;
        let lh = LayerHeads {
            visual: if num_heads >= 2 {
                identify_visual_heads(&stats, hai.lambda_vis)?
            } else {
                Vec::new()
            },
            text: identify_dominant_heads(&stats, TokenGroup::Text, hai.lambda_txt),
            system: identify_dominant_heads(&stats, TokenGroup::System, hai.lambda_sys),
        };
        for h in 0..num_heads {
            let flag = |set: &[usize]| if set.contains(&h) { "1" } else { "0" }.to_string();
            heads.row([
                layer.to_string(),
                h.to_string(),
                fmt_g6(stats.vis[h]),
                fmt_g6(stats.txt[h]),
                fmt_g6(stats.sys[h]),
                flag(&lh.visual),
                flag(&lh.text),
                flag(&lh.system),
            ]);
        }
        if hclasses.layers.len() <= layer {
            hclasses.layers.resize(layer + 1, LayerHeads::default());
        }
        hclasses.layers[layer] = lh;
    }
    let flow = (!saliency.is_empty()).then(|| flow_csv(&flow_summary(saliency, seg, vv_causal_only)));
    Ok(AnalysisTables {
        reception_csv: reception.finish(),
        heads_csv: heads.finish(),
        flow_csv: flow,
        visual_classes: classes_to_json(&vclasses),
        head_classes: hclasses.to_json(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub response: Vec<u32>,
    pub loss: Option<f64>,
    pub files: Vec<String>,
}

pub fn cmd_analyze(settings: &RunSettings) -> Result<AnalyzeReport> {
    let capture = settings.capture.unwrap_or(Capture::All);
    if capture == Capture::None {
        return Err(Error::MissingData("analyze needs attention capture (use --capture all or layers=a..b)".into()));
    }
    let w = &settings.weights;
    let seg = settings.segmentation;
    ensure_dir(&settings.out)?;
    let state = prefill(w, &settings.prompt, &seg, None, capture)?;
    let attn_path = settings.out.join("attention.atnd");
    write_attention_file(&attn_path, state.records())?;
    let attention = attention_records(&read_dump_file(&attn_path)?)?;
    let mut files = vec![attn_path.display().to_string()];

    let response = match &settings.response {
        Some(r) => r.clone(),
        None => generate(&mut state.clone(), w, None, settings.max_new_tokens)?,
    };
    let mut loss = None;
    let saliency = if response.is_empty() {
        log::warn!("no response tokens; skipping saliency flow");
        Vec::new()
    } else {
        let task = SaliencyTask::new(&settings.prompt, &response, seg);
        let sal = attention_saliency(w, &task)?;
        loss = Some(crate::saliency::response_loss(w, &task)?);
        let path = settings.out.join("saliency.atnd");
        write_saliency_file(&path, &sal)?;
        files.push(path.display().to_string());
        saliency_matrices(&read_dump_file(&path)?)?
    };

    let tai = settings.intervention.tai.unwrap_or_default();
    let hai = settings.intervention.hai.unwrap_or_default();
    let tables = tables_from_dumps(&attention, &saliency, &seg, w.config.num_heads, &tai, &hai, settings.vv_causal_only)?;
    let mut emit = |name: &str, text: &str| -> Result<()> {
        let p = settings.out.join(name);
        write_text(&p, text)?;
        files.push(p.display().to_string());
        Ok(())
    };
    emit("reception.csv", &tables.reception_csv)?;
    emit("heads.csv", &tables.heads_csv)?;
    if let Some(flow) = &tables.flow_csv {
        emit("flow.csv", flow)?;
    }
    let classes = settings.out.join("classes.json");
    write_json(
        &classes,
        &serde_json::json!({"visual_tokens": tables.visual_classes, "heads": tables.head_classes}),
    )?;
    files.push(classes.display().to_string());
    Ok(AnalyzeReport { response, loss, files })
}

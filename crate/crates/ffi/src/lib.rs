// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over `attnflow`.
//!
//! Every function returns an [`AtnfStatus`]; on failure a message is kept
//! per thread and read with [`atnf_last_error`]. Handles are opaque and are
//! released with their `_free` function. Undefined metric values are NaN.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use attnflow::config::ModelConfig;
use attnflow::error::Error;
use attnflow::fixtures::{pathology_config, pathology_spec, FixtureSpec};
use attnflow::harness::generate::Session;
use attnflow::intervention::InterventionConfig;
use attnflow::metrics::{chair_scores, parse_jsonl, pope_scores, Answer, CaptionAnnotation, PopeRecord};
use attnflow::model::{decode_step, Capture};
use attnflow::segmentation::{Span, TokenSegmentation};
use attnflow::weights::ModelWeights;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AtnfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Shape = 6,
    OutOfRange = 7,
    MaxLength = 8,
    Numeric = 9,
    Infeasible = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

impl From<&Error> for AtnfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => AtnfStatus::Io,
            Error::Format(_) | Error::Parse { .. } | Error::Json(_) => AtnfStatus::Format,
            Error::Config(_) | Error::Usage(_) => AtnfStatus::Config,
            Error::Dimension(_) | Error::Shape(_) | Error::Segmentation(_) => AtnfStatus::Shape,
            Error::OutOfRange(_) | Error::MissingData(_) => AtnfStatus::OutOfRange,
            Error::MaxLength { .. } => AtnfStatus::MaxLength,
            Error::NonFinite(_) | Error::DegenerateRow { .. } => AtnfStatus::Numeric,
            Error::Infeasible(_) => AtnfStatus::Infeasible,
            Error::Contract(_) | Error::HookContract { .. } => AtnfStatus::InvalidArgument,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul bytes removed")));
}

struct Fail(AtnfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(AtnfStatus::from(&e), e.to_string())
    }
}

fn null(name: &str) -> Fail {
    Fail(AtnfStatus::NullArgument, format!("{name} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AtnfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AtnfStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            AtnfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AtnfStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn atnf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Model dimensions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtnfModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
}

impl From<&ModelConfig> for AtnfModelConfig {
    fn from(c: &ModelConfig) -> Self {
        Self {
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            model_dim: c.model_dim,
            head_dim: c.head_dim,
            ffn_dim: c.ffn_dim,
            vocab_size: c.vocab_size,
            max_seq_len: c.max_seq_len,
            rope_base: c.rope_base,
        }
    }
}

/// Half-open position ranges of a prompt. `resp_start` is the prompt length.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AtnfSegmentation {
    pub sys_start: usize,
    pub sys_end: usize,
    pub vis_start: usize,
    pub vis_end: usize,
    pub instr_start: usize,
    pub instr_end: usize,
    pub resp_start: usize,
}

impl From<&TokenSegmentation> for AtnfSegmentation {
    fn from(s: &TokenSegmentation) -> Self {
        Self {
            sys_start: s.sys.start,
            sys_end: s.sys.end,
            vis_start: s.vis.start,
            vis_end: s.vis.end,
            instr_start: s.instr.start,
            instr_end: s.instr.end,
            resp_start: s.resp_start,
        }
    }
}

impl From<&AtnfSegmentation> for TokenSegmentation {
    fn from(s: &AtnfSegmentation) -> Self {
        TokenSegmentation {
            sys: Span::new(s.sys_start, s.sys_end),
            vis: Span::new(s.vis_start, s.vis_end),
            instr: Span::new(s.instr_start, s.instr_end),
            resp_start: s.resp_start,
        }
    }
}

/// Loaded weights. Sessions keep their model alive.
pub struct AtnfModel {
    weights: Arc<ModelWeights>,
}

/// A prefilled decoding session with its frozen intervention.
pub struct AtnfSession {
    weights: Arc<ModelWeights>,
    session: Session,
}

/// A generated fixture: model, prompt and layout.
pub struct AtnfFixture {
    weights: Arc<ModelWeights>,
    prompt: Vec<u32>,
    layout: TokenSegmentation,
}

/// Loads a binary or JSON weight file.
#[no_mangle]
pub unsafe extern "C" fn atnf_model_load(path: *const c_char, out: *mut *mut AtnfModel) -> AtnfStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let weights = ModelWeights::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(AtnfModel {
            weights: Arc::new(weights),
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn atnf_model_free(model: *mut AtnfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn atnf_model_config(model: *const AtnfModel, out: *mut AtnfModelConfig) -> AtnfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = AtnfModelConfig::from(&m.weights.config);
        Ok(())
    })
}

/// Builds a synthetic fixture. `pathology` selects the hand-built model with
/// a copy head and a visual head; otherwise weights are random. `config` may
/// be null for the default pathology dimensions (its `head_dim`, `ffn_dim`
/// and `rope_base` are derived and ignored).
#[no_mangle]
pub unsafe extern "C" fn atnf_fixture_new(
    pathology: bool,
    seed: u64,
    config: *const AtnfModelConfig,
    sys_len: usize,
    vis_len: usize,
    instr_len: usize,
    out: *mut *mut AtnfFixture,
) -> AtnfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = match config.as_ref() {
            Some(c) => ModelConfig::new(c.num_layers, c.num_heads, c.model_dim, c.vocab_size, c.max_seq_len),
            None => pathology_config(),
        };
        let spec = if pathology {
            pathology_spec(seed, cfg, sys_len, vis_len, instr_len)?
        } else {
            FixtureSpec {
                seed,
                config: cfg,
                layout: TokenSegmentation::contiguous(sys_len, vis_len, instr_len),
                pathology: None,
            }
        };
        let f = spec.build()?;
        *out = Box::into_raw(Box::new(AtnfFixture {
            weights: Arc::new(f.weights),
            prompt: f.prompt,
            layout: f.spec.layout,
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn atnf_fixture_free(fixture: *mut AtnfFixture) {
    if !fixture.is_null() {
        drop(Box::from_raw(fixture));
    }
}

/// A new model handle sharing the fixture's weights.
#[no_mangle]
pub unsafe extern "C" fn atnf_fixture_model(fixture: *const AtnfFixture, out: *mut *mut AtnfModel) -> AtnfStatus {
    guard(|| {
        let f = fixture.as_ref().ok_or_else(|| null("fixture"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(AtnfModel {
            weights: Arc::clone(&f.weights),
        }));
        Ok(())
    })
}

/// Copies the fixture prompt into `tokens` (capacity `cap`) and its layout
/// into `layout`. `*len` always receives the prompt length; a short buffer
/// fails with `BufferTooSmall`.
#[no_mangle]
pub unsafe extern "C" fn atnf_fixture_prompt(
    fixture: *const AtnfFixture,
    tokens: *mut u32,
    cap: usize,
    len: *mut usize,
    layout: *mut AtnfSegmentation,
) -> AtnfStatus {
    guard(|| {
        let f = fixture.as_ref().ok_or_else(|| null("fixture"))?;
        let len = len.as_mut().ok_or_else(|| null("len"))?;
        *len = f.prompt.len();
        if let Some(l) = layout.as_mut() {
            *l = AtnfSegmentation::from(&f.layout);
        }
        copy_out(&f.prompt, tokens, cap)
    })
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, cap: usize) -> Result<(), Fail> {
    if cap < src.len() {
        return Err(Fail(
            AtnfStatus::BufferTooSmall,
            format!("buffer holds {cap}, need {}", src.len()),
        ));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(null("buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

/// Plans the intervention and prefills `tokens`. `config_json` is an
/// intervention config, a preset name, or null for the unmodified model.
#[no_mangle]
pub unsafe extern "C" fn atnf_session_new(
    model: *const AtnfModel,
    tokens: *const u32,
    len: usize,
    layout: *const AtnfSegmentation,
    config_json: *const c_char,
    out: *mut *mut AtnfSession,
) -> AtnfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let tokens = slice_arg(tokens, len, "tokens")?;
        let seg = TokenSegmentation::from(layout.as_ref().ok_or_else(|| null("layout"))?);
        if out.is_null() {
            return Err(null("out"));
        }
        let config = if config_json.is_null() {
            InterventionConfig::default()
        } else {
            let text = str_arg(config_json, "config_json")?.trim();
            if text.starts_with('{') {
                InterventionConfig::from_json(text)?
            } else {
                InterventionConfig::preset(text)?
            }
        };
        let session = Session::start(&m.weights, tokens, &seg, &config, Capture::None)?;
        *out = Box::into_raw(Box::new(AtnfSession {
            weights: Arc::clone(&m.weights),
            session,
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn atnf_session_free(session: *mut AtnfSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// One greedy step; writes the chosen token.
#[no_mangle]
pub unsafe extern "C" fn atnf_session_step(session: *mut AtnfSession, token: *mut u32) -> AtnfStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let token = token.as_mut().ok_or_else(|| null("token"))?;
        let step = decode_step(&mut s.session.state, &s.weights, s.session.plan.hook())?;
        *token = step.token;
        Ok(())
    })
}

/// Up to `max_new` greedy steps, stopping early at the model's maximum
/// length. `*written` receives the number of tokens produced.
#[no_mangle]
pub unsafe extern "C" fn atnf_session_generate(
    session: *mut AtnfSession,
    max_new: usize,
    tokens: *mut u32,
    cap: usize,
    written: *mut usize,
) -> AtnfStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let written = written.as_mut().ok_or_else(|| null("written"))?;
        *written = 0;
        if cap < max_new {
            return Err(Fail(
                AtnfStatus::BufferTooSmall,
                format!("buffer holds {cap}, need {max_new}"),
            ));
        }
        let (out, _) = s.session.decode(&s.weights, max_new)?;
        copy_out(&out, tokens, cap)?;
        *written = out.len();
        Ok(())
    })
}

/// Logits of the last position as doubles. `*len` receives the vocabulary
/// size even when the buffer is too small.
#[no_mangle]
pub unsafe extern "C" fn atnf_session_logits(
    session: *const AtnfSession,
    logits: *mut f64,
    cap: usize,
    len: *mut usize,
) -> AtnfStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let len = len.as_mut().ok_or_else(|| null("len"))?;
        let l = s.session.state.logits();
        *len = l.len();
        copy_out(l, logits, cap)
    })
}

/// Number of positions consumed so far.
#[no_mangle]
pub unsafe extern "C" fn atnf_session_position(session: *const AtnfSession, position: *mut usize) -> AtnfStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        *position.as_mut().ok_or_else(|| null("position"))? = s.session.state.position();
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtnfPopeScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtnfChairScores {
    pub chair_i: f64,
    pub chair_s: f64,
    pub recall: f64,
    pub captions: usize,
    pub mentions: usize,
    pub hallucinated: usize,
}

/// POPE scores from parallel arrays; nonzero means "yes".
#[no_mangle]
pub unsafe extern "C" fn atnf_pope_scores(
    predictions: *const u8,
    labels: *const u8,
    n: usize,
    out: *mut AtnfPopeScores,
) -> AtnfStatus {
    guard(|| {
        let pred = slice_arg(predictions, n, "predictions")?;
        let label = slice_arg(labels, n, "labels")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let ans = |b: u8| if b != 0 { Answer::Yes } else { Answer::No };
        let records: Vec<PopeRecord> = pred
            .iter()
            .zip(label)
            .enumerate()
            .map(|(i, (&p, &l))| PopeRecord {
                id: i.into(),
                pred: ans(p),
                label: ans(l),
            })
            .collect();
        let s = pope_scores(&records)?;
        *out = AtnfPopeScores {
            accuracy: s.accuracy,
            precision: s.precision.unwrap_or(f64::NAN),
            recall: s.recall.unwrap_or(f64::NAN),
            f1: s.f1.unwrap_or(f64::NAN),
            tp: s.tp,
            fp: s.fp,
            tn: s.tn,
            fn_: s.fn_,
        };
        Ok(())
    })
}

/// CHAIR scores from JSONL caption annotations.
#[no_mangle]
pub unsafe extern "C" fn atnf_chair_scores_jsonl(jsonl: *const c_char, out: *mut AtnfChairScores) -> AtnfStatus {
    guard(|| {
        let text = str_arg(jsonl, "jsonl")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = chair_scores(&parse_jsonl::<CaptionAnnotation>(text, "<jsonl>")?)?;
        *out = AtnfChairScores {
            chair_i: s.chair_i.unwrap_or(f64::NAN),
            chair_s: s.chair_s,
            recall: s.recall.unwrap_or(f64::NAN),
            captions: s.captions,
            mentions: s.mentions,
            hallucinated: s.hallucinated,
        };
        Ok(())
    })
}

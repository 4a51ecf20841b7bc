// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt layout: which positions are system, visual, instruction and
//! response tokens.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open index interval, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    /// Intersection with `[0, limit)`.
    pub fn clamp_to(&self, limit: usize) -> Span {
        Span::new(self.start.min(limit), self.end.min(limit))
    }
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl From<Range<usize>> for Span {
    fn from(r: Range<usize>) -> Self {
        Span::new(r.start, r.end)
    }
}

/// Role of a single position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenRole {
    System,
    Visual,
    Instruction,
    Response,
}

/// Token groups used by the intervention and flow formulas. `Text` is the
/// union of instruction and response positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenGroup {
    #[serde(rename = "sys")]
    System,
    #[serde(rename = "vis")]
    Visual,
    #[serde(rename = "txt")]
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenSegmentation {
    pub sys: Span,
    pub vis: Span,
    pub instr: Span,
    pub resp_start: usize,
}

impl TokenSegmentation {
    /// Contiguous layout `[0, sys) [sys, sys+vis) [.., ..+instr)`, response after.
    pub fn contiguous(sys_len: usize, vis_len: usize, instr_len: usize) -> Self {
        let vis_start = sys_len;
        let instr_start = vis_start + vis_len;
        let resp_start = instr_start + instr_len;
        Self {
            sys: Span::new(0, sys_len),
            vis: Span::new(vis_start, instr_start),
            instr: Span::new(instr_start, resp_start),
            resp_start,
        }
    }

    /// Published index ranges for well-known LVLM prompt layouts. The text
    /// range runs to the end of the prompt of length `prompt_len`.
    ///
    /// Known names: `llava-1.5`, `minigpt-4`, `mplug-owl2`. The mPLUG-Owl2
    /// system range starts at 1; position 0 (BOS) is folded into it so the
    /// layout covers the prompt.
    pub fn preset(name: &str, prompt_len: usize) -> Result<Self> {
        let (sys_end, vis_end) = match name {
            "llava-1.5" | "llava" => (35, 611),
            "minigpt-4" | "minigpt4" => (7, 39),
            "mplug-owl2" => (5, 70),
            other => {
                return Err(Error::Segmentation(format!(
                    "unknown layout preset {other:?}"
                )))
            }
        };
        if prompt_len < vis_end {
            return Err(Error::Segmentation(format!(
                "prompt of {prompt_len} tokens is shorter than the {name} visual range end {vis_end}"
            )));
        }
        Ok(Self {
            sys: Span::new(0, sys_end),
            vis: Span::new(sys_end, vis_end),
            instr: Span::new(vis_end, prompt_len),
            resp_start: prompt_len,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.resp_start
    }

    /// Checks ordering, disjointness and exact coverage of `[0, resp_start)`.
    pub fn validate(&self) -> Result<()> {
        let spans = [("sys", self.sys), ("vis", self.vis), ("instr", self.instr)];
        for (name, s) in spans {
            if s.start > s.end {
                return Err(Error::Segmentation(format!(
                    "{name} range [{}, {}) is reversed",
                    s.start, s.end
                )));
            }
        }
        if self.sys.start != 0 {
            return Err(Error::Segmentation(
                "system range must start at position 0".into(),
            ));
        }
        if self.sys.end != self.vis.start || self.vis.end != self.instr.start {
            return Err(Error::Segmentation(
                "system, visual and instruction ranges must be adjacent and ordered".into(),
            ));
        }
        if self.instr.end != self.resp_start {
            return Err(Error::Segmentation(format!(
                "instruction range ends at {} but responses start at {}",
                self.instr.end, self.resp_start
            )));
        }
        Ok(())
    }

    /// Validates the layout against a token sequence of length `len`, which
    /// must contain the whole prompt (and may contain teacher-forced responses).
    pub fn validate_for(&self, len: usize) -> Result<()> {
        self.validate()?;
        if self.resp_start > len {
            return Err(Error::Segmentation(format!(
                "layout covers {} prompt positions but only {len} tokens were given",
                self.resp_start
            )));
        }
        Ok(())
    }

    pub fn role(&self, pos: usize) -> TokenRole {
        if self.sys.contains(pos) {
            TokenRole::System
        } else if self.vis.contains(pos) {
            TokenRole::Visual
        } else if self.instr.contains(pos) {
            TokenRole::Instruction
        } else {
            TokenRole::Response
        }
    }

    /// Instruction or response position.
    pub fn is_text(&self, pos: usize) -> bool {
        self.instr.contains(pos) || pos >= self.resp_start
    }

    pub fn in_group(&self, group: TokenGroup, pos: usize) -> bool {
        match group {
            TokenGroup::System => self.sys.contains(pos),
            TokenGroup::Visual => self.vis.contains(pos),
            TokenGroup::Text => self.is_text(pos),
        }
    }

    /// Positions of `group` below `len`, as at most two contiguous spans.
    pub fn group_spans(&self, group: TokenGroup, len: usize) -> [Span; 2] {
        match group {
            TokenGroup::System => [self.sys.clamp_to(len), Span::default()],
            TokenGroup::Visual => [self.vis.clamp_to(len), Span::default()],
            TokenGroup::Text => [
                self.instr.clamp_to(len),
                Span::new(self.resp_start.min(len), len),
            ],
        }
    }
}

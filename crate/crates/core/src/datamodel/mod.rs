//! Shared record types, their invariant checks, and the JSONL wire formats.
//!
//! Log-probabilities are natural-log (nats). Traces cover response tokens only;
//! query tokens are never scored.

mod config;
mod jsonl;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::alignment::Normalizer;
use crate::error::{Error, Result};

pub use config::{PipelineConfig, RougeSetting};
pub use jsonl::{
    read_jsonl, read_masked_dataset, to_canonical_line, write_jsonl, write_masked_dataset,
    JsonlReader, JsonlWriter, FORMAT_VERSION,
};

/// One response token with both scorer roles' log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub logp_amateur: f64,
    pub logp_expert: f64,
    pub token_id: u32,
    pub token_text: String,
}

/// A synthetic (query, response) pair scored token by token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrace {
    pub query_text: String,
    pub response_text: String,
    pub sample_id: String,
    pub tokens: Vec<TokenRecord>,
}

/// Per-token excess scores of one trace and their arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcessReport {
    pub mean_score: f64,
    pub sample_id: String,
    pub scores: Vec<f64>,
}

impl ExcessReport {
    /// Checks finiteness and that `mean_score` agrees with `scores`.
    pub fn check(&self) -> Result<()> {
        let invalid = |reason: String| Error::InvalidRecord {
            sample_id: self.sample_id.clone(),
            reason,
        };
        if self.scores.is_empty() {
            return Err(invalid("empty score list".into()));
        }
        if let Some(i) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(invalid(format!("non-finite score at {i}")));
        }
        let recomputed = crate::excess::left_to_right_mean(&self.scores);
        let tol = 1e-12 * recomputed.abs().max(self.mean_score.abs()).max(f64::MIN_POSITIVE);
        if (recomputed - self.mean_score).abs() > tol {
            return Err(invalid(format!(
                "mean_score {} disagrees with recomputed mean {recomputed}",
                self.mean_score
            )));
        }
        Ok(())
    }
}

/// Per-token keep decision (binary) or keep-score (fractional).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMask {
    pub binary: bool,
    pub keep: Vec<f64>,
    pub sample_id: String,
}

impl TokenMask {
    pub fn from_bools(sample_id: impl Into<String>, keep: &[bool]) -> Self {
        TokenMask {
            binary: true,
            keep: keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
            sample_id: sample_id.into(),
        }
    }

    /// Builds a mask from scores in `[0, 1]`; `binary` is derived from the values.
    pub fn from_scores(sample_id: impl Into<String>, keep: Vec<f64>) -> Result<Self> {
        let sample_id = sample_id.into();
        if let Some(i) = keep
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::InvalidRecord {
                sample_id,
                reason: format!("mask value {} at {i} is outside [0, 1]", keep[i]),
            });
        }
        let binary = keep.iter().all(|&v| v == 0.0 || v == 1.0);
        Ok(TokenMask {
            binary,
            keep,
            sample_id,
        })
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// Number of positions with a strictly positive keep value.
    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.keep[i] > 0.0
    }

    pub fn check(&self) -> Result<()> {
        let invalid = |reason: String| Error::InvalidRecord {
            sample_id: self.sample_id.clone(),
            reason,
        };
        for (i, &v) in self.keep.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("mask value {v} at {i} is outside [0, 1]")));
            }
            if self.binary && v != 0.0 && v != 1.0 {
                return Err(invalid(format!("binary mask has value {v} at {i}")));
            }
        }
        Ok(())
    }
}

/// Half-open token index range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignRule {
    OneToOne,
    OneToMany,
    ManyToOne,
    ManyToMany,
}

impl AlignRule {
    /// Tag implied by the widths of a source/target span pair.
    pub fn from_widths(source: usize, target: usize) -> Self {
        match (source, target) {
            (1, 1) => AlignRule::OneToOne,
            (1, _) => AlignRule::OneToMany,
            (_, 1) => AlignRule::ManyToOne,
            _ => AlignRule::ManyToMany,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanPair {
    pub rule: AlignRule,
    pub source: Span,
    pub target: Span,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAlignment {
    pub pairs: Vec<SpanPair>,
}

impl SpanAlignment {
    pub fn source_len(&self) -> usize {
        self.pairs.last().map_or(0, |p| p.source.end)
    }

    pub fn target_len(&self) -> usize {
        self.pairs.last().map_or(0, |p| p.target.end)
    }

    /// Verifies that both sides partition `[0, len)` with non-empty contiguous
    /// spans and that every rule tag matches its span widths.
    pub fn check_partition(&self, source_len: usize, target_len: usize) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(format!("span alignment: {m}")));
        let (mut s, mut t) = (0, 0);
        for (k, p) in self.pairs.iter().enumerate() {
            if p.source.start != s || p.target.start != t {
                return fail(format!("pair {k} is not contiguous with its predecessor"));
            }
            if p.source.is_empty() || p.target.is_empty() {
                return fail(format!("pair {k} has an empty span"));
            }
            if p.rule != AlignRule::from_widths(p.source.len(), p.target.len()) {
                return fail(format!("pair {k} rule {:?} does not match widths", p.rule));
            }
            s = p.source.end;
            t = p.target.end;
        }
        if s != source_len || t != target_len {
            return fail(format!(
                "covers [0,{s}) x [0,{t}), expected [0,{source_len}) x [0,{target_len})"
            ));
        }
        Ok(())
    }
}

/// One training record in target-tokenizer space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedRecord {
    pub mask: TokenMask,
    pub query_text: String,
    pub response_text: String,
    pub sample_id: String,
    pub token_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub k_percent: f64,
    pub m_kept: usize,
    pub source_model_tag: String,
    pub target_tokenizer_tag: String,
}

/// Filtered samples with binary token masks. Consumers must zero the loss at
/// every mask-0 position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedDataset {
    pub meta: DatasetMeta,
    pub records: Vec<MaskedRecord>,
}

impl MaskedDataset {
    pub fn check(&self) -> Result<()> {
        if !(self.meta.k_percent > 0.0 && self.meta.k_percent <= 100.0) {
            return Err(Error::InvalidArgument(format!(
                "k_percent {} outside (0, 100]",
                self.meta.k_percent
            )));
        }
        if self.meta.m_kept != self.records.len() {
            return Err(Error::InvalidArgument(format!(
                "m_kept {} but {} records",
                self.meta.m_kept,
                self.records.len()
            )));
        }
        ensure_unique_ids(self.records.iter().map(|r| r.sample_id.as_str()))?;
        for r in &self.records {
            let invalid = |reason: String| Error::InvalidRecord {
                sample_id: r.sample_id.clone(),
                reason,
            };
            r.mask.check()?;
            if r.mask.sample_id != r.sample_id {
                return Err(invalid(format!("mask belongs to `{}`", r.mask.sample_id)));
            }
            if !r.mask.binary {
                return Err(invalid("mask is not binary".into()));
            }
            if r.mask.len() != r.token_ids.len() {
                return Err(invalid(format!(
                    "mask length {} != token count {}",
                    r.mask.len(),
                    r.token_ids.len()
                )));
            }
            if r.mask.kept_count() == 0 {
                return Err(invalid("mask keeps no tokens".into()));
            }
        }
        Ok(())
    }

    pub fn tokens_kept(&self) -> usize {
        self.records.iter().map(|r| r.mask.kept_count()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    EmptyResponse,
    EmptySampleId,
    NonFiniteLogp,
    PositiveLogp,
    TextMismatch,
}

/// A single failed trace invariant, optionally pinned to a token index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub index: Option<usize>,
}

impl Violation {
    pub fn message(&self) -> &'static str {
        match self.kind {
            ViolationKind::EmptyResponse => "empty response",
            ViolationKind::EmptySampleId => "empty sample_id",
            ViolationKind::NonFiniteLogp => "non-finite logp",
            ViolationKind::PositiveLogp => "positive logp",
            ViolationKind::TextMismatch => "token text does not reproduce response",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "{} at token {i}", self.message()),
            None => f.write_str(self.message()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Invalid(Vec<Violation>),
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }

    pub fn violations(&self) -> &[Violation] {
        match self {
            Verdict::Ok => &[],
            Verdict::Invalid(v) => v,
        }
    }

    pub fn into_result(self, sample_id: &str) -> Result<()> {
        match self {
            Verdict::Ok => Ok(()),
            Verdict::Invalid(violations) => Err(Error::InvalidTrace {
                sample_id: sample_id.to_string(),
                violations,
            }),
        }
    }
}

/// Checks every `ScoredTrace` invariant under the default normalizer.
pub fn validate_trace(trace: &ScoredTrace) -> Verdict {
    validate_trace_with(trace, &Normalizer::default())
}

pub fn validate_trace_with(trace: &ScoredTrace, norm: &Normalizer) -> Verdict {
    let mut out = Vec::new();
    if trace.sample_id.is_empty() {
        out.push(Violation {
            kind: ViolationKind::EmptySampleId,
            index: None,
        });
    }
    if trace.tokens.is_empty() {
        out.push(Violation {
            kind: ViolationKind::EmptyResponse,
            index: None,
        });
    }
    for (i, t) in trace.tokens.iter().enumerate() {
        if !t.logp_amateur.is_finite() || !t.logp_expert.is_finite() {
            out.push(Violation {
                kind: ViolationKind::NonFiniteLogp,
                index: Some(i),
            });
        } else if t.logp_amateur > 0.0 || t.logp_expert > 0.0 {
            out.push(Violation {
                kind: ViolationKind::PositiveLogp,
                index: Some(i),
            });
        }
    }
    if !trace.tokens.is_empty() {
        let joined: String = trace.tokens.iter().map(|t| t.token_text.as_str()).collect();
        if norm.normalize(&joined) != norm.normalize(&trace.response_text) {
            out.push(Violation {
                kind: ViolationKind::TextMismatch,
                index: None,
            });
        }
    }
    if out.is_empty() {
        Verdict::Ok
    } else {
        Verdict::Invalid(out)
    }
}

/// Errors with the first repeated id.
pub fn ensure_unique_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateSampleId(id.to_string()));
        }
    }
    Ok(())
}

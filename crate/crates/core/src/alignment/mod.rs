//! Cross-tokenizer mask transfer.
//!
//! Two tokenizations of the same text are partitioned into matching spans by
//! a dual-pointer scan: the source side grows one token at a time while the
//! target side extends until the normalized decoded segments agree. Binary
//! source masks are then averaged per span, spread over the span's target
//! tokens, and re-thresholded with the same top-k% rule used for tokens.

mod normalize;
mod tokenizer;

use log::warn;

use crate::datamodel::{
    AlignRule, DatasetMeta, MaskedDataset, MaskedRecord, Span, SpanAlignment, SpanPair, TokenMask,
};
use crate::error::{Error, Result};
use crate::filtering::{select_top_k, RankPolicy};

pub use normalize::{NormRule, Normalizer, SPACE_MARKERS};
pub use tokenizer::{
    tokenizer_by_tag, toy_alphabet, Tokenizer, TokenizerHandle, VocabTokenizer, BOUNDARY_ID,
    TOY_CHAR_TAG, TOY_MERGE_TAG,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AlignOptions {
    /// Fail instead of emitting a trailing many-to-many pair when no match is
    /// found before a side runs out.
    pub strict: bool,
}

fn pieces<'t>(ids: &[u32], tok: &'t dyn Tokenizer) -> Result<Vec<&'t str>> {
    ids.iter()
        .map(|&id| {
            tok.piece_text(id).ok_or_else(|| Error::Tokenizer {
                tag: tok.tag().to_string(),
                message: format!("unknown token id {id}"),
            })
        })
        .collect()
}

fn first_divergence(a: &str, b: &str) -> usize {
    a.bytes()
        .zip(b.bytes())
        .position(|(x, y)| x != y)
        .unwrap_or(a.len().min(b.len()))
}

fn pair(source: Span, target: Span) -> SpanPair {
    SpanPair {
        rule: AlignRule::from_widths(source.len(), target.len()),
        source,
        target,
    }
}

/// Partitions both token sequences into spans with equal normalized text.
pub fn align_spans(
    source: &[u32],
    target: &[u32],
    src: &dyn Tokenizer,
    tgt: &dyn Tokenizer,
    norm: &Normalizer,
    opts: AlignOptions,
) -> Result<SpanAlignment> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot align an empty token sequence".into(),
        ));
    }
    let sp = pieces(source, src)?;
    let tp = pieces(target, tgt)?;
    let full_s = norm.normalize(&sp.concat());
    let full_t = norm.normalize(&tp.concat());
    if full_s != full_t {
        return Err(Error::TextMismatch {
            offset: first_divergence(&full_s, &full_t),
        });
    }

    let (ns, nt) = (sp.len(), tp.len());
    let mut pairs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < ns && j < nt {
        let (s0, t0) = (i, j);
        let mut s_text = String::from(sp[i]);
        let mut t_text = String::from(tp[j]);
        i += 1;
        j += 1;
        let matched = loop {
            let a = norm.normalize(&s_text);
            let b = norm.normalize(&t_text);
            if a == b {
                break true;
            }
            // Grow the shorter side; on equal length grow the source first.
            let grow_source = match a.len().cmp(&b.len()) {
                std::cmp::Ordering::Greater => j >= nt,
                _ => i < ns,
            };
            if grow_source && i < ns {
                s_text.push_str(sp[i]);
                i += 1;
            } else if j < nt {
                t_text.push_str(tp[j]);
                j += 1;
            } else {
                break false;
            }
        };
        if !matched {
            if opts.strict {
                return Err(Error::AlignmentExhausted {
                    source_pos: s0,
                    target_pos: t0,
                });
            }
            pairs.push(pair(Span::new(s0, ns), Span::new(t0, nt)));
            i = ns;
            j = nt;
            break;
        }
        pairs.push(pair(Span::new(s0, i), Span::new(t0, j)));
    }
    // Whatever is left on one side decodes to empty text; fold it into the
    // final pair so both partitions stay complete.
    if i < ns || j < nt {
        let last = pairs.pop().expect("loop runs at least once");
        pairs.push(pair(
            Span::new(last.source.start, ns),
            Span::new(last.target.start, nt),
        ));
    }
    Ok(SpanAlignment { pairs })
}

/// Spreads a binary source mask over target tokens: each target token gets
/// the mean of its span's source values (copy, replicate, average, or
/// average-and-replicate depending on span widths).
pub fn propagate_mask(alignment: &SpanAlignment, source_mask: &TokenMask) -> Result<TokenMask> {
    if source_mask.len() != alignment.source_len() {
        return Err(Error::InvalidArgument(format!(
            "mask length {} != aligned source length {}",
            source_mask.len(),
            alignment.source_len()
        )));
    }
    if !source_mask.binary {
        return Err(Error::InvalidArgument("source mask must be binary".into()));
    }
    let mut out = vec![0.0; alignment.target_len()];
    for p in &alignment.pairs {
        let vals = &source_mask.keep[p.source.range()];
        let value = match p.rule {
            AlignRule::OneToOne | AlignRule::OneToMany => vals[0],
            AlignRule::ManyToOne | AlignRule::ManyToMany => {
                let mut sum = 0.0;
                for &v in vals {
                    sum += v;
                }
                sum / vals.len() as f64
            }
        };
        out[p.target.range()].fill(value);
    }
    TokenMask::from_scores(source_mask.sample_id.clone(), out)
}

/// Binary top-k% selection over propagated fractional scores.
pub fn reselect_topk(fractional: &TokenMask, k_percent: f64) -> Result<TokenMask> {
    reselect_topk_with(fractional, k_percent, RankPolicy::default())
}

pub fn reselect_topk_with(
    fractional: &TokenMask,
    k_percent: f64,
    policy: RankPolicy,
) -> Result<TokenMask> {
    fractional.check()?;
    select_top_k(&fractional.sample_id, &fractional.keep, k_percent, policy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnError {
    Skip,
    Abort,
}

#[derive(Debug, Clone)]
pub struct AlignDatasetOptions {
    pub on_error: OnError,
    pub align: AlignOptions,
    pub policy: RankPolicy,
    pub normalizer: Normalizer,
}

impl Default for AlignDatasetOptions {
    fn default() -> Self {
        AlignDatasetOptions {
            on_error: OnError::Skip,
            align: AlignOptions::default(),
            policy: RankPolicy::default(),
            normalizer: Normalizer::default(),
        }
    }
}

#[derive(Debug)]
pub struct AlignOutcome {
    pub dataset: MaskedDataset,
    /// Records dropped under [`OnError::Skip`], with the reason.
    pub skipped: Vec<(String, Error)>,
}

/// Re-expresses one source-space record in target-token space.
pub fn align_record(
    record: &MaskedRecord,
    src: &dyn Tokenizer,
    tgt: &dyn Tokenizer,
    k_percent: f64,
    opts: &AlignDatasetOptions,
) -> Result<MaskedRecord> {
    let target_ids = tgt.tokenize(&record.response_text)?;
    let alignment = align_spans(
        &record.token_ids,
        &target_ids,
        src,
        tgt,
        &opts.normalizer,
        opts.align,
    )?;
    let fractional = propagate_mask(&alignment, &record.mask)?;
    let mask = reselect_topk_with(&fractional, k_percent, opts.policy)?;
    if mask.kept_count() == 0 {
        return Err(Error::InvalidRecord {
            sample_id: record.sample_id.clone(),
            reason: "no target token kept".into(),
        });
    }
    Ok(MaskedRecord {
        mask,
        query_text: record.query_text.clone(),
        response_text: record.response_text.clone(),
        sample_id: record.sample_id.clone(),
        token_ids: target_ids,
    })
}

/// Aligns every record of a source-space dataset into target space.
pub fn align_dataset(
    dataset: &MaskedDataset,
    src: &dyn Tokenizer,
    tgt: &dyn Tokenizer,
    k_percent: f64,
    opts: &AlignDatasetOptions,
) -> Result<AlignOutcome> {
    let mut records = Vec::with_capacity(dataset.records.len());
    let mut skipped = Vec::new();
    for r in &dataset.records {
        match align_record(r, src, tgt, k_percent, opts) {
            Ok(rec) => records.push(rec),
            Err(e) => match opts.on_error {
                OnError::Abort => return Err(Error::for_record(&r.sample_id, e)),
                OnError::Skip => {
                    warn!("skipping `{}` during alignment: {e}", r.sample_id);
                    skipped.push((r.sample_id.clone(), e));
                }
            },
        }
    }
    Ok(AlignOutcome {
        dataset: MaskedDataset {
            meta: DatasetMeta {
                k_percent,
                m_kept: records.len(),
                source_model_tag: dataset.meta.source_model_tag.clone(),
                target_tokenizer_tag: tgt.tag().to_string(),
            },
            records,
        },
        skipped,
    })
}

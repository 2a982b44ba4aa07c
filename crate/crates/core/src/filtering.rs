//! Two-stage selection over excess reports: keep the M samples with the
//! largest mean excess, then keep the top k% tokens of each kept sample.
//!
//! Ranking is always descending by score; ties go to the earlier position
//! (tokens) or the earlier input index (samples), so every ordering is total
//! and results are deterministic.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::datamodel::{ensure_unique_ids, ExcessReport, MaskedDataset, TokenMask};
use crate::error::{Error, Result};

/// Token ranking policy. Order and tie-break are fixed; only the floor rule
/// is configurable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankPolicy {
    /// Keep at least one token even when `floor(k% * L)` is zero.
    pub floor_min_one: bool,
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy {
            floor_min_one: true,
        }
    }
}

impl RankPolicy {
    /// `floor(k/100 * L)` exactly as written, without the minimum-one rule.
    pub fn strict() -> Self {
        RankPolicy {
            floor_min_one: false,
        }
    }

    /// Number of tokens kept out of `len` at `k_percent`.
    pub fn keep_count(&self, k_percent: f64, len: usize) -> usize {
        // k * L first keeps integral k exact before the division.
        let n = ((k_percent * len as f64) / 100.0).floor() as usize;
        let n = n.min(len);
        if self.floor_min_one && len > 0 {
            n.max(1)
        } else {
            n
        }
    }
}

fn check_k(k_percent: f64) -> Result<()> {
    if k_percent > 0.0 && k_percent <= 100.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "k_percent {k_percent} outside (0, 100]"
        )))
    }
}

/// Descending by value, ascending by index on ties.
#[inline]
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .expect("scores are finite")
        .then(a.cmp(&b))
}

/// Positions of the `n` highest scores in rank order.
pub fn top_positions(scores: &[f64], n: usize) -> Vec<usize> {
    let n = n.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if n == 0 {
        return Vec::new();
    }
    if n < idx.len() {
        idx.select_nth_unstable_by(n - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(n);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    idx
}

/// Binary mask keeping the top `k_percent` of `scores` under `policy`.
///
/// Shared by token selection on excess scores and target-side re-selection on
/// propagated fractional scores.
pub fn select_top_k(
    sample_id: &str,
    scores: &[f64],
    k_percent: f64,
    policy: RankPolicy,
) -> Result<TokenMask> {
    check_k(k_percent)?;
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidRecord {
            sample_id: sample_id.to_string(),
            reason: format!("non-finite score at {i}"),
        });
    }
    let n = policy.keep_count(k_percent, scores.len());
    let mut keep = vec![false; scores.len()];
    for i in top_positions(scores, n) {
        keep[i] = true;
    }
    Ok(TokenMask::from_bools(sample_id, &keep))
}

pub fn select_tokens(report: &ExcessReport, k_percent: f64) -> Result<TokenMask> {
    select_tokens_with(report, k_percent, RankPolicy::default())
}

pub fn select_tokens_with(
    report: &ExcessReport,
    k_percent: f64,
    policy: RankPolicy,
) -> Result<TokenMask> {
    select_top_k(&report.sample_id, &report.scores, k_percent, policy)
}

/// One entry of the kept set, as written by `titok filter`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptSample {
    pub mean_score: f64,
    pub rank: usize,
    pub sample_id: String,
}

/// The `m` reports with the largest mean excess, best first.
pub fn filter_samples_ranked(reports: &[ExcessReport], m: usize) -> Result<Vec<KeptSample>> {
    if m == 0 {
        return Err(Error::InvalidArgument("M must be positive".into()));
    }
    if m > reports.len() {
        return Err(Error::InvalidArgument(format!(
            "M = {m} exceeds the {} available samples",
            reports.len()
        )));
    }
    ensure_unique_ids(reports.iter().map(|r| r.sample_id.as_str()))?;
    let means: Vec<f64> = reports.iter().map(|r| r.mean_score).collect();
    if let Some(i) = means.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidRecord {
            sample_id: reports[i].sample_id.clone(),
            reason: "non-finite mean_score".into(),
        });
    }
    Ok(top_positions(&means, m)
        .into_iter()
        .enumerate()
        .map(|(rank, i)| KeptSample {
            mean_score: means[i],
            rank,
            sample_id: reports[i].sample_id.clone(),
        })
        .collect())
}

/// Ids of the kept set D_f, best first.
pub fn filter_samples(reports: &[ExcessReport], m: usize) -> Result<Vec<String>> {
    Ok(filter_samples_ranked(reports, m)?
        .into_iter()
        .map(|k| k.sample_id)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskStats {
    pub records: usize,
    pub tokens_total: usize,
    pub tokens_kept: usize,
    /// Per-record keep fraction counts in deciles `[0.0,0.1) .. [0.9,1.0]`.
    /// Empty when there are no records.
    pub keep_fraction_histogram: Vec<usize>,
}

impl MaskStats {
    pub fn keep_fraction(&self) -> f64 {
        if self.tokens_total == 0 {
            0.0
        } else {
            self.tokens_kept as f64 / self.tokens_total as f64
        }
    }
}

pub fn apply_mask_stats(dataset: &MaskedDataset) -> MaskStats {
    let mut stats = MaskStats {
        records: dataset.records.len(),
        tokens_total: 0,
        tokens_kept: 0,
        keep_fraction_histogram: Vec::new(),
    };
    if dataset.records.is_empty() {
        return stats;
    }
    stats.keep_fraction_histogram = vec![0; 10];
    for r in &dataset.records {
        let total = r.mask.len();
        let kept = r.mask.kept_count();
        stats.tokens_total += total;
        stats.tokens_kept += kept;
        // Integer bucket index avoids 0.7 * 10 landing in the wrong decile.
        let bucket = if total == 0 { 0 } else { (kept * 10 / total).min(9) };
        stats.keep_fraction_histogram[bucket] += 1;
    }
    stats
}

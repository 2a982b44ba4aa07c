//! Contrastive excess scores: expert log-probability minus amateur
//! log-probability, per response token, and their per-sample mean.
//!
//! Larger scores mark positions where the adapter adds knowledge the base
//! model lacks. Scores are never clipped or rescaled.

use crate::datamodel::{validate_trace, ExcessReport, ScoredTrace};
use crate::error::{Error, Result};

/// Arithmetic mean with a fixed left-to-right summation order.
pub(crate) fn left_to_right_mean(scores: &[f64]) -> f64 {
    let mut sum = 0.0;
    for &s in scores {
        sum += s;
    }
    sum / scores.len() as f64
}

pub fn excess_scores(trace: &ScoredTrace) -> Result<ExcessReport> {
    validate_trace(trace).into_result(&trace.sample_id)?;
    let scores: Vec<f64> = trace
        .tokens
        .iter()
        .map(|t| t.logp_expert - t.logp_amateur)
        .collect();
    let mean_score = left_to_right_mean(&scores);
    Ok(ExcessReport {
        mean_score,
        sample_id: trace.sample_id.clone(),
        scores,
    })
}

pub fn mean_excess(report: &ExcessReport) -> Result<f64> {
    if report.scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    Ok(left_to_right_mean(&report.scores))
}

/// Scores a batch, preserving input order. Stops at the first invalid trace.
pub fn score_all<'a>(traces: impl IntoIterator<Item = &'a ScoredTrace>) -> Result<Vec<ExcessReport>> {
    traces.into_iter().map(excess_scores).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::TokenRecord;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace(logps: &[(f64, f64)]) -> ScoredTrace {
        ScoredTrace {
            query_text: "q".into(),
            response_text: "x".repeat(logps.len()),
            sample_id: "s".into(),
            tokens: logps
                .iter()
                .map(|&(a, e)| TokenRecord {
                    logp_amateur: a,
                    logp_expert: e,
                    token_id: 7,
                    token_text: "x".into(),
                })
                .collect(),
        }
    }

    #[test]
    fn identical_scorers_give_zero() {
        let r = excess_scores(&trace(&[(-1.0, -1.0), (-3.5, -3.5), (-0.2, -0.2)])).unwrap();
        assert_eq!(r.scores, vec![0.0, 0.0, 0.0]);
        assert_eq!(r.mean_score, 0.0);
    }

    #[test]
    fn direct_substitution() {
        let r = excess_scores(&trace(&[(-2.3, -0.1)])).unwrap();
        assert!((r.scores[0] - 2.2).abs() < 1e-12);
        assert!(r.scores[0] > 0.0);
    }

    #[test]
    fn invalid_trace_is_rejected_with_verdict() {
        let mut t = trace(&[(-1.0, -1.0), (-1.0, f64::NAN)]);
        t.sample_id = "bad".into();
        match excess_scores(&t) {
            Err(Error::InvalidTrace {
                sample_id,
                violations,
            }) => {
                assert_eq!(sample_id, "bad");
                assert_eq!(violations[0].index, Some(1));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mean_examples() {
        let r = |s: Vec<f64>| ExcessReport {
            mean_score: 0.0,
            sample_id: "s".into(),
            scores: s,
        };
        assert_eq!(mean_excess(&r(vec![1.0, 2.0, 3.0])).unwrap(), 2.0);
        assert_eq!(mean_excess(&r(vec![-0.5])).unwrap(), -0.5);
        assert!(matches!(mean_excess(&r(vec![])), Err(Error::EmptyScores)));
        assert_eq!(Error::EmptyScores.to_string(), "empty response has no mean");
    }

    /// Neumaier compensated sum, used as an independent high-precision oracle.
    fn compensated_mean(xs: &[f64]) -> f64 {
        let (mut sum, mut c) = (0.0f64, 0.0f64);
        for &x in xs {
            let t = sum + x;
            if sum.abs() >= x.abs() {
                c += (sum - t) + x;
            } else {
                c += (x - t) + sum;
            }
            sum = t;
        }
        (sum + c) / xs.len() as f64
    }

    #[test]
    fn mean_matches_compensated_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20241019);
        let scores: Vec<f64> = (0..1000).map(|_| rng.gen_range(-12.0..12.0)).collect();
        let report = ExcessReport {
            mean_score: 0.0,
            sample_id: "s".into(),
            scores: scores.clone(),
        };
        let got = mean_excess(&report).unwrap();
        let want = compensated_mean(&scores);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300), "{got} vs {want}");
    }

    proptest! {
        #[test]
        fn shift_invariance(
            logps in prop::collection::vec((-20.0f64..-1.0, -20.0f64..-1.0), 1..30),
            c in -0.9f64..0.9,
        ) {
            let base = excess_scores(&trace(&logps)).unwrap();
            let shifted: Vec<_> = logps.iter().map(|&(a, e)| (a + c, e + c)).collect();
            let moved = excess_scores(&trace(&shifted)).unwrap();
            for (x, y) in base.scores.iter().zip(&moved.scores) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn sign_semantics(a in -30.0f64..0.0, e in -30.0f64..0.0) {
            let s = excess_scores(&trace(&[(a, e)])).unwrap().scores[0];
            prop_assert_eq!(s > 0.0, e > a);
        }

        #[test]
        fn raising_one_score_raises_mean(
            scores in prop::collection::vec(-5.0f64..5.0, 1..50),
            idx in any::<prop::sample::Index>(),
            bump in 1e-3f64..3.0,
        ) {
            let r = ExcessReport { mean_score: 0.0, sample_id: "s".into(), scores: scores.clone() };
            let before = mean_excess(&r).unwrap();
            let mut up = scores;
            let i = idx.index(up.len());
            up[i] += bump;
            let after = mean_excess(&ExcessReport { scores: up, ..r }).unwrap();
            prop_assert!(after > before);
        }
    }
}

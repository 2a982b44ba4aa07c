//! Synthetic pool construction: query-first, label-second generation through
//! a pluggable endpoint, gated by deduplication and ROUGE-L diversity.
//!
//! Admission is a serialized gate ordered by attempt index, so a candidate's
//! verdict depends only on what was accepted before it and replaying the
//! rejection log reproduces the pool.

mod protocol;
mod rouge;
mod template;

use std::collections::{BTreeMap, HashMap};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::datamodel::{PipelineConfig, RougeSetting};
use crate::error::{Error, Result};

pub use protocol::{
    serve_lines, FinishReason, GenRequest, GenResponse, GenRole, Generator, SubprocessGenerator,
};
pub use rouge::{lcs_len, rouge_l, rouge_l_words, rouge_words};
pub use template::{truncate_at_stop, PromptTemplate, RenderedPrompt};

/// Tasks whose queries are too formulaic for a ROUGE-L gate; only
/// deduplication applies to them.
pub const NO_ROUGE_TASKS: [&str; 18] = [
    "bbh_boolean_expressions",
    "bbh_date_understanding",
    "bbh_disambiguation_qa",
    "bbh_geometric_shapes",
    "bbh_logical_deduction_three_objects",
    "bbh_multistep_arithmetic_two",
    "bbh_navigate",
    "bbh_object_counting",
    "bbh_penguins_in_a_table",
    "bbh_reasoning_about_colored_objects",
    "bbh_salient_translation_error_detection",
    "bbh_snarks",
    "bbh_temporal_sequences",
    "bbh_tracking_shuffled_objects_three_objects",
    "bbh_web_of_lies",
    "high_school_world_history",
    "high_school_us_history",
    "high_school_european_history",
];

pub const DEFAULT_ROUGE_THRESHOLD: f64 = 0.7;

/// ROUGE gate for `task`: disabled for tasks on the no-ROUGE list.
pub fn rouge_setting_for_task(task: &str, configured: RougeSetting) -> RougeSetting {
    if NO_ROUGE_TASKS.contains(&task) {
        RougeSetting::Disabled
    } else {
        configured
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Duplicate,
    Rouge,
    EmptyQuery,
    EmptyLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdmitVerdict {
    Accept,
    Reject {
        reason: RejectReason,
        /// Highest ROUGE-L against the accepted set, when the gate ran.
        rouge: Option<f64>,
        /// Index into the accepted set of the offending query.
        against: Option<usize>,
    },
}

impl AdmitVerdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, AdmitVerdict::Accept)
    }

    pub fn reason(&self) -> Option<RejectReason> {
        match self {
            AdmitVerdict::Accept => None,
            AdmitVerdict::Reject { reason, .. } => Some(*reason),
        }
    }
}

/// Stateful admission gate over the accepted queries so far.
#[derive(Debug, Clone)]
pub struct AdmissionGate {
    threshold: RougeSetting,
    dedup: bool,
    reject_at_threshold: bool,
    accepted: Vec<Vec<String>>,
    seen: HashMap<String, usize>,
}

impl AdmissionGate {
    pub fn new(threshold: RougeSetting, dedup: bool) -> Self {
        AdmissionGate {
            threshold,
            dedup,
            reject_at_threshold: false,
            accepted: Vec::new(),
            seen: HashMap::new(),
        }
    }

    /// Rejects at `score >= threshold` instead of strictly above it.
    pub fn reject_at_threshold(mut self, yes: bool) -> Self {
        self.reject_at_threshold = yes;
        self
    }

    pub fn accepted_len(&self) -> usize {
        self.accepted.len()
    }

    pub fn check(&self, candidate: &str) -> AdmitVerdict {
        let words = rouge_words(candidate);
        if candidate.trim().is_empty() || words.is_empty() {
            return AdmitVerdict::Reject {
                reason: RejectReason::EmptyQuery,
                rouge: None,
                against: None,
            };
        }
        if self.dedup {
            if let Some(&idx) = self.seen.get(&words.join(" ")) {
                return AdmitVerdict::Reject {
                    reason: RejectReason::Duplicate,
                    rouge: None,
                    against: Some(idx),
                };
            }
        }
        if let RougeSetting::Threshold(t) = self.threshold {
            let mut best: Option<(usize, f64)> = None;
            for (i, w) in self.accepted.iter().enumerate() {
                let s = rouge_l_words(&words, w);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((i, s));
                }
            }
            if let Some((i, s)) = best {
                let over = if self.reject_at_threshold { s >= t } else { s > t };
                if over {
                    return AdmitVerdict::Reject {
                        reason: RejectReason::Rouge,
                        rouge: Some(s),
                        against: Some(i),
                    };
                }
            }
        }
        AdmitVerdict::Accept
    }

    /// Records `candidate` as accepted without re-checking it.
    pub fn commit(&mut self, candidate: &str) {
        let words = rouge_words(candidate);
        self.seen.entry(words.join(" ")).or_insert(self.accepted.len());
        self.accepted.push(words);
    }

    pub fn admit(&mut self, candidate: &str) -> AdmitVerdict {
        let v = self.check(candidate);
        if v.is_accept() {
            self.commit(candidate);
        }
        v
    }
}

/// Stateless admission check against an explicit accepted list.
pub fn admit_query(
    candidate: &str,
    accepted_so_far: &[String],
    threshold: RougeSetting,
    dedup: bool,
) -> AdmitVerdict {
    let mut gate = AdmissionGate::new(threshold, dedup);
    for a in accepted_so_far {
        gate.commit(a);
    }
    gate.check(candidate)
}

/// One few-shot exemplar from the original training data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedExample {
    pub label: String,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub attempt: usize,
    pub label: String,
    pub label_seed: u64,
    pub query: String,
    pub query_seed: u64,
    pub sample_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectRecord {
    /// `sample_id` of the accepted query this candidate collided with.
    pub against: Option<String>,
    pub attempt: usize,
    pub candidate: String,
    pub reason: RejectReason,
    pub rouge: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pool {
    pub entries: Vec<PoolEntry>,
    pub rejects: Vec<RejectRecord>,
    pub attempts: usize,
}

/// A failed pool build together with everything admitted before the failure.
#[derive(Debug)]
pub struct PoolFailure {
    pub error: Error,
    pub partial: Pool,
}

impl std::fmt::Display for PoolFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} ({} samples admitted before failure)",
            self.error,
            self.partial.entries.len()
        )
    }
}

/// splitmix64 finalizer; decorrelates per-request seeds from the run seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const QUERY_STREAM: u64 = 1;
const LABEL_STREAM: u64 = 2;

/// Largest `example_N` index referenced by a template.
fn max_example_slot(t: &PromptTemplate) -> usize {
    t.placeholders()
        .iter()
        .filter_map(|p| {
            p.strip_prefix("example_label_")
                .or_else(|| p.strip_prefix("example_"))
                .and_then(|n| n.parse::<usize>().ok())
        })
        .max()
        .unwrap_or(0)
}

/// Binds `example_i`/`example_label_i` (cycling through the seeds when the
/// template has more slots than seeds) and `seed_count`.
fn seed_bindings(seeds: &[SeedExample], slots: usize) -> BTreeMap<String, String> {
    let mut b = BTreeMap::new();
    let n = seeds.len().max(slots);
    for i in 0..n {
        let s = &seeds[i % seeds.len()];
        b.insert(format!("example_{}", i + 1), s.query.clone());
        b.insert(format!("example_label_{}", i + 1), s.label.clone());
    }
    b.insert("seed_count".into(), seeds.len().to_string());
    b
}

fn join_prompt(p: &RenderedPrompt) -> String {
    if p.system.is_empty() {
        p.user.clone()
    } else {
        format!("{}\n\n{}", p.system, p.user)
    }
}

pub struct PoolBuilder<'a> {
    pub config: &'a PipelineConfig,
    pub query_template: PromptTemplate,
    pub label_template: PromptTemplate,
    pub few_shot: &'a [SeedExample],
}

impl<'a> PoolBuilder<'a> {
    pub fn new(config: &'a PipelineConfig, few_shot: &'a [SeedExample]) -> Self {
        PoolBuilder {
            config,
            query_template: PromptTemplate::default_query(),
            label_template: PromptTemplate::default_label(),
            few_shot,
        }
    }

    fn request(&self, role: GenRole, index: usize, prompt: &RenderedPrompt, stop: &[String]) -> GenRequest {
        let (stream, max_tokens) = match role {
            GenRole::Query => (QUERY_STREAM, self.config.max_query_tokens),
            GenRole::Label => (LABEL_STREAM, self.config.max_label_tokens),
        };
        GenRequest {
            greedy: self.config.greedy,
            max_tokens,
            prompt: join_prompt(prompt),
            request_index: index,
            role,
            seed: derive_seed(self.config.seed, stream, index as u64),
            stop_markers: stop.to_vec(),
            system: prompt.system.clone(),
            temperature: self.config.temperature,
            top_p: self.config.top_p,
        }
    }

    fn call(&self, generator: &mut dyn Generator, req: &GenRequest) -> Result<String> {
        let mut last = String::new();
        for attempt in 0..=self.config.generator_retries {
            match generator.generate(req) {
                Ok(resp) if resp.finish_reason != FinishReason::Error => {
                    return Ok(truncate_at_stop(&resp.text, &req.stop_markers).trim().to_string());
                }
                Ok(resp) => last = resp.error.unwrap_or_else(|| "endpoint error".into()),
                Err(e) => last = e.to_string(),
            }
            warn!(
                "generator request {} ({:?}) failed on try {}: {last}",
                req.request_index,
                req.role,
                attempt + 1
            );
        }
        Err(Error::Generator(format!(
            "request {} failed after {} tries: {last}",
            req.request_index,
            self.config.generator_retries + 1
        )))
    }

    /// Generates until `pool_size` pairs are admitted.
    ///
    /// Labels come from `generator`, conditioned on the accepted query.
    /// Queries come from `query_gen` when given, else from `generator` too.
    pub fn build(
        &self,
        generator: &mut dyn Generator,
        mut query_gen: Option<&mut dyn Generator>,
    ) -> std::result::Result<Pool, PoolFailure> {
        let mut pool = Pool::default();
        let fail = |error: Error, pool: Pool| Err(PoolFailure {
            error,
            partial: pool,
        });
        if self.few_shot.is_empty() {
            return fail(Error::InvalidArgument("few-shot seed list is empty".into()), pool);
        }
        let cfg = self.config;
        let target = cfg.pool_size;
        let budget = cfg.attempt_factor.saturating_mul(target);
        let mut gate = AdmissionGate::new(
            rouge_setting_for_task(&cfg.task, cfg.rouge_threshold),
            cfg.dedup,
        )
        .reject_at_threshold(cfg.rouge_reject_at_threshold);

        let q_slots = max_example_slot(&self.query_template);
        let l_slots = max_example_slot(&self.label_template);
        let q_bind = seed_bindings(self.few_shot, q_slots);
        let q_prompt = match self.query_template.render(&q_bind) {
            Ok(p) => p,
            Err(e) => return fail(e, pool),
        };
        let l_bind_base = seed_bindings(self.few_shot, l_slots);

        let mut attempt = 0;
        while pool.entries.len() < target {
            if attempt >= budget {
                let count = |r: RejectReason| pool.rejects.iter().filter(|x| x.reason == r).count();
                let err = Error::Starvation {
                    target,
                    accepted: pool.entries.len(),
                    attempts: attempt,
                    duplicate: count(RejectReason::Duplicate),
                    rouge: count(RejectReason::Rouge),
                    empty: count(RejectReason::EmptyQuery) + count(RejectReason::EmptyLabel),
                };
                return fail(err, pool);
            }
            let qreq = self.request(GenRole::Query, attempt, &q_prompt, &self.query_template.stop_markers);
            let qg: &mut dyn Generator = match query_gen.as_deref_mut() {
                Some(g) => g,
                None => &mut *generator,
            };
            let query = match self.call(qg, &qreq) {
                Ok(q) => q,
                Err(e) => return fail(e, pool),
            };
            pool.attempts = attempt + 1;
            let verdict = gate.check(&query);
            if let AdmitVerdict::Reject {
                reason,
                rouge,
                against,
            } = verdict
            {
                debug!("attempt {attempt}: rejected ({reason:?})");
                pool.rejects.push(RejectRecord {
                    against: against.map(|i| pool.entries[i].sample_id.clone()),
                    attempt,
                    candidate: query,
                    reason,
                    rouge,
                    seed: qreq.seed,
                });
                attempt += 1;
                continue;
            }
            let mut l_bind = l_bind_base.clone();
            l_bind.insert("query".into(), query.clone());
            let l_prompt = match self.label_template.render(&l_bind) {
                Ok(p) => p,
                Err(e) => return fail(e, pool),
            };
            let lreq = self.request(GenRole::Label, attempt, &l_prompt, &self.label_template.stop_markers);
            let label = match self.call(generator, &lreq) {
                Ok(l) => l,
                Err(e) => return fail(e, pool),
            };
            if label.is_empty() {
                pool.rejects.push(RejectRecord {
                    against: None,
                    attempt,
                    candidate: query,
                    reason: RejectReason::EmptyLabel,
                    rouge: None,
                    seed: lreq.seed,
                });
                attempt += 1;
                continue;
            }
            gate.commit(&query);
            let sample_id = format!("{}-{:05}", cfg.task, pool.entries.len());
            pool.entries.push(PoolEntry {
                attempt,
                label,
                label_seed: lreq.seed,
                query,
                query_seed: qreq.seed,
                sample_id,
            });
            attempt += 1;
        }
        Ok(pool)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeds() -> Vec<SeedExample> {
        (0..5)
            .map(|i| SeedExample {
                label: format!("label {i}"),
                query: format!("seed query number {i}"),
            })
            .collect()
    }

    fn cfg(n: usize) -> PipelineConfig {
        PipelineConfig {
            pool_size: n,
            keep_m: n.min(1).max(1),
            ..Default::default()
        }
    }

    fn scripted(outputs: Vec<&'static str>) -> impl FnMut(&GenRequest) -> Result<GenResponse> {
        let mut i = 0;
        move |r: &GenRequest| {
            let text = outputs[i % outputs.len()].to_string();
            i += 1;
            Ok(GenResponse {
                error: None,
                finish_reason: FinishReason::Stop,
                request_index: r.request_index,
                seed: r.seed,
                text,
            })
        }
    }

    fn echo_label() -> impl FnMut(&GenRequest) -> Result<GenResponse> {
        |r: &GenRequest| {
            Ok(GenResponse {
                error: None,
                finish_reason: FinishReason::Stop,
                request_index: r.request_index,
                seed: r.seed,
                text: format!("answer {}", r.request_index),
            })
        }
    }

    #[test]
    fn admission_examples() {
        let acc = vec!["the quick brown fox".to_string()];
        let t = RougeSetting::Threshold(0.7);
        assert_eq!(
            admit_query("The quick brown fox!", &acc, t, true).reason(),
            Some(RejectReason::Duplicate)
        );
        assert!(admit_query("a totally different line", &acc, t, true).is_accept());
        assert!(admit_query("the quick brown fox", &acc, RougeSetting::Disabled, false).is_accept());
    }

    #[test]
    fn threshold_boundary_is_strict() {
        // 7 shared words out of 10 on each side: ROUGE-L exactly 0.7.
        let reference = "w1 w2 w3 w4 w5 w6 w7 a b c".to_string();
        let at = "w1 w2 w3 w4 w5 w6 w7 x y z";
        assert_eq!(rouge_l(at, &reference), 0.7);
        let t = RougeSetting::Threshold(0.7);
        assert!(admit_query(at, std::slice::from_ref(&reference), t, true).is_accept());
        let gate = {
            let mut g = AdmissionGate::new(t, true).reject_at_threshold(true);
            g.commit(&reference);
            g
        };
        assert_eq!(gate.check(at).reason(), Some(RejectReason::Rouge));
        // 0.69-ish: below the threshold either way.
        let below = "w1 w2 w3 w4 w5 w6 x y z q r";
        assert!(rouge_l(below, &reference) < 0.7);
        assert!(admit_query(below, std::slice::from_ref(&reference), t, true).is_accept());
    }

    #[test]
    fn four_distinct_outputs_fill_a_pool_of_four() {
        let c = cfg(4);
        let s = seeds();
        let b = PoolBuilder::new(&c, &s);
        let mut q = scripted(vec!["alpha one", "beta two", "gamma three", "delta four"]);
        let mut l = echo_label();
        let pool = b.build(&mut l, Some(&mut q)).unwrap();
        assert_eq!(pool.entries.len(), 4);
        assert!(pool.rejects.is_empty());
        assert_eq!(pool.entries[3].label, "answer 3");
        assert_eq!(pool.entries[0].sample_id, "toy-00000");
    }

    #[test]
    fn constant_generator_starves() {
        let c = cfg(4);
        let s = seeds();
        let b = PoolBuilder::new(&c, &s);
        let mut q = scripted(vec!["same thing"]);
        let mut l = echo_label();
        let err = b.build(&mut l, Some(&mut q)).unwrap_err();
        assert!(matches!(
            err.error,
            Error::Starvation {
                accepted: 1,
                attempts: 80,
                duplicate: 79,
                ..
            }
        ));
        assert_eq!(err.partial.entries.len(), 1);
    }

    #[test]
    fn failing_generator_aborts_with_partial_pool() {
        let c = PipelineConfig {
            generator_retries: 2,
            ..cfg(3)
        };
        let s = seeds();
        let b = PoolBuilder::new(&c, &s);
        let mut calls = 0;
        let mut q = |r: &GenRequest| {
            calls += 1;
            if r.request_index == 0 {
                Ok(GenResponse {
                    error: None,
                    finish_reason: FinishReason::Stop,
                    request_index: 0,
                    seed: r.seed,
                    text: "first".into(),
                })
            } else {
                Err(Error::Generator("down".into()))
            }
        };
        let mut l = echo_label();
        let err = b.build(&mut l, Some(&mut q)).unwrap_err();
        assert!(matches!(err.error, Error::Generator(_)));
        assert_eq!(err.partial.entries.len(), 1);
        drop(b);
        assert_eq!(calls, 1 + 3);
    }

    #[test]
    fn no_rouge_tasks_only_dedup() {
        assert_eq!(
            rouge_setting_for_task("bbh_navigate", RougeSetting::Threshold(0.7)),
            RougeSetting::Disabled
        );
        assert_eq!(
            rouge_setting_for_task("bbh_word_sorting", RougeSetting::Threshold(0.7)),
            RougeSetting::Threshold(0.7)
        );
        let c = PipelineConfig {
            task: "bbh_navigate".into(),
            ..cfg(2)
        };
        let s = seeds();
        let b = PoolBuilder::new(&c, &s);
        let mut q = scripted(vec!["go left then right", "go left then left"]);
        let mut l = echo_label();
        let pool = b.build(&mut l, Some(&mut q)).unwrap();
        assert_eq!(pool.entries.len(), 2);
    }

    #[test]
    fn stop_markers_and_seeds_recorded() {
        let c = cfg(1);
        let s = seeds();
        let b = PoolBuilder::new(&c, &s);
        let mut q = scripted(vec!["real query###junk"]);
        let mut l = echo_label();
        let pool = b.build(&mut l, Some(&mut q)).unwrap();
        assert_eq!(pool.entries[0].query, "real query");
        assert_eq!(pool.entries[0].query_seed, derive_seed(0, QUERY_STREAM, 0));
        assert_ne!(pool.entries[0].query_seed, pool.entries[0].label_seed);
    }
}

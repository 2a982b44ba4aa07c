//! A seeded toy world: a generic base corpus, a task corpus that adds words
//! over a disjoint alphabet, and held-out task text for evaluation.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fit_adapter_with, fit_bigram_with, ToyAdapter, ToyGenerator, ToyLM};
use crate::alignment::{tokenizer_by_tag, TokenizerHandle, VocabTokenizer, BOUNDARY_ID};
use crate::datamodel::ScoredTrace;
use crate::error::{Error, Result};
use crate::excess::excess_scores;
use crate::filtering::top_positions;
use crate::synthgen::SeedExample;

/// Letters that only task words use.
pub const TASK_LETTERS: [char; 6] = ['j', 'k', 'q', 'v', 'x', 'z'];

const GENERIC_WORDS: [&str; 40] = [
    "the", "and", "for", "are", "but", "not", "you", "all", "can", "had", "her", "was", "one",
    "our", "out", "day", "get", "has", "him", "his", "how", "man", "new", "now", "old", "see",
    "two", "way", "who", "boy", "did", "its", "let", "put", "say", "she", "dog", "cat", "sun",
    "water",
];

const TASK_WORDS: [&str; 10] = [
    "zq", "qzx", "jzk", "kvx", "xjq", "vzq", "qkj", "zxv", "jvz", "kqx",
];

const WORLD_SEED: u64 = 0x7170_6b5f_776f_726c;
const BASE_SENTENCES: usize = 300;
const TASK_SENTENCES: usize = 150;
const HELDOUT_SENTENCES: usize = 60;

fn sentences(rng: &mut ChaCha8Rng, words: &[&str], count: usize, min: usize, max: usize) -> Vec<String> {
    (0..count)
        .map(|_| {
            let n = rng.gen_range(min..=max);
            (0..n)
                .map(|_| words[rng.gen_range(0..words.len())])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Char-level and merge-level toy tokenizers; ids below 28 coincide.
pub struct ToyTokenizerPair {
    pub char_level: TokenizerHandle,
    pub merge_level: TokenizerHandle,
}

impl ToyTokenizerPair {
    pub fn new() -> Self {
        ToyTokenizerPair {
            char_level: std::sync::Arc::new(VocabTokenizer::toy_char()),
            merge_level: std::sync::Arc::new(VocabTokenizer::toy_merge()),
        }
    }
}

impl Default for ToyTokenizerPair {
    fn default() -> Self {
        Self::new()
    }
}

/// Source-side models and corpora for a toy run.
#[derive(Clone)]
pub struct ToyWorld {
    pub base_corpus: Vec<String>,
    pub task_corpus: Vec<String>,
    pub heldout_task: Vec<String>,
    pub tokenizer: TokenizerHandle,
    pub base: ToyLM,
    pub adapter: ToyAdapter,
}

impl ToyWorld {
    /// The bundled world. The task corpus is the base corpus plus sentences
    /// of task words, so only transitions touching task letters differ.
    pub fn standard(tokenizer_tag: &str, alpha: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED);
        let base = sentences(&mut rng, &GENERIC_WORDS, BASE_SENTENCES, 5, 9);
        let extra = sentences(&mut rng, &TASK_WORDS, TASK_SENTENCES, 3, 6);
        let heldout = sentences(&mut rng, &TASK_WORDS, HELDOUT_SENTENCES, 3, 6);
        let mut task = base.clone();
        task.extend(extra);
        Self::from_corpora(base, task, heldout, tokenizer_by_tag(tokenizer_tag)?, alpha)
    }

    pub fn from_corpora(
        base_corpus: Vec<String>,
        task_corpus: Vec<String>,
        heldout_task: Vec<String>,
        tokenizer: TokenizerHandle,
        alpha: f64,
    ) -> Result<Self> {
        let base = fit_bigram_with(tokenizer.as_ref(), &base_corpus, alpha)?;
        let adapter = fit_adapter_with(&base, tokenizer.as_ref(), &task_corpus)?;
        Ok(ToyWorld {
            base_corpus,
            task_corpus,
            heldout_task,
            tokenizer,
            base,
            adapter,
        })
    }

    /// Expert generator (base + adapter) serving both pool roles.
    pub fn expert_generator(&self) -> ToyGenerator {
        ToyGenerator {
            model: self.base.clone(),
            adapter: Some(self.adapter.clone()),
            tokenizer: self.tokenizer.clone(),
        }
    }

    /// Few-shot exemplars drawn from the task-only part of the corpus.
    pub fn few_shot(&self, n: usize) -> Vec<SeedExample> {
        let task_only: Vec<&String> = self
            .task_corpus
            .iter()
            .filter(|s| s.chars().any(|c| TASK_LETTERS.contains(&c)))
            .collect();
        let pick: Vec<&String> = if task_only.is_empty() {
            self.task_corpus.iter().collect()
        } else {
            task_only
        };
        pick.iter()
            .take(n)
            .map(|s| SeedExample {
                label: s.to_string(),
                query: s.to_string(),
            })
            .collect()
    }
}

/// Response positions whose (previous token, token) bigram the adapter boosts.
pub fn planted_positions(adapter: &ToyAdapter, token_ids: &[u32]) -> Vec<usize> {
    let mut prev = BOUNDARY_ID;
    let mut out = Vec::new();
    for (i, &id) in token_ids.iter().enumerate() {
        if adapter.is_planted(prev, id) {
            out.push(i);
        }
        prev = id;
    }
    out
}

/// Mean within-response rank fraction `(rank - 1) / L` of planted positions,
/// ranking by descending excess score. `None` when nothing is planted.
pub fn mean_planted_rank(adapter: &ToyAdapter, traces: &[ScoredTrace]) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in traces {
        let rep = excess_scores(t)?;
        let len = rep.scores.len();
        let order = top_positions(&rep.scores, len);
        let mut rank = vec![0usize; len];
        for (r, &pos) in order.iter().enumerate() {
            rank[pos] = r;
        }
        let ids: Vec<u32> = t.tokens.iter().map(|x| x.token_id).collect();
        for p in planted_positions(adapter, &ids) {
            sum += rank[p] as f64 / len as f64;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Uniform random choice of `m` pool indices, returned in ascending order.
pub fn random_control(pool_len: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m > pool_len {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {m} of {pool_len} items"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, pool_len, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

//! Desk-scale stand-ins for every model role.
//!
//! The amateur is a smoothed bigram over token ids, the expert is the same
//! bigram plus a sparse additive delta on its logits, and the target is a
//! fresh bigram fit on masked counts. Row 0 (the boundary token) is the
//! initial context of every sequence; no end-of-sequence transition is
//! counted, so masked training over all-ones masks is exactly a plain fit.

mod world;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{tokenizer_by_tag, Tokenizer, VocabTokenizer, BOUNDARY_ID};
use crate::datamodel::{MaskedDataset, ScoredTrace, TokenRecord};
use crate::error::{Error, Result};
use crate::synthgen::{truncate_at_stop, FinishReason, GenRequest, GenResponse, Generator};

pub use world::{
    mean_planted_rank, planted_positions, random_control, ToyTokenizerPair, ToyWorld, TASK_LETTERS,
};

const MODEL_MAGIC: &str = "titok-toylm";
const ADAPTER_MAGIC: &str = "titok-toyadapter";

/// Smoothed bigram language model; `logits[a * V + b]` scores `b` after `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLM {
    tokenizer_tag: String,
    vocab: Vec<String>,
    logits: Vec<f64>,
    alpha: f64,
    counts: Option<Vec<u64>>,
}

/// Sparse `(context, next) -> delta` added to a [`ToyLM`]'s logits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToyAdapter {
    pub delta: BTreeMap<(u32, u32), f64>,
}

/// Logits overwritten by [`ToyLM::apply_adapter`], kept for exact removal.
#[derive(Debug)]
#[must_use]
pub struct AppliedAdapter {
    saved: Vec<(usize, f64)>,
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn vocab_of(tok: &dyn Tokenizer) -> Vec<String> {
    (0..tok.vocab_size() as u32)
        .map(|i| tok.piece_text(i).unwrap_or("").to_string())
        .collect()
}

fn tokenize_in_vocab(tok: &dyn Tokenizer, text: &str) -> Result<Vec<u32>> {
    tok.tokenize(text).map_err(|e| {
        let vocab = vocab_of(tok);
        match text
            .chars()
            .find(|c| !vocab.iter().any(|p| p.contains(*c)))
        {
            Some(c) => Error::OutOfVocab {
                symbol: c.to_string(),
            },
            None => e,
        }
    })
}

impl ToyLM {
    fn from_counts(tokenizer_tag: &str, vocab: Vec<String>, counts: Vec<u64>, alpha: f64) -> Self {
        let v = vocab.len();
        let mut logits = vec![0.0; v * v];
        for a in 0..v {
            let row = &counts[a * v..(a + 1) * v];
            let total: u64 = row.iter().sum();
            let denom = total as f64 + alpha * v as f64;
            for b in 0..v {
                logits[a * v + b] = ((row[b] as f64 + alpha) / denom).ln();
            }
        }
        ToyLM {
            tokenizer_tag: tokenizer_tag.to_string(),
            vocab,
            logits,
            alpha,
            counts: Some(counts),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn tokenizer_tag(&self) -> &str {
        &self.tokenizer_tag
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Transition counts, when the model was fit rather than loaded.
    pub fn counts(&self) -> Option<&[u64]> {
        self.counts.as_deref()
    }

    pub fn logit(&self, context: u32, next: u32) -> f64 {
        self.logits[context as usize * self.vocab.len() + next as usize]
    }

    /// Log-softmax of row `context`, with `adapter` added when given.
    pub fn row_log_probs(&self, context: u32, adapter: Option<&ToyAdapter>) -> Vec<f64> {
        let v = self.vocab.len();
        let a = context as usize;
        let mut row = self.logits[a * v..(a + 1) * v].to_vec();
        if let Some(ad) = adapter {
            for (&(_, b), d) in ad.delta.range((context, 0)..=(context, u32::MAX)) {
                row[b as usize] += d;
            }
        }
        let lse = log_sum_exp(&row);
        row.iter_mut().for_each(|x| *x -= lse);
        row
    }

    fn check_tokenizer(&self, tok: &dyn Tokenizer) -> Result<()> {
        if tok.vocab_size() != self.vocab.len() {
            return Err(Error::InvalidArgument(format!(
                "tokenizer `{}` has {} pieces, model has {}",
                tok.tag(),
                tok.vocab_size(),
                self.vocab.len()
            )));
        }
        Ok(())
    }

    /// Adds `adapter` into the logits in place.
    pub fn apply_adapter(&mut self, adapter: &ToyAdapter) -> Result<AppliedAdapter> {
        let v = self.vocab.len();
        adapter.check(v)?;
        let mut saved = Vec::with_capacity(adapter.delta.len());
        for (&(a, b), d) in &adapter.delta {
            let idx = a as usize * v + b as usize;
            saved.push((idx, self.logits[idx]));
            self.logits[idx] += d;
        }
        Ok(AppliedAdapter { saved })
    }

    /// Restores the logits saved by [`ToyLM::apply_adapter`].
    pub fn remove_adapter(&mut self, applied: AppliedAdapter) {
        for (idx, original) in applied.saved.into_iter().rev() {
            self.logits[idx] = original;
        }
    }

    /// Copy of this model with `adapter` folded into its logits.
    pub fn with_adapter(&self, adapter: &ToyAdapter) -> Result<ToyLM> {
        let mut m = self.clone();
        let _ = m.apply_adapter(adapter)?;
        m.counts = None;
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let v = self.vocab.len();
        let mut out = format!(
            "{MODEL_MAGIC} v1 tokenizer={} vocab={v} alpha={}\n[vocab]\n",
            self.tokenizer_tag, self.alpha
        );
        for (i, p) in self.vocab.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{}", serde_json::to_string(p).expect("string serializes"));
        }
        out.push_str("[logits]\n");
        for row in self.logits.chunks(v) {
            let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        if let Some(counts) = &self.counts {
            out.push_str("[counts]\n");
            for row in counts.chunks(v) {
                let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                out.push_str(&cells.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::ModelFormat(m);
        let mut lines = text.lines();
        let header = parse_header(lines.next().unwrap_or(""), MODEL_MAGIC)?;
        let tag = header
            .get("tokenizer")
            .ok_or_else(|| bad("header lacks tokenizer=".into()))?
            .to_string();
        let v: usize = header_num(&header, "vocab")?;
        let alpha: f64 = header_num(&header, "alpha")?;
        let mut section = "";
        let mut vocab = Vec::new();
        let mut logits = Vec::new();
        let mut counts = Vec::new();
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            if line.starts_with('[') {
                section = match line.trim() {
                    "[vocab]" => "vocab",
                    "[logits]" => "logits",
                    "[counts]" => "counts",
                    s => return Err(bad(format!("line {lineno}: unknown section {s}"))),
                };
                continue;
            }
            match section {
                "vocab" => {
                    let (id, piece) = line
                        .split_once('\t')
                        .ok_or_else(|| bad(format!("line {lineno}: expected `id<TAB>piece`")))?;
                    if id.parse::<usize>().ok() != Some(vocab.len()) {
                        return Err(bad(format!("line {lineno}: ids must be consecutive from 0")));
                    }
                    let piece: String = serde_json::from_str(piece)
                        .map_err(|e| bad(format!("line {lineno}: {e}")))?;
                    vocab.push(piece);
                }
                "logits" => {
                    for cell in line.split_whitespace() {
                        let x: f64 = cell
                            .parse()
                            .map_err(|_| bad(format!("line {lineno}: bad number `{cell}`")))?;
                        if !x.is_finite() {
                            return Err(bad(format!("line {lineno}: non-finite logit")));
                        }
                        logits.push(x);
                    }
                }
                "counts" => {
                    for cell in line.split_whitespace() {
                        counts.push(
                            cell.parse::<u64>()
                                .map_err(|_| bad(format!("line {lineno}: bad count `{cell}`")))?,
                        );
                    }
                }
                _ => return Err(bad(format!("line {lineno}: data before any section"))),
            }
        }
        if vocab.len() != v || logits.len() != v * v {
            return Err(bad(format!(
                "expected {v} pieces and {} logits, found {} and {}",
                v * v,
                vocab.len(),
                logits.len()
            )));
        }
        if !counts.is_empty() && counts.len() != v * v {
            return Err(bad(format!("expected {} counts, found {}", v * v, counts.len())));
        }
        Ok(ToyLM {
            tokenizer_tag: tag,
            vocab,
            logits,
            alpha,
            counts: (!counts.is_empty()).then_some(counts),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io_at(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?)
    }
}

fn parse_header<'a>(line: &'a str, magic: &str) -> Result<BTreeMap<&'a str, &'a str>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(magic) || parts.next() != Some("v1") {
        return Err(Error::ModelFormat(format!("expected header `{magic} v1 ...`")));
    }
    parts
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| Error::ModelFormat(format!("bad header field `{kv}`")))
        })
        .collect()
}

fn header_num<T: std::str::FromStr>(h: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    h.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::ModelFormat(format!("header lacks a valid {key}=")))
}

impl ToyAdapter {
    /// Bigrams the adapter boosts.
    pub fn planted(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.delta.keys().copied()
    }

    pub fn is_planted(&self, context: u32, next: u32) -> bool {
        self.delta.contains_key(&(context, next))
    }

    fn check(&self, v: usize) -> Result<()> {
        for (&(a, b), d) in &self.delta {
            if a as usize >= v || b as usize >= v || !d.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "adapter entry ({a}, {b}) = {d} does not fit a {v}-token model"
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self, vocab_size: usize) -> String {
        let mut out = format!("{ADAPTER_MAGIC} v1 vocab={vocab_size}\n");
        for (&(a, b), d) in &self.delta {
            let _ = writeln!(out, "{a}\t{b}\t{d}");
        }
        out
    }

    /// Parses an adapter file, returning it with its declared vocabulary size.
    pub fn parse(text: &str) -> Result<(Self, usize)> {
        let mut lines = text.lines();
        let header = parse_header(lines.next().unwrap_or(""), ADAPTER_MAGIC)?;
        let v: usize = header_num(&header, "vocab")?;
        let mut delta = BTreeMap::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let parsed = match f.as_slice() {
                [a, b, d] => a
                    .parse::<u32>()
                    .ok()
                    .zip(b.parse::<u32>().ok())
                    .zip(d.parse::<f64>().ok()),
                _ => None,
            };
            let ((a, b), d) = parsed.ok_or_else(|| {
                Error::ModelFormat(format!("line {}: expected `ctx<TAB>next<TAB>delta`", n + 2))
            })?;
            delta.insert((a, b), d);
        }
        let ad = ToyAdapter { delta };
        ad.check(v)?;
        Ok((ad, v))
    }

    pub fn save(&self, path: impl AsRef<Path>, vocab_size: usize) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text(vocab_size)).map_err(|e| Error::io_at(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, usize)> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?)
    }
}

fn count_transitions(counts: &mut [u64], v: usize, ids: &[u32], keep: impl Fn(usize) -> bool) {
    let mut prev = BOUNDARY_ID as usize;
    for (i, &id) in ids.iter().enumerate() {
        if keep(i) {
            counts[prev * v + id as usize] += 1;
        }
        prev = id as usize;
    }
}

/// Fits a bigram over the toy character tokenizer.
pub fn fit_bigram<S: AsRef<str>>(corpus: &[S], alpha: f64) -> Result<ToyLM> {
    fit_bigram_with(&VocabTokenizer::toy_char(), corpus, alpha)
}

pub fn fit_bigram_with<S: AsRef<str>>(tok: &dyn Tokenizer, corpus: &[S], alpha: f64) -> Result<ToyLM> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let v = tok.vocab_size();
    let mut counts = vec![0u64; v * v];
    for text in corpus {
        let ids = tokenize_in_vocab(tok, text.as_ref())?;
        count_transitions(&mut counts, v, &ids, |_| true);
    }
    Ok(ToyLM::from_counts(tok.tag(), vocab_of(tok), counts, alpha))
}

/// Boosts every bigram whose smoothed task probability exceeds the base one,
/// by the log-ratio of the two.
pub fn fit_adapter<S: AsRef<str>>(base: &ToyLM, task_corpus: &[S]) -> Result<ToyAdapter> {
    let tok = tokenizer_by_tag(base.tokenizer_tag())?;
    fit_adapter_with(base, tok.as_ref(), task_corpus)
}

pub fn fit_adapter_with<S: AsRef<str>>(
    base: &ToyLM,
    tok: &dyn Tokenizer,
    task_corpus: &[S],
) -> Result<ToyAdapter> {
    base.check_tokenizer(tok)?;
    let task = fit_bigram_with(tok, task_corpus, base.alpha)?;
    let mut delta = BTreeMap::new();
    for a in 0..base.vocab_size() as u32 {
        let lb = base.row_log_probs(a, None);
        let lt = task.row_log_probs(a, None);
        for (b, (t, s)) in lt.iter().zip(&lb).enumerate() {
            let d = t - s;
            if d > 0.0 {
                delta.insert((a, b as u32), d);
            }
        }
    }
    Ok(ToyAdapter { delta })
}

/// Scores `response` under the base model (amateur) and base + adapter
/// (expert). The query is carried along but a bigram never sees it.
pub fn toy_score(
    model: &ToyLM,
    adapter: Option<&ToyAdapter>,
    tok: &dyn Tokenizer,
    sample_id: &str,
    query: &str,
    response: &str,
) -> Result<ScoredTrace> {
    model.check_tokenizer(tok)?;
    let ids = tokenize_in_vocab(tok, response)?;
    if ids.is_empty() {
        return Err(Error::InvalidRecord {
            sample_id: sample_id.to_string(),
            reason: "response has no tokens".into(),
        });
    }
    let mut prev = BOUNDARY_ID;
    let mut tokens = Vec::with_capacity(ids.len());
    for &id in &ids {
        let amateur = model.row_log_probs(prev, None);
        let expert = model.row_log_probs(prev, adapter);
        tokens.push(TokenRecord {
            logp_amateur: amateur[id as usize],
            logp_expert: expert[id as usize],
            token_id: id,
            token_text: tok.piece_text(id).unwrap_or("").to_string(),
        });
        prev = id;
    }
    Ok(ScoredTrace {
        query_text: query.to_string(),
        response_text: response.to_string(),
        sample_id: sample_id.to_string(),
        tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleParams {
    pub greedy: bool,
    pub max_tokens: usize,
    pub seed: u64,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SampleParams {
    fn default() -> Self {
        SampleParams {
            greedy: false,
            max_tokens: 32,
            seed: 0,
            temperature: 1.0,
            top_p: 0.95,
        }
    }
}

/// Smallest set of highest-probability indices whose mass reaches `top_p`.
/// Ties in probability go to the lower index.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut cut = order.len();
    for (n, &i) in order.iter().enumerate() {
        mass += probs[i];
        if mass >= top_p {
            cut = n + 1;
            break;
        }
    }
    order.truncate(cut.max(1));
    order
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in row.iter().enumerate() {
        if *x > row[best] {
            best = i;
        }
    }
    best
}

/// Samples token ids from the boundary context until the boundary token is
/// drawn or `max_tokens` ids have been produced.
pub fn toy_generate_ids(model: &ToyLM, adapter: Option<&ToyAdapter>, params: &SampleParams) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let greedy = params.greedy || params.temperature <= 0.0;
    let mut prev = BOUNDARY_ID;
    let mut out = Vec::new();
    while out.len() < params.max_tokens {
        let logp = model.row_log_probs(prev, adapter);
        let next = if greedy {
            argmax(&logp)
        } else {
            let scaled: Vec<f64> = logp.iter().map(|x| x / params.temperature).collect();
            let lse = log_sum_exp(&scaled);
            let probs: Vec<f64> = scaled.iter().map(|x| (x - lse).exp()).collect();
            let allowed = nucleus(&probs, params.top_p);
            let total: f64 = allowed.iter().map(|&i| probs[i]).sum();
            let mut u = rng.gen::<f64>() * total;
            let mut pick = *allowed.last().expect("nucleus is never empty");
            for &i in &allowed {
                if u < probs[i] {
                    pick = i;
                    break;
                }
                u -= probs[i];
            }
            pick
        } as u32;
        if next == BOUNDARY_ID {
            break;
        }
        out.push(next);
        prev = next;
    }
    out
}

/// Generates text; the prompt is ignored because a bigram has no use for it.
pub fn toy_generate(
    model: &ToyLM,
    adapter: Option<&ToyAdapter>,
    tok: &dyn Tokenizer,
    _prompt: &str,
    params: &SampleParams,
) -> Result<String> {
    model.check_tokenizer(tok)?;
    tok.detokenize(&toy_generate_ids(model, adapter, params))
}

/// Fits a target bigram on masked counts: the pair (previous token, y_i)
/// counts iff y_i's mask value is 1.
pub fn train_masked_target(dataset: &MaskedDataset, alpha: f64) -> Result<ToyLM> {
    let tok = tokenizer_by_tag(&dataset.meta.target_tokenizer_tag)?;
    train_masked_target_with(dataset, tok.as_ref(), alpha)
}

pub fn train_masked_target_with(
    dataset: &MaskedDataset,
    tok: &dyn Tokenizer,
    alpha: f64,
) -> Result<ToyLM> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let v = tok.vocab_size();
    let mut counts = vec![0u64; v * v];
    let mut kept = 0usize;
    for r in &dataset.records {
        if !r.mask.binary || r.mask.keep.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::InvalidRecord {
                sample_id: r.sample_id.clone(),
                reason: "mask is not binary".into(),
            });
        }
        if r.mask.len() != r.token_ids.len() {
            return Err(Error::InvalidRecord {
                sample_id: r.sample_id.clone(),
                reason: "mask length differs from token count".into(),
            });
        }
        if let Some(&bad) = r.token_ids.iter().find(|&&id| id as usize >= v) {
            return Err(Error::InvalidRecord {
                sample_id: r.sample_id.clone(),
                reason: format!("token id {bad} outside a {v}-piece vocabulary"),
            });
        }
        kept += r.mask.kept_count();
        count_transitions(&mut counts, v, &r.token_ids, |i| r.mask.is_kept(i));
    }
    if kept == 0 {
        return Err(Error::InvalidArgument("dataset keeps no tokens".into()));
    }
    Ok(ToyLM::from_counts(tok.tag(), vocab_of(tok), counts, alpha))
}

/// Mean negative log-likelihood per token (nats) of `texts`, summed exactly
/// over every position.
pub fn mean_nll<S: AsRef<str>>(model: &ToyLM, tok: &dyn Tokenizer, texts: &[S]) -> Result<f64> {
    model.check_tokenizer(tok)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for t in texts {
        let mut prev = BOUNDARY_ID;
        for id in tokenize_in_vocab(tok, t.as_ref())? {
            total -= model.row_log_probs(prev, None)[id as usize];
            prev = id;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no tokens to evaluate".into()));
    }
    Ok(total / n as f64)
}

/// Generator endpoint backed by the expert toy model.
pub struct ToyGenerator {
    pub model: ToyLM,
    pub adapter: Option<ToyAdapter>,
    pub tokenizer: crate::alignment::TokenizerHandle,
}

impl ToyGenerator {
    pub fn respond(&self, req: &GenRequest) -> GenResponse {
        let params = SampleParams {
            greedy: req.greedy,
            max_tokens: req.max_tokens,
            seed: req.seed,
            temperature: req.temperature,
            top_p: req.top_p,
        };
        let ids = toy_generate_ids(&self.model, self.adapter.as_ref(), &params);
        let finish = if ids.len() >= req.max_tokens {
            FinishReason::Length
        } else {
            FinishReason::Stop
        };
        match self.tokenizer.detokenize(&ids) {
            Ok(text) => GenResponse {
                error: None,
                finish_reason: finish,
                request_index: req.request_index,
                seed: req.seed,
                text: truncate_at_stop(&text, &req.stop_markers).to_string(),
            },
            Err(e) => GenResponse::failure(req.request_index, req.seed, e.to_string()),
        }
    }
}

impl Generator for ToyGenerator {
    fn generate(&mut self, request: &GenRequest) -> Result<GenResponse> {
        Ok(self.respond(request))
    }
}

//! End-to-end runs: generate → score → excess → filter → select → align →
//! export → train.
//!
//! Every stage reads its inputs from files written by earlier stages and
//! persists its outputs into the run directory, so a run can resume from the
//! first stage whose recorded outputs are missing or altered. `manifest.json`
//! is rewritten after every stage.

mod endpoints;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{
    align_dataset, tokenizer_by_tag, AlignDatasetOptions, AlignOptions, OnError,
};
use crate::datamodel::{
    read_jsonl, read_masked_dataset, write_jsonl, write_masked_dataset, DatasetMeta,
    ExcessReport, MaskedDataset, MaskedRecord, PipelineConfig, ScoredTrace, TokenMask,
};
use crate::error::{Error, Result};
use crate::excess::excess_scores;
use crate::filtering::{filter_samples_ranked, select_tokens_with, KeptSample, RankPolicy};
use crate::synthgen::{Generator, PoolBuilder, PoolEntry, PromptTemplate, SeedExample};
use crate::toylab::{mean_nll, train_masked_target, ToyWorld};

pub use endpoints::{
    check_locators, generator_from_locator, needs_toy_world, scorer_from_locator,
    serve_score_lines, toy_world, CachedScorer, ExecScorer, ScoreRequest, Scorer, ToyScorer,
};

pub const POOL_FILE: &str = "pool.jsonl";
pub const POOL_PARTIAL_FILE: &str = "pool.partial.jsonl";
pub const REJECTS_FILE: &str = "rejects.jsonl";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const EXCESS_FILE: &str = "excess.jsonl";
pub const KEPT_FILE: &str = "kept.jsonl";
pub const MASKS_FILE: &str = "masks.jsonl";
pub const MASKED_SOURCE_FILE: &str = "masked_source.jsonl";
pub const ALIGNED_FILE: &str = "aligned.jsonl";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const TARGET_MODEL_FILE: &str = "target.model";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

/// Stage names in execution order.
pub const STAGES: [&str; 8] = [
    "generate", "score", "excess", "filter", "select", "align", "export", "train",
];

pub const SAME_TOKENIZER_NOTE: &str = "skipped: same tokenizer";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Done,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub counts: BTreeMap<String, usize>,
    /// sha256 of each input file at the time the stage ran.
    pub inputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    pub name: String,
    pub note: Option<String>,
    pub outputs: BTreeMap<String, String>,
    pub status: StageStatus,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub complete: bool,
    pub config: PipelineConfig,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Count recorded by any stage under `key` (the last one wins).
    pub fn count(&self, key: &str) -> Option<usize> {
        self.stages.iter().rev().find_map(|s| s.counts.get(key).copied())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            fragment: String::new(),
            message: format!("{}: {e}", path.display()),
        })
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("manifest does not serialize: {e}")))?;
        text.push('\n');
        std::fs::write(&tmp, text).map_err(|e| Error::io_at(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io_at(&path, e))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub resume: bool,
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Config(format!(
                    "{} is locked by another run (remove {} if it is stale)",
                    dir.display(),
                    path.display()
                )),
                _ => Error::io_at(&path, e),
            })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(RunLock(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

#[derive(Default)]
struct Outcome {
    status: Option<StageStatus>,
    note: Option<String>,
    inputs: Vec<&'static str>,
    outputs: Vec<&'static str>,
    counts: BTreeMap<String, usize>,
    metrics: BTreeMap<String, f64>,
}

impl Outcome {
    fn reads(mut self, files: &[&'static str]) -> Self {
        self.inputs.extend_from_slice(files);
        self
    }

    fn writes(mut self, files: &[&'static str]) -> Self {
        self.outputs.extend_from_slice(files);
        self
    }

    fn count(mut self, key: &str, n: usize) -> Self {
        self.counts.insert(key.to_string(), n);
        self
    }

    fn skipped(note: &str) -> Self {
        Outcome {
            status: Some(StageStatus::Skipped),
            note: Some(note.to_string()),
            ..Default::default()
        }
    }
}

struct Run<'c> {
    cfg: &'c PipelineConfig,
    dir: PathBuf,
    world: Option<ToyWorld>,
}

fn few_shot_for(cfg: &PipelineConfig, world: Option<&ToyWorld>) -> Result<Vec<SeedExample>> {
    match (&cfg.few_shot, world) {
        (Some(p), _) => {
            let v: Vec<SeedExample> = read_jsonl(p)?;
            if v.is_empty() {
                return Err(Error::Config(format!("{} holds no examples", p.display())));
            }
            Ok(v)
        }
        (None, Some(w)) => Ok(w.few_shot(5)),
        (None, None) => Err(Error::Config(
            "few_shot is required when no endpoint is the toy model".into(),
        )),
    }
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn stage(&self, name: &str) -> Result<Outcome> {
        match name {
            "generate" => self.generate(),
            "score" => self.score(),
            "excess" => self.excess(),
            "filter" => self.filter(),
            "select" => self.select(),
            "align" => self.align(),
            "export" => self.export(),
            "train" => self.train(),
            _ => unreachable!("unknown stage {name}"),
        }
    }

    fn generate(&self) -> Result<Outcome> {
        let cfg = self.cfg;
        let shots = few_shot_for(cfg, self.world.as_ref())?;
        let mut builder = PoolBuilder::new(cfg, &shots);
        if let Some(p) = &cfg.query_template {
            builder.query_template = PromptTemplate::from_file(p)?;
        }
        if let Some(p) = &cfg.label_template {
            builder.label_template = PromptTemplate::from_file(p)?;
        }
        let mut generator = generator_from_locator(&cfg.generator, self.world.as_ref())?;
        let mut query_gen = match &cfg.query_generator {
            Some(l) => Some(generator_from_locator(l, self.world.as_ref())?),
            None => None,
        };
        let _ = std::fs::remove_file(self.path(POOL_PARTIAL_FILE));
        match builder.build(
            generator.as_mut(),
            query_gen.as_mut().map(|g| g.as_mut() as &mut dyn Generator),
        ) {
            Ok(pool) => {
                write_jsonl(self.path(POOL_FILE), &pool.entries)?;
                write_jsonl(self.path(REJECTS_FILE), &pool.rejects)?;
                Ok(Outcome::default()
                    .writes(&[POOL_FILE, REJECTS_FILE])
                    .count("pool", pool.entries.len())
                    .count("rejects", pool.rejects.len())
                    .count("attempts", pool.attempts))
            }
            Err(failure) => {
                write_jsonl(self.path(POOL_PARTIAL_FILE), &failure.partial.entries)?;
                write_jsonl(self.path(REJECTS_FILE), &failure.partial.rejects)?;
                Err(failure.error)
            }
        }
    }

    fn score(&self) -> Result<Outcome> {
        let pool: Vec<PoolEntry> = read_jsonl(self.path(POOL_FILE))?;
        let mut scorer = scorer_from_locator(&self.cfg.scorer, self.world.as_ref())?;
        let mut traces = Vec::with_capacity(pool.len());
        for e in &pool {
            let req = ScoreRequest {
                query_text: e.query.clone(),
                response_text: e.label.clone(),
                sample_id: e.sample_id.clone(),
            };
            let t = scorer.score(&req)?;
            crate::datamodel::validate_trace(&t).into_result(&t.sample_id)?;
            traces.push(t);
        }
        write_jsonl(self.path(TRACES_FILE), &traces)?;
        let tokens = traces.iter().map(|t| t.tokens.len()).sum();
        Ok(Outcome::default()
            .reads(&[POOL_FILE])
            .writes(&[TRACES_FILE])
            .count("traces", traces.len())
            .count("trace_tokens", tokens))
    }

    fn excess(&self) -> Result<Outcome> {
        let traces: Vec<ScoredTrace> = read_jsonl(self.path(TRACES_FILE))?;
        let reports = traces
            .iter()
            .map(|t| excess_scores(t).map_err(|e| Error::for_record(&t.sample_id, e)))
            .collect::<Result<Vec<_>>>()?;
        write_jsonl(self.path(EXCESS_FILE), &reports)?;
        Ok(Outcome::default()
            .reads(&[TRACES_FILE])
            .writes(&[EXCESS_FILE])
            .count("reports", reports.len()))
    }

    fn filter(&self) -> Result<Outcome> {
        let reports: Vec<ExcessReport> = read_jsonl(self.path(EXCESS_FILE))?;
        let kept = filter_samples_ranked(&reports, self.cfg.keep_m)?;
        write_jsonl(self.path(KEPT_FILE), &kept)?;
        Ok(Outcome::default()
            .reads(&[EXCESS_FILE])
            .writes(&[KEPT_FILE])
            .count("kept", kept.len()))
    }

    fn select(&self) -> Result<Outcome> {
        let cfg = self.cfg;
        let kept: Vec<KeptSample> = read_jsonl(self.path(KEPT_FILE))?;
        let reports: Vec<ExcessReport> = read_jsonl(self.path(EXCESS_FILE))?;
        let traces: Vec<ScoredTrace> = read_jsonl(self.path(TRACES_FILE))?;
        let reports: BTreeMap<&str, &ExcessReport> =
            reports.iter().map(|r| (r.sample_id.as_str(), r)).collect();
        let traces: BTreeMap<&str, &ScoredTrace> =
            traces.iter().map(|t| (t.sample_id.as_str(), t)).collect();
        let policy = RankPolicy {
            floor_min_one: cfg.floor_min_one,
        };
        let mut masks: Vec<TokenMask> = Vec::with_capacity(kept.len());
        let mut records = Vec::with_capacity(kept.len());
        let mut dropped = 0;
        for k in &kept {
            let missing = || Error::InvalidRecord {
                sample_id: k.sample_id.clone(),
                reason: "kept sample has no excess report or trace".into(),
            };
            let rep = reports.get(k.sample_id.as_str()).ok_or_else(missing)?;
            let trace = traces.get(k.sample_id.as_str()).ok_or_else(missing)?;
            let mask = select_tokens_with(rep, cfg.k_percent, policy)?;
            if mask.kept_count() == 0 {
                dropped += 1;
            } else {
                records.push(MaskedRecord {
                    mask: mask.clone(),
                    query_text: trace.query_text.clone(),
                    response_text: trace.response_text.clone(),
                    sample_id: k.sample_id.clone(),
                    token_ids: trace.tokens.iter().map(|t| t.token_id).collect(),
                });
            }
            masks.push(mask);
        }
        let dataset = MaskedDataset {
            meta: DatasetMeta {
                k_percent: cfg.k_percent,
                m_kept: records.len(),
                source_model_tag: cfg.source_model_tag.clone(),
                target_tokenizer_tag: cfg.tokenizer_source.clone(),
            },
            records,
        };
        dataset.check()?;
        write_jsonl(self.path(MASKS_FILE), &masks)?;
        write_masked_dataset(self.path(MASKED_SOURCE_FILE), &dataset)?;
        Ok(Outcome::default()
            .reads(&[KEPT_FILE, EXCESS_FILE, TRACES_FILE])
            .writes(&[MASKS_FILE, MASKED_SOURCE_FILE])
            .count("masks", masks.len())
            .count("dropped_zero_kept", dropped)
            .count("source_tokens_kept", dataset.tokens_kept()))
    }

    fn align(&self) -> Result<Outcome> {
        let cfg = self.cfg;
        if cfg.tokenizer_source == cfg.tokenizer_target {
            return Ok(Outcome::skipped(SAME_TOKENIZER_NOTE));
        }
        let src = tokenizer_by_tag(&cfg.tokenizer_source)?;
        let tgt = tokenizer_by_tag(&cfg.tokenizer_target)?;
        let dataset = read_masked_dataset(self.path(MASKED_SOURCE_FILE))?;
        let opts = AlignDatasetOptions {
            on_error: if cfg.align_skip_errors {
                OnError::Skip
            } else {
                OnError::Abort
            },
            align: AlignOptions {
                strict: cfg.align_strict,
            },
            policy: RankPolicy {
                floor_min_one: cfg.floor_min_one,
            },
            ..Default::default()
        };
        let outcome = align_dataset(&dataset, src.as_ref(), tgt.as_ref(), cfg.k_percent, &opts)?;
        if outcome.dataset.records.is_empty() && !dataset.records.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "all {} records failed to align",
                dataset.records.len()
            )));
        }
        write_masked_dataset(self.path(ALIGNED_FILE), &outcome.dataset)?;
        Ok(Outcome::default()
            .reads(&[MASKED_SOURCE_FILE])
            .writes(&[ALIGNED_FILE])
            .count("aligned", outcome.dataset.records.len())
            .count("align_skipped", outcome.skipped.len()))
    }

    fn export(&self) -> Result<Outcome> {
        let input = if self.cfg.tokenizer_source == self.cfg.tokenizer_target {
            MASKED_SOURCE_FILE
        } else {
            ALIGNED_FILE
        };
        let dataset = read_masked_dataset(self.path(input))?;
        dataset.check()?;
        write_masked_dataset(self.path(DATASET_FILE), &dataset)?;
        let total = dataset.records.iter().map(|r| r.token_ids.len()).sum();
        Ok(Outcome::default()
            .reads(&[input])
            .writes(&[DATASET_FILE])
            .count("records", dataset.records.len())
            .count("tokens_total", total)
            .count("tokens_kept", dataset.tokens_kept()))
    }

    fn train(&self) -> Result<Outcome> {
        let Some(world) = self.world.as_ref().filter(|_| self.cfg.scorer == "toy") else {
            return Ok(Outcome::skipped("skipped: target training runs in toy mode only"));
        };
        let dataset = read_masked_dataset(self.path(DATASET_FILE))?;
        let target = train_masked_target(&dataset, self.cfg.toy_alpha)?;
        target.save(self.path(TARGET_MODEL_FILE))?;
        let mut out = Outcome::default()
            .reads(&[DATASET_FILE])
            .writes(&[TARGET_MODEL_FILE]);
        if !world.heldout_task.is_empty() {
            let tok = tokenizer_by_tag(&self.cfg.tokenizer_target)?;
            let nll = mean_nll(&target, tok.as_ref(), &world.heldout_task)?;
            out.metrics.insert("heldout_task_nll".into(), nll);
        }
        Ok(out)
    }
}

fn stage_still_valid(dir: &Path, rec: &StageRecord) -> bool {
    rec.outputs
        .iter()
        .all(|(f, digest)| sha256_file(dir.join(f)).is_ok_and(|d| &d == digest))
}

/// Runs every stage in order, persisting artifacts and the manifest in
/// `config.out_dir`.
pub fn run_pipeline(config: &PipelineConfig, opts: RunOptions) -> Result<RunManifest> {
    config.validate()?;
    check_locators(config)?;
    let dir = config.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io_at(&dir, e))?;
    let _lock = RunLock::acquire(&dir)?;

    let mut manifest = RunManifest {
        complete: false,
        config: config.clone(),
        seed: config.seed,
        stages: Vec::new(),
    };
    if opts.resume && dir.join(MANIFEST_FILE).exists() {
        let previous = RunManifest::load(&dir)?;
        if previous.config != *config {
            return Err(Error::Config(
                "config differs from the manifest of the run being resumed".into(),
            ));
        }
        for (rec, expected) in previous.stages.into_iter().zip(STAGES) {
            if rec.name != expected || !stage_still_valid(&dir, &rec) {
                break;
            }
            manifest.stages.push(rec);
        }
        info!("resuming after {} completed stages", manifest.stages.len());
    }

    let world = if needs_toy_world(config) {
        Some(toy_world(config)?)
    } else {
        None
    };
    let run = Run {
        cfg: config,
        dir: dir.clone(),
        world,
    };
    for &name in &STAGES[manifest.stages.len()..] {
        let started = Instant::now();
        let outcome = run.stage(name).map_err(|e| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        });
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                manifest.save(&dir)?;
                return Err(e);
            }
        };
        let digests = |files: &[&str]| -> Result<BTreeMap<String, String>> {
            files
                .iter()
                .map(|f| Ok((f.to_string(), sha256_file(dir.join(f))?)))
                .collect()
        };
        let rec = StageRecord {
            counts: outcome.counts,
            inputs: digests(&outcome.inputs)?,
            metrics: outcome.metrics,
            name: name.to_string(),
            note: outcome.note,
            outputs: digests(&outcome.outputs)?,
            status: outcome.status.unwrap_or(StageStatus::Done),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        info!("stage {name}: {:?} in {} ms", rec.status, rec.wall_ms);
        manifest.stages.push(rec);
        manifest.save(&dir)?;
    }
    manifest.complete = true;
    manifest.save(&dir)?;
    Ok(manifest)
}

/// Loads the exported dataset of a completed run, checking its digest
/// against the manifest. Consumers must zero the loss at mask-0 positions.
pub fn export_masked_dataset(run_dir: impl AsRef<Path>) -> Result<MaskedDataset> {
    let dir = run_dir.as_ref();
    let manifest = RunManifest::load(dir)?;
    let rec = manifest
        .stage("export")
        .filter(|r| r.status == StageStatus::Done)
        .ok_or_else(|| {
            Error::InvalidArgument(format!("{}: run has not reached export", dir.display()))
        })?;
    let path = dir.join(DATASET_FILE);
    if rec.outputs.get(DATASET_FILE) != Some(&sha256_file(&path)?) {
        return Err(Error::InvalidArgument(format!(
            "{} changed since the run wrote it",
            path.display()
        )));
    }
    let dataset = read_masked_dataset(&path)?;
    dataset.check()?;
    Ok(dataset)
}

/// Writes `dataset` to `path` in the masked-dataset format.
pub fn write_export(dataset: &MaskedDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    write_masked_dataset(path, dataset)
}

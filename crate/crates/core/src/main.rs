use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use titok::alignment::{align_dataset, tokenizer_by_tag, AlignDatasetOptions, OnError};
use titok::datamodel::{
    read_jsonl, read_masked_dataset, validate_trace, write_jsonl, write_masked_dataset,
    DatasetMeta, ExcessReport, JsonlReader, MaskedDataset, MaskedRecord, PipelineConfig,
    ScoredTrace,
};
use titok::excess::excess_scores;
use titok::filtering::{
    apply_mask_stats, filter_samples_ranked, select_tokens_with, KeptSample, RankPolicy,
};
use titok::pipeline::{
    export_masked_dataset, run_pipeline, serve_score_lines, toy_world, write_export, RunOptions,
    Scorer, ToyScorer,
};
use titok::synthgen::{serve_lines, PoolBuilder, PromptTemplate, SeedExample};
use titok::toylab::{fit_adapter_with, fit_bigram_with, ToyAdapter, ToyGenerator, ToyLM, ToyWorld};
use titok::{Error, Result};

#[derive(Parser)]
#[command(name = "titok", version, about = "Token-level knowledge transfer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnErrorArg {
    Skip,
    Abort,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Generator,
    Scorer,
}

#[derive(Subcommand)]
enum Command {
    /// Per-token excess scores from scored traces.
    Score {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the M samples with the highest mean excess.
    Filter {
        #[arg(long)]
        excess: PathBuf,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Binary token masks keeping the top k% of each response.
    Select {
        #[arg(long)]
        excess: PathBuf,
        #[arg(long)]
        k: f64,
        /// Allow zero kept tokens when floor(k% * L) is 0.
        #[arg(long)]
        strict_floor: bool,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to (and order by) a kept-set file.
        #[arg(long)]
        kept: Option<PathBuf>,
        /// With --dataset, the traces the masks refer to.
        #[arg(long, requires = "dataset")]
        traces: Option<PathBuf>,
        /// Also write a masked dataset in source-token space.
        #[arg(long, requires = "traces")]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "toy-expert")]
        source_model_tag: String,
        #[arg(long, default_value = "toy-char")]
        source_tok: String,
    },
    /// Carry a masked dataset into another tokenizer's token space.
    Align {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        source_tok: String,
        #[arg(long)]
        target_tok: String,
        #[arg(long)]
        k: f64,
        #[arg(long, value_enum, default_value = "skip")]
        on_error: OnErrorArg,
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic pool through the configured generator.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Run the whole pipeline from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: bool,
        /// Use the toy model for every endpoint.
        #[arg(long)]
        toy: bool,
        /// Override out_dir from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Copy the dataset of a completed run.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the toy expert over stdin/stdout.
    ServeToy {
        #[arg(long, value_enum, default_value = "generator")]
        role: Role,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        adapter: Option<PathBuf>,
        #[arg(long, default_value = "toy-char")]
        tokenizer: String,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
    },
    /// Fit a toy base model and adapter from corpus files (one text per line).
    ToyFit {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value = "toy-char")]
        tokenizer: String,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        out_adapter: PathBuf,
    },
    /// Check a trace file or a masked dataset.
    Validate {
        #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
        traces: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Token-kept summary of a masked dataset.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn score(traces: &Path, out: &Path) -> Result<()> {
    let mut reports = Vec::new();
    for t in JsonlReader::<_, ScoredTrace>::open(traces)? {
        let t = t?;
        reports.push(excess_scores(&t).map_err(|e| Error::Record {
            sample_id: t.sample_id.clone(),
            source: Box::new(e),
        })?);
    }
    write_jsonl(out, &reports)?;
    eprintln!("scored {} traces", reports.len());
    Ok(())
}

fn filter(excess: &Path, m: usize, out: &Path) -> Result<()> {
    let reports: Vec<ExcessReport> = read_jsonl(excess)?;
    let kept = filter_samples_ranked(&reports, m)?;
    write_jsonl(out, &kept)?;
    eprintln!("kept {} of {} samples", kept.len(), reports.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn select(
    excess: &Path,
    k: f64,
    strict_floor: bool,
    out: &Path,
    kept: Option<&Path>,
    traces: Option<&Path>,
    dataset: Option<&Path>,
    source_model_tag: &str,
    source_tok: &str,
) -> Result<()> {
    let mut reports: Vec<ExcessReport> = read_jsonl(excess)?;
    if let Some(kept) = kept {
        let kept: Vec<KeptSample> = read_jsonl(kept)?;
        let by_id: BTreeMap<String, ExcessReport> = reports
            .into_iter()
            .map(|r| (r.sample_id.clone(), r))
            .collect();
        reports = kept
            .iter()
            .map(|k| {
                by_id.get(&k.sample_id).cloned().ok_or_else(|| Error::InvalidRecord {
                    sample_id: k.sample_id.clone(),
                    reason: "kept sample has no excess report".into(),
                })
            })
            .collect::<Result<_>>()?;
    }
    let policy = RankPolicy {
        floor_min_one: !strict_floor,
    };
    let masks = reports
        .iter()
        .map(|r| select_tokens_with(r, k, policy))
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(out, &masks)?;
    if let (Some(traces), Some(dataset)) = (traces, dataset) {
        let traces: BTreeMap<String, ScoredTrace> = read_jsonl::<ScoredTrace>(traces)?
            .into_iter()
            .map(|t| (t.sample_id.clone(), t))
            .collect();
        let mut records = Vec::new();
        for mask in &masks {
            let t = traces.get(&mask.sample_id).ok_or_else(|| Error::InvalidRecord {
                sample_id: mask.sample_id.clone(),
                reason: "no trace for mask".into(),
            })?;
            if mask.kept_count() == 0 {
                continue;
            }
            records.push(MaskedRecord {
                mask: mask.clone(),
                query_text: t.query_text.clone(),
                response_text: t.response_text.clone(),
                sample_id: t.sample_id.clone(),
                token_ids: t.tokens.iter().map(|x| x.token_id).collect(),
            });
        }
        let ds = MaskedDataset {
            meta: DatasetMeta {
                k_percent: k,
                m_kept: records.len(),
                source_model_tag: source_model_tag.to_string(),
                target_tokenizer_tag: source_tok.to_string(),
            },
            records,
        };
        ds.check()?;
        write_masked_dataset(dataset, &ds)?;
    }
    eprintln!("wrote {} masks", masks.len());
    Ok(())
}

fn align(
    input: &Path,
    source_tok: &str,
    target_tok: &str,
    k: f64,
    on_error: OnErrorArg,
    strict: bool,
    out: &Path,
) -> Result<()> {
    let ds = read_masked_dataset(input)?;
    let src = tokenizer_by_tag(source_tok)?;
    let tgt = tokenizer_by_tag(target_tok)?;
    let mut opts = AlignDatasetOptions {
        on_error: match on_error {
            OnErrorArg::Skip => OnError::Skip,
            OnErrorArg::Abort => OnError::Abort,
        },
        ..Default::default()
    };
    opts.align.strict = strict;
    let outcome = align_dataset(&ds, src.as_ref(), tgt.as_ref(), k, &opts)?;
    write_masked_dataset(out, &outcome.dataset)?;
    eprintln!(
        "aligned {} records, skipped {}",
        outcome.dataset.records.len(),
        outcome.skipped.len()
    );
    Ok(())
}

fn load_config(path: &Path) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::from_file(path).map_err(as_config_error)?;
    cfg.apply_env_overrides().map_err(as_config_error)?;
    cfg.validate()?;
    Ok(cfg)
}

fn as_config_error(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn gen(config: &Path, seeds: Option<&Path>, out: &Path, log: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seeds {
        cfg.few_shot = Some(s.to_path_buf());
    }
    titok::pipeline::check_locators(&cfg)?;
    let world = if titok::pipeline::needs_toy_world(&cfg) {
        Some(toy_world(&cfg)?)
    } else {
        None
    };
    let shots: Vec<SeedExample> = match (&cfg.few_shot, &world) {
        (Some(p), _) => read_jsonl(p)?,
        (None, Some(w)) => w.few_shot(5),
        (None, None) => return Err(Error::Config("--seeds is required".into())),
    };
    let mut builder = PoolBuilder::new(&cfg, &shots);
    if let Some(p) = &cfg.query_template {
        builder.query_template = PromptTemplate::from_file(p)?;
    }
    if let Some(p) = &cfg.label_template {
        builder.label_template = PromptTemplate::from_file(p)?;
    }
    let mut generator = titok::pipeline::generator_from_locator(&cfg.generator, world.as_ref())?;
    let mut query_gen = match &cfg.query_generator {
        Some(l) => Some(titok::pipeline::generator_from_locator(l, world.as_ref())?),
        None => None,
    };
    let result = builder.build(
        generator.as_mut(),
        query_gen
            .as_mut()
            .map(|g| g.as_mut() as &mut dyn titok::synthgen::Generator),
    );
    match result {
        Ok(pool) => {
            write_jsonl(out, &pool.entries)?;
            write_jsonl(log, &pool.rejects)?;
            eprintln!(
                "pool of {} after {} attempts ({} rejected)",
                pool.entries.len(),
                pool.attempts,
                pool.rejects.len()
            );
            Ok(())
        }
        Err(f) => {
            write_jsonl(out, &f.partial.entries)?;
            write_jsonl(log, &f.partial.rejects)?;
            Err(f.error)
        }
    }
}

fn run(config: &Path, resume: bool, toy: bool, out_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if toy {
        cfg.generator = "toy".into();
        cfg.query_generator = None;
        cfg.scorer = "toy".into();
    }
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    let m = run_pipeline(&cfg, RunOptions { resume })?;
    for s in &m.stages {
        let note = s.note.as_deref().unwrap_or("");
        eprintln!("{:<9} {:?} {:>6} ms {note}", s.name, s.status, s.wall_ms);
    }
    eprintln!("run complete in {}", cfg.out_dir.display());
    Ok(())
}

fn serve_toy(
    role: Role,
    model: Option<&Path>,
    adapter: Option<&Path>,
    tokenizer: &str,
    alpha: f64,
) -> Result<()> {
    let world = match model {
        Some(m) => {
            let base = ToyLM::load(m)?;
            let adapter = match adapter {
                Some(a) => ToyAdapter::load(a)?.0,
                None => ToyAdapter::default(),
            };
            let tok = tokenizer_by_tag(base.tokenizer_tag())?;
            ToyWorld {
                base_corpus: Vec::new(),
                task_corpus: Vec::new(),
                heldout_task: Vec::new(),
                tokenizer: tok,
                base,
                adapter,
            }
        }
        None => ToyWorld::standard(tokenizer, alpha)?,
    };
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    match role {
        Role::Generator => {
            let g = ToyGenerator {
                model: world.base.clone(),
                adapter: Some(world.adapter.clone()),
                tokenizer: world.tokenizer.clone(),
            };
            serve_lines(stdin, stdout, |r| g.respond(r))
        }
        Role::Scorer => {
            let mut s = ToyScorer { world: &world };
            serve_score_lines(stdin, stdout, |r| s.score(r))
        }
    }
}

fn toy_fit(
    base: &Path,
    task: &Path,
    tokenizer: &str,
    alpha: f64,
    out_model: &Path,
    out_adapter: &Path,
) -> Result<()> {
    let lines = |p: &Path| -> Result<Vec<String>> {
        Ok(std::fs::read_to_string(p)
            .map_err(|e| Error::IoAt {
                path: p.to_path_buf(),
                source: e,
            })?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().to_string())
            .collect())
    };
    let tok = tokenizer_by_tag(tokenizer)?;
    let model = fit_bigram_with(tok.as_ref(), &lines(base)?, alpha)?;
    let adapter = fit_adapter_with(&model, tok.as_ref(), &lines(task)?)?;
    model.save(out_model)?;
    adapter.save(out_adapter, model.vocab_size())?;
    eprintln!("planted {} bigrams", adapter.delta.len());
    Ok(())
}

fn validate(traces: Option<&Path>, dataset: Option<&Path>) -> Result<bool> {
    let mut out = io::stdout().lock();
    if let Some(p) = traces {
        let mut bad = 0;
        let mut n = 0;
        for t in JsonlReader::<_, ScoredTrace>::open(p)? {
            let t = t?;
            n += 1;
            let verdict = validate_trace(&t);
            if !verdict.is_ok() {
                bad += 1;
                for v in verdict.violations() {
                    writeln!(out, "{}: {v}", t.sample_id)?;
                }
            }
        }
        writeln!(out, "{n} traces, {bad} invalid")?;
        return Ok(bad == 0);
    }
    let p = dataset.expect("clap requires one of the inputs");
    match read_masked_dataset(p).and_then(|d| d.check().map(|_| d)) {
        Ok(d) => {
            writeln!(out, "{} records, {} tokens kept: ok", d.records.len(), d.tokens_kept())?;
            Ok(true)
        }
        Err(e) => {
            writeln!(out, "invalid: {e}")?;
            Ok(false)
        }
    }
}

fn stats(dataset: &Path) -> Result<()> {
    let d = read_masked_dataset(dataset)?;
    let s = apply_mask_stats(&d);
    let text = serde_json::to_string_pretty(&s)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let is_run = matches!(cli.command, Command::Run { .. });
    let result = match cli.command {
        Command::Score { traces, out } => score(&traces, &out),
        Command::Filter { excess, m, out } => filter(&excess, m, &out),
        Command::Select {
            excess,
            k,
            strict_floor,
            out,
            kept,
            traces,
            dataset,
            source_model_tag,
            source_tok,
        } => select(
            &excess,
            k,
            strict_floor,
            &out,
            kept.as_deref(),
            traces.as_deref(),
            dataset.as_deref(),
            &source_model_tag,
            &source_tok,
        ),
        Command::Align {
            input,
            source_tok,
            target_tok,
            k,
            on_error,
            strict,
            out,
        } => align(&input, &source_tok, &target_tok, k, on_error, strict, &out),
        Command::Gen {
            config,
            seeds,
            out,
            log,
        } => gen(&config, seeds.as_deref(), &out, &log),
        Command::Run {
            config,
            resume,
            toy,
            out_dir,
        } => run(&config, resume, toy, out_dir),
        Command::Export { run, out } => {
            export_masked_dataset(&run).and_then(|d| write_export(&d, &out))
        }
        Command::ServeToy {
            role,
            model,
            adapter,
            tokenizer,
            alpha,
        } => serve_toy(role, model.as_deref(), adapter.as_deref(), &tokenizer, alpha),
        Command::ToyFit {
            base,
            task,
            tokenizer,
            alpha,
            out_model,
            out_adapter,
        } => toy_fit(&base, &task, &tokenizer, alpha, &out_model, &out_adapter),
        Command::Validate { traces, dataset } => match validate(traces.as_deref(), dataset.as_deref()) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::Stats { dataset } => stats(&dataset),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let root = match &e {
                Error::Stage { source, .. } => source.as_ref(),
                other => other,
            };
            match root {
                Error::Config(_) => ExitCode::from(2),
                _ if is_run => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

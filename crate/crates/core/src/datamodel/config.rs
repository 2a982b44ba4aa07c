//! Pipeline configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeSetting {
    Disabled,
    Threshold(f64),
}

impl RougeSetting {
    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("disabled") || s.eq_ignore_ascii_case("off") {
            return Ok(RougeSetting::Disabled);
        }
        let t: f64 = s
            .parse()
            .map_err(|_| Error::Config(format!("rouge_threshold `{s}` is not a number")))?;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!("rouge_threshold {t} outside (0, 1]")));
        }
        Ok(RougeSetting::Threshold(t))
    }
}

impl std::fmt::Display for RougeSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RougeSetting::Disabled => f.write_str("disabled"),
            RougeSetting::Threshold(t) => write!(f, "{t}"),
        }
    }
}

/// Everything a pipeline run needs. Defaults: k = 70, ROUGE-L threshold 0.7,
/// dedup on, pool size N = 2M.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub pool_size: usize,
    pub keep_m: usize,
    pub k_percent: f64,
    pub rouge_threshold: RougeSetting,
    /// Reject at `score >= threshold` instead of `score > threshold`.
    pub rouge_reject_at_threshold: bool,
    pub dedup: bool,
    pub seed: u64,
    pub task: String,
    pub tokenizer_source: String,
    pub tokenizer_target: String,
    pub source_model_tag: String,
    /// Generator locator: `toy` or `exec:<command line>`.
    pub generator: String,
    /// Optional separate endpoint for queries; labels always use `generator`.
    pub query_generator: Option<String>,
    /// Scorer locator: `toy`, `traces:<path>` or `exec:<command line>`.
    pub scorer: String,
    pub out_dir: PathBuf,
    pub few_shot: Option<PathBuf>,
    pub query_template: Option<PathBuf>,
    pub label_template: Option<PathBuf>,
    pub temperature: f64,
    pub top_p: f64,
    pub greedy: bool,
    pub max_query_tokens: usize,
    pub max_label_tokens: usize,
    pub generator_retries: usize,
    /// Generation attempts allowed per pool slot before admission starvation.
    pub attempt_factor: usize,
    /// Keep at least one token per response even when floor(k% * L) is 0.
    pub floor_min_one: bool,
    pub align_skip_errors: bool,
    pub align_strict: bool,
    pub toy_alpha: f64,
    pub toy_base_corpus: Option<PathBuf>,
    pub toy_task_corpus: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            pool_size: 80,
            keep_m: 40,
            k_percent: 70.0,
            rouge_threshold: RougeSetting::Threshold(0.7),
            rouge_reject_at_threshold: false,
            dedup: true,
            seed: 0,
            task: "toy".into(),
            tokenizer_source: "toy-char".into(),
            tokenizer_target: "toy-char".into(),
            source_model_tag: "toy-expert".into(),
            generator: "toy".into(),
            query_generator: None,
            scorer: "toy".into(),
            out_dir: PathBuf::from("titok-run"),
            few_shot: None,
            query_template: None,
            label_template: None,
            temperature: 1.0,
            top_p: 0.95,
            greedy: false,
            max_query_tokens: 24,
            max_label_tokens: 48,
            generator_retries: 3,
            attempt_factor: 20,
            floor_min_one: true,
            align_skip_errors: true,
            align_strict: false,
            toy_alpha: 0.1,
            toy_base_corpus: None,
            toy_task_corpus: None,
        }
    }
}

const ENV_OVERRIDES: [(&str, &str); 3] = [
    ("TITOK_GENERATOR", "generator"),
    ("TITOK_QUERY_GENERATOR", "query_generator"),
    ("TITOK_SCORER", "scorer"),
];

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: `{v}` is not a boolean"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not a valid number")))
}

impl PipelineConfig {
    /// Parses the flat config format. Relative paths resolve against `base_dir`.
    ///
    /// `pool_size` defaults to twice `keep_m` when absent.
    pub fn from_kv_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut pool_set = false;
        let mut m_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "pool_size" {
                pool_set = true;
            }
            if key == "keep_m" {
                m_set = true;
            }
            cfg.set(key, value, base_dir)
                .map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                    other => Error::Config(format!("line {}: {other}", n + 1)),
                })?;
        }
        if m_set && !pool_set {
            cfg.pool_size = 2 * cfg.keep_m;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv_str(&text, base)
    }

    /// Applies `TITOK_GENERATOR`, `TITOK_QUERY_GENERATOR` and `TITOK_SCORER`.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        for (var, key) in ENV_OVERRIDES {
            if let Ok(v) = std::env::var(var) {
                self.set(key, &v, Path::new("."))?;
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str, base_dir: &Path) -> Result<()> {
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        match key {
            "pool_size" => self.pool_size = parse_num(key, v)?,
            "keep_m" => self.keep_m = parse_num(key, v)?,
            "k_percent" => self.k_percent = parse_num(key, v)?,
            "rouge_threshold" => self.rouge_threshold = RougeSetting::parse(v)?,
            "rouge_reject_at_threshold" => self.rouge_reject_at_threshold = parse_bool(key, v)?,
            "dedup" => self.dedup = parse_bool(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "task" => self.task = v.to_string(),
            "tokenizer_source" => self.tokenizer_source = v.to_string(),
            "tokenizer_target" => self.tokenizer_target = v.to_string(),
            "source_model_tag" => self.source_model_tag = v.to_string(),
            "generator" => self.generator = v.to_string(),
            "query_generator" => {
                self.query_generator = if v.is_empty() {
                    None
                } else {
                    Some(v.to_string())
                }
            }
            "scorer" => self.scorer = v.to_string(),
            "out_dir" => self.out_dir = path(v),
            "few_shot" => self.few_shot = Some(path(v)),
            "query_template" => self.query_template = Some(path(v)),
            "label_template" => self.label_template = Some(path(v)),
            "temperature" => self.temperature = parse_num(key, v)?,
            "top_p" => self.top_p = parse_num(key, v)?,
            "greedy" => self.greedy = parse_bool(key, v)?,
            "max_query_tokens" => self.max_query_tokens = parse_num(key, v)?,
            "max_label_tokens" => self.max_label_tokens = parse_num(key, v)?,
            "generator_retries" => self.generator_retries = parse_num(key, v)?,
            "attempt_factor" => self.attempt_factor = parse_num(key, v)?,
            "floor_min_one" => self.floor_min_one = parse_bool(key, v)?,
            "align_on_error" => {
                self.align_skip_errors = match v {
                    "skip" => true,
                    "abort" => false,
                    _ => return Err(Error::Config(format!("align_on_error: `{v}`"))),
                }
            }
            "align_strict" => self.align_strict = parse_bool(key, v)?,
            "toy_alpha" => self.toy_alpha = parse_num(key, v)?,
            "toy_base_corpus" => self.toy_base_corpus = Some(path(v)),
            "toy_task_corpus" => self.toy_task_corpus = Some(path(v)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.keep_m == 0 {
            return bad("keep_m must be positive".into());
        }
        if self.pool_size < self.keep_m {
            return bad(format!(
                "keep_m {} exceeds pool_size {}",
                self.keep_m, self.pool_size
            ));
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return bad(format!("k_percent {} outside (0, 100]", self.k_percent));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be >= 0", self.temperature));
        }
        if self.attempt_factor == 0 {
            return bad("attempt_factor must be positive".into());
        }
        if self.toy_alpha <= 0.0 || !self.toy_alpha.is_finite() {
            return bad(format!("toy_alpha {} must be > 0", self.toy_alpha));
        }
        if self.max_label_tokens == 0 || self.max_query_tokens == 0 {
            return bad("max token budgets must be positive".into());
        }
        Ok(())
    }

    /// Renders the config back into the flat format.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("pool_size", self.pool_size.to_string());
        put("keep_m", self.keep_m.to_string());
        put("k_percent", self.k_percent.to_string());
        put("rouge_threshold", self.rouge_threshold.to_string());
        put(
            "rouge_reject_at_threshold",
            self.rouge_reject_at_threshold.to_string(),
        );
        put("dedup", self.dedup.to_string());
        put("seed", self.seed.to_string());
        put("task", self.task.clone());
        put("tokenizer_source", self.tokenizer_source.clone());
        put("tokenizer_target", self.tokenizer_target.clone());
        put("source_model_tag", self.source_model_tag.clone());
        put("generator", self.generator.clone());
        if let Some(q) = &self.query_generator {
            put("query_generator", q.clone());
        }
        put("scorer", self.scorer.clone());
        put("out_dir", self.out_dir.display().to_string());
        for (k, v) in [
            ("few_shot", opt(&self.few_shot)),
            ("query_template", opt(&self.query_template)),
            ("label_template", opt(&self.label_template)),
            ("toy_base_corpus", opt(&self.toy_base_corpus)),
            ("toy_task_corpus", opt(&self.toy_task_corpus)),
        ] {
            if let Some(v) = v {
                put(k, v);
            }
        }
        put("temperature", self.temperature.to_string());
        put("top_p", self.top_p.to_string());
        put("greedy", self.greedy.to_string());
        put("max_query_tokens", self.max_query_tokens.to_string());
        put("max_label_tokens", self.max_label_tokens.to_string());
        put("generator_retries", self.generator_retries.to_string());
        put("attempt_factor", self.attempt_factor.to_string());
        put("floor_min_one", self.floor_min_one.to_string());
        put(
            "align_on_error",
            if self.align_skip_errors { "skip" } else { "abort" }.to_string(),
        );
        put("align_strict", self.align_strict.to_string());
        put("toy_alpha", self.toy_alpha.to_string());
        s
    }
}

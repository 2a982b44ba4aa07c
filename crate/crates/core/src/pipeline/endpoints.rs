//! Scorer and generator endpoints named by config locators.
//!
//! Generators: `toy` or `exec:<command>` (line protocol from
//! [`crate::synthgen`]). Scorers: `toy`, `traces:<path>` (precomputed trace
//! JSONL keyed by sample id) or `exec:<command>`, which reads one
//! [`ScoreRequest`] line and answers with one trace line.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::alignment::tokenizer_by_tag;
use crate::datamodel::{read_jsonl, to_canonical_line, PipelineConfig, ScoredTrace};
use crate::error::{Error, Result};
use crate::synthgen::{Generator, SubprocessGenerator};
use crate::toylab::{toy_score, ToyWorld};

/// One scoring request on the `exec:` scorer protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub query_text: String,
    pub response_text: String,
    pub sample_id: String,
}

#[derive(Serialize)]
struct ScoreFailure<'a> {
    error: String,
    sample_id: &'a str,
}

pub trait Scorer {
    fn score(&mut self, request: &ScoreRequest) -> Result<ScoredTrace>;
}

pub struct ToyScorer<'w> {
    pub world: &'w ToyWorld,
}

impl Scorer for ToyScorer<'_> {
    fn score(&mut self, r: &ScoreRequest) -> Result<ScoredTrace> {
        toy_score(
            &self.world.base,
            Some(&self.world.adapter),
            self.world.tokenizer.as_ref(),
            &r.sample_id,
            &r.query_text,
            &r.response_text,
        )
    }
}

/// Looks up precomputed traces and checks they describe the same texts.
pub struct CachedScorer {
    traces: HashMap<String, ScoredTrace>,
    source: PathBuf,
}

impl CachedScorer {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut traces = HashMap::new();
        for t in read_jsonl::<ScoredTrace>(path)? {
            if traces.contains_key(&t.sample_id) {
                return Err(Error::DuplicateSampleId(t.sample_id));
            }
            traces.insert(t.sample_id.clone(), t);
        }
        Ok(CachedScorer {
            traces,
            source: path.to_path_buf(),
        })
    }
}

impl Scorer for CachedScorer {
    fn score(&mut self, r: &ScoreRequest) -> Result<ScoredTrace> {
        let t = self.traces.get(&r.sample_id).ok_or_else(|| Error::InvalidRecord {
            sample_id: r.sample_id.clone(),
            reason: format!("no trace in {}", self.source.display()),
        })?;
        if t.query_text != r.query_text || t.response_text != r.response_text {
            return Err(Error::InvalidRecord {
                sample_id: r.sample_id.clone(),
                reason: "cached trace texts differ from the pool entry".into(),
            });
        }
        Ok(t.clone())
    }
}

/// Scorer process speaking one request line in, one trace line out.
pub struct ExecScorer {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    stdout: BufReader<ChildStdout>,
    command: String,
}

impl ExecScorer {
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::InvalidArgument(format!("cannot spawn `{command}`: {e}")))?;
        let stdin = child.stdin.take().map(BufWriter::new);
        let stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        Ok(ExecScorer {
            child,
            stdin,
            stdout,
            command: command.to_string(),
        })
    }
}

fn strip_version(mut v: serde_json::Value) -> serde_json::Value {
    if let Some(m) = v.as_object_mut() {
        m.remove("format_version");
    }
    v
}

impl Scorer for ExecScorer {
    fn score(&mut self, r: &ScoreRequest) -> Result<ScoredTrace> {
        let fail = |m: String| Error::InvalidRecord {
            sample_id: r.sample_id.clone(),
            reason: m,
        };
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| fail("scorer stdin closed".into()))?;
        writeln!(stdin, "{}", to_canonical_line(r)?)
            .and_then(|_| stdin.flush())
            .map_err(|e| fail(format!("`{}`: write failed: {e}", self.command)))?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line)? == 0 {
            return Err(fail(format!("`{}` closed its output", self.command)));
        }
        let v: serde_json::Value =
            serde_json::from_str(line.trim_end()).map_err(|e| fail(format!("bad trace line: {e}")))?;
        if let Some(msg) = v.get("error").and_then(|e| e.as_str()) {
            return Err(fail(format!("scorer error: {msg}")));
        }
        let trace: ScoredTrace =
            serde_json::from_value(strip_version(v)).map_err(|e| fail(format!("bad trace: {e}")))?;
        if trace.sample_id != r.sample_id {
            return Err(fail(format!("scorer answered for `{}`", trace.sample_id)));
        }
        Ok(trace)
    }
}

impl Drop for ExecScorer {
    fn drop(&mut self) {
        self.stdin.take();
        let _ = self.child.wait();
    }
}

/// Runs the scorer side of the `exec:` protocol until EOF. Failures are
/// answered with `{"error": ..., "sample_id": ...}` and serving continues.
pub fn serve_score_lines<R: BufRead, W: Write>(
    input: R,
    output: W,
    mut handler: impl FnMut(&ScoreRequest) -> Result<ScoredTrace>,
) -> Result<()> {
    let mut out = BufWriter::new(output);
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<serde_json::Value>(&line)
            .map_err(|e| e.to_string())
            .and_then(|v| {
                serde_json::from_value::<ScoreRequest>(strip_version(v)).map_err(|e| e.to_string())
            });
        let reply = match parsed {
            Ok(req) => match handler(&req) {
                Ok(t) => to_canonical_line(&t)?,
                Err(e) => to_canonical_line(&ScoreFailure {
                    error: e.to_string(),
                    sample_id: &req.sample_id,
                })?,
            },
            Err(e) => to_canonical_line(&ScoreFailure {
                error: format!("malformed request: {e}"),
                sample_id: "",
            })?,
        };
        writeln!(out, "{reply}")?;
        out.flush()?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Toy world for a config: bundled corpora unless both corpus files are set.
pub fn toy_world(cfg: &PipelineConfig) -> Result<ToyWorld> {
    match (&cfg.toy_base_corpus, &cfg.toy_task_corpus) {
        (Some(base), Some(task)) => ToyWorld::from_corpora(
            read_lines(base)?,
            read_lines(task)?,
            Vec::new(),
            tokenizer_by_tag(&cfg.tokenizer_source)?,
            cfg.toy_alpha,
        ),
        (None, None) => ToyWorld::standard(&cfg.tokenizer_source, cfg.toy_alpha),
        _ => Err(Error::Config(
            "toy_base_corpus and toy_task_corpus must be set together".into(),
        )),
    }
}

pub fn needs_toy_world(cfg: &PipelineConfig) -> bool {
    cfg.generator == "toy" || cfg.scorer == "toy" || cfg.query_generator.as_deref() == Some("toy")
}

pub fn generator_from_locator(
    locator: &str,
    world: Option<&ToyWorld>,
) -> Result<Box<dyn Generator>> {
    if locator == "toy" {
        let w = world.ok_or_else(|| Error::Config("toy generator needs the toy world".into()))?;
        return Ok(Box::new(w.expert_generator()));
    }
    match locator.strip_prefix("exec:") {
        Some(cmd) => Ok(Box::new(SubprocessGenerator::spawn(cmd)?)),
        None => Err(Error::Config(format!("unknown generator locator `{locator}`"))),
    }
}

pub fn scorer_from_locator<'w>(
    locator: &str,
    world: Option<&'w ToyWorld>,
) -> Result<Box<dyn Scorer + 'w>> {
    if locator == "toy" {
        let w = world.ok_or_else(|| Error::Config("toy scorer needs the toy world".into()))?;
        return Ok(Box::new(ToyScorer { world: w }));
    }
    if let Some(path) = locator.strip_prefix("traces:") {
        return Ok(Box::new(CachedScorer::open(path)?));
    }
    match locator.strip_prefix("exec:") {
        Some(cmd) => Ok(Box::new(ExecScorer::spawn(cmd)?)),
        None => Err(Error::Config(format!("unknown scorer locator `{locator}`"))),
    }
}

/// Checks that generator and scorer locators are well formed.
pub fn check_locators(cfg: &PipelineConfig) -> Result<()> {
    let gen_ok = |l: &str| l == "toy" || l.starts_with("exec:");
    let mut gens = vec![cfg.generator.as_str()];
    gens.extend(cfg.query_generator.as_deref());
    for g in gens {
        if !gen_ok(g) {
            return Err(Error::Config(format!("unknown generator locator `{g}`")));
        }
    }
    let s = cfg.scorer.as_str();
    if !(s == "toy" || s.starts_with("traces:") || s.starts_with("exec:")) {
        return Err(Error::Config(format!("unknown scorer locator `{s}`")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: &str) -> ScoreRequest {
        ScoreRequest {
            query_text: "q".into(),
            response_text: "zq jzk".into(),
            sample_id: id.into(),
        }
    }

    #[test]
    fn serve_scores_and_reports_failures() {
        let w = ToyWorld::standard("toy-char", 0.1).unwrap();
        let mut s = ToyScorer { world: &w };
        let bad = ScoreRequest {
            response_text: "UPPER".into(),
            ..req("b")
        };
        let input = format!(
            "{}\nnot json\n{}\n",
            to_canonical_line(&req("a")).unwrap(),
            to_canonical_line(&bad).unwrap()
        );
        let mut out = Vec::new();
        serve_score_lines(input.as_bytes(), &mut out, |r| s.score(r)).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["tokens"].as_array().unwrap().len(), 6);
        assert!(lines[1]["error"].is_string());
        assert_eq!(lines[2]["sample_id"], "b");
    }

    #[test]
    fn cached_scorer_checks_texts() {
        let w = ToyWorld::standard("toy-char", 0.1).unwrap();
        let t = ToyScorer { world: &w }.score(&req("a")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        crate::datamodel::write_jsonl(&p, [&t]).unwrap();
        let mut c = CachedScorer::open(&p).unwrap();
        assert_eq!(c.score(&req("a")).unwrap(), t);
        assert!(c.score(&req("missing")).is_err());
        let other = ScoreRequest {
            response_text: "zq".into(),
            ..req("a")
        };
        assert!(c.score(&other).is_err());
    }

    #[test]
    fn locators() {
        let mut cfg = PipelineConfig::default();
        assert!(check_locators(&cfg).is_ok());
        cfg.scorer = "http://x".into();
        assert!(matches!(check_locators(&cfg), Err(Error::Config(_))));
        cfg.scorer = "traces:/tmp/x".into();
        cfg.generator = "exec:cat".into();
        assert!(check_locators(&cfg).is_ok());
        assert!(!needs_toy_world(&cfg));
    }
}

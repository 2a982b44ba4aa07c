//! Line-delimited generator protocol.
//!
//! The client writes one JSON [`GenRequest`] per line to the endpoint's stdin
//! and reads exactly one JSON [`GenResponse`] line back. A malformed request
//! gets a response with `finish_reason = "error"` and the endpoint keeps
//! serving.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::datamodel::to_canonical_line;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenRole {
    Query,
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub greedy: bool,
    pub max_tokens: usize,
    pub prompt: String,
    pub request_index: usize,
    pub role: GenRole,
    pub seed: u64,
    #[serde(default)]
    pub stop_markers: Vec<String>,
    #[serde(default)]
    pub system: String,
    pub temperature: f64,
    pub top_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub finish_reason: FinishReason,
    pub request_index: usize,
    pub seed: u64,
    pub text: String,
}

impl GenResponse {
    pub fn failure(request_index: usize, seed: u64, message: impl Into<String>) -> Self {
        GenResponse {
            error: Some(message.into()),
            finish_reason: FinishReason::Error,
            request_index,
            seed,
            text: String::new(),
        }
    }
}

/// Anything that turns a request into generated text.
pub trait Generator {
    fn generate(&mut self, request: &GenRequest) -> Result<GenResponse>;
}

impl<F> Generator for F
where
    F: FnMut(&GenRequest) -> Result<GenResponse>,
{
    fn generate(&mut self, request: &GenRequest) -> Result<GenResponse> {
        self(request)
    }
}

/// Generator endpoint running as a child process speaking the line protocol.
pub struct SubprocessGenerator {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    stdout: BufReader<ChildStdout>,
    command: String,
}

impl SubprocessGenerator {
    /// Spawns `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Generator(format!("cannot spawn `{command}`: {e}")))?;
        let stdin = child.stdin.take().map(BufWriter::new);
        let stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        Ok(SubprocessGenerator {
            child,
            stdin,
            stdout,
            command: command.to_string(),
        })
    }
}

impl Generator for SubprocessGenerator {
    fn generate(&mut self, request: &GenRequest) -> Result<GenResponse> {
        let gen_err = |m: String| Error::Generator(m);
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| gen_err("endpoint stdin closed".into()))?;
        let line = to_canonical_line(request)?;
        writeln!(stdin, "{line}")
            .and_then(|_| stdin.flush())
            .map_err(|e| gen_err(format!("`{}`: write failed: {e}", self.command)))?;
        let mut buf = String::new();
        let n = self
            .stdout
            .read_line(&mut buf)
            .map_err(|e| gen_err(format!("`{}`: read failed: {e}", self.command)))?;
        if n == 0 {
            return Err(gen_err(format!("`{}` closed its output", self.command)));
        }
        let mut value: serde_json::Value = serde_json::from_str(buf.trim_end())
            .map_err(|e| gen_err(format!("bad response line: {e}")))?;
        if let Some(map) = value.as_object_mut() {
            map.remove("format_version");
        }
        serde_json::from_value(value).map_err(|e| gen_err(format!("bad response: {e}")))
    }
}

impl Drop for SubprocessGenerator {
    fn drop(&mut self) {
        // Closing stdin lets a well-behaved endpoint exit on EOF.
        self.stdin.take();
        let _ = self.child.wait();
    }
}

/// Runs the endpoint side of the protocol until EOF on `input`.
pub fn serve_lines<R: BufRead, W: Write>(
    input: R,
    output: W,
    mut handler: impl FnMut(&GenRequest) -> GenResponse,
) -> Result<()> {
    let mut out = BufWriter::new(output);
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match parse_request(&line) {
            Ok(req) => handler(&req),
            Err(msg) => {
                let index = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("request_index").and_then(|i| i.as_u64()))
                    .unwrap_or(0) as usize;
                GenResponse::failure(index, 0, msg)
            }
        };
        writeln!(out, "{}", to_canonical_line(&response)?)?;
        out.flush()?;
    }
    Ok(())
}

fn parse_request(line: &str) -> std::result::Result<GenRequest, String> {
    let mut value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| format!("malformed request: {e}"))?;
    if let Some(map) = value.as_object_mut() {
        map.remove("format_version");
    }
    serde_json::from_value(value).map_err(|e| format!("malformed request: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(i: usize) -> GenRequest {
        GenRequest {
            greedy: false,
            max_tokens: 8,
            prompt: "hi".into(),
            request_index: i,
            role: GenRole::Query,
            seed: 42,
            stop_markers: vec![],
            system: String::new(),
            temperature: 1.0,
            top_p: 0.9,
        }
    }

    #[test]
    fn serve_echoes_and_survives_bad_lines() {
        let input = format!(
            "{}\nnot json\n{{\"request_index\": 5}}\n{}\n",
            to_canonical_line(&request(0)).unwrap(),
            to_canonical_line(&request(1)).unwrap()
        );
        let mut out = Vec::new();
        serve_lines(input.as_bytes(), &mut out, |r| GenResponse {
            error: None,
            finish_reason: FinishReason::Stop,
            request_index: r.request_index,
            seed: r.seed,
            text: r.prompt.to_uppercase(),
        })
        .unwrap();
        let lines: Vec<GenResponse> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| parse_response(l))
            .collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].text, "HI");
        assert_eq!(lines[1].finish_reason, FinishReason::Error);
        assert_eq!(lines[2].request_index, 5);
        assert_eq!(lines[2].finish_reason, FinishReason::Error);
        assert_eq!(lines[3].request_index, 1);
    }

    fn parse_response(l: &str) -> GenResponse {
        let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
        v.as_object_mut().unwrap().remove("format_version");
        serde_json::from_value(v).unwrap()
    }

    #[test]
    fn subprocess_round_trip_through_cat_like_endpoint() {
        // Shell loop answering every request with a fixed record.
        let reply = r#"{"finish_reason":"stop","request_index":0,"seed":42,"text":"ok"}"#;
        let cmd = format!("while read -r line; do echo '{reply}'; done");
        let mut g = SubprocessGenerator::spawn(&cmd).unwrap();
        let r = g.generate(&request(0)).unwrap();
        assert_eq!(r.text, "ok");
        let r = g.generate(&request(0)).unwrap();
        assert_eq!(r.seed, 42);
    }

    #[test]
    fn subprocess_eof_is_a_generator_error() {
        let mut g = SubprocessGenerator::spawn("true").unwrap();
        assert!(matches!(g.generate(&request(0)), Err(Error::Generator(_))));
    }
}

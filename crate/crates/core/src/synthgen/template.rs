//! Prompt templates with `{name}` placeholders.
//!
//! Template files hold up to three sections:
//!
//! ```text
//! [system]
//! You write short practice questions.
//! [user]
//! Here are {seed_count} examples:
//! {example_1}
//! [stop]
//! ###
//! ```
//!
//! `{{` and `}}` render as literal braces. Every placeholder must be bound at
//! render time.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

const DEFAULT_QUERY_TEMPLATE: &str = include_str!("../../data/templates/query.tmpl");
const DEFAULT_LABEL_TEMPLATE: &str = include_str!("../../data/templates/label.tmpl");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub system_text: String,
    pub user_text: String,
    pub stop_markers: Vec<String>,
}

#[derive(Debug, PartialEq, Eq)]
enum Piece<'a> {
    Text(&'a str),
    Brace(char),
    Slot(&'a str),
}

fn scan(text: &str) -> Result<Vec<Piece<'_>>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push(Piece::Text(&rest[..pos]));
        let tail = &rest[pos..];
        if tail.starts_with("{{") {
            out.push(Piece::Brace('{'));
            rest = &tail[2..];
        } else if tail.starts_with("}}") {
            out.push(Piece::Brace('}'));
            rest = &tail[2..];
        } else if tail.starts_with('}') {
            return Err(Error::Template(format!("stray `}}` in {:?}", snippet(tail))));
        } else {
            let end = tail
                .find('}')
                .ok_or_else(|| Error::Template(format!("unclosed `{{` in {:?}", snippet(tail))))?;
            let name = &tail[1..end];
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::Template(format!("bad placeholder `{{{name}}}`")));
            }
            out.push(Piece::Slot(name));
            rest = &tail[end + 1..];
        }
    }
    out.push(Piece::Text(rest));
    Ok(out)
}

fn snippet(s: &str) -> String {
    s.chars().take(24).collect()
}

fn render_text(text: &str, bindings: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    for piece in scan(text)? {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Brace(c) => out.push(c),
            Piece::Slot(name) => out.push_str(
                bindings
                    .get(name)
                    .ok_or_else(|| Error::Template(format!("placeholder `{{{name}}}` is unbound")))?,
            ),
        }
    }
    Ok(out)
}

/// Rendered (system, user) prompt pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    pub fn default_query() -> Self {
        Self::parse(DEFAULT_QUERY_TEMPLATE).expect("bundled template parses")
    }

    pub fn default_label() -> Self {
        Self::parse(DEFAULT_LABEL_TEMPLATE).expect("bundled template parses")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut system = Vec::new();
        let mut user = Vec::new();
        let mut stop = Vec::new();
        let mut section: Option<&str> = None;
        for line in text.lines() {
            match line.trim_end() {
                "[system]" => section = Some("system"),
                "[user]" => section = Some("user"),
                "[stop]" => section = Some("stop"),
                _ => match section {
                    Some("system") => system.push(line),
                    Some("user") => user.push(line),
                    Some(_) => {
                        if !line.trim().is_empty() {
                            stop.push(line.trim().to_string());
                        }
                    }
                    None if line.trim().is_empty() || line.starts_with('#') => {}
                    None => {
                        return Err(Error::Template(
                            "text before the first section header".into(),
                        ))
                    }
                },
            }
        }
        let t = PromptTemplate {
            system_text: system.join("\n").trim().to_string(),
            user_text: user.join("\n").trim().to_string(),
            stop_markers: stop,
        };
        if t.user_text.is_empty() {
            return Err(Error::Template("missing [user] section".into()));
        }
        scan(&t.system_text)?;
        scan(&t.user_text)?;
        Ok(t)
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for text in [&self.system_text, &self.user_text] {
            for p in scan(text).unwrap_or_default() {
                if let Piece::Slot(n) = p {
                    if !names.iter().any(|x| x == n) {
                        names.push(n.to_string());
                    }
                }
            }
        }
        names
    }

    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<RenderedPrompt> {
        Ok(RenderedPrompt {
            system: render_text(&self.system_text, bindings)?,
            user: render_text(&self.user_text, bindings)?,
        })
    }
}

/// Cuts `text` at the first occurrence of any stop marker.
pub fn truncate_at_stop<'a>(text: &'a str, markers: &[String]) -> &'a str {
    let cut = markers
        .iter()
        .filter(|m| !m.is_empty())
        .filter_map(|m| text.find(m.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn render_binds_all_slots() {
        let t = PromptTemplate::parse("[system]\nsys {{literal}}\n[user]\n{seed_count}: {example_1} / {example_2}\n[stop]\n###\n").unwrap();
        assert_eq!(t.placeholders(), vec!["seed_count", "example_1", "example_2"]);
        let r = t
            .render(&bind(&[("seed_count", "2"), ("example_1", "a"), ("example_2", "b")]))
            .unwrap();
        assert_eq!(r.system, "sys {literal}");
        assert_eq!(r.user, "2: a / b");
        assert_eq!(t.stop_markers, vec!["###"]);
    }

    #[test]
    fn unbound_slot_is_an_error() {
        let t = PromptTemplate::parse("[user]\n{example_3}\n").unwrap();
        assert!(matches!(t.render(&bind(&[])), Err(Error::Template(_))));
    }

    #[test]
    fn malformed_templates() {
        assert!(PromptTemplate::parse("[user]\n{oops\n").is_err());
        assert!(PromptTemplate::parse("[user]\n{bad name}\n").is_err());
        assert!(PromptTemplate::parse("[system]\nonly system\n").is_err());
    }

    #[test]
    fn bundled_templates_parse() {
        let q = PromptTemplate::default_query();
        assert!(q.placeholders().contains(&"example_1".to_string()));
        let l = PromptTemplate::default_label();
        assert!(l.placeholders().contains(&"query".to_string()));
    }

    #[test]
    fn stop_truncation() {
        let m = vec!["###".to_string(), "\n\n".to_string()];
        assert_eq!(truncate_at_stop("abc\n\nxyz###", &m), "abc");
        assert_eq!(truncate_at_stop("abc", &m), "abc");
    }
}

//! Tokenizer handles and the plain-text vocabulary format.
//!
//! Vocabulary files look like this:
//!
//! ```text
//! # comment
//! [vocab]
//! 0	""	special
//! 1	" "
//! 2	"a"
//! [merges]
//! "a"	"b"
//! ```
//!
//! Vocab lines are `<id>\t<piece as JSON string>` with an optional `\tspecial`
//! flag; ids must be `0..n` in order. Special pieces are never produced by
//! `tokenize`. With a non-empty `[merges]` section the tokenizer runs BPE
//! (lowest-rank adjacent pair first, starting from characters); otherwise it
//! uses greedy longest match over the vocabulary.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

pub const TOY_CHAR_TAG: &str = "toy-char";
pub const TOY_MERGE_TAG: &str = "toy-merge";

const TOY_MERGE_VOCAB: &str = include_str!("../../data/toy_merge.vocab");

/// Id of the boundary piece in both toy tokenizers.
pub const BOUNDARY_ID: u32 = 0;

/// Lowercase ASCII plus space.
pub fn toy_alphabet() -> Vec<char> {
    std::iter::once(' ').chain('a'..='z').collect()
}

/// A tokenizer usable for alignment. Implementations must be safe for
/// concurrent read-only use and satisfy `detokenize(tokenize(s)) == s`
/// (after normalization) on their supported alphabet.
pub trait Tokenizer: Send + Sync {
    fn tag(&self) -> &str;
    fn tokenize(&self, text: &str) -> Result<Vec<u32>>;
    fn piece_text(&self, id: u32) -> Option<&str>;
    fn vocab_size(&self) -> usize;

    fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.piece_text(id).ok_or_else(|| Error::Tokenizer {
                tag: self.tag().to_string(),
                message: format!("unknown token id {id}"),
            })?);
        }
        Ok(out)
    }
}

pub type TokenizerHandle = Arc<dyn Tokenizer>;

#[derive(Debug, Clone)]
enum Mode {
    GreedyLongest { max_piece_chars: usize },
    Bpe { ranks: HashMap<(String, String), usize> },
}

/// Vocabulary-backed tokenizer (greedy longest match or BPE).
#[derive(Debug, Clone)]
pub struct VocabTokenizer {
    tag: String,
    pieces: Vec<String>,
    special: HashSet<u32>,
    lookup: HashMap<String, u32>,
    mode: Mode,
}

impl VocabTokenizer {
    pub fn new(
        tag: impl Into<String>,
        pieces: Vec<String>,
        special: HashSet<u32>,
        merges: Vec<(String, String)>,
    ) -> Result<Self> {
        let tag = tag.into();
        let mut lookup = HashMap::new();
        for (id, p) in pieces.iter().enumerate() {
            let id = id as u32;
            if special.contains(&id) {
                continue;
            }
            if p.is_empty() {
                return Err(Error::Tokenizer {
                    tag,
                    message: format!("non-special piece {id} is empty"),
                });
            }
            if lookup.insert(p.clone(), id).is_some() {
                return Err(Error::Tokenizer {
                    tag,
                    message: format!("duplicate piece {p:?}"),
                });
            }
        }
        let mode = if merges.is_empty() {
            Mode::GreedyLongest {
                max_piece_chars: lookup.keys().map(|p| p.chars().count()).max().unwrap_or(1),
            }
        } else {
            let mut ranks = HashMap::new();
            for (rank, (a, b)) in merges.into_iter().enumerate() {
                if !lookup.contains_key(&format!("{a}{b}")) {
                    return Err(Error::Tokenizer {
                        tag,
                        message: format!("merge {a:?} + {b:?} has no vocabulary entry"),
                    });
                }
                ranks.entry((a, b)).or_insert(rank);
            }
            Mode::Bpe { ranks }
        };
        Ok(VocabTokenizer {
            tag,
            pieces,
            special,
            lookup,
            mode,
        })
    }

    /// Character tokenizer over the toy alphabet; id 0 is the boundary.
    pub fn toy_char() -> Self {
        let pieces = std::iter::once(String::new())
            .chain(toy_alphabet().into_iter().map(String::from))
            .collect();
        Self::new(TOY_CHAR_TAG, pieces, HashSet::from([BOUNDARY_ID]), vec![])
            .expect("toy alphabet is well formed")
    }

    /// Greedy longest-match tokenizer from the checked-in merge table. Ids
    /// `0..=26` coincide with [`VocabTokenizer::toy_char`].
    pub fn toy_merge() -> Self {
        Self::parse(TOY_MERGE_TAG, TOY_MERGE_VOCAB).expect("bundled vocabulary parses")
    }

    pub fn from_file(tag: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::parse(tag, &text)
    }

    pub fn parse(tag: impl Into<String>, text: &str) -> Result<Self> {
        let tag = tag.into();
        let fail = |line: usize, message: String| Error::Tokenizer {
            tag: tag.clone(),
            message: format!("line {line}: {message}"),
        };
        let json_str = |line: usize, s: &str| -> Result<String> {
            serde_json::from_str::<String>(s).map_err(|e| fail(line, format!("bad piece {s}: {e}")))
        };
        #[derive(PartialEq)]
        enum Section {
            None,
            Vocab,
            Merges,
        }
        let mut section = Section::None;
        let mut pieces = Vec::new();
        let mut special = HashSet::new();
        let mut merges = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let n = n + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            match line.trim() {
                "[vocab]" => {
                    section = Section::Vocab;
                    continue;
                }
                "[merges]" => {
                    section = Section::Merges;
                    continue;
                }
                _ => {}
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match section {
                Section::None => return Err(fail(n, "content before a section header".into())),
                Section::Vocab => {
                    if !(2..=3).contains(&fields.len()) {
                        return Err(fail(n, "expected `<id>\\t<piece>[\\tspecial]`".into()));
                    }
                    let id: usize = fields[0]
                        .parse()
                        .map_err(|_| fail(n, format!("bad id `{}`", fields[0])))?;
                    if id != pieces.len() {
                        return Err(fail(n, format!("id {id} out of order, expected {}", pieces.len())));
                    }
                    pieces.push(json_str(n, fields[1])?);
                    match fields.get(2) {
                        None => {}
                        Some(&"special") => {
                            special.insert(id as u32);
                        }
                        Some(other) => return Err(fail(n, format!("unknown flag `{other}`"))),
                    }
                }
                Section::Merges => {
                    if fields.len() != 2 {
                        return Err(fail(n, "expected `<left>\\t<right>`".into()));
                    }
                    merges.push((json_str(n, fields[0])?, json_str(n, fields[1])?));
                }
            }
        }
        if pieces.is_empty() {
            return Err(fail(0, "empty vocabulary".into()));
        }
        Self::new(tag, pieces, special, merges)
    }

    fn no_piece(&self, at: usize, text: &str) -> Error {
        Error::Tokenizer {
            tag: self.tag.clone(),
            message: format!("no piece covers {:?} at byte {at}", &text[at..]),
        }
    }

    fn greedy(&self, text: &str, max_piece_chars: usize) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let rest = &text[pos..];
            // Candidate end offsets, longest first.
            let ends: Vec<usize> = rest
                .char_indices()
                .map(|(i, c)| i + c.len_utf8())
                .take(max_piece_chars)
                .collect();
            let hit = ends
                .iter()
                .rev()
                .find_map(|&e| self.lookup.get(&rest[..e]).map(|&id| (id, e)));
            let (id, len) = hit.ok_or_else(|| self.no_piece(pos, text))?;
            ids.push(id);
            pos += len;
        }
        Ok(ids)
    }

    fn bpe(&self, text: &str, ranks: &HashMap<(String, String), usize>) -> Result<Vec<u32>> {
        let mut parts: Vec<String> = text.chars().map(String::from).collect();
        loop {
            let best = parts
                .windows(2)
                .filter_map(|w| ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len()
                    && ranks.get(&(parts[i].clone(), parts[i + 1].clone())) == Some(&rank)
                {
                    merged.push(format!("{}{}", parts[i], parts[i + 1]));
                    i += 2;
                } else {
                    merged.push(parts[i].clone());
                    i += 1;
                }
            }
            parts = merged;
        }
        let mut pos = 0;
        parts
            .iter()
            .map(|p| {
                let id = self.lookup.get(p).copied().ok_or_else(|| self.no_piece(pos, text));
                pos += p.len();
                id
            })
            .collect()
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.special.contains(&id)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }
}

impl Tokenizer for VocabTokenizer {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        match &self.mode {
            Mode::GreedyLongest { max_piece_chars } => self.greedy(text, *max_piece_chars),
            Mode::Bpe { ranks } => self.bpe(text, ranks),
        }
    }

    fn piece_text(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    fn vocab_size(&self) -> usize {
        self.pieces.len()
    }
}

/// Resolves a tokenizer tag: `toy-char`, `toy-merge`, or `file:<path>`.
pub fn tokenizer_by_tag(tag: &str) -> Result<TokenizerHandle> {
    match tag {
        TOY_CHAR_TAG => Ok(Arc::new(VocabTokenizer::toy_char())),
        TOY_MERGE_TAG => Ok(Arc::new(VocabTokenizer::toy_merge())),
        _ => match tag.strip_prefix("file:") {
            Some(path) => Ok(Arc::new(VocabTokenizer::from_file(tag, path)?)),
            None => Err(Error::UnknownTokenizer(tag.to_string())),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn toy_ids_line_up() {
        let c = VocabTokenizer::toy_char();
        let m = VocabTokenizer::toy_merge();
        for id in 0..27 {
            assert_eq!(c.piece_text(id), m.piece_text(id));
        }
        assert_eq!(c.vocab_size(), 28);
        assert!(m.vocab_size() > 28);
    }

    #[test]
    fn greedy_prefers_longest() {
        let m = VocabTokenizer::toy_merge();
        let ids = m.tokenize("the thing").unwrap();
        let pieces: Vec<_> = ids.iter().map(|&i| m.piece_text(i).unwrap()).collect();
        assert_eq!(pieces, vec!["the", " th", "ing"]);
    }

    #[test]
    fn char_rejects_foreign_symbols() {
        let c = VocabTokenizer::toy_char();
        assert!(matches!(c.tokenize("ab!"), Err(Error::Tokenizer { .. })));
        assert!(c.tokenize("").unwrap().is_empty());
    }

    #[test]
    fn bpe_file_format() {
        let text = "[vocab]\n0\t\"a\"\n1\t\"b\"\n2\t\"c\"\n3\t\"ab\"\n4\t\"abc\"\n[merges]\n\"a\"\t\"b\"\n\"ab\"\t\"c\"\n";
        let t = VocabTokenizer::parse("bpe", text).unwrap();
        assert_eq!(t.tokenize("abcab").unwrap(), vec![4, 3]);
        assert_eq!(t.tokenize("cba").unwrap(), vec![2, 1, 0]);
        assert_eq!(t.detokenize(&[4, 3]).unwrap(), "abcab");
    }

    #[test]
    fn malformed_vocab_files() {
        assert!(VocabTokenizer::parse("x", "[vocab]\n1\t\"a\"\n").is_err());
        assert!(VocabTokenizer::parse("x", "[vocab]\n0\ta\n").is_err());
        assert!(VocabTokenizer::parse("x", "0\t\"a\"\n").is_err());
        assert!(VocabTokenizer::parse("x", "[vocab]\n0\t\"a\"\n[merges]\n\"a\"\t\"a\"\n").is_err());
    }

    #[test]
    fn registry() {
        assert_eq!(tokenizer_by_tag("toy-char").unwrap().tag(), "toy-char");
        assert!(matches!(
            tokenizer_by_tag("gpt-17"),
            Err(Error::UnknownTokenizer(_))
        ));
    }

    proptest! {
        #[test]
        fn toy_round_trip(s in "[a-z ]{0,60}") {
            for t in [VocabTokenizer::toy_char(), VocabTokenizer::toy_merge()] {
                let ids = t.tokenize(&s).unwrap();
                prop_assert!(ids.iter().all(|&i| i != BOUNDARY_ID));
                prop_assert_eq!(t.detokenize(&ids).unwrap(), s.clone());
            }
        }
    }
}

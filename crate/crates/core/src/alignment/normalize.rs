use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

/// Word-boundary glyphs used by common subword schemes
/// (SentencePiece `▁`, byte-level BPE `Ġ`).
pub const SPACE_MARKERS: [char; 2] = ['\u{2581}', '\u{0120}'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormRule {
    UnicodeNfc,
    /// A marker glyph at the start of the text becomes a plain space.
    StripLeadingSpaceMarker,
    /// Every remaining marker glyph becomes a plain space.
    CollapseInternalMarker,
}

/// Text normalization applied before comparing decoded spans. Idempotent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalizer {
    pub rules: Vec<NormRule>,
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            rules: vec![
                NormRule::UnicodeNfc,
                NormRule::StripLeadingSpaceMarker,
                NormRule::CollapseInternalMarker,
            ],
        }
    }
}

fn is_marker(c: char) -> bool {
    SPACE_MARKERS.contains(&c)
}

impl Normalizer {
    /// Byte-exact comparison, no rewriting.
    pub fn identity() -> Self {
        Normalizer { rules: vec![] }
    }

    pub fn normalize(&self, s: &str) -> String {
        let mut out = s.to_string();
        for rule in &self.rules {
            out = match rule {
                NormRule::UnicodeNfc => out.nfc().collect(),
                NormRule::StripLeadingSpaceMarker => match out.chars().next() {
                    Some(c) if is_marker(c) => format!(" {}", &out[c.len_utf8()..]),
                    _ => out,
                },
                NormRule::CollapseInternalMarker => out
                    .chars()
                    .map(|c| if is_marker(c) { ' ' } else { c })
                    .collect(),
            };
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn markers_become_spaces() {
        let n = Normalizer::default();
        assert_eq!(n.normalize("\u{2581}hello\u{2581}world"), " hello world");
        assert_eq!(n.normalize("\u{0120}the"), " the");
    }

    #[test]
    fn nfc_composes() {
        let n = Normalizer::default();
        assert_eq!(n.normalize("e\u{0301}"), "\u{e9}");
        assert_eq!(Normalizer::identity().normalize("e\u{0301}"), "e\u{0301}");
    }

    proptest! {
        #[test]
        fn idempotent(s in "[a-c \u{2581}\u{0120}\u{0301}\u{0308}e\u{e9}]{0,24}") {
            let n = Normalizer::default();
            let once = n.normalize(&s);
            prop_assert_eq!(n.normalize(&once), once);
        }
    }
}

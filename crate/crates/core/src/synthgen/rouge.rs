//! Word-level ROUGE-L F-measure.

/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn rouge_words(s: &str) -> Vec<String> {
    let cleaned: String = s
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Length of the longest common subsequence, two-row dynamic program.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// F-measure over pre-tokenized words. Zero when either side is empty.
///
/// With precision `lcs/m` and recall `lcs/n`, the balanced F-measure
/// reduces to `2 lcs / (m + n)`; computing it in that form rounds once, so a
/// pair whose exact score is 7/10 compares equal to `0.7`.
pub fn rouge_l_words(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference);
    (2 * lcs) as f64 / (candidate.len() + reference.len()) as f64
}

pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_words(&rouge_words(candidate), &rouge_words(reference))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exponential oracle: longest subsequence of `a` that is also a
    /// subsequence of `b`, by enumerating every subset of `a`.
    fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
        let is_subseq = |s: &[u8]| {
            let mut it = b.iter();
            s.iter().all(|c| it.any(|d| d == c))
        };
        (0u32..(1 << a.len()))
            .filter_map(|mask| {
                let s: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
                is_subseq(&s).then_some(s.len())
            })
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn examples() {
        assert_eq!(rouge_l("the cat sat", "the cat sat"), 1.0);
        assert_eq!(rouge_l("alpha beta", "gamma delta"), 0.0);
        let f = rouge_l("the cat sat", "the cat ran");
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_l("", ""), 0.0);
        assert_eq!(rouge_l("", "x"), 0.0);
    }

    #[test]
    fn tokenization_rules() {
        assert_eq!(rouge_words("Hello, World!  it's\tok"), vec!["hello", "world", "its", "ok"]);
        assert_eq!(rouge_l("The CAT.", "the cat"), 1.0);
    }

    proptest! {
        #[test]
        fn lcs_matches_brute_force(a in prop::collection::vec(0u8..4, 0..10), b in prop::collection::vec(0u8..4, 0..10)) {
            prop_assert_eq!(lcs_len(&a, &b), lcs_brute(&a, &b));
        }

        #[test]
        fn symmetric_and_bounded(a in "[a-d ]{0,30}", b in "[a-d ]{0,30}") {
            let x = rouge_l(&a, &b);
            prop_assert_eq!(x, rouge_l(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
            if !rouge_words(&a).is_empty() {
                prop_assert_eq!(rouge_l(&a, &a), 1.0);
            }
        }
    }
}

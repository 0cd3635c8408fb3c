//! Corpus-level BLEU-4 over whitespace tokens.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(AsRef::as_ref).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Sufficient statistics summed over a corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    /// Statistics of one candidate against its references. The effective
    /// reference length is the one closest to the candidate's (shorter on ties).
    pub fn sentence<S: AsRef<str>, R: AsRef<str>>(candidate: &[S], references: &[Vec<R>]) -> Self {
        let mut st = BleuStats {
            cand_len: candidate.len(),
            ..Default::default()
        };
        st.ref_len = references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(candidate.len()), r))
            .unwrap_or(0);
        for n in 1..=MAX_ORDER {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in references {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            st.totals[n - 1] = candidate.len().saturating_sub(n - 1);
            st.matches[n - 1] = cand
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
        }
        st
    }

    pub fn merge(&mut self, o: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    /// Score in `[0, 100]`. Unsmoothed: any zero precision gives 0.
    pub fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_p = 0.0;
        for n in 0..MAX_ORDER {
            if self.matches[n] == 0 || self.totals[n] == 0 {
                return 0.0;
            }
            log_p += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        let (c, r) = (self.cand_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * (log_p / MAX_ORDER as f64).exp()
    }
}

/// Corpus BLEU of tokenized candidates, each against one or more references.
pub fn bleu_corpus<S: AsRef<str>, R: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<R>>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("BLEU over an empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "BLEU: {} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("BLEU: candidate {i} has no reference")));
    }
    let mut total = BleuStats::default();
    for (c, refs) in candidates.iter().zip(references) {
        total.merge(&BleuStats::sentence(c, refs));
    }
    Ok(total.score())
}

/// BLEU with a single reference per line, from raw whitespace-separated text.
pub fn bleu_lines(candidates: &[String], references: &[String]) -> Result<f64> {
    let cand: Vec<Vec<&str>> = candidates.iter().map(|s| s.split_whitespace().collect()).collect();
    let refs: Vec<Vec<Vec<&str>>> = references
        .iter()
        .map(|s| vec![s.split_whitespace().collect()])
        .collect();
    bleu_corpus(&cand, &refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identity_is_100() {
        let c = vec!["the food was great and cheap".to_string(), "staff is rude to us".into()];
        assert_eq!(bleu_lines(&c, &c).unwrap(), 100.0);
    }

    #[test]
    fn disjoint_is_zero() {
        let c = vec!["a b c d e".to_string()];
        let r = vec!["f g h i j".to_string()];
        assert_eq!(bleu_lines(&c, &r).unwrap(), 0.0);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(bleu_lines(&[], &[]).is_err());
        assert!(bleu_lines(&["a".into()], &[]).is_err());
    }

    #[test]
    fn clipping_and_brevity() {
        // "the the the the" vs "the cat": unigram clipped to 1/4.
        let st = BleuStats::sentence(&toks("the the the the"), &[toks("the cat")]);
        assert_eq!(st.matches[0], 1);
        assert_eq!(st.totals, [4, 3, 2, 1]);
        // Shorter candidate pays the brevity penalty.
        let st = BleuStats::sentence(&toks("a b c d"), &[toks("a b c d e f g h")]);
        assert_eq!(st.matches, [4, 3, 2, 1]);
        assert!((st.score() - 100.0 * (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn closest_reference_length() {
        let st = BleuStats::sentence(&toks("a b c"), &[toks("a b c d e f"), toks("a b")]);
        assert_eq!(st.ref_len, 2);
        let st = BleuStats::sentence(&toks("a b c"), &[toks("a b c d"), toks("a b")]);
        assert_eq!(st.ref_len, 2);
    }
}

//! BLEU-4: a smoothed sentence-level variant for rewards and the standard
//! corpus-level score for evaluation.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Result, SimtError};

pub const MAX_ORDER: usize = 4;

/// Clipped n-gram statistics of one hypothesis against one reference.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuBreakdown {
    pub stats: BleuStats,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub score: f64,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn bleu_stats<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> BleuStats {
    let mut stats = BleuStats {
        hyp_len: hyp.len(),
        ref_len: reference.len(),
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        stats.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        stats.matches[n - 1] = h.iter().map(|(g, c)| (*c).min(*r.get(g).unwrap_or(&0))).sum();
    }
    stats
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    }
}

/// Sentence BLEU with unsmoothed unigram precision and add-one smoothing
/// for orders 2..4. Empty hypotheses score 0, exact matches score 100.
pub fn smoothed_sentence_bleu<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> Result<f64> {
    Ok(smoothed_breakdown(hyp, reference)?.score)
}

pub fn smoothed_breakdown<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> Result<BleuBreakdown> {
    if reference.is_empty() {
        return Err(SimtError::Empty("BLEU reference".into()));
    }
    let stats = bleu_stats(hyp, reference);
    let mut precisions = [0.0; MAX_ORDER];
    if stats.totals[0] > 0 {
        precisions[0] = stats.matches[0] as f64 / stats.totals[0] as f64;
    }
    for n in 1..MAX_ORDER {
        precisions[n] = (stats.matches[n] as f64 + 1.0) / (stats.totals[n] as f64 + 1.0);
    }
    let bp = brevity_penalty(stats.hyp_len, stats.ref_len);
    let score = if precisions[0] == 0.0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * bp * log_mean.exp()
    };
    Ok(BleuBreakdown {
        stats,
        precisions,
        brevity_penalty: bp,
        score,
    })
}

/// Corpus BLEU-4 from aggregated statistics: unsmoothed, corpus brevity penalty.
pub fn bleu_from_stats(stats: &BleuStats) -> f64 {
    if stats.hyp_len == 0 || (0..MAX_ORDER).any(|n| stats.matches[n] == 0 || stats.totals[n] == 0) {
        return 0.0;
    }
    let log_mean = (0..MAX_ORDER)
        .map(|n| (stats.matches[n] as f64 / stats.totals[n] as f64).ln())
        .sum::<f64>()
        / MAX_ORDER as f64;
    100.0 * brevity_penalty(stats.hyp_len, stats.ref_len) * log_mean.exp()
}

pub fn corpus_stats<T: Eq + Hash, H: AsRef<[T]>, R: AsRef<[T]>>(hyps: &[H], refs: &[R]) -> Result<Vec<BleuStats>> {
    if hyps.len() != refs.len() {
        return Err(SimtError::Contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    hyps.iter()
        .zip(refs)
        .map(|(h, r)| {
            if r.as_ref().is_empty() {
                Err(SimtError::Empty("BLEU reference".into()))
            } else {
                Ok(bleu_stats(h.as_ref(), r.as_ref()))
            }
        })
        .collect()
}

pub fn corpus_bleu<T: Eq + Hash, H: AsRef<[T]>, R: AsRef<[T]>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    let per = corpus_stats(hyps, refs)?;
    let mut total = BleuStats::default();
    for s in per {
        total += s;
    }
    Ok(bleu_from_stats(&total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn sentence_examples() {
        assert_eq!(smoothed_sentence_bleu(&toks("a b c d"), &toks("a b c d")).unwrap(), 100.0);
        assert_eq!(smoothed_sentence_bleu(&toks(""), &toks("a b c d")).unwrap(), 0.0);
        let b = smoothed_breakdown(&toks("a b c"), &toks("a b c d")).unwrap();
        assert_eq!(b.precisions, [1.0, 1.0, 1.0, 1.0]);
        assert!((b.brevity_penalty - (-1.0f64 / 3.0).exp()).abs() < 1e-15);
        assert!((b.score - 71.653).abs() < 1e-3);
        assert!(smoothed_sentence_bleu(&toks("a"), &toks("")).is_err());
    }

    #[test]
    fn only_exact_match_scores_100() {
        let r = toks("x y z");
        assert_eq!(smoothed_sentence_bleu(&toks("x y z"), &r).unwrap(), 100.0);
        assert!(smoothed_sentence_bleu(&toks("x y"), &r).unwrap() < 100.0);
        assert!(smoothed_sentence_bleu(&toks("x y z z"), &r).unwrap() < 100.0);
        assert!(smoothed_sentence_bleu(&toks("z y x"), &r).unwrap() < 100.0);
    }

    #[test]
    fn matches_never_exceed_totals() {
        let s = bleu_stats(&toks("a a a a b"), &toks("a b a"));
        for n in 0..MAX_ORDER {
            assert!(s.matches[n] <= s.totals[n]);
        }
        assert_eq!(s.matches[0], 3);
    }

    #[test]
    fn corpus_examples() {
        let refs = vec![toks("a b c d"), toks("e f g h i")];
        assert_eq!(corpus_bleu(&refs, &refs).unwrap(), 100.0);
        let empty: Vec<Vec<&str>> = vec![vec![], vec![]];
        assert_eq!(corpus_bleu(&empty, &refs).unwrap(), 0.0);
        assert!(corpus_bleu(&refs[..1], &refs).is_err());
    }
}

//! Paired bootstrap resampling over sentence indices.

use std::hash::Hash;

use rand::Rng;

use super::bleu::{bleu_from_stats, corpus_stats, BleuStats};
use crate::error::{Result, SimtError};

pub const DEFAULT_RESAMPLES: usize = 1000;

/// One-sided p-value for "system B improves on system A": the fraction of
/// resampled corpora on which B fails to beat A (B's corpus BLEU ≤ A's).
pub fn bootstrap_significance<T, H, R>(
    system_a: &[H],
    system_b: &[H],
    refs: &[R],
    n_resamples: usize,
    rng: &mut impl Rng,
) -> Result<f64>
where
    T: Eq + Hash,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if system_a.len() != system_b.len() {
        return Err(SimtError::Contract(format!(
            "systems have {} and {} outputs",
            system_a.len(),
            system_b.len()
        )));
    }
    if n_resamples < 100 {
        return Err(SimtError::Config(format!("{n_resamples} resamples, need at least 100")));
    }
    let a = corpus_stats(system_a, refs)?;
    let b = corpus_stats(system_b, refs)?;
    if a.is_empty() {
        return Err(SimtError::Empty("bootstrap corpus".into()));
    }
    Ok(paired_bootstrap(&a, &b, n_resamples, rng))
}

pub fn paired_bootstrap(a: &[BleuStats], b: &[BleuStats], n_resamples: usize, rng: &mut impl Rng) -> f64 {
    let n = a.len();
    let mut not_better = 0;
    for _ in 0..n_resamples {
        let mut sa = BleuStats::default();
        let mut sb = BleuStats::default();
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            sa += a[i];
            sb += b[i];
        }
        if bleu_from_stats(&sb) <= bleu_from_stats(&sa) {
            not_better += 1;
        }
    }
    not_better as f64 / n_resamples as f64
}

pub mod analysis;
pub mod bleu;
pub mod bootstrap;
pub mod latency;
pub mod reward;

use std::hash::Hash;

use serde::{Deserialize, Serialize};

pub use analysis::{attention_norm_profile, histogram_csv, lag_histogram, HistogramBin};
pub use bleu::{corpus_bleu, smoothed_breakdown, smoothed_sentence_bleu, BleuBreakdown, BleuStats};
pub use bootstrap::{bootstrap_significance, DEFAULT_RESAMPLES};
pub use latency::{
    actions_to_string, average_lagging, average_proportion, consecutive_wait_trace, delays_from_actions,
    max_consecutive_wait, parse_actions, Action,
};
pub use reward::{latency_reward, quality_reward_trace, RewardConfig};

use crate::error::{Result, SimtError};

/// Delays used for latency metrics: one per content token, or the delay of
/// the final WRITE when no content token was produced.
pub fn effective_delays(actions: &[Action], content_len: usize) -> Result<Vec<usize>> {
    let all = delays_from_actions(actions);
    if all.len() < content_len {
        return Err(SimtError::Contract(format!(
            "{} WRITEs for {content_len} content tokens",
            all.len()
        )));
    }
    if content_len > 0 {
        Ok(all[..content_len].to_vec())
    } else {
        all.last()
            .map(|d| vec![*d])
            .ok_or_else(|| SimtError::Empty("episode without WRITE".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceMetrics {
    pub bleu: f64,
    pub avl: f64,
    pub avp: f64,
    pub cw_max: usize,
}

/// Corpus-level metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub bleu: f64,
    pub avl_mean: f64,
    pub avp_mean: f64,
    pub cw_max_mean: f64,
    pub per_sentence: Vec<SentenceMetrics>,
}

pub fn sentence_metrics<T: Eq + Hash>(hyp: &[T], reference: &[T], actions: &[Action], src_len: usize) -> Result<SentenceMetrics> {
    let g = effective_delays(actions, hyp.len())?;
    Ok(SentenceMetrics {
        bleu: smoothed_sentence_bleu(hyp, reference)?,
        avl: average_lagging(&g, src_len, g.len())?,
        avp: average_proportion(&g, src_len, g.len())?,
        cw_max: max_consecutive_wait(actions),
    })
}

/// One translated sentence as seen by the evaluator.
pub struct Scored<'a, T> {
    pub hyp: &'a [T],
    pub reference: &'a [T],
    pub actions: &'a [Action],
    pub src_len: usize,
}

pub fn evaluate<T: Eq + Hash>(items: &[Scored<'_, T>]) -> Result<LatencyStats> {
    if items.is_empty() {
        return Err(SimtError::Empty("evaluation set".into()));
    }
    let per_sentence = items
        .iter()
        .map(|s| sentence_metrics(s.hyp, s.reference, s.actions, s.src_len))
        .collect::<Result<Vec<_>>>()?;
    let hyps: Vec<&[T]> = items.iter().map(|s| s.hyp).collect();
    let refs: Vec<&[T]> = items.iter().map(|s| s.reference).collect();
    let n = per_sentence.len() as f64;
    Ok(LatencyStats {
        bleu: corpus_bleu(&hyps, &refs)?,
        avl_mean: per_sentence.iter().map(|m| m.avl).sum::<f64>() / n,
        avp_mean: per_sentence.iter().map(|m| m.avp).sum::<f64>() / n,
        cw_max_mean: per_sentence.iter().map(|m| m.cw_max as f64).sum::<f64>() / n,
        per_sentence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_delays_skip_final_eos_write() {
        let a = parse_actions("RRWRWW").unwrap();
        assert_eq!(effective_delays(&a, 2).unwrap(), vec![2, 3]);
        assert_eq!(effective_delays(&parse_actions("RRW").unwrap(), 0).unwrap(), vec![2]);
        assert!(effective_delays(&parse_actions("RR").unwrap(), 0).is_err());
        assert!(effective_delays(&a, 4).is_err());
    }

    #[test]
    fn report_aggregates() {
        let src = [1u32, 2, 3, 4];
        let a1 = parse_actions("RRRRWWWWW").unwrap();
        let a2 = parse_actions("RWRWRWRWW").unwrap();
        let items = [
            Scored { hyp: &src[..], reference: &src[..], actions: &a1, src_len: 4 },
            Scored { hyp: &src[..], reference: &src[..], actions: &a2, src_len: 4 },
        ];
        let r = evaluate(&items).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.per_sentence[0].avp, 1.0);
        assert_eq!(r.per_sentence[0].avl, 4.0);
        assert_eq!(r.per_sentence[1].avl, 1.0);
        assert_eq!(r.cw_max_mean, 2.5);
        let json = serde_json::to_value(&r).unwrap();
        for k in ["bleu", "avl_mean", "avp_mean", "cw_max_mean", "per_sentence"] {
            assert!(json.get(k).is_some());
        }
    }
}

//! Per-step rewards: BLEU-difference quality reward and the
//! consecutive-wait / average-proportion latency reward.

use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::bleu::smoothed_sentence_bleu;
use super::latency::{average_proportion, consecutive_wait_trace, Action};
use crate::error::{Result, SimtError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Coefficient of the consecutive-wait term.
    pub alpha: f64,
    /// Coefficient of the average-proportion term.
    pub beta: f64,
    pub target_wait: f64,
    pub target_proportion: f64,
    /// Multiplier applied to BLEU-point quality rewards when summing with
    /// the latency reward.
    pub quality_scale: f64,
    /// Apply the running AVP of the committed prefix at every WRITE instead
    /// of the full-episode AVP at the terminal step.
    pub running_proportion: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 0.025,
            beta: -1.0,
            target_wait: 2.0,
            target_proportion: 0.3,
            quality_scale: 0.01,
            running_proportion: false,
        }
    }
}

impl RewardConfig {
    /// Default with a negative wait coefficient so long waits are penalized.
    pub fn penalizing() -> Self {
        RewardConfig {
            alpha: -0.025,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_wait >= 1.0) {
            return Err(SimtError::Config(format!("target wait {} < 1", self.target_wait)));
        }
        if !(self.target_proportion > 0.0 && self.target_proportion <= 1.0) {
            return Err(SimtError::Config(format!(
                "target proportion {} outside (0, 1]",
                self.target_proportion
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("quality_scale", self.quality_scale)] {
            if !v.is_finite() {
                return Err(SimtError::Config(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `alpha * (sgn(c - C*) + 1) + beta * max(d - D*, 0)`; the proportion term
/// only contributes on terminal steps.
pub fn latency_reward(wait: usize, proportion: f64, cfg: &RewardConfig, is_terminal: bool) -> f64 {
    let cw = cfg.alpha * (sign(wait as f64 - cfg.target_wait) + 1.0);
    if is_terminal {
        cw + cfg.beta * (proportion - cfg.target_proportion).max(0.0)
    } else {
        cw
    }
}

/// BLEU differences between consecutive committed prefixes, one per WRITE.
/// Each prefix must extend the previous one by exactly one token.
pub fn quality_reward_trace<T: Eq + Hash + Clone, P: AsRef<[T]>>(prefixes: &[P], reference: &[T]) -> Result<Vec<f64>> {
    let mut prev: &[T] = &[];
    let mut prev_score = 0.0;
    let mut out = Vec::with_capacity(prefixes.len());
    for (i, p) in prefixes.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != prev.len() + 1 || p[..prev.len()] != *prev {
            return Err(SimtError::Contract(format!("prefix {i} does not extend the previous prefix by one token")));
        }
        let score = smoothed_sentence_bleu(p, reference)?;
        out.push(score - prev_score);
        prev_score = score;
        prev = p;
    }
    Ok(out)
}

/// Quality reward aligned with actions: BLEU delta on WRITEs that commit a
/// content token of `hyp`, 0 on READs and on a trailing end-of-sentence WRITE.
pub fn quality_rewards_for_actions<T: Eq + Hash + Clone>(actions: &[Action], hyp: &[T], reference: &[T]) -> Result<Vec<f64>> {
    let prefixes: Vec<&[T]> = (1..=hyp.len()).map(|k| &hyp[..k]).collect();
    let deltas = quality_reward_trace(&prefixes, reference)?;
    let writes = actions.iter().filter(|a| **a == Action::Write).count();
    if writes < hyp.len() || writes > hyp.len() + 1 {
        return Err(SimtError::Contract(format!("{writes} WRITEs for {} hypothesis tokens", hyp.len())));
    }
    let mut k = 0;
    Ok(actions
        .iter()
        .map(|a| match a {
            Action::Write if k < deltas.len() => {
                k += 1;
                deltas[k - 1]
            }
            _ => 0.0,
        })
        .collect())
}

/// Latency reward for every action of an episode. `delays` are the source
/// counts at each content WRITE (or at the final WRITE if nothing else was
/// written) and define the average proportion.
pub fn latency_rewards_for_actions(actions: &[Action], delays: &[usize], src_len: usize, cfg: &RewardConfig) -> Result<Vec<f64>> {
    let waits = consecutive_wait_trace(actions);
    let last = actions.len().saturating_sub(1);
    let episode_avp = average_proportion(delays, src_len, delays.len())?;
    let mut written = 0;
    let mut out = Vec::with_capacity(actions.len());
    for (t, (a, c)) in actions.iter().zip(&waits).enumerate() {
        if cfg.running_proportion {
            let mut d = 0.0;
            let mut apply = false;
            if *a == Action::Write && written < delays.len() {
                written += 1;
                d = average_proportion(&delays[..written], src_len, written)?;
                apply = true;
            }
            out.push(latency_reward(*c, d, cfg, apply));
        } else {
            out.push(latency_reward(*c, episode_avp, cfg, t == last));
        }
    }
    Ok(out)
}

/// `quality_scale * r_Q + r_D` per action.
pub fn combine_rewards(quality: &[f64], latency: &[f64], cfg: &RewardConfig) -> Result<Vec<f64>> {
    if quality.len() != latency.len() {
        return Err(SimtError::Contract(format!(
            "{} quality rewards for {} latency rewards",
            quality.len(),
            latency.len()
        )));
    }
    Ok(quality.iter().zip(latency).map(|(q, d)| cfg.quality_scale * q + d).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::latency::parse_actions;
    use proptest::prelude::*;

    #[test]
    fn latency_reward_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(latency_reward(1, 0.0, &cfg, false), 0.0);
        assert!((latency_reward(3, 0.0, &cfg, false) - 0.05).abs() < 1e-15);
        assert!((latency_reward(0, 0.5, &cfg, true) + 0.2).abs() < 1e-15);
        // At the target the sign term is 0, so the reward is alpha.
        assert_eq!(latency_reward(2, 0.0, &cfg, false), 0.025);
        // Proportion is ignored away from the terminal step.
        assert_eq!(latency_reward(0, 0.9, &cfg, false), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        assert!(RewardConfig { target_wait: 0.5, ..Default::default() }.validate().is_err());
        assert!(RewardConfig { target_proportion: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!(RewardConfig::penalizing().alpha, -0.025);
    }

    #[test]
    fn quality_trace_examples() {
        let r = vec!["a", "b"];
        let t = quality_reward_trace(&[vec!["a"], vec!["a", "b"]], &r).unwrap();
        let first = smoothed_sentence_bleu(&["a"], &r).unwrap();
        assert_eq!(t[0], first);
        assert!((t[1] - (100.0 - first)).abs() < 1e-12);

        let one = quality_reward_trace(&[vec!["b"]], &r).unwrap();
        assert_eq!(one, vec![smoothed_sentence_bleu(&["b"], &r).unwrap()]);

        assert!(quality_reward_trace(&[vec!["a"], vec!["b", "a"]], &r).is_err());
        assert!(quality_reward_trace(&[vec!["a", "b"]], &r).is_err());
    }

    #[test]
    fn rewards_align_with_actions() {
        let actions = parse_actions("RRWRWW").unwrap();
        let q = quality_rewards_for_actions(&actions, &["a", "b"], &["a", "b"]).unwrap();
        assert_eq!(q[0], 0.0);
        assert_eq!(q[5], 0.0);
        assert!((q.iter().sum::<f64>() - 100.0).abs() < 1e-12);

        let cfg = RewardConfig::default();
        let d = latency_rewards_for_actions(&actions, &[2, 3], 3, &cfg).unwrap();
        // waits after each action: 1 2 0 1 0 0; AVP = 5/6.
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 0.025);
        assert!((d[5] - (-1.0) * (5.0 / 6.0 - 0.3)).abs() < 1e-12);
    }

    #[test]
    fn running_proportion_mode() {
        let actions = parse_actions("RWRW").unwrap();
        let cfg = RewardConfig {
            running_proportion: true,
            ..Default::default()
        };
        let d = latency_rewards_for_actions(&actions, &[1, 2], 2, &cfg).unwrap();
        // After the first WRITE: AVP = 1/2; after the second: 3/4.
        assert!((d[1] + 0.2).abs() < 1e-12);
        assert!((d[3] + 0.45).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn quality_rewards_telescope(hyp in prop::collection::vec(0u8..6, 1..15), reference in prop::collection::vec(0u8..6, 1..15)) {
            let prefixes: Vec<&[u8]> = (1..=hyp.len()).map(|k| &hyp[..k]).collect();
            let trace = quality_reward_trace(&prefixes, &reference).unwrap();
            let total: f64 = trace.iter().sum();
            let fin = smoothed_sentence_bleu(&hyp, &reference).unwrap();
            prop_assert!((total - fin).abs() < 1e-9);
        }
    }
}

//! The RL training loop over a frozen environment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{AgentNetwork, AgentSpec, BaselineNetwork, AGENT_HIDDEN_DIM};
use super::reinforce::{reinforce_update, Evaluation, ModelSelector, Optimizers, Trajectory, UpdateSettings, Verdict};
use super::rollout::{episode_rng, rollout, ActionMode};
use crate::env::{EnvModel, Split, VisualMemory};
use crate::error::{Result, SimtError};
use crate::features::FeatureSet;
use crate::metrics::{evaluate, LatencyStats, RewardConfig, Scored};
use crate::policy::{simulate, Policy, Transcript};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RLTrainConfig {
    pub hidden_dim: usize,
    pub lr: f64,
    /// Sentence pairs per update.
    pub batch_size: usize,
    /// Sampled trajectories per sentence pair.
    pub trajectories: usize,
    pub entropy_weight: f64,
    pub tau: f64,
    /// Discount for returns; 0 uses instantaneous rewards.
    pub gamma: f64,
    pub reward: RewardConfig,
    /// Evaluations without a better BLEU/AVP ratio before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    /// Training pairs visited per epoch; all of them by default.
    pub epoch_pairs: Option<usize>,
    pub valid_limit: Option<usize>,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for RLTrainConfig {
    fn default() -> Self {
        RLTrainConfig {
            hidden_dim: AGENT_HIDDEN_DIM,
            lr: 0.0004,
            batch_size: 6,
            trajectories: 5,
            entropy_weight: 0.001,
            tau: 1.0,
            gamma: 0.95,
            reward: RewardConfig::default(),
            patience: 5,
            max_epochs: 50,
            epoch_pairs: None,
            valid_limit: None,
            clip_norm: Some(5.0),
            seed: 1,
        }
    }
}

impl RLTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim as f64),
            ("lr", self.lr),
            ("batch_size", self.batch_size as f64),
            ("trajectories", self.trajectories as f64),
            ("tau", self.tau),
            ("patience", self.patience as f64),
            ("max_epochs", self.max_epochs as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SimtError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.entropy_weight >= 0.0) {
            return Err(SimtError::Config(format!("entropy weight {}", self.entropy_weight)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(SimtError::Config(format!("discount {} outside [0, 1]", self.gamma)));
        }
        if self.epoch_pairs == Some(0) {
            return Err(SimtError::Config("epoch_pairs must be positive".into()));
        }
        self.reward.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_bleu: f64,
    pub mean_avp: f64,
    pub mean_avl: f64,
    pub ratio: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,mean_reward,mean_bleu,mean_avp,mean_avl,ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.4},{:.6},{:.6},{:.4}\n",
            r.epoch, r.mean_reward, r.mean_bleu, r.mean_avp, r.mean_avl, r.ratio
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RLRecord {
    pub log: Vec<LogRow>,
    pub best_epoch: usize,
    pub updates: usize,
    pub episodes: u64,
}

fn env_visual(env: &EnvModel, features: Option<&[FeatureSet]>, i: usize) -> Result<Option<VisualMemory>> {
    if !env.is_multimodal() {
        return Ok(None);
    }
    let f = features.ok_or_else(|| SimtError::Config("multimodal environment needs features".into()))?;
    env.visual_memory(&f[i]).map(Some)
}

/// Checks that the split carries the features the agent and environment need.
pub fn check_split(env: &EnvModel, spec: &AgentSpec, split: &Split<'_>, name: &str) -> Result<()> {
    if split.pairs.is_empty() {
        return Err(SimtError::Empty(format!("{name} split")));
    }
    let needs = spec.features().is_some() || env.is_multimodal();
    match split.features {
        None if needs => Err(SimtError::Config(format!("{name} split lacks visual features"))),
        Some(f) if f.len() != split.pairs.len() => Err(SimtError::Contract(format!(
            "{name}: {} feature sets for {} pairs",
            f.len(),
            split.pairs.len()
        ))),
        Some(f) => {
            if let Some(g) = spec.features() {
                f[0].check(&g)?;
            }
            if let Some(g) = env.visual {
                f[0].check(&g)?;
            }
            Ok(())
        }
        None => Ok(()),
    }
}

/// Runs any policy over a split.
pub fn run_policy(policy: &mut dyn Policy, env: &EnvModel, split: &Split<'_>, limit: Option<usize>) -> Result<Vec<Transcript>> {
    let n = limit.unwrap_or(split.pairs.len()).min(split.pairs.len());
    (0..n)
        .map(|i| simulate(policy, env, &split.pairs[i].src, env_visual(env, split.features, i)?.as_ref()))
        .collect()
}

/// Greedy agent transcripts over a split.
pub fn run_agent(agent: &AgentNetwork, env: &EnvModel, split: &Split<'_>, limit: Option<usize>) -> Result<Vec<Transcript>> {
    let n = limit.unwrap_or(split.pairs.len()).min(split.pairs.len());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let f = split.features.map(|f| &f[i]);
        let agent_f = agent.spec.features().and(f);
        let mut policy = super::rollout::AgentPolicy::new(agent, agent_f, ActionMode::Greedy)?;
        out.push(simulate(&mut policy, env, &split.pairs[i].src, env_visual(env, split.features, i)?.as_ref())?);
    }
    Ok(out)
}

/// BLEU and latency of transcripts against the split's references.
pub fn score_transcripts(transcripts: &[Transcript], split: &Split<'_>) -> Result<LatencyStats> {
    if transcripts.len() > split.pairs.len() {
        return Err(SimtError::Contract("more transcripts than references".into()));
    }
    let items: Vec<Scored<'_, usize>> = transcripts
        .iter()
        .zip(split.pairs)
        .map(|(t, p)| Scored {
            hyp: t.content(),
            reference: &p.tgt,
            actions: &t.actions,
            src_len: t.src.len(),
        })
        .collect();
    evaluate(&items)
}

/// Trains an agent of shape `spec` against the frozen `env`, keeping the
/// parameters with the best validation BLEU/AVP ratio.
pub fn train_agent(
    env: &EnvModel,
    spec: AgentSpec,
    train: &Split<'_>,
    valid: &Split<'_>,
    cfg: &RLTrainConfig,
) -> Result<(AgentNetwork, BaselineNetwork, RLRecord)> {
    cfg.validate()?;
    if spec.text_dim != env.hidden_dim || spec.emb_dim != env.emb_dim {
        return Err(SimtError::Config("agent dims do not match the environment".into()));
    }
    check_split(env, &spec, train, "training")?;
    check_split(env, &spec, valid, "validation")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut agent = AgentNetwork::new(spec, &mut rng)?;
    let mut baseline = BaselineNetwork::new(spec, &mut rng)?;
    let mut opt = Optimizers::new(cfg.lr, &agent, &baseline);
    let settings = UpdateSettings {
        entropy_weight: cfg.entropy_weight,
        clip_norm: cfg.clip_norm,
    };
    let mut selector = ModelSelector::new(cfg.patience);
    let mut best = (agent.params.clone(), baseline.params.clone());
    let mut record = RLRecord {
        log: Vec::new(),
        best_epoch: 0,
        updates: 0,
        episodes: 0,
    };
    let mut order: Vec<usize> = (0..train.pairs.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let take = cfg.epoch_pairs.unwrap_or(order.len()).min(order.len());
        let (mut reward_sum, mut reward_n) = (0.0, 0usize);
        for chunk in order[..take].chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len() * cfg.trajectories);
            for &i in chunk {
                let f = train.features.map(|f| &f[i]);
                let agent_f = spec.features().and(f);
                let visual = env_visual(env, train.features, i)?;
                for _ in 0..cfg.trajectories {
                    let mut erng = episode_rng(cfg.seed, record.episodes);
                    record.episodes += 1;
                    let ep = rollout(
                        &agent,
                        env,
                        &train.pairs[i],
                        agent_f,
                        visual.as_ref(),
                        ActionMode::Sample {
                            tau: cfg.tau,
                            rng: &mut erng,
                        },
                        &cfg.reward,
                        cfg.gamma,
                    )?;
                    batch.push(Trajectory {
                        episode: ep,
                        features: agent_f,
                    });
                }
            }
            let stats = reinforce_update(&mut batch, &mut agent, &mut baseline, &mut opt, &settings)?;
            if !stats.mean_reward.is_finite() || !stats.baseline_loss.is_finite() {
                return Err(SimtError::NonFinite(format!("update {} diverged", record.updates)));
            }
            reward_sum += stats.mean_reward * batch.len() as f64;
            reward_n += batch.len();
            record.updates += 1;
        }
        let transcripts = run_agent(&agent, env, valid, cfg.valid_limit)?;
        let stats = score_transcripts(&transcripts, valid)?;
        let eval = Evaluation {
            bleu: stats.bleu,
            avp: stats.avp_mean,
        };
        record.log.push(LogRow {
            epoch,
            mean_reward: reward_sum / reward_n.max(1) as f64,
            mean_bleu: stats.bleu,
            mean_avp: stats.avp_mean,
            mean_avl: stats.avl_mean,
            ratio: eval.ratio(),
        });
        log::info!(
            "rl epoch {epoch}: reward {:.4} BLEU {:.2} AVP {:.3} AVL {:.2}",
            reward_sum / reward_n.max(1) as f64,
            stats.bleu,
            stats.avp_mean,
            stats.avl_mean
        );
        match selector.observe(&eval) {
            Verdict::Improved => {
                best = (agent.params.clone(), baseline.params.clone());
                record.best_epoch = epoch;
            }
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    agent.params = best.0;
    baseline.params = best.1;
    agent.params.zero_grad();
    baseline.params.zero_grad();
    Ok((agent, baseline, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{Pair, Vocabulary};

    #[test]
    fn short_run_keeps_environment_frozen_and_is_deterministic() {
        let v = Vocabulary::build(&["a b c d e"]).unwrap();
        let env = EnvModel::new(v.clone(), v, 4, 6, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = env.params.clone();
        let pairs: Vec<Pair> = (0..4)
            .map(|i| Pair {
                src: vec![4 + i % 3, 5, 6],
                tgt: vec![4 + i % 3, 5, 6],
            })
            .collect();
        let split = Split { pairs: &pairs, features: None };
        let cfg = RLTrainConfig {
            hidden_dim: 5,
            batch_size: 2,
            trajectories: 2,
            max_epochs: 2,
            ..Default::default()
        };
        let spec = AgentSpec::for_env(&env, 5, None, None);
        let (a1, _, r1) = train_agent(&env, spec, &split, &split, &cfg).unwrap();
        let (a2, _, r2) = train_agent(&env, spec, &split, &split, &cfg).unwrap();
        assert!(env.params.bit_identical(&before));
        assert!(a1.params.bit_identical(&a2.params));
        assert_eq!(r1, r2);
        assert_eq!(r1.updates, 4);
        assert_eq!(r1.episodes, 16);
        assert!(log_csv(&r1.log).starts_with("epoch,mean_reward,mean_bleu,mean_avp,mean_avl,ratio\n"));
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(RLTrainConfig::default().validate().is_ok());
        assert!(RLTrainConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(RLTrainConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(RLTrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}

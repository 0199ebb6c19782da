//! REINFORCE with a learned baseline, and quality-to-latency model selection.

use serde::{Deserialize, Serialize};

use super::network::{AgentNetwork, BaselineNetwork};
use super::rollout::Episode;
use crate::adam::{AdamConfig, AdamState};
use crate::error::{Result, SimtError};
use crate::features::FeatureSet;
use crate::metrics::Action;
use crate::tape::Tape;

/// An episode together with the agent-side features it was played with.
#[derive(Debug, Clone)]
pub struct Trajectory<'a> {
    pub episode: Episode,
    pub features: Option<&'a FeatureSet>,
}

pub struct Optimizers {
    pub agent: AdamState,
    pub baseline: AdamState,
}

impl Optimizers {
    pub fn new(lr: f64, agent: &AgentNetwork, baseline: &BaselineNetwork) -> Self {
        let cfg = AdamConfig {
            lr,
            ..Default::default()
        };
        Optimizers {
            agent: AdamState::new(cfg, &agent.params),
            baseline: AdamState::new(cfg, &baseline.params),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateSettings {
    pub entropy_weight: f64,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub mean_reward: f64,
    pub baseline_loss: f64,
    pub agent_grad_norm: f64,
}

/// Runs the baseline over every trajectory, stores its predictions in the
/// episodes and accumulates the gradient of the mean squared error against
/// the returns. Returns the loss.
pub fn baseline_gradients(baseline: &mut BaselineNetwork, batch: &mut [Trajectory<'_>]) -> Result<f64> {
    let total_steps: usize = batch.iter().map(|t| t.episode.steps.len()).sum();
    if total_steps == 0 {
        return Err(SimtError::Empty("trajectory batch".into()));
    }
    let mut loss_sum = 0.0;
    for traj in batch.iter_mut() {
        let ep = &mut traj.episode;
        if ep.steps.is_empty() {
            ep.baseline.clear();
            continue;
        }
        let mut tape = Tape::new();
        let b = baseline.params.bind(&mut tape, true);
        let mut h = baseline.initial_var(&mut tape, &b, traj.features)?;
        let mut values = Vec::with_capacity(ep.steps.len());
        for s in &ep.steps {
            let (next, v) = baseline.step(&mut tape, &b, &s.observation, h)?;
            values.push(v);
            h = next;
        }
        let pred = tape.concat(&values)?;
        ep.baseline = tape.value(pred).to_vec();
        let target = tape.row(ep.returns.clone());
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let sum = tape.sum(sq);
        loss_sum += tape.scalar(sum);
        let loss = tape.scale(sum, 1.0 / total_steps as f64);
        tape.backward(loss)?;
        baseline.params.accumulate(&tape, &b)?;
    }
    Ok(loss_sum / total_steps as f64)
}

/// `R_t - b_t` per step.
pub fn advantages(returns: &[f64], baseline: &[f64]) -> Result<Vec<f64>> {
    if returns.len() != baseline.len() {
        return Err(SimtError::Contract(format!(
            "{} returns for {} baseline values",
            returns.len(),
            baseline.len()
        )));
    }
    Ok(returns.iter().zip(baseline).map(|(r, b)| r - b).collect())
}

/// Accumulates the gradient of
/// `(1/N) sum_traj sum_t [-log pi(a_t|o_t) adv_t - w H(pi(.|o_t))]`
/// over unforced steps into the agent parameters.
pub fn policy_gradients(
    agent: &mut AgentNetwork,
    batch: &[Trajectory<'_>],
    advantages: &[Vec<f64>],
    entropy_weight: f64,
) -> Result<()> {
    if batch.is_empty() {
        return Err(SimtError::Empty("trajectory batch".into()));
    }
    if advantages.len() != batch.len() {
        return Err(SimtError::Contract("one advantage list per trajectory".into()));
    }
    let n = batch.len() as f64;
    for (traj, adv) in batch.iter().zip(advantages) {
        let steps = &traj.episode.steps;
        if adv.len() != steps.len() {
            return Err(SimtError::Contract(format!("{} advantages for {} steps", adv.len(), steps.len())));
        }
        if steps.iter().all(|s| s.forced) {
            continue;
        }
        let mut tape = Tape::new();
        let b = agent.params.bind(&mut tape, true);
        let memory = agent.memory_vars(&mut tape, &b, traj.features)?;
        let mut h = agent.initial_var(&mut tape, &b, traj.features)?;
        let mut log_probs = Vec::with_capacity(steps.len());
        for s in steps {
            let st = agent.step(&mut tape, &b, memory.as_ref(), &s.observation, h)?;
            log_probs.push(tape.log_softmax(st.logits)?);
            h = st.hidden;
        }
        let lp = tape.concat(&log_probs)?;
        let mut pg = vec![0.0; 2 * steps.len()];
        let mut ent = vec![0.0; 2 * steps.len()];
        for (t, s) in steps.iter().enumerate() {
            if s.forced {
                continue;
            }
            pg[2 * t + s.action.index()] = -adv[t] / n;
            ent[2 * t + Action::Read.index()] = entropy_weight / n;
            ent[2 * t + Action::Write.index()] = entropy_weight / n;
        }
        let pg_term = tape.dot_const(lp, pg)?;
        let p = tape.exp(lp);
        let plogp = tape.mul(p, lp)?;
        let ent_term = tape.dot_const(plogp, ent)?;
        let loss = tape.add(pg_term, ent_term)?;
        tape.backward(loss)?;
        agent.params.accumulate(&tape, &b)?;
    }
    Ok(())
}

/// One update: baseline regression with its own optimiser, then the policy
/// gradient with advantages from the baseline's predictions.
pub fn reinforce_update(
    batch: &mut [Trajectory<'_>],
    agent: &mut AgentNetwork,
    baseline: &mut BaselineNetwork,
    opt: &mut Optimizers,
    settings: &UpdateSettings,
) -> Result<UpdateStats> {
    if batch.is_empty() {
        return Err(SimtError::Empty("trajectory batch".into()));
    }
    baseline.params.zero_grad();
    let baseline_loss = baseline_gradients(baseline, batch)?;
    if let Some(c) = settings.clip_norm {
        baseline.params.clip_grad_norm(c);
    }
    let adv = batch
        .iter()
        .map(|t| advantages(&t.episode.returns, &t.episode.baseline))
        .collect::<Result<Vec<_>>>()?;
    agent.params.zero_grad();
    policy_gradients(agent, batch, &adv, settings.entropy_weight)?;
    let agent_grad_norm = match settings.clip_norm {
        Some(c) => agent.params.clip_grad_norm(c),
        None => agent.params.grad_norm(),
    };
    opt.baseline.step(&mut baseline.params)?;
    opt.agent.step(&mut agent.params)?;
    let mean_reward = batch.iter().map(|t| t.episode.total_reward()).sum::<f64>() / batch.len() as f64;
    Ok(UpdateStats {
        mean_reward,
        baseline_loss,
        agent_grad_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub bleu: f64,
    pub avp: f64,
}

impl Evaluation {
    pub fn ratio(&self) -> f64 {
        if self.avp > 0.0 {
            self.bleu / self.avp
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Online BLEU/AVP selection with patience.
#[derive(Debug, Clone)]
pub struct ModelSelector {
    pub patience: usize,
    best: Option<(usize, f64)>,
    seen: usize,
    stale: usize,
}

impl ModelSelector {
    pub fn new(patience: usize) -> Self {
        ModelSelector {
            patience,
            best: None,
            seen: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, e: &Evaluation) -> Verdict {
        let index = self.seen;
        self.seen += 1;
        let r = e.ratio();
        match self.best {
            Some((_, best)) if r <= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::Continue
                }
            }
            _ => {
                self.best = Some((index, r));
                self.stale = 0;
                Verdict::Improved
            }
        }
    }

    pub fn best(&self) -> Option<usize> {
        self.best.map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub best: usize,
    /// Index of the evaluation at which patience ran out.
    pub stopped_at: Option<usize>,
}

pub fn select_model(history: &[Evaluation], patience: usize) -> Result<Selection> {
    if history.is_empty() {
        return Err(SimtError::Empty("evaluation history".into()));
    }
    let mut sel = ModelSelector::new(patience);
    let mut stopped_at = None;
    for (i, e) in history.iter().enumerate() {
        if sel.observe(e) == Verdict::Stop {
            stopped_at = Some(i);
            break;
        }
    }
    Ok(Selection {
        best: sel.best().expect("history is nonempty"),
        stopped_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::network::{AgentSpec, Observation};
    use crate::agent::rollout::{discounted_returns, StepRecord};
    use crate::policy::Transcript;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> AgentSpec {
        AgentSpec {
            text_dim: 3,
            emb_dim: 2,
            hidden_dim: 4,
            init: None,
            attend: None,
        }
    }

    fn episode(rng: &mut impl Rng, len: usize, forced_tail: bool) -> Episode {
        let steps: Vec<StepRecord> = (0..len)
            .map(|i| {
                let p = rng.gen_range(0.0..1.0);
                StepRecord {
                    observation: Observation {
                        text_context: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        token_embedding: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        prev_action: [p, 1.0 - p],
                        visual_context: None,
                    },
                    action: if rng.gen_bool(0.5) { Action::Read } else { Action::Write },
                    forced: forced_tail && i == len - 1,
                    write_prob: 0.5,
                    log_prob: 0.5f64.ln(),
                    entropy: 2f64.ln(),
                    attention: None,
                }
            })
            .collect();
        let rewards: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Episode {
            transcript: Transcript {
                src: vec![4],
                hyp: vec![],
                actions: vec![],
                g: vec![],
                rewards: rewards.clone(),
                attention: None,
                forced: vec![],
            },
            steps,
            returns: discounted_returns(&rewards, 0.95),
            rewards,
            baseline: vec![],
        }
    }

    fn grads(agent: &AgentNetwork) -> Vec<Vec<f64>> {
        agent.params.iter().map(|(_, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_default()).collect()
    }

    #[test]
    fn zero_advantage_leaves_only_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut agent = AgentNetwork::new(spec(), &mut rng).unwrap();
        let ep = episode(&mut rng, 5, false);
        let adv = advantages(&ep.returns, &ep.returns).unwrap();
        let batch = vec![Trajectory { episode: ep, features: None }];
        agent.params.zero_grad();
        policy_gradients(&mut agent, &batch, &[adv.clone()], 0.0).unwrap();
        assert_eq!(agent.params.grad_norm(), 0.0);
        agent.params.zero_grad();
        policy_gradients(&mut agent, &batch, &[adv], 0.001).unwrap();
        assert!(agent.params.grad_norm() > 0.0);
    }

    #[test]
    fn forced_steps_add_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut agent = AgentNetwork::new(spec(), &mut rng).unwrap();
        let with_forced = episode(&mut rng, 6, true);
        let mut without = with_forced.clone();
        without.steps.pop();
        let adv_a: Vec<f64> = with_forced.returns.clone();
        let adv_b = adv_a[..5].to_vec();
        agent.params.zero_grad();
        policy_gradients(&mut agent, &[Trajectory { episode: with_forced, features: None }], &[adv_a], 0.001).unwrap();
        let a = grads(&agent);
        agent.params.zero_grad();
        policy_gradients(&mut agent, &[Trajectory { episode: without, features: None }], &[adv_b], 0.001).unwrap();
        assert_eq!(a, grads(&agent));
    }

    #[test]
    fn baseline_learns_a_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = spec();
        let agent = AgentNetwork::new(s, &mut rng).unwrap();
        let mut baseline = BaselineNetwork::new(s, &mut rng).unwrap();
        let mut opt = Optimizers::new(0.003, &agent, &baseline);
        let mut eps = Vec::new();
        for _ in 0..4 {
            let mut ep = episode(&mut rng, 4, false);
            ep.returns = vec![0.7; 4];
            eps.push(ep);
        }
        for _ in 0..3000 {
            let mut batch: Vec<Trajectory> = eps.iter().map(|e| Trajectory { episode: e.clone(), features: None }).collect();
            baseline.params.zero_grad();
            baseline_gradients(&mut baseline, &mut batch).unwrap();
            opt.baseline.step(&mut baseline.params).unwrap();
        }
        for ep in &eps {
            let obs: Vec<Observation> = ep.steps.iter().map(|s| s.observation.clone()).collect();
            for v in baseline.predict(None, &obs).unwrap() {
                assert!((v - 0.7).abs() < 1e-3, "{v}");
            }
        }
    }

    #[test]
    fn selection_examples() {
        let h = [Evaluation { bleu: 50.0, avp: 0.7 }, Evaluation { bleu: 52.0, avp: 0.8 }];
        assert!((h[0].ratio() - 71.43).abs() < 0.01);
        assert!((h[1].ratio() - 65.0).abs() < 1e-12);
        assert_eq!(select_model(&h, 5).unwrap().best, 0);
        assert_eq!(select_model(&h[..1], 5).unwrap().best, 0);
        let mut six = vec![Evaluation { bleu: 60.0, avp: 0.5 }];
        six.extend(std::iter::repeat(Evaluation { bleu: 40.0, avp: 0.5 }).take(5));
        assert_eq!(select_model(&six, 5).unwrap(), Selection { best: 0, stopped_at: Some(5) });
        assert!(select_model(&[], 5).is_err());
    }

    #[test]
    fn empty_batch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut agent = AgentNetwork::new(spec(), &mut rng).unwrap();
        let mut baseline = BaselineNetwork::new(spec(), &mut rng).unwrap();
        let mut opt = Optimizers::new(0.01, &agent, &baseline);
        let settings = UpdateSettings {
            entropy_weight: 0.001,
            clip_norm: None,
        };
        assert!(reinforce_update(&mut [], &mut agent, &mut baseline, &mut opt, &settings).is_err());
    }
}

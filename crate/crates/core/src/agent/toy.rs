//! A two-step decision problem with a known optimum: reward 1 for WRITE at
//! the second step, 0 otherwise. The first step's action only changes the
//! second step's `a_prev`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::network::{gumbel_softmax_sample, AgentNetwork, AgentSpec, BaselineNetwork, Observation};
use super::reinforce::{reinforce_update, Optimizers, Trajectory, UpdateSettings};
use super::rollout::{discounted_returns, Episode, StepRecord, INITIAL_PREV_ACTION};
use crate::error::Result;
use crate::metrics::Action;
use crate::nn::softmax;
use crate::policy::Transcript;
use crate::tape::Tape;

pub struct TwoStep {
    /// Observations of the two steps; `prev_action` is filled in per episode.
    pub observations: [Observation; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoStepSettings {
    pub lr: f64,
    pub episodes_per_update: usize,
    pub entropy_weight: f64,
    pub tau: f64,
    pub gamma: f64,
    pub max_updates: usize,
    /// Stop once π(WRITE) at the second step reaches this.
    pub target: f64,
}

impl Default for TwoStepSettings {
    fn default() -> Self {
        TwoStepSettings {
            lr: 0.0004,
            episodes_per_update: 30,
            entropy_weight: 0.001,
            tau: 1.0,
            gamma: 0.95,
            max_updates: 2000,
            target: 0.95,
        }
    }
}

impl TwoStep {
    pub fn new(spec: &AgentSpec, rng: &mut impl Rng) -> Self {
        let obs = |rng: &mut dyn rand::RngCore| Observation {
            text_context: (0..spec.text_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            token_embedding: (0..spec.emb_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            prev_action: INITIAL_PREV_ACTION,
            visual_context: None,
        };
        TwoStep {
            observations: [obs(rng), obs(rng)],
        }
    }

    /// Policy `[p_read, p_write]` at each step along the given `a_prev` of
    /// the second step.
    fn policies(&self, agent: &AgentNetwork, second_prev: Option<[f64; 2]>) -> Result<([f64; 2], [f64; 2], Observation)> {
        let mut tape = Tape::new();
        let b = agent.params.bind(&mut tape, false);
        let h0 = agent.initial_var(&mut tape, &b, None)?;
        let first = agent.step(&mut tape, &b, None, &self.observations[0], h0)?;
        let p0 = softmax(tape.value(first.logits));
        let mut obs = self.observations[1].clone();
        obs.prev_action = second_prev.unwrap_or([p0[0], p0[1]]);
        let second = agent.step(&mut tape, &b, None, &obs, first.hidden)?;
        let p1 = softmax(tape.value(second.logits));
        Ok(([p0[0], p0[1]], [p1[0], p1[1]], obs))
    }

    /// π(WRITE) at the second step along the greedy path.
    pub fn write_prob(&self, agent: &AgentNetwork) -> Result<f64> {
        Ok(self.policies(agent, None)?.1[Action::Write.index()])
    }

    pub fn episode(&self, agent: &AgentNetwork, tau: f64, gamma: f64, rng: &mut impl Rng) -> Result<Episode> {
        let mut tape = Tape::new();
        let b = agent.params.bind(&mut tape, false);
        let mut h = agent.initial_var(&mut tape, &b, None)?;
        let mut prev = INITIAL_PREV_ACTION;
        let mut steps = Vec::with_capacity(2);
        for base in &self.observations {
            let mut obs = base.clone();
            obs.prev_action = prev;
            let st = agent.step(&mut tape, &b, None, &obs, h)?;
            h = st.hidden;
            let logits = tape.value(st.logits).to_vec();
            let policy = softmax(&logits);
            let (probs, hard) = gumbel_softmax_sample(&logits, tau, rng)?;
            let action = Action::from_index(hard);
            steps.push(StepRecord {
                observation: obs,
                action,
                forced: false,
                write_prob: policy[Action::Write.index()],
                log_prob: policy[hard].ln(),
                entropy: -policy.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>(),
                attention: None,
            });
            prev = [probs[0], probs[1]];
        }
        let rewards = vec![0.0, if steps[1].action == Action::Write { 1.0 } else { 0.0 }];
        Ok(Episode {
            transcript: Transcript {
                src: Vec::new(),
                hyp: Vec::new(),
                actions: steps.iter().map(|s| s.action).collect(),
                g: Vec::new(),
                rewards: rewards.clone(),
                attention: None,
                forced: vec![false; 2],
            },
            steps,
            returns: discounted_returns(&rewards, gamma),
            rewards,
            baseline: Vec::new(),
        })
    }
}

/// Trains a fresh agent of shape `spec` on the two-step problem. Returns the
/// number of updates after which π(WRITE) at the second step first reached
/// the target, or `None`, together with the final probability.
pub fn train_two_step(spec: AgentSpec, settings: &TwoStepSettings, seed: u64) -> Result<(Option<usize>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let problem = TwoStep::new(&spec, &mut rng);
    let mut agent = AgentNetwork::new(spec, &mut rng)?;
    let mut baseline = BaselineNetwork::new(spec, &mut rng)?;
    let mut opt = Optimizers::new(settings.lr, &agent, &baseline);
    let update = UpdateSettings {
        entropy_weight: settings.entropy_weight,
        clip_norm: None,
    };
    for u in 1..=settings.max_updates {
        let episodes = (0..settings.episodes_per_update)
            .map(|_| problem.episode(&agent, settings.tau, settings.gamma, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut batch: Vec<Trajectory> = episodes.into_iter().map(|episode| Trajectory { episode, features: None }).collect();
        reinforce_update(&mut batch, &mut agent, &mut baseline, &mut opt, &update)?;
        let p = problem.write_prob(&agent)?;
        if p >= settings.target {
            return Ok((Some(u), p));
        }
    }
    Ok((None, problem.write_prob(&agent)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> AgentSpec {
        AgentSpec {
            text_dim: 4,
            emb_dim: 3,
            hidden_dim: 8,
            init: None,
            attend: None,
        }
    }

    #[test]
    fn reward_only_for_second_step_write() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = TwoStep::new(&spec(), &mut rng);
        let agent = AgentNetwork::new(spec(), &mut rng).unwrap();
        for _ in 0..50 {
            let ep = p.episode(&agent, 1.0, 0.95, &mut rng).unwrap();
            assert_eq!(ep.rewards[0], 0.0);
            assert_eq!(ep.rewards[1], if ep.steps[1].action == Action::Write { 1.0 } else { 0.0 });
            assert!((ep.returns[0] - 0.95 * ep.rewards[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn learns_the_optimum() {
        let (reached, p) = train_two_step(spec(), &TwoStepSettings::default(), 1).unwrap();
        assert!(reached.is_some(), "π(WRITE) only reached {p}");
    }
}

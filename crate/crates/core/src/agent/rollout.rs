//! Running the agent as a simulation policy and scoring its episodes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{gumbel_softmax_with_noise, gumbel_softmax_sample, AgentNetwork, MemoryValues, Observation};
use crate::env::{EnvModel, VisualMemory};
use crate::error::{Result, SimtError};
use crate::features::FeatureSet;
use crate::metrics::reward::{combine_rewards, latency_rewards_for_actions, quality_rewards_for_actions};
use crate::metrics::{effective_delays, Action, RewardConfig};
use crate::policy::{simulate, Decision, Policy, StepContext, Transcript};
use crate::tape::Tape;
use crate::vocab::Pair;

/// `[p_read, p_write]` before the first agent step.
pub const INITIAL_PREV_ACTION: [f64; 2] = [1.0, 0.0];

pub enum ActionMode<'r> {
    /// Gumbel-Softmax sampling at temperature `tau`.
    Sample { tau: f64, rng: &'r mut ChaCha8Rng },
    /// Argmax of the policy, no noise.
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub observation: Observation,
    pub action: Action,
    pub forced: bool,
    /// Policy probability of WRITE.
    pub write_prob: f64,
    /// Log-probability of the executed action under the policy.
    pub log_prob: f64,
    pub entropy: f64,
    pub attention: Option<Vec<f64>>,
}

pub struct AgentPolicy<'a, 'r> {
    agent: &'a AgentNetwork,
    features: Option<&'a FeatureSet>,
    memory: Option<MemoryValues>,
    mode: ActionMode<'r>,
    hidden: Vec<f64>,
    prev: [f64; 2],
    pub steps: Vec<StepRecord>,
}

impl<'a, 'r> AgentPolicy<'a, 'r> {
    pub fn new(agent: &'a AgentNetwork, features: Option<&'a FeatureSet>, mode: ActionMode<'r>) -> Result<Self> {
        agent.spec.check_features(features)?;
        Ok(AgentPolicy {
            agent,
            features,
            memory: agent.memory_values(features)?,
            mode,
            hidden: agent.initial_state(features)?,
            prev: INITIAL_PREV_ACTION,
            steps: Vec::new(),
        })
    }
}

fn one_hot(a: Action) -> [f64; 2] {
    let mut v = [0.0; 2];
    v[a.index()] = 1.0;
    v
}

impl Policy for AgentPolicy<'_, '_> {
    fn reset(&mut self, _src: &[usize]) -> Result<()> {
        self.hidden = self.agent.initial_state(self.features)?;
        self.prev = INITIAL_PREV_ACTION;
        self.steps.clear();
        Ok(())
    }

    fn decide(&mut self, ctx: &StepContext<'_>) -> Result<Decision> {
        let agent = self.agent;
        let mut obs = Observation {
            text_context: ctx.proposal.text_context.clone(),
            token_embedding: ctx.proposal.token_embedding.clone(),
            prev_action: self.prev,
            visual_context: None,
        };
        let mut tape = Tape::new();
        let b = agent.params.bind(&mut tape, false);
        let memory = match &self.memory {
            Some(m) => Some(m.bind(&mut tape, &agent.spec)?),
            None => None,
        };
        let h = tape.row(self.hidden.clone());
        let step = agent.step(&mut tape, &b, memory.as_ref(), &obs, h)?;
        let logits = tape.value(step.logits).to_vec();
        let policy = crate::nn::softmax(&logits);
        let (action, prev) = match (ctx.forced, &mut self.mode) {
            (Some(f), _) => (f, one_hot(f)),
            (None, ActionMode::Sample { tau, rng }) => {
                let (probs, hard) = gumbel_softmax_sample(&logits, *tau, *rng)?;
                (Action::from_index(hard), [probs[0], probs[1]])
            }
            (None, ActionMode::Greedy) => {
                let (probs, hard) = gumbel_softmax_with_noise(&logits, &[0.0, 0.0], 1.0)?;
                (Action::from_index(hard), [probs[0], probs[1]])
            }
        };
        obs.visual_context = step.visual_context.map(|v| tape.value(v).to_vec());
        let attention = step.attention.map(|w| tape.value(w).to_vec());
        self.steps.push(StepRecord {
            observation: obs,
            action,
            forced: ctx.forced.is_some(),
            write_prob: policy[Action::Write.index()],
            log_prob: policy[action.index()].ln(),
            entropy: -policy.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>(),
            attention: attention.clone(),
        });
        self.hidden = tape.value(step.hidden).to_vec();
        self.prev = prev;
        Ok(Decision { action, attention })
    }
}

/// One scored episode. `steps`, `rewards`, `returns` and `baseline` hold
/// one entry per agent decision, i.e. every action after the initial READ.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub transcript: Transcript,
    pub steps: Vec<StepRecord>,
    pub rewards: Vec<f64>,
    pub returns: Vec<f64>,
    /// Baseline predictions, filled in by the update.
    pub baseline: Vec<f64>,
}

impl Episode {
    pub fn total_reward(&self) -> f64 {
        self.transcript.rewards.iter().sum()
    }
}

/// `R_t = sum_{i >= t} gamma^(i - t) r_i`; `gamma = 0` gives the
/// instantaneous rewards.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Per-action rewards of a finished transcript against its reference.
pub fn transcript_rewards(t: &Transcript, reference: &[usize], cfg: &RewardConfig) -> Result<Vec<f64>> {
    let content = t.content();
    let quality = quality_rewards_for_actions(&t.actions, content, reference)?;
    let delays = effective_delays(&t.actions, content.len())?;
    let latency = latency_rewards_for_actions(&t.actions, &delays, t.src.len(), cfg)?;
    combine_rewards(&quality, &latency, cfg)
}

/// Episode RNG derived from the run seed and the episode index.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

#[allow(clippy::too_many_arguments)]
pub fn rollout(
    agent: &AgentNetwork,
    env: &EnvModel,
    pair: &Pair,
    features: Option<&FeatureSet>,
    env_visual: Option<&VisualMemory>,
    mode: ActionMode<'_>,
    rewards: &RewardConfig,
    gamma: f64,
) -> Result<Episode> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(SimtError::Config(format!("discount {gamma} outside [0, 1]")));
    }
    let mut policy = AgentPolicy::new(agent, features, mode)?;
    let mut transcript = simulate(&mut policy, env, &pair.src, env_visual)?;
    let steps = std::mem::take(&mut policy.steps);
    if steps.len() + 1 != transcript.actions.len() {
        return Err(SimtError::Contract(format!(
            "{} agent steps for {} actions",
            steps.len(),
            transcript.actions.len()
        )));
    }
    transcript.rewards = transcript_rewards(&transcript, &pair.tgt, rewards)?;
    let step_rewards = transcript.rewards[1..].to_vec();
    let returns = discounted_returns(&step_rewards, gamma);
    Ok(Episode {
        transcript,
        steps,
        rewards: step_rewards,
        returns,
        baseline: Vec::new(),
    })
}

pub mod meta;
pub mod network;
pub mod reinforce;
pub mod rollout;
pub mod toy;
pub mod train;

pub use meta::{load_agent, save_agent};
pub use network::{
    agent_visual_attention, gumbel_softmax_sample, gumbel_softmax_with_noise, AgentNetwork, AgentSpec, BaselineNetwork,
    Observation, AGENT_HIDDEN_DIM,
};
pub use reinforce::{reinforce_update, select_model, Evaluation, ModelSelector, Optimizers, Trajectory, UpdateSettings};
pub use rollout::{discounted_returns, episode_rng, rollout, ActionMode, AgentPolicy, Episode, StepRecord};
pub use train::{log_csv, run_agent, run_policy, score_transcripts, train_agent, LogRow, RLRecord, RLTrainConfig};

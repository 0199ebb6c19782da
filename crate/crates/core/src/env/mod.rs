pub mod meta;
pub mod model;
pub mod train;

pub use meta::{load_env, save_env};
pub use model::{max_output_len, DecoderInit, DecoderState, EncoderState, EnvModel, Proposal, VisualMemory};
pub use train::{evaluate_bleu, strip_eos, train_consecutive, EnvTrainConfig, Split, TrainingRecord};

pub mod adam;
pub mod agent;
pub mod checkpoint;
pub mod env;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod policy;
pub mod tape;
pub mod tensor;
pub mod vocab;

pub use error::{Result, SimtError};
pub use params::{Binding, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

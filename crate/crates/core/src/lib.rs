pub mod autograd;
pub mod bagsynth;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod pseudolabel;
pub mod tensor;

pub use autograd::{Graph, Reduction, Var};
pub use error::{Error, Result};
pub use heads::{BagOutput, HeadVariant, MilHeadSpec};
pub use model::{BagInference, Model, ModelSpec};
pub use tensor::{Real, Tensor};

pub mod afb;
pub mod autograd;
pub mod catm;
pub mod checkpoint;
pub mod data;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod swin;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use checkpoint::Checkpoint;
pub use data::SegmentationSample;
pub use metrics::MetricsReport;
pub use model::{ModelConfig, Profile, SegmentationNet};
pub use trainer::{TrainConfig, Trainer};

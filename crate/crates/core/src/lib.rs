pub mod adagravity;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod embedding;
pub mod error;
pub mod gc2former;
pub mod hadamard;
mod linalg;
pub mod model;
pub mod nn;
pub mod scaler;
pub mod tensor;
pub mod training;

pub use config::{Ablation, ConfigFile, ModelConfig, SigmaD};
pub use error::{Error, Result};
pub use model::{Batch, Gravityformer};
pub use scaler::ZScoreScaler;
pub use tensor::Array;

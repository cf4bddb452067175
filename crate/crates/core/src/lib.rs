pub mod autograd;
pub mod config;
pub mod context;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod predictor;
pub mod scope;
pub mod session_model;
pub mod sessions;
pub mod train;

pub use config::{ItemLoss, ModelConfig, SessionAblation, Task, WeightTransform};
pub use error::{Error, Result};
pub use graph::GlobalGraph;
pub use model::{Model, NextBehavior, Prediction};
pub use par::Execution;

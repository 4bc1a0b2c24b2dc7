//! Decoder-only transformer with a synthetic visual prefix.

pub mod checkpoint;
mod config;
mod params;
mod transformer;
mod vision;

pub use config::{Init, MlpKind, ModelConfig, NormKind, ParamSpec, PROJ_STD};
pub use params::{Bindings, ParamTree};
pub use transformer::{Forward, Inputs, Model};
pub use vision::{VisionMode, VisionStub, DEFAULT_VISION_NOISE};

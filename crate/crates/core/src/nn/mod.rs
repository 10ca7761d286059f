//! A small CPU convolutional network engine in `f64`.

pub mod arch;
pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod tensor;

pub use arch::{ActShape, ArchPreset, ArchitectureSpec, LayerSpec, NUM_CLASSES};
pub use layers::Mode;
pub use model::{gradient_check, GradCheck, Gradients, LayerParams, Model, ModelParams};
pub use tensor::Tensor;

//! Per-pixel task-conditioned dense prediction.

pub mod autodiff;
pub mod classes;
pub mod conditioning;
pub mod cttn;
pub mod error;
pub mod heads;
pub mod imageio;
pub mod metrics;
pub mod network;
pub mod palette;
pub mod render;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autodiff::{grad_check, Graph, Var};
pub use error::{CtError, Result};
pub use palette::{Rule, Task, TaskId, TaskPalette};
pub use tensor::{Real, Shape, Tensor};

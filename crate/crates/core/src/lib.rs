//! Multi-label image classification with class attention maps and a
//! bidirectional peephole LSTM over class-indexed time steps.
//!
//! Pipeline: [`extractor`] (dense dilated VGG-style features) →
//! [`attention`] (one `1×1`-conv map per class) → [`lstm`] (recurrent
//! class-dependency model) → per-class sigmoid heads, trained by [`train`]
//! and scored with [`metrics`].

pub mod attention;
pub mod checkpoint;
pub mod dataio;
pub mod deps;
pub mod error;
pub mod extractor;
pub mod graph;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use model::{Model, ModelConfig, Recurrence};
pub use tensor::{ConvSpec, Tensor};

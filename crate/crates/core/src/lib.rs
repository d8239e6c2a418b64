//! Weakly supervised semantic segmentation of diffuse lung disease patterns.
//!
//! The crate bundles everything the training pipeline needs: a dense tensor
//! type with reverse-mode autodiff, a miniature 3D-in/2D-out U-Net, the
//! partial-annotation loss, synthetic phantom volumes for desk-scale runs,
//! grouped cross-validation planning, Adam training with early stopping, and
//! the evaluation stack (per-slice metrics, confusion matrices, paired
//! t-tests).

pub mod dataset;
pub mod error;
pub mod eval;
pub mod folds;
pub mod graph;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId, PrimitiveKind};
pub use loss::{ClassId, LossMode, PixelLabel, CLASS_NAMES, NUM_CLASSES, PROB_FLOOR};
pub use model::{Model, ModelConfig};
pub use tensor::{ByteMap, Tensor};

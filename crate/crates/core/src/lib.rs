//! Segmentation of hyperreflective foci in retinal OCT B-scans.
//!
//! The crate bundles a small dense-tensor autograd core, three
//! encoder–decoder networks (SemSeg, ResUNet, ResUNet+), cross-entropy and
//! smooth Dice objectives, the OCT preprocessing and patching pipeline, an
//! Adam training loop with best-validation checkpointing, and evaluation by
//! DSC, precision–recall curves, average precision and ROC AUC.

// `!(x > 0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod matrix;
pub mod models;
pub mod plot;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use conv::{ConvSpec, Padding};
pub use error::{Error, Result};
pub use eval::{EvalReport, PrCurve};
pub use graph::{Gradients, Graph, Var};
pub use losses::{DiceReduction, LossValue, Objective};
pub use models::{build_model, ArchConfig, Architecture, ForwardOptions, Model, OutputMode};
pub use tensor::{Real, Tensor};
pub use train::{TrainConfig, Trainer};

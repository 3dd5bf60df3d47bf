//! Physically parameterized adversarial patch attacks against overhead-imagery
//! classifiers, end to end: a minimal reverse-mode autodiff engine, a compact
//! CNN stand-in classifier, geodata chip I/O, a synthetic revisit-sequence
//! generator, the GSD-driven patch renderer and overlay, an edge-aware
//! subtlety penalty, and the single- and multi-frame attack optimizers.
//!
//! All numeric kernels are generic over [`Scalar`] (`f32` for compute, `f64`
//! for gradient verification); concrete aliases live at the crate root.

pub mod attack;
pub mod edges;
pub mod eval;
pub mod geodata;
pub mod gradcheck;
pub mod io_util;
pub mod model;
pub mod patch;
pub mod ppm;
pub mod report;
pub mod scalar;
pub mod seeds;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use attack::{AttackConfig, Phase, TransformSampler};
pub use edges::{CannyParams, EdgeMask, PenaltyWeights};
pub use eval::{AttackResult, EvalReport, FrameRecord, Scope};
pub use geodata::{FilterRules, FrameMetadata, ImageChip, SceneSequence};
pub use model::{Model, ModelConfig, TrainOptions, TrainingLog};
pub use patch::{PhysicalPatch, Placement};
pub use scalar::Scalar;
pub use tape::{OverlayRect, Padding, Tape, Var};
pub use tensor::{Tensor, TensorError};

// Re-exported because `FrameMetadata` exposes its timestamp type.
pub use chrono;

/// Compute-precision model.
pub type Model32 = Model<f32>;
/// Verification-precision model.
pub type Model64 = Model<f64>;

/// Compute-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Compute-precision tape.
pub type Tape32 = Tape<f32>;
/// Verification-precision tape.
pub type Tape64 = Tape<f64>;

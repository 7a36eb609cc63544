//! Dense network engine for the branched (K+1)-way classifier.
//!
//! The model keeps two independent stacks of dense + ReLU + dropout layers,
//! one per encoder stream, concatenates their outputs and maps the result to
//! K+1 logits with a single dense head. Everything is generic over
//! [`Scalar`] so the same code runs in `f32` for training and `f64` for
//! gradient verification.

use std::fmt::Debug;

use ndarray::LinalgScalar;
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub mod checkpoint;
pub mod model;
pub mod ops;
pub mod optim;
pub mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use model::{argmax, Activation, Dense, ForwardCache, Gradients, Model, ModelConfig};
pub use ops::{cross_entropy_loss, softmax, softmax_rows};
pub use optim::{adamw_step, OptState};
pub use train::{train, train_with, TrainConfig, TrainHistory};

/// Floating-point element type the engine can run in.
pub trait Scalar:
    LinalgScalar + Float + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    fn from_f32_exact(v: f32) -> Self {
        <Self as FromPrimitive>::from_f32(v).expect("finite f32 converts")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("float converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

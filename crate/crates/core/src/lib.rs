//! Two-stage compositional scene generation.
//!
//! A planning network recurrently emits object segments (shape distribution,
//! class distribution, depth map) that are composited by depth into a soft
//! layout; an execution network renders the layout into an image, with every
//! style latent modulating the features inside its own segment. Both stages
//! are trained adversarially on a procedural toy-scene dataset.
//!
//! All numerics run on a small reverse-mode autodiff engine ([`Tape`]) that is
//! generic over the scalar type; the model is trained in `f32` and the type
//! aliases at the bottom of this file fix that choice for downstream crates.

pub mod attention;
pub mod autodiff;
pub mod compositor;
pub mod config;
pub mod discriminators;
pub mod error;
pub mod eval;
pub mod executor;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod planner;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod toydata;
pub mod trainer;
pub mod visuals;

pub use autodiff::{Gradients, Tape, Unary, Var};
pub use error::{Error, Result};
pub use rng::{Rng, RngState};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision tensor, the training element type.
pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;

//! Language-conditioned target-oriented grasping in clutter.
//!
//! A synthetic top-down tabletop simulator, a frozen aligned vision-language
//! stand-in encoder, a geometric grasp proposer, and a cross-attention policy
//! over grasp candidates trained with discrete soft actor-critic under a
//! two-stage curriculum.
//!
//! The neural-network substrate in [`nn`] is generic over the scalar type;
//! the aliases below fix the precision the rest of the crate runs at.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod grasp;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod sac;
pub mod scalar;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

/// Scalar type used by the simulator, encoder, policy and trainer.
pub type Scalar = f64;
pub type Tensor = nn::Tensor2<Scalar>;
pub type Params = nn::ParamStore<Scalar>;

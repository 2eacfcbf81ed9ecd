//! Adversarial weather particles against optical flow.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! at the crate root fix it to `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attack;
pub mod cli;
pub mod error;
pub mod flow_field;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod oracles;
pub mod particles;
pub mod real;
pub mod render;
pub mod scene_io;
pub mod template;
pub mod victim;

pub use error::{Error, Result};
pub use real::Real;

pub type Scene = scene_io::SceneBundle<f64>;
pub type Flow = flow_field::FlowField<f64>;
pub type Frame = image::Image<f64>;
pub type Particles = particles::ParticleSet<f64>;
pub type ParticleF64 = particles::Particle<f64>;

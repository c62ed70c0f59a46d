//! Demonstration synthesis for a desk-scale robot arm.
//!
//! The crate turns a small set of seed demonstrations into a large set of
//! synthetic ones. Seed trajectories are expanded by perturbing object-centric
//! key states, the robot-only motion is rendered with a software rasterizer,
//! and a conditional diffusion model turns those motion renders into full
//! observation videos. A two dimensional toy world provides the scripted
//! expert, the paired training data, and the policy evaluation harness that
//! closes the loop.

pub mod conditioning;
pub mod diffusion;
pub mod geom;
pub mod kinematics;
pub mod pipeline;
pub mod render;
pub mod rng;
pub mod toyworld;
pub mod trajectory;

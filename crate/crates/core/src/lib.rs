//! Multi-robot trajectory planning by coordinating single-robot trajectory
//! diffusion models with constraint-based search.
//!
//! The crate is organized bottom-up: [`geometry`] and [`trajectory`] hold the
//! shared data model, [`worlds`] produces demonstrations and adherence scores,
//! [`diffusion`] trains and samples the denoiser, [`constraints`] turns other
//! robots into sphere soft constraints, and [`coordination`] / [`sequencing`]
//! build multi-robot and long-horizon planners on top. [`mapf`] holds the grid
//! baselines and [`bench`] the experiment harness.

pub mod bench;
pub mod constraints;
pub mod coordination;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod mapf;
pub mod problem;
pub mod rng;
pub mod sequencing;
pub mod trajectory;
pub mod worlds;

pub use error::{MmdError, Result};
pub use geometry::{RobotShape, TileCoord, TileKind, Vec2, World};
pub use trajectory::{Conflict, State, Trajectory};

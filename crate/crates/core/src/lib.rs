//! Few-shot human motion transfer by personalized geometry and texture
//! generation, trained and verified against a synthetic articulated world.

pub mod bundle;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod graph;
pub mod netblocks;
pub mod optim;
pub mod params;
pub mod renderer;
pub mod synthworld;
pub mod tensor;
pub mod trainer;
pub mod texture;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use tensor::{Real, Tensor};

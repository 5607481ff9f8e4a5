//! Out-of-core, ray-guided multi-channel volume rendering with a residency
//! octree: a resolution-independent octree whose nodes track which
//! resolution levels are partially cache-resident and carry min/max
//! culling metadata per channel slot.

pub mod cli;
pub mod error;
pub mod geometry;
pub mod octree;
pub mod paging;
pub mod render;
pub mod service;
pub mod session;
pub mod synth;
pub mod transfer;
pub mod volume;

pub use error::{Error, Result};

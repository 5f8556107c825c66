//! Automatic noise, SNR and resolution-normalised quality measurement for
//! magnitude MR volumes.

pub mod container;
pub mod error;
pub mod noise;
pub mod phantom;
pub mod report;
pub mod resolution;
pub mod volume;

pub use error::{Error, Result};
pub use noise::{estimate, find_t_opt, NoiseEstimate, SearchConfig, ThresholdResult};
pub use volume::{PixelStats, Slice, Volume, VoxelSize};

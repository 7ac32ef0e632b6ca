//! Volumetric diffusion toolkit.
//!
//! Volumes are `f32` grids in `[z, y, x]` order. A noise schedule and a
//! noise-predicting [`denoiser`] drive the samplers in [`sampler`]; the same
//! prior powers plug-and-play restoration ([`inverse`]), inpainting
//! ([`inpaint`]) and anomaly detection ([`anomaly`]). [`tiler`] lifts any of
//! them to volumes larger than the network's patch size.

pub mod anomaly;
pub mod condition;
pub mod denoiser;
pub mod error;
pub mod inpaint;
pub mod inverse;
pub mod metrics;
pub mod phantom;
pub mod posenc;
pub mod sampler;
pub mod schedule;
pub mod tiler;
pub mod voxgrid;

pub use condition::{AnatomyMask, ChannelLayout, ConditionBundle, ConditionSource};
pub use denoiser::{Conditioned, Denoiser, NoiseEstimator};
pub use error::{Error, Result};
pub use schedule::{cosine_schedule, NoiseSchedule, ScheduleParams};
pub use voxgrid::{RegionClass, Shape3, Volume};

//! Noise-prediction functions `eps(x_t, t, conditions)`.
//!
//! Three realizations share the [`Denoiser`] contract: the trainable
//! [`ToyUNet`], closed-form reference denoisers in [`analytic`], and the
//! [`ControlAdapter`] that wraps a frozen network.

pub mod analytic;
pub mod checkpoint;
pub mod control;
pub mod layers;
pub mod tensor;
pub mod train;
pub mod unet;

pub use analytic::{AnalyticGaussianDenoiser, BoxShrinkDenoiser};
pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Model};
pub use control::ControlAdapter;
pub use tensor::{Real, Tensor};
pub use train::{adapter_train_step, loss_and_grad, train_step, Adam, TrainItem};
pub use unet::{ToyUNet, UNetConfig};

use crate::condition::{assemble_condition_channels, ChannelLayout, ConditionBundle, ConditionChannels};
use crate::error::{Error, Result};
use crate::voxgrid::Volume;

/// Predicts the noise contained in `x_t` at timestep `t`.
pub trait Denoiser: Send + Sync {
    fn predict_noise(&self, x_t: &Volume, t: usize, cond: &ConditionBundle) -> Result<Volume>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_noise(&self, x_t: &Volume, t: usize, cond: &ConditionBundle) -> Result<Volume> {
        (**self).predict_noise(x_t, t, cond)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict_noise(&self, x_t: &Volume, t: usize, cond: &ConditionBundle) -> Result<Volume> {
        (**self).predict_noise(x_t, t, cond)
    }
}

/// Whole-volume noise field for a state `x_t`; samplers are written against
/// this so that direct and window-fused estimation share one code path.
pub trait NoiseEstimator: Sync {
    fn estimate(&self, x_t: &Volume, t: usize) -> Result<Volume>;
}

impl<E: NoiseEstimator + ?Sized> NoiseEstimator for &E {
    fn estimate(&self, x_t: &Volume, t: usize) -> Result<Volume> {
        (**self).estimate(x_t, t)
    }
}

impl<E: NoiseEstimator + ?Sized> NoiseEstimator for Box<E> {
    fn estimate(&self, x_t: &Volume, t: usize) -> Result<Volume> {
        (**self).estimate(x_t, t)
    }
}

/// A denoiser bound to one set of conditions.
pub struct Conditioned<'a, D: ?Sized> {
    pub denoiser: &'a D,
    pub cond: &'a ConditionBundle,
}

impl<'a, D: Denoiser + ?Sized> Conditioned<'a, D> {
    pub fn new(denoiser: &'a D, cond: &'a ConditionBundle) -> Self {
        Conditioned { denoiser, cond }
    }
}

impl<D: Denoiser + ?Sized> NoiseEstimator for Conditioned<'_, D> {
    fn estimate(&self, x_t: &Volume, t: usize) -> Result<Volume> {
        if self.cond.shape() != x_t.shape() {
            return Err(Error::ShapeMismatch(format!(
                "conditions cover {:?}, image is {:?}",
                self.cond.shape(),
                x_t.shape()
            )));
        }
        self.denoiser.predict_noise(x_t, t, self.cond)
    }
}

/// Checks shapes and layout, then stacks the image with its condition channels.
pub(crate) fn network_input<F: Real>(
    layout: &ChannelLayout,
    x_t: &Volume,
    t: usize,
    cond: &ConditionBundle,
) -> Result<(Tensor<F>, ConditionChannels)> {
    if t == 0 {
        return Err(Error::InvalidArgument("timestep must be >= 1".into()));
    }
    let channels = assemble_condition_channels(cond)?;
    layout.check_compatible(&channels.layout)?;
    if channels.shape != x_t.shape() {
        return Err(Error::ShapeMismatch(format!(
            "conditions {:?} vs image {:?}",
            channels.shape,
            x_t.shape()
        )));
    }
    let mut data = Vec::with_capacity(x_t.len() * (1 + channels.channels));
    data.extend(x_t.data().iter().map(|&v| F::of(v as f64)));
    data.extend(channels.data.iter().map(|&v| F::of(v as f64)));
    Ok((Tensor::from_data(1 + channels.channels, x_t.shape(), data), channels))
}

impl Denoiser for ToyUNet<f32> {
    fn predict_noise(&self, x_t: &Volume, t: usize, cond: &ConditionBundle) -> Result<Volume> {
        let (input, channels) = network_input::<f32>(&self.layout, x_t, t, cond)?;
        let (out, _) = self.forward(&input, t, channels.region_index);
        x_t.with_data(out.data)
    }
}

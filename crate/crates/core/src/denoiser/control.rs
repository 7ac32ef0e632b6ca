//! Control adapter: fine-tunes a frozen noise predictor on an extra
//! target-image condition.
//!
//! A trainable copy of the base encoder reads the same input plus an encoded
//! target image. Its skip and bottleneck features pass through 1x1
//! projections that start at zero and are added to the frozen encoder's
//! features, so at initialization the adapter reproduces the base network.

use rand::Rng;

use super::layers::{silu, silu_backward_tensor, Conv3d};
use super::tensor::{Real, Tensor};
use super::unet::{DecoderCache, Encoder, EncoderCache, Features, ToyUNet};
use super::{network_input, Denoiser};
use crate::condition::ConditionBundle;
use crate::error::{Error, Result};
use crate::voxgrid::Volume;

/// Parameters the adapter trains.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlBranch<F> {
    pub copy: Encoder<F>,
    pub hint_in: Conv3d<F>,
    pub hint_out: Conv3d<F>,
    pub link_skip: Conv3d<F>,
    pub link_bottom: Conv3d<F>,
}

impl<F: Real> ControlBranch<F> {
    pub fn zeros_like(&self) -> Self {
        ControlBranch {
            copy: self.copy.zeros_like(),
            hint_in: self.hint_in.zeros_like(),
            hint_out: self.hint_out.zeros_like(),
            link_skip: self.link_skip.zeros_like(),
            link_bottom: self.link_bottom.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Vec<F>)> {
        let mut v: Vec<(String, &Vec<F>)> = self.copy.tensors().into_iter().map(|(n, t)| (format!("copy.{n}"), t)).collect();
        for (name, conv) in [
            ("hint_in", &self.hint_in),
            ("hint_out", &self.hint_out),
            ("link_skip", &self.link_skip),
            ("link_bottom", &self.link_bottom),
        ] {
            v.extend(conv.tensors().into_iter().map(|(n, t)| (format!("{name}.{n}"), t)));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        let mut v = self.copy.tensors_mut();
        v.extend(self.hint_in.tensors_mut());
        v.extend(self.hint_out.tensors_mut());
        v.extend(self.link_skip.tensors_mut());
        v.extend(self.link_bottom.tensors_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlAdapter<F> {
    /// Never updated by adapter training.
    pub base: ToyUNet<F>,
    pub branch: ControlBranch<F>,
}

pub struct ControlCache<F> {
    emb: Vec<F>,
    target: Tensor<F>,
    hint_pre: Tensor<F>,
    hint_act: Tensor<F>,
    copy_features: Features<F>,
    copy_enc: EncoderCache<F>,
    dec: DecoderCache<F>,
}

impl<F: Real> ControlAdapter<F> {
    pub fn new<R: Rng + ?Sized>(base: ToyUNet<F>, rng: &mut R) -> Self {
        let (b, m) = (base.config.base_channels, base.config.mid_channels);
        let branch = ControlBranch {
            copy: base.encoder.clone(),
            hint_in: Conv3d::new(1, b, 3, 1, rng),
            hint_out: Conv3d::new(b, b, 3, 1, rng),
            link_skip: Conv3d::zeroed(b, b, 1, 1),
            link_bottom: Conv3d::zeroed(m, m, 1, 1),
        };
        ControlAdapter { base, branch }
    }

    /// `input` as for [`ToyUNet::forward`]; `target` is a one-channel image.
    pub fn forward(&self, input: &Tensor<F>, target: &Tensor<F>, t: usize, region: usize) -> (Tensor<F>, ControlCache<F>) {
        let (emb, _) = self.base.time_embedding(t, region);
        let (base_features, _) = self.base.encoder.forward(input, &emb, None);
        let hint_pre = self.branch.hint_in.forward(target);
        let hint_act = silu(&hint_pre);
        let hint = self.branch.hint_out.forward(&hint_act);
        let (copy_features, copy_enc) = self.branch.copy.forward(input, &emb, Some(&hint));
        let mut skip = base_features.skip;
        skip.add_assign(&self.branch.link_skip.forward(&copy_features.skip));
        let mut bottom = base_features.bottom;
        bottom.add_assign(&self.branch.link_bottom.forward(&copy_features.bottom));
        let (out, dec) = self.base.decoder.forward(&Features { skip, bottom }, &emb);
        let cache = ControlCache { emb, target: target.clone(), hint_pre, hint_act, copy_features, copy_enc, dec };
        (out, cache)
    }

    /// Accumulates gradients of the trainable branch only.
    pub fn backward(&self, c: &ControlCache<F>, d_out: &Tensor<F>, grad: &mut ControlBranch<F>) {
        let mut frozen = self.base.decoder.zeros_like();
        let mut d_emb = vec![F::zero(); self.base.config.temb_dim];
        let (d_skip, d_bottom) = self.base.decoder.backward(&c.dec, d_out, &mut frozen, &mut d_emb, &c.emb);
        let br = &self.branch;
        let d_cs = br.link_skip.backward(&c.copy_features.skip, &d_skip, &mut grad.link_skip, true).expect("dx requested");
        let d_cb = br
            .link_bottom
            .backward(&c.copy_features.bottom, &d_bottom, &mut grad.link_bottom, true)
            .expect("dx requested");
        let d_hint = br.copy.backward(&c.copy_enc, &c.copy_features, &d_cs, &d_cb, &mut grad.copy, &mut d_emb, &c.emb);
        let d_act = br.hint_out.backward(&c.hint_act, &d_hint, &mut grad.hint_out, true).expect("dx requested");
        let d_pre = silu_backward_tensor(&c.hint_pre, &d_act);
        br.hint_in.backward(&c.target, &d_pre, &mut grad.hint_in, false);
    }
}

/// Extracts the target image a control adapter needs.
pub(crate) fn target_tensor<F: Real>(cond: &ConditionBundle, shape: [usize; 3]) -> Result<Tensor<F>> {
    let target = cond.target.as_ref().ok_or(Error::MissingCondition("control target image"))?;
    if target.shape() != shape {
        return Err(Error::ShapeMismatch(format!("target {:?} vs image {:?}", target.shape(), shape)));
    }
    Ok(Tensor::from_f32(1, shape, target.data()))
}

impl Denoiser for ControlAdapter<f32> {
    fn predict_noise(&self, x_t: &Volume, t: usize, cond: &ConditionBundle) -> Result<Volume> {
        let target = target_tensor::<f32>(cond, x_t.shape())?;
        let (input, channels) = network_input::<f32>(&self.base.layout, x_t, t, cond)?;
        let (out, _) = self.forward(&input, &target, t, channels.region_index);
        x_t.with_data(out.data)
    }
}

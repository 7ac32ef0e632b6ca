//! Noise-prediction training with an L1 objective and Adam.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::control::{target_tensor, ControlAdapter, ControlBranch};
use super::tensor::{Real, Tensor};
use super::unet::ToyUNet;
use super::network_input;
use crate::condition::{AnatomyMask, ChannelLayout, ConditionBundle};
use crate::error::{Error, Result};
use crate::sampler::q_sample;
use crate::schedule::NoiseSchedule;
use crate::voxgrid::{crop, multi_level_sample, resize_trilinear, RegionClass, Shape3, Volume};

/// One training example: a clean patch and its conditions.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub x0: Volume,
    pub cond: ConditionBundle,
}

impl TrainItem {
    /// One multi-level view of a training volume with matching conditions.
    /// A target condition, when given, is viewed the same way (trilinear).
    #[allow(clippy::too_many_arguments)]
    pub fn multi_level<R: Rng + ?Sized>(
        image: &Volume,
        anatomy: &AnatomyMask,
        target: Option<&Volume>,
        region: RegionClass,
        layout: &ChannelLayout,
        patch: Shape3,
        rng: &mut R,
    ) -> Result<TrainItem> {
        if anatomy.shape() != image.shape() {
            return Err(Error::ShapeMismatch(format!("anatomy {:?} vs image {:?}", anatomy.shape(), image.shape())));
        }
        let (x0, record) = multi_level_sample(image, patch, rng)?;
        let mut cond = ConditionBundle::for_record(region, anatomy.view(&record, patch)?, &record, layout)?;
        if let Some(t) = target {
            image.check_same_shape(t)?;
            cond.target = Some(resize_trilinear(&crop(t, record.origin, record.extent)?, patch)?);
        }
        Ok(TrainItem { x0, cond })
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(1e-4)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using `grads * scale`.
    pub fn apply(&mut self, params: Vec<&mut Vec<f32>>, grads: Vec<&Vec<f32>>, scale: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g[i] as f64 * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let upd = self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] = (p[i] as f64 - upd) as f32;
            }
        }
    }
}

/// Mean absolute error and its gradient w.r.t. the prediction.
pub fn l1_loss<F: Real>(pred: &Tensor<F>, target: &[F]) -> (f64, Tensor<F>) {
    let n = pred.data.len() as f64;
    let inv = F::of(1.0 / n);
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.channels, pred.dims);
    for ((g, &p), &t) in grad.data.iter_mut().zip(&pred.data).zip(target) {
        let r = p - t;
        loss += r.f64().abs();
        *g = if r > F::zero() {
            inv
        } else if r < F::zero() {
            -inv
        } else {
            F::zero()
        };
    }
    (loss / n, grad)
}

/// L1 noise-prediction loss for one noised input and the parameter gradient.
pub fn loss_and_grad<F: Real>(model: &ToyUNet<F>, input: &Tensor<F>, t: usize, region: usize, eps: &[F]) -> (f64, ToyUNet<F>) {
    let (pred, cache) = model.forward(input, t, region);
    let (loss, d_out) = l1_loss(&pred, eps);
    let mut grad = model.zeros_like();
    model.backward(&cache, &d_out, &mut grad);
    (loss, grad)
}

fn noised<R: Rng + ?Sized>(item: &TrainItem, schedule: &NoiseSchedule, rng: &mut R) -> Result<(usize, Volume, Vec<f32>)> {
    let t = rng.random_range(1..=schedule.steps());
    let eps: Vec<f32> = (0..item.x0.len()).map(|_| StandardNormal.sample(rng)).collect();
    let noise = item.x0.with_data(eps)?;
    let x_t = q_sample(schedule, &item.x0, t, &noise)?;
    Ok((t, x_t, noise.into_data()))
}

fn check_loss(loss: f64, step: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingDiverged { step: step as usize, loss })
    }
}

fn add_into(acc: Vec<&mut Vec<f32>>, g: Vec<(String, &Vec<f32>)>) {
    for (a, (_, b)) in acc.into_iter().zip(g) {
        for (x, &y) in a.iter_mut().zip(b.iter()) {
            *x += y;
        }
    }
}

/// Adds the batch-summed gradients into `grad`; returns the mean batch loss.
pub fn accumulate_gradients<R: Rng + ?Sized>(
    model: &ToyUNet<f32>,
    batch: &[TrainItem],
    schedule: &NoiseSchedule,
    rng: &mut R,
    grad: &mut ToyUNet<f32>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = 0.0;
    for item in batch {
        let (t, x_t, eps) = noised(item, schedule, rng)?;
        let (input, channels) = network_input::<f32>(&model.layout, &x_t, t, &item.cond)?;
        let (loss, g) = loss_and_grad(model, &input, t, channels.region_index, &eps);
        total += loss;
        add_into(grad.tensors_mut(), g.tensors());
    }
    Ok(total / batch.len() as f64)
}

/// One optimizer step on a batch: uniform timesteps, Gaussian noise, L1 loss.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut ToyUNet<f32>,
    opt: &mut Adam,
    batch: &[TrainItem],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let mut grad = model.zeros_like();
    let loss = accumulate_gradients(model, batch, schedule, rng, &mut grad)?;
    check_loss(loss, opt.steps() + 1)?;
    let grads: Vec<&Vec<f32>> = grad.tensors().into_iter().map(|(_, g)| g).collect();
    opt.apply(model.tensors_mut(), grads, 1.0 / batch.len() as f64);
    Ok(loss)
}

/// One optimizer step for the control branch; the base stays frozen.
/// Every item must carry a target image.
pub fn adapter_train_step<R: Rng + ?Sized>(
    adapter: &mut ControlAdapter<f32>,
    opt: &mut Adam,
    batch: &[TrainItem],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut grad: ControlBranch<f32> = adapter.branch.zeros_like();
    let mut total = 0.0;
    for item in batch {
        let target = target_tensor::<f32>(&item.cond, item.x0.shape())?;
        let (t, x_t, eps) = noised(item, schedule, rng)?;
        let (input, channels) = network_input::<f32>(&adapter.base.layout, &x_t, t, &item.cond)?;
        let (pred, cache) = adapter.forward(&input, &target, t, channels.region_index);
        let (loss, d_out) = l1_loss(&pred, &eps);
        adapter.backward(&cache, &d_out, &mut grad);
        total += loss;
    }
    let loss = total / batch.len() as f64;
    check_loss(loss, opt.steps() + 1)?;
    let grads: Vec<&Vec<f32>> = grad.tensors().into_iter().map(|(_, g)| g).collect();
    opt.apply(adapter.branch.tensors_mut(), grads, 1.0 / batch.len() as f64);
    Ok(loss)
}

/// Largest relative disagreement between analytic and central-difference
/// gradients of `<probe, forward(input)>`, over `per_tensor` entries of every
/// parameter array.
pub fn gradient_check<R: Rng + ?Sized>(
    model: &ToyUNet<f64>,
    input: &Tensor<f64>,
    t: usize,
    region: usize,
    per_tensor: usize,
    step: f64,
    rng: &mut R,
) -> f64 {
    let (out, cache) = model.forward(input, t, region);
    let probe: Vec<f64> = (0..out.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |m: &ToyUNet<f64>| -> f64 {
        let (o, _) = m.forward(input, t, region);
        o.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
    };
    let mut grad = model.zeros_like();
    model.backward(&cache, &Tensor::from_data(out.channels, out.dims, probe.clone()), &mut grad);
    let analytic: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, g)| g.clone()).collect();
    let mut worst = 0.0f64;
    let mut work = model.clone();
    for (k, a) in analytic.iter().enumerate() {
        for _ in 0..per_tensor.min(a.len()) {
            let i = rng.random_range(0..a.len());
            let orig = work.tensors()[k].1[i];
            work.tensors_mut()[k][i] = orig + step;
            let plus = objective(&work);
            work.tensors_mut()[k][i] = orig - step;
            let minus = objective(&work);
            work.tensors_mut()[k][i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (a[i] - numeric).abs() / a[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

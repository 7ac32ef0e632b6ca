use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::voxgrid::{voxel_count, Shape3};

/// Scalar type the network is generic over (`f32` for use, `f64` for gradient checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Channel-major multi-channel volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub channels: usize,
    pub dims: Shape3,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(channels: usize, dims: Shape3) -> Self {
        Tensor { channels, dims, data: vec![F::zero(); channels * voxel_count(dims)] }
    }

    pub fn from_data(channels: usize, dims: Shape3, data: Vec<F>) -> Self {
        assert_eq!(data.len(), channels * voxel_count(dims), "tensor data length");
        Tensor { channels, dims, data }
    }

    pub fn from_f32(channels: usize, dims: Shape3, data: &[f32]) -> Self {
        Self::from_data(channels, dims, data.iter().map(|&v| F::of(v as f64)).collect())
    }

    pub fn vox(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn channel(&self, c: usize) -> &[F] {
        let n = self.vox();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [F] {
        let n = self.vox();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Stacks channels of `a` then `b`.
    pub fn concat(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        assert_eq!(a.dims, b.dims, "concat dims");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor { channels: a.channels + b.channels, dims: a.dims, data }
    }

    /// Splits off the first `c` channels.
    pub fn split(self, c: usize) -> (Tensor<F>, Tensor<F>) {
        let n = self.vox();
        let mut data = self.data;
        let tail = data.split_off(c * n);
        (
            Tensor { channels: c, dims: self.dims, data },
            Tensor { channels: self.channels - c, dims: self.dims, data: tail },
        )
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.data.len(), other.data.len(), "add dims");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.f64() as f32).collect()
    }
}

//! Network layers with hand-derived reverse passes.
//!
//! Every layer keeps its parameters as flat vectors so that a zeroed clone of
//! the layer doubles as its gradient accumulator.

use rand::Rng;
use rayon::prelude::*;

use super::tensor::{Real, Tensor};
use crate::voxgrid::{voxel_count, Shape3};

fn uniform<F: Real, R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<F> {
    (0..n).map(|_| F::of(rng.random_range(-bound..bound))).collect()
}

/// `out[x] += w0*inp[x-1] + w1*inp[x] + w2*inp[x+1]` with zero padding.
#[inline]
fn row3_acc<F: Real>(out: &mut [F], inp: &[F], w: [F; 3]) {
    let n = out.len();
    if n == 1 {
        out[0] += w[1] * inp[0];
        return;
    }
    out[0] += w[1] * inp[0] + w[2] * inp[1];
    out[n - 1] += w[0] * inp[n - 2] + w[1] * inp[n - 1];
    let mid = &mut out[1..n - 1];
    for (((o, &a), &b), &c) in mid.iter_mut().zip(&inp[..n - 2]).zip(&inp[1..n - 1]).zip(&inp[2..]) {
        *o += w[0] * a + w[1] * b + w[2] * c;
    }
}

/// Returns `[sum dy[x]*inp[x-1], sum dy[x]*inp[x], sum dy[x]*inp[x+1]]`.
#[inline]
fn row3_dot<F: Real>(dy: &[F], inp: &[F]) -> [F; 3] {
    let n = dy.len();
    let centre: F = dy.iter().zip(inp).map(|(&a, &b)| a * b).sum();
    if n == 1 {
        return [F::zero(), centre, F::zero()];
    }
    let left: F = dy[1..].iter().zip(&inp[..n - 1]).map(|(&a, &b)| a * b).sum();
    let right: F = dy[..n - 1].iter().zip(&inp[1..]).map(|(&a, &b)| a * b).sum();
    [left, centre, right]
}

/// Valid output range along one axis for a tap offset `d` in `{-1, 0, 1}`.
#[inline]
fn tap_range(n: usize, d: isize) -> std::ops::Range<usize> {
    match d {
        -1 => 1..n,
        1 => 0..n.saturating_sub(1),
        _ => 0..n,
    }
}

/// 3D convolution, kernel 1 or 3 (zero padding 1), stride 1 or 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d<F> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[cout][cin][kz][ky][kx]`
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Real> Conv3d<F> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        assert!(stride == 1 || (stride == 2 && kernel == 3), "unsupported stride");
        let fan_in = cin * kernel.pow(3);
        let bound = (1.0 / fan_in as f64).sqrt();
        Conv3d {
            cin,
            cout,
            kernel,
            stride,
            weight: uniform(rng, cout * fan_in, bound),
            bias: uniform(rng, cout, bound),
        }
    }

    pub fn zeroed(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Conv3d {
            cin,
            cout,
            kernel,
            stride,
            weight: vec![F::zero(); cout * cin * kernel.pow(3)],
            bias: vec![F::zero(); cout],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeroed(self.cin, self.cout, self.kernel, self.stride)
    }

    pub fn out_dims(&self, dims: Shape3) -> Shape3 {
        if self.stride == 1 {
            dims
        } else {
            [dims[0].div_ceil(2), dims[1].div_ceil(2), dims[2].div_ceil(2)]
        }
    }

    fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.channels, self.cin, "conv input channels");
        let od = self.out_dims(x.dims);
        let on = voxel_count(od);
        let mut out = Tensor::zeros(self.cout, od);
        let taps = self.taps();
        out.data.par_chunks_mut(on).enumerate().for_each(|(oc, o)| {
            o.iter_mut().for_each(|v| *v = self.bias[oc]);
            for ic in 0..self.cin {
                let w = &self.weight[(oc * self.cin + ic) * taps..(oc * self.cin + ic + 1) * taps];
                let inp = x.channel(ic);
                match (self.kernel, self.stride) {
                    (1, _) => {
                        let w0 = w[0];
                        for (a, &b) in o.iter_mut().zip(inp) {
                            *a += w0 * b;
                        }
                    }
                    (3, 1) => conv3_s1_acc(o, inp, x.dims, w, false),
                    _ => conv3_s2_acc(o, od, inp, x.dims, w),
                }
            }
        });
        out
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient if asked.
    pub fn backward(&self, x: &Tensor<F>, dy: &Tensor<F>, grad: &mut Conv3d<F>, need_dx: bool) -> Option<Tensor<F>> {
        let taps = self.taps();
        let cin = self.cin;
        let on = dy.vox();
        grad.bias.iter_mut().enumerate().for_each(|(oc, b)| *b += dy.channel(oc).iter().copied().sum());
        grad.weight.par_chunks_mut(cin * taps).enumerate().for_each(|(oc, gw)| {
            let g = dy.channel(oc);
            for ic in 0..cin {
                let inp = x.channel(ic);
                let gw = &mut gw[ic * taps..(ic + 1) * taps];
                match (self.kernel, self.stride) {
                    (1, _) => gw[0] += g.iter().zip(inp).map(|(&a, &b)| a * b).sum(),
                    (3, 1) => conv3_s1_wgrad(gw, g, inp, x.dims),
                    _ => conv3_s2_wgrad(gw, g, dy.dims, inp, x.dims),
                }
            }
        });
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(cin, x.dims);
        let n = x.vox();
        dx.data.par_chunks_mut(n).enumerate().for_each(|(ic, d)| {
            for oc in 0..self.cout {
                let w = &self.weight[(oc * cin + ic) * taps..(oc * cin + ic + 1) * taps];
                let g = &dy.data[oc * on..(oc + 1) * on];
                match (self.kernel, self.stride) {
                    (1, _) => {
                        let w0 = w[0];
                        for (a, &b) in d.iter_mut().zip(g) {
                            *a += w0 * b;
                        }
                    }
                    (3, 1) => conv3_s1_acc(d, g, x.dims, w, true),
                    _ => conv3_s2_dx(d, x.dims, g, dy.dims, w),
                }
            }
        });
        Some(dx)
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Vec<F>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Stride-1 3x3x3 correlation of one channel pair. With `transpose` the
/// kernel is mirrored, which gives the input gradient.
fn conv3_s1_acc<F: Real>(out: &mut [F], inp: &[F], dims: Shape3, w: &[F], transpose: bool) {
    let [d, h, wd] = dims;
    for kz in 0..3 {
        for ky in 0..3 {
            let base = (kz * 3 + ky) * 3;
            let (dz, dy, row_w) = if transpose {
                (1 - kz as isize, 1 - ky as isize, [w[base + 2], w[base + 1], w[base]])
            } else {
                (kz as isize - 1, ky as isize - 1, [w[base], w[base + 1], w[base + 2]])
            };
            for z in tap_range(d, dz) {
                let zi = (z as isize + dz) as usize;
                for y in tap_range(h, dy) {
                    let yi = (y as isize + dy) as usize;
                    let o = (z * h + y) * wd;
                    let i = (zi * h + yi) * wd;
                    row3_acc(&mut out[o..o + wd], &inp[i..i + wd], row_w);
                }
            }
        }
    }
}

fn conv3_s1_wgrad<F: Real>(gw: &mut [F], dy: &[F], inp: &[F], dims: Shape3) {
    let [d, h, wd] = dims;
    for kz in 0..3 {
        for ky in 0..3 {
            let (dz, dyo) = (kz as isize - 1, ky as isize - 1);
            let mut acc = [F::zero(); 3];
            for z in tap_range(d, dz) {
                let zi = (z as isize + dz) as usize;
                for y in tap_range(h, dyo) {
                    let yi = (y as isize + dyo) as usize;
                    let o = (z * h + y) * wd;
                    let i = (zi * h + yi) * wd;
                    let r = row3_dot(&dy[o..o + wd], &inp[i..i + wd]);
                    acc[0] += r[0];
                    acc[1] += r[1];
                    acc[2] += r[2];
                }
            }
            let base = (kz * 3 + ky) * 3;
            gw[base] += acc[0];
            gw[base + 1] += acc[1];
            gw[base + 2] += acc[2];
        }
    }
}

#[inline]
fn s2_src(o: usize, k: usize, n: usize) -> Option<usize> {
    let i = (2 * o + k) as isize - 1;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

fn conv3_s2_acc<F: Real>(out: &mut [F], od: Shape3, inp: &[F], id: Shape3, w: &[F]) {
    for oz in 0..od[0] {
        for oy in 0..od[1] {
            for ox in 0..od[2] {
                let mut acc = F::zero();
                for kz in 0..3 {
                    let Some(iz) = s2_src(oz, kz, id[0]) else { continue };
                    for ky in 0..3 {
                        let Some(iy) = s2_src(oy, ky, id[1]) else { continue };
                        for kx in 0..3 {
                            let Some(ix) = s2_src(ox, kx, id[2]) else { continue };
                            acc += w[(kz * 3 + ky) * 3 + kx] * inp[(iz * id[1] + iy) * id[2] + ix];
                        }
                    }
                }
                out[(oz * od[1] + oy) * od[2] + ox] += acc;
            }
        }
    }
}

fn conv3_s2_wgrad<F: Real>(gw: &mut [F], dy: &[F], od: Shape3, inp: &[F], id: Shape3) {
    for oz in 0..od[0] {
        for oy in 0..od[1] {
            for ox in 0..od[2] {
                let g = dy[(oz * od[1] + oy) * od[2] + ox];
                for kz in 0..3 {
                    let Some(iz) = s2_src(oz, kz, id[0]) else { continue };
                    for ky in 0..3 {
                        let Some(iy) = s2_src(oy, ky, id[1]) else { continue };
                        for kx in 0..3 {
                            let Some(ix) = s2_src(ox, kx, id[2]) else { continue };
                            gw[(kz * 3 + ky) * 3 + kx] += g * inp[(iz * id[1] + iy) * id[2] + ix];
                        }
                    }
                }
            }
        }
    }
}

fn conv3_s2_dx<F: Real>(dx: &mut [F], id: Shape3, dy: &[F], od: Shape3, w: &[F]) {
    for oz in 0..od[0] {
        for oy in 0..od[1] {
            for ox in 0..od[2] {
                let g = dy[(oz * od[1] + oy) * od[2] + ox];
                for kz in 0..3 {
                    let Some(iz) = s2_src(oz, kz, id[0]) else { continue };
                    for ky in 0..3 {
                        let Some(iy) = s2_src(oy, ky, id[1]) else { continue };
                        for kx in 0..3 {
                            let Some(ix) = s2_src(ox, kx, id[2]) else { continue };
                            dx[(iz * id[1] + iy) * id[2] + ix] += g * w[(kz * 3 + ky) * 3 + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Group normalization with per-channel affine.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm<F> {
    pub groups: usize,
    pub channels: usize,
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
}

pub struct GroupNormCache<F> {
    xhat: Tensor<F>,
    rstd: Vec<f64>,
}

const GN_EPS: f64 = 1e-5;

impl<F: Real> GroupNorm<F> {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "groups must divide channels");
        GroupNorm { groups, channels, gamma: vec![F::one(); channels], beta: vec![F::zero(); channels] }
    }

    pub fn zeros_like(&self) -> Self {
        GroupNorm {
            groups: self.groups,
            channels: self.channels,
            gamma: vec![F::zero(); self.channels],
            beta: vec![F::zero(); self.channels],
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> (Tensor<F>, GroupNormCache<F>) {
        let n = x.vox();
        let per = self.channels / self.groups;
        let mut xhat = Tensor::zeros(x.channels, x.dims);
        let mut y = Tensor::zeros(x.channels, x.dims);
        let mut rstd = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let span = g * per * n..(g + 1) * per * n;
            let xs = &x.data[span.clone()];
            let count = xs.len() as f64;
            let mean = xs.iter().map(|v| v.f64()).sum::<f64>() / count;
            let var = xs.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / count;
            let r = 1.0 / (var + GN_EPS).sqrt();
            rstd.push(r);
            let (mean_f, r_f) = (F::of(mean), F::of(r));
            for (h, &v) in xhat.data[span.clone()].iter_mut().zip(xs) {
                *h = (v - mean_f) * r_f;
            }
            for c in g * per..(g + 1) * per {
                let (ga, be) = (self.gamma[c], self.beta[c]);
                let (hs, ys) = (&xhat.data[c * n..(c + 1) * n], &mut y.data[c * n..(c + 1) * n]);
                for (o, &h) in ys.iter_mut().zip(hs) {
                    *o = h * ga + be;
                }
            }
        }
        (y, GroupNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &GroupNormCache<F>, dy: &Tensor<F>, grad: &mut GroupNorm<F>) -> Tensor<F> {
        let n = dy.vox();
        let per = self.channels / self.groups;
        let mut dx = Tensor::zeros(dy.channels, dy.dims);
        for c in 0..self.channels {
            let (g, h) = (dy.channel(c), cache.xhat.channel(c));
            grad.gamma[c] += g.iter().zip(h).map(|(&a, &b)| a * b).sum();
            grad.beta[c] += g.iter().copied().sum();
        }
        for grp in 0..self.groups {
            let count = (per * n) as f64;
            let mut sum_d = 0.0;
            let mut sum_dh = 0.0;
            for c in grp * per..(grp + 1) * per {
                let ga = self.gamma[c].f64();
                for (&g, &h) in dy.channel(c).iter().zip(cache.xhat.channel(c)) {
                    let d = g.f64() * ga;
                    sum_d += d;
                    sum_dh += d * h.f64();
                }
            }
            let r = cache.rstd[grp];
            let (mean_d, mean_dh) = (F::of(sum_d / count), F::of(sum_dh / count));
            let r_f = F::of(r);
            for c in grp * per..(grp + 1) * per {
                let ga = self.gamma[c];
                let (dys, hs) = (&dy.data[c * n..(c + 1) * n], &cache.xhat.data[c * n..(c + 1) * n]);
                for ((o, &g), &h) in dx.data[c * n..(c + 1) * n].iter_mut().zip(dys).zip(hs) {
                    *o = r_f * (g * ga - mean_d - h * mean_dh);
                }
            }
        }
        dx
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Vec<F>)> {
        vec![("gamma", &self.gamma), ("beta", &self.beta)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    Tensor { channels: x.channels, dims: x.dims, data: silu_vec(&x.data) }
}

pub fn silu_vec<F: Real>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient through SiLU given its input `x`.
pub fn silu_backward<F: Real>(x: &[F], dy: &[F]) -> Vec<F> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (F::one() + v * (F::one() - s))
        })
        .collect()
}

pub fn silu_backward_tensor<F: Real>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    Tensor { channels: x.channels, dims: x.dims, data: silu_backward(&x.data, &dy.data) }
}

/// Dense layer `y = W x + b` with `W` stored `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    pub din: usize,
    pub dout: usize,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Self {
        let bound = (1.0 / din as f64).sqrt();
        Linear { din, dout, weight: uniform(rng, din * dout, bound), bias: uniform(rng, dout, bound) }
    }

    pub fn zeros_like(&self) -> Self {
        Linear { din: self.din, dout: self.dout, weight: vec![F::zero(); self.din * self.dout], bias: vec![F::zero(); self.dout] }
    }

    pub fn forward(&self, x: &[F]) -> Vec<F> {
        (0..self.dout)
            .map(|o| {
                let row = &self.weight[o * self.din..(o + 1) * self.din];
                self.bias[o] + row.iter().zip(x).map(|(&w, &v)| w * v).sum::<F>()
            })
            .collect()
    }

    pub fn backward(&self, x: &[F], dy: &[F], grad: &mut Linear<F>) -> Vec<F> {
        let mut dx = vec![F::zero(); self.din];
        for o in 0..self.dout {
            grad.bias[o] += dy[o];
            for i in 0..self.din {
                grad.weight[o * self.din + i] += dy[o] * x[i];
                dx[i] += dy[o] * self.weight[o * self.din + i];
            }
        }
        dx
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Vec<F>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Nearest-neighbour upsampling to `dims` (each source voxel covers up to 2^3 targets).
pub fn upsample_nearest<F: Real>(x: &Tensor<F>, dims: Shape3) -> Tensor<F> {
    let mut out = Tensor::zeros(x.channels, dims);
    let n = voxel_count(dims);
    let sd = x.dims;
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut out.data[c * n..(c + 1) * n];
        let mut i = 0;
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let row = ((z / 2) * sd[1] + y / 2) * sd[2];
                for xx in 0..dims[2] {
                    dst[i] = src[row + xx / 2];
                    i += 1;
                }
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<F: Real>(dy: &Tensor<F>, src_dims: Shape3) -> Tensor<F> {
    let mut dx = Tensor::zeros(dy.channels, src_dims);
    let dims = dy.dims;
    let sn = voxel_count(src_dims);
    for c in 0..dy.channels {
        let g = dy.channel(c);
        let dst = &mut dx.data[c * sn..(c + 1) * sn];
        let mut i = 0;
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let row = ((z / 2) * src_dims[1] + y / 2) * src_dims[2];
                for xx in 0..dims[2] {
                    dst[row + xx / 2] += g[i];
                    i += 1;
                }
            }
        }
    }
    dx
}

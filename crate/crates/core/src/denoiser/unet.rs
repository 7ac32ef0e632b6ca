//! Two-level 3D encoder-decoder noise predictor.
//!
//! ```text
//! input ─ conv_in ─ res1 ──────────────────────────── skip ─┐
//!                     └ down(s2) ─ res2 ─ res_mid ─ up ─ cat ┴ res3 ─ GN ─ SiLU ─ conv_out
//! ```
//!
//! Timestep and region enter through a shared embedding vector that every
//! residual block projects onto its channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    silu, silu_backward, silu_backward_tensor, silu_vec, upsample_nearest, upsample_nearest_backward, Conv3d,
    GroupNorm, GroupNormCache, Linear,
};
use super::tensor::{Real, Tensor};
use crate::condition::ChannelLayout;
use crate::error::{Error, Result};
use crate::voxgrid::RegionClass;

/// Topology of the toy network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub mid_channels: usize,
    pub temb_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { base_channels: 8, mid_channels: 16, temb_dim: 32, groups: 4 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_channels > 0
            && self.mid_channels > 0
            && self.temb_dim >= 2
            && self.temb_dim % 2 == 0
            && self.groups > 0
            && self.base_channels % self.groups == 0
            && self.mid_channels % self.groups == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid network config {self:?}")))
        }
    }
}

/// Sinusoidal embedding of an integer timestep.
pub fn timestep_features<F: Real>(t: usize, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp()).collect();
    out.extend(freqs.iter().map(|f| F::of((t as f64 * f).sin())));
    out.extend(freqs.iter().map(|f| F::of((t as f64 * f).cos())));
    out
}

/// Timestep MLP plus additive region table.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbed<F> {
    pub lin1: Linear<F>,
    pub lin2: Linear<F>,
    /// `[region][temb_dim]`
    pub region: Vec<F>,
}

pub struct TimeCache<F> {
    feats: Vec<F>,
    h1: Vec<F>,
    a1: Vec<F>,
    emb: Vec<F>,
    region: usize,
}

impl<F: Real> TimeEmbed<F> {
    fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let region = (0..RegionClass::ALL.len() * dim).map(|_| F::of(rng.random_range(-0.5..0.5))).collect();
        TimeEmbed { lin1: Linear::new(dim, dim, rng), lin2: Linear::new(dim, dim, rng), region }
    }

    fn zeros_like(&self) -> Self {
        TimeEmbed { lin1: self.lin1.zeros_like(), lin2: self.lin2.zeros_like(), region: vec![F::zero(); self.region.len()] }
    }

    /// Returns `SiLU(emb)`, the vector every block consumes.
    fn forward(&self, t: usize, region: usize) -> (Vec<F>, TimeCache<F>) {
        let dim = self.lin1.din;
        let feats = timestep_features::<F>(t, dim);
        let h1 = self.lin1.forward(&feats);
        let a1 = silu_vec(&h1);
        let mut emb = self.lin2.forward(&a1);
        for (e, &r) in emb.iter_mut().zip(&self.region[region * dim..(region + 1) * dim]) {
            *e += r;
        }
        let act = silu_vec(&emb);
        (act, TimeCache { feats, h1, a1, emb, region })
    }

    fn backward(&self, cache: &TimeCache<F>, d_act: &[F], grad: &mut TimeEmbed<F>) {
        let dim = self.lin1.din;
        let d_emb = silu_backward(&cache.emb, d_act);
        for (g, &d) in grad.region[cache.region * dim..(cache.region + 1) * dim].iter_mut().zip(&d_emb) {
            *g += d;
        }
        let d_a1 = self.lin2.backward(&cache.a1, &d_emb, &mut grad.lin2);
        let d_h1 = silu_backward(&cache.h1, &d_a1);
        self.lin1.backward(&cache.feats, &d_h1, &mut grad.lin1);
    }

    fn tensors(&self) -> Vec<(String, &Vec<F>)> {
        let mut v = named("lin1", self.lin1.tensors());
        v.extend(named("lin2", self.lin2.tensors()));
        v.push(("region".to_string(), &self.region));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        let mut v = self.lin1.tensors_mut();
        v.extend(self.lin2.tensors_mut());
        v.push(&mut self.region);
        v
    }
}

fn named<'a, F>(prefix: &str, items: Vec<(&'static str, &'a Vec<F>)>) -> Vec<(String, &'a Vec<F>)> {
    items.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

fn prefixed<'a, F>(prefix: &str, items: Vec<(String, &'a Vec<F>)>) -> Vec<(String, &'a Vec<F>)> {
    items.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// Pre-activation residual block with an embedding projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<F> {
    pub gn1: GroupNorm<F>,
    pub conv1: Conv3d<F>,
    pub proj: Linear<F>,
    pub gn2: GroupNorm<F>,
    pub conv2: Conv3d<F>,
    pub skip: Option<Conv3d<F>>,
}

pub struct ResCache<F> {
    x: Tensor<F>,
    gn1: GroupNormCache<F>,
    n1: Tensor<F>,
    a1: Tensor<F>,
    gn2: GroupNormCache<F>,
    n2: Tensor<F>,
    a2: Tensor<F>,
}

impl<F: Real> ResBlock<F> {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, temb: usize, groups: usize, rng: &mut R) -> Self {
        ResBlock {
            gn1: GroupNorm::new(groups, cin),
            conv1: Conv3d::new(cin, cout, 3, 1, rng),
            proj: Linear::new(temb, cout, rng),
            gn2: GroupNorm::new(groups, cout),
            conv2: Conv3d::new(cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv3d::new(cin, cout, 1, 1, rng)),
        }
    }

    fn zeros_like(&self) -> Self {
        ResBlock {
            gn1: self.gn1.zeros_like(),
            conv1: self.conv1.zeros_like(),
            proj: self.proj.zeros_like(),
            gn2: self.gn2.zeros_like(),
            conv2: self.conv2.zeros_like(),
            skip: self.skip.as_ref().map(|s| s.zeros_like()),
        }
    }

    fn forward(&self, x: &Tensor<F>, emb: &[F]) -> (Tensor<F>, ResCache<F>) {
        let (n1, gn1) = self.gn1.forward(x);
        let a1 = silu(&n1);
        let mut h = self.conv1.forward(&a1);
        let shift = self.proj.forward(emb);
        for (c, &s) in shift.iter().enumerate() {
            h.channel_mut(c).iter_mut().for_each(|v| *v += s);
        }
        let (n2, gn2) = self.gn2.forward(&h);
        let a2 = silu(&n2);
        let mut out = self.conv2.forward(&a2);
        match &self.skip {
            Some(s) => out.add_assign(&s.forward(x)),
            None => out.add_assign(x),
        }
        (out, ResCache { x: x.clone(), gn1, n1, a1, gn2, n2, a2 })
    }

    /// Returns the input gradient and accumulates into `d_emb`.
    fn backward(&self, c: &ResCache<F>, dy: &Tensor<F>, grad: &mut ResBlock<F>, d_emb: &mut [F], emb: &[F]) -> Tensor<F> {
        let da2 = self.conv2.backward(&c.a2, dy, &mut grad.conv2, true).expect("dx requested");
        let dn2 = silu_backward_tensor(&c.n2, &da2);
        let dh = self.gn2.backward(&c.gn2, &dn2, &mut grad.gn2);
        let d_shift: Vec<F> = (0..dh.channels).map(|ch| dh.channel(ch).iter().copied().sum()).collect();
        for (d, g) in d_emb.iter_mut().zip(self.proj.backward(emb, &d_shift, &mut grad.proj)) {
            *d += g;
        }
        let da1 = self.conv1.backward(&c.a1, &dh, &mut grad.conv1, true).expect("dx requested");
        let dn1 = silu_backward_tensor(&c.n1, &da1);
        let mut dx = self.gn1.backward(&c.gn1, &dn1, &mut grad.gn1);
        match (&self.skip, grad.skip.as_mut()) {
            (Some(s), Some(gs)) => dx.add_assign(&s.backward(&c.x, dy, gs, true).expect("dx requested")),
            _ => dx.add_assign(dy),
        }
        dx
    }

    fn tensors(&self) -> Vec<(String, &Vec<F>)> {
        let mut v = named("gn1", self.gn1.tensors());
        v.extend(named("conv1", self.conv1.tensors()));
        v.extend(named("proj", self.proj.tensors()));
        v.extend(named("gn2", self.gn2.tensors()));
        v.extend(named("conv2", self.conv2.tensors()));
        if let Some(s) = &self.skip {
            v.extend(named("skip", s.tensors()));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        let mut v = self.gn1.tensors_mut();
        v.extend(self.conv1.tensors_mut());
        v.extend(self.proj.tensors_mut());
        v.extend(self.gn2.tensors_mut());
        v.extend(self.conv2.tensors_mut());
        if let Some(s) = &mut self.skip {
            v.extend(s.tensors_mut());
        }
        v
    }
}

/// Contracting path: full-resolution skip features and bottleneck features.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<F> {
    pub conv_in: Conv3d<F>,
    pub res1: ResBlock<F>,
    pub down: Conv3d<F>,
    pub res2: ResBlock<F>,
    pub res_mid: ResBlock<F>,
}

pub struct EncoderCache<F> {
    input: Tensor<F>,
    r1: ResCache<F>,
    r2: ResCache<F>,
    rm: ResCache<F>,
}

/// Encoder outputs consumed by the decoder.
pub struct Features<F> {
    pub skip: Tensor<F>,
    pub bottom: Tensor<F>,
}

impl<F: Real> Encoder<F> {
    fn new<R: Rng + ?Sized>(cin: usize, cfg: &UNetConfig, rng: &mut R) -> Self {
        let (b, m, e, g) = (cfg.base_channels, cfg.mid_channels, cfg.temb_dim, cfg.groups);
        Encoder {
            conv_in: Conv3d::new(cin, b, 3, 1, rng),
            res1: ResBlock::new(b, b, e, g, rng),
            down: Conv3d::new(b, m, 3, 2, rng),
            res2: ResBlock::new(m, m, e, g, rng),
            res_mid: ResBlock::new(m, m, e, g, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Encoder {
            conv_in: self.conv_in.zeros_like(),
            res1: self.res1.zeros_like(),
            down: self.down.zeros_like(),
            res2: self.res2.zeros_like(),
            res_mid: self.res_mid.zeros_like(),
        }
    }

    /// `extra` is added to the stem output (used by the control copy).
    pub(crate) fn forward(&self, x: &Tensor<F>, emb: &[F], extra: Option<&Tensor<F>>) -> (Features<F>, EncoderCache<F>) {
        let mut h0 = self.conv_in.forward(x);
        if let Some(e) = extra {
            h0.add_assign(e);
        }
        let (s1, r1) = self.res1.forward(&h0, emb);
        let d = self.down.forward(&s1);
        let (h2, r2) = self.res2.forward(&d, emb);
        let (m, rm) = self.res_mid.forward(&h2, emb);
        let cache = EncoderCache { input: x.clone(), r1, r2, rm };
        (Features { skip: s1, bottom: m }, cache)
    }

    /// Returns the gradient w.r.t. the stem output, which the control hint path
    /// also needs.
    pub(crate) fn backward(
        &self,
        c: &EncoderCache<F>,
        features: &Features<F>,
        d_skip: &Tensor<F>,
        d_bottom: &Tensor<F>,
        grad: &mut Encoder<F>,
        d_emb: &mut [F],
        emb: &[F],
    ) -> Tensor<F> {
        let dh2 = self.res_mid.backward(&c.rm, d_bottom, &mut grad.res_mid, d_emb, emb);
        let dd = self.res2.backward(&c.r2, &dh2, &mut grad.res2, d_emb, emb);
        let mut ds1 = self.down.backward(&features.skip, &dd, &mut grad.down, true).expect("dx requested");
        ds1.add_assign(d_skip);
        let dh0 = self.res1.backward(&c.r1, &ds1, &mut grad.res1, d_emb, emb);
        self.conv_in.backward(&c.input, &dh0, &mut grad.conv_in, false);
        dh0
    }

    pub fn tensors(&self) -> Vec<(String, &Vec<F>)> {
        let mut v = named("conv_in", self.conv_in.tensors());
        v.extend(prefixed("res1", self.res1.tensors()));
        v.extend(named("down", self.down.tensors()));
        v.extend(prefixed("res2", self.res2.tensors()));
        v.extend(prefixed("res_mid", self.res_mid.tensors()));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        let mut v = self.conv_in.tensors_mut();
        v.extend(self.res1.tensors_mut());
        v.extend(self.down.tensors_mut());
        v.extend(self.res2.tensors_mut());
        v.extend(self.res_mid.tensors_mut());
        v
    }
}

/// Expanding path.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<F> {
    pub up: Conv3d<F>,
    pub res3: ResBlock<F>,
    pub gn_out: GroupNorm<F>,
    pub conv_out: Conv3d<F>,
}

pub struct DecoderCache<F> {
    bottom_dims: [usize; 3],
    upsampled: Tensor<F>,
    r3: ResCache<F>,
    go: GroupNormCache<F>,
    no: Tensor<F>,
    ao: Tensor<F>,
}

impl<F: Real> Decoder<F> {
    fn new<R: Rng + ?Sized>(cfg: &UNetConfig, rng: &mut R) -> Self {
        let (b, m, e, g) = (cfg.base_channels, cfg.mid_channels, cfg.temb_dim, cfg.groups);
        Decoder {
            up: Conv3d::new(m, b, 3, 1, rng),
            res3: ResBlock::new(2 * b, b, e, g, rng),
            gn_out: GroupNorm::new(g, b),
            conv_out: Conv3d::new(b, 1, 3, 1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Decoder {
            up: self.up.zeros_like(),
            res3: self.res3.zeros_like(),
            gn_out: self.gn_out.zeros_like(),
            conv_out: self.conv_out.zeros_like(),
        }
    }

    pub(crate) fn forward(&self, f: &Features<F>, emb: &[F]) -> (Tensor<F>, DecoderCache<F>) {
        let upsampled = upsample_nearest(&f.bottom, f.skip.dims);
        let u = self.up.forward(&upsampled);
        let cat = Tensor::concat(&u, &f.skip);
        let (h3, r3) = self.res3.forward(&cat, emb);
        let (no, go) = self.gn_out.forward(&h3);
        let ao = silu(&no);
        let out = self.conv_out.forward(&ao);
        (out, DecoderCache { bottom_dims: f.bottom.dims, upsampled, r3, go, no, ao })
    }

    /// Returns gradients w.r.t. the skip and bottleneck features.
    pub(crate) fn backward(
        &self,
        c: &DecoderCache<F>,
        dy: &Tensor<F>,
        grad: &mut Decoder<F>,
        d_emb: &mut [F],
        emb: &[F],
    ) -> (Tensor<F>, Tensor<F>) {
        let dao = self.conv_out.backward(&c.ao, dy, &mut grad.conv_out, true).expect("dx requested");
        let dno = silu_backward_tensor(&c.no, &dao);
        let dh3 = self.gn_out.backward(&c.go, &dno, &mut grad.gn_out);
        let dcat = self.res3.backward(&c.r3, &dh3, &mut grad.res3, d_emb, emb);
        let b = self.up.cout;
        let (du, d_skip) = dcat.split(b);
        let dup = self.up.backward(&c.upsampled, &du, &mut grad.up, true).expect("dx requested");
        let d_bottom = upsample_nearest_backward(&dup, c.bottom_dims);
        (d_skip, d_bottom)
    }

    pub fn tensors(&self) -> Vec<(String, &Vec<F>)> {
        let mut v = named("up", self.up.tensors());
        v.extend(prefixed("res3", self.res3.tensors()));
        v.extend(named("gn_out", self.gn_out.tensors()));
        v.extend(named("conv_out", self.conv_out.tensors()));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        let mut v = self.up.tensors_mut();
        v.extend(self.res3.tensors_mut());
        v.extend(self.gn_out.tensors_mut());
        v.extend(self.conv_out.tensors_mut());
        v
    }
}

/// The toy conditional noise predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyUNet<F> {
    pub config: UNetConfig,
    pub layout: ChannelLayout,
    pub time: TimeEmbed<F>,
    pub encoder: Encoder<F>,
    pub decoder: Decoder<F>,
}

/// Everything the reverse pass needs from one forward pass.
pub struct UNetCache<F> {
    pub(crate) emb: Vec<F>,
    pub(crate) time: TimeCache<F>,
    pub(crate) features: Features<F>,
    pub(crate) enc: EncoderCache<F>,
    pub(crate) dec: DecoderCache<F>,
}

impl<F: Real> ToyUNet<F> {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, layout: ChannelLayout, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let time = TimeEmbed::new(config.temb_dim, rng);
        let encoder = Encoder::new(layout.input_channels(), &config, rng);
        let decoder = Decoder::new(&config, rng);
        Ok(ToyUNet { config, layout, time, encoder, decoder })
    }

    pub fn zeros_like(&self) -> Self {
        ToyUNet {
            config: self.config,
            layout: self.layout,
            time: self.time.zeros_like(),
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    pub fn time_embedding(&self, t: usize, region: usize) -> (Vec<F>, TimeCache<F>) {
        self.time.forward(t, region)
    }

    /// `input` holds the noisy image followed by the condition channels.
    pub fn forward(&self, input: &Tensor<F>, t: usize, region: usize) -> (Tensor<F>, UNetCache<F>) {
        let (emb, time) = self.time.forward(t, region);
        let (features, enc) = self.encoder.forward(input, &emb, None);
        let (out, dec) = self.decoder.forward(&features, &emb);
        (out, UNetCache { emb, time, features, enc, dec })
    }

    /// Accumulates parameter gradients of `<d_out, forward(input)>` into `grad`.
    pub fn backward(&self, cache: &UNetCache<F>, d_out: &Tensor<F>, grad: &mut ToyUNet<F>) {
        let mut d_emb = vec![F::zero(); self.config.temb_dim];
        let (d_skip, d_bottom) = self.decoder.backward(&cache.dec, d_out, &mut grad.decoder, &mut d_emb, &cache.emb);
        self.encoder
            .backward(&cache.enc, &cache.features, &d_skip, &d_bottom, &mut grad.encoder, &mut d_emb, &cache.emb);
        self.time.backward(&cache.time, &d_emb, &mut grad.time);
    }

    /// Named parameter arrays in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Vec<F>)> {
        let mut v = prefixed("time", self.time.tensors());
        v.extend(prefixed("enc", self.encoder.tensors()));
        v.extend(prefixed("dec", self.decoder.tensors()));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        let mut v = self.time.tensors_mut();
        v.extend(self.encoder.tensors_mut());
        v.extend(self.decoder.tensors_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Converts the parameters to another scalar type.
    pub fn cast<G: Real>(&self) -> ToyUNet<G> {
        let mut out = ToyUNet::<G>::new(self.config, self.layout, &mut ChaCha8Rng::seed_from_u64(0))
            .expect("config already validated");
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.iter().map(|v| G::of(v.f64())).collect();
        }
        out
    }
}

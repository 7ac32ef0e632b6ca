//! Acceptance suite. Each test checks one criterion against an oracle and
//! prints a single `criterion N PASS|FAIL: ...` line before asserting.
//!
//! Run with `cargo test -p voldiff-cli --test acceptance -- --nocapture` to
//! see the report lines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voldiff::denoiser::{
    adapter_train_step, train::gradient_check, Adam, AnalyticGaussianDenoiser, BoxShrinkDenoiser, ControlAdapter, Tensor,
    ToyUNet, TrainItem, UNetConfig,
};
use voldiff::inpaint::inpaint_volume;
use voldiff::inverse::{proximal_sr, restore, DegradationOps, RestoreParams};
use voldiff::metrics::{auroc, dice, ms_ssim3d, pro, psnr, ssim3d, MS_SSIM_WEIGHTS, SSIM_WINDOW};
use voldiff::phantom::{background_level, simulate_low_dose, CaseSpec, GaussianCase, GaussianRecipe};
use voldiff::sampler::generate;
use voldiff::schedule::{skip_subsequence, t_start_for_sigma};
use voldiff::tiler::{
    fused_noise_estimate, naive_stitch_generate, plan_windows, seam_ratio, tiled_generate, tiled_restore, WindowPlan,
};
use voldiff::{
    cosine_schedule, AnatomyMask, ChannelLayout, ConditionBundle, ConditionSource, Conditioned, Denoiser, RegionClass,
    Shape3, Volume,
};

fn report(n: u32, ok: bool, detail: impl AsRef<str>) {
    println!("criterion {n} {}: {}", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    assert!(ok, "criterion {n} failed: {}", detail.as_ref());
}

fn bits(v: &Volume) -> Vec<u32> {
    v.data().iter().map(|x| x.to_bits()).collect()
}

fn random_volume(rng: &mut ChaCha8Rng, shape: Shape3) -> Volume {
    Volume::from_fn(shape, |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap()
}

fn bare_layout() -> ChannelLayout {
    ChannelLayout { anatomy_classes: 1, raw_coords: false, pos_freqs: 0 }
}

fn bare_source(shape: Shape3, layout: ChannelLayout) -> ConditionSource {
    ConditionSource::new(RegionClass::Chest, AnatomyMask::background(shape, layout.anatomy_classes).unwrap(), layout)
}

fn small_unet() -> UNetConfig {
    UNetConfig { base_channels: 4, mid_channels: 4, temb_dim: 8, groups: 2 }
}

#[test]
fn criterion_01_sampler_matches_gaussian_oracle() {
    let start = Instant::now();
    let s = cosine_schedule(200).unwrap();
    let d = AnalyticGaussianDenoiser::new(0.3, 0.04, s.clone()).unwrap();
    let cond = ConditionBundle::whole(RegionClass::HaN, AnatomyMask::background([4; 3], 1).unwrap(), &bare_layout()).unwrap();
    let est = Conditioned::new(&d, &cond);
    let template = Volume::zeros([4; 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..10_000 {
        let v = generate(&est, &s, &template, None, &mut rng).unwrap();
        for &x in v.data() {
            sum += x as f64;
            sq += (x as f64).powi(2);
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let var = (sq - n as f64 * mean * mean) / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let secs = start.elapsed().as_secs_f64();
    let ok = (mean - 0.3).abs() <= 3.0 * se && (var / 0.04 - 1.0).abs() <= 0.1 && secs < 120.0;
    report(1, ok, format!("mean {mean:.5} (3 SE = {:.5}), variance {var:.5} vs 0.04, {secs:.1} s", 3.0 * se));
}

#[test]
fn criterion_02_restoration_meets_posterior_bound() {
    let start = Instant::now();
    let s = cosine_schedule(1000).unwrap();
    let (mu0, var0, sigma_n) = (0.3, 0.04, 0.15);
    let d = AnalyticGaussianDenoiser::new(mu0, var0, s.clone()).unwrap();
    let case = CaseSpec::Gaussian(GaussianCase { recipe: GaussianRecipe::default(), seed: 2 });
    let p = case.generate().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = simulate_low_dose(&p.image, sigma_n, &mut rng).unwrap();
    let cond = ConditionBundle::whole(case.region(), p.anatomy.clone(), &ChannelLayout::default()).unwrap();
    let ops = DegradationOps::denoise(sigma_n, 10.0).unwrap();
    let out = restore(&Conditioned::new(&d, &cond), &s, &y, &ops, RestoreParams { nfe: 3, zeta: 0.0 }, &mut rng).unwrap();
    let mse = voldiff::metrics::mse(&out, &p.image).unwrap();
    let bound = var0 * sigma_n * sigma_n / (var0 + sigma_n * sigma_n);
    let secs = start.elapsed().as_secs_f64();
    report(2, mse <= 1.1 * bound && secs < 60.0, format!("MSE {mse:.6} vs 1.1 x {bound:.6}, {secs:.1} s"));
}

#[test]
fn criterion_03_super_resolution_operators() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_adjoint = 0.0f64;
    let mut exact = true;
    let mut worst_prox = 0.0f64;
    for sf in 1..=5 {
        let ops = DegradationOps::super_res(sf, 0.1, 1.0).unwrap();
        for _ in 0..5 {
            let lr_shape = [rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6)];
            let hr_shape = [lr_shape[0] * sf, lr_shape[1], lr_shape[2]];
            let y = random_volume(&mut rng, lr_shape);
            let x = random_volume(&mut rng, hr_shape);
            exact &= bits(&ops.h(&ops.h_up(&y).unwrap()).unwrap()) == bits(&y);

            let dot = |a: &Volume, b: &Volume| a.data().iter().zip(b.data()).map(|(&u, &v)| u as f64 * v as f64).sum::<f64>();
            let abs_dot = |a: &Volume, b: &Volume| a.data().iter().zip(b.data()).map(|(&u, &v)| (u as f64 * v as f64).abs()).sum::<f64>();
            let lhs = dot(&ops.h(&x).unwrap(), &y);
            let up = ops.h_up(&y).unwrap();
            let rhs = dot(&x, &up) / sf as f64;
            // Relative to the magnitude of the summed terms; the plain sums can cancel.
            worst_adjoint = worst_adjoint.max((lhs - rhs).abs() / (abs_dot(&x, &up) / sf as f64).max(1e-12));

            // A consistent estimate is left alone.
            let hx = ops.h(&x).unwrap();
            exact &= bits(&proximal_sr(&hx, &x, 0.7, &ops).unwrap()) == bits(&x);

            // Constant volume with a shifted observation and no prior weight.
            let (c, delta) = (rng.random_range(-1.0f32..1.0), rng.random_range(-0.5f32..0.5));
            let flat = Volume::filled(hr_shape, c).unwrap();
            let obs = Volume::filled(lr_shape, c + delta).unwrap();
            let out = proximal_sr(&obs, &flat, 0.0, &ops).unwrap();
            for &v in out.data() {
                worst_prox = worst_prox.max((v as f64 - (c + delta) as f64).abs());
            }
        }
    }
    // Without downsampling the step is x0 + (y - x0) / (1 + rho).
    let ops = DegradationOps::super_res(1, 0.1, 1.0).unwrap();
    for _ in 0..20 {
        let shape = [3, 4, 5];
        let (y, x0) = (random_volume(&mut rng, shape), random_volume(&mut rng, shape));
        let r = rng.random_range(0.0..5.0);
        let out = proximal_sr(&y, &x0, r, &ops).unwrap();
        for ((&o, &a), &b) in out.data().iter().zip(y.data()).zip(x0.data()) {
            let want = b as f64 + (a as f64 - b as f64) / (1.0 + r);
            worst_prox = worst_prox.max((o as f64 - want).abs());
        }
    }
    let ok = exact && worst_adjoint <= 1e-6 && worst_prox <= 1e-6;
    report(
        3,
        ok,
        format!("exact identities {exact}, adjoint rel err {worst_adjoint:.2e}, proximal max err {worst_prox:.2e}"),
    );
}

#[test]
fn criterion_04_tiling_equivalence_and_seams() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    // Whole-volume windows reduce to the direct path.
    let layout = ChannelLayout { anatomy_classes: 3, raw_coords: true, pos_freqs: 2 };
    let shape = [6, 5, 7];
    let net = ToyUNet::<f32>::new(small_unet(), layout, &mut rng).unwrap();
    let anatomy = AnatomyMask::new(shape, 3, (0..210).map(|i| (i % 3) as u8).collect()).unwrap();
    let source = ConditionSource::new(RegionClass::Abdomen, anatomy, layout);
    let cond = source.whole().unwrap();
    let s = cosine_schedule(30).unwrap();
    let whole = WindowPlan::whole(shape).unwrap();
    let template = Volume::zeros(shape).unwrap().with_region(RegionClass::Abdomen);
    let steps = [30, 20, 10, 5, 1];
    let a = tiled_generate(&net, &source, &template, &s, &whole, Some(&steps), &mut ChaCha8Rng::seed_from_u64(40)).unwrap();
    let b = generate(&Conditioned::new(&net, &cond), &s, &template, Some(&steps), &mut ChaCha8Rng::seed_from_u64(40)).unwrap();
    let mut bitwise = bits(&a) == bits(&b);
    let y = random_volume(&mut rng, shape).map(|v| 0.3 * v);
    let ops = DegradationOps::denoise(0.1, 10.0).unwrap();
    let params = RestoreParams { nfe: 3, zeta: 0.3 };
    let a = tiled_restore(&net, &source, &y, &ops, &s, params, &whole, &mut ChaCha8Rng::seed_from_u64(41)).unwrap();
    let b = restore(&Conditioned::new(&net, &cond), &s, &y, &ops, params, &mut ChaCha8Rng::seed_from_u64(41)).unwrap();
    bitwise &= bits(&a) == bits(&b);

    // Fused estimates against a brute-force per-voxel overlap mean.
    let shape = [16; 3];
    let pos_layout = ChannelLayout { anatomy_classes: 1, raw_coords: true, pos_freqs: 2 };
    let net = ToyUNet::<f32>::new(small_unet(), pos_layout, &mut rng).unwrap();
    let source = bare_source(shape, pos_layout);
    let box_d = BoxShrinkDenoiser::new(0.3, 0.04, 1, s.clone()).unwrap();
    let mut worst_fused = 0.0f64;
    for trial in 0..6 {
        let stride: Shape3 = std::array::from_fn(|_| rng.random_range(1..=8));
        let plan = plan_windows(shape, [8; 3], stride).unwrap();
        let conds = plan.conditions(&source).unwrap();
        let x = random_volume(&mut rng, shape);
        let t = rng.random_range(1..=30);
        let d: &dyn Denoiser = if trial % 2 == 0 { &box_d } else { &net };
        let fused = fused_noise_estimate(d, &x, t, &plan, &conds).unwrap();
        let mut sum = vec![0.0f64; x.len()];
        let mut count = vec![0usize; x.len()];
        for o in &plan.origins {
            let patch = voldiff::voxgrid::crop(&x, *o, [8; 3]).unwrap();
            let pred = d.predict_noise(&patch, t, &source.window(*o, [8; 3]).unwrap()).unwrap();
            for z in 0..8 {
                for yy in 0..8 {
                    for xx in 0..8 {
                        let i = x.index(o[0] + z, o[1] + yy, o[2] + xx);
                        sum[i] += pred.get(z, yy, xx) as f64;
                        count[i] += 1;
                    }
                }
            }
        }
        // Relative above unit magnitude: estimates grow like 1 / sqrt(1 - ab) at small t.
        for ((&f, &s_), &c) in fused.data().iter().zip(&sum).zip(&count) {
            let want = s_ / c as f64;
            worst_fused = worst_fused.max((f as f64 - want).abs() / want.abs().max(1.0));
        }
    }

    // Seams: fused sampling against independently sampled, pasted windows.
    let s = cosine_schedule(100).unwrap();
    let box_d = BoxShrinkDenoiser::new(0.3, 0.04, 1, s.clone()).unwrap();
    let plan = plan_windows(shape, [8; 3], [4; 3]).unwrap();
    let boundaries = plan.boundaries();
    let template = Volume::zeros(shape).unwrap();
    let source = bare_source(shape, bare_layout());
    let (mut smooth, mut naive) = (0.0, 0.0);
    let seeds = 4;
    for seed in 0..seeds {
        let v = tiled_generate(&box_d, &source, &template, &s, &plan, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        smooth += seam_ratio(&v, &boundaries).unwrap() / seeds as f64;
        let v = naive_stitch_generate(&box_d, &source, &template, &s, &plan, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        naive += seam_ratio(&v, &boundaries).unwrap() / seeds as f64;
    }
    let ok = bitwise && worst_fused <= 1e-6 && smooth <= 1.05 && smooth < naive;
    report(
        4,
        ok,
        format!(
            "whole-window bitwise {bitwise}, fused max err {worst_fused:.2e}, seam ratio {smooth:.4} vs naive {naive:.4}"
        ),
    );
}

#[test]
fn criterion_05_inpainting_keeps_known_voxels() {
    let s = cosine_schedule(30).unwrap();
    let d = AnalyticGaussianDenoiser::new(0.3, 0.04, s.clone()).unwrap();
    let shape = [5, 6, 4];
    let cond = ConditionBundle::whole(RegionClass::HaN, AnatomyMask::background(shape, 1).unwrap(), &bare_layout()).unwrap();
    let est = Conditioned::new(&d, &cond);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut preserved = 0;
    for _ in 0..100 {
        let x = random_volume(&mut rng, shape);
        let p = rng.random_range(0.0..1.0);
        let mask = Volume::from_fn(shape, |_, _, _| (rng.random::<f64>() < p) as u8 as f32).unwrap();
        let out = inpaint_volume(&est, &s, &x, &mask, &mut rng).unwrap();
        let kept = out.data().iter().zip(x.data()).zip(mask.data()).all(|((o, v), &m)| m == 1.0 || o.to_bits() == v.to_bits());
        preserved += kept as usize;
    }
    report(5, preserved == 100, format!("{preserved}/100 random masks keep every known voxel bitwise"));
}

#[test]
fn criterion_06_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layout = bare_layout();
    let net = ToyUNet::<f64>::new(small_unet(), layout, &mut rng).unwrap();
    let c = layout.input_channels();
    let data: Vec<f64> = (0..c * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let input = Tensor::from_data(c, [4; 3], data);
    let groups = net.tensors().len();
    let mut worst = 0.0f64;
    for (t, region) in [(3, 0), (17, 1), (40, 2)] {
        worst = worst.max(gradient_check(&net, &input, t, region, 6, 1e-5, &mut rng));
    }
    report(6, worst < 1e-3, format!("worst relative error {worst:.2e} over {groups} parameter tensors"));
}

#[test]
fn criterion_07_adapter_identity_and_frozen_base() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layout = ChannelLayout { anatomy_classes: 2, raw_coords: true, pos_freqs: 1 };
    let base = ToyUNet::<f32>::new(small_unet(), layout, &mut rng).unwrap();
    let mut adapter = ControlAdapter::new(base.clone(), &mut rng);
    let shape = [4, 6, 4];
    let anatomy = AnatomyMask::new(shape, 2, (0..96).map(|i| (i % 2) as u8).collect()).unwrap();
    let cond = ConditionBundle::whole(RegionClass::Chest, anatomy, &layout).unwrap();
    let target = Volume::from_fn(shape, |z, y, _| ((z + y) % 2) as f32).unwrap();
    let x = random_volume(&mut rng, shape);
    let identity = bits(&adapter.predict_noise(&x, 11, &cond.clone().with_target(target.clone())).unwrap())
        == bits(&base.predict_noise(&x, 11, &cond).unwrap());

    let s = cosine_schedule(50).unwrap();
    let mut opt = Adam::new(1e-3);
    let batch = vec![TrainItem { x0: random_volume(&mut rng, shape), cond: cond.clone().with_target(target) }];
    for _ in 0..100 {
        adapter_train_step(&mut adapter, &mut opt, &batch, &s, &mut rng).unwrap();
    }
    let frozen = adapter
        .base
        .tensors()
        .iter()
        .zip(base.tensors())
        .all(|((_, a), (_, b))| a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits())));
    let moved = adapter.branch.link_skip.weight.iter().any(|&w| w != 0.0);
    report(
        7,
        identity && frozen && moved,
        format!("fresh adapter bitwise identity {identity}, base unchanged after 100 steps {frozen}, branch trained {moved}"),
    );
}

#[test]
fn criterion_08_schedule_identities() {
    let mut worst = 0.0f64;
    let mut round_trips = true;
    for steps in [1, 7, 50, 200, 1000] {
        let s = cosine_schedule(steps).unwrap();
        for t in 0..=steps {
            worst = worst.max((s.alpha_bar(t) * (1.0 + s.sigma_bar(t).powi(2)) - 1.0).abs());
        }
        for t in 1..=steps {
            round_trips &= t_start_for_sigma(&s, s.sigma_bar(t)).unwrap() == t;
        }
    }
    let s = cosine_schedule(1000).unwrap();
    let mut spacing_ok = true;
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig { cases: 512, ..ProptestConfig::default() });
    let result = runner.run(&(1usize..=1000, 0.0f64..1.0), |(t_start, frac)| {
        let nfe = 1 + ((t_start - 1) as f64 * frac) as usize;
        let seq = skip_subsequence(&s, nfe, t_start).unwrap();
        prop_assert_eq!(seq.len(), nfe);
        prop_assert_eq!(seq[0], t_start);
        if nfe > 1 {
            prop_assert_eq!(*seq.last().unwrap(), 1);
            let gaps: Vec<usize> = seq.windows(2).map(|w| w[0] - w[1]).collect();
            prop_assert!(gaps.iter().all(|&g| g >= 1));
            prop_assert!(gaps.iter().max().unwrap() - gaps.iter().min().unwrap() <= 1);
        }
        Ok(())
    });
    if let Err(e) = &result {
        println!("{e}");
        spacing_ok = false;
    }
    report(
        8,
        worst <= 1e-12 && round_trips && spacing_ok,
        format!("identity max err {worst:.2e}, table round trips {round_trips}, skip spacing {spacing_ok}"),
    );
}

// Independent metric implementations: direct window summation, pair
// counting and explicit per-threshold region overlap.

fn taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / 4.5).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM and mean contrast-structure term over every valid window.
fn brute_ssim_cs(a: &Volume, b: &Volume, range: f64) -> (f64, f64) {
    let g = taps();
    let k = SSIM_WINDOW;
    let [d, h, w] = a.shape();
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let (mut s_sum, mut cs_sum, mut n) = (0.0, 0.0, 0.0);
    for z in 0..=d - k {
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        for l in 0..k {
                            let wt = g[i] * g[j] * g[l];
                            let (u, v) = (a.get(z + i, y + j, x + l) as f64, b.get(z + i, y + j, x + l) as f64);
                            ma += wt * u;
                            mb += wt * v;
                            saa += wt * u * u;
                            sbb += wt * v * v;
                            sab += wt * u * v;
                        }
                    }
                }
                let cs = (2.0 * (sab - ma * mb) + c2) / ((saa - ma * ma) + (sbb - mb * mb) + c2);
                s_sum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * cs;
                cs_sum += cs;
                n += 1.0;
            }
        }
    }
    (s_sum / n, cs_sum / n)
}

fn brute_halve(v: &Volume) -> Volume {
    let [d, h, w] = v.shape();
    Volume::from_fn([d / 2, h / 2, w / 2], |z, y, x| {
        let mut s = 0.0f64;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    s += v.get(2 * z + dz, 2 * y + dy, 2 * x + dx) as f64;
                }
            }
        }
        (s / 8.0) as f32
    })
    .unwrap()
}

fn brute_ms_ssim(a: &Volume, b: &Volume, range: f64) -> f64 {
    let mut scales = vec![(a.clone(), b.clone())];
    while scales.len() < MS_SSIM_WEIGHTS.len() {
        let (x, y) = scales.last().unwrap();
        let next = (brute_halve(x), brute_halve(y));
        if next.0.shape().iter().any(|&e| e < SSIM_WINDOW) {
            break;
        }
        scales.push(next);
    }
    let m = scales.len();
    if m == 1 {
        return brute_ssim_cs(a, b, range).0;
    }
    let total: f64 = MS_SSIM_WEIGHTS[..m].iter().sum();
    scales
        .iter()
        .enumerate()
        .map(|(j, (x, y))| {
            let (s, cs) = brute_ssim_cs(x, y, range);
            let term = if j + 1 == m { s } else { cs };
            term.max(0.0).powf(MS_SSIM_WEIGHTS[j] / total)
        })
        .product()
}

fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

/// Face-connected regions by depth-first search.
fn brute_regions(mask: &Volume) -> Vec<Vec<usize>> {
    let [d, h, w] = mask.shape();
    let mut seen = vec![false; mask.len()];
    let mut regions = Vec::new();
    for start in 0..mask.len() {
        if mask.data()[start] != 1.0 || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (z, y, x) = ((i / (h * w)) as isize, ((i / w) % h) as isize, (i % w) as isize);
            for (dz, dy, dx) in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
                let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = mask.index(nz as usize, ny as usize, nx as usize);
                if mask.data()[j] == 1.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        regions.push(members);
    }
    regions
}

fn brute_pro(maps: &[Volume], gts: &[Volume], limit: f64) -> f64 {
    let regions: Vec<Vec<Vec<usize>>> = gts.iter().map(brute_regions).collect();
    let mut thresholds: Vec<f32> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut curve = vec![(0.0f64, 0.0f64)];
    for &thr in &thresholds {
        let (mut fp, mut neg, mut overlap, mut n_regions) = (0.0, 0.0, 0.0, 0.0);
        for ((m, g), regs) in maps.iter().zip(gts).zip(&regions) {
            for (&s, &l) in m.data().iter().zip(g.data()) {
                if l == 0.0 {
                    neg += 1.0;
                    fp += (s >= thr) as u8 as f64;
                }
            }
            for r in regs {
                overlap += r.iter().filter(|&&i| m.data()[i] >= thr).count() as f64 / r.len() as f64;
                n_regions += 1.0;
            }
        }
        curve.push((fp / neg, overlap / n_regions));
    }
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((f0, p0), (f1, p1)) = (w[0], w[1]);
        if f0 >= limit {
            break;
        }
        let (f_end, p_end) = if f1 > limit { (limit, p0 + (p1 - p0) * (limit - f0) / (f1 - f0)) } else { (f1, p1) };
        area += (f_end - f0) * (p0 + p_end) / 2.0;
    }
    area / limit
}

fn blob_mask(rng: &mut ChaCha8Rng, shape: Shape3) -> Volume {
    let mut m = Volume::zeros(shape).unwrap();
    for _ in 0..rng.random_range(1..4) {
        let c: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..shape[a]));
        for z in c[0].saturating_sub(1)..(c[0] + 2).min(shape[0]) {
            for y in c[1].saturating_sub(1)..(c[1] + 2).min(shape[1]) {
                let i = m.index(z, y, c[2]);
                m.data_mut()[i] = 1.0;
            }
        }
    }
    m
}

#[test]
fn criterion_09_metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut ssim_err, mut ms_err) = (0.0f64, 0.0f64);
    for _ in 0..6 {
        let shape: Shape3 = std::array::from_fn(|_| rng.random_range(7..=16));
        let a = random_volume(&mut rng, shape);
        let b = a.zip_map(&random_volume(&mut rng, shape), |u, v| u + 0.4 * v).unwrap();
        ssim_err = ssim_err.max((ssim3d(&a, &b, 2.0).unwrap() - brute_ssim_cs(&a, &b, 2.0).0).abs());
        ms_err = ms_err.max((ms_ssim3d(&a, &b, 2.0).unwrap() - brute_ms_ssim(&a, &b, 2.0)).abs());
    }
    let a = random_volume(&mut rng, [16; 3]);
    let b = a.zip_map(&random_volume(&mut rng, [16; 3]), |u, v| u + 0.4 * v).unwrap();
    ms_err = ms_err.max((ms_ssim3d(&a, &b, 2.0).unwrap() - brute_ms_ssim(&a, &b, 2.0)).abs());

    let mut auroc_exact = true;
    for _ in 0..200 {
        let n = rng.random_range(2..40);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 * 0.25).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        auroc_exact &= auroc(&scores, &labels).unwrap() == brute_auroc(&scores, &labels);
    }

    let mut pro_err = 0.0f64;
    for _ in 0..4 {
        let shape: Shape3 = std::array::from_fn(|_| rng.random_range(4..=10));
        let gts: Vec<Volume> = (0..2).map(|_| blob_mask(&mut rng, shape)).collect();
        let maps: Vec<Volume> = gts
            .iter()
            .map(|g| g.map(|v| 0.5 * v).zip_map(&random_volume(&mut rng, shape), |a, n| a + (n * 8.0).round() / 16.0).unwrap())
            .collect();
        pro_err = pro_err.max((pro(&maps, &gts, 0.3).unwrap() - brute_pro(&maps, &gts, 0.3)).abs());
    }

    // Closed-form cases.
    let x = random_volume(&mut rng, [8; 3]);
    // Zero mean inside every window, so only the structure term flips sign.
    let centered = Volume::from_fn([8; 3], |z, yy, xx| if (z + yy + xx) % 2 == 0 { 0.5 } else { -0.5 }).unwrap();
    let neg = centered.map(|v| -v);
    let k = 4.0f32;
    let y = random_volume(&mut rng, [8; 3]);
    let mut gt = Volume::zeros([8; 3]).unwrap();
    for i in [0, 1, 100, 300] {
        gt.data_mut()[i] = 1.0;
    }
    let other = gt.map(|v| 1.0 - v);
    let closed = [
        ("psnr identical", psnr(&x, &x, 2.0).unwrap() == f64::INFINITY),
        (
            "psnr scale invariance",
            (psnr(&x, &y, 2.0).unwrap() - psnr(&x.map(|v| v * k), &y.map(|v| v * k), 2.0 * k as f64).unwrap()).abs() < 1e-9,
        ),
        ("ssim identical", (ssim3d(&x, &x, 2.0).unwrap() - 1.0).abs() < 1e-9),
        ("ssim negated", ssim3d(&centered, &neg, 2.0).unwrap() < 0.0),
        ("ms-ssim identical", (ms_ssim3d(&x, &x, 2.0).unwrap() - 1.0).abs() < 1e-9),
        ("ms-ssim single scale", ms_ssim3d(&x, &y, 2.0).unwrap() == ssim3d(&x, &y, 2.0).unwrap()),
        ("dice identical", dice(&gt, &gt).unwrap() == 1.0),
        ("dice disjoint", dice(&gt, &other).unwrap() == 0.0),
        ("auroc separated", auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap() == 1.0),
        ("auroc tied", auroc(&[0.5; 4], &[true, false, true, false]).unwrap() == 0.5),
        ("pro perfect", (pro(&[gt.clone()], &[gt.clone()], 0.3).unwrap() - 1.0).abs() < 1e-12),
    ];
    let failed: Vec<&str> = closed.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let closed_ok = failed.is_empty();
    let ok = ssim_err <= 1e-6 && ms_err <= 1e-6 && auroc_exact && pro_err <= 1e-6 && closed_ok;
    report(
        9,
        ok,
        format!(
            "SSIM err {ssim_err:.2e}, MS-SSIM err {ms_err:.2e}, AUROC exact {auroc_exact}, PRO err {pro_err:.2e}, {}/{} closed-form cases (failed: {failed:?})",
            closed.len() - failed.len(),
            closed.len()
        ),
    );
}

// End-to-end checks drive the command-line binary.

fn voldiff(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_voldiff")).current_dir(dir).args(args).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "voldiff {args:?} failed: {}\n{stdout}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn write_config(dir: &Path, name: &str, value: serde_json::Value) -> String {
    std::fs::write(dir.join(name), serde_json::to_vec_pretty(&value).unwrap()).unwrap();
    name.to_string()
}

fn read_json(path: PathBuf) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap()
}

#[test]
fn criterion_10_end_to_end() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, "phantom.json", serde_json::json!({ "data": { "count": 200 } }));
    voldiff(dir, &["phantom", "--config", &cfg, "--seed", "10", "--out", "data"]);
    let trained = voldiff(dir, &["train", "--seed", "11", "--dataset", "data", "--out", "train"]);
    print!("{trained}");
    let checkpoint = "train/model.vdck";

    // (a) Denoising on the held-out validation and test cases.
    let mut gains = Vec::new();
    for split in ["val", "test"] {
        let cfg = write_config(dir, &format!("denoise_{split}.json"), serde_json::json!({ "data": { "split": split } }));
        let out = format!("denoise_{split}");
        voldiff(dir, &["denoise", "--config", &cfg, "--seed", "12", "--dataset", "data", "--checkpoint", checkpoint, "--out", &out]);
        for r in read_json(dir.join(&out).join("metrics.json")).as_array().unwrap() {
            let metric = r["metric"].as_str().unwrap();
            let v = r["value"].as_f64().unwrap();
            match metric {
                "psnr_noisy" => gains.push(-v),
                "psnr_restored" => *gains.last_mut().unwrap() += v,
                _ => {}
            }
        }
    }
    let gain = gains.iter().sum::<f64>() / gains.len() as f64;
    let ok_a = gains.len() == 20 && gain >= 2.0;
    println!(
        "criterion 10a {}: mean PSNR gain {gain:.3} dB over {} held-out cases",
        if ok_a { "PASS" } else { "FAIL" },
        gains.len()
    );

    // (b) Anomaly detection on a fresh, balanced set.
    let cfg = write_config(
        dir,
        "lesions.json",
        serde_json::json!({ "data": { "count": 40, "recipe": { "kind": "anatomy", "lesion_fraction": 0.5 } } }),
    );
    voldiff(dir, &["phantom", "--config", &cfg, "--seed", "13", "--out", "lesions"]);
    let cfg = write_config(dir, "anomaly.json", serde_json::json!({ "data": { "split": null } }));
    voldiff(dir, &["anomaly", "--config", &cfg, "--seed", "14", "--dataset", "lesions", "--checkpoint", checkpoint, "--out", "anomaly"]);
    let summary = read_json(dir.join("anomaly/summary.json"));
    let manifest = read_json(dir.join("lesions/manifest.json"));
    let lesions = manifest["cases"].as_array().unwrap().iter().filter(|c| !c["spec"]["lesion"].is_null()).count();
    let a = summary["auroc"].as_f64().unwrap();
    let ok_b = lesions == 20 && summary["cases"] == 40 && a >= 0.85;
    println!(
        "criterion 10b {}: image AUROC {a:.4} over {lesions} lesion and {} lesion-free cases at t = {}",
        if ok_b { "PASS" } else { "FAIL" },
        40 - lesions,
        summary["t_fixed"]
    );

    // (c) Region conditioning on the same anatomies.
    let mut means = BTreeMap::new();
    for region in ["HaN", "Chest"] {
        let cfg = write_config(dir, &format!("sample_{region}.json"), serde_json::json!({ "sample": { "count": 4, "region": region } }));
        let out = format!("sample_{region}");
        voldiff(dir, &["sample", "--config", &cfg, "--seed", "15", "--dataset", "data", "--checkpoint", checkpoint, "--out", &out]);
        let entries = read_json(dir.join(&out).join("samples.json"));
        let m: Vec<f64> = entries.as_array().unwrap().iter().map(|e| e["mean"].as_f64().unwrap()).collect();
        means.insert(region, m.iter().sum::<f64>() / m.len() as f64);
    }
    let gap = (means["HaN"] - means["Chest"]).abs();
    let programmed = (background_level(RegionClass::HaN) - background_level(RegionClass::Chest)).abs() as f64;
    let ok_c = gap >= programmed / 2.0;
    println!(
        "criterion 10c {}: HaN mean {:.4}, Chest mean {:.4}, gap {gap:.4} vs required {:.4}",
        if ok_c { "PASS" } else { "FAIL" },
        means["HaN"],
        means["Chest"],
        programmed / 2.0
    );

    let minutes = start.elapsed().as_secs_f64() / 60.0;
    report(
        10,
        ok_a && ok_b && ok_c && minutes < 60.0,
        format!("denoising {ok_a}, anomaly {ok_b}, region conditioning {ok_c}, {minutes:.1} min"),
    );
}

/// Every file below `root`, keyed by relative path. The run's own
/// `config.json` records the thread count and is compared without it.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap().to_path_buf();
            let mut bytes = std::fs::read(&path).unwrap();
            if rel == Path::new("config.json") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("threads");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            files.insert(rel, bytes);
        }
    }
    files
}

#[test]
fn criterion_11_cli_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(
        dir,
        "tiny.json",
        serde_json::json!({
            "schedule": { "steps": 20 },
            "model": {
                "unet": { "base_channels": 4, "mid_channels": 4, "temb_dim": 8, "groups": 2 },
                "patch": [8, 8, 8],
            },
            "tiling": { "window": [4, 4, 4], "stride": [2, 2, 2] },
            "data": {
                "count": 20,
                "recipe": { "kind": "anatomy", "shape": [8, 8, 8], "lesion_fraction": 0.5 },
                "split": null,
                "limit": 3,
            },
            "train": { "steps": 3, "log_every": 1 },
            "finetune": { "steps": 2 },
            "sample": { "count": 1, "nfe": 5 },
            "denoise": { "nfe": 3 },
            "sr": { "sf": 2, "nfe": 4 },
            "eval": { "results": "denoise" },
            "slice": { "input": "sample/sample_000.vvol" },
        }),
    );
    // Later commands read earlier outputs, so each command runs in order and
    // is immediately repeated under a different thread count.
    let commands: [&[&str]; 10] = [
        &["phantom", "--out", "data"],
        &["train", "--out", "train"],
        &["finetune", "--checkpoint", "train/model.vdck", "--out", "finetune"],
        &["sample", "--checkpoint", "train/model.vdck", "--out", "sample"],
        &["sample", "--no-tiling", "--checkpoint", "train/model.vdck", "--out", "sample_direct"],
        &["denoise", "--checkpoint", "train/model.vdck", "--out", "denoise"],
        &["sr", "--checkpoint", "train/model.vdck", "--out", "sr"],
        &["inpaint", "--checkpoint", "finetune/adapter.vdck", "--out", "inpaint"],
        &["anomaly", "--checkpoint", "train/model.vdck", "--out", "anomaly"],
        &["eval", "--out", "eval"],
    ];
    let mut commands: Vec<&[&str]> = commands.to_vec();
    commands.push(&["slice", "--out", "slice"]);
    let mut mismatches = Vec::new();
    for args in &commands {
        let out_dir = dir.join(args[args.iter().position(|&a| a == "--out").unwrap() + 1]);
        let mut runs = Vec::new();
        for threads in ["1", "3", "3"] {
            if out_dir.exists() {
                std::fs::remove_dir_all(&out_dir).unwrap();
            }
            let mut full = args.to_vec();
            full.extend(["--config", &cfg, "--seed", "21", "--dataset", "data", "--threads", threads]);
            voldiff(dir, &full);
            runs.push(snapshot(&out_dir));
        }
        if runs.iter().any(|r| r != &runs[0]) || runs[0].is_empty() {
            mismatches.push(args[0].to_string());
        }
    }
    report(
        11,
        mismatches.is_empty(),
        format!("{} command runs repeated under 1 and 3 threads; mismatches: {mismatches:?}", commands.len()),
    );
}

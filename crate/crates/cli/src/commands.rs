//! Command implementations. Each command reads the dataset and checkpoint
//! named in the config, writes its artifacts under the output directory and
//! prints a one-line summary.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use voldiff::anomaly::{binarize, default_t_fixed, detect};
use voldiff::denoiser::{
    adapter_train_step, load_checkpoint_expecting, save_checkpoint, train_step, Adam, AnalyticGaussianDenoiser,
    ControlAdapter, Model, ToyUNet, TrainItem,
};
use voldiff::inpaint::inpaint_volume;
use voldiff::inverse::{DegradationOps, RestoreParams};
use voldiff::metrics::{auroc, dice, ms_ssim3d, normalize_unit, pro, psnr, ssim3d, MetricRecord, SSIM_WINDOW};
use voldiff::phantom::{
    build_dataset, reflect_pad_depth, simulate_low_dose, simulate_thick_slice, split_counts, CaseEntry, CaseSpec,
    Manifest, Phantom, Split, MANIFEST_FILE,
};
use voldiff::denoiser::NoiseEstimator;
use voldiff::sampler::{generate, ClampedX0};
use voldiff::schedule::{cosine_schedule, skip_subsequence, NoiseSchedule, ScheduleParams};
use voldiff::tiler::{plan_windows, tiled_restore, Tiled, WindowPlan};
use voldiff::voxgrid::{crop, read_vvol, resize_trilinear, write_vvol, CropRecord};
use voldiff::{AnatomyMask, ChannelLayout, ConditionSource, Conditioned, Denoiser, Shape3, Volume};

use crate::config::{Axis, Config, DenoiserChoice, RoiChoice};
use crate::error::CliError;

pub const MODEL_FILE: &str = "model.vdck";
pub const ADAPTER_FILE: &str = "adapter.vdck";
pub const METRICS_FILE: &str = "metrics.json";
pub const SUMMARY_FILE: &str = "summary.json";

pub struct Ctx {
    pub cfg: Config,
    pub out: PathBuf,
}

impl Ctx {
    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed)
    }

    fn case_dir(&self, id: &str) -> Result<PathBuf, CliError> {
        let dir = self.out.join(id);
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        fs::write(self.out.join(name), serde_json::to_vec_pretty(value)?)?;
        Ok(())
    }
}

/// A network or closed-form denoiser together with the schedule it was built for.
struct Prior {
    denoiser: Box<dyn Denoiser>,
    schedule: NoiseSchedule,
    layout: ChannelLayout,
    /// Control adapters read the case's lesion mask as their target condition.
    wants_target: bool,
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf, CliError> {
    p.as_ref().ok_or_else(|| CliError::Validation(format!("{what} is not set")))
}

fn load_prior(cfg: &Config) -> Result<Prior, CliError> {
    match cfg.denoiser {
        DenoiserChoice::Checkpoint => {
            let path = required(&cfg.model.checkpoint, "model.checkpoint")?;
            if !path.exists() {
                return Err(CliError::Validation(format!("checkpoint {} does not exist", path.display())));
            }
            let (model, params) = load_checkpoint_expecting(path, &cfg.model.layout)?;
            let wants_target = matches!(model, Model::Control(_));
            Ok(Prior {
                layout: model.layout(),
                denoiser: Box::new(model),
                schedule: NoiseSchedule::from_params(params)?,
                wants_target,
            })
        }
        DenoiserChoice::AnalyticGaussian { mu0, var0 } => {
            let schedule = cosine_schedule(cfg.schedule.steps)?;
            Ok(Prior {
                denoiser: Box::new(AnalyticGaussianDenoiser::new(mu0, var0, schedule.clone())?),
                schedule,
                layout: cfg.model.layout,
                wants_target: false,
            })
        }
    }
}

fn load_manifest(dataset: &Path) -> Result<Manifest, CliError> {
    let path = dataset.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(CliError::Validation(format!("no dataset manifest at {}", path.display())));
    }
    Ok(Manifest::read(path)?)
}

fn classes_of(spec: &CaseSpec) -> usize {
    match spec {
        CaseSpec::Anatomy(s) => s.classes,
        CaseSpec::Gaussian(g) => g.recipe.classes,
    }
}

fn load_case(dataset: &Path, entry: &CaseEntry) -> Result<Phantom, CliError> {
    let dir = dataset.join(&entry.id);
    let image = read_vvol(dir.join("image.vvol"))?;
    let anatomy = AnatomyMask::from_volume(&read_vvol(dir.join("anatomy.vvol"))?, classes_of(&entry.spec))?;
    let lesion = read_vvol(dir.join("lesion.vvol"))?;
    Ok(Phantom { image, anatomy, lesion })
}

/// Cases selected by `data.split` and `data.limit`, in manifest order.
fn selected(cfg: &Config, m: &Manifest) -> Result<Vec<CaseEntry>, CliError> {
    let cases: Vec<CaseEntry> = m
        .cases
        .iter()
        .filter(|c| cfg.data.split.is_none_or(|s| c.split == s))
        .take(cfg.data.limit.unwrap_or(usize::MAX))
        .cloned()
        .collect();
    if cases.is_empty() {
        return Err(CliError::Validation(format!("no cases in split {:?}", cfg.data.split)));
    }
    Ok(cases)
}

fn window_plan(cfg: &Config, shape: Shape3, tiled: bool) -> Result<WindowPlan, CliError> {
    let window: Shape3 = std::array::from_fn(|a| cfg.tiling.window[a].min(shape[a]));
    if !tiled || window == shape {
        return Ok(WindowPlan::whole(shape)?);
    }
    Ok(plan_windows(shape, window, cfg.tiling.stride)?)
}

/// Wraps `est` so its clean-image prediction stays inside `clip`.
fn bounded<'a>(
    est: &'a dyn NoiseEstimator,
    s: &'a NoiseSchedule,
    clip: Option<[f32; 2]>,
) -> Result<Box<dyn NoiseEstimator + 'a>, CliError> {
    Ok(match clip {
        Some([lo, hi]) => Box::new(ClampedX0::new(est, s, lo, hi)?),
        None => Box::new(est),
    })
}

fn source_for(prior: &Prior, case: &CaseEntry, p: &Phantom) -> ConditionSource {
    let src = ConditionSource::new(case.spec.region(), p.anatomy.clone(), prior.layout);
    if prior.wants_target {
        src.with_target(p.lesion.clone())
    } else {
        src
    }
}

fn record(metric: &str, value: f64, case_id: &str, params: &serde_json::Value) -> MetricRecord {
    MetricRecord { metric: metric.into(), value, case_id: case_id.into(), params: params.clone() }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn big_enough_for_ssim(shape: Shape3) -> bool {
    shape.iter().all(|&n| n >= SSIM_WINDOW)
}

pub fn phantom(ctx: &Ctx) -> Result<(), CliError> {
    let d = &ctx.cfg.data;
    let m = build_dataset(&ctx.out, d.count, &d.recipe, ctx.cfg.seed)?;
    let (train, val, test) = split_counts(m.cases.len());
    println!("wrote {} cases to {} ({train} train, {val} val, {test} test)", m.cases.len(), ctx.out.display());
    Ok(())
}

fn training_cases(cfg: &Config, lesion_only: bool) -> Result<Vec<(CaseEntry, Phantom)>, CliError> {
    let m = load_manifest(&cfg.data.dataset)?;
    let mut train: Vec<&CaseEntry> = m.split(Split::Train).collect();
    if lesion_only && train.iter().any(|c| c.spec.has_lesion()) {
        train.retain(|c| c.spec.has_lesion());
    }
    if train.is_empty() {
        return Err(CliError::Validation("the dataset has no training cases".into()));
    }
    train.into_iter().map(|c| Ok((c.clone(), load_case(&cfg.data.dataset, c)?))).collect()
}

fn check_training(steps: usize, batch: usize, lr: f64) -> Result<(), CliError> {
    if batch == 0 || !(lr > 0.0) {
        return Err(CliError::Validation(format!("need batch >= 1 and lr > 0, got {batch}, {lr} ({steps} steps)")));
    }
    Ok(())
}

#[derive(Serialize)]
struct LogEntry {
    step: usize,
    loss: f64,
}

/// Draws a batch of multi-level views from random training cases.
fn draw_batch(
    cases: &[(CaseEntry, Phantom)],
    with_target: bool,
    layout: &ChannelLayout,
    patch: Shape3,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainItem>, CliError> {
    (0..batch)
        .map(|_| {
            let (c, p) = &cases[rng.random_range(0..cases.len())];
            let target = with_target.then_some(&p.lesion);
            Ok(TrainItem::multi_level(&p.image, &p.anatomy, target, c.spec.region(), layout, patch, rng)?)
        })
        .collect()
}

pub fn train(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let tc = &cfg.train;
    check_training(tc.steps, tc.batch, tc.lr)?;
    let cases = training_cases(cfg, false)?;
    let params = ScheduleParams::Cosine { steps: cfg.schedule.steps };
    let s = NoiseSchedule::from_params(params)?;
    let mut rng = ctx.rng();
    let mut net = ToyUNet::<f32>::new(cfg.model.unet, cfg.model.layout, &mut rng)?;
    let mut opt = Adam::new(tc.lr);
    let (mut log, mut window) = (Vec::new(), Vec::new());
    for step in 1..=tc.steps {
        let batch = draw_batch(&cases, false, &cfg.model.layout, cfg.model.patch, tc.batch, &mut rng)?;
        window.push(train_step(&mut net, &mut opt, &batch, &s, &mut rng)?);
        if step % tc.log_every.max(1) == 0 || step == tc.steps {
            log.push(LogEntry { step, loss: mean(&window) });
            window.clear();
        }
    }
    save_checkpoint(ctx.out.join(MODEL_FILE), &Model::UNet(net), params)?;
    ctx.write_json("train_log.json", &log)?;
    let last = log.last().map_or(f64::NAN, |l| l.loss);
    println!("trained {} steps on {} cases; final loss {last:.4}", tc.steps, cases.len());
    Ok(())
}

pub fn finetune(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let fc = &cfg.finetune;
    check_training(fc.steps, fc.batch, fc.lr)?;
    let path = required(&cfg.model.checkpoint, "model.checkpoint")?;
    let (model, params) = load_checkpoint_expecting(path, &cfg.model.layout)?;
    let Model::UNet(base) = model else {
        return Err(CliError::Validation("fine-tuning needs a plain network checkpoint".into()));
    };
    let s = NoiseSchedule::from_params(params)?;
    let cases = training_cases(cfg, true)?;
    let mut rng = ctx.rng();
    let mut adapter = ControlAdapter::new(base, &mut rng);
    let mut opt = Adam::new(fc.lr);
    let mut log = Vec::new();
    for step in 1..=fc.steps {
        let batch = draw_batch(&cases, true, &cfg.model.layout, cfg.model.patch, fc.batch, &mut rng)?;
        let loss = adapter_train_step(&mut adapter, &mut opt, &batch, &s, &mut rng)?;
        log.push(LogEntry { step, loss });
    }
    save_checkpoint(ctx.out.join(ADAPTER_FILE), &Model::Control(adapter), params)?;
    ctx.write_json("finetune_log.json", &log)?;
    println!("fine-tuned the control branch for {} steps on {} cases", fc.steps, cases.len());
    Ok(())
}

#[derive(Serialize)]
struct SampleEntry {
    file: String,
    case_id: String,
    region: voldiff::RegionClass,
    mean: f64,
}

pub fn sample(ctx: &Ctx, no_tiling: bool) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let prior = load_prior(cfg)?;
    let s = &prior.schedule;
    let sc = &cfg.sample;
    if sc.nfe == 0 {
        return Err(CliError::Validation("sample.nfe must be >= 1".into()));
    }
    let steps = (sc.nfe < s.steps()).then(|| skip_subsequence(s, sc.nfe, s.steps())).transpose()?;
    let m = load_manifest(&cfg.data.dataset)?;
    let cases = selected(cfg, &m)?;
    let mut rng = ctx.rng();
    let mut entries = Vec::new();
    for k in 0..sc.count {
        let case = &cases[k % cases.len()];
        let p = load_case(&cfg.data.dataset, case)?;
        let region = sc.region.unwrap_or(case.spec.region());
        let full = p.image.shape();
        let shape = sc.shape.unwrap_or(full);
        let whole = CropRecord::whole(full);
        let anatomy = if shape == full { p.anatomy.clone() } else { p.anatomy.view(&whole, shape)? };
        let mut source = ConditionSource::new(region, anatomy, prior.layout);
        if prior.wants_target {
            source = source.with_target(if shape == full { p.lesion.clone() } else { resize_trilinear(&p.lesion, shape)? });
        }
        let template = Volume::zeros(shape)?.with_region(region);
        let cond = source.whole()?;
        let plan = window_plan(cfg, shape, cfg.tiling.enabled)?;
        let est: Box<dyn NoiseEstimator> = if no_tiling {
            Box::new(Conditioned::new(&*prior.denoiser, &cond))
        } else {
            Box::new(Tiled::new(&*prior.denoiser, &plan, &source)?)
        };
        let v = generate(&*bounded(&*est, s, sc.clip_x0)?, s, &template, steps.as_deref(), &mut rng)?;
        let file = format!("sample_{k:03}.vvol");
        write_vvol(ctx.out.join(&file), &v)?;
        entries.push(SampleEntry { file, case_id: case.id.clone(), region, mean: v.mean() });
    }
    ctx.write_json("samples.json", &entries)?;
    println!("wrote {} samples", entries.len());
    Ok(())
}

pub fn denoise(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let dc = cfg.denoise;
    let prior = load_prior(cfg)?;
    let ops = DegradationOps::denoise(dc.sigma_n, dc.lambda)?;
    let params = RestoreParams { nfe: dc.nfe, zeta: dc.zeta };
    params.validate()?;
    let pjson = serde_json::to_value(dc)?;
    let m = load_manifest(&cfg.data.dataset)?;
    let mut rng = ctx.rng();
    let (mut records, mut gains) = (Vec::new(), Vec::new());
    for case in selected(cfg, &m)? {
        let p = load_case(&cfg.data.dataset, &case)?;
        let y = simulate_low_dose(&p.image, dc.sigma_n, &mut rng)?;
        let plan = window_plan(cfg, y.shape(), cfg.tiling.enabled)?;
        let x = tiled_restore(&*prior.denoiser, &source_for(&prior, &case, &p), &y, &ops, &prior.schedule, params, &plan, &mut rng)?;
        let dir = ctx.case_dir(&case.id)?;
        write_vvol(dir.join("noisy.vvol"), &y)?;
        write_vvol(dir.join("restored.vvol"), &x)?;
        let (before, after) = (psnr(&y, &p.image, 2.0)?, psnr(&x, &p.image, 2.0)?);
        gains.push(after - before);
        records.push(record("psnr_noisy", before, &case.id, &pjson));
        records.push(record("psnr_restored", after, &case.id, &pjson));
        if big_enough_for_ssim(y.shape()) {
            records.push(record("ssim_noisy", ssim3d(&y, &p.image, 2.0)?, &case.id, &pjson));
            records.push(record("ssim_restored", ssim3d(&x, &p.image, 2.0)?, &case.id, &pjson));
        }
    }
    ctx.write_json(METRICS_FILE, &records)?;
    let gain = mean(&gains);
    ctx.write_json(SUMMARY_FILE, &json!({ "cases": gains.len(), "mean_psnr_gain": gain }))?;
    println!("mean PSNR gain: {gain:.3} dB over {} cases", gains.len());
    Ok(())
}

pub fn sr(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let sc = cfg.sr;
    let prior = load_prior(cfg)?;
    let ops = DegradationOps::super_res(sc.sf, sc.sigma_n, sc.lambda)?;
    let params = RestoreParams { nfe: sc.nfe, zeta: sc.zeta };
    params.validate()?;
    let pjson = serde_json::to_value(sc)?;
    let m = load_manifest(&cfg.data.dataset)?;
    let mut rng = ctx.rng();
    let (mut records, mut gains) = (Vec::new(), Vec::new());
    for case in selected(cfg, &m)? {
        let p = load_case(&cfg.data.dataset, &case)?;
        let shape = p.image.shape();
        let (lr, padded) = simulate_thick_slice(&p.image, sc.sf)?;
        let mut source = source_for(&prior, &case, &p);
        if padded {
            let anatomy = reflect_pad_depth(&p.anatomy.to_volume(), sc.sf)?;
            source.anatomy = AnatomyMask::from_volume(&anatomy, p.anatomy.classes())?;
            source.target = source.target.map(|t| reflect_pad_depth(&t, sc.sf)).transpose()?;
        }
        let plan = window_plan(cfg, source.volume_shape(), cfg.tiling.enabled)?;
        let hr = tiled_restore(&*prior.denoiser, &source, &lr, &ops, &prior.schedule, params, &plan, &mut rng)?;
        let hr = crop(&hr, [0; 3], shape)?;
        let baseline = crop(&ops.h_up(&lr)?, [0; 3], shape)?;
        let dir = ctx.case_dir(&case.id)?;
        write_vvol(dir.join("lr.vvol"), &lr)?;
        write_vvol(dir.join("baseline.vvol"), &baseline)?;
        write_vvol(dir.join("restored.vvol"), &hr)?;
        let (base, out) = (psnr(&baseline, &p.image, 2.0)?, psnr(&hr, &p.image, 2.0)?);
        gains.push(out - base);
        records.push(record("psnr_replicate", base, &case.id, &pjson));
        records.push(record("psnr_restored", out, &case.id, &pjson));
        if padded {
            records.push(record("depth_padded", 1.0, &case.id, &pjson));
        }
    }
    ctx.write_json(METRICS_FILE, &records)?;
    let gain = mean(&gains);
    ctx.write_json(SUMMARY_FILE, &json!({ "cases": gains.len(), "mean_psnr_gain_over_replicate": gain }))?;
    println!("mean PSNR gain over slice replication: {gain:.3} dB over {} cases", gains.len());
    Ok(())
}

fn masked_mean(v: &Volume, mask: impl Fn(usize) -> bool) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, &x) in v.data().iter().enumerate() {
        if mask(i) {
            sum += x as f64;
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Regenerates each case's lesion region.
pub fn inpaint(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let prior = load_prior(cfg)?;
    let m = load_manifest(&cfg.data.dataset)?;
    let cases: Vec<CaseEntry> = selected(cfg, &m)?.into_iter().filter(|c| c.spec.has_lesion()).collect();
    if cases.is_empty() {
        return Err(CliError::Validation("no selected case has a lesion mask to inpaint".into()));
    }
    let mut rng = ctx.rng();
    let mut records = Vec::new();
    let params = json!({ "mask": "lesion" });
    for case in &cases {
        let p = load_case(&cfg.data.dataset, case)?;
        let plan = window_plan(cfg, p.image.shape(), cfg.tiling.enabled)?;
        let est = Tiled::new(&*prior.denoiser, &plan, &source_for(&prior, case, &p))?;
        let out = inpaint_volume(&est, &prior.schedule, &p.image, &p.lesion, &mut rng)?;
        let dir = ctx.case_dir(&case.id)?;
        write_vvol(dir.join("inpainted.vvol"), &out)?;
        let inside = |i: usize| p.lesion.data()[i] == 1.0;
        let host = match &case.spec {
            CaseSpec::Anatomy(s) => s.lesion.as_ref().map(|l| l.host),
            CaseSpec::Gaussian(_) => None,
        };
        let host_only = |i: usize| !inside(i) && Some(p.anatomy.labels()[i]) == host;
        records.push(record("lesion_mean_original", masked_mean(&p.image, inside), &case.id, &params));
        records.push(record("lesion_mean_inpainted", masked_mean(&out, inside), &case.id, &params));
        records.push(record("host_mean", masked_mean(&p.image, host_only), &case.id, &params));
    }
    ctx.write_json(METRICS_FILE, &records)?;
    println!("inpainted {} cases", cases.len());
    Ok(())
}

pub fn anomaly(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let ac = cfg.anomaly;
    let prior = load_prior(cfg)?;
    let s = &prior.schedule;
    let t_fixed = ac.t_fixed.unwrap_or_else(|| default_t_fixed(s.steps()));
    let pjson = json!({
        "t_fixed": t_fixed,
        "threshold": ac.threshold,
        "score": ac.score,
        "roi": ac.roi,
        "clip_x0": ac.clip_x0,
    });
    let m = load_manifest(&cfg.data.dataset)?;
    let mut rng = ctx.rng();
    let (mut records, mut scores, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    let (mut lesion_maps, mut lesion_gts, mut dices) = (Vec::new(), Vec::new(), Vec::new());
    for case in selected(cfg, &m)? {
        let p = load_case(&cfg.data.dataset, &case)?;
        let roi = match ac.roi {
            RoiChoice::All => Volume::filled(p.image.shape(), 1.0)?,
            RoiChoice::Foreground => p.anatomy.foreground(),
        };
        let plan = window_plan(cfg, p.image.shape(), cfg.tiling.enabled)?;
        let est = Tiled::new(&*prior.denoiser, &plan, &source_for(&prior, &case, &p))?;
        let r = detect(&*bounded(&est, s, ac.clip_x0)?, s, &p.image, &roi, t_fixed, ac.threshold, ac.score, &mut rng)?;
        let mask = binarize(&normalize_unit(&r.abs_map), &roi, ac.threshold)?;
        let dir = ctx.case_dir(&case.id)?;
        write_vvol(dir.join("anomaly_signed.vvol"), &r.map)?;
        write_vvol(dir.join("anomaly_map.vvol"), &r.abs_map)?;
        write_vvol(dir.join("anomaly_mask.vvol"), &mask)?;
        records.push(record("score", r.score, &case.id, &pjson));
        let has = case.spec.has_lesion();
        if has {
            let gt = p.lesion.zip_map(&roi, |a, b| a * b)?;
            let d = dice(&mask, &gt)?;
            records.push(record("dice", d, &case.id, &pjson));
            dices.push(d);
            lesion_maps.push(r.abs_map);
            lesion_gts.push(gt);
        }
        scores.push(r.score);
        labels.push(has);
    }
    let mut summary = json!({ "cases": scores.len(), "t_fixed": t_fixed });
    let mut line = format!("scored {} cases", scores.len());
    if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
        let a = auroc(&scores, &labels)?;
        summary["auroc"] = json!(a);
        line = format!("image AUROC: {a:.4} over {} cases", scores.len());
    }
    if !lesion_maps.is_empty() {
        summary["pro"] = json!(pro(&lesion_maps, &lesion_gts, 0.3)?);
        summary["mean_dice"] = json!(mean(&dices));
    }
    ctx.write_json(METRICS_FILE, &records)?;
    ctx.write_json(SUMMARY_FILE, &summary)?;
    println!("{line}");
    Ok(())
}

/// Scores stored outputs of an earlier command against the clean images.
pub fn eval(ctx: &Ctx, results: Option<&Path>) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let ec = &cfg.eval;
    let results = match results {
        Some(r) => r.to_path_buf(),
        None => required(&ec.results, "eval.results")?.clone(),
    };
    let m = load_manifest(&cfg.data.dataset)?;
    let params = json!({ "file": ec.file, "data_range": ec.data_range });
    let (mut records, mut psnrs) = (Vec::new(), Vec::new());
    for case in selected(cfg, &m)? {
        let path = results.join(&case.id).join(&ec.file);
        if !path.exists() {
            continue;
        }
        let x = read_vvol(&path)?;
        let clean = load_case(&cfg.data.dataset, &case)?.image;
        let v = psnr(&x, &clean, ec.data_range)?;
        psnrs.push(v);
        records.push(record("psnr", v, &case.id, &params));
        if big_enough_for_ssim(x.shape()) {
            records.push(record("ssim", ssim3d(&x, &clean, ec.data_range)?, &case.id, &params));
            records.push(record("ms_ssim", ms_ssim3d(&x, &clean, ec.data_range)?, &case.id, &params));
        }
    }
    if psnrs.is_empty() {
        return Err(CliError::Validation(format!("no {} files under {}", ec.file, results.display())));
    }
    ctx.write_json(METRICS_FILE, &records)?;
    let mean_psnr = mean(&psnrs);
    ctx.write_json(SUMMARY_FILE, &json!({ "cases": psnrs.len(), "mean_psnr": mean_psnr }))?;
    println!("mean PSNR: {mean_psnr:.3} dB over {} cases", psnrs.len());
    Ok(())
}

/// Binary greyscale PGM of one cross-section.
pub fn pgm_slice(v: &Volume, axis: Axis, index: usize, low: f32, high: f32) -> Result<Vec<u8>, CliError> {
    let [d, h, w] = v.shape();
    let (n, rows, cols) = match axis {
        Axis::Z => (d, h, w),
        Axis::Y => (h, d, w),
        Axis::X => (w, d, h),
    };
    if index >= n {
        return Err(CliError::Validation(format!("slice {index} out of range 0..{n}")));
    }
    if !(high > low) {
        return Err(CliError::Validation(format!("need high > low, got {low}..{high}")));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in 0..rows {
        for c in 0..cols {
            let x = match axis {
                Axis::Z => v.get(index, r, c),
                Axis::Y => v.get(r, index, c),
                Axis::X => v.get(r, c, index),
            };
            out.push((((x - low) / (high - low)).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn slice(ctx: &Ctx, input: Option<&Path>) -> Result<(), CliError> {
    let sc = &ctx.cfg.slice;
    let input = match input {
        Some(p) => p.to_path_buf(),
        None => required(&sc.input, "slice.input")?.clone(),
    };
    if !input.exists() {
        return Err(CliError::Validation(format!("{} does not exist", input.display())));
    }
    let v = read_vvol(&input)?;
    let n = match sc.axis {
        Axis::Z => v.shape()[0],
        Axis::Y => v.shape()[1],
        Axis::X => v.shape()[2],
    };
    let index = sc.index.unwrap_or(n / 2);
    let out = ctx.out.join("slice.pgm");
    fs::write(&out, pgm_slice(&v, sc.axis, index, sc.low, sc.high)?)?;
    println!("wrote {}", out.display());
    Ok(())
}

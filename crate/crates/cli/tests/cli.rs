use std::path::Path;
use std::process::{Command, Output};

fn voldiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voldiff")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = voldiff(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write(dir: &Path, name: &str, value: serde_json::Value) {
    std::fs::write(dir.join(name), serde_json::to_vec(&value).unwrap()).unwrap();
}

fn gaussian_config() -> serde_json::Value {
    serde_json::json!({
        "schedule": { "steps": 100 },
        "denoiser": { "kind": "analytic_gaussian", "mu0": 0.3, "var0": 0.04 },
        "data": {
            "count": 20,
            "recipe": { "kind": "gaussian", "shape": [8, 8, 8] },
        },
        "tiling": { "window": [4, 4, 4], "stride": [2, 2, 2] },
        "sample": { "count": 1, "nfe": 10, "clip_x0": null },
    })
}

#[test]
fn missing_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = voldiff(dir.path(), &["phantom", "--config", "nope.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.json", serde_json::json!({ "denoise": { "sigma": 0.1 } }));
    let out = voldiff(dir.path(), &["denoise", "--config", "bad.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inference_without_dataset_or_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = voldiff(dir.path(), &["sample", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    write(dir.path(), "small.json", serde_json::json!({ "data": { "count": 20, "recipe": { "kind": "anatomy", "shape": [8, 8, 8] } } }));
    ok(dir.path(), &["phantom", "--config", "small.json", "--out", "data"]);
    let out = voldiff(dir.path(), &["sample", "--config", "small.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2), "no checkpoint configured");
}

#[test]
fn analytic_denoising_improves_psnr() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cfg.json", gaussian_config());
    ok(dir.path(), &["phantom", "--config", "cfg.json", "--out", "data"]);
    let line = ok(dir.path(), &["denoise", "--config", "cfg.json", "--out", "den"]);
    assert!(line.starts_with("mean PSNR gain"), "{line}");
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("den/summary.json")).unwrap()).unwrap();
    assert!(summary["mean_psnr_gain"].as_f64().unwrap() > 1.0, "{summary}");

    let eval = ok(dir.path(), &["eval", "--config", "cfg.json", "--results", "den", "--out", "ev"]);
    assert!(eval.starts_with("mean PSNR"), "{eval}");
    let records: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("den/metrics.json")).unwrap()).unwrap();
    let case = records[0]["case_id"].as_str().unwrap();
    ok(dir.path(), &["slice", "--input", &format!("den/{case}/restored.vvol"), "--out", "sl"]);
    let pgm = std::fs::read(dir.path().join("sl/slice.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
}

#[test]
fn whole_volume_window_matches_direct_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = gaussian_config();
    cfg["tiling"] = serde_json::json!({ "window": [8, 8, 8], "stride": [8, 8, 8] });
    write(dir.path(), "cfg.json", cfg);
    ok(dir.path(), &["phantom", "--config", "cfg.json", "--out", "data"]);
    ok(dir.path(), &["sample", "--config", "cfg.json", "--out", "tiled"]);
    ok(dir.path(), &["sample", "--no-tiling", "--config", "cfg.json", "--out", "direct"]);
    let a = std::fs::read(dir.path().join("tiled/sample_000.vvol")).unwrap();
    let b = std::fs::read(dir.path().join("direct/sample_000.vvol")).unwrap();
    assert_eq!(a, b);
}

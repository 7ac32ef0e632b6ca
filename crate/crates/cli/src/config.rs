//! Run configuration. Every field has a default, so `{}` is a valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voldiff::anomaly::ScoreMode;
use voldiff::denoiser::UNetConfig;
use voldiff::phantom::{DatasetRecipe, Split};
use voldiff::{ChannelLayout, RegionClass, Shape3};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Output directory; `--out` overrides it.
    pub out: Option<PathBuf>,
    /// Worker threads; `--threads` and `VOLDIFF_THREADS` override it.
    pub threads: Option<usize>,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub denoiser: DenoiserChoice,
    pub tiling: TilingConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub sample: SampleConfig,
    pub denoise: RestoreConfig,
    pub sr: SrConfig,
    pub anomaly: AnomalyConfig,
    pub eval: EvalConfig,
    pub slice: SliceConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("invalid config {}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layout: ChannelLayout,
    pub unet: UNetConfig,
    /// Training patch extent.
    pub patch: Shape3,
    /// Network checkpoint read by inference commands and by `finetune`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { layout: ChannelLayout::default(), unet: UNetConfig::default(), patch: [16; 3], checkpoint: None }
    }
}

/// Where noise predictions come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserChoice {
    /// The network in `model.checkpoint`.
    #[default]
    Checkpoint,
    /// Closed-form posterior for independent Gaussian voxels.
    AnalyticGaussian { mu0: f64, var0: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingConfig {
    pub enabled: bool,
    pub window: Shape3,
    pub stride: Shape3,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig { enabled: true, window: [16; 3], stride: [8; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory read by every command except `phantom`.
    pub dataset: PathBuf,
    /// Number of cases `phantom` generates.
    pub count: usize,
    pub recipe: DatasetRecipe,
    /// Cases the inference commands process; `null` selects all.
    pub split: Option<Split>,
    /// Upper bound on processed cases.
    pub limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: PathBuf::from("data"),
            count: 200,
            recipe: DatasetRecipe::default(),
            split: Some(Split::Test),
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 2000, batch: 1, lr: 1e-4, log_every: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { steps: 100, batch: 1, lr: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub count: usize,
    /// Network evaluations per sample; the full chain when it reaches `T`.
    pub nfe: usize,
    /// Overrides the region of the conditioning case.
    pub region: Option<RegionClass>,
    /// Output extent; anatomy is resampled when it differs from the case.
    pub shape: Option<Shape3>,
    /// Range the clean-image prediction is clamped to at every step; `null` disables it.
    pub clip_x0: Option<[f32; 2]>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { count: 2, nfe: 50, region: None, shape: None, clip_x0: Some([-1.0, 1.0]) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreConfig {
    pub sigma_n: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub nfe: usize,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        RestoreConfig { sigma_n: 0.15, lambda: 10.0, zeta: 0.0, nfe: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrConfig {
    pub sf: usize,
    pub sigma_n: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub nfe: usize,
}

impl Default for SrConfig {
    fn default() -> Self {
        SrConfig { sf: 5, sigma_n: 1.0, lambda: 1.0, zeta: 0.3, nfe: 100 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiChoice {
    /// Every voxel.
    All,
    /// Voxels with a non-background anatomy label.
    Foreground,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalyConfig {
    /// Defaults to `round(0.95 T)`.
    pub t_fixed: Option<usize>,
    /// Applied to the anomaly map after per-volume rescaling to `[0, 1]`.
    pub threshold: f64,
    pub score: ScoreMode,
    pub roi: RoiChoice,
    /// Range the reconstruction is clamped to; `null` disables it.
    pub clip_x0: Option<[f32; 2]>,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        AnomalyConfig {
            t_fixed: None,
            threshold: 0.5,
            score: ScoreMode::Max,
            roi: RoiChoice::All,
            clip_x0: Some([-1.0, 1.0]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Directory holding `<case id>/<file>` outputs of an earlier command.
    pub results: Option<PathBuf>,
    pub file: String,
    pub data_range: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { results: None, file: "restored.vvol".into(), data_range: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Z,
    Y,
    X,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceConfig {
    pub input: Option<PathBuf>,
    pub axis: Axis,
    /// Defaults to the middle slice.
    pub index: Option<usize>,
    /// Intensities mapped to black and white.
    pub low: f32,
    pub high: f32,
}

impl Default for SliceConfig {
    fn default() -> Self {
        SliceConfig { input: None, axis: Axis::Z, index: None, low: -1.0, high: 1.0 }
    }
}

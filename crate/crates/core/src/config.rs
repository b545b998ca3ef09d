//! Run configuration: a TOML file with `diffusion`, `model`, `train`, `data`,
//! `eval` and `io` tables plus top-level `seed`, `out` and `deterministic`.
//!
//! Precedence, lowest first: built-in defaults, the config file, `--set
//! key=value` overrides (dotted keys), then dedicated command-line flags.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SceneSpec;
use crate::diffusion::{matched_beta_end, reference_terminal_alpha_bar, NoiseSchedule, SigmaMode};
use crate::error::{Error, Result};
use crate::metrics::{DiceMode, ScoreOptions};
use crate::segmenter::ReferenceConfig;
use crate::trainer::TrainConfig;
use crate::unet::{ArchSpec, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    /// `None` picks the end value whose terminal `alpha_bar` matches the
    /// 1000-step reference schedule.
    pub beta_end: Option<f64>,
    pub sigma_mode: SigmaMode,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: None,
            sigma_mode: SigmaMode::Beta,
        }
    }
}

impl DiffusionSection {
    pub fn beta_end(&self) -> Result<f64> {
        match self.beta_end {
            Some(b) => Ok(b),
            None => matched_beta_end(self.steps, self.beta_start, reference_terminal_alpha_bar()),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear_with_sigma(self.steps, self.beta_start, self.beta_end()?, self.sigma_mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub base_channels: usize,
    pub stage_multipliers: Vec<usize>,
    pub res_blocks_per_stage: usize,
    pub num_regions: usize,
    pub img_channels: usize,
    pub resolution: usize,
    pub time_embed_dim: usize,
    pub attention_at_lowest: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from_arch(&ArchSpec::desk(), Variant::Shared)
    }
}

impl ModelSection {
    pub fn from_arch(a: &ArchSpec, variant: Variant) -> Self {
        Self {
            variant,
            base_channels: a.base_channels,
            stage_multipliers: a.stage_multipliers.clone(),
            res_blocks_per_stage: a.res_blocks_per_stage,
            num_regions: a.num_regions,
            img_channels: a.img_channels,
            resolution: a.resolution,
            time_embed_dim: a.time_embed_dim,
            attention_at_lowest: a.attention_at_lowest,
        }
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            base_channels: self.base_channels,
            stage_multipliers: self.stage_multipliers.clone(),
            res_blocks_per_stage: self.res_blocks_per_stage,
            num_regions: self.num_regions,
            img_channels: self.img_channels,
            resolution: self.resolution,
            time_embed_dim: self.time_embed_dim,
            attention_at_lowest: self.attention_at_lowest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `"synthetic"` or a dataset directory.
    pub source: String,
    pub scene: SceneSpec,
    /// Images at the end of the dataset kept out of training.
    pub held_out: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            scene: SceneSpec::default(),
            held_out: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Segmentation timestep; `None` scales 30-of-1000 to the schedule.
    pub t_seg: Option<usize>,
    pub segment_draws: usize,
    pub dice_mode: DiceMode,
    /// Ground-truth classes counted as foreground; `None` means all but 0.
    pub foreground: Option<Vec<usize>>,
    /// Samples generated for the consistency score.
    pub num_generate: usize,
    pub reference: ReferenceConfig,
    /// Use EMA weights for inference (raw weights otherwise).
    pub use_ema: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            t_seg: None,
            segment_draws: 1,
            dice_mode: DiceMode::Symmetric,
            foreground: None,
            num_generate: 256,
            reference: ReferenceConfig::default(),
            use_ema: true,
        }
    }
}

impl EvalSection {
    pub fn t_seg(&self, schedule: &NoiseSchedule) -> usize {
        self.t_seg.unwrap_or_else(|| schedule.default_segmentation_t())
    }

    pub fn score_options(&self, k_gt: usize) -> ScoreOptions {
        ScoreOptions {
            foreground: self.foreground.clone().unwrap_or_else(|| (1..k_gt).collect()),
            dice_mode: self.dice_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub montage: bool,
    /// Also write each soft mask channel as a greyscale PNG.
    pub soft_masks: bool,
    /// Trajectory recording interval for `generate`; 0 disables it.
    pub record_every: usize,
    /// Images per forward pass at inference.
    pub chunk: usize,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            montage: true,
            soft_masks: false,
            record_every: 0,
            chunk: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub deterministic: bool,
    pub diffusion: DiffusionSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            deterministic: true,
            diffusion: DiffusionSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
            io: IoSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // Parse as a TOML value when possible, else keep it as a string.
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `section.key=value` to a TOML table, creating tables as needed.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key component"));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides`; validated.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::config(p.display().to_string(), e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config("config", e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serialisable")
    }

    pub fn arch(&self) -> ArchSpec {
        self.model.arch()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.diffusion.schedule()
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        self.schedule()?;
        self.train.validate()?;
        if self.data.source == "synthetic" {
            self.data.scene.validate()?;
            if self.data.scene.resolution != self.model.resolution {
                return Err(Error::config(
                    "data.scene.resolution",
                    format!("{} differs from model.resolution {}", self.data.scene.resolution, self.model.resolution),
                ));
            }
        }
        if let Some(t) = self.eval.t_seg {
            if t == 0 || t > self.diffusion.steps {
                return Err(Error::config("eval.t_seg", format!("must lie in [1, {}]", self.diffusion.steps)));
            }
        }
        if self.eval.segment_draws == 0 {
            return Err(Error::config("eval.segment_draws", "must be >= 1"));
        }
        if self.io.chunk == 0 {
            return Err(Error::config("io.chunk", "must be >= 1"));
        }
        Ok(())
    }
}

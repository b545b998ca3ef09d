//! End-to-end steps shared by the command-line tool and the test suites:
//! dataset loading, checkpoint-backed inference, evaluation, ablation, and
//! artifact writing.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_dataset, load_png_dir, tensor_to_rgb, Dataset};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::metrics::{consistency, score, MetricReport};
use crate::png_io;
use crate::sampler::{
    mask_trajectory_with, segment_with, GenerateOptions, GenerationResult, SegmentOptions, SegmentationResult,
    Snapshot,
};
use crate::segmenter::ReferenceSegmenter;
use crate::trainer::{train_loop, validation_loss, RunDir, TrainState};
use crate::unet::{FactorizedUnet, Variant};

/// Images per montage row.
const MONTAGE_COLUMNS: usize = 8;

/// Dataset named by `path`, else by `data.source` (`"synthetic"` renders
/// the configured scenes).
pub fn load_dataset(cfg: &RunConfig, path: Option<&Path>) -> Result<Dataset> {
    let source = match path {
        Some(p) => Some(p.to_path_buf()),
        None if cfg.data.source == "synthetic" => None,
        None => Some(PathBuf::from(&cfg.data.source)),
    };
    match source {
        None => generate_dataset(&cfg.data.scene),
        Some(p) => {
            if !p.is_dir() {
                return Err(Error::io(
                    &p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
                ));
            }
            load_png_dir(&p, cfg.model.resolution)
        }
    }
}

/// A trained model ready for inference.
#[derive(Debug)]
pub struct Inference {
    pub state: TrainState,
    pub schedule: NoiseSchedule,
    pub use_ema: bool,
}

impl Inference {
    pub fn model(&self) -> &FactorizedUnet {
        if self.use_ema {
            self.state.ema_model()
        } else {
            self.state.model()
        }
    }
}

/// Load a checkpoint; its recorded schedule wins over the configured one.
pub fn open_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Inference> {
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    let ck = checkpoint::load_full(path, None)?;
    let schedule = match ck.schedule {
        Some(s) => s,
        None => cfg.schedule()?,
    };
    Ok(Inference {
        state: ck.state,
        schedule,
        use_ema: cfg.eval.use_ema,
    })
}

/// Segment every image of `data` at the configured timestep.
pub fn segment_dataset(inf: &Inference, data: &Dataset, cfg: &RunConfig) -> Result<SegmentationResult> {
    let t_seg = cfg.eval.t_seg(&inf.schedule);
    let opts = SegmentOptions {
        t_seg,
        draws: cfg.eval.segment_draws,
        seed: cfg.seed,
        first_index: 0,
        chunk: cfg.io.chunk,
    };
    let x = data.all(inf.model().dtype())?;
    segment_with(&x, &opts, inf.model(), &inf.schedule)
}

/// Score segmentation of a labelled set.
pub fn evaluate_segmentation(
    inf: &Inference,
    data: &Dataset,
    cfg: &RunConfig,
) -> Result<(MetricReport, SegmentationResult)> {
    let k_gt = data
        .num_classes()
        .ok_or_else(|| Error::config("data", "evaluation needs ground-truth masks"))?;
    let seg = segment_dataset(inf, data, cfg)?;
    let gt: Vec<u8> = (0..data.len())
        .flat_map(|i| data.labels(i).expect("labelled").to_vec())
        .collect();
    let plane = data.resolution() * data.resolution();
    let report = score(&seg.hard, &gt, plane, seg.num_regions(), k_gt, &cfg.eval.score_options(k_gt))?;
    Ok((report, seg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub samples: usize,
    pub score: f64,
    /// Mean cross-entropy of the reference segmenter over its last 50 steps.
    pub reference_loss: f64,
}

/// Generate samples, segment them with a supervised reference trained on
/// `train`, and measure agreement with the generated masks.
pub fn consistency_score(
    inf: &Inference,
    train: &Dataset,
    cfg: &RunConfig,
) -> Result<(ConsistencyReport, GenerationResult)> {
    let k_gt = train
        .num_classes()
        .ok_or_else(|| Error::config("data", "the reference segmenter needs ground-truth masks"))?;
    let mut reference = ReferenceSegmenter::new(train.resolution(), k_gt, &cfg.eval.reference, cfg.seed)?;
    let losses = reference.fit(train, &cfg.eval.reference, cfg.seed)?;
    let tail = &losses[losses.len().saturating_sub(50)..];
    let reference_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    let gen = generate(inf, cfg.eval.num_generate, cfg)?;
    let predicted = reference.predict(&gen.images, cfg.io.chunk)?;
    let plane = train.resolution() * train.resolution();
    let score = consistency(&gen.masks.hard, &predicted.hard, plane, gen.masks.num_regions(), k_gt)?;
    Ok((
        ConsistencyReport {
            samples: cfg.eval.num_generate,
            score,
            reference_loss,
        },
        gen,
    ))
}

pub fn generate(inf: &Inference, n: usize, cfg: &RunConfig) -> Result<GenerationResult> {
    let opts = GenerateOptions {
        seed: cfg.seed,
        first_index: 0,
        chunk: cfg.io.chunk,
    };
    crate::sampler::generate_with(n, &opts, inf.model(), &inf.schedule)
}

pub fn generate_with_trajectory(
    inf: &Inference,
    n: usize,
    cfg: &RunConfig,
    record_every: usize,
) -> Result<(GenerationResult, Vec<Snapshot>)> {
    let opts = GenerateOptions {
        seed: cfg.seed,
        first_index: 0,
        chunk: cfg.io.chunk,
    };
    mask_trajectory_with(n, &opts, inf.model(), &inf.schedule, record_every)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_step: u64,
    pub t_seg: usize,
    pub segmentation: MetricReport,
    pub consistency: Option<ConsistencyReport>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("checkpoint step {}\nt_seg {}\n{}", self.checkpoint_step, self.t_seg, self.segmentation.to_text());
        if let Some(c) = &self.consistency {
            s.push_str(&format!(
                "consistency {:.4} over {} samples (reference loss {:.4})\n",
                c.score, c.samples, c.reference_loss
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub parameters: usize,
    pub miou: f64,
    pub iou: f64,
    pub acc: f64,
    pub dice: f64,
    /// Held-out denoising loss with fixed draws, a proxy for sample quality.
    pub validation_loss: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub steps: u64,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{} steps, seed {}\n{:<10} {:>10} {:>7} {:>7} {:>7} {:>7} {:>9}\n",
            self.steps, self.seed, "variant", "params", "mIoU", "IoU", "Acc", "Dice", "val loss"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:>10} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>9.5}\n",
                r.variant.name(),
                r.parameters,
                r.miou,
                r.iou,
                r.acc,
                r.dice,
                r.validation_loss
            ));
        }
        s
    }
}

/// Train and score one variant under the shared seed and budget.
pub fn ablation_row(
    cfg: &RunConfig,
    variant: Variant,
    train: &Dataset,
    held: &Dataset,
    out: Option<&Path>,
) -> Result<AblationRow> {
    let schedule = cfg.schedule()?;
    let run = match out {
        Some(dir) => RunDir::new(dir.join(variant.name())),
        None => RunDir::default(),
    };
    let outcome = train_loop(&cfg.arch(), variant, &cfg.train_config(), train, &schedule, &run)?;
    let final_train_loss = outcome.losses.last().map(|l| l.1).unwrap_or(f64::NAN);
    let inf = Inference {
        state: outcome.state,
        schedule,
        use_ema: cfg.eval.use_ema,
    };
    let (report, _) = evaluate_segmentation(&inf, held, cfg)?;
    let x = held.all(inf.model().dtype())?;
    let validation_loss = validation_loss(inf.model(), &x, &inf.schedule, cfg.seed, cfg.io.chunk)?;
    Ok(AblationRow {
        variant,
        parameters: inf.state.params().num_scalars(),
        miou: report.miou,
        iou: report.iou,
        acc: report.acc,
        dice: report.dice,
        validation_loss,
        final_train_loss,
    })
}

/// All four decoding schemes under one seed and step budget.
pub fn ablate(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<AblationReport> {
    let (train, held) = data.split(cfg.data.held_out);
    if train.is_empty() || held.is_empty() {
        return Err(Error::config("data.held_out", "need both training and held-out images"));
    }
    let rows = Variant::ABLATIONS
        .iter()
        .map(|&v| ablation_row(cfg, v, &train, &held, out))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        steps: cfg.train.total_iters,
        seed: cfg.seed,
        rows,
    })
}

/// Write `config.toml` into `dir`, creating it.
pub fn write_config_echo(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("config.toml");
    std::fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn soft_channel_bytes(soft: &Tensor, i: usize, k: usize) -> Result<Vec<u8>> {
    let plane = soft.get(i)?.get(k)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(plane.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect())
}

/// Indexed label PNGs (`masks/`), optional greyscale soft masks (`soft/`),
/// and an image/mask montage.
pub fn write_masks(
    dir: &Path,
    images: Option<&[Vec<u8>]>,
    seg: &SegmentationResult,
    cfg: &RunConfig,
    names: &[String],
) -> Result<()> {
    let (h, w) = seg.size();
    for (i, name) in names.iter().enumerate().take(seg.len()) {
        png_io::write_indexed(&dir.join("masks").join(format!("{name}.png")), w as u32, h as u32, seg.labels(i))?;
        if cfg.io.soft_masks {
            for k in 0..seg.num_regions() {
                let bytes = soft_channel_bytes(seg.soft.tensor(), i, k)?;
                png_io::write_gray(&dir.join("soft").join(format!("{name}_{k}.png")), w as u32, h as u32, &bytes)?;
            }
        }
    }
    if cfg.io.montage && !seg.is_empty() {
        if let Some(images) = images {
            let mut rows = Vec::new();
            for start in (0..seg.len()).step_by(MONTAGE_COLUMNS) {
                let end = (start + MONTAGE_COLUMNS).min(seg.len());
                rows.push(images[start..end].to_vec());
                rows.push((start..end).map(|i| png_io::colorize(seg.labels(i))).collect());
            }
            png_io::write_montage(&dir.join("montage.png"), h, &rows)?;
        }
    }
    Ok(())
}

pub fn index_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{i:05}")).collect()
}

/// Images (`images/`), masks and montage of a generation run.
pub fn write_generation(dir: &Path, gen: &GenerationResult, cfg: &RunConfig) -> Result<()> {
    let rgb = tensor_to_rgb(&gen.images)?;
    let (h, w) = gen.masks.size();
    let names = index_names(rgb.len());
    for (img, name) in rgb.iter().zip(&names) {
        png_io::write_rgb(&dir.join("images").join(format!("{name}.png")), w as u32, h as u32, img)?;
    }
    write_masks(dir, Some(&rgb), &gen.masks, cfg, &names)
}

/// One row per recorded step for the first few samples: image then mask.
pub fn write_trajectory(path: &Path, snaps: &[Snapshot], samples: usize) -> Result<()> {
    let mut rows = Vec::new();
    let mut tile = 0;
    for s in snaps {
        let rgb = tensor_to_rgb(&s.image)?;
        let labels = s.masks.hard_labels()?;
        let (_, _, h, w) = s.masks.tensor().dims4()?;
        tile = h;
        let mut row = Vec::new();
        for i in 0..samples.min(rgb.len()) {
            row.push(rgb[i].clone());
            row.push(png_io::colorize(&labels[i * h * w..(i + 1) * h * w]));
        }
        rows.push(row);
    }
    png_io::write_montage(path, tile, &rows)
}

/// HWC bytes of every image in a dataset.
pub fn dataset_rgb(data: &Dataset) -> Vec<Vec<u8>> {
    (0..data.len()).map(|i| data.image_bytes(i).to_vec()).collect()
}

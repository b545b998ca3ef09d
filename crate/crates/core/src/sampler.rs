//! Inference: one-step segmentation of real images and joint image and mask
//! generation by ancestral sampling.
//!
//! All noise is drawn per image from streams keyed by the image's index, so
//! results do not depend on how a batch is split into chunks.

use candle_core::{DType, Tensor};

use crate::diffusion::{forward_diffuse, reverse_step, NoiseSchedule, Timesteps};
use crate::error::{Error, Result};
use crate::rng::{self, normal_tensor};
use crate::unet::{FactorizedUnet, MaskStack};

/// Images per forward pass when a call has to be split.
pub const DEFAULT_CHUNK: usize = 32;

#[derive(Debug, Clone)]
pub struct SegmentationResult {
    pub soft: MaskStack,
    /// Argmax labels, `(batch, H, W)` row-major, values below K.
    pub hard: Vec<u8>,
    pub t_used: usize,
}

impl SegmentationResult {
    pub fn from_soft(soft: MaskStack, t_used: usize) -> Result<Self> {
        let hard = soft.hard_labels()?;
        Ok(Self { soft, hard, t_used })
    }

    pub fn len(&self) -> usize {
        self.soft.tensor().dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_regions(&self) -> usize {
        self.soft.num_regions()
    }

    /// `(height, width)` of each label map.
    pub fn size(&self) -> (usize, usize) {
        let d = self.soft.tensor().dims();
        (d[2], d[3])
    }

    /// Label map of image `i`.
    pub fn labels(&self, i: usize) -> &[u8] {
        let (h, w) = self.size();
        &self.hard[i * h * w..(i + 1) * h * w]
    }

    fn concat(parts: Vec<SegmentationResult>, t_used: usize) -> Result<Self> {
        let tensors: Vec<Tensor> = parts.iter().map(|p| p.soft.tensor().clone()).collect();
        let soft = MaskStack::new(Tensor::cat(&tensors, 0)?)?;
        let hard = parts.into_iter().flat_map(|p| p.hard).collect();
        Ok(Self { soft, hard, t_used })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentOptions {
    pub t_seg: usize,
    /// Independent noise draws averaged per image; 1 is a single draw.
    pub draws: usize,
    pub seed: u64,
    /// Dataset index of the first image, so noise stays tied to the image.
    pub first_index: u64,
    pub chunk: usize,
}

impl SegmentOptions {
    pub fn new(t_seg: usize, seed: u64) -> Self {
        Self {
            t_seg,
            draws: 1,
            seed,
            first_index: 0,
            chunk: DEFAULT_CHUNK,
        }
    }
}

/// Noise the clean images to `t_seg` and read the mask generator once.
pub fn segment(
    x0: &Tensor,
    t_seg: usize,
    model: &FactorizedUnet,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<SegmentationResult> {
    segment_with(x0, &SegmentOptions::new(t_seg, seed), model, schedule)
}

pub fn segment_with(
    x0: &Tensor,
    opts: &SegmentOptions,
    model: &FactorizedUnet,
    schedule: &NoiseSchedule,
) -> Result<SegmentationResult> {
    if opts.t_seg == 0 || opts.t_seg > schedule.steps() {
        return Err(Error::Range {
            what: "t_seg",
            value: opts.t_seg as i64,
            range: format!("[1, {}]", schedule.steps()),
        });
    }
    if opts.draws == 0 {
        return Err(Error::config("eval.segment_draws", "must be >= 1"));
    }
    let (n, c, h, w) = x0.dims4()?;
    let chunk = opts.chunk.max(1);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let x = x0.narrow(0, start, len)?.to_dtype(model.dtype())?;
        let t = Timesteps::uniform(opts.t_seg, len, schedule.steps())?;
        let mut rngs: Vec<_> = (0..len)
            .map(|i| rng::stream(opts.seed, "segment", opts.first_index + (start + i) as u64))
            .collect();
        let mut acc: Option<Tensor> = None;
        for _ in 0..opts.draws {
            let eps = rngs
                .iter_mut()
                .map(|r| normal_tensor(r, &[1, c, h, w], model.dtype()))
                .collect::<Result<Vec<_>>>()?;
            let eps = Tensor::cat(&eps, 0)?;
            let x_t = forward_diffuse(&x, &t, &eps, schedule)?;
            let m = model.masks_only(&x_t, &t)?.into_tensor();
            acc = Some(match acc {
                None => m,
                Some(a) => (a + m)?,
            });
        }
        let mut soft = acc.expect("at least one draw");
        if opts.draws > 1 {
            soft = soft.affine(1.0 / opts.draws as f64, 0.0)?;
        }
        parts.push(SegmentationResult::from_soft(MaskStack::new(soft)?, opts.t_seg)?);
        start += len;
    }
    if parts.is_empty() {
        let k = model.arch().num_regions.max(1);
        let empty = Tensor::zeros((0, k, h, w), model.dtype(), x0.device())?;
        return SegmentationResult::from_soft(MaskStack::new(empty)?, opts.t_seg);
    }
    SegmentationResult::concat(parts, opts.t_seg)
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    /// `(n, C, H, W)`, clamped to [-1, 1].
    pub images: Tensor,
    /// Masks from the final (t = 1) evaluation.
    pub masks: SegmentationResult,
    pub steps: usize,
}

/// One recorded point of the reverse chain.
#[derive(Debug, Clone)]
pub struct Snapshot {
    /// Timestep of the model evaluation that produced the masks.
    pub t: usize,
    /// `x_{t-1}` after the step, clamped to [-1, 1].
    pub image: Tensor,
    pub masks: MaskStack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    pub seed: u64,
    pub first_index: u64,
    pub chunk: usize,
}

impl GenerateOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            first_index: 0,
            chunk: DEFAULT_CHUNK,
        }
    }
}

fn noise_for(indices: std::ops::Range<u64>, seed: u64, domain: &str, t: u64, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let parts = indices
        .map(|i| normal_tensor(&mut rng::stream(seed, domain, (i << 32) | t), shape, dtype))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

fn all_finite(x: &Tensor) -> Result<bool> {
    let s = x.abs()?.to_dtype(DType::F64)?.flatten_all()?.max(0)?.to_scalar::<f64>()?;
    Ok(s.is_finite())
}

/// Run the reverse chain for images `[first, first + n)`, calling `record`
/// after each step with `(step_number, t, x_{t-1}, masks)`.
fn run_chain(
    n: usize,
    first: u64,
    seed: u64,
    model: &FactorizedUnet,
    schedule: &NoiseSchedule,
    mut record: impl FnMut(usize, usize, &Tensor, &MaskStack) -> Result<()>,
) -> Result<(Tensor, MaskStack)> {
    let arch = model.arch();
    let shape = [1, arch.img_channels, arch.resolution, arch.resolution];
    let steps = schedule.steps();
    let range = first..first + n as u64;
    let mut x = noise_for(range.clone(), seed, "generate-start", 0, &shape, model.dtype())?;
    let mut last_masks = None;
    for (i, t) in (1..=steps).rev().enumerate() {
        let tt = Timesteps::uniform(t, n, steps)?;
        let pred = model.predict_noise(&x, &tt)?;
        let z = if t > 1 {
            Some(noise_for(range.clone(), seed, "generate-step", t as u64, &shape, model.dtype())?)
        } else {
            None
        };
        x = reverse_step(&x, &pred.eps, t, z.as_ref(), schedule)?;
        if !all_finite(&x)? {
            return Err(Error::NonFinite {
                context: format!("reverse step {} of {steps} (t = {t})", i + 1),
            });
        }
        record(i + 1, t, &x, &pred.masks)?;
        last_masks = Some(pred.masks);
    }
    Ok((x.clamp(-1.0, 1.0)?, last_masks.expect("schedule has at least one step")))
}

/// Sample `n` images from pure noise together with their region masks.
pub fn generate(n: usize, model: &FactorizedUnet, schedule: &NoiseSchedule, seed: u64) -> Result<GenerationResult> {
    generate_with(n, &GenerateOptions::new(seed), model, schedule)
}

pub fn generate_with(
    n: usize,
    opts: &GenerateOptions,
    model: &FactorizedUnet,
    schedule: &NoiseSchedule,
) -> Result<GenerationResult> {
    Ok(trajectory_inner(n, opts, model, schedule, None)?.0)
}

/// As [`generate`], also recording every `record_every`-th step and the
/// final one: `ceil(T / record_every)` snapshots in chain order.
pub fn mask_trajectory(
    n: usize,
    model: &FactorizedUnet,
    schedule: &NoiseSchedule,
    seed: u64,
    record_every: usize,
) -> Result<Vec<Snapshot>> {
    mask_trajectory_with(n, &GenerateOptions::new(seed), model, schedule, record_every).map(|r| r.1)
}

/// Generation result together with its trajectory.
pub fn mask_trajectory_with(
    n: usize,
    opts: &GenerateOptions,
    model: &FactorizedUnet,
    schedule: &NoiseSchedule,
    record_every: usize,
) -> Result<(GenerationResult, Vec<Snapshot>)> {
    if record_every == 0 {
        return Err(Error::config("record_every", "must be >= 1"));
    }
    let (g, snaps) = trajectory_inner(n, opts, model, schedule, Some(record_every))?;
    Ok((g, snaps))
}

fn trajectory_inner(
    n: usize,
    opts: &GenerateOptions,
    model: &FactorizedUnet,
    schedule: &NoiseSchedule,
    record_every: Option<usize>,
) -> Result<(GenerationResult, Vec<Snapshot>)> {
    if n == 0 {
        return Err(Error::config("n", "must generate at least one image"));
    }
    let steps = schedule.steps();
    let chunk = opts.chunk.max(1);
    let mut images = Vec::new();
    let mut masks = Vec::new();
    // Per recorded step: (t, image chunks, mask chunks).
    let mut snaps: Vec<(usize, Vec<Tensor>, Vec<Tensor>)> = Vec::new();
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let mut slot = 0;
        let (x, m) = run_chain(len, opts.first_index + start as u64, opts.seed, model, schedule, |i, t, x, m| {
            if let Some(r) = record_every {
                if i % r == 0 || i == steps {
                    if slot == snaps.len() {
                        snaps.push((t, Vec::new(), Vec::new()));
                    }
                    snaps[slot].1.push(x.clamp(-1.0, 1.0)?);
                    snaps[slot].2.push(m.tensor().clone());
                    slot += 1;
                }
            }
            Ok(())
        })?;
        images.push(x);
        masks.push(m.into_tensor());
        start += len;
    }
    let images = Tensor::cat(&images, 0)?;
    let masks = SegmentationResult::from_soft(MaskStack::new(Tensor::cat(&masks, 0)?)?, 1)?;
    let snapshots = snaps
        .into_iter()
        .map(|(t, xs, ms)| {
            Ok(Snapshot {
                t,
                image: Tensor::cat(&xs, 0)?,
                masks: MaskStack::new(Tensor::cat(&ms, 0)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((GenerationResult { images, masks, steps }, snapshots))
}

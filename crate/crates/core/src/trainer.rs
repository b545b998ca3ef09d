//! End-to-end training on the plain denoising objective.
//!
//! Each step samples timesteps and noise, noises the batch, predicts the
//! noise with the full network, and takes one Adam step on the mean squared
//! error. There is no other loss term. An EMA shadow of the weights is kept
//! for inference.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::Dataset;
use crate::diffusion::{forward_diffuse, sample_timesteps, NoiseSchedule, Timesteps};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng::{self, normal_tensor};
use crate::unet::{ArchSpec, FactorizedUnet, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub ema_rate: f64,
    pub batch_size: usize,
    pub total_iters: u64,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    pub precision: Precision,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Random horizontal flips of training images.
    pub flip: bool,
    /// Split each batch into pieces of this many images for the backward
    /// pass (gradient accumulation); `None` processes the batch at once.
    /// The default of 16 keeps a desk-size batch of 64 within a few GB.
    pub micro_batch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            ema_rate: 0.9999,
            batch_size: 64,
            total_iters: 20_000,
            seed: 0,
            grad_clip_norm: None,
            precision: Precision::F32,
            checkpoint_every: 1000,
            log_every: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            flip: false,
            micro_batch: Some(16),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return Err(Error::config("train.ema_rate", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("train.adam_beta", "betas must lie in [0, 1)"));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::config("train.adam_eps", "must be > 0"));
        }
        if self.micro_batch == Some(0) {
            return Err(Error::config("train.micro_batch", "must be >= 1"));
        }
        if let Some(c) = self.grad_clip_norm {
            if c <= 0.0 {
                return Err(Error::config("train.grad_clip_norm", "must be > 0"));
            }
        }
        Ok(())
    }
}

/// Weights, EMA shadow, optimizer moments and step counter.
///
/// Random draws are derived from `(config.seed, step)`, so the state needs no
/// generator snapshot to resume bit-exactly.
#[derive(Debug)]
pub struct TrainState {
    pub step: u64,
    pub arch: ArchSpec,
    pub variant: Variant,
    pub config: TrainConfig,
    params: ParamStore,
    ema: ParamStore,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    model: FactorizedUnet,
    ema_model: FactorizedUnet,
}

/// Everything one optimisation step consumed and produced.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: f64,
    pub t: Timesteps,
}

impl TrainState {
    pub fn new(arch: &ArchSpec, variant: Variant, config: &TrainConfig) -> Result<Self> {
        Self::with_dtype(arch, variant, config, DType::F32)
    }

    /// Fresh state in an explicit precision (f64 is used by gradient checks).
    pub fn with_dtype(
        arch: &ArchSpec,
        variant: Variant,
        config: &TrainConfig,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype, config.seed);
        FactorizedUnet::build(arch, variant, &mut params, true)?;
        params.freeze();
        Self::from_parts(arch, variant, config, params, None, None, 0)
    }

    pub(crate) fn from_parts(
        arch: &ArchSpec,
        variant: Variant,
        config: &TrainConfig,
        mut params: ParamStore,
        ema: Option<ParamStore>,
        moments: Option<(Vec<Tensor>, Vec<Tensor>)>,
        step: u64,
    ) -> Result<Self> {
        params.freeze();
        let model = FactorizedUnet::build(arch, variant, &mut params, true)?;
        let mut ema = match ema {
            Some(e) => e,
            None => params.deep_copy()?,
        };
        ema.freeze();
        let ema_model = FactorizedUnet::build(arch, variant, &mut ema, false)?;
        let (first_moment, second_moment) = match moments {
            Some(m) => m,
            None => {
                let zeros = params
                    .iter()
                    .map(|(_, v)| Ok(v.as_tensor().zeros_like()?))
                    .collect::<Result<Vec<_>>>()?;
                (zeros.clone(), zeros)
            }
        };
        Ok(Self {
            step,
            arch: arch.clone(),
            variant,
            config: config.clone(),
            params,
            ema,
            first_moment,
            second_moment,
            model,
            ema_model,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn ema_params(&self) -> &ParamStore {
        &self.ema
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Network over the raw (trainable) weights.
    pub fn model(&self) -> &FactorizedUnet {
        &self.model
    }

    /// Network over the EMA weights; use this for inference.
    pub fn ema_model(&self) -> &FactorizedUnet {
        &self.ema_model
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Timesteps and noise for step number `step` (0-based).
    pub fn draws(&self, step: u64, batch: usize, steps: usize) -> Result<(Timesteps, Tensor)> {
        let mut r = rng::stream(self.config.seed, "train-noise", step);
        let t = sample_timesteps(batch, steps, &mut r)?;
        let res = self.arch.resolution;
        let eps = normal_tensor(&mut r, &[batch, self.arch.img_channels, res, res], self.dtype())?;
        Ok((t, eps))
    }

    /// Denoising loss `mean ||eps - eps_hat||^2` as a graph-connected scalar.
    pub fn loss(&self, x0: &Tensor, t: &Timesteps, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
        let x0 = x0.to_dtype(self.dtype())?;
        let x_t = forward_diffuse(&x0, t, eps, schedule)?;
        let pred = self.model.predict_noise(&x_t, t)?;
        Ok((eps - pred.eps)?.sqr()?.mean_all()?)
    }

    /// Loss value and per-parameter gradients (in store order; `None` for a
    /// parameter the loss does not reach).
    pub fn gradients(
        &self,
        x0: &Tensor,
        t: &Timesteps,
        eps: &Tensor,
        schedule: &NoiseSchedule,
    ) -> Result<(f64, Vec<Option<Tensor>>)> {
        let loss = self.loss(x0, t, eps, schedule)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grads = loss.backward()?;
        Ok((value, self.collect(&grads)))
    }

    fn collect(&self, grads: &GradStore) -> Vec<Option<Tensor>> {
        self.params
            .iter()
            .map(|(_, v)| grads.get(v.as_tensor()).cloned())
            .collect()
    }

    /// Gradients of the full-batch loss, computed over micro-batches of at
    /// most `micro_batch` images to bound memory. Each piece is weighted by
    /// its share of the batch, so the result is the full-batch gradient up to
    /// summation order.
    pub fn accumulated_gradients(
        &self,
        x0: &Tensor,
        t: &Timesteps,
        eps: &Tensor,
        schedule: &NoiseSchedule,
    ) -> Result<(f64, Vec<Option<Tensor>>)> {
        let n = x0.dims()[0];
        let micro = self.config.micro_batch.unwrap_or(n).max(1);
        if micro >= n {
            return self.gradients(x0, t, eps, schedule);
        }
        let mut total = 0.0;
        let mut acc: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut start = 0;
        while start < n {
            let len = micro.min(n - start);
            let w = len as f64 / n as f64;
            let tt = Timesteps::new(t.as_slice()[start..start + len].to_vec(), schedule.steps())?;
            let (loss, grads) =
                self.gradients(&x0.narrow(0, start, len)?, &tt, &eps.narrow(0, start, len)?, schedule)?;
            total += w * loss;
            for (a, g) in acc.iter_mut().zip(grads) {
                if let Some(g) = g {
                    let g = g.affine(w, 0.0)?;
                    *a = Some(match a.take() {
                        Some(prev) => (prev + g)?,
                        None => g,
                    });
                }
            }
            start += len;
        }
        Ok((total, acc))
    }

    /// One optimisation step on `batch` with this step's own draws.
    pub fn train_step(&mut self, batch: &Tensor, schedule: &NoiseSchedule) -> Result<StepReport> {
        let (t, eps) = self.draws(self.step, batch.dims()[0], schedule.steps())?;
        let (loss, grads) = self.accumulated_gradients(batch, &t, &eps, schedule)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("training step {} (t = {:?}, loss = {loss})", self.step + 1, t.as_slice()),
            });
        }
        self.apply_gradients(grads)?;
        if !self.params.all_finite()? {
            return Err(Error::NonFinite {
                context: format!("weights after step {} (t = {:?}, loss = {loss})", self.step, t.as_slice()),
            });
        }
        Ok(StepReport { loss, t })
    }

    /// Adam update of every parameter followed by the EMA update.
    pub fn apply_gradients(&mut self, grads: Vec<Option<Tensor>>) -> Result<()> {
        let cfg = &self.config;
        let mut grads = grads
            .into_iter()
            .zip(self.params.iter())
            .map(|(g, (_, v))| match g {
                Some(g) => Ok(g),
                None => Ok(v.as_tensor().zeros_like()?),
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(max_norm) = cfg.grad_clip_norm {
            let mut total = 0f64;
            for g in &grads {
                total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
            let norm = total.sqrt();
            if norm > max_norm {
                let scale = max_norm / norm;
                for g in &mut grads {
                    *g = g.affine(scale, 0.0)?;
                }
            }
        }
        adam_update(
            &self.params,
            &mut self.first_moment,
            &mut self.second_moment,
            &grads,
            self.step + 1,
            cfg,
        )?;
        let r = cfg.ema_rate;
        for ((_, w), (_, e)) in self.params.iter().zip(self.ema.iter()) {
            let next = (e.as_tensor().affine(r, 0.0)? + w.as_tensor().detach().affine(1.0 - r, 0.0)?)?;
            e.set(&next)?;
        }
        self.step += 1;
        Ok(())
    }
}

/// Mean denoising loss of `model` on clean images `x0` with fixed draws:
/// image `i` gets its timestep and noise from its own seeded stream, so the
/// value is comparable across models and runs.
pub fn validation_loss(
    model: &FactorizedUnet,
    x0: &Tensor,
    schedule: &NoiseSchedule,
    seed: u64,
    chunk: usize,
) -> Result<f64> {
    let (n, c, h, w) = x0.dims4()?;
    if n == 0 {
        return Err(Error::config("data", "validation set is empty"));
    }
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let len = chunk.max(1).min(n - start);
        let mut ts = Vec::with_capacity(len);
        let mut noise = Vec::with_capacity(len);
        for i in start..start + len {
            let mut r = rng::stream(seed, "validate", i as u64);
            ts.push(r.random_range(1..=schedule.steps()));
            noise.push(normal_tensor(&mut r, &[1, c, h, w], model.dtype())?);
        }
        let t = Timesteps::new(ts, schedule.steps())?;
        let eps = Tensor::cat(&noise, 0)?;
        let x = x0.narrow(0, start, len)?.to_dtype(model.dtype())?;
        let x_t = forward_diffuse(&x, &t, &eps, schedule)?;
        let pred = model.predict_noise(&x_t, &t)?.eps;
        let sum = (eps - pred)?.sqr()?.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
        total += sum;
        start += len;
    }
    Ok(total / (n * c * h * w) as f64)
}

/// In-place Adam update with bias correction; `step` is 1-based.
pub(crate) fn adam_update(
    params: &ParamStore,
    first: &mut [Tensor],
    second: &mut [Tensor],
    grads: &[Tensor],
    step: u64,
    cfg: &TrainConfig,
) -> Result<()> {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bias1 = 1.0 - b1.powi(step as i32);
    let bias2 = 1.0 - b2.powi(step as i32);
    for (i, ((_, var), g)) in params.iter().zip(grads).enumerate() {
        let m = (first[i].affine(b1, 0.0)? + g.affine(1.0 - b1, 0.0)?)?;
        let v = (second[i].affine(b2, 0.0)? + g.sqr()?.affine(1.0 - b2, 0.0)?)?;
        let denom = (v.affine(1.0 / bias2, 0.0)?.sqrt()? + cfg.adam_eps)?;
        let update = m.affine(cfg.lr / bias1, 0.0)?.div(&denom)?;
        var.set(&(var.as_tensor().detach() - update)?)?;
        first[i] = m;
        second[i] = v;
    }
    Ok(())
}

/// Indices of the minibatch for step `step` (0-based): consecutive slices
/// of per-epoch permutations, each permutation seeded by its epoch number.
pub fn batch_indices(seed: u64, step: u64, batch: usize, len: usize) -> Vec<usize> {
    let start = step as usize * batch;
    let mut out = Vec::with_capacity(batch);
    let mut epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for pos in start..start + batch {
        let e = pos / len;
        if e != epoch {
            epoch = e;
            perm = (0..len).collect();
            perm.shuffle(&mut rng::stream(seed, "shuffle", e as u64));
        }
        out.push(perm[pos % len]);
    }
    out
}

fn flips(seed: u64, step: u64, batch: usize) -> Vec<bool> {
    let mut r = rng::stream(seed, "flip", step);
    (0..batch).map(|_| r.random_bool(0.5)).collect()
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// `(step, loss)` for every step executed in this call (1-based steps).
    pub losses: Vec<(u64, f64)>,
    pub resumed_from: Option<u64>,
}

/// Where and how often the loop persists its progress.
#[derive(Debug, Clone, Default)]
pub struct RunDir {
    pub root: Option<PathBuf>,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: Some(root.into()) }
    }

    pub fn checkpoint_dir(&self) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join("checkpoints"))
    }
}

/// Path of the checkpoint written after `step` steps.
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:09}.ckpt"))
}

/// Newest checkpoint in `dir`, by step number.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().map(|(b, _)| s > *b).unwrap_or(true) {
                best = Some((s, p));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Train for `config.total_iters` steps in total.
///
/// With a run directory, an existing latest checkpoint is resumed, a
/// checkpoint is written at step 0 and every `checkpoint_every` steps and at
/// the end, and `metrics.csv` receives `step,loss,seconds` lines.
pub fn train_loop(
    arch: &ArchSpec,
    variant: Variant,
    config: &TrainConfig,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    run: &RunDir,
) -> Result<TrainOutcome> {
    train_loop_until(arch, variant, config, dataset, schedule, run, config.total_iters)
}

/// As [`train_loop`] but stops once `stop_at` steps are done (used to
/// simulate an interruption).
pub fn train_loop_until(
    arch: &ArchSpec,
    variant: Variant,
    config: &TrainConfig,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    run: &RunDir,
    stop_at: u64,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::config("data", "training dataset is empty"));
    }
    if dataset.resolution() != arch.resolution {
        return Err(Error::config(
            "data.resolution",
            format!("dataset is {}px but the model expects {}px", dataset.resolution(), arch.resolution),
        ));
    }
    config.validate()?;
    let ckpt_dir = run.checkpoint_dir();
    let resume = match &ckpt_dir {
        Some(d) => latest_checkpoint(d)?,
        None => None,
    };
    let (mut state, resumed_from) = match resume {
        Some(path) => {
            let s = checkpoint::load(&path, Some(arch))?;
            if s.variant != variant {
                return Err(Error::config(
                    "model.variant",
                    format!("checkpoint {} holds variant {}", path.display(), s.variant.name()),
                ));
            }
            let step = s.step;
            log::info!("resuming from {} at step {step}", path.display());
            (s, Some(step))
        }
        None => (TrainState::new(arch, variant, config)?, None),
    };
    // Schedule-independent settings may change across a resume.
    state.config.total_iters = config.total_iters;
    state.config.checkpoint_every = config.checkpoint_every;
    state.config.log_every = config.log_every;

    let mut log = match &run.root {
        Some(root) => {
            std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
            let meta = root.join("train_config.json");
            let echo = serde_json::json!({
                "arch": arch,
                "variant": variant,
                "train": config,
                "diffusion": {"T": schedule.steps(), "sigma_mode": schedule.sigma_mode()},
                "dataset": dataset.manifest(),
            });
            std::fs::write(&meta, serde_json::to_string_pretty(&echo).expect("serialisable"))
                .map_err(|e| Error::io(&meta, e))?;
            let path = root.join("metrics.csv");
            // Keep lines up to the resumed step; later ones are being redone.
            let mut kept = String::from("step,loss,seconds\n");
            if let (Some(from), Ok(old)) = (resumed_from, std::fs::read_to_string(&path)) {
                for line in old.lines().skip(1) {
                    let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                    if step.is_some_and(|s| s <= from) {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(kept.as_bytes()).map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    if let (Some(dir), None) = (&ckpt_dir, resumed_from) {
        checkpoint::save(&state, Some(schedule), &checkpoint_path(dir, 0))?;
    }

    let started = Instant::now();
    let mut losses = Vec::new();
    let cfg = state.config.clone();
    let target = stop_at.min(cfg.total_iters);
    while state.step < target {
        let idx = batch_indices(cfg.seed, state.step, cfg.batch_size, dataset.len());
        let flip = cfg.flip.then(|| flips(cfg.seed, state.step, cfg.batch_size));
        let batch = dataset.batch(&idx, flip.as_deref(), state.dtype())?;
        let report = state.train_step(&batch, schedule)?;
        losses.push((state.step, report.loss));
        let last = state.step == target;
        if let Some((path, f)) = &mut log {
            writeln!(f, "{},{:.6},{:.3}", state.step, report.loss, started.elapsed().as_secs_f64())
                .map_err(|e| Error::io(&*path, e))?;
            if state.step % cfg.log_every.max(1) == 0 || last {
                f.flush().map_err(|e| Error::io(&*path, e))?;
            }
        }
        if state.step % cfg.log_every.max(1) == 0 {
            log::info!("step {} loss {:.5}", state.step, report.loss);
        }
        if let Some(dir) = &ckpt_dir {
            if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) || last {
                checkpoint::save(&state, Some(schedule), &checkpoint_path(dir, state.step))?;
            }
        }
    }
    Ok(TrainOutcome {
        state,
        losses,
        resumed_from,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SceneSpec};

    fn micro_setup() -> (ArchSpec, TrainConfig, NoiseSchedule, Dataset) {
        let arch = ArchSpec::micro();
        let cfg = TrainConfig {
            batch_size: 4,
            total_iters: 3,
            ema_rate: 0.9,
            lr: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let sched = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let ds = generate_dataset(&SceneSpec {
            resolution: 8,
            num_images: 6,
            ..SceneSpec::default()
        })
        .unwrap();
        (arch, cfg, sched, ds)
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(1, s, 2, 10)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(1, 7, 3, 10), batch_indices(1, 7, 3, 10));
    }

    #[test]
    fn zero_lr_loss_matches_independent_mse() {
        let (arch, mut cfg, sched, ds) = micro_setup();
        cfg.lr = 0.0;
        let mut st = TrainState::new(&arch, Variant::Shared, &cfg).unwrap();
        let batch = ds.batch(&[0, 1, 2, 3], None, DType::F32).unwrap();
        let before: Vec<f32> = st.params().iter().next().unwrap().1.flatten_all().unwrap().to_vec1().unwrap();
        let (t, eps) = st.draws(0, 4, sched.steps()).unwrap();
        let x_t = forward_diffuse(&batch, &t, &eps, &sched).unwrap();
        let pred = st.model().predict_noise(&x_t, &t).unwrap().eps;
        let e = eps.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let p = pred.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let mse = e.iter().zip(&p).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / e.len() as f64;
        let report = st.train_step(&batch, &sched).unwrap();
        assert!((report.loss - mse).abs() <= 1e-6 * mse, "{} vs {mse}", report.loss);
        let after: Vec<f32> = st.params().iter().next().unwrap().1.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_ema_rate_tracks_weights() {
        let (arch, mut cfg, sched, ds) = micro_setup();
        cfg.ema_rate = 0.0;
        let mut st = TrainState::new(&arch, Variant::Shared, &cfg).unwrap();
        let batch = ds.batch(&[0, 1, 2, 3], None, DType::F32).unwrap();
        st.train_step(&batch, &sched).unwrap();
        for ((_, w), (_, e)) in st.params().iter().zip(st.ema_params().iter()) {
            let w = w.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let e = e.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(w, e);
        }
    }

    #[test]
    fn ema_contracts_geometrically_when_weights_freeze() {
        let (arch, mut cfg, sched, ds) = micro_setup();
        cfg.lr = 1e-2;
        let mut st = TrainState::with_dtype(&arch, Variant::Shared, &cfg, DType::F64).unwrap();
        let batch = ds.batch(&[0, 1, 2, 3], None, DType::F64).unwrap();
        st.train_step(&batch, &sched).unwrap();
        st.config.lr = 0.0;
        let gap = |st: &TrainState| -> f64 {
            st.params()
                .iter()
                .zip(st.ema_params().iter())
                .map(|((_, w), (_, e))| -> f64 {
                    (w.as_tensor() - e.as_tensor()).unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap()
                })
                .sum()
        };
        let mut prev = gap(&st);
        assert!(prev > 0.0);
        for _ in 0..3 {
            st.train_step(&batch, &sched).unwrap();
            let g = gap(&st);
            assert!((g / prev - cfg.ema_rate).abs() < 1e-9, "ratio {}", g / prev);
            prev = g;
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let (arch, cfg, sched, ds) = micro_setup();
        let st = TrainState::with_dtype(&arch, Variant::Shared, &cfg, DType::F64).unwrap();
        let batch = ds.batch(&[0, 1, 2, 3], None, DType::F64).unwrap();
        let (t, eps) = st.draws(0, 4, sched.steps()).unwrap();
        let (_, grads) = st.gradients(&batch, &t, &eps, &sched).unwrap();
        for ((name, _), g) in st.params().iter().zip(grads) {
            let g = g.unwrap_or_else(|| panic!("{name} has no gradient"));
            let n: f64 = g.abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
            assert!(n > 0.0, "{name} has a zero gradient");
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (arch, mut cfg, _, _) = micro_setup();
        cfg.ema_rate = 1.0;
        assert!(TrainState::new(&arch, Variant::Shared, &cfg).is_err());
        cfg.ema_rate = 0.5;
        cfg.batch_size = 0;
        assert!(TrainState::new(&arch, Variant::Shared, &cfg).is_err());
    }

    #[test]
    fn micro_batches_reproduce_full_batch_gradients() {
        let (arch, cfg, sched, ds) = micro_setup();
        let full = TrainState::with_dtype(&arch, Variant::Shared, &cfg, DType::F64).unwrap();
        let mut split_cfg = cfg.clone();
        split_cfg.micro_batch = Some(3);
        let split = TrainState::with_dtype(&arch, Variant::Shared, &split_cfg, DType::F64).unwrap();
        let batch = ds.batch(&[0, 1, 2, 3, 4], None, DType::F64).unwrap();
        let (t, eps) = full.draws(0, 5, sched.steps()).unwrap();
        let (la, ga) = full.accumulated_gradients(&batch, &t, &eps, &sched).unwrap();
        let (lb, gb) = split.accumulated_gradients(&batch, &t, &eps, &sched).unwrap();
        assert!((la - lb).abs() < 1e-12 * la);
        for (a, b) in ga.into_iter().zip(gb) {
            let (a, b) = (a.unwrap(), b.unwrap());
            let d: f64 = (&a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            let m: f64 = a.abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert!(d <= 1e-10 * m.max(1e-30), "{d} vs {m}");
        }
    }

    #[test]
    fn clipping_bounds_the_update() {
        let (arch, mut cfg, sched, ds) = micro_setup();
        cfg.grad_clip_norm = Some(1e-3);
        let mut st = TrainState::new(&arch, Variant::Shared, &cfg).unwrap();
        let batch = ds.batch(&[0, 1, 2, 3], None, DType::F32).unwrap();
        assert!(st.train_step(&batch, &sched).unwrap().loss.is_finite());
    }

    #[test]
    fn loop_without_directory_runs_all_steps() {
        let (arch, cfg, sched, ds) = micro_setup();
        let out = train_loop(&arch, Variant::Shared, &cfg, &ds, &sched, &RunDir::default()).unwrap();
        assert_eq!(out.state.step, 3);
        assert_eq!(out.losses.iter().map(|l| l.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (arch, cfg, sched, _) = micro_setup();
        let err = train_loop(&arch, Variant::Shared, &cfg, &Dataset::empty(8), &sched, &RunDir::default());
        assert!(matches!(err, Err(Error::Config { .. })));
    }
}

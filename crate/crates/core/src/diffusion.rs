//! DDPM numerics: noise schedules, forward noising, the ancestral reverse
//! update and timestep sampling.
//!
//! Timesteps are 1-indexed at the API (`1..=T`); tables are stored 0-indexed.

use candle_core::{DType, Device, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Reverse-step noise scale choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `sigma_t^2 = beta_t`.
    #[default]
    Beta,
    /// `sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    Posterior,
}

/// Precomputed per-step tables. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    sigma_mode: SigmaMode,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::linear_with_sigma(steps, beta_start, beta_end, SigmaMode::Beta)
    }

    pub fn linear_with_sigma(
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        sigma_mode: SigmaMode,
    ) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config("diffusion.T", format!("must be >= 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::config(
                "diffusion.beta_start",
                format!("must lie in (0, 1), got {beta_start}"),
            ));
        }
        if !(beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::config(
                "diffusion.beta_end",
                format!("must lie in [beta_start, 1), got {beta_end}"),
            ));
        }
        let last = (steps - 1) as f64;
        let betas = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / last)
            .collect();
        Self::from_betas(betas, sigma_mode)
    }

    /// Schedule from an explicit beta table (any length >= 1).
    pub fn from_betas(beta: Vec<f64>, sigma_mode: SigmaMode) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::config("diffusion.T", "must be >= 1"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config("diffusion.beta", format!("entry {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0f64;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = (0..beta.len())
            .map(|i| match sigma_mode {
                SigmaMode::Beta => beta[i].sqrt(),
                SigmaMode::Posterior => {
                    let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                    ((1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
                }
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
            sigma_mode,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Range {
                what: "t",
                value: t as i64,
                range: format!("[1, {}]", self.steps()),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.index(t)?])
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_table(&self) -> &[f64] {
        &self.beta
    }

    /// One-step segmentation timestep: 30 at T=1000, scaled linearly, at least 1.
    pub fn default_segmentation_t(&self) -> usize {
        ((30.0 * self.steps() as f64 / 1000.0).round() as usize).max(1)
    }
}

/// Terminal `alpha_bar` of the 1000-step linear schedule (1e-4 .. 0.02).
pub fn reference_terminal_alpha_bar() -> f64 {
    let mut acc = 1.0f64;
    for i in 0..1000 {
        acc *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
    }
    acc
}

/// `beta_end` for which a `steps`-long linear schedule starting at
/// `beta_start` ends at `target` cumulative signal level.
pub fn matched_beta_end(steps: usize, beta_start: f64, target: f64) -> Result<f64> {
    let terminal = |end: f64| -> f64 {
        let last = (steps - 1) as f64;
        (0..steps)
            .map(|i| 1.0 - (beta_start + (end - beta_start) * i as f64 / last))
            .product()
    };
    if steps < 2 {
        return Err(Error::config("diffusion.T", "must be >= 2"));
    }
    let (mut lo, mut hi) = (beta_start, 0.999);
    if terminal(lo) < target {
        return Err(Error::config(
            "diffusion.beta_start",
            format!("too large to reach terminal alpha_bar {target} in {steps} steps"),
        ));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if terminal(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Per-element timesteps, each in `[1, T]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timesteps(Vec<usize>);

impl Timesteps {
    pub fn new(values: Vec<usize>, steps: usize) -> Result<Self> {
        if let Some(&t) = values.iter().find(|&&t| t == 0 || t > steps) {
            return Err(Error::Range {
                what: "t",
                value: t as i64,
                range: format!("[1, {steps}]"),
            });
        }
        Ok(Self(values))
    }

    pub fn uniform(value: usize, batch: usize, steps: usize) -> Result<Self> {
        Self::new(vec![value; batch], steps)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn per_sample(values: impl Iterator<Item = f64>, dtype: DType) -> Result<Tensor> {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    Ok(Tensor::from_vec(v, (n, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
}

fn check_same_shape(what: &str, expected: &Tensor, got: &Tensor) -> Result<()> {
    if expected.dims() != got.dims() {
        return Err(Error::Shape {
            what: what.to_string(),
            expected: expected.dims().to_vec(),
            got: got.dims().to_vec(),
        });
    }
    Ok(())
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`, each batch element at its own `t`.
pub fn forward_diffuse(
    x0: &Tensor,
    t: &Timesteps,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    check_same_shape("noise", x0, eps)?;
    let batch = x0.dims().first().copied().unwrap_or(0);
    if x0.rank() != 4 || t.len() != batch {
        return Err(Error::Shape {
            what: "timesteps".into(),
            expected: vec![batch],
            got: vec![t.len()],
        });
    }
    let abar = t
        .as_slice()
        .iter()
        .map(|&s| schedule.alpha_bar(s))
        .collect::<Result<Vec<_>>>()?;
    let signal = per_sample(abar.iter().map(|a| a.sqrt()), x0.dtype())?;
    let noise = per_sample(abar.iter().map(|a| (1.0 - a).sqrt()), x0.dtype())?;
    Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

/// Ancestral update `x_{t-1}` from `x_t` given the predicted noise.
///
/// `z` is the fresh Gaussian draw; `None` means zero. At `t = 1` a nonzero `z`
/// is rejected.
pub fn reverse_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    z: Option<&Tensor>,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    check_same_shape("predicted noise", x_t, eps_hat)?;
    let alpha = schedule.alpha(t)?;
    let alpha_bar = schedule.alpha_bar(t)?;
    let coef = (1.0 - alpha) / (1.0 - alpha_bar).sqrt();
    let mean = (x_t - eps_hat.affine(coef, 0.0)?)?.affine(1.0 / alpha.sqrt(), 0.0)?;
    match z {
        None => Ok(mean),
        Some(z) => {
            check_same_shape("reverse noise", x_t, z)?;
            if t == 1 {
                let peak = z.abs()?.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                if peak != 0.0 {
                    return Err(Error::Contract(
                        "reverse step at t = 1 must not add noise".into(),
                    ));
                }
                return Ok(mean);
            }
            Ok((mean + z.affine(schedule.sigma(t)?, 0.0)?)?)
        }
    }
}

/// I.i.d. uniform timesteps in `[1, T]`.
pub fn sample_timesteps(batch: usize, steps: usize, rng: &mut Rng) -> Result<Timesteps> {
    if batch == 0 {
        return Err(Error::config("train.batch_size", "must be >= 1"));
    }
    if steps == 0 {
        return Err(Error::config("diffusion.T", "must be >= 1"));
    }
    let v = (0..batch).map(|_| rng.random_range(1..=steps)).collect();
    Timesteps::new(v, steps)
}

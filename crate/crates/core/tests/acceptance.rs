//! End-to-end acceptance checks, one status line per criterion.
//!
//! Criteria 1-4 and 9 run on every `cargo test`. Criteria 5-8 need hours of
//! training at the desk scale and only run when `FACDIFF_LONG=1` is set (or
//! `--ignored` / `--include-ignored` is passed); otherwise they report
//! `NOT RUN` with a runtime estimate measured on this machine.
//! `FACDIFF_CRITERIA=5,7` restricts the run to the listed criteria.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use facdiff::checkpoint;
use facdiff::config::RunConfig;
use facdiff::data::{generate_dataset, Dataset, SceneSpec};
use facdiff::diffusion::{forward_diffuse, reverse_step, NoiseSchedule, Timesteps};
use facdiff::pipeline::{self, Inference};
use facdiff::rng;
use facdiff::trainer::{latest_checkpoint, train_loop, train_loop_until, RunDir, TrainConfig, TrainState};
use facdiff::unet::{downsample_mask, ArchSpec, FactorizedUnet, MaskStack, Variant};
use rand::seq::SliceRandom;
use rand::Rng as _;

type Check = std::result::Result<String, String>;

/// Number, name, body, and whether it needs the long-running mode.
type Criterion = (u32, &'static str, fn() -> Check, bool);

enum Status {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(limit: Duration, took: Duration) -> std::result::Result<(), String> {
    ensure(took < limit, || format!("took {:.1} s, limit {:.0} s", took.as_secs_f64(), limit.as_secs_f64()))
}

fn scene(resolution: usize, n: usize, seed: u64) -> Dataset {
    generate_dataset(&SceneSpec {
        resolution,
        num_images: n,
        seed,
        ..SceneSpec::default()
    })
    .expect("scene spec is valid")
}

fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

// ---------------------------------------------------------------- 1

/// Double-double value `hi + lo`, about 106 bits of mantissa.
#[derive(Clone, Copy)]
struct Dd(f64, f64);

impl Dd {
    /// Exact `1 - b` by the two-sum algorithm.
    fn one_minus(b: f64) -> Dd {
        let nb = -b;
        let s = 1.0 + nb;
        let v = s - 1.0;
        let err = (1.0 - (s - v)) + (nb - v);
        Dd(s, err)
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.0 * o.0;
        let e = self.0.mul_add(o.0, -p) + (self.0 * o.1 + self.1 * o.0);
        let hi = p + e;
        Dd(hi, e - (hi - p))
    }

    fn value(self) -> f64 {
        self.0 + self.1
    }
}

fn oracle_alpha_bar(steps: usize, b0: f64, b1: f64) -> Vec<f64> {
    let mut acc = Dd(1.0, 0.0);
    (0..steps)
        .map(|i| {
            let beta = b0 + (b1 - b0) * i as f64 / (steps - 1) as f64;
            acc = acc.mul(Dd::one_minus(beta));
            acc.value()
        })
        .collect()
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (steps, b0, b1) in [(1000, 1e-4, 0.02), (200, 1e-4, 0.1), (10, 1e-3, 0.2)] {
        let s = NoiseSchedule::linear(steps, b0, b1).map_err(e2s)?;
        let oracle = oracle_alpha_bar(steps, b0, b1);
        for (t, want) in oracle.iter().enumerate() {
            let got = s.alpha_bar(t + 1).map_err(e2s)?;
            worst = worst.max(((got - want) / want).abs());
        }
    }
    ensure(worst <= 1e-10, || format!("alpha_bar relative error {worst:.2e} > 1e-10"))?;
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).map_err(e2s)?;
    let terminal = s.alpha_bar(1000).map_err(e2s)?;
    ensure((terminal - 4.0e-5).abs() < 0.05 * 4.0e-5, || {
        format!("alpha_bar[1000] = {terminal:.3e}, expected about 4.0e-5")
    })?;

    // Monte-Carlo moments of q(x_t | x_0) at 10^4 samples.
    let n = 10_000;
    let x0v = 0.7f64;
    let mut worst_mc = 0.0f64;
    for t in [1usize, 10, 100, 500, 1000] {
        let x0 = Tensor::full(x0v, (n, 1, 1, 1), &Device::Cpu).map_err(e2s)?;
        let mut r = rng::stream(1, "mc", t as u64);
        let eps = rng::normal_tensor(&mut r, &[n, 1, 1, 1], DType::F64).map_err(e2s)?;
        let ts = Timesteps::uniform(t, n, 1000).map_err(e2s)?;
        let xt = to_vec(&forward_diffuse(&x0, &ts, &eps, &s).map_err(e2s)?);
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t).map_err(e2s)?;
        let (m, v) = (ab.sqrt() * x0v, 1.0 - ab);
        // The mean is judged on the scale of the spread when it is near zero.
        let mean_err = (mean - m).abs() / m.abs().max(v.sqrt());
        let var_err = (var / v - 1.0).abs();
        worst_mc = worst_mc.max(mean_err).max(var_err);
    }
    ensure(worst_mc <= 0.05, || format!("Monte-Carlo moment error {worst_mc:.3} > 5%"))?;

    // Reverse update against the scalar formula built from oracle tables.
    let oracle = oracle_alpha_bar(1000, 1e-4, 0.02);
    let mut worst_rev = 0.0f64;
    for (t, x, e, z) in [(100usize, 0.3, -0.4, 0.5), (1000, -1.2, 0.8, -0.1), (2, 0.05, 1.5, 2.0), (1, 0.9, 0.1, 0.0)] {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
        let alpha = 1.0 - beta;
        let want = (x - beta / (1.0 - oracle[t - 1]).sqrt() * e) / alpha.sqrt() + beta.sqrt() * z;
        let xt = Tensor::full(x, (1, 1, 1, 1), &Device::Cpu).map_err(e2s)?;
        let eh = Tensor::full(e, (1, 1, 1, 1), &Device::Cpu).map_err(e2s)?;
        let zt = Tensor::full(z, (1, 1, 1, 1), &Device::Cpu).map_err(e2s)?;
        let got = to_vec(&reverse_step(&xt, &eh, t, Some(&zt), &s).map_err(e2s)?)[0];
        worst_rev = worst_rev.max((got - want).abs());
    }
    ensure(worst_rev <= 1e-6, || format!("reverse step error {worst_rev:.2e} > 1e-6"))?;
    let took = start.elapsed();
    within(Duration::from_secs(10), took)?;
    Ok(format!(
        "cumprod rel err {worst:.1e}, MC moment err {:.2}%, reverse err {worst_rev:.1e}, {:.2} s",
        worst_mc * 100.0,
        took.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 2

fn check_masks(m: &MaskStack, arch: &ArchSpec, worst: &mut f64) -> std::result::Result<(), String> {
    for s in 0..arch.num_stages() {
        let level = MaskStack::new(downsample_mask(m.tensor(), 1 << s).map_err(e2s)?).map_err(e2s)?;
        let err = level.max_simplex_error().map_err(e2s)?;
        let (lo, hi) = level.value_range().map_err(e2s)?;
        *worst = worst.max(err);
        ensure(err <= 1e-5 && lo >= 0.0 && hi <= 1.0, || {
            format!("level {s}: sum error {err:.2e}, range [{lo}, {hi}]")
        })?;
    }
    Ok(())
}

fn masks_at(model: &FactorizedUnet, x0: &Tensor, s: &NoiseSchedule, arch: &ArchSpec, worst: &mut f64) -> std::result::Result<(), String> {
    let b = x0.dims()[0];
    for t in [1, s.steps() / 2, s.steps()] {
        let mut r = rng::stream(3, "mask-check", t as u64);
        let eps = rng::normal_tensor(&mut r, x0.dims(), DType::F32).map_err(e2s)?;
        let ts = Timesteps::uniform(t, b, s.steps()).map_err(e2s)?;
        let xt = forward_diffuse(x0, &ts, &eps, s).map_err(e2s)?;
        let pred = model.predict_noise(&xt, &ts).map_err(e2s)?;
        check_masks(&pred.masks, arch, worst)?;
        if model.variant() != Variant::Plain {
            check_masks(&model.masks_only(&xt, &ts).map_err(e2s)?, arch, worst)?;
        }
    }
    Ok(())
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let s = NoiseSchedule::linear(200, 1e-4, 0.1).map_err(e2s)?;
    let cfg = TrainConfig::default();
    let desk = ArchSpec::desk();
    let data = scene(32, 4, 5);
    let x0 = data.all(DType::F32).map_err(e2s)?;
    let variants = Variant::ABLATIONS.into_iter().chain([Variant::Plain]);
    for v in variants {
        let st = TrainState::new(&desk, v, &cfg).map_err(e2s)?;
        masks_at(st.model(), &x0, &s, &desk, &mut worst).map_err(|e| format!("fresh {}: {e}", v.name()))?;
    }
    // Trained models: a few aggressive steps move the weights far from init.
    let micro = ArchSpec::micro();
    let small = scene(8, 16, 6);
    let xs = small.all(DType::F32).map_err(e2s)?;
    let tcfg = TrainConfig {
        lr: 1e-2,
        ema_rate: 0.5,
        batch_size: 8,
        total_iters: 25,
        ..TrainConfig::default()
    };
    for v in Variant::ABLATIONS {
        let out = train_loop(&micro, v, &tcfg, &small, &s, &RunDir::default()).map_err(e2s)?;
        for model in [out.state.model(), out.state.ema_model()] {
            masks_at(model, &xs, &s, &micro, &mut worst).map_err(|e| format!("trained {}: {e}", v.name()))?;
        }
    }
    let took = start.elapsed();
    within(Duration::from_secs(30), took)?;
    Ok(format!("max sum-to-one error {worst:.1e}, all values in [0, 1], {:.1} s", took.as_secs_f64()))
}

// ---------------------------------------------------------------- 3

struct GradCheck {
    checked: usize,
    worst: f64,
}

fn perturbed(v: &Tensor, idx: usize, delta: f64) -> Tensor {
    let mut data = to_vec(v);
    data[idx] += delta;
    Tensor::from_vec(data, v.dims(), &Device::Cpu).unwrap()
}

fn loss_value(st: &TrainState, x0: &Tensor, t: &Timesteps, eps: &Tensor, s: &NoiseSchedule) -> f64 {
    st.loss(x0, t, eps, s).unwrap().to_scalar::<f64>().unwrap()
}

fn grad_check(variant: Variant, per_subnet: usize) -> std::result::Result<GradCheck, String> {
    let arch = ArchSpec::micro();
    let s = NoiseSchedule::linear(10, 1e-3, 0.2).map_err(e2s)?;
    let cfg = TrainConfig {
        seed: 21,
        ..TrainConfig::default()
    };
    let st = TrainState::with_dtype(&arch, variant, &cfg, DType::F64).map_err(e2s)?;
    let data = scene(8, 2, 9);
    let x0 = data.all(DType::F64).map_err(e2s)?;
    let (t, eps) = st.draws(0, 2, 10).map_err(e2s)?;
    let (_, grads) = st.gradients(&x0, &t, &eps, &s).map_err(e2s)?;
    let names: Vec<String> = st.params().names().to_vec();

    // Large enough that f64 roundoff in the loss stays far below the tolerance.
    let h = 1e-4;
    let mut r = rng::stream(77, "grad-check", variant as u64);
    let mut out = GradCheck { checked: 0, worst: 0.0 };
    for prefix in ["enc.", "mid.", "mask.", "dec"] {
        let mut members: Vec<usize> = (0..names.len()).filter(|&i| names[i].starts_with(prefix)).collect();
        if members.is_empty() {
            ensure(prefix == "mask." && variant == Variant::Plain, || format!("no parameters under {prefix}"))?;
            continue;
        }
        members.shuffle(&mut r);
        // Round-robin over tensors so biases and norm scales are covered too.
        let mut picks = Vec::new();
        let mut k = 0;
        while picks.len() < per_subnet {
            let pi = members[k % members.len()];
            let n = st.params().get(&names[pi]).unwrap().as_tensor().elem_count();
            let e = r.random_range(0..n);
            if !picks.contains(&(pi, e)) {
                picks.push((pi, e));
            }
            k += 1;
        }
        for (pi, e) in picks {
            let var = st.params().get(&names[pi]).unwrap();
            let orig = var.as_tensor().copy().map_err(e2s)?;
            var.set(&perturbed(&orig, e, h)).map_err(e2s)?;
            let up = loss_value(&st, &x0, &t, &eps, &s);
            var.set(&perturbed(&orig, e, -h)).map_err(e2s)?;
            let down = loss_value(&st, &x0, &t, &eps, &s);
            var.set(&orig).map_err(e2s)?;
            let fd = (up - down) / (2.0 * h);
            let an = match &grads[pi] {
                Some(g) => to_vec(g)[e],
                None => 0.0,
            };
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-7);
            if rel > out.worst {
                out.worst = rel;
            }
            ensure(rel <= 1e-3, || {
                format!("{} {}[{e}]: analytic {an:.6e}, numeric {fd:.6e}", variant.name(), names[pi])
            })?;
            out.checked += 1;
        }
    }
    Ok(out)
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for v in Variant::ABLATIONS.into_iter().chain([Variant::Plain]) {
        let g = grad_check(v, 24)?;
        checked += g.checked;
        worst = worst.max(g.worst);
    }
    let took = start.elapsed();
    within(Duration::from_secs(300), took)?;
    Ok(format!(
        "{checked} parameters over 5 variants, worst relative error {worst:.1e}, {:.1} s",
        took.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 4

fn bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect()
}

fn criterion_4() -> Check {
    let arch = ArchSpec {
        num_regions: 1,
        ..ArchSpec::micro()
    };
    let s = NoiseSchedule::linear(10, 1e-3, 0.2).map_err(e2s)?;
    let cfg = TrainConfig {
        seed: 4,
        lr: 1e-3,
        batch_size: 8,
        total_iters: 30,
        ..TrainConfig::default()
    };
    let fac = TrainState::new(&arch, Variant::Shared, &cfg).map_err(e2s)?;
    let plain = TrainState::new(&arch, Variant::Plain, &cfg).map_err(e2s)?;
    let data = scene(8, 16, 12);
    let x0 = data.all(DType::F32).map_err(e2s)?;
    let (t, eps) = fac.draws(0, x0.dims()[0], 10).map_err(e2s)?;
    let xt = forward_diffuse(&x0, &t, &eps, &s).map_err(e2s)?;
    let a = fac.model().predict_noise(&xt, &t).map_err(e2s)?.eps;
    let b = plain.model().predict_noise(&xt, &t).map_err(e2s)?.eps;
    ensure(bits(&a) == bits(&b), || "K = 1 prediction differs from the plain U-Net".into())?;
    let h_enc = fac.model().encode(&xt, &t).map_err(e2s)?;
    let h_mid = fac.model().mid(&h_enc, &t).map_err(e2s)?;
    let c = fac.model().decode_plain(&h_mid, &h_enc, &t).map_err(e2s)?;
    ensure(bits(&a) == bits(&c), || "K = 1 prediction differs from one ungated decoder pass".into())?;

    let run_fac = train_loop(&arch, Variant::Shared, &cfg, &data, &s, &RunDir::default()).map_err(e2s)?;
    let run_plain = train_loop(&arch, Variant::Plain, &cfg, &data, &s, &RunDir::default()).map_err(e2s)?;
    let lf: Vec<u64> = run_fac.losses.iter().map(|l| l.1.to_bits()).collect();
    let lp: Vec<u64> = run_plain.losses.iter().map(|l| l.1.to_bits()).collect();
    ensure(lf.len() == 30 && lf == lp, || "loss curves differ".into())?;
    for (name, v) in run_plain.state.params().iter() {
        let other = run_fac.state.params().get(name).ok_or_else(|| format!("missing {name}"))?;
        ensure(bits(v.as_tensor()) == bits(other.as_tensor()), || format!("{name} diverged"))?;
    }
    let first = run_fac.losses[0].1;
    let last = run_fac.losses[29].1;
    Ok(format!("bitwise equal predictions and 30-step loss curves ({first:.4} -> {last:.4})"))
}

// ---------------------------------------------------------------- 9

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn csv_losses(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("metrics.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

fn criterion_9() -> Check {
    let arch = ArchSpec::micro();
    let mut rc = RunConfig {
        seed: 17,
        model: facdiff::config::ModelSection::from_arch(&arch, Variant::Shared),
        ..RunConfig::default()
    };
    rc.diffusion.steps = 20;
    rc.data.scene.resolution = 8;
    rc.train = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        total_iters: 12,
        checkpoint_every: 4,
        micro_batch: Some(3),
        flip: true,
        ..TrainConfig::default()
    };
    let cfg = rc.train_config();
    let s = rc.schedule().map_err(e2s)?;
    let data = scene(8, 24, 13);
    let (train, held) = data.split(8);
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|n| tmp.path().join(n)).collect();

    let a = train_loop(&arch, Variant::Shared, &cfg, &train, &s, &RunDir::new(&dirs[0])).map_err(e2s)?;
    train_loop(&arch, Variant::Shared, &cfg, &train, &s, &RunDir::new(&dirs[1])).map_err(e2s)?;
    let (fa, fb) = (files(&dirs[0].join("checkpoints")), files(&dirs[1].join("checkpoints")));
    ensure(fa.len() == 4 && fa == fb, || "repeated runs wrote different checkpoints".into())?;

    let mut reports = Vec::new();
    for d in &dirs[..2] {
        let ck = latest_checkpoint(&d.join("checkpoints")).map_err(e2s)?.unwrap();
        let inf = pipeline::open_checkpoint(&ck, &rc).map_err(e2s)?;
        let (rep, _) = pipeline::evaluate_segmentation(&inf, &held, &rc).map_err(e2s)?;
        reports.push(rep.to_json());
    }
    ensure(reports[0] == reports[1], || "metric reports differ".into())?;

    let bytes = &fa.last().unwrap().1;
    let back = checkpoint::from_bytes(bytes, Some(&arch)).map_err(e2s)?;
    let again = checkpoint::to_bytes(&back.state, back.schedule.as_ref()).map_err(e2s)?;
    ensure(&again == bytes, || "save/load round trip changed the bytes".into())?;

    let first = train_loop_until(&arch, Variant::Shared, &cfg, &train, &s, &RunDir::new(&dirs[2]), 6).map_err(e2s)?;
    ensure(first.state.step == 6, || "interrupted run did not stop at step 6".into())?;
    let rest = train_loop(&arch, Variant::Shared, &cfg, &train, &s, &RunDir::new(&dirs[2])).map_err(e2s)?;
    ensure(rest.resumed_from == Some(6), || format!("resumed from {:?}, expected step 6", rest.resumed_from))?;
    let mut joined = first.losses.clone();
    joined.extend(&rest.losses);
    let straight: Vec<(u64, u64)> = a.losses.iter().map(|l| (l.0, l.1.to_bits())).collect();
    let resumed: Vec<(u64, u64)> = joined.iter().map(|l| (l.0, l.1.to_bits())).collect();
    ensure(straight == resumed, || "resumed loss sequence differs".into())?;
    ensure(csv_losses(&dirs[0]) == csv_losses(&dirs[2]), || "metrics.csv differs after resume".into())?;
    ensure(files(&dirs[0].join("checkpoints")).last() == files(&dirs[2].join("checkpoints")).last(), || {
        "final checkpoint differs after resume".into()
    })?;
    Ok("identical checkpoints and reports, byte-exact round trip, resume matches uninterrupted run".into())
}

// ---------------------------------------------------------------- 5-8

fn long_dir() -> PathBuf {
    std::env::var_os("FACDIFF_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

/// The default configuration is the desk model: 4000 scenes, T = 200,
/// batch 64 accumulated in pieces of 16, 20k steps.
fn desk_config() -> RunConfig {
    RunConfig::default()
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        lr: 2e-4,
        batch_size: 16,
        total_iters: 2000,
        checkpoint_every: 250,
        micro_batch: Some(16),
        ..TrainConfig::default()
    }
}

fn one_step_seconds() -> f64 {
    let cfg = overfit_config();
    let s = desk_config().schedule().unwrap();
    let data = scene(32, 16, 1);
    let x = data.all(DType::F32).unwrap();
    let mut st = TrainState::new(&ArchSpec::desk(), Variant::Shared, &cfg).unwrap();
    let t0 = Instant::now();
    st.train_step(&x, &s).unwrap();
    t0.elapsed().as_secs_f64()
}

fn criterion_5() -> Check {
    let start = Instant::now();
    let cfg = overfit_config();
    let s = desk_config().schedule().map_err(e2s)?;
    let data = scene(32, 16, 1);
    let out = train_loop(&ArchSpec::desk(), Variant::Shared, &cfg, &data, &s, &RunDir::new(long_dir().join("overfit")))
        .map_err(e2s)?;
    let took = start.elapsed();
    // Trailing mean over 25 steps so one easy draw of timesteps cannot pass.
    let window = 25;
    let hit = out
        .losses
        .windows(window)
        .find(|w| w.iter().map(|l| l.1).sum::<f64>() / (window as f64) < 0.05)
        .map(|w| w[window - 1].0);
    let hit = hit.ok_or_else(|| {
        let tail = &out.losses[out.losses.len().saturating_sub(window)..];
        format!(
            "loss never below 0.05 (last mean {:.4})",
            tail.iter().map(|l| l.1).sum::<f64>() / tail.len().max(1) as f64
        )
    })?;
    within(Duration::from_secs(30 * 60), took)?;
    Ok(format!("loss below 0.05 at step {hit}, {:.0} s", took.as_secs_f64()))
}

fn emergence_run() -> std::result::Result<(RunConfig, Dataset, Dataset, PathBuf), String> {
    let rc = desk_config();
    let data = pipeline::load_dataset(&rc, None).map_err(e2s)?;
    let (train, held) = data.split(rc.data.held_out);
    let dir = long_dir().join("emergence");
    train_loop(&rc.arch(), Variant::Shared, &rc.train_config(), &train, &rc.schedule().map_err(e2s)?, &RunDir::new(&dir))
        .map_err(e2s)?;
    let ck = latest_checkpoint(&dir.join("checkpoints"))
        .map_err(e2s)?
        .ok_or("no checkpoint written")?;
    Ok((rc, train, held, ck))
}

fn criterion_6() -> Check {
    let (rc, _, held, ck) = emergence_run()?;
    let inf = pipeline::open_checkpoint(&ck, &rc).map_err(e2s)?;
    let t_seg = rc.eval.t_seg(&inf.schedule);
    let (rep, _) = pipeline::evaluate_segmentation(&inf, &held, &rc).map_err(e2s)?;
    let line = format!("held-out mIoU {:.4}, Acc {:.4} at t_seg {t_seg}, step {}", rep.miou, rep.acc, inf.state.step);
    ensure(rep.miou >= 0.70 && rep.acc >= 0.85, || line.clone())?;
    Ok(line)
}

fn criterion_7() -> Check {
    let (rc, train, _, ck) = emergence_run()?;
    let inf: Inference = pipeline::open_checkpoint(&ck, &rc).map_err(e2s)?;
    let (rep, _) = pipeline::consistency_score(&inf, &train, &rc).map_err(e2s)?;
    let line = format!(
        "consistency {:.4} over {} samples (reference loss {:.4})",
        rep.score, rep.samples, rep.reference_loss
    );
    ensure(rep.score >= 0.80, || line.clone())?;
    Ok(line)
}

fn criterion_8() -> Check {
    let rc = desk_config();
    let data = pipeline::load_dataset(&rc, None).map_err(e2s)?;
    let rep = pipeline::ablate(&rc, &data, Some(&long_dir().join("ablation"))).map_err(e2s)?;
    let shared = rep.row(Variant::Shared).ok_or("missing shared row")?.miou;
    let concat = rep.row(Variant::Concat).ok_or("missing concat row")?.miou;
    let order: Vec<String> = rep.rows.iter().map(|r| format!("{} {:.4}", r.variant.name(), r.miou)).collect();
    // Published full-scale IoU: 56.1 shared, 50.5 concat, 20.7 mask_mid, 20.2 unshared.
    let line = format!("mIoU {} (full-scale reference 56.1 > 50.5 > 20.7 > 20.2)", order.join(", "));
    ensure(shared > concat, || line.clone())?;
    Ok(line)
}

// ---------------------------------------------------------------- driver

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    // Deterministic mode for every criterion.
    std::env::set_var("RAYON_NUM_THREADS", "1");
    let long = std::env::var("FACDIFF_LONG").is_ok_and(|v| v == "1")
        || args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let only: Option<Vec<u32>> = std::env::var("FACDIFF_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());

    let criteria: [Criterion; 9] = [
        (1, "numerics oracles", criterion_1, false),
        (2, "mask invariants", criterion_2, false),
        (3, "gradient check", criterion_3, false),
        (4, "K = 1 equivalence", criterion_4, false),
        (5, "overfit one batch", criterion_5, true),
        (6, "emergent segmentation", criterion_6, true),
        (7, "generation consistency", criterion_7, true),
        (8, "ablation direction", criterion_8, true),
        (9, "determinism and persistence", criterion_9, false),
    ];
    let mut step_seconds: Option<f64> = None;
    let mut failed = 0;
    for (id, name, f, slow) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let status = if slow && !long {
            let sec = *step_seconds.get_or_insert_with(one_step_seconds);
            let hours = |steps: f64| steps * sec / 3600.0;
            let estimate = match id {
                5 => format!("2000 steps at batch 16, about {:.1} h", hours(2000.0)),
                6 => format!("20000 steps at batch 64, about {:.0} h", hours(80_000.0)),
                // A sampling step is about a third of a training step per image.
                7 => format!("needs the criterion 6 model plus 256 samples x 200 steps, about {:.0} h", hours(80_000.0) + hours(256.0 * 200.0 / 48.0)),
                _ => format!("4 variants x 20000 steps at batch 64, about {:.0} h", 4.0 * hours(80_000.0)),
            };
            Status::NotRun(format!("long-running; {estimate} at {sec:.1} s per 16-image step here; set FACDIFF_LONG=1"))
        } else {
            match std::panic::catch_unwind(f) {
                Ok(Ok(msg)) => Status::Pass(msg),
                Ok(Err(msg)) => Status::Fail(msg),
                Err(_) => Status::Fail("panicked".into()),
            }
        };
        let line = match status {
            Status::Pass(m) => format!("PASS ({m})"),
            Status::Fail(m) => {
                failed += 1;
                format!("FAIL ({m})")
            }
            Status::NotRun(m) => format!("NOT RUN ({m})"),
        };
        println!("criterion {id} {name}: {line}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

use std::ffi::{CStr, CString};
use std::ptr;

use candle_core::{DType, Tensor};
use facdiff::checkpoint;
use facdiff::diffusion::NoiseSchedule;
use facdiff::sampler::{generate, segment};
use facdiff::trainer::{TrainConfig, TrainState};
use facdiff::unet::{ArchSpec, Variant};
use facdiff_ffi::*;

fn write_checkpoint(dir: &std::path::Path) -> (std::path::PathBuf, TrainState, NoiseSchedule) {
    let cfg = TrainConfig {
        seed: 11,
        ..TrainConfig::default()
    };
    let state = TrainState::new(&ArchSpec::micro(), Variant::Shared, &cfg).unwrap();
    let sched = NoiseSchedule::linear(6, 1e-3, 0.2).unwrap();
    let path = dir.join("m.ckpt");
    checkpoint::save(&state, Some(&sched), &path).unwrap();
    (path, state, sched)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(facdiff_last_error()) }.to_string_lossy().into_owned()
}

fn load(path: &std::path::Path) -> *mut FacdiffModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { facdiff_model_load(c.as_ptr(), &mut m) }, FacdiffStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn info_reports_the_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _, _) = write_checkpoint(dir.path());
    let m = load(&path);
    let mut info = FacdiffModelInfo::default();
    assert_eq!(unsafe { facdiff_model_info(m, &mut info) }, FacdiffStatus::Ok);
    assert_eq!((info.resolution, info.channels, info.regions, info.diffusion_steps), (8, 3, 2, 6));
    assert_eq!(info.default_t_seg, 1);
    unsafe { facdiff_model_free(m) };
}

#[test]
fn segmentation_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, state, sched) = write_checkpoint(dir.path());
    let m = load(&path);
    let n = 3;
    let images: Vec<f32> = (0..n * 3 * 64).map(|i| ((i * 37 % 200) as f32 / 100.0) - 1.0).collect();
    let mut labels = vec![0u8; n * 64];
    let mut soft = vec![0f32; n * 2 * 64];
    let status = unsafe { facdiff_segment(m, images.as_ptr(), n, 2, 5, labels.as_mut_ptr(), soft.as_mut_ptr()) };
    assert_eq!(status, FacdiffStatus::Ok, "{}", last_error());
    let x = Tensor::from_vec(images, (n, 3, 8, 8), &candle_core::Device::Cpu).unwrap();
    let want = segment(&x, 2, state.ema_model(), &sched, 5).unwrap();
    assert_eq!(labels, want.hard);
    let want_soft: Vec<f32> = want.soft.tensor().to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(soft, want_soft);
    unsafe { facdiff_model_free(m) };
}

#[test]
fn generation_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, state, sched) = write_checkpoint(dir.path());
    let m = load(&path);
    let mut images = vec![0f32; 2 * 3 * 64];
    let mut labels = vec![0u8; 2 * 64];
    let status = unsafe { facdiff_generate(m, 2, 4, images.as_mut_ptr(), labels.as_mut_ptr()) };
    assert_eq!(status, FacdiffStatus::Ok, "{}", last_error());
    let want = generate(2, state.ema_model(), &sched, 4).unwrap();
    let want_images: Vec<f32> = want.images.flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(images, want_images);
    assert_eq!(labels, want.masks.hard);
    assert!(images.iter().all(|v| (-1.0..=1.0).contains(v)));
    unsafe { facdiff_model_free(m) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { facdiff_model_load(missing.as_ptr(), &mut m) }, FacdiffStatus::Io);
    assert!(last_error().contains("none.ckpt"));
    assert!(m.is_null());

    let garbage = dir.path().join("bad.ckpt");
    std::fs::write(&garbage, b"FACDIFF\0\x07\0\0\0").unwrap();
    let c = CString::new(garbage.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { facdiff_model_load(c.as_ptr(), &mut m) }, FacdiffStatus::Io);
    assert!(last_error().contains("version"));

    assert_eq!(unsafe { facdiff_model_load(ptr::null(), &mut m) }, FacdiffStatus::NullPointer);
    let mut info = FacdiffModelInfo::default();
    assert_eq!(unsafe { facdiff_model_info(ptr::null(), &mut info) }, FacdiffStatus::NullPointer);

    let (path, _, _) = write_checkpoint(dir.path());
    let m = load(&path);
    assert!(last_error().is_empty());
    let images = vec![0f32; 3 * 64];
    let mut labels = vec![0u8; 64];
    let status = unsafe { facdiff_segment(m, images.as_ptr(), 1, 99, 0, labels.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(status, FacdiffStatus::Config);
    assert!(last_error().contains("t_seg"));
    unsafe { facdiff_model_free(m) };
    unsafe { facdiff_model_free(ptr::null_mut()) };
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(facdiff_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

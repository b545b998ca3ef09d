use candle_core::{DType, Device, Tensor};
use facdiff::diffusion::NoiseSchedule;
use facdiff::diffusion::Timesteps;
use facdiff::metrics::{confusion, consistency, dice_counts, iou_counts, score, DiceMode, ScoreOptions};
use facdiff::nn::{softmax, ParamStore};
use facdiff::rng;
use facdiff::unet::{ArchSpec, FactorizedUnet, MaskStack, Variant};
use proptest::prelude::*;

const PLANE: usize = 16;

fn labels(k: u8, images: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0..k, images * PLANE)
}

fn relabel(v: &[u8], perm: &[u8]) -> Vec<u8> {
    v.iter().map(|&x| perm[x as usize]).collect()
}

/// True when exactly one bijection reaches the best total overlap.
fn unique_optimum(pred: &[u8], gt: &[u8]) -> bool {
    let c = confusion(pred, gt, 3, 3).unwrap();
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let totals: Vec<u64> = perms.iter().map(|p| (0..3).map(|i| c[i][p[i]]).sum()).collect();
    let best = *totals.iter().max().unwrap();
    totals.iter().filter(|&&t| t == best).count() == 1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_ignore_predicted_channel_names(
        (pred, gt) in (1usize..4).prop_flat_map(|n| (labels(3, n), labels(3, n))),
        perm in Just(vec![0u8, 1, 2]).prop_shuffle(),
    ) {
        let opts = ScoreOptions::all_but_background(3);
        let a = score(&pred, &gt, PLANE, 3, 3, &opts).unwrap();
        let b = score(&relabel(&pred, &perm), &gt, PLANE, 3, 3, &opts).unwrap();
        prop_assert!((a.acc - b.acc).abs() < 1e-12);
        if unique_optimum(&pred, &gt) {
            prop_assert!((a.miou - b.miou).abs() < 1e-12);
            prop_assert!((a.iou - b.iou).abs() < 1e-12);
            prop_assert!((a.dice - b.dice).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_is_a_function_of_iou(inter in 0u64..50, extra_p in 0u64..50, extra_g in 0u64..50) {
        let (p, g) = (inter + extra_p, inter + extra_g);
        let iou = iou_counts(inter, p, g);
        let dice = dice_counts(inter, p, g, DiceMode::Symmetric);
        prop_assert!((dice - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&iou) && (0.0..=1.0).contains(&dice));
    }

    #[test]
    fn consistency_is_symmetric(
        (a, b) in (1usize..4).prop_flat_map(|n| (labels(3, n), labels(3, n))),
    ) {
        let ab = consistency(&a, &b, PLANE, 3, 3).unwrap();
        let ba = consistency(&b, &a, PLANE, 3, 3).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= 1.0 / 3.0 - 1e-12, "a best bijection beats a third: {ab}");
    }

    #[test]
    fn perfect_prediction_up_to_renaming(
        gt in (1usize..4).prop_flat_map(|n| labels(3, n)),
        perm in Just(vec![0u8, 1, 2]).prop_shuffle(),
    ) {
        let r = score(&relabel(&gt, &perm), &gt, PLANE, 3, 3, &ScoreOptions::all_but_background(3)).unwrap();
        prop_assert_eq!(r.acc, 1.0);
        prop_assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn mask_labels_ignore_per_pixel_logit_shifts(
        logits in prop::collection::vec(-8.0f32..8.0, 2 * 3 * 4 * 4),
        shift in prop::collection::vec(-50.0f32..50.0, 2 * 4 * 4),
    ) {
        let dev = Device::Cpu;
        let l = Tensor::from_vec(logits, (2, 3, 4, 4), &dev).unwrap();
        let s = Tensor::from_vec(shift, (2, 1, 4, 4), &dev).unwrap();
        let a = MaskStack::new(softmax(&l, 1).unwrap()).unwrap();
        let b = MaskStack::new(softmax(&l.broadcast_add(&s).unwrap(), 1).unwrap()).unwrap();
        let d = (a.tensor() - b.tensor()).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap();
        prop_assert!(d.to_scalar::<f32>().unwrap() < 1e-5);
        // Labels agree except at numerical near-ties.
        let (ha, hb) = (a.hard_labels().unwrap(), b.hard_labels().unwrap());
        let va: Vec<f32> = a.tensor().permute((0, 2, 3, 1)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (px, (x, y)) in ha.iter().zip(&hb).enumerate() {
            if x != y {
                let p = &va[px * 3..px * 3 + 3];
                prop_assert!((p[*x as usize] - p[*y as usize]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn linear_schedules_keep_their_invariants(steps in 2usize..600, b0 in 1e-5f64..0.05, width in 0.0f64..0.5) {
        let b1 = (b0 + width).min(0.999);
        let s = NoiseSchedule::linear(steps, b0, b1).unwrap();
        let mut prev_beta = 0.0;
        let mut prev_bar = 1.0;
        for t in 1..=steps {
            let (beta, bar) = (s.beta(t).unwrap(), s.alpha_bar(t).unwrap());
            prop_assert!(beta > 0.0 && beta < 1.0 && beta >= prev_beta);
            prop_assert!(bar > 0.0 && bar < prev_bar);
            prop_assert!(s.sigma(t).unwrap() >= 0.0);
            prop_assert!((s.alpha(t).unwrap() - (1.0 - beta)).abs() < 1e-15);
            prev_beta = beta;
            prev_bar = bar;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn masks_of_random_models_are_partitions(
        seed in any::<u64>(),
        k in 1usize..5,
        variant in prop::sample::select(Variant::ABLATIONS.to_vec()),
        scale in 0.1f64..20.0,
    ) {
        let arch = ArchSpec { num_regions: k, ..ArchSpec::micro() };
        let mut store = ParamStore::new(DType::F32, seed);
        let model = FactorizedUnet::build(&arch, variant, &mut store, false).unwrap();
        let mut r = rng::stream(seed, "prop-input", 0);
        let x = (rng::normal_tensor(&mut r, &[2, 3, 8, 8], DType::F32).unwrap() * scale).unwrap();
        let t = Timesteps::new(vec![1, 7], 10).unwrap();
        let m = model.masks_only(&x, &t).unwrap();
        prop_assert_eq!(m.num_regions(), k);
        prop_assert!(m.max_simplex_error().unwrap() <= 1e-5);
        let (lo, hi) = m.value_range().unwrap();
        prop_assert!(lo >= 0.0 && hi <= 1.0);
    }
}

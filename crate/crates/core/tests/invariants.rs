use std::collections::{BTreeMap, HashMap};

use candle_core::{Device, Tensor};
use dpiqa::backbone::NoiseSchedule;
use dpiqa::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, FORMAT_VERSION};
use dpiqa::decoder::QualityFeatureMap;
use dpiqa::distill::FeatureCache;
use dpiqa::eval::{average_ranks, median, plcc, srcc};
use dpiqa::training::{margin_loss, mse_loss, total_loss, TrainSchedule};
use proptest::prelude::*;

fn scores(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-50.0f64..50.0, n)
}

fn pair(n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    n.prop_flat_map(|n| {
        (
            proptest::collection::vec(-50.0f64..50.0, n),
            proptest::collection::vec(-50.0f64..50.0, n),
        )
    })
}

fn spread(v: &[f64]) -> bool {
    v.iter().any(|x| (x - v[0]).abs() > 1e-3)
}

proptest! {
    #[test]
    fn srcc_ignores_monotone_maps((y, yp) in pair(3..40)) {
        prop_assume!(spread(&y) && spread(&yp));
        let warped: Vec<f64> = yp.iter().map(|v| v * v * v + 2.0 * v).collect();
        let a = srcc(&y, &yp).unwrap();
        prop_assert!((a - srcc(&y, &warped).unwrap()).abs() < 1e-12);
        prop_assert!((a - srcc(&yp, &y).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn plcc_is_affine_invariant((y, yp) in pair(3..40), a in 0.1f64..10.0, b in -20.0f64..20.0, flip in any::<bool>()) {
        prop_assume!(spread(&y) && spread(&yp));
        let a = if flip { -a } else { a };
        let moved: Vec<f64> = yp.iter().map(|v| a * v + b).collect();
        let r = plcc(&y, &yp).unwrap();
        prop_assert!((r * a.signum() - plcc(&y, &moved).unwrap()).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn ranks_sum_and_follow_permutations(v in proptest::collection::vec(0i32..6, 1..30), seed in any::<u64>()) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let n = v.len() as f64;
        let r = average_ranks(&v);
        prop_assert_eq!(r.iter().sum::<f64>(), n * (n + 1.0) / 2.0);
        // rotating the input rotates the ranks
        let k = (seed % v.len() as u64) as usize;
        let mut rv = v.clone();
        rv.rotate_left(k);
        let mut rr = r.clone();
        rr.rotate_left(k);
        prop_assert_eq!(average_ranks(&rv), rr);
    }

    #[test]
    fn median_is_order_free(v in scores(1..12).prop_shuffle()) {
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        let m = median(&v).unwrap();
        prop_assert_eq!(m, median(&sorted).unwrap());
        prop_assert!(sorted[0] <= m && m <= sorted[sorted.len() - 1]);
    }

    #[test]
    fn margin_loss_is_shift_free_and_nonnegative((y, yp) in pair(2..9), shift in -10.0f64..10.0, lambda in 0.0f64..=1.0) {
        let l = margin_loss(&y, &yp, lambda).unwrap();
        prop_assert!(l >= 0.0);
        let moved: Vec<f64> = yp.iter().map(|v| v + shift).collect();
        prop_assert!((l - margin_loss(&y, &moved, lambda).unwrap()).abs() < 1e-9);
        let t = total_loss(&y, &yp, lambda).unwrap();
        prop_assert!((t - mse_loss(&y, &yp).unwrap() - l).abs() < 1e-9);
    }

    #[test]
    fn ordered_predictions_cost_nothing_without_margin(y in scores(2..9), scale in 0.01f64..5.0) {
        let yp: Vec<f64> = y.iter().map(|v| scale * v).collect();
        prop_assert_eq!(margin_loss(&y, &yp, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn alpha_bar_decreases(steps in 2usize..1200, start in 1e-5f64..1e-3, width in 1e-3f64..2e-2) {
        let s = NoiseSchedule::scaled_linear(steps, start, start + width).unwrap();
        let ab = s.alpha_bars();
        prop_assert_eq!(ab.len(), steps);
        prop_assert!(ab[0] < 1.0 && ab[0] > 0.0);
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
    }

    #[test]
    fn learning_rate_never_rises(lr in 1e-6f64..1e-2, factor in 0.01f64..=1.0, decay in proptest::collection::btree_set(0usize..40, 0..5)) {
        let s = TrainSchedule {
            lr,
            batch_size: 4,
            epochs: 40,
            decay_epochs: decay.into_iter().collect(),
            decay_factor: factor,
            validation_step: 0,
            max_steps: 0,
            seed: 0,
        };
        s.validate("teacher").unwrap();
        prop_assert!(s.lr_at_epoch(0) <= lr);
        for e in 1..40 {
            prop_assert!(s.lr_at_epoch(e) <= s.lr_at_epoch(e - 1));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn feature_cache_entries_round_trip(seed in any::<u32>()) {
        let values: Vec<f32> = (0..QualityFeatureMap::LEN)
            .map(|i| ((i as u32).wrapping_mul(2_654_435_761) ^ seed) as f32 / u32::MAX as f32 - 0.5)
            .collect();
        let map = QualityFeatureMap::from_values(values).unwrap();
        let bytes = FeatureCache::encode(&map);
        prop_assert_eq!(FeatureCache::decode(&bytes).unwrap(), map);
        prop_assert!(FeatureCache::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn checkpoints_round_trip(shapes in proptest::collection::vec((1usize..5, 1usize..5), 1..5), seed in any::<u64>()) {
        let mut tensors = HashMap::new();
        for (i, (a, b)) in shapes.iter().enumerate() {
            let data: Vec<f32> = (0..a * b).map(|k| (k as f32 + 0.25) * (seed % 7) as f32).collect();
            tensors.insert(format!("layer{i}.weight"), Tensor::from_vec(data, (*a, *b), &Device::Cpu).unwrap());
        }
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Student,
            config: serde_json::json!({ "seed": seed }),
            dataset_id: "toy".into(),
            split_seed: seed,
            repeat_index: 2,
            extra: BTreeMap::from([("best_step".to_string(), "4".to_string())]),
        };
        let ckpt = Checkpoint { meta, tensors };
        let bytes = ckpt.to_bytes().unwrap();
        // serialisation is deterministic
        prop_assert_eq!(&bytes, &ckpt.to_bytes().unwrap());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.meta, &ckpt.meta);
        prop_assert_eq!(back.tensors.len(), ckpt.tensors.len());
        for (k, t) in &ckpt.tensors {
            let u = &back.tensors[k];
            prop_assert_eq!(u.dims(), t.dims());
            prop_assert_eq!(u.flatten_all().unwrap().to_vec1::<f32>().unwrap(), t.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }
}

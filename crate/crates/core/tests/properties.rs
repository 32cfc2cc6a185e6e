mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rpr_core::nn::{ParamGroup, ParamKind, TensorMap};
use rpr_core::optim::{OptimKind, OptimState};
use rpr_core::quantize::{calibrate_scale, project_nearest, scale_residual, LevelSet, GRID_POINTS};
use rpr_core::rpr::{frozen_count, materialize_effective_weights, sample_partition, PartitionMask};
use rpr_core::{Rng, Tensor};

fn level_sets() -> impl Strategy<Value = LevelSet> {
    prop_oneof![
        Just(LevelSet::binary()),
        Just(LevelSet::ternary()),
        (-3i32..=0, 0i32..=2).prop_map(|(lo, hi)| LevelSet::sym_exponential(lo..=hi).unwrap()),
    ]
}

fn weights(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, 1..=max_len)
}

fn quantizable_params(shapes: &[usize]) -> Vec<ParamGroup> {
    let mut rng = Rng::new(shapes.len() as u64);
    shapes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            ParamGroup::new(
                format!("fc{i}.weight"),
                Tensor::from_fn(&[n], |_| rng.normal()),
                ParamKind::Quantizable,
                Some(0),
            )
        })
        .collect()
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_lands_in_the_set(w in weights(32), levels in level_sets()) {
        let t = Tensor::from_vec(w);
        let p = project_nearest(&t, &levels);
        prop_assert_eq!(project_nearest(&p, &levels), p.clone());
        prop_assert!(p.data().iter().all(|&v| levels.contains(v)));
    }

    #[test]
    fn projection_is_the_nearest_level(w in weights(32), levels in level_sets()) {
        for &x in &w {
            let q = levels.nearest(x);
            prop_assert_eq!(q, common::brute_nearest(x, levels.levels()));
            for &l in levels.levels() {
                prop_assert!((x - q).abs() <= (x - l).abs());
            }
        }
    }

    #[test]
    fn calibration_reaches_the_exhaustive_optimum(w in weights(7), levels in prop_oneof![Just(LevelSet::binary()), Just(LevelSet::ternary())]) {
        let cal = calibrate_scale(&w, &levels, GRID_POINTS);
        let best = common::exhaustive_scaled_residual(&w, levels.levels());
        prop_assert!(cal.residual <= best + 1e-6, "{} vs {}", cal.residual, best);
    }

    #[test]
    fn calibration_is_bounded(w in weights(40), levels in level_sets()) {
        let cal = calibrate_scale(&w, &levels, GRID_POINTS);
        let max_abs = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(cal.scale > 0.0);
        prop_assert!((cal.residual - scale_residual(&w, &levels, cal.scale)).abs() <= 1e-12 * (1.0 + cal.residual));
        // never worse than the grid's own endpoint
        prop_assert!(cal.residual <= scale_residual(&w, &levels, max_abs) + 1e-12);
    }

    #[test]
    fn calibration_is_scale_equivariant(w in weights(20), c in 0.01f64..100.0) {
        let levels = LevelSet::ternary();
        let a = calibrate_scale(&w, &levels, GRID_POINTS);
        let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
        let b = calibrate_scale(&scaled, &levels, GRID_POINTS);
        prop_assert!((b.residual - c * a.residual).abs() <= 1e-6 * (1.0 + c * a.residual), "{} vs {}", b.residual, c * a.residual);
    }

    #[test]
    fn partitions_freeze_exactly_floor_ff_n(
        shapes in prop::collection::vec(1usize..50, 1..5),
        ff in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let params = quantizable_params(&shapes);
        let n: usize = shapes.iter().sum();
        let mask = sample_partition(&params, ff, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(mask.total(), n);
        prop_assert_eq!(mask.frozen_count(), frozen_count(ff, n));
        prop_assert_eq!(mask.frozen_count(), (ff * n as f64 + 1e-9).floor() as usize);
    }

    #[test]
    fn effective_weights_split_by_mask(shapes in prop::collection::vec(1usize..30, 1..4), ff in 0.0f64..=1.0, seed in any::<u64>()) {
        let params = quantizable_params(&shapes);
        let levels = LevelSet::ternary();
        let mask = sample_partition(&params, ff, &mut Rng::new(seed)).unwrap();
        let eff = materialize_effective_weights(&params, &mask, &levels).unwrap();
        for p in &params {
            let frozen = mask.get(&p.name).unwrap();
            for ((&e, &s), &f) in eff[&p.name].data().iter().zip(p.values.data()).zip(frozen) {
                if f {
                    prop_assert_eq!(e, levels.nearest(s));
                } else {
                    prop_assert_eq!(e, s);
                }
            }
        }
    }

    #[test]
    fn frozen_elements_never_move(
        shapes in prop::collection::vec(1usize..20, 1..4),
        ff in 0.0f64..=1.0,
        seed in any::<u64>(),
        adam in any::<bool>(),
        steps in 1usize..5,
    ) {
        let mut params = quantizable_params(&shapes);
        params.push(ParamGroup::new("fc9.bias", Tensor::zeros(&[3]), ParamKind::Continuous, None));
        let kind = if adam { OptimKind::adam() } else { OptimKind::sgd(0.9) };
        let mut opt = OptimState::new(kind, 0.1).unwrap();
        let mut rng = Rng::new(seed);
        let mask = sample_partition(&params, ff, &mut rng).unwrap();
        let before = params.clone();
        for _ in 0..steps {
            let grads: TensorMap = params
                .iter()
                .map(|p| (p.name.clone(), Tensor::from_fn(p.values.shape(), |_| rng.normal() + 0.1)))
                .collect();
            opt.step(&mut params, &grads, Some(&mask)).unwrap();
        }
        for (p, old) in params.iter().zip(&before) {
            match mask.get(&p.name) {
                Some(frozen) => {
                    let moments = opt.moments().get(&p.name);
                    for (i, &f) in frozen.iter().enumerate() {
                        if f {
                            prop_assert_eq!(p.values.data()[i], old.values.data()[i]);
                            if let Some(ms) = moments {
                                for m in ms {
                                    prop_assert_eq!(m.data()[i], 0.0);
                                }
                            }
                        } else {
                            prop_assert_ne!(p.values.data()[i], old.values.data()[i]);
                        }
                    }
                }
                None => prop_assert_ne!(&p.values, &old.values),
            }
        }
    }
}

#[test]
fn full_mask_freezes_everything() {
    let params = quantizable_params(&[4, 5]);
    let mask = PartitionMask::uniform(&params, true);
    assert_eq!(mask.frozen_count(), 9);
    assert_eq!(mask.ff_actual(), 1.0);
    let empty: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    assert_eq!(PartitionMask::from_masks(empty).ff_actual(), 0.0);
}

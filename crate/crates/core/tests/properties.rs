use std::collections::BTreeMap;

use hyperfscil::data::{self, SyntheticConfig};
use hyperfscil::encoder::{encode_image, encode_text, init_params, mean_template};
use hyperfscil::hyperbolic::{
    distance_oracle_arccosh, exp_map_zero, hyperbolic_distance, Curvature,
};
use hyperfscil::linalg::{self, normalize};
use hyperfscil::metrics::{aggregate, argmax_lowest_id, classify, prototype_text_heatmap};
use hyperfscil::objective::{
    class_probabilities, class_probabilities_ssp, softmax, ClassBank, LossConfig, SimMode,
};
use proptest::prelude::*;

fn curvature() -> impl Strategy<Value = Curvature> {
    prop::sample::select(vec![0.3, 0.5, 0.8, 1.0]).prop_map(|c| Curvature::new(c).unwrap())
}

/// A point strictly inside the ball of curvature `c`, built from a direction
/// and a radius fraction.
fn in_ball(dir: &[f64], frac: f64, c: Curvature) -> Option<Vec<f64>> {
    let n = linalg::norm(dir);
    (n > 1e-6).then(|| {
        dir.iter()
            .map(|v| v / n * frac / c.value().sqrt())
            .collect()
    })
}

fn vecs(d: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n)
}

proptest! {
    #[test]
    fn distance_matches_oracle(
        c in curvature(),
        d in 1usize..32,
        seed in prop::collection::vec(-1.0f64..1.0, 64),
        fx in 0.0f64..0.95,
        fy in 0.0f64..0.95,
    ) {
        let (Some(x), Some(y)) = (in_ball(&seed[..d], fx, c), in_ball(&seed[32..32 + d], fy, c)) else {
            return Ok(());
        };
        let a = hyperbolic_distance(&x, &y, c).unwrap();
        let b = distance_oracle_arccosh(&x, &y, c).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + d as f64), "{a} vs {b}");
    }

    #[test]
    fn metric_axioms(
        c in curvature(),
        pts in vecs(4, 3),
        fr in prop::collection::vec(0.0f64..0.9, 3),
    ) {
        let p: Option<Vec<Vec<f64>>> = pts.iter().zip(&fr).map(|(v, &f)| in_ball(v, f, c)).collect();
        let Some(p) = p else { return Ok(()) };
        let d = |i: usize, j: usize| hyperbolic_distance(&p[i], &p[j], c).unwrap();
        prop_assert!(d(0, 1) >= 0.0);
        prop_assert!((d(0, 1) - d(1, 0)).abs() <= 1e-12 * (1.0 + d(0, 1)));
        prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-9);
        prop_assert!(d(0, 0).abs() < 1e-6);
    }

    #[test]
    fn exp_map_stays_in_ball(c in curvature(), v in prop::collection::vec(-1e6f64..1e6, 1..16)) {
        let p = exp_map_zero(&v, c).unwrap();
        prop_assert!(linalg::norm(&p) < 1.0 / c.value().sqrt());
    }

    #[test]
    fn probabilities_are_distributions(
        z in prop::collection::vec(-1.0f64..1.0, 5),
        texts in vecs(5, 4),
        past in vecs(5, 2),
        tau in 0.01f64..2.0,
        hyp in any::<bool>(),
    ) {
        let cfg = LossConfig {
            tau,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            sim: SimMode::from_flags(hyp, Curvature::new(0.5).unwrap()),
        };
        let current: Vec<_> = texts.into_iter().enumerate().map(|(i, t)| (10 + i as u32, t)).collect();
        let past: Vec<_> = past.into_iter().enumerate().map(|(i, t)| (i as u32, t)).collect();
        let only = ClassBank::current_only(current.clone()).unwrap();
        let Ok(plain) = class_probabilities(&z, &only, &cfg) else { return Ok(()) };
        let ssp_empty = class_probabilities_ssp(&z, &only, &cfg).unwrap();
        prop_assert_eq!(
            plain.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            ssp_empty.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let mixed = ClassBank::new(past, current).unwrap();
        for p in [plain, class_probabilities_ssp(&z, &mixed, &cfg).unwrap()] {
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn lower_temperature_sharpens(sims in prop::collection::vec(-1.0f64..1.0, 2..8), t in 0.05f64..1.0) {
        let spread = sims.iter().cloned().fold(f64::MIN, f64::max) - sims.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let top = |tau: f64| softmax(&sims.iter().map(|s| s / tau).collect::<Vec<_>>()).into_iter().fold(0.0, f64::max);
        prop_assert!(top(t * 0.5) > top(t));
    }

    #[test]
    fn argmax_invariant_under_increasing_maps(scores in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let ids: Vec<u32> = (0..scores.len() as u32).rev().collect();
        let base = argmax_lowest_id(&ids, &scores);
        for f in [|s: f64| s.exp(), |s: f64| 3.0 * s + 1.0, |s: f64| s * s * s, |s: f64| (s / 10.0).tanh()] {
            let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            prop_assert_eq!(argmax_lowest_id(&ids, &mapped), base);
        }
    }

    #[test]
    fn classify_agrees_with_probabilities(z in prop::collection::vec(-1.0f64..1.0, 4), texts in vecs(4, 5), tau in 0.02f64..1.0) {
        let cfg = LossConfig { tau, alpha: 0.0, beta: 0.0, gamma: 0.0, sim: SimMode::Hyperbolic(Curvature::new(0.8).unwrap()) };
        let bank = ClassBank::current_only(texts.into_iter().enumerate().map(|(i, t)| (i as u32, t)).collect()).unwrap();
        let Ok(p) = class_probabilities(&z, &bank, &cfg) else { return Ok(()) };
        let ids = bank.class_ids();
        prop_assert_eq!(classify(&z, &bank, &cfg).unwrap(), argmax_lowest_id(&ids, &p).unwrap());
    }

    #[test]
    fn hyperbolic_heatmap_is_nonnegative(protos in vecs(6, 4), texts in vecs(6, 4), c in curvature()) {
        let to_map = |v: Vec<Vec<f64>>| -> Option<BTreeMap<u32, Vec<f64>>> {
            v.into_iter().enumerate().map(|(i, x)| normalize(&x).ok().map(|n| (i as u32, n))).collect()
        };
        let (Some(p), Some(t)) = (to_map(protos), to_map(texts)) else { return Ok(()) };
        let h = prototype_text_heatmap(&p, &t, SimMode::Hyperbolic(c)).unwrap();
        prop_assert!(h.values.iter().flatten().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn aggregate_uses_full_precision(acc in prop::collection::vec(0.0f64..100.0, 1..12)) {
        let a = aggregate(&acc).unwrap();
        prop_assert_eq!(a.pd, acc[0] - acc[acc.len() - 1]);
        prop_assert_eq!(a.avg, acc.iter().sum::<f64>() / acc.len() as f64);
    }

    #[test]
    fn fresh_adapter_is_identity_after_normalization(f in prop::collection::vec(-3.0f64..3.0, 6), t in vecs(6, 3), seed in any::<u64>()) {
        let params = init_params(6, 6, 2, seed).unwrap();
        let Ok(expected) = normalize(&f) else { return Ok(()) };
        prop_assert_eq!(encode_image(&f, &params).unwrap(), expected);
        let Ok(text_expected) = mean_template(&t).and_then(|m| normalize(&m)) else { return Ok(()) };
        prop_assert_eq!(encode_text(&t, &params).unwrap(), text_expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthetic_bundles_round_trip(seed in any::<u64>(), fine in any::<bool>()) {
        let mut cfg = if fine { SyntheticConfig::fine(seed) } else { SyntheticConfig::coarse(seed) };
        cfg.num_classes = 12;
        cfg.train_per_class = 6;
        cfg.test_per_class = 2;
        cfg.dim = 8;
        let raw = data::gen_synthetic(&cfg).unwrap();
        prop_assert_eq!(&raw, &data::gen_synthetic(&cfg).unwrap());
        let spec = data::SplitSpec { n_base: 4, n_way: 2, k_shot: 3, sessions: 4 };
        let ds = data::make_splits(&raw, spec, seed).unwrap();
        for s in &ds.sessions[1..] {
            let train = ds.images.iter().filter(|r| r.split == data::Split::Train && s.contains(&r.class_id)).count();
            prop_assert_eq!(train, spec.n_way * spec.k_shot);
        }
        let dir = tempfile::tempdir().unwrap();
        data::write_bundle(&ds, dir.path()).unwrap();
        prop_assert_eq!(data::load_bundle(dir.path()).unwrap(), ds);
    }
}

use hyperfscil::data::{self, EmbeddingDataset, Split, SplitSpec, SyntheticConfig};
use hyperfscil::hyperbolic::Curvature;
use hyperfscil::protocol::{run_full_stream, PhaseSchedule, TrainConfig};

fn small_dataset(seed: u64) -> EmbeddingDataset {
    let mut sc = SyntheticConfig::fine(seed);
    sc.num_classes = 20;
    sc.dim = 8;
    sc.train_per_class = 8;
    sc.test_per_class = 4;
    let spec = SplitSpec {
        n_base: 8,
        n_way: 3,
        k_shot: 2,
        sessions: 4,
    };
    data::make_splits(&data::gen_synthetic(&sc).unwrap(), spec, seed).unwrap()
}

fn cfg(ssp: bool, hyp: bool) -> TrainConfig {
    TrainConfig {
        ssp,
        hyp,
        curvature: Curvature::new(0.5).unwrap(),
        tau: 0.05,
        alpha: 0.04,
        beta: 0.1,
        gamma: 30.0,
        rank: 2,
        momentum: 0.9,
        base: PhaseSchedule {
            epochs: 3,
            lr: 0.02,
            batch_size: 8,
        },
        incremental: PhaseSchedule {
            epochs: 3,
            lr: 0.002,
            batch_size: 2,
        },
        seed: 9,
    }
}

#[test]
fn stream_is_deterministic_for_every_flag_combination() {
    let ds = small_dataset(3);
    for (ssp, hyp) in [(false, false), (false, true), (true, false), (true, true)] {
        let a = run_full_stream(&ds, &cfg(ssp, hyp)).unwrap();
        let b = run_full_stream(&ds, &cfg(ssp, hyp)).unwrap();
        assert_eq!(a, b);
        a.check_aggregates().unwrap();
    }
}

#[test]
fn evaluation_covers_exactly_the_seen_classes() {
    let ds = small_dataset(4);
    let report = run_full_stream(&ds, &cfg(true, true)).unwrap();
    assert_eq!(report.sessions.len(), ds.sessions.len());
    let mut seen = Vec::new();
    for (t, s) in report.sessions.iter().enumerate() {
        seen.extend(ds.sessions[t].iter().copied());
        let tests = ds
            .images
            .iter()
            .filter(|r| r.split == Split::Test && seen.contains(&r.class_id))
            .count();
        assert_eq!(s.classes_seen, seen.len());
        assert_eq!(s.test_samples, tests);
        assert_eq!(s.buffer_vectors, 2 * seen.len());
        let expected_train = if t == 0 { 8 * 8 } else { 3 * 2 };
        assert_eq!(s.train_samples, expected_train);
        assert_eq!(report.heatmaps[t].classes.len(), seen.len());
    }
    assert!(report.trainable_params_incremental < report.trainable_params_base);
    assert_eq!(report.sim_mode, "hyperbolic");
}

#[test]
fn zero_curvature_selects_cosine() {
    let ds = small_dataset(5);
    let mut c = cfg(true, true);
    c.curvature = Curvature::new(0.0).unwrap();
    assert_eq!(run_full_stream(&ds, &c).unwrap().sim_mode, "cosine");
}

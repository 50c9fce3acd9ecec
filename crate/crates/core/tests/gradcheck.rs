use hyperfscil::encoder::{init_params, AdapterParams, Phase};
use hyperfscil::hyperbolic::Curvature;
use hyperfscil::objective::{
    numerical_gradient, relative_error, LossConfig, SimMode, TrainingProblem,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn random_case(seed: u64, phase: Phase, sim: SimMode) -> (TrainingProblem, AdapterParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 6;
    let mut params = init_params(d, d, 3, seed).unwrap().with_phase(phase);
    for b in [&mut params.vision, &mut params.text] {
        b.down
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.5..0.5));
        b.up.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let live_ids: Vec<u32> = match phase {
        Phase::Base => vec![0, 1, 2],
        Phase::Incremental => vec![3, 4, 5],
    };
    let batch = (0..4)
        .map(|k| (rand_vec(&mut rng, d, 1.0), live_ids[k % 3]))
        .collect();
    let live_text = live_ids
        .iter()
        .map(|&id| (id, rand_vec(&mut rng, d, 1.0)))
        .collect();
    let (frozen_text, prototypes) = match phase {
        Phase::Base => (Vec::new(), Vec::new()),
        Phase::Incremental => (
            (0..3).map(|id| (id, rand_vec(&mut rng, d, 0.5))).collect(),
            (0..3).map(|id| (id, rand_vec(&mut rng, d, 0.5))).collect(),
        ),
    };
    let cfg = LossConfig {
        tau: rng.gen_range(0.1..1.0),
        alpha: rng.gen_range(0.0..2.0),
        beta: rng.gen_range(0.0..2.0),
        gamma: rng.gen_range(0.0..3.0),
        sim,
    };
    (
        TrainingProblem {
            phase,
            batch,
            live_text,
            frozen_text,
            prototypes,
            cfg,
        },
        params,
    )
}

fn check(seed: u64, phase: Phase, sim: SimMode) -> f64 {
    let (problem, params) = random_case(seed, phase, sim);
    let (loss, analytic) = problem.loss_and_gradients(&params).unwrap();
    let reference = problem.loss(&params).unwrap();
    assert!((loss.total - reference.total).abs() < 1e-12 * reference.total.abs().max(1.0));
    let numeric = numerical_gradient(&problem, &params, 1e-5).unwrap();
    assert_eq!(analytic.vision.is_some(), numeric.vision.is_some());
    relative_error(&analytic.flatten(), &numeric.flatten())
}

#[test]
fn hyperbolic_gradients_match_finite_differences() {
    for (i, c) in [0.3, 0.5, 0.8, 1.0].into_iter().enumerate() {
        let sim = SimMode::Hyperbolic(Curvature::new(c).unwrap());
        for phase in [Phase::Base, Phase::Incremental] {
            for s in 0..3 {
                let err = check(100 * i as u64 + s, phase, sim);
                assert!(err < 1e-4, "c={c} {phase:?} seed={s}: rel err {err}");
            }
        }
    }
}

#[test]
fn cosine_gradients_match_finite_differences() {
    for phase in [Phase::Base, Phase::Incremental] {
        for s in 0..5 {
            let err = check(900 + s, phase, SimMode::Cosine);
            assert!(err < 1e-4, "{phase:?} seed={s}: rel err {err}");
        }
    }
}

#[test]
fn incremental_phase_leaves_vision_without_gradient() {
    let sim = SimMode::Hyperbolic(Curvature::new(0.5).unwrap());
    let (problem, params) = random_case(7, Phase::Incremental, sim);
    let (_, g) = problem.loss_and_gradients(&params).unwrap();
    assert!(g.vision.is_none());
    assert!(g.text.is_some());
}

#[test]
fn gamma_enters_linearly() {
    let sim = SimMode::Hyperbolic(Curvature::new(0.5).unwrap());
    let (mut problem, params) = random_case(11, Phase::Incremental, sim);
    problem.cfg.gamma = 0.0;
    let l0 = problem.loss(&params).unwrap();
    for gamma in [1.0, 2.5, 10.0] {
        problem.cfg.gamma = gamma;
        let l = problem.loss(&params).unwrap();
        assert!((l.total - (l0.total + gamma * l.past_ce)).abs() < 1e-10);
    }
}

#[test]
fn fresh_adapter_has_zero_regularizer() {
    let mut problem = random_case(3, Phase::Base, SimMode::Cosine).0;
    problem.cfg.alpha = 5.0;
    problem.cfg.beta = 5.0;
    let params = init_params(6, 6, 3, 3).unwrap();
    let l = problem.loss(&params).unwrap();
    assert_eq!(l.image_reg, 0.0);
    assert_eq!(l.text_reg, 0.0);
    assert_eq!(l.total, l.ce);
}

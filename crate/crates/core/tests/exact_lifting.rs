mod common;

use common::oracles::exact_lifting_discrete;
use common::{max_abs, rng};
use koopman_core::lifting::{DelaySpec, Lifting, MonomialBasis};
use koopman_core::plants::{exact_lifting_plant, PlantSpec};
use koopman_core::prediction::{rollout, RolloutOptions};
use koopman_core::regression::{identify, IdentifyConfig, KoopmanModel};
use koopman_core::trajectory::Trajectory;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

const TS: f64 = 0.1;
const MU: f64 = -0.5;
const KAPPA: f64 = -1.0;

fn delays() -> DelaySpec {
    DelaySpec {
        state_dim: 2,
        input_dim: 1,
        state_delays: 0,
        input_delays: 0,
        sample_period: TS,
    }
}

/// 17 noiseless trials of 301 samples: 5100 snapshot pairs.
fn trials(plant: &PlantSpec, seed: u64) -> Vec<Trajectory> {
    let mut r = rng(seed);
    (0..17)
        .map(|i| {
            let x0 = DVector::from_vec(vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]);
            let inputs = DMatrix::from_fn(301, 1, |_, _| r.random_range(-1.0..1.0));
            plant.simulate(&format!("t{i}"), &x0, &inputs, TS, &mut r).unwrap()
        })
        .collect()
}

fn fit(trials: &[Trajectory]) -> (KoopmanModel, f64) {
    let mut cfg = IdentifyConfig::new(2, delays(), vec![0.0]);
    cfg.eval_horizon = 25;
    cfg.eval_stride = 1;
    let id = identify(&cfg, trials).unwrap();
    let err = id.report[0].normalized_error;
    (id.model, err)
}

/// Positions of x1, x2 and x1^2 in the degree-2 basis over `[x1, x2]`.
fn closed_indices() -> [usize; 3] {
    let basis = MonomialBasis::new(koopman_core::lifting::BasisSpec::new(2, 2)).unwrap();
    let find = |e: [u32; 2]| basis.exponents().iter().position(|x| x[..] == e).unwrap();
    [find([1, 0]), find([0, 1]), find([2, 0])]
}

fn analytic() -> (DMatrix<f64>, DVector<f64>) {
    exact_lifting_discrete(MU, KAPPA, TS)
}

#[test]
fn lifted_block_matches_matrix_exponential() {
    let plant = exact_lifting_plant();
    let data = trials(&plant, 1);
    let (model, _) = fit(&data);
    let idx = closed_indices();
    let (a_star, b_star) = analytic();
    let a = DMatrix::from_fn(3, 3, |i, j| model.a[(idx[i], idx[j])]);
    let b = DVector::from_fn(3, |i, _| model.b[(idx[i], 0)]);
    assert!(max_abs(&(&a - &a_star)) < 1e-6, "A block off by {}", max_abs(&(&a - &a_star)));
    assert!((b - &b_star).amax() < 1e-6);
    // The corrected matrices agree on the closed block as well.
    let a_hat = DMatrix::from_fn(3, 3, |i, j| model.a_hat[(idx[i], idx[j])]);
    assert!(max_abs(&(a_hat - &a_star)) < 1e-6);
    // Rows of the closed block do not use the other monomials.
    for &i in &idx {
        for j in 0..model.lifted_dim() {
            if !idx.contains(&j) {
                assert!(model.a[(i, j)].abs() < 1e-6);
            }
        }
    }
}

#[test]
fn identified_block_commutes_with_analytic() {
    let (model, _) = fit(&trials(&exact_lifting_plant(), 2));
    let idx = closed_indices();
    let a = DMatrix::from_fn(3, 3, |i, j| model.a[(idx[i], idx[j])]);
    let (a_star, _) = analytic();
    assert!(max_abs(&(&a * &a_star - &a_star * &a)) < 1e-6);
}

#[test]
fn rollout_tracks_plant_for_25_steps() {
    let plant = exact_lifting_plant();
    let (model, held_out) = fit(&trials(&plant, 3));
    assert!(held_out < 1e-6, "held-out normalized error {held_out}");
    let mut r = rng(4);
    for _ in 0..20 {
        let x0 = DVector::from_vec(vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]);
        let inputs = DMatrix::from_fn(26, 1, |_, _| r.random_range(-1.0..1.0));
        let log = plant.simulate("check", &x0, &inputs, TS, &mut r).unwrap();
        let horizon = inputs.rows(0, 25).into_owned();
        let y = rollout(&model, x0.as_slice(), &horizon, RolloutOptions::default()).unwrap();
        let err = max_abs(&(y - &log.states));
        assert!(err < 1e-6, "rollout error {err}");
    }
}

#[test]
fn invariant_axis() {
    let plant = exact_lifting_plant();
    let mut x = DVector::from_vec(vec![0.0, 1.5]);
    let u = DVector::from_vec(vec![0.3]);
    for _ in 0..100 {
        x = plant.propagate(&x, &u, TS).unwrap();
        assert_eq!(x[0], 0.0);
    }
}

#[test]
fn lifted_flow_is_closed() {
    // d(x1^2)/dt = 2 x1 x1' = 2 mu x1^2 along trajectories
    let basis = MonomialBasis::new(koopman_core::lifting::BasisSpec::new(2, 2)).unwrap();
    let idx = closed_indices();
    let plant = exact_lifting_plant();
    let x = DVector::from_vec(vec![1.3, -0.4]);
    let next = plant.propagate(&x, &DVector::from_vec(vec![0.0]), TS).unwrap();
    let z0 = basis.lift(x.as_slice()).unwrap();
    let z1 = basis.lift(next.as_slice()).unwrap();
    assert_eq!(basis.output_dim(), 6);
    assert!((z1[idx[2]] - (2.0 * MU * TS).exp() * z0[idx[2]]).abs() < 1e-10);
}

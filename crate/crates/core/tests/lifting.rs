mod common;

use common::rng;
use koopman_core::lifting::{build_delay_snapshots, monomial_count, BasisSpec, DelaySpec, MonomialBasis};
use koopman_core::plants::{arm_surrogate_plant, collect_trials, SignalSpec};
use koopman_core::prediction::{evaluate_prediction, EvalOptions, KoopmanPredictor, RolloutOptions};
use koopman_core::regression::{identify, IdentifyConfig};
use proptest::prelude::*;
use rand::Rng;

/// Counts exponent vectors with total degree <= d by direct recursion.
fn count_by_enumeration(q: usize, d: usize) -> usize {
    if q == 0 {
        return 1;
    }
    (0..=d).map(|e| count_by_enumeration(q - 1, d - e)).sum()
}

#[test]
fn seven_coordinates_degree_four_gives_330() {
    assert_eq!(monomial_count(7, 4).unwrap(), 330);
    assert_eq!(count_by_enumeration(7, 4), 330);
    let delays = DelaySpec {
        state_dim: 2,
        input_dim: 3,
        state_delays: 1,
        input_delays: 1,
        sample_period: 0.1,
    };
    assert_eq!(delays.embedded_dim(), 7);
    assert_eq!(BasisSpec::new(7, 4).lifted_dim().unwrap(), 330);
}

#[test]
fn counts_match_enumeration() {
    for q in 1..=6 {
        for d in 1..=5 {
            assert_eq!(monomial_count(q, d).unwrap(), count_by_enumeration(q, d), "q={q} d={d}");
        }
    }
}

#[test]
fn snapshots_follow_the_embedding() {
    let trials = collect_trials(
        &arm_surrogate_plant(),
        &SignalSpec::RandomRamp {
            transition_min: 5.0,
            transition_max: 10.0,
        },
        2,
        50,
        0.1,
        3,
    )
    .unwrap();
    let delays = DelaySpec {
        state_dim: 2,
        input_dim: 3,
        state_delays: 1,
        input_delays: 1,
        sample_period: 0.1,
    };
    let snaps = build_delay_snapshots(&trials, &delays).unwrap();
    // window of 1 and one step ahead: 48 pairs per 50-sample trial
    assert_eq!(snaps.len(), 2 * 48);
    for (row, (id, k)) in snaps.provenance.iter().enumerate() {
        let t = trials.iter().find(|t| &t.id == id).unwrap();
        let a = delays.embed_at(&t.states, &t.inputs, *k);
        let b = delays.embed_at(&t.states, &t.inputs, k + 1);
        assert_eq!(snaps.a.row(row).transpose(), a);
        assert_eq!(snaps.b.row(row).transpose(), b);
        assert_eq!(snaps.u.row(row).transpose(), t.inputs.row(*k).transpose());
    }
}

#[test]
fn prediction_metric_matches_recomputation() {
    let trials = collect_trials(
        &arm_surrogate_plant(),
        &SignalSpec::RandomRamp {
            transition_min: 5.0,
            transition_max: 10.0,
        },
        3,
        300,
        0.1,
        8,
    )
    .unwrap();
    let delays = DelaySpec {
        state_dim: 2,
        input_dim: 3,
        state_delays: 1,
        input_delays: 0,
        sample_period: 0.1,
    };
    let mut cfg = IdentifyConfig::new(2, delays, vec![0.0]);
    cfg.scale_coordinates = true;
    let model = identify(&cfg, &trials).unwrap().model;
    let predictor = KoopmanPredictor::new(&model, RolloutOptions::default()).unwrap();
    let opts = EvalOptions {
        horizon: 25,
        stride: 7,
        first_start: 0,
    };
    let report = evaluate_prediction(&predictor, &trials[0], opts).unwrap();
    let mut total = 0.0;
    let mut count = 0;
    for start in (1..300 - 25).step_by(7) {
        let pred = koopman_core::prediction::Predictor::predict_from_log(&predictor, &trials[0], start, 25).unwrap();
        for j in 1..=25 {
            total += (pred.row(j) - trials[0].states.row(start + j)).norm();
            count += 1;
        }
    }
    assert_eq!(report.samples.len(), count);
    assert!((report.mean_error - total / count as f64).abs() < 1e-12);
}

proptest! {
    #[test]
    fn lift_entries_are_products_of_powers(seed in 0u64..10_000, q in 1usize..=4, d in 1usize..=4) {
        let basis = MonomialBasis::new(BasisSpec::new(q, d)).unwrap();
        let mut r = rng(seed);
        let xi: Vec<f64> = (0..q).map(|_| r.random_range(-2.0..2.0)).collect();
        let z = basis.lift(&xi).unwrap();
        prop_assert_eq!(z.len(), monomial_count(q, d).unwrap());
        for (k, e) in basis.exponents().iter().enumerate() {
            let direct: f64 = xi.iter().zip(e).map(|(x, &p)| x.powi(p as i32)).product();
            prop_assert!((z[k] - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        }
        for i in 0..q {
            prop_assert_eq!(z[i], xi[i]);
        }
    }
}

//! Multi-step simulation of identified models and prediction-error metrics.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::lifting::{Lifting, MonomialBasis};
use crate::regression::KoopmanModel;
use crate::trajectory::Trajectory;

/// Which pair of system matrices drives a lifted rollout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SystemMatrices {
    /// `(A_hat, B_hat) = (P A, P B)`.
    #[default]
    Corrected,
    /// The raw `(A, B)` read off the Koopman matrix.
    Raw,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RolloutOptions {
    pub matrices: SystemMatrices,
    /// Re-lift the predicted output at every step instead of iterating the
    /// linear recursion. Off by default; the controller relies on the pure
    /// linear recursion.
    pub relift: bool,
}

fn system<'a>(model: &'a KoopmanModel, which: SystemMatrices) -> (&'a DMatrix<f64>, &'a DMatrix<f64>) {
    match which {
        SystemMatrices::Corrected => (&model.a_hat, &model.b_hat),
        SystemMatrices::Raw => (&model.a, &model.b),
    }
}

/// Lifted trajectory `z[0..=H]` of `z+ = A z + B u` from `z0`.
pub fn rollout_lifted(
    model: &KoopmanModel,
    z0: &DVector<f64>,
    inputs: &DMatrix<f64>,
    matrices: SystemMatrices,
) -> Result<Vec<DVector<f64>>> {
    check_dim("initial lifted state", model.lifted_dim(), z0.len())?;
    check_dim("rollout input width", model.input_dim(), inputs.ncols())?;
    let (a, b) = system(model, matrices);
    let mut out = Vec::with_capacity(inputs.nrows() + 1);
    out.push(z0.clone());
    for j in 0..inputs.nrows() {
        let u = inputs.row(j).transpose();
        let next = a * &out[j] + b * u;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { step: j + 1 });
        }
        out.push(next);
    }
    Ok(out)
}

/// A Koopman model paired with its compiled basis, ready for repeated rollouts.
pub struct KoopmanPredictor<'a> {
    pub model: &'a KoopmanModel,
    basis: MonomialBasis,
    pub options: RolloutOptions,
}

impl<'a> KoopmanPredictor<'a> {
    pub fn new(model: &'a KoopmanModel, options: RolloutOptions) -> Result<Self> {
        Ok(Self {
            basis: model.compile_basis()?,
            model,
            options,
        })
    }

    /// Outputs `y[0..=H]` from a delay-embedded initial condition.
    pub fn rollout(&self, embedding: &[f64], inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let model = self.model;
        check_dim("embedding dimension", model.basis.embedded_dim, embedding.len())?;
        check_dim("rollout input width", model.input_dim(), inputs.ncols())?;
        let n = model.output_dim();
        let horizon = inputs.nrows();
        let (a, b) = system(model, self.options.matrices);
        let mut z = DVector::zeros(self.basis.output_dim());
        self.basis.lift_into(embedding, z.as_mut_slice());
        let mut y = DMatrix::zeros(horizon + 1, n);
        y.row_mut(0).copy_from(&(&model.c * &z).transpose());
        let mut emb = embedding.to_vec();
        let d = model.delays;
        for j in 0..horizon {
            let u = inputs.row(j).transpose();
            z = a * &z + b * &u;
            if !z.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged { step: j + 1 });
            }
            let yj = &model.c * &z;
            y.row_mut(j + 1).copy_from(&yj.transpose());
            if self.options.relift {
                // shift the embedded window by one sample
                let ns = d.state_dim;
                let xs = ns * (d.state_delays + 1);
                emb.copy_within(0..xs - ns, ns);
                emb[..ns].copy_from_slice(yj.as_slice());
                if d.input_delays > 0 {
                    let m = d.input_dim;
                    emb.copy_within(xs..xs + m * (d.input_delays - 1), xs + m);
                    emb[xs..xs + m].copy_from_slice(u.as_slice());
                }
                self.basis.lift_into(&emb, z.as_mut_slice());
            }
        }
        Ok(y)
    }
}

/// Convenience wrapper: compile the basis and roll out once.
pub fn rollout(model: &KoopmanModel, embedding: &[f64], inputs: &DMatrix<f64>, options: RolloutOptions) -> Result<DMatrix<f64>> {
    KoopmanPredictor::new(model, options)?.rollout(embedding, inputs)
}

/// Common interface for models evaluated against logged trials.
pub trait Predictor: Sync {
    fn output_dim(&self) -> usize;
    /// Earliest sample index that has enough history to start a prediction.
    fn warmup(&self) -> usize;
    /// Predicted outputs `y[start..=start+horizon]` under the logged inputs.
    fn predict_from_log(&self, log: &Trajectory, start: usize, horizon: usize) -> Result<DMatrix<f64>>;
}

impl Predictor for KoopmanPredictor<'_> {
    fn output_dim(&self) -> usize {
        self.model.output_dim()
    }

    fn warmup(&self) -> usize {
        self.model.delays.window()
    }

    fn predict_from_log(&self, log: &Trajectory, start: usize, horizon: usize) -> Result<DMatrix<f64>> {
        let emb = self.model.delays.embed_at(&log.states, &log.inputs, start);
        let inputs = log.inputs.rows(start, horizon).into_owned();
        self.rollout(emb.as_slice(), &inputs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionSample {
    pub start: usize,
    pub step: usize,
    pub t: f64,
    pub predicted: Vec<f64>,
    pub actual: Vec<f64>,
    pub error: f64,
}

/// Pointwise Euclidean prediction errors and their summaries. Only steps
/// `1..=horizon` are scored; step 0 is the initial condition.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionReport {
    pub output_dim: usize,
    pub horizon: usize,
    pub samples: Vec<PredictionSample>,
    pub mean_error: f64,
    pub mean_actual_norm: f64,
    pub normalized_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PredictionSummary {
    pub horizon: usize,
    pub samples: usize,
    pub mean_error: f64,
    pub normalized_error: f64,
}

impl PredictionReport {
    pub fn from_samples(output_dim: usize, horizon: usize, samples: Vec<PredictionSample>) -> Self {
        let count = samples.len().max(1) as f64;
        let mean_error = samples.iter().map(|s| s.error).sum::<f64>() / count;
        let mean_actual_norm = samples
            .iter()
            .map(|s| s.actual.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / count;
        let normalized_error = if mean_actual_norm > 0.0 {
            mean_error / mean_actual_norm
        } else if mean_error == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        Self {
            output_dim,
            horizon,
            samples,
            mean_error,
            mean_actual_norm,
            normalized_error,
        }
    }

    /// Pools the samples of several reports (e.g. one per trial).
    pub fn merge(reports: Vec<PredictionReport>) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to merge".into()))?;
        let (n, h) = (first.output_dim, first.horizon);
        let samples = reports.into_iter().flat_map(|r| r.samples).collect();
        Ok(Self::from_samples(n, h, samples))
    }

    pub fn summary(&self) -> PredictionSummary {
        PredictionSummary {
            horizon: self.horizon,
            samples: self.samples.len(),
            mean_error: self.mean_error,
            normalized_error: self.normalized_error,
        }
    }

    /// `t,y_pred_1..n,y_act_1..n,error`, ordered by start index then step.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.output_dim).map(|i| format!("y_pred_{i}")));
        header.extend((1..=self.output_dim).map(|i| format!("y_act_{i}")));
        header.push("error".into());
        writeln!(out, "{}", header.join(","))?;
        for s in &self.samples {
            let mut fields = vec![s.t.to_string()];
            fields.extend(s.predicted.iter().map(|v| v.to_string()));
            fields.extend(s.actual.iter().map(|v| v.to_string()));
            fields.push(s.error.to_string());
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Builds a report from matched predicted/actual trajectories (rows are
/// time steps; row 0 is the initial condition and is not scored).
pub fn score_trajectory(start: usize, times: &[f64], predicted: &DMatrix<f64>, actual: &DMatrix<f64>) -> Vec<PredictionSample> {
    (1..predicted.nrows())
        .map(|j| {
            let p: Vec<f64> = predicted.row(j).iter().copied().collect();
            let a: Vec<f64> = actual.row(j).iter().copied().collect();
            let error = p.iter().zip(&a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            PredictionSample {
                start,
                step: j,
                t: times[j],
                predicted: p,
                actual: a,
                error,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub horizon: usize,
    pub stride: usize,
    /// Earliest start considered (raised to the predictor's warmup).
    pub first_start: usize,
}

impl EvalOptions {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            stride: 1,
            first_start: 0,
        }
    }
}

/// Rolls the predictor forward `horizon` steps from every admissible start
/// index of `log` (every `stride`-th) and compares against the logged outputs.
pub fn evaluate_prediction(predictor: &dyn Predictor, log: &Trajectory, opts: EvalOptions) -> Result<PredictionReport> {
    if opts.horizon == 0 || opts.stride == 0 {
        return Err(Error::InvalidArgument("horizon and stride must be positive".into()));
    }
    check_dim("log output dimension", predictor.output_dim(), log.state_dim())?;
    let first = opts.first_start.max(predictor.warmup());
    if log.len() < first + opts.horizon + 1 {
        return Err(Error::TooShort {
            needed: first + opts.horizon + 1,
            got: log.len(),
        });
    }
    let starts: Vec<usize> = (first..log.len() - opts.horizon).step_by(opts.stride).collect();
    let chunks: Vec<Vec<PredictionSample>> = starts
        .par_iter()
        .map(|&start| {
            let predicted = predictor.predict_from_log(log, start, opts.horizon)?;
            let actual = log.states.rows(start, opts.horizon + 1).into_owned();
            Ok(score_trajectory(start, &log.times[start..=start + opts.horizon], &predicted, &actual))
        })
        .collect::<Result<_>>()?;
    Ok(PredictionReport::from_samples(
        predictor.output_dim(),
        opts.horizon,
        chunks.into_iter().flatten().collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::{BasisSpec, DelaySpec};
    use proptest::prelude::*;

    fn model_with(a_hat: DMatrix<f64>, b_hat: DMatrix<f64>) -> KoopmanModel {
        let basis = BasisSpec::new(2, 2);
        let delays = DelaySpec {
            state_dim: 2,
            input_dim: 1,
            state_delays: 0,
            input_delays: 0,
            sample_period: 0.1,
        };
        let mut model = KoopmanModel::from_parts(
            basis,
            delays,
            a_hat.clone(),
            b_hat.clone(),
            DMatrix::identity(6, 6),
            0.0,
        )
        .unwrap();
        model.a_hat = a_hat;
        model.b_hat = b_hat;
        model
    }

    #[test]
    fn identity_dynamics_hold_output() {
        let model = model_with(DMatrix::identity(6, 6), DMatrix::zeros(6, 1));
        let y = rollout(&model, &[1.5, -2.0], &DMatrix::from_element(10, 1, 3.0), RolloutOptions::default()).unwrap();
        for j in 0..=10 {
            assert_eq!(y.row(j).iter().copied().collect::<Vec<_>>(), vec![1.5, -2.0]);
        }
    }

    #[test]
    fn zero_dynamics_vanish() {
        let model = model_with(DMatrix::zeros(6, 6), DMatrix::zeros(6, 1));
        let y = rollout(&model, &[1.5, -2.0], &DMatrix::from_element(4, 1, 3.0), RolloutOptions::default()).unwrap();
        assert!(y.rows(1, 4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn divergence_reports_step() {
        let model = model_with(DMatrix::identity(6, 6) * 1e200, DMatrix::zeros(6, 1));
        let err = rollout(&model, &[1.0, 1.0], &DMatrix::zeros(5, 1), RolloutOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 2 }));
    }

    #[test]
    fn identity_projection_matches_raw_bitwise() {
        let a = DMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.1 - 0.2);
        let b = DMatrix::from_fn(6, 1, |i, _| i as f64 * 0.05);
        let model = KoopmanModel::from_parts(model_with(a.clone(), b.clone()).basis, model_with(a.clone(), b.clone()).delays, a, b, DMatrix::identity(6, 6), 0.0).unwrap();
        let inputs = DMatrix::from_fn(8, 1, |i, _| (i as f64).sin());
        let raw = rollout(&model, &[0.3, 0.4], &inputs, RolloutOptions { matrices: SystemMatrices::Raw, relift: false }).unwrap();
        let cor = rollout(&model, &[0.3, 0.4], &inputs, RolloutOptions::default()).unwrap();
        assert!(raw.iter().zip(cor.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn report_normalization() {
        let times = [0.0, 0.1, 0.2];
        let actual = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 3.0, 4.0, 0.0, 2.0]);
        let same = PredictionReport::from_samples(2, 2, score_trajectory(0, &times, &actual, &actual));
        assert_eq!(same.mean_error, 0.0);
        assert_eq!(same.normalized_error, 0.0);
        let zero = PredictionReport::from_samples(2, 2, score_trajectory(0, &times, &DMatrix::zeros(3, 2), &actual));
        assert!((zero.normalized_error - 1.0).abs() < 1e-15);
        assert!((zero.mean_error - 3.5).abs() < 1e-15);
        let mean: f64 = zero.samples.iter().map(|s| s.error).sum::<f64>() / zero.samples.len() as f64;
        assert_eq!(mean, zero.mean_error);
    }

    proptest! {
        #[test]
        fn lifted_recursion_is_linear(scale in -3.0f64..3.0, seed in 0u64..50) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-0.5..0.5));
            let b = DMatrix::from_fn(6, 1, |_, _| rng.random_range(-1.0..1.0));
            let model = model_with(a, b);
            let z0 = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let u = DMatrix::from_fn(5, 1, |_, _| rng.random_range(-1.0..1.0));
            let base = rollout_lifted(&model, &z0, &u, SystemMatrices::Corrected).unwrap();
            let scaled = rollout_lifted(&model, &(&z0 * scale), &(&u * scale), SystemMatrices::Corrected).unwrap();
            for (x, y) in base.iter().zip(&scaled) {
                prop_assert!((x * scale - y).amax() <= 1e-12 * (1.0 + x.amax() * scale.abs()));
            }
        }
    }
}

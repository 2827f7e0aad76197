//! The full identification pipeline with a sweep over the L1 weight.

use serde::{Deserialize, Serialize};

use super::{extract_model, fit_lasso_warm, fit_least_squares, fit_projection, KoopmanModel, LassoSettings};
use crate::error::{Error, Result};
use crate::lifting::{assemble_matrices, build_delay_snapshots, BasisSpec, DelaySpec, MonomialBasis};
use crate::prediction::{evaluate_prediction, EvalOptions, KoopmanPredictor, PredictionReport, RolloutOptions};
use crate::trajectory::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifyConfig {
    pub max_degree: usize,
    pub delays: DelaySpec,
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub lasso: LassoSettings,
    /// Relative singular-value cutoff for every pseudoinverse; `None` uses
    /// the epsilon-times-dimension default.
    #[serde(default)]
    pub rcond: Option<f64>,
    /// Trailing fraction of each trial held out for model selection.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    /// Score candidates on the training slices instead of the held-out ones.
    #[serde(default)]
    pub in_sample: bool,
    #[serde(default = "default_horizon")]
    pub eval_horizon: usize,
    #[serde(default = "default_stride")]
    pub eval_stride: usize,
    /// Regress on coordinates divided by their largest training magnitude.
    /// The returned model is converted back to physical units.
    #[serde(default)]
    pub scale_coordinates: bool,
}

fn default_holdout() -> f64 {
    0.1
}
fn default_horizon() -> usize {
    25
}
fn default_stride() -> usize {
    5
}

impl IdentifyConfig {
    pub fn new(max_degree: usize, delays: DelaySpec, lambdas: Vec<f64>) -> Self {
        Self {
            max_degree,
            delays,
            lambdas,
            lasso: LassoSettings::default(),
            rcond: None,
            holdout_fraction: default_holdout(),
            in_sample: false,
            eval_horizon: default_horizon(),
            eval_stride: default_stride(),
            scale_coordinates: false,
        }
    }

    pub fn basis(&self) -> BasisSpec {
        BasisSpec::new(self.delays.embedded_dim(), self.max_degree)
    }
}

/// One row of the sweep report: `lambda,density,normalized_error,converged`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub density: f64,
    pub normalized_error: f64,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct Identification {
    pub model: KoopmanModel,
    pub report: Vec<SweepRow>,
    /// Index into `report` of the selected candidate.
    pub chosen: usize,
    pub bottom_block_deviation: f64,
}

impl Identification {
    pub fn write_report_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "lambda,density,normalized_error,converged")?;
        for r in &self.report {
            writeln!(out, "{},{},{},{}", r.lambda, r.density, r.normalized_error, r.converged)?;
        }
        Ok(())
    }
}

/// Splits each trial into a leading training slice and a trailing held-out
/// slice. Time order is preserved.
pub fn split_trials(trials: &[Trajectory], holdout_fraction: f64) -> (Vec<Trajectory>, Vec<Trajectory>) {
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for t in trials {
        let cut = ((t.len() as f64) * (1.0 - holdout_fraction)).floor() as usize;
        train.push(t.slice(0, cut, ""));
        hold.push(t.slice(cut, t.len(), "_holdout"));
    }
    (train, hold)
}

/// Per-coordinate factors `1 / max |value|` over the training data, laid out
/// like the delay embedding followed by the current input.
pub fn coordinate_scaling(trials: &[Trajectory], delays: &DelaySpec) -> Vec<f64> {
    let inv = |m: Option<f64>| match m {
        Some(v) if v > 0.0 && v.is_finite() => 1.0 / v,
        _ => 1.0,
    };
    let col_max = |pick: &dyn Fn(&Trajectory) -> f64| trials.iter().map(pick).reduce(f64::max);
    let state: Vec<f64> = (0..delays.state_dim)
        .map(|i| inv(col_max(&|t| t.states.column(i).amax())))
        .collect();
    let input: Vec<f64> = (0..delays.input_dim)
        .map(|j| inv(col_max(&|t| t.inputs.column(j).amax())))
        .collect();
    let mut out = Vec::with_capacity(delays.embedded_dim() + delays.input_dim);
    for _ in 0..=delays.state_delays {
        out.extend_from_slice(&state);
    }
    for _ in 0..delays.input_delays {
        out.extend_from_slice(&input);
    }
    out.extend_from_slice(&input);
    out
}

/// Factor each lifted column picks up when the embedded coordinates are
/// multiplied by `coords`: monomials scale by the matching product.
fn lifted_scaling(basis: &MonomialBasis, coords: &[f64], input_dim: usize) -> Vec<f64> {
    let q = coords.len() - input_dim;
    let mut s: Vec<f64> = basis
        .exponents()
        .iter()
        .map(|e| e.iter().zip(&coords[..q]).map(|(&p, d)| d.powi(p as i32)).product())
        .collect();
    s.extend_from_slice(&coords[q..]);
    s
}

fn scale_columns(m: &mut nalgebra::DMatrix<f64>, s: &[f64]) {
    for (j, f) in s.iter().enumerate() {
        m.column_mut(j).scale_mut(*f);
    }
}

fn score(model: &KoopmanModel, logs: &[Trajectory], horizon: usize, stride: usize) -> Result<PredictionReport> {
    let predictor = KoopmanPredictor::new(model, RolloutOptions::default())?;
    let opts = EvalOptions {
        horizon,
        stride,
        first_start: 0,
    };
    let reports = logs
        .iter()
        .map(|log| evaluate_prediction(&predictor, log, opts))
        .collect::<Result<Vec<_>>>()?;
    PredictionReport::merge(reports)
}

/// Lift, regress, extract, project and score a model for every lambda in the
/// grid; return the candidate with the lowest normalized prediction error.
pub fn identify(config: &IdentifyConfig, trials: &[Trajectory]) -> Result<Identification> {
    if config.lambdas.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    if trials.is_empty() {
        return Err(Error::InvalidArgument("no trials to identify from".into()));
    }
    if let Some(bad) = config.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {bad}")));
    }
    if !(0.0..1.0).contains(&config.holdout_fraction) {
        return Err(Error::InvalidArgument("holdout_fraction must lie in [0, 1)".into()));
    }
    let delays = config.delays;
    let spec = config.basis();
    let basis = MonomialBasis::new(spec)?;
    let (train, hold) = if config.in_sample || config.holdout_fraction == 0.0 {
        (trials.to_vec(), trials.to_vec())
    } else {
        split_trials(trials, config.holdout_fraction)
    };

    let snapshots = build_delay_snapshots(&train, &delays)?;
    let mut data = assemble_matrices(&basis, &snapshots)?;
    let scaling = config.scale_coordinates.then(|| coordinate_scaling(&train, &delays));
    let column_scale = scaling
        .as_ref()
        .map(|c| lifted_scaling(&basis, c, delays.input_dim));
    if let Some(s) = &column_scale {
        scale_columns(&mut data.gamma_alpha, s);
        scale_columns(&mut data.gamma_beta, s);
    }
    let least_squares = fit_least_squares(&data, config.rcond)?;

    // Solve in increasing lambda so each solve starts from its neighbour.
    let mut order: Vec<usize> = (0..config.lambdas.len()).collect();
    order.sort_by(|&i, &j| config.lambdas[i].total_cmp(&config.lambdas[j]));
    let mut warm = least_squares.u_bar.clone();
    let mut rows: Vec<Option<SweepRow>> = vec![None; config.lambdas.len()];
    let mut best: Option<(usize, KoopmanModel, f64, f64)> = None;
    for idx in order {
        let lambda = config.lambdas[idx];
        let kmat = if lambda == 0.0 {
            least_squares.clone()
        } else {
            fit_lasso_warm(&data, lambda, &config.lasso, Some(&warm))?
        };
        warm = kmat.u_bar.clone();
        let extracted = extract_model(&kmat, delays.state_dim, delays.input_dim)?;
        let mut p = fit_projection(&extracted.a, &extracted.b, &data, config.rcond)?;
        let (mut a, mut b) = (extracted.a, extracted.b);
        if let Some(s) = &column_scale {
            // z_scaled = S z, u_scaled = D u
            let big_n = a.nrows();
            for i in 0..big_n {
                for j in 0..big_n {
                    a[(i, j)] *= s[j] / s[i];
                    p[(i, j)] *= s[j] / s[i];
                }
                for j in 0..b.ncols() {
                    b[(i, j)] *= s[big_n + j] / s[i];
                }
            }
        }
        let mut model = KoopmanModel::from_parts(spec, delays, a, b, p, lambda)?;
        model.scaling = scaling.clone();
        let error = match score(&model, &hold, config.eval_horizon, config.eval_stride) {
            Ok(r) => r.normalized_error,
            Err(Error::Diverged { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        let eligible = kmat.converged && error.is_finite();
        if eligible && best.as_ref().is_none_or(|b| error < b.3) {
            best = Some((idx, model.clone(), extracted.bottom_block_deviation, error));
        }
        rows[idx] = Some(SweepRow {
            lambda,
            density: model.density,
            normalized_error: error,
            converged: kmat.converged,
        });
    }
    let report: Vec<SweepRow> = rows.into_iter().map(|r| r.expect("every lambda solved")).collect();
    let (chosen, model, deviation, _) = best.ok_or_else(|| {
        let diag: Vec<String> = report
            .iter()
            .map(|r| format!("lambda={} converged={} error={}", r.lambda, r.converged, r.normalized_error))
            .collect();
        Error::NoConvergedCandidate(diag.join("; "))
    })?;
    Ok(Identification {
        model,
        report,
        chosen,
        bottom_block_deviation: deviation,
    })
}

//! Simulated continuous-time plants, input signal generators and the
//! period-to-period noise characterization experiment.
//!
//! Plants are integrated with classical fourth-order Runge-Kutta under a
//! zero-order-hold input that is clipped to the plant's input box first.
//! Measurements are the designated output coordinates plus independent
//! Gaussian noise.
//!
//! The arm surrogate has state `[p1, p2, v1, v2]` and dynamics
//!
//! ```text
//! p' = v
//! v' = w^2 (G * sum_i tanh(u_i / U0) d_i - (1 + k2 |p|^2) p) - 2 zeta w v
//! ```
//!
//! with actuation directions `d_i` spaced at 120 degrees. Equal inputs on all
//! three channels cancel exactly.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Actuation directions of the arm surrogate, at 90, 210 and 330 degrees.
/// Written out so that they sum to zero exactly in floating point.
pub const ARM_DIRECTIONS: [[f64; 2]; 3] = [
    [0.0, 1.0],
    [-0.866_025_403_784_438_6, -0.5],
    [0.866_025_403_784_438_6, -0.5],
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmParams {
    /// Natural frequency, rad/s.
    pub omega: f64,
    pub zeta: f64,
    /// Static output displacement per unit of saturated actuation.
    pub gain: f64,
    /// Input level at which actuation begins to saturate.
    pub input_scale: f64,
    /// Cubic stiffening coefficient.
    pub stiffening: f64,
}

impl Default for ArmParams {
    fn default() -> Self {
        Self {
            omega: 3.0,
            zeta: 0.6,
            gain: 30.0,
            input_scale: 20.0,
            stiffening: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PlantModel {
    /// `x' = A x + B u`; rows of `a` and `b` are given row-major.
    Linear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
    /// `x1' = mu x1`, `x2' = kappa (x2 - x1^2) + u`.
    ExactLifting { mu: f64, kappa: f64 },
    ArmSurrogate(ArmParams),
}

impl PlantModel {
    pub fn state_dim(&self) -> usize {
        match self {
            PlantModel::Linear { a, .. } => a.len(),
            PlantModel::ExactLifting { .. } => 2,
            PlantModel::ArmSurrogate(_) => 4,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            PlantModel::Linear { b, .. } => b.first().map_or(0, |r| r.len()),
            PlantModel::ExactLifting { .. } => 1,
            PlantModel::ArmSurrogate(_) => 3,
        }
    }

    /// Writes `F(x, u)` into `dx`.
    pub fn vector_field(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        match self {
            PlantModel::Linear { a, b } => {
                for (i, d) in dx.iter_mut().enumerate() {
                    let ax: f64 = a[i].iter().zip(x).map(|(p, q)| p * q).sum();
                    let bu: f64 = b[i].iter().zip(u).map(|(p, q)| p * q).sum();
                    *d = ax + bu;
                }
            }
            PlantModel::ExactLifting { mu, kappa } => {
                dx[0] = mu * x[0];
                dx[1] = kappa * (x[1] - x[0] * x[0]) + u[0];
            }
            PlantModel::ArmSurrogate(p) => {
                let mut f = [0.0; 2];
                for (ui, d) in u.iter().zip(ARM_DIRECTIONS.iter()) {
                    let s = (ui / p.input_scale).tanh();
                    f[0] += s * d[0];
                    f[1] += s * d[1];
                }
                let r2 = x[0] * x[0] + x[1] * x[1];
                let stiff = 1.0 + p.stiffening * r2;
                let w2 = p.omega * p.omega;
                let damp = 2.0 * p.zeta * p.omega;
                dx[0] = x[2];
                dx[1] = x[3];
                dx[2] = w2 * (p.gain * f[0] - stiff * x[0]) - damp * x[2];
                dx[3] = w2 * (p.gain * f[1] - stiff * x[1]) - damp * x[3];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub model: PlantModel,
    /// State coordinates reported as outputs.
    pub outputs: Vec<usize>,
    pub u_min: f64,
    pub u_max: f64,
    /// Standard deviation of the additive measurement noise, per output.
    pub noise_std: f64,
    /// Internal integrator step; `None` means a tenth of the sample period.
    #[serde(default)]
    pub integrator_step: Option<f64>,
    /// Initial state; empty means the origin.
    #[serde(default)]
    pub initial_state: Vec<f64>,
}

impl PlantSpec {
    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        if n == 0 || self.input_dim() == 0 {
            return Err(Error::InvalidArgument("plant needs at least one state and one input".into()));
        }
        if let PlantModel::Linear { a, b } = &self.model {
            if a.iter().any(|r| r.len() != n) || b.len() != n || b.iter().any(|r| r.len() != self.input_dim()) {
                return Err(Error::InvalidArgument("linear plant matrices are ragged".into()));
            }
        }
        if self.outputs.is_empty() || self.outputs.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument(format!("output coordinates {:?} out of range", self.outputs)));
        }
        if !(self.u_min < self.u_max) {
            return Err(Error::InvalidArgument(format!(
                "input box [{}, {}] is empty",
                self.u_min, self.u_max
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument("noise_std must be >= 0".into()));
        }
        if let Some(h) = self.integrator_step {
            if !(h > 0.0) {
                return Err(Error::InvalidArgument("integrator step must be positive".into()));
            }
        }
        if !self.initial_state.is_empty() && self.initial_state.len() != n {
            return Err(Error::Dimension {
                context: "plant initial state",
                expected: n,
                got: self.initial_state.len(),
            });
        }
        Ok(())
    }

    pub fn initial_state(&self) -> DVector<f64> {
        if self.initial_state.is_empty() {
            DVector::zeros(self.state_dim())
        } else {
            DVector::from_column_slice(&self.initial_state)
        }
    }

    pub fn clip(&self, u: &DVector<f64>) -> DVector<f64> {
        u.map(|v| v.clamp(self.u_min, self.u_max))
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.outputs.len(), self.outputs.iter().map(|&i| x[i]))
    }

    /// Noisy measurement of the designated outputs.
    pub fn measure<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let mut y = self.output(x);
        if self.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.noise_std).expect("validated noise std");
            for v in y.iter_mut() {
                *v += normal.sample(rng);
            }
        }
        y
    }

    /// Noise-free flow over `sample_period` under the clipped input held
    /// constant.
    pub fn propagate(&self, x: &DVector<f64>, u: &DVector<f64>, sample_period: f64) -> Result<DVector<f64>> {
        if !(sample_period > 0.0) {
            return Err(Error::InvalidArgument("sample period must be positive".into()));
        }
        let h_target = self.integrator_step.unwrap_or(sample_period / 10.0);
        if h_target > sample_period * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "integrator step {h_target} exceeds the sample period {sample_period}"
            )));
        }
        let substeps = (sample_period / h_target - 1e-9).ceil().max(1.0) as usize;
        let h = sample_period / substeps as f64;
        let u = self.clip(u);
        let mut state = x.as_slice().to_vec();
        for _ in 0..substeps {
            rk4_step(&self.model, &mut state, u.as_slice(), h);
        }
        if state.iter().all(|v| v.is_finite()) {
            Ok(DVector::from_vec(state))
        } else {
            Err(Error::Diverged { step: 1 })
        }
    }

    /// One sampling period: returns the next state and its noisy measurement.
    pub fn step<R: Rng + ?Sized>(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        sample_period: f64,
        rng: &mut R,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite plant state".into()));
        }
        let next = self.propagate(x, u, sample_period)?;
        let y = self.measure(&next, rng);
        Ok((next, y))
    }

    /// Runs the plant from `x0` under `inputs` (one row per sample) and logs
    /// measurements and applied (clipped) inputs.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        id: &str,
        x0: &DVector<f64>,
        inputs: &DMatrix<f64>,
        sample_period: f64,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let steps = inputs.nrows();
        let mut states = DMatrix::zeros(steps, self.output_dim());
        let mut applied = DMatrix::zeros(steps, self.input_dim());
        let mut x = x0.clone();
        for k in 0..steps {
            let y = self.measure(&x, rng);
            states.row_mut(k).copy_from(&y.transpose());
            let u = self.clip(&inputs.row(k).transpose());
            applied.row_mut(k).copy_from(&u.transpose());
            if k + 1 < steps {
                x = self
                    .propagate(&x, &u, sample_period)
                    .map_err(|_| Error::Diverged { step: k + 1 })?;
            }
        }
        let times = (0..steps).map(|k| k as f64 * sample_period).collect();
        Trajectory::new(id, times, states, applied)
    }
}

fn rk4_step(model: &PlantModel, x: &mut [f64], u: &[f64], h: f64) {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    model.vector_field(x, u, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    model.vector_field(&tmp, u, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    model.vector_field(&tmp, u, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    model.vector_field(&tmp, u, &mut k4);
    for i in 0..n {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Plant whose flow is exactly linear in the lifted coordinates
/// `[x1, x2, x1^2]`. Inputs are unbounded in practice (box `[-1e3, 1e3]`).
pub fn exact_lifting_plant() -> PlantSpec {
    exact_lifting_plant_with(-0.5, -1.0)
}

pub fn exact_lifting_plant_with(mu: f64, kappa: f64) -> PlantSpec {
    PlantSpec {
        model: PlantModel::ExactLifting { mu, kappa },
        outputs: vec![0, 1],
        u_min: -1e3,
        u_max: 1e3,
        noise_std: 0.0,
        integrator_step: None,
        initial_state: Vec::new(),
    }
}

/// Measurement noise of the default arm surrogate, in output units.
pub const ARM_NOISE_STD: f64 = 0.4;

pub fn arm_surrogate_plant() -> PlantSpec {
    arm_surrogate_plant_with(ArmParams::default(), ARM_NOISE_STD)
}

pub fn arm_surrogate_plant_with(params: ArmParams, noise_std: f64) -> PlantSpec {
    PlantSpec {
        model: PlantModel::ArmSurrogate(params),
        outputs: vec![0, 1],
        u_min: 0.0,
        u_max: 10.0,
        noise_std,
        integrator_step: None,
        initial_state: Vec::new(),
    }
}

/// Three sinusoids, a third of a period apart: channel `i` (0-based) is
/// `6 sin(2 pi / T (k T_s - i T / 3)) + 3`. Values are not clipped.
pub fn sinusoid_inputs(period: f64, sample_period: f64, k: usize) -> [f64; 3] {
    let t = k as f64 * sample_period;
    let w = 2.0 * std::f64::consts::PI / period;
    std::array::from_fn(|i| 6.0 * (w * (t - i as f64 * period / 3.0)).sin() + 3.0)
}

pub fn sinusoid_signal(period: f64, sample_period: f64, steps: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(steps, 3);
    for k in 0..steps {
        let u = sinusoid_inputs(period, sample_period, k);
        for (j, v) in u.iter().enumerate() {
            out[(k, j)] = *v;
        }
    }
    out
}

/// Piecewise-linear interpolation through the columns of `table`
/// (one row per channel), `transition` seconds per column. Channel `i`
/// lags channel 0 by `i * transition / channels`; before its first column a
/// lagged channel holds that column.
pub fn ramp_inputs(table: &DMatrix<f64>, transition: f64, t: f64) -> Result<DVector<f64>> {
    let cols = table.ncols();
    if cols < 2 {
        return Err(Error::InvalidArgument("ramp table needs at least two columns".into()));
    }
    if !(transition > 0.0) {
        return Err(Error::InvalidArgument("transition period must be positive".into()));
    }
    let span = (cols - 1) as f64 * transition;
    if !(0.0..=span).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside the table span [0, {span}]")));
    }
    let channels = table.nrows();
    let mut out = DVector::zeros(channels);
    for i in 0..channels {
        let tau = t - i as f64 * transition / channels as f64;
        out[i] = if tau <= 0.0 {
            table[(i, 0)]
        } else {
            let k = ((tau / transition).floor() as usize).min(cols - 2);
            let frac = tau / transition - k as f64;
            table[(i, k)] + frac * (table[(i, k + 1)] - table[(i, k)])
        };
    }
    Ok(out)
}

/// Uniform random table in `[lo, hi]` with `channels` rows.
pub fn random_ramp_table<R: Rng + ?Sized>(channels: usize, columns: usize, lo: f64, hi: f64, rng: &mut R) -> DMatrix<f64> {
    let dist = Uniform::new_inclusive(lo, hi).expect("valid range");
    DMatrix::from_fn(channels, columns, |_, _| dist.sample(rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SignalSpec {
    Sinusoid {
        period: f64,
    },
    /// Random ramps; each trial draws its transition period uniformly from
    /// `[transition_min, transition_max]`.
    RandomRamp {
        transition_min: f64,
        transition_max: f64,
    },
}

impl SignalSpec {
    /// Input samples for one trial of `steps` samples.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        channels: usize,
        steps: usize,
        sample_period: f64,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<DMatrix<f64>> {
        match *self {
            SignalSpec::Sinusoid { period } => {
                if channels != 3 {
                    return Err(Error::InvalidArgument("sinusoid signals drive exactly three channels".into()));
                }
                if !(period > 0.0) {
                    return Err(Error::InvalidArgument("sinusoid period must be positive".into()));
                }
                Ok(sinusoid_signal(period, sample_period, steps))
            }
            SignalSpec::RandomRamp {
                transition_min,
                transition_max,
            } => {
                if !(transition_min > 0.0 && transition_min <= transition_max) {
                    return Err(Error::InvalidArgument("bad transition period range".into()));
                }
                let transition = if transition_min == transition_max {
                    transition_min
                } else {
                    rng.random_range(transition_min..=transition_max)
                };
                let duration = steps as f64 * sample_period;
                let columns = (duration / transition).ceil() as usize + 2;
                let table = random_ramp_table(channels, columns, lo, hi, rng);
                let mut out = DMatrix::zeros(steps, channels);
                for k in 0..steps {
                    let u = ramp_inputs(&table, transition, k as f64 * sample_period)?;
                    out.row_mut(k).copy_from(&u.transpose());
                }
                Ok(out)
            }
        }
    }
}

/// Generator for trial `index` of a seeded batch. Trials use disjoint
/// ChaCha streams of the same key.
pub fn trial_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Simulates `trials` independent runs of `steps` samples each, in parallel.
pub fn collect_trials(
    plant: &PlantSpec,
    signal: &SignalSpec,
    trials: usize,
    steps: usize,
    sample_period: f64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    plant.validate()?;
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(seed, i);
            let inputs = signal.generate(plant.input_dim(), steps, sample_period, plant.u_min, plant.u_max, &mut rng)?;
            let mut traj = plant.simulate(&format!("trial_{i:03}"), &plant.initial_state(), &inputs, sample_period, &mut rng)?;
            traj.seed = Some(seed);
            Ok(traj)
        })
        .collect()
}

/// Superimposed per-period responses for one sinusoid period.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PeriodResponse {
    pub period: f64,
    /// Mean output over one period, one row per sample.
    pub mean: DMatrix<f64>,
    /// Every period's measured outputs, `periods` blocks stacked by rows.
    pub responses: DMatrix<f64>,
    pub periods: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseReport {
    pub responses: Vec<PeriodResponse>,
    /// Euclidean distance of every measured point from the mean trajectory.
    pub distances: Vec<f64>,
    /// Pooled per-coordinate standard deviation about the mean trajectory.
    pub spread_std: f64,
    /// Fraction of per-coordinate deviations within two `spread_std`.
    pub within_two_std: f64,
    pub max_deviation: f64,
}

impl NoiseReport {
    /// Scale against which tracking errors are judged: two spread deviations.
    pub fn noise_floor(&self) -> f64 {
        2.0 * self.spread_std
    }
}

/// Drives the plant with sinusoids of each period in `periods`, discards one
/// settling period, superimposes the next `periods_per_t` periods and
/// measures their spread about the mean period response.
pub fn characterize_noise(
    plant: &PlantSpec,
    periods: &[f64],
    periods_per_t: usize,
    sample_period: f64,
    seed: u64,
) -> Result<NoiseReport> {
    plant.validate()?;
    if periods_per_t < 2 {
        return Err(Error::InvalidArgument("need at least two periods per T".into()));
    }
    if periods.is_empty() {
        return Err(Error::InvalidArgument("no sinusoid periods given".into()));
    }
    let n = plant.output_dim();
    let responses: Vec<PeriodResponse> = periods
        .par_iter()
        .enumerate()
        .map(|(idx, &period)| {
            let ratio = period / sample_period;
            let per = ratio.round() as usize;
            if per == 0 || (ratio - per as f64).abs() > 1e-9 * ratio.max(1.0) {
                return Err(Error::InvalidArgument(format!(
                    "period {period} is not a whole number of samples"
                )));
            }
            let total = per * (periods_per_t + 1);
            let inputs = sinusoid_signal(period, sample_period, total);
            let mut rng = trial_rng(seed, idx);
            let log = plant.simulate("noise", &plant.initial_state(), &inputs, sample_period, &mut rng)?;
            let responses = log.states.rows(per, per * periods_per_t).into_owned();
            let mut mean = DMatrix::zeros(per, n);
            for p in 0..periods_per_t {
                mean += responses.rows(p * per, per);
            }
            mean /= periods_per_t as f64;
            Ok(PeriodResponse {
                period,
                mean,
                responses,
                periods: periods_per_t,
            })
        })
        .collect::<Result<_>>()?;

    let mut distances = Vec::new();
    let mut deviations = Vec::new();
    for r in &responses {
        let per = r.mean.nrows();
        for p in 0..r.periods {
            for k in 0..per {
                let mut d2 = 0.0;
                for j in 0..n {
                    let d = r.responses[(p * per + k, j)] - r.mean[(k, j)];
                    deviations.push(d);
                    d2 += d * d;
                }
                distances.push(d2.sqrt());
            }
        }
    }
    let spread_std = (deviations.iter().map(|d| d * d).sum::<f64>() / deviations.len() as f64).sqrt();
    let within_two_std = if spread_std > 0.0 {
        deviations.iter().filter(|d| d.abs() <= 2.0 * spread_std).count() as f64 / deviations.len() as f64
    } else {
        1.0
    };
    let max_deviation = distances.iter().cloned().fold(0.0, f64::max);
    Ok(NoiseReport {
        responses,
        distances,
        spread_std,
        within_two_std,
        max_deviation,
    })
}

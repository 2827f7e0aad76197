//! Receding-horizon output tracking with lifted (or plain) linear models.
//!
//! Stage costs penalize `w_i |y[i] - r[i]|^2` with `y = C z`, i.e.
//! `G_i = w_i C'C`, `g_i = -2 w_i C' r[i]`, running weight `w_r` for
//! `i < N_h` and terminal weight `w_T` at `N_h`; inputs carry `eps |u|^2`
//! and must stay in a box.

mod closed_loop;
mod reference;

pub use closed_loop::{run_closed_loop, ClosedLoopLog, ClosedLoopSummary, LiftedModelPlant, PlantRunner, SimulatedPlant, Tick};
pub use reference::{make_reference, Shape, TrackingTask};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baseline::LinearSSModel;
use crate::error::{check_dim, Error, Result};
use crate::lifting::MonomialBasis;
use crate::qp::{MpcProblemSpec, QpSettings, QpSolution, QpSolver, QpStatus, StageConstraint, WarmStart};
use crate::regression::KoopmanModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub terminal_weight: f64,
    pub running_weight: f64,
    /// `eps` in `H_i = eps I`.
    #[serde(default = "default_input_regularization")]
    pub input_regularization: f64,
    /// Input box; infinite bounds are dropped from the constraint set.
    pub u_min: f64,
    pub u_max: f64,
    pub sample_period: f64,
    #[serde(default)]
    pub solver: QpSettings,
}

fn default_input_regularization() -> f64 {
    1e-6
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            horizon: 25,
            terminal_weight: 100.0,
            running_weight: 0.1,
            input_regularization: default_input_regularization(),
            u_min: 0.0,
            u_max: 10.0,
            sample_period: 0.1,
            solver: QpSettings::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if !(self.terminal_weight >= 0.0 && self.running_weight >= 0.0 && self.input_regularization >= 0.0) {
            return Err(Error::InvalidArgument("cost weights must be non-negative".into()));
        }
        if !(self.u_min < self.u_max) {
            return Err(Error::InvalidArgument("input box is empty".into()));
        }
        if !(self.sample_period > 0.0) {
            return Err(Error::InvalidArgument("sample period must be positive".into()));
        }
        Ok(())
    }

    /// Output weight of stage `i` in `0..=N_h`.
    pub fn weight(&self, stage: usize) -> f64 {
        if stage == self.horizon {
            self.terminal_weight
        } else {
            self.running_weight
        }
    }

    /// Per-stage box rows `[I; -I] u <= [u_max; -u_min]`, finite sides only.
    fn box_rows(&self, m: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut f = Vec::new();
        let mut b = Vec::new();
        for (sign, bound) in [(1.0, self.u_max), (-1.0, -self.u_min)] {
            if bound.is_finite() {
                for j in 0..m {
                    let mut row = vec![0.0; m];
                    row[j] = sign;
                    f.push(row);
                    b.push(bound);
                }
            }
        }
        let rows = b.len();
        (
            DMatrix::from_fn(rows, m, |i, j| f[i][j]),
            DVector::from_vec(b),
        )
    }
}

/// A linear prediction model `z+ = A z + B u`, `y = C z` together with the
/// map from measured history to its state.
pub trait ControlModel: Sync {
    fn a(&self) -> &DMatrix<f64>;
    fn b(&self) -> &DMatrix<f64>;
    fn c(&self) -> &DMatrix<f64>;
    /// `(outputs, inputs)` history lengths needed by [`ControlModel::state`].
    fn history(&self) -> (usize, usize);
    /// State from histories ordered newest first: `outputs[0] = y[k]`,
    /// `inputs[0] = u[k-1]`.
    fn state(&self, outputs: &[DVector<f64>], inputs: &[DVector<f64>]) -> Result<DVector<f64>>;

    fn state_dim(&self) -> usize {
        self.a().nrows()
    }
    fn output_dim(&self) -> usize {
        self.c().nrows()
    }
    fn input_dim(&self) -> usize {
        self.b().ncols()
    }
}

/// A Koopman model used for control: `(A_hat, B_hat, C)` and the lifting.
pub struct KoopmanControl<'a> {
    pub model: &'a KoopmanModel,
    basis: MonomialBasis,
}

impl<'a> KoopmanControl<'a> {
    pub fn new(model: &'a KoopmanModel) -> Result<Self> {
        Ok(Self {
            basis: model.compile_basis()?,
            model,
        })
    }
}

impl ControlModel for KoopmanControl<'_> {
    fn a(&self) -> &DMatrix<f64> {
        &self.model.a_hat
    }
    fn b(&self) -> &DMatrix<f64> {
        &self.model.b_hat
    }
    fn c(&self) -> &DMatrix<f64> {
        &self.model.c
    }
    fn history(&self) -> (usize, usize) {
        (self.model.delays.state_delays + 1, self.model.delays.input_delays)
    }
    fn state(&self, outputs: &[DVector<f64>], inputs: &[DVector<f64>]) -> Result<DVector<f64>> {
        let emb = self.model.delays.embed_from(outputs, inputs)?;
        self.basis.lift(emb.as_slice())
    }
}

impl ControlModel for LinearSSModel {
    fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    fn history(&self) -> (usize, usize) {
        let blocks = self.output_lags.max(self.input_lags);
        (blocks, blocks - 1)
    }
    fn state(&self, outputs: &[DVector<f64>], inputs: &[DVector<f64>]) -> Result<DVector<f64>> {
        self.initial_state(outputs, inputs)
    }
}

fn check_window(config: &ControllerConfig, n: usize, window: &[DVector<f64>]) -> Result<()> {
    check_dim("reference window length", config.horizon + 1, window.len())?;
    for r in window {
        check_dim("reference point dimension", n, r.len())?;
    }
    Ok(())
}

/// The full (undensed) tracking program for a reference window
/// `r[0..=N_h]`.
pub fn build_tracking_problem(
    config: &ControllerConfig,
    model: &dyn ControlModel,
    window: &[DVector<f64>],
) -> Result<MpcProblemSpec> {
    config.validate()?;
    let c = model.c();
    check_window(config, c.nrows(), window)?;
    let m = model.input_dim();
    let ctc = c.tr_mul(c);
    let mut state_cost = Vec::with_capacity(config.horizon + 1);
    let mut state_linear = Vec::with_capacity(config.horizon + 1);
    for (i, r) in window.iter().enumerate() {
        let w = config.weight(i);
        state_cost.push(&ctc * w);
        state_linear.push(c.tr_mul(r) * (-2.0 * w));
    }
    let input_cost = vec![DMatrix::identity(m, m) * config.input_regularization; config.horizon];
    let input_linear = vec![DVector::zeros(m); config.horizon];
    let (f, b) = config.box_rows(m);
    let constraints = if b.is_empty() {
        Vec::new()
    } else {
        (0..config.horizon)
            .map(|stage| StageConstraint {
                stage,
                e: DMatrix::zeros(b.len(), model.state_dim()),
                f: f.clone(),
                b: b.clone(),
            })
            .collect()
    };
    MpcProblemSpec::new(
        config.horizon,
        model.a().clone(),
        model.b().clone(),
        state_cost,
        state_linear,
        input_cost,
        input_linear,
        constraints,
    )
}

/// Result of one controller tick.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// First input of the optimal sequence, clamped to the box.
    pub u: DVector<f64>,
    pub solution: QpSolution,
}

impl StepResult {
    pub fn status(&self) -> QpStatus {
        self.solution.status
    }
}

/// Tracking controller with the condensation precomputed.
///
/// With `Phi_i = C A^i` and `Theta_i = C S_i` (the output-space input
/// maps), the dense Hessian `sum_i w_i Theta_i' Theta_i + eps I` is fixed,
/// so it and the ADMM factorization are built once. Each tick only forms
/// `q = 2 sum_i w_i Theta_i' (Phi_i z0 - r_i)`.
pub struct MpcController<'a> {
    config: ControllerConfig,
    model: &'a dyn ControlModel,
    phi: Vec<DMatrix<f64>>,
    theta: Vec<DMatrix<f64>>,
    hessian: DMatrix<f64>,
    a_in: DMatrix<f64>,
    b_in: DVector<f64>,
    solver: QpSolver,
    warm: Option<WarmStart>,
}

impl<'a> MpcController<'a> {
    pub fn new(config: ControllerConfig, model: &'a dyn ControlModel) -> Result<Self> {
        config.validate()?;
        let (nh, m, n) = (config.horizon, model.input_dim(), model.output_dim());
        let dim = nh * m;
        check_dim("B rows", model.state_dim(), model.b().nrows())?;
        check_dim("C cols", model.state_dim(), model.c().ncols())?;

        // Phi_i = C A^i, Theta_i = C S_i with S_{i+1} = A S_i + B e_i
        let mut phi = Vec::with_capacity(nh + 1);
        phi.push(model.c().clone());
        for i in 0..nh {
            let next = &phi[i] * model.a();
            phi.push(next);
        }
        // block j of Theta_i is C A^{i-1-j} B = Phi_{i-1-j} B
        let markov: Vec<DMatrix<f64>> = phi.iter().take(nh).map(|p| p * model.b()).collect();
        let mut theta = Vec::with_capacity(nh + 1);
        for i in 0..=nh {
            let mut t = DMatrix::zeros(n, dim);
            for j in 0..i {
                t.columns_mut(j * m, m).copy_from(&markov[i - 1 - j]);
            }
            theta.push(t);
        }

        let mut hessian = DMatrix::identity(dim, dim) * config.input_regularization;
        for (i, t) in theta.iter().enumerate().skip(1) {
            hessian += t.tr_mul(t) * config.weight(i);
        }
        let hessian = crate::linalg::symmetrize(&hessian);

        let (f, b) = config.box_rows(m);
        let per = b.len();
        let mut a_in = DMatrix::zeros(per * nh, dim);
        let mut b_in = DVector::zeros(per * nh);
        for i in 0..nh {
            a_in.view_mut((i * per, i * m), (per, m)).copy_from(&f);
            b_in.rows_mut(i * per, per).copy_from(&b);
        }
        let solver = QpSolver::new(&hessian, &a_in, config.solver)?;
        Ok(Self {
            config,
            model,
            phi,
            theta,
            hessian,
            a_in,
            b_in,
            solver,
            warm: None,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn constraints(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.a_in, &self.b_in)
    }

    /// Linear term and constant of the dense objective for `(z0, window)`.
    pub fn linear_term(&self, z0: &DVector<f64>, window: &[DVector<f64>]) -> Result<(DVector<f64>, f64)> {
        check_dim("lifted state length", self.model.state_dim(), z0.len())?;
        check_window(&self.config, self.model.output_dim(), window)?;
        let mut q = DVector::zeros(self.hessian.nrows());
        let mut constant = 0.0;
        for i in 0..=self.config.horizon {
            let w = self.config.weight(i);
            let free = &self.phi[i] * z0;
            constant += w * (free.norm_squared() - 2.0 * window[i].dot(&free));
            if i > 0 {
                q += self.theta[i].tr_mul(&(free - &window[i])) * (2.0 * w);
            }
        }
        Ok((q, constant))
    }

    /// Solves the horizon problem from a given model state.
    pub fn solve_from_state(&mut self, z0: &DVector<f64>, window: &[DVector<f64>]) -> Result<QpSolution> {
        let (q, constant) = self.linear_term(z0, window)?;
        let warm = self.warm.take();
        let sol = self.solver.solve(&q, &self.b_in, constant, warm.as_ref())?;
        self.warm = Some(shift_warm_start(&sol, self.model.input_dim(), self.b_in.len() / self.config.horizon));
        Ok(sol)
    }

    pub fn step_from_state(&mut self, z0: &DVector<f64>, window: &[DVector<f64>]) -> Result<StepResult> {
        let solution = self.solve_from_state(z0, window)?;
        let m = self.model.input_dim();
        let u = solution
            .u
            .rows(0, m)
            .map(|v| v.clamp(self.config.u_min, self.config.u_max));
        Ok(StepResult { u, solution })
    }

    /// One tick: build the model state from measured history and return the
    /// first optimal input.
    pub fn step(&mut self, outputs: &[DVector<f64>], inputs: &[DVector<f64>], window: &[DVector<f64>]) -> Result<StepResult> {
        let z0 = self.model.state(outputs, inputs)?;
        self.step_from_state(&z0, window)
    }

    pub fn reset_warm_start(&mut self) {
        self.warm = None;
    }
}

/// Drops the first stage of the previous solution and repeats the last.
fn shift_warm_start(sol: &QpSolution, m: usize, per_stage: usize) -> WarmStart {
    let shift = |v: &DVector<f64>, block: usize| {
        let len = v.len();
        if len <= block || block == 0 {
            return v.clone();
        }
        let mut out = DVector::zeros(len);
        out.rows_mut(0, len - block).copy_from(&v.rows(block, len - block));
        out.rows_mut(len - block, block).copy_from(&v.rows(len - block, block));
        out
    };
    WarmStart {
        x: shift(&sol.u, m),
        y: shift(&sol.duals, per_stage),
    }
}

/// One-shot controller tick (builds the condensation from scratch).
pub fn mpc_step(
    config: &ControllerConfig,
    model: &dyn ControlModel,
    outputs: &[DVector<f64>],
    inputs: &[DVector<f64>],
    window: &[DVector<f64>],
) -> Result<StepResult> {
    MpcController::new(*config, model)?.step(outputs, inputs, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::condense;

    struct Toy {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
    }

    impl ControlModel for Toy {
        fn a(&self) -> &DMatrix<f64> {
            &self.a
        }
        fn b(&self) -> &DMatrix<f64> {
            &self.b
        }
        fn c(&self) -> &DMatrix<f64> {
            &self.c
        }
        fn history(&self) -> (usize, usize) {
            (1, 0)
        }
        fn state(&self, outputs: &[DVector<f64>], _: &[DVector<f64>]) -> Result<DVector<f64>> {
            Ok(outputs[0].clone())
        }
    }

    fn toy() -> Toy {
        Toy {
            a: DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, 0.0, 0.8, 0.2, 0.1, 0.0, 0.7]),
            b: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 0.5, 0.0, 1.0]),
            c: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        }
    }

    #[test]
    fn structured_condensation_matches_general() {
        let model = toy();
        let config = ControllerConfig {
            horizon: 4,
            ..Default::default()
        };
        let window: Vec<DVector<f64>> = (0..5).map(|i| DVector::from_vec(vec![i as f64, -1.0])).collect();
        let z0 = DVector::from_vec(vec![0.3, -0.2, 1.0]);
        let spec = build_tracking_problem(&config, &model, &window).unwrap();
        let general = condense(&spec, &z0).unwrap();
        let ctrl = MpcController::new(config, &model).unwrap();
        let (q, constant) = ctrl.linear_term(&z0, &window).unwrap();
        assert!((ctrl.hessian() - &general.hessian).amax() < 1e-12);
        assert!((q - &general.linear).amax() < 1e-12);
        assert!((constant - general.constant).abs() < 1e-12);
        assert_eq!(ctrl.constraints().0, &general.a_in);
        assert_eq!(ctrl.constraints().1, &general.b_in);
    }

    #[test]
    fn zero_reference_kills_linear_terms() {
        let model = toy();
        let config = ControllerConfig::default();
        let window = vec![DVector::zeros(2); config.horizon + 1];
        let spec = build_tracking_problem(&config, &model, &window).unwrap();
        assert!(spec.state_linear.iter().all(|g| g.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn applied_input_respects_box() {
        let model = toy();
        let config = ControllerConfig {
            horizon: 5,
            ..Default::default()
        };
        let window = vec![DVector::from_vec(vec![1e3, -1e3]); 6];
        let res = mpc_step(&config, &model, &[DVector::zeros(3)], &[], &window).unwrap();
        assert!(res.u.iter().all(|v| (0.0..=10.0).contains(v)));
    }
}

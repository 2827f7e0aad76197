//! Independent reference solutions shared with the acceptance suite.

use koopman_core::mpc::ControlModel;
use koopman_core::qp::{DenseQp, MpcProblemSpec, StageConstraint};
use koopman_core::Result;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn uniform_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn uniform_vector(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// Strictly convex, feasible QP with `dim` variables and `cons` inequalities.
pub fn random_qp(dim: usize, cons: usize, rng: &mut ChaCha8Rng) -> DenseQp {
    let m = uniform_matrix(dim, dim, rng);
    let hessian = &m * m.transpose() + DMatrix::identity(dim, dim) * rng.random_range(0.05..1.0);
    let linear = uniform_vector(dim, rng) * 3.0;
    let a_in = uniform_matrix(cons, dim, rng);
    let interior = uniform_vector(dim, rng);
    let slack = DVector::from_fn(cons, |_, _| rng.random_range(0.0..1.0));
    let b_in = &a_in * interior + slack;
    DenseQp::new(hessian, linear, a_in, b_in).expect("consistent dimensions")
}

/// Minimizer of `x'Qx + q'x` s.t. `Ax <= b` by enumerating every active set
/// and keeping the KKT point (feasible, non-negative multipliers) of least
/// objective. Returns the solution and its objective.
pub fn active_set_oracle(qp: &DenseQp) -> (DVector<f64>, f64) {
    let d = qp.dim();
    let c = qp.constraint_count();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << c) {
        let active: Vec<usize> = (0..c).filter(|i| mask & (1 << i) != 0).collect();
        if active.len() > d {
            continue;
        }
        let k = active.len();
        let mut kkt = DMatrix::zeros(d + k, d + k);
        kkt.view_mut((0, 0), (d, d)).copy_from(&(&qp.hessian * 2.0));
        let mut rhs = DVector::zeros(d + k);
        rhs.rows_mut(0, d).copy_from(&(-&qp.linear));
        for (r, &i) in active.iter().enumerate() {
            for j in 0..d {
                kkt[(d + r, j)] = qp.a_in[(i, j)];
                kkt[(j, d + r)] = qp.a_in[(i, j)];
            }
            rhs[d + r] = qp.b_in[i];
        }
        let Some(sol) = kkt.full_piv_lu().solve(&rhs) else {
            continue;
        };
        if !sol.iter().all(|v| v.is_finite()) {
            continue;
        }
        let x = sol.rows(0, d).into_owned();
        let feasible = (&qp.a_in * &x - &qp.b_in).iter().all(|&s| s <= 1e-9);
        let dual_ok = sol.rows(d, k).iter().all(|&y| y >= -1e-9);
        if feasible && dual_ok {
            let f = qp.objective(&x);
            if best.as_ref().is_none_or(|(_, g)| f < *g) {
                best = Some((x, f));
            }
        }
    }
    best.expect("a feasible strictly convex QP has a KKT point")
}

/// Random well-posed MPC program with PSD stage costs and a few mixed
/// state/input constraints.
pub fn random_mpc_spec(rng: &mut ChaCha8Rng) -> MpcProblemSpec {
    let n = rng.random_range(1..=5);
    let m = rng.random_range(1..=3);
    let nh = rng.random_range(1..=6);
    let a = uniform_matrix(n, n, rng) * 0.7;
    let b = uniform_matrix(n, m, rng);
    let psd = |size: usize, rng: &mut ChaCha8Rng| {
        let f = uniform_matrix(size, size, rng);
        &f * f.transpose()
    };
    let state_cost = (0..=nh).map(|_| psd(n, rng)).collect();
    let state_linear = (0..=nh).map(|_| uniform_vector(n, rng)).collect();
    let input_cost = (0..nh).map(|_| psd(m, rng)).collect();
    let input_linear = (0..nh).map(|_| uniform_vector(m, rng)).collect();
    let mut constraints = Vec::new();
    for stage in 0..nh {
        if rng.random_bool(0.5) {
            let rows = rng.random_range(1..=3);
            constraints.push(StageConstraint {
                stage,
                e: uniform_matrix(rows, n, rng),
                f: uniform_matrix(rows, m, rng),
                b: uniform_vector(rows, rng),
            });
        }
    }
    MpcProblemSpec::new(nh, a, b, state_cost, state_linear, input_cost, input_linear, constraints).expect("valid spec")
}

/// Linear model whose state is read directly from the newest "output".
pub struct DirectStateModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl ControlModel for DirectStateModel {
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

impl DirectStateModel {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(2..=6);
        let m = rng.random_range(1..=3);
        let p = rng.random_range(1..=n.min(3));
        Self {
            a: uniform_matrix(n, n, rng),
            b: uniform_matrix(n, m, rng),
            c: uniform_matrix(p, n, rng),
        }
    }
}

/// Minimizer over `u` of `w_T |C(A z0 + B u) - r1|^2 + eps |u|^2`. When
/// `CB` is wide the push-through form `G' (w_T G G' + eps I)^-1` keeps the
/// solve on the smaller, better conditioned side.
pub fn horizon_one_input(
    model: &DirectStateModel,
    z0: &DVector<f64>,
    r1: &DVector<f64>,
    terminal_weight: f64,
    eps: f64,
) -> DVector<f64> {
    let g = &model.c * &model.b;
    let (p, m) = g.shape();
    let e = &model.c * &model.a * z0 - r1;
    if p < m {
        let lhs = &g * g.transpose() * terminal_weight + DMatrix::identity(p, p) * eps;
        let v = lhs.cholesky().expect("eps > 0").solve(&(e * terminal_weight));
        -g.tr_mul(&v)
    } else {
        let lhs = g.tr_mul(&g) * terminal_weight + DMatrix::identity(m, m) * eps;
        lhs.cholesky().expect("eps > 0").solve(&(g.tr_mul(&e) * (-terminal_weight)))
    }
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = m.iter().map(|v| v.abs()).sum::<f64>();
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    let a = m * scale;
    let n = m.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=30 {
        term = &term * &a / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Zero-order-hold discretization `(A, B)` of the lifted exact-lifting
/// system `d/dt [x1, x2, x1^2] = [[mu, 0, 0], [0, kappa, -kappa], [0, 0, 2 mu]] z + e2 u`.
pub fn exact_lifting_discrete(mu: f64, kappa: f64, ts: f64) -> (DMatrix<f64>, DVector<f64>) {
    let mut aug = DMatrix::zeros(4, 4);
    aug[(0, 0)] = mu;
    aug[(1, 1)] = kappa;
    aug[(1, 2)] = -kappa;
    aug[(2, 2)] = 2.0 * mu;
    aug[(1, 3)] = 1.0;
    let e = expm(&(aug * ts));
    (e.view((0, 0), (3, 3)).into_owned(), e.view((0, 3), (3, 1)).column(0).into_owned())
}

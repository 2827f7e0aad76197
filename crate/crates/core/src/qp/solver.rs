//! ADMM for `min x' Q x + q' x` subject to `A x <= b`, with an active-set
//! polishing step and explicit KKT verification.
//!
//! The iteration is the operator-splitting scheme on
//! `min 1/2 x' P x + q' x, A x = z, z <= b` with `P = 2 Q`:
//!
//! ```text
//! x~ = (P + sigma I + rho A'A)^-1 (sigma x - q + A'(rho z - y))
//! x  = alpha x~ + (1 - alpha) x
//! z+ = min(alpha A x~ + (1 - alpha) z + y / rho, b)
//! y  = y + rho (alpha A x~ + (1 - alpha) z - z+)
//! ```
//!
//! Multipliers `y` are those of `A x <= b`, so at a solution `y >= 0` and
//! `2 Q x + q + A' y = 0`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::condense::DenseQp;
use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation.
    pub alpha: f64,
    /// Residual tolerance for termination and for the KKT acceptance test.
    pub tol: f64,
    pub max_iter: usize,
    /// Rebalance `rho` from the ratio of primal to dual residuals.
    pub adaptive_rho: bool,
    /// Iterations between residual checks.
    pub check_every: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 1.0,
            sigma: 1e-6,
            alpha: 1.6,
            tol: 1e-6,
            max_iter: 4000,
            adaptive_rho: false,
            check_every: 10,
            polish: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIter => "max-iter",
            QpStatus::Infeasible => "infeasible",
        })
    }
}

/// Infinity norms of the four KKT conditions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `|2 Q x + q + A' y|`
    pub stationarity: f64,
    /// `max(A x - b, 0)`
    pub primal: f64,
    /// `max(-y, 0)`
    pub dual: f64,
    /// `max |y_i (A x - b)_i|`
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

pub fn kkt_residuals(qp: &DenseQp, x: &DVector<f64>, y: &DVector<f64>) -> KktResiduals {
    kkt_parts(&qp.hessian, &qp.linear, &qp.a_in, &qp.b_in, x, y)
}

fn kkt_parts(
    hessian: &DMatrix<f64>,
    linear: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> KktResiduals {
    let grad = hessian * x * 2.0 + linear + a.tr_mul(y);
    let slack = a * x - b;
    let mut out = KktResiduals {
        stationarity: grad.amax(),
        ..Default::default()
    };
    for i in 0..b.len() {
        if b[i].is_finite() {
            out.primal = out.primal.max(slack[i]);
            out.complementarity = out.complementarity.max((y[i] * slack[i]).abs());
        } else {
            out.complementarity = out.complementarity.max(y[i].abs());
        }
        out.dual = out.dual.max(-y[i]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub u: DVector<f64>,
    /// Multipliers of `A_in U <= b_in`.
    pub duals: DVector<f64>,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
    pub polished: bool,
    pub kkt: KktResiduals,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

/// Solver state tied to one Hessian and constraint matrix; the factorization
/// is reused across solves that only change `q` and `b`.
pub struct QpSolver {
    hessian: DMatrix<f64>,
    p: DMatrix<f64>,
    a: DMatrix<f64>,
    ata: DMatrix<f64>,
    settings: QpSettings,
    rho: f64,
    factor: Cholesky<f64, Dyn>,
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const INFEASIBILITY_TOL: f64 = 1e-5;
const POLISH_DELTA: f64 = 1e-10;
const REFINE_STEPS: usize = 6;

impl QpSolver {
    pub fn new(hessian: &DMatrix<f64>, a_in: &DMatrix<f64>, settings: QpSettings) -> Result<Self> {
        let d = hessian.nrows();
        check_dim("Hessian cols", d, hessian.ncols())?;
        check_dim("constraint matrix cols", d, a_in.ncols())?;
        if !(settings.rho > 0.0 && settings.sigma > 0.0 && settings.alpha > 0.0 && settings.alpha < 2.0) {
            return Err(Error::InvalidArgument(
                "ADMM needs rho > 0, sigma > 0 and alpha in (0, 2)".into(),
            ));
        }
        if settings.check_every == 0 {
            return Err(Error::InvalidArgument("check_every must be positive".into()));
        }
        let hessian = crate::linalg::symmetrize(hessian);
        let p = &hessian * 2.0;
        let ata = a_in.tr_mul(a_in);
        let rho = settings.rho.clamp(RHO_MIN, RHO_MAX);
        let factor = factorize(&p, &ata, settings.sigma, rho)?;
        Ok(Self {
            hessian,
            p,
            a: a_in.clone(),
            ata,
            settings,
            rho,
            factor,
        })
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    fn set_rho(&mut self, rho: f64) -> Result<()> {
        let rho = rho.clamp(RHO_MIN, RHO_MAX);
        if rho != self.rho {
            self.factor = factorize(&self.p, &self.ata, self.settings.sigma, rho)?;
            self.rho = rho;
        }
        Ok(())
    }

    pub fn solve(
        &mut self,
        linear: &DVector<f64>,
        b: &DVector<f64>,
        constant: f64,
        warm: Option<&WarmStart>,
    ) -> Result<QpSolution> {
        let d = self.p.nrows();
        let rows = self.a.nrows();
        check_dim("linear term length", d, linear.len())?;
        check_dim("bound vector length", rows, b.len())?;
        if linear.iter().chain(b.iter()).any(|v| v.is_nan()) {
            return Err(Error::Numerical("NaN in QP data".into()));
        }
        let s = self.settings;
        let tol = s.tol;

        let (mut x, mut y) = match warm {
            Some(w) if w.x.len() == d && w.y.len() == rows => (w.x.clone(), w.y.clone()),
            _ => (DVector::zeros(d), DVector::zeros(rows)),
        };
        let mut z = (&self.a * &x).zip_map(b, f64::min);
        let mut y_prev = y.clone();
        let mut rhs = DVector::zeros(d);
        let mut last_polish_set: Option<Vec<bool>> = None;
        let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
        let q_norm = linear.amax();

        let mut iter = 0;
        while iter < s.max_iter {
            iter += 1;
            y_prev.copy_from(&y);
            let rz = &z * self.rho - &y;
            rhs.copy_from(&(&x * s.sigma - linear + self.a.tr_mul(&rz)));
            self.factor.solve_mut(&mut rhs);
            let x_tilde = &rhs;
            let z_tilde = &self.a * x_tilde;
            x = x_tilde * s.alpha + &x * (1.0 - s.alpha);
            let z_relaxed = &z_tilde * s.alpha + &z * (1.0 - s.alpha);
            let z_new = (&z_relaxed + &y / self.rho).zip_map(b, f64::min);
            y += (&z_relaxed - &z_new) * self.rho;
            z = z_new;

            if iter % s.check_every != 0 && iter != s.max_iter {
                continue;
            }
            let ax = &self.a * &x;
            let px = &self.p * &x;
            let aty = self.a.tr_mul(&y);
            let r_prim = if rows > 0 { (&ax - &z).amax() } else { 0.0 };
            let r_dual = (&px + linear + &aty).amax();
            let prim_scale = if rows > 0 { ax.amax().max(z.amax()) } else { 0.0 };
            let dual_scale = px.amax().max(aty.amax()).max(q_norm);
            let converged = r_prim <= tol + tol * prim_scale && r_dual <= tol + tol * dual_scale;

            if best.as_ref().is_none_or(|(r, _, _)| r_prim.max(r_dual) < *r) {
                best = Some((r_prim.max(r_dual), x.clone(), y.clone()));
            }

            if s.polish {
                let active: Vec<bool> = (0..rows).map(|i| y[i] > b[i] - z[i]).collect();
                if last_polish_set.as_ref() != Some(&active) {
                    if let Some((xp, yp)) = self.polish(linear, b, &active)? {
                        let kkt = kkt_parts(&self.hessian, linear, &self.a, b, &xp, &yp);
                        if kkt.max() <= tol {
                            return Ok(self.finish(xp, yp, linear, b, constant, iter, true, QpStatus::Optimal));
                        }
                    }
                    last_polish_set = Some(active);
                }
            }
            if converged {
                let kkt = kkt_parts(&self.hessian, linear, &self.a, b, &x, &y);
                if kkt.max() <= tol {
                    return Ok(self.finish(x, y, linear, b, constant, iter, false, QpStatus::Optimal));
                }
            }
            if rows > 0 && self.infeasibility_certificate(&y, &y_prev, b) {
                return Ok(self.finish(x, y, linear, b, constant, iter, false, QpStatus::Infeasible));
            }
            if s.adaptive_rho && rows > 0 {
                let ratio = (r_prim / prim_scale.max(1e-12)) / (r_dual / dual_scale.max(1e-12)).max(1e-30);
                let proposed = self.rho * ratio.sqrt();
                if proposed.is_finite() && (proposed > 5.0 * self.rho || proposed < 0.2 * self.rho) {
                    self.set_rho(proposed)?;
                }
            }
        }
        let (_, bx, by) = best.unwrap_or((0.0, x, y));
        Ok(self.finish(bx, by, linear, b, constant, iter, false, QpStatus::MaxIter))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        x: DVector<f64>,
        y: DVector<f64>,
        linear: &DVector<f64>,
        b: &DVector<f64>,
        constant: f64,
        iterations: usize,
        polished: bool,
        status: QpStatus,
    ) -> QpSolution {
        let kkt = kkt_parts(&self.hessian, linear, &self.a, b, &x, &y);
        let objective = x.dot(&(&self.hessian * &x)) + linear.dot(&x) + constant;
        QpSolution {
            primal_residual: kkt.primal,
            dual_residual: kkt.stationarity,
            u: x,
            duals: y,
            objective,
            iterations,
            status,
            polished,
            kkt,
        }
    }

    /// `A' dy ~ 0` and `b' dy < 0` with `dy >= 0`: a Farkas certificate that
    /// `A x <= b` has no solution.
    fn infeasibility_certificate(&self, y: &DVector<f64>, y_prev: &DVector<f64>, b: &DVector<f64>) -> bool {
        let dy = y - y_prev;
        let norm = dy.amax();
        if norm <= 1e-12 {
            return false;
        }
        let eps = INFEASIBILITY_TOL * norm;
        if dy.iter().any(|v| *v < -eps) {
            return false;
        }
        let support: f64 = dy
            .iter()
            .zip(b.iter())
            .filter(|(d, _)| **d > 0.0)
            .map(|(d, bi)| d * bi)
            .sum();
        support < -eps && self.a.tr_mul(&dy).amax() <= eps
    }

    /// Solves the equality-constrained problem on a guessed active set,
    /// correcting the guess a few times: drop the most negative multiplier,
    /// or add the most violated inactive row.
    fn polish(&self, linear: &DVector<f64>, b: &DVector<f64>, guess: &[bool]) -> Result<Option<(DVector<f64>, DVector<f64>)>> {
        let rows = self.a.nrows();
        let tol = self.settings.tol;
        let mut active: Vec<bool> = guess.iter().zip(b.iter()).map(|(a, bi)| *a && bi.is_finite()).collect();
        for _ in 0..(2 * rows + 2).min(40) {
            let idx: Vec<usize> = (0..rows).filter(|&i| active[i]).collect();
            let Some((x, y_act)) = self.solve_kkt(linear, b, &idx) else {
                return Ok(None);
            };
            let mut y = DVector::zeros(rows);
            for (k, &i) in idx.iter().enumerate() {
                y[i] = y_act[k];
            }
            let worst_dual = idx
                .iter()
                .map(|&i| (i, y[i]))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, v)) = worst_dual {
                if v < -tol {
                    active[i] = false;
                    continue;
                }
            }
            let slack = &self.a * &x - b;
            let worst_primal = (0..rows)
                .filter(|&i| !active[i] && b[i].is_finite())
                .map(|i| (i, slack[i]))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, v)) = worst_primal {
                if v > tol {
                    active[i] = true;
                    continue;
                }
            }
            // clamp tiny negative multipliers left by round-off
            y.apply(|v| *v = v.max(0.0));
            return Ok(Some((x, y)));
        }
        Ok(None)
    }

    fn solve_kkt(&self, linear: &DVector<f64>, b: &DVector<f64>, idx: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
        let d = self.p.nrows();
        let k = idx.len();
        let mut exact = DMatrix::zeros(d + k, d + k);
        exact.view_mut((0, 0), (d, d)).copy_from(&self.p);
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..d {
                exact[(d + r, c)] = self.a[(i, c)];
                exact[(c, d + r)] = self.a[(i, c)];
            }
        }
        let mut regularized = exact.clone();
        for i in 0..d {
            regularized[(i, i)] += POLISH_DELTA;
        }
        for r in 0..k {
            regularized[(d + r, d + r)] -= POLISH_DELTA;
        }
        let lu = regularized.lu();
        let mut rhs = DVector::zeros(d + k);
        rhs.rows_mut(0, d).copy_from(&(-linear));
        for (r, &i) in idx.iter().enumerate() {
            rhs[d + r] = b[i];
        }
        let mut sol = lu.solve(&rhs)?;
        for _ in 0..REFINE_STEPS {
            let residual = &rhs - &exact * &sol;
            let Some(step) = lu.solve(&residual) else { break };
            sol += step;
        }
        if !sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        Some((sol.rows(0, d).into_owned(), sol.rows(d, k).into_owned()))
    }
}

fn factorize(p: &DMatrix<f64>, ata: &DMatrix<f64>, sigma: f64, rho: f64) -> Result<Cholesky<f64, Dyn>> {
    let mut m = p + ata * rho;
    for i in 0..m.nrows() {
        m[(i, i)] += sigma;
    }
    Cholesky::new(m).ok_or_else(|| Error::Numerical("ADMM system matrix is not positive definite; is Q PSD?".into()))
}

/// Solves a dense QP from scratch (or from a warm start).
pub fn solve_qp(qp: &DenseQp, settings: QpSettings, warm: Option<&WarmStart>) -> Result<QpSolution> {
    qp.validate()?;
    QpSolver::new(&qp.hessian, &qp.a_in, settings)?.solve(&qp.linear, &qp.b_in, qp.constant, warm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(q: f64, lin: f64, a: &[f64], b: &[f64]) -> DenseQp {
        DenseQp::new(
            DMatrix::from_element(1, 1, q),
            DVector::from_element(1, lin),
            DMatrix::from_column_slice(a.len(), 1, a),
            DVector::from_column_slice(b),
        )
        .unwrap()
    }

    #[test]
    fn interior_optimum() {
        // (u - 1)^2 = u^2 - 2u + 1 on [0, 10]
        let mut qp = scalar(1.0, -2.0, &[1.0, -1.0], &[10.0, 0.0]);
        qp.constant = 1.0;
        let sol = solve_qp(&qp, QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.u[0] - 1.0).abs() < 1e-9);
        assert!(sol.objective.abs() < 1e-12);
    }

    #[test]
    fn boundary_optimum() {
        // u^2 with u >= 2
        let qp = scalar(1.0, 0.0, &[-1.0], &[-2.0]);
        let sol = solve_qp(&qp, QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.u[0] - 2.0).abs() < 1e-9);
        assert!((sol.duals[0] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn infeasible_box_detected() {
        // u <= 0 and u >= 1
        let qp = scalar(1.0, 0.0, &[1.0, -1.0], &[0.0, -1.0]);
        let sol = solve_qp(&qp, QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn unconstrained_is_exact() {
        let qp = DenseQp::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DVector::from_vec(vec![1.0, -3.0]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        let sol = solve_qp(&qp, QpSettings::default(), None).unwrap();
        let want = (qp.hessian.clone() * 2.0).lu().solve(&(-&qp.linear)).unwrap();
        assert!((sol.u - want).amax() < 1e-12);
    }
}

//! L1-regularized multi-target least squares by cyclic coordinate descent.
//!
//! Minimizes `||X W - Y||_F^2 + lambda * ||vec(W)||_1`. The problem splits
//! into one independent problem per column of `Y`, all sharing the Gram
//! matrix `X^T X`, which is formed once.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoSettings {
    /// Convergence threshold on the largest coordinate update of a full
    /// sweep, measured as `||x_i|| * |delta_i|` relative to `||y||`.
    pub tol: f64,
    /// Sweep cap per column.
    pub max_iter: usize,
    /// Solve on unit-RMS feature columns (changes the penalty weighting; the
    /// returned coefficients are always in the original units).
    pub standardize: bool,
}

impl Default for LassoSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 10_000,
            standardize: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LassoSolution {
    pub coefficients: DMatrix<f64>,
    pub converged: bool,
    /// Largest sweep count over all columns.
    pub sweeps: usize,
    /// Per-column feature scales used when standardizing.
    pub scaling: Option<Vec<f64>>,
}

/// Soft-thresholding operator `sign(x) * max(|x| - t, 0)`.
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Value of `||X W - Y||_F^2 + lambda * ||vec(W)||_1`.
pub fn lasso_objective(x: &DMatrix<f64>, y: &DMatrix<f64>, w: &DMatrix<f64>, lambda: f64) -> f64 {
    (x * w - y).norm_squared() + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
}

struct ColumnProblem<'a> {
    gram: &'a DMatrix<f64>,
    diag_sqrt: &'a [f64],
    lambda: f64,
    tol: f64,
    max_iter: usize,
}

struct ColumnResult {
    w: DVector<f64>,
    converged: bool,
    sweeps: usize,
}

impl ColumnProblem<'_> {
    /// One pass over `coords`; returns the largest scaled update.
    fn sweep(&self, coords: &[usize], w: &mut DVector<f64>, r: &mut DVector<f64>) -> f64 {
        let half = 0.5 * self.lambda;
        let mut biggest: f64 = 0.0;
        for &i in coords {
            let gii = self.gram[(i, i)];
            if gii <= 0.0 {
                continue;
            }
            let old = w[i];
            let rho = r[i] + gii * old;
            let new = soft_threshold(rho, half) / gii;
            let delta = new - old;
            if delta != 0.0 {
                r.axpy(-delta, &self.gram.column(i), 1.0);
                w[i] = new;
                biggest = biggest.max(self.diag_sqrt[i] * delta.abs());
            }
        }
        biggest
    }

    /// `-c^T w - r^T w + lambda |w|_1`, i.e. the objective minus `y^T y`.
    fn objective(&self, c: &DVector<f64>, w: &DVector<f64>, r: &DVector<f64>) -> f64 {
        -c.dot(w) - r.dot(w) + self.lambda * w.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Moves toward the minimizer of the objective restricted to the current
    /// sign pattern, stopping where the first coordinate would change sign.
    /// Reverts if the step does not lower the objective.
    fn orthant_step(&self, c: &DVector<f64>, w: &mut DVector<f64>, r: &mut DVector<f64>) {
        let active: Vec<usize> = (0..w.len()).filter(|&i| w[i] != 0.0).collect();
        if active.is_empty() {
            return;
        }
        let k = active.len();
        let g_aa = DMatrix::from_fn(k, k, |a, b| self.gram[(active[a], active[b])]);
        let rhs = DVector::from_fn(k, |a, _| {
            let i = active[a];
            c[i] - 0.5 * self.lambda * w[i].signum()
        });
        let Some(chol) = g_aa.cholesky() else {
            return;
        };
        let target = chol.solve(&rhs);
        if !target.iter().all(|v| v.is_finite()) {
            return;
        }
        let mut t = 1.0f64;
        let mut crossing = None;
        for (a, &i) in active.iter().enumerate() {
            if target[a].signum() != w[i].signum() || target[a] == 0.0 {
                let ti = w[i] / (w[i] - target[a]);
                if ti < t {
                    t = ti;
                    crossing = Some(i);
                }
            }
        }
        let before = self.objective(c, w, r);
        let saved = w.clone();
        for (a, &i) in active.iter().enumerate() {
            w[i] += t * (target[a] - w[i]);
        }
        if let Some(i) = crossing {
            w[i] = 0.0;
        }
        let new_r = c - self.gram * &*w;
        if self.objective(c, w, &new_r) <= before {
            *r = new_r;
        } else {
            *w = saved;
        }
    }

    fn solve(&self, c: &DVector<f64>, y_norm: f64, warm: Option<DVector<f64>>) -> ColumnResult {
        let p = c.len();
        let mut w = warm.unwrap_or_else(|| DVector::zeros(p));
        let mut r = c - self.gram * &w;
        if y_norm == 0.0 {
            return ColumnResult {
                w: DVector::zeros(p),
                converged: true,
                sweeps: 0,
            };
        }
        let threshold = self.tol * y_norm;
        let all: Vec<usize> = (0..p).collect();
        let mut sweeps = 0;
        while sweeps < self.max_iter {
            sweeps += 1;
            if self.sweep(&all, &mut w, &mut r) <= threshold {
                return ColumnResult {
                    w,
                    converged: true,
                    sweeps,
                };
            }
            // Work on the active set until it settles, then re-check all
            // coordinates with a full sweep.
            let mut inner = 0;
            while sweeps < self.max_iter {
                let active: Vec<usize> = (0..p).filter(|&i| w[i] != 0.0).collect();
                if inner % 5 == 0 {
                    self.orthant_step(c, &mut w, &mut r);
                }
                sweeps += 1;
                inner += 1;
                if self.sweep(&active, &mut w, &mut r) <= threshold {
                    break;
                }
            }
        }
        ColumnResult {
            w,
            converged: false,
            sweeps,
        }
    }
}

/// Solves the multi-target LASSO. `warm` seeds every column's iterate.
pub fn solve_lasso(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    settings: &LassoSettings,
    warm: Option<&DMatrix<f64>>,
) -> Result<LassoSolution> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    check_dim("lasso target rows", x.nrows(), y.nrows())?;
    if let Some(w) = warm {
        check_dim("lasso warm start rows", x.ncols(), w.nrows())?;
        check_dim("lasso warm start cols", y.ncols(), w.ncols())?;
    }
    if settings.max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be positive".into()));
    }
    let xt = x.transpose();
    let mut gram = &xt * x;
    let mut cross = &xt * y;
    let p = x.ncols();

    let scaling = if settings.standardize {
        let rows = x.nrows().max(1) as f64;
        let s: Vec<f64> = (0..p)
            .map(|i| {
                let v = (gram[(i, i)] / rows).sqrt();
                if v > 0.0 {
                    v
                } else {
                    1.0
                }
            })
            .collect();
        for i in 0..p {
            for j in 0..p {
                gram[(i, j)] /= s[i] * s[j];
            }
            for j in 0..cross.ncols() {
                cross[(i, j)] /= s[i];
            }
        }
        Some(s)
    } else {
        None
    };

    let diag_sqrt: Vec<f64> = (0..p).map(|i| gram[(i, i)].max(0.0).sqrt()).collect();
    let problem = ColumnProblem {
        gram: &gram,
        diag_sqrt: &diag_sqrt,
        lambda,
        tol: settings.tol,
        max_iter: settings.max_iter,
    };

    let results: Vec<ColumnResult> = (0..y.ncols())
        .into_par_iter()
        .map(|j| {
            let c = cross.column(j).into_owned();
            let y_norm = y.column(j).norm();
            let start = warm.map(|w| {
                let mut col = w.column(j).into_owned();
                if let Some(s) = &scaling {
                    for i in 0..p {
                        col[i] *= s[i];
                    }
                }
                col
            });
            problem.solve(&c, y_norm, start)
        })
        .collect();

    let mut coefficients = DMatrix::zeros(p, y.ncols());
    let mut converged = true;
    let mut sweeps = 0;
    for (j, res) in results.into_iter().enumerate() {
        converged &= res.converged;
        sweeps = sweeps.max(res.sweeps);
        coefficients.set_column(j, &res.w);
    }
    if let Some(s) = &scaling {
        for i in 0..p {
            for j in 0..coefficients.ncols() {
                coefficients[(i, j)] /= s[i];
            }
        }
    }
    Ok(LassoSolution {
        coefficients,
        converged,
        sweeps,
        scaling,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::lstsq_min_norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }

    #[test]
    fn zero_lambda_is_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(60, 8, &mut rng);
        let y = random(60, 3, &mut rng);
        let sol = solve_lasso(&x, &y, 0.0, &LassoSettings::default(), None).unwrap();
        let ls = lstsq_min_norm(&x, &y, None).unwrap();
        assert!(sol.converged);
        assert!((sol.coefficients - ls).amax() < 1e-6);
    }

    #[test]
    fn above_threshold_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(40, 5, &mut rng);
        let y = random(40, 2, &mut rng);
        let bound = 2.0 * (x.transpose() * &y).amax();
        let sol = solve_lasso(&x, &y, bound, &LassoSettings::default(), None).unwrap();
        assert!(sol.coefficients.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_matches_soft_threshold() {
        let a = DMatrix::from_column_slice(3, 1, &[0.6, 0.8, 0.0]);
        let b = DMatrix::from_column_slice(3, 1, &[2.0, -1.0, 4.0]);
        for lambda in [0.0, 0.1, 0.3, 0.5, 1.0] {
            let sol = solve_lasso(&a, &b, lambda, &LassoSettings::default(), None).unwrap();
            let atb = 0.6 * 2.0 - 0.8;
            assert!((sol.coefficients[(0, 0)] - soft_threshold(atb, lambda / 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn standardized_solution_reported_in_original_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut x = random(50, 4, &mut rng);
        x.column_mut(2).scale_mut(100.0);
        let y = random(50, 1, &mut rng);
        let settings = LassoSettings {
            standardize: true,
            ..Default::default()
        };
        let sol = solve_lasso(&x, &y, 0.0, &settings, None).unwrap();
        let ls = lstsq_min_norm(&x, &y, None).unwrap();
        assert!((sol.coefficients - ls).amax() < 1e-6);
    }

    #[test]
    fn objective_beats_zero_and_least_squares_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(80, 10, &mut rng);
        let y = random(80, 2, &mut rng);
        let ls = lstsq_min_norm(&x, &y, None).unwrap();
        for lambda in [0.5, 2.0, 8.0] {
            let sol = solve_lasso(&x, &y, lambda, &LassoSettings::default(), None).unwrap();
            let obj = lasso_objective(&x, &y, &sol.coefficients, lambda);
            let zero = lasso_objective(&x, &y, &DMatrix::zeros(10, 2), lambda);
            let at_ls = lasso_objective(&x, &y, &ls, lambda);
            assert!(obj <= zero + 1e-9);
            assert!(obj <= at_ls + 1e-9);
        }
    }

    #[test]
    fn negative_lambda_rejected() {
        let x = DMatrix::identity(2, 2);
        assert!(solve_lasso(&x, &x, -1.0, &LassoSettings::default(), None).is_err());
    }
}

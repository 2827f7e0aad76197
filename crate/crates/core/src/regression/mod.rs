//! Koopman matrix regression, lifted model extraction and the manifold
//! projection correction.

mod identify;
mod lasso;

pub use identify::{coordinate_scaling, identify, split_trials, Identification, IdentifyConfig, SweepRow};
pub use lasso::{lasso_objective, soft_threshold, solve_lasso, LassoSettings, LassoSolution};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::lifting::{BasisSpec, DataMatrices, DelaySpec, MonomialBasis};
use crate::linalg::{self, lstsq_min_norm, matrix_to_rows, rows_to_matrix};

pub use crate::linalg::pseudoinverse;

/// Finite-dimensional approximation of the Koopman operator on the
/// input-augmented basis, `(N+m) x (N+m)`.
#[derive(Clone, Debug)]
pub struct KoopmanMatrix {
    pub u_bar: DMatrix<f64>,
    pub lambda: f64,
    pub density: f64,
    pub converged: bool,
    pub sweeps: usize,
}

/// Minimum-norm least-squares solution of `Gamma_alpha U = Gamma_beta`.
pub fn fit_least_squares(data: &DataMatrices, rcond: Option<f64>) -> Result<KoopmanMatrix> {
    let u_bar = lstsq_min_norm(&data.gamma_alpha, &data.gamma_beta, rcond)?;
    let density = linalg::density(&u_bar);
    Ok(KoopmanMatrix {
        u_bar,
        lambda: 0.0,
        density,
        converged: true,
        sweeps: 0,
    })
}

/// LASSO estimate of the Koopman matrix. Non-convergence within the sweep
/// cap is reported through `converged`, not as an error.
pub fn fit_lasso(data: &DataMatrices, lambda: f64, settings: &LassoSettings) -> Result<KoopmanMatrix> {
    fit_lasso_warm(data, lambda, settings, None)
}

pub fn fit_lasso_warm(
    data: &DataMatrices,
    lambda: f64,
    settings: &LassoSettings,
    warm: Option<&DMatrix<f64>>,
) -> Result<KoopmanMatrix> {
    let sol = solve_lasso(&data.gamma_alpha, &data.gamma_beta, lambda, settings, warm)?;
    let density = linalg::density(&sol.coefficients);
    Ok(KoopmanMatrix {
        u_bar: sol.coefficients,
        lambda,
        density,
        converged: sol.converged,
        sweeps: sol.sweeps,
    })
}

/// Lifted system matrices read off the transposed Koopman matrix.
#[derive(Clone, Debug)]
pub struct ExtractedModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Max-abs deviation of the discarded bottom block from `[O I]`.
    pub bottom_block_deviation: f64,
}

/// `C = [I_n 0]`.
pub fn output_matrix(n: usize, lifted_dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, lifted_dim, |i, j| if i == j { 1.0 } else { 0.0 })
}

pub fn extract_model(u: &KoopmanMatrix, n: usize, m: usize) -> Result<ExtractedModel> {
    let (rows, cols) = u.u_bar.shape();
    if rows != cols {
        return Err(Error::Dimension {
            context: "Koopman matrix must be square",
            expected: rows,
            got: cols,
        });
    }
    if rows < n + m {
        return Err(Error::Dimension {
            context: "Koopman matrix size vs n + m",
            expected: n + m,
            got: rows,
        });
    }
    let big_n = rows - m;
    let ut = u.u_bar.transpose();
    let a = ut.view((0, 0), (big_n, big_n)).into_owned();
    let b = ut.view((0, big_n), (big_n, m)).into_owned();
    let mut deviation: f64 = 0.0;
    for i in 0..m {
        for j in 0..big_n + m {
            let want = if j == big_n + i { 1.0 } else { 0.0 };
            deviation = deviation.max((ut[(big_n + i, j)] - want).abs());
        }
    }
    Ok(ExtractedModel {
        a,
        b,
        c: output_matrix(n, big_n),
        bottom_block_deviation: deviation,
    })
}

/// Rows `(A psi(a[k]) + B u[k])^T`.
pub fn one_step_predictions(a: &DMatrix<f64>, b: &DMatrix<f64>, data: &DataMatrices) -> Result<DMatrix<f64>> {
    check_dim("A columns vs lifted dimension", data.lifted_dim, a.ncols())?;
    check_dim("B columns vs input dimension", data.input_dim(), b.ncols())?;
    Ok(data.psi_a() * a.transpose() + data.inputs() * b.transpose())
}

/// Least-squares projection `P = (Omega_a^+ Psi_b)^T` mapping one-step
/// predictions back toward lifted data. Rank deficiency is absorbed by the
/// pseudoinverse cutoff.
pub fn fit_projection(a: &DMatrix<f64>, b: &DMatrix<f64>, data: &DataMatrices, rcond: Option<f64>) -> Result<DMatrix<f64>> {
    let omega = one_step_predictions(a, b, data)?;
    let psi_b = data.psi_b().into_owned();
    Ok(lstsq_min_norm(&omega, &psi_b, rcond)?.transpose())
}

/// An identified lifted linear model `z+ = A_hat z + B_hat u`, `y = C z`.
#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanModel {
    pub basis: BasisSpec,
    pub delays: DelaySpec,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub lambda: f64,
    /// Density of `A_hat`.
    pub density: f64,
    pub scaling: Option<Vec<f64>>,
}

impl KoopmanModel {
    /// Assembles a model from raw `(A, B)` and a projection `P`.
    pub fn from_parts(
        basis: BasisSpec,
        delays: DelaySpec,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        p: DMatrix<f64>,
        lambda: f64,
    ) -> Result<Self> {
        let big_n = basis.lifted_dim()?;
        check_dim("basis embedded dimension vs delays", delays.embedded_dim(), basis.embedded_dim)?;
        check_dim("A rows", big_n, a.nrows())?;
        check_dim("A cols", big_n, a.ncols())?;
        check_dim("B rows", big_n, b.nrows())?;
        check_dim("B cols", delays.input_dim, b.ncols())?;
        check_dim("P rows", big_n, p.nrows())?;
        check_dim("P cols", big_n, p.ncols())?;
        let a_hat = &p * &a;
        let b_hat = &p * &b;
        let density = linalg::density(&a_hat);
        Ok(Self {
            basis,
            delays,
            c: output_matrix(delays.state_dim, big_n),
            a,
            b,
            p,
            a_hat,
            b_hat,
            lambda,
            density,
            scaling: None,
        })
    }

    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.delays.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.delays.input_dim
    }

    pub fn compile_basis(&self) -> Result<MonomialBasis> {
        MonomialBasis::new(self.basis)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = KoopmanModelFile {
            kind: "koopman".into(),
            basis: self.basis,
            delays: self.delays,
            a_hat: matrix_to_rows(&self.a_hat),
            b_hat: matrix_to_rows(&self.b_hat),
            c: matrix_to_rows(&self.c),
            a: matrix_to_rows(&self.a),
            b: matrix_to_rows(&self.b),
            p: matrix_to_rows(&self.p),
            lambda: self.lambda,
            density: self.density,
            scaling: self.scaling.clone(),
        };
        for (name, m) in [("A", &self.a), ("B", &self.b), ("P", &self.p), ("A_hat", &self.a_hat)] {
            if !linalg::all_finite(m) {
                return Err(Error::Numerical(format!("model matrix {name} has non-finite entries")));
            }
        }
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: KoopmanModelFile = serde_json::from_str(text)?;
        if f.kind != "koopman" {
            return Err(Error::Parse(format!("expected kind \"koopman\", got {:?}", f.kind)));
        }
        let big_n = f.basis.lifted_dim()?;
        let m = f.delays.input_dim;
        let n = f.delays.state_dim;
        Ok(Self {
            basis: f.basis,
            delays: f.delays,
            a: rows_to_matrix(&f.a, big_n)?,
            b: rows_to_matrix(&f.b, m)?,
            c: rows_to_matrix(&f.c, big_n)?,
            p: rows_to_matrix(&f.p, big_n)?,
            a_hat: rows_to_matrix(&f.a_hat, big_n)?,
            b_hat: rows_to_matrix(&f.b_hat, m)?,
            lambda: f.lambda,
            density: f.density,
            scaling: f.scaling,
        })
        .and_then(|model: KoopmanModel| {
            check_dim("C rows", n, model.c.nrows())?;
            check_dim("A rows", big_n, model.a.nrows())?;
            Ok(model)
        })
    }

    /// Lifts an embedded vector.
    pub fn lift(&self, embedding: &[f64]) -> Result<DVector<f64>> {
        self.compile_basis()?.lift(embedding)
    }
}

#[derive(Serialize, Deserialize)]
struct KoopmanModelFile {
    kind: String,
    basis: BasisSpec,
    delays: DelaySpec,
    #[serde(rename = "A_hat")]
    a_hat: Vec<Vec<f64>>,
    #[serde(rename = "B_hat")]
    b_hat: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    p: Vec<Vec<f64>>,
    lambda: f64,
    density: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scaling: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn data_from(gamma_alpha: DMatrix<f64>, gamma_beta: DMatrix<f64>, lifted_dim: usize) -> DataMatrices {
        DataMatrices {
            lifted_dim,
            gamma_alpha,
            gamma_beta,
        }
    }

    #[test]
    fn identity_data_gives_identity() {
        let d = data_from(DMatrix::identity(4, 4), DMatrix::identity(4, 4), 3);
        let u = fit_least_squares(&d, None).unwrap();
        assert!((u.u_bar - DMatrix::<f64>::identity(4, 4)).amax() < 1e-14);
    }

    #[test]
    fn recovers_generating_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u_star = random(5, 5, &mut rng);
        let ga = random(40, 5, &mut rng);
        let gb = &ga * &u_star;
        let u = fit_least_squares(&data_from(ga, gb, 3), None).unwrap();
        assert!((u.u_bar - u_star).amax() < 1e-8);
    }

    #[test]
    fn single_row_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ga = random(1, 4, &mut rng);
        let gb = random(1, 4, &mut rng);
        let u = fit_least_squares(&data_from(ga.clone(), gb.clone(), 2), None).unwrap();
        assert!((&ga * &u.u_bar - gb).amax() < 1e-14);
    }

    fn block_u(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let big_n = a.nrows();
        let m = b.ncols();
        let mut ut = DMatrix::zeros(big_n + m, big_n + m);
        ut.view_mut((0, 0), (big_n, big_n)).copy_from(a);
        ut.view_mut((0, big_n), (big_n, m)).copy_from(b);
        for i in 0..m {
            ut[(big_n + i, big_n + i)] = 1.0;
        }
        ut.transpose()
    }

    #[test]
    fn extraction_inverts_block_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random(4, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let k = KoopmanMatrix {
            u_bar: block_u(&a, &b),
            lambda: 0.0,
            density: 1.0,
            converged: true,
            sweeps: 0,
        };
        let e = extract_model(&k, 2, 2).unwrap();
        assert_eq!(e.a, a);
        assert_eq!(e.b, b);
        assert_eq!(e.bottom_block_deviation, 0.0);
        assert_eq!(e.c, DMatrix::from_row_slice(2, 4, &[1., 0., 0., 0., 0., 1., 0., 0.]));
        let square = extract_model(
            &KoopmanMatrix {
                u_bar: block_u(&random(2, 2, &mut rng), &random(2, 1, &mut rng)),
                ..k.clone()
            },
            2,
            1,
        )
        .unwrap();
        assert_eq!(square.c, DMatrix::<f64>::identity(2, 2));
        assert!(extract_model(&k, 5, 2).is_err());
    }

    #[test]
    fn projection_is_identity_for_perfect_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = random(3, 3, &mut rng);
        let b = random(3, 1, &mut rng);
        let psi_a = random(30, 3, &mut rng);
        let u = random(30, 1, &mut rng);
        let psi_b = &psi_a * a.transpose() + &u * b.transpose();
        let mut ga = DMatrix::zeros(30, 4);
        ga.columns_mut(0, 3).copy_from(&psi_a);
        ga.column_mut(3).copy_from(&u.column(0));
        let mut gb = ga.clone();
        gb.columns_mut(0, 3).copy_from(&psi_b);
        let p = fit_projection(&a, &b, &data_from(ga, gb, 3), None).unwrap();
        assert!((p - DMatrix::<f64>::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn projection_never_increases_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..10 {
            let a = random(4, 4, &mut rng);
            let b = random(4, 2, &mut rng);
            let ga = random(25, 6, &mut rng);
            let gb = random(25, 6, &mut rng);
            let d = data_from(ga, gb, 4);
            let p = fit_projection(&a, &b, &d, None).unwrap();
            let omega = one_step_predictions(&a, &b, &d).unwrap();
            let psi_b = d.psi_b().into_owned();
            let with = (&p * omega.transpose() - psi_b.transpose()).norm();
            let without = (omega.transpose() - psi_b.transpose()).norm();
            assert!(with <= without + 1e-12);
        }
    }
}

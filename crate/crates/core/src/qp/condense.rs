//! The MPC program over `(z, u)` and its dense form over the stacked inputs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{min_eigenvalue, symmetrize};

/// Eigenvalues below this are taken as genuine indefiniteness.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// `E z[stage] + F u[stage] <= b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConstraint {
    pub stage: usize,
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// ```text
/// min  sum_{i=0}^{N_h} z_i' G_i z_i + g_i' z_i + sum_{i=0}^{N_h-1} u_i' H_i u_i + h_i' u_i
/// s.t. z_{i+1} = A z_i + B u_i,  E_i z_i + F_i u_i <= b_i,  z_0 given
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcProblemSpec {
    pub horizon: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `G_0 ..= G_{N_h}`.
    pub state_cost: Vec<DMatrix<f64>>,
    /// `g_0 ..= g_{N_h}`.
    pub state_linear: Vec<DVector<f64>>,
    /// `H_0 .. H_{N_h - 1}`.
    pub input_cost: Vec<DMatrix<f64>>,
    /// `h_0 .. h_{N_h - 1}`.
    pub input_linear: Vec<DVector<f64>>,
    pub constraints: Vec<StageConstraint>,
}

fn check_psd(name: &str, stage: usize, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = symmetrize(m);
    let lo = min_eigenvalue(&s);
    if lo < -PSD_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "{name}_{stage} is not positive semidefinite (min eigenvalue {lo:e})"
        )));
    }
    Ok(s)
}

impl MpcProblemSpec {
    /// Validates dimensions and symmetrizes the quadratic costs, rejecting
    /// indefinite ones.
    pub fn new(
        horizon: usize,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        state_cost: Vec<DMatrix<f64>>,
        state_linear: Vec<DVector<f64>>,
        input_cost: Vec<DMatrix<f64>>,
        input_linear: Vec<DVector<f64>>,
        constraints: Vec<StageConstraint>,
    ) -> Result<Self> {
        let mut spec = Self {
            horizon,
            a,
            b,
            state_cost,
            state_linear,
            input_cost,
            input_linear,
            constraints,
        };
        spec.validate()?;
        for (i, g) in spec.state_cost.iter_mut().enumerate() {
            *g = check_psd("G", i, g)?;
        }
        for (i, h) in spec.input_cost.iter_mut().enumerate() {
            *h = check_psd("H", i, h)?;
        }
        Ok(spec)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.input_dim();
        let nh = self.horizon;
        if nh == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        check_dim("A columns", n, self.a.ncols())?;
        check_dim("B rows", n, self.b.nrows())?;
        check_dim("number of G_i", nh + 1, self.state_cost.len())?;
        check_dim("number of g_i", nh + 1, self.state_linear.len())?;
        check_dim("number of H_i", nh, self.input_cost.len())?;
        check_dim("number of h_i", nh, self.input_linear.len())?;
        for g in &self.state_cost {
            check_dim("G_i rows", n, g.nrows())?;
            check_dim("G_i cols", n, g.ncols())?;
        }
        for g in &self.state_linear {
            check_dim("g_i length", n, g.len())?;
        }
        for h in &self.input_cost {
            check_dim("H_i rows", m, h.nrows())?;
            check_dim("H_i cols", m, h.ncols())?;
        }
        for h in &self.input_linear {
            check_dim("h_i length", m, h.len())?;
        }
        for c in &self.constraints {
            if c.stage >= nh {
                return Err(Error::InvalidArgument(format!(
                    "constraint stage {} outside 0..{nh}",
                    c.stage
                )));
            }
            let rows = c.b.len();
            check_dim("E_i rows", rows, c.e.nrows())?;
            check_dim("E_i cols", n, c.e.ncols())?;
            check_dim("F_i rows", rows, c.f.nrows())?;
            check_dim("F_i cols", m, c.f.ncols())?;
        }
        Ok(())
    }

    /// Objective evaluated stage by stage along the state recursion.
    pub fn stagewise_objective(&self, z0: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        let m = self.input_dim();
        check_dim("z0 length", self.state_dim(), z0.len())?;
        check_dim("stacked input length", m * self.horizon, u.len())?;
        let mut z = z0.clone();
        let mut total = 0.0;
        for i in 0..self.horizon {
            let ui = u.rows(i * m, m);
            total += z.dot(&(&self.state_cost[i] * &z)) + self.state_linear[i].dot(&z);
            total += ui.dot(&(&self.input_cost[i] * ui)) + self.input_linear[i].dot(&ui);
            z = &self.a * &z + &self.b * ui;
        }
        let nh = self.horizon;
        total += z.dot(&(&self.state_cost[nh] * &z)) + self.state_linear[nh].dot(&z);
        Ok(total)
    }
}

/// Affine maps `z[i] = free[i] + maps[i] U`, `i = 0..=N_h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateRecovery {
    pub free: Vec<DVector<f64>>,
    pub maps: Vec<DMatrix<f64>>,
}

impl StateRecovery {
    pub fn states(&self, u: &DVector<f64>) -> Vec<DVector<f64>> {
        self.free.iter().zip(&self.maps).map(|(f, s)| f + s * u).collect()
    }
}

/// `min U' Q U + q' U + constant` subject to `A_in U <= b_in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseQp {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    /// Present when the QP was condensed from a full specification.
    #[serde(default)]
    pub recovery: Option<StateRecovery>,
}

impl DenseQp {
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>, a_in: DMatrix<f64>, b_in: DVector<f64>) -> Result<Self> {
        let qp = Self {
            hessian: symmetrize(&hessian),
            linear,
            constant: 0.0,
            a_in,
            b_in,
            recovery: None,
        };
        qp.validate()?;
        Ok(qp)
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn constraint_count(&self) -> usize {
        self.b_in.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        check_dim("Hessian rows", d, self.hessian.nrows())?;
        check_dim("Hessian cols", d, self.hessian.ncols())?;
        check_dim("constraint matrix cols", d, self.a_in.ncols())?;
        check_dim("constraint matrix rows", self.b_in.len(), self.a_in.nrows())?;
        Ok(())
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.hessian * u)) + self.linear.dot(u) + self.constant
    }
}

/// Eliminates the states: with `z[i] = A^i z0 + S_i U`,
/// `Q = sum_i S_i' G_i S_i + blkdiag(H)`, `q = sum_i S_i' (2 G_i A^i z0 + g_i) + h`
/// and stage constraints become `(E_i S_i + F_i e_i) U <= b_i - E_i A^i z0`.
pub fn condense(spec: &MpcProblemSpec, z0: &DVector<f64>) -> Result<DenseQp> {
    spec.validate()?;
    let n = spec.state_dim();
    let m = spec.input_dim();
    let nh = spec.horizon;
    let dim = m * nh;
    check_dim("z0 length", n, z0.len())?;

    let mut free = Vec::with_capacity(nh + 1);
    let mut maps = Vec::with_capacity(nh + 1);
    free.push(z0.clone());
    maps.push(DMatrix::zeros(n, dim));
    for i in 0..nh {
        let f = &spec.a * &free[i];
        let mut s = &spec.a * &maps[i];
        s.columns_mut(i * m, m).copy_from(&spec.b);
        free.push(f);
        maps.push(s);
    }

    let mut hessian = DMatrix::zeros(dim, dim);
    let mut linear = DVector::zeros(dim);
    let mut constant = 0.0;
    for i in 0..=nh {
        let g = &spec.state_cost[i];
        let f = &free[i];
        let gf = g * f;
        constant += f.dot(&gf) + spec.state_linear[i].dot(f);
        if i > 0 {
            let s = &maps[i];
            let gs = g * s;
            hessian += s.transpose() * gs;
            linear += s.transpose() * (gf * 2.0 + &spec.state_linear[i]);
        }
    }
    for i in 0..nh {
        let mut hb = hessian.view_mut((i * m, i * m), (m, m));
        hb += &spec.input_cost[i];
        let mut lb = linear.rows_mut(i * m, m);
        lb += &spec.input_linear[i];
    }

    let rows: usize = spec.constraints.iter().map(|c| c.b.len()).sum();
    let mut a_in = DMatrix::zeros(rows, dim);
    let mut b_in = DVector::zeros(rows);
    let mut r = 0;
    for c in &spec.constraints {
        let k = c.b.len();
        let mut block = &c.e * &maps[c.stage];
        let mut fb = block.columns_mut(c.stage * m, m);
        fb += &c.f;
        a_in.rows_mut(r, k).copy_from(&block);
        b_in.rows_mut(r, k).copy_from(&(&c.b - &c.e * &free[c.stage]));
        r += k;
    }

    Ok(DenseQp {
        hessian: symmetrize(&hessian),
        linear,
        constant,
        a_in,
        b_in,
        recovery: Some(StateRecovery { free, maps }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_one_closed_form() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
        let b = DMatrix::from_row_slice(2, 1, &[0.5, 1.0]);
        let g0 = DMatrix::identity(2, 2);
        let g1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let gl = vec![DVector::from_vec(vec![0.1, 0.2]), DVector::from_vec(vec![-1.0, 0.3])];
        let h0 = DMatrix::from_element(1, 1, 0.7);
        let hl = DVector::from_element(1, 0.4);
        let spec = MpcProblemSpec::new(
            1,
            a.clone(),
            b.clone(),
            vec![g0, g1.clone()],
            gl.clone(),
            vec![h0.clone()],
            vec![hl.clone()],
            vec![],
        )
        .unwrap();
        let z0 = DVector::from_vec(vec![1.0, -2.0]);
        let qp = condense(&spec, &z0).unwrap();
        let q_want = &h0 + b.transpose() * &g1 * &b;
        let l_want = b.transpose() * (&g1 * &a * &z0 * 2.0 + &gl[1]) + &hl;
        assert!((qp.hessian - q_want).amax() < 1e-14);
        assert!((qp.linear - l_want).amax() < 1e-14);
    }

    #[test]
    fn indefinite_cost_rejected() {
        let bad = DMatrix::from_row_slice(1, 1, &[-1e-6]);
        let r = MpcProblemSpec::new(
            1,
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            vec![bad, DMatrix::identity(1, 1)],
            vec![DVector::zeros(1); 2],
            vec![DMatrix::identity(1, 1)],
            vec![DVector::zeros(1)],
            vec![],
        );
        assert!(r.is_err());
    }
}

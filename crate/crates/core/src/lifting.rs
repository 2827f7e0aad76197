//! Monomial lifting with delay embedding, snapshot pairs and data matrices.
//!
//! The lifted coordinates are ordered as: the `q` degree-one monomials in
//! coordinate order, then the constant, then every monomial of degree
//! `2..=max_degree` in graded lexicographic order. Keeping the coordinates
//! first makes `C = [I 0]` recover the measured state from a lifted vector.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::trajectory::Trajectory;

/// Number of monomials of total degree `<= max_degree` in `q` variables,
/// constant included: `C(q + max_degree, max_degree)`.
pub fn monomial_count(q: usize, max_degree: usize) -> Result<usize> {
    if q == 0 {
        return Err(Error::InvalidArgument("monomial basis needs q >= 1".into()));
    }
    // C(q+d, d) built as a running product; each partial product is itself a
    // binomial coefficient, so the division is exact.
    let mut c: u128 = 1;
    for k in 1..=max_degree as u128 {
        let factor = (q as u128)
            .checked_add(k)
            .ok_or_else(|| Error::Overflow(format!("C({q}+{max_degree}, {max_degree})")))?;
        c = c
            .checked_mul(factor)
            .ok_or_else(|| Error::Overflow(format!("C({q}+{max_degree}, {max_degree})")))?
            / k;
    }
    usize::try_from(c).map_err(|_| Error::Overflow(format!("C({q}+{max_degree}, {max_degree})")))
}

/// Serialized description of a monomial dictionary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub embedded_dim: usize,
    pub max_degree: usize,
}

impl BasisSpec {
    pub fn new(embedded_dim: usize, max_degree: usize) -> Self {
        Self {
            embedded_dim,
            max_degree,
        }
    }

    pub fn lifted_dim(&self) -> Result<usize> {
        if self.max_degree == 0 {
            // Coordinates are always kept, so a degree-0 cap still carries them.
            return Ok(self.embedded_dim + 1);
        }
        monomial_count(self.embedded_dim, self.max_degree)
    }
}

/// Anything that maps an embedded vector to a lifted vector whose first
/// `input_dim()` entries are the input itself.
pub trait Lifting: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn lift_into(&self, xi: &[f64], out: &mut [f64]);
}

/// A compiled monomial dictionary.
///
/// Each monomial of degree >= 2 is stored as `parent * xi[var]`, where the
/// parent is a lower-degree monomial already present in the lifted vector,
/// so evaluation is one multiply per entry.
#[derive(Clone, Debug)]
pub struct MonomialBasis {
    spec: BasisSpec,
    /// (parent index, variable index) for entries `q+1..N`.
    recipe: Vec<(usize, usize)>,
    exponents: Vec<Vec<u32>>,
}

impl MonomialBasis {
    pub fn new(spec: BasisSpec) -> Result<Self> {
        let q = spec.embedded_dim;
        let n = spec.lifted_dim()?;
        let mut exponents = Vec::with_capacity(n);
        for i in 0..q {
            let mut e = vec![0u32; q];
            e[i] = 1;
            exponents.push(e);
        }
        exponents.push(vec![0u32; q]);

        // Index tuples i1 <= i2 <= ... <= id in lexicographic order give graded
        // lexicographic order within each degree.
        let mut recipe = Vec::with_capacity(n.saturating_sub(q + 1));
        let mut index_of: std::collections::HashMap<Vec<usize>, usize> =
            (0..q).map(|i| (vec![i], i)).collect();
        let mut prev: Vec<Vec<usize>> = (0..q).map(|i| vec![i]).collect();
        for _degree in 2..=spec.max_degree {
            let mut next = Vec::new();
            for tuple in &prev {
                let last = *tuple.last().expect("non-empty tuple");
                for v in last..q {
                    let mut t = tuple.clone();
                    t.push(v);
                    let idx = exponents.len();
                    recipe.push((index_of[tuple], v));
                    let mut e = vec![0u32; q];
                    for &i in &t {
                        e[i] += 1;
                    }
                    exponents.push(e);
                    index_of.insert(t.clone(), idx);
                    next.push(t);
                }
            }
            prev = next;
        }
        debug_assert_eq!(exponents.len(), n);
        Ok(Self {
            spec,
            recipe,
            exponents,
        })
    }

    pub fn spec(&self) -> BasisSpec {
        self.spec
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    pub fn lift(&self, xi: &[f64]) -> Result<DVector<f64>> {
        check_dim("lift input", self.spec.embedded_dim, xi.len())?;
        let mut out = DVector::zeros(self.output_dim());
        self.lift_into(xi, out.as_mut_slice());
        Ok(out)
    }
}

impl Lifting for MonomialBasis {
    fn input_dim(&self) -> usize {
        self.spec.embedded_dim
    }

    fn output_dim(&self) -> usize {
        self.exponents.len()
    }

    fn lift_into(&self, xi: &[f64], out: &mut [f64]) {
        let q = self.spec.embedded_dim;
        out[..q].copy_from_slice(&xi[..q]);
        out[q] = 1.0;
        for (k, &(parent, var)) in self.recipe.iter().enumerate() {
            out[q + 1 + k] = out[parent] * xi[var];
        }
    }
}

/// `psi(xi)` for a monomial basis.
pub fn lift(basis: &MonomialBasis, xi: &[f64]) -> Result<DVector<f64>> {
    basis.lift(xi)
}

/// Layout of the delay-embedded vector
/// `[x[k], x[k-1], .., x[k-d], u[k-1], .., u[k-d_u]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelaySpec {
    pub state_dim: usize,
    pub input_dim: usize,
    pub state_delays: usize,
    pub input_delays: usize,
    pub sample_period: f64,
}

impl DelaySpec {
    pub fn embedded_dim(&self) -> usize {
        self.state_dim * (self.state_delays + 1) + self.input_dim * self.input_delays
    }

    /// Number of past samples the embedding reaches back.
    pub fn window(&self) -> usize {
        self.state_delays.max(self.input_delays)
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::InvalidArgument("state_dim must be positive".into()));
        }
        if !(self.sample_period > 0.0 && self.sample_period.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sample period must be positive, got {}",
                self.sample_period
            )));
        }
        Ok(())
    }

    /// Embedding at sample `k` of a log; requires `k >= window()`.
    pub fn embed_at(&self, states: &DMatrix<f64>, inputs: &DMatrix<f64>, k: usize) -> DVector<f64> {
        let n = self.state_dim;
        let m = self.input_dim;
        let mut out = DVector::zeros(self.embedded_dim());
        for j in 0..=self.state_delays {
            for i in 0..n {
                out[j * n + i] = states[(k - j, i)];
            }
        }
        let off = n * (self.state_delays + 1);
        for j in 0..self.input_delays {
            for i in 0..m {
                out[off + j * m + i] = inputs[(k - 1 - j, i)];
            }
        }
        out
    }

    /// Embedding from histories ordered newest first: `states[0] = x[k]`,
    /// `inputs[0] = u[k-1]`.
    pub fn embed_from(&self, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> Result<DVector<f64>> {
        if states.len() < self.state_delays + 1 {
            return Err(Error::TooShort {
                needed: self.state_delays + 1,
                got: states.len(),
            });
        }
        if inputs.len() < self.input_delays {
            return Err(Error::TooShort {
                needed: self.input_delays,
                got: inputs.len(),
            });
        }
        let n = self.state_dim;
        let m = self.input_dim;
        let mut out = DVector::zeros(self.embedded_dim());
        for (j, x) in states.iter().take(self.state_delays + 1).enumerate() {
            check_dim("state history entry", n, x.len())?;
            out.rows_mut(j * n, n).copy_from(x);
        }
        let off = n * (self.state_delays + 1);
        for (j, u) in inputs.iter().take(self.input_delays).enumerate() {
            check_dim("input history entry", m, u.len())?;
            out.rows_mut(off + j * m, m).copy_from(u);
        }
        Ok(out)
    }
}

/// Delay-embedded snapshot pairs, one row per pair.
#[derive(Clone, Debug)]
pub struct SnapshotSet {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub u: DMatrix<f64>,
    /// (trial id, sample index k) of each pair.
    pub provenance: Vec<(String, usize)>,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.a.nrows() == 0
    }
}

/// Builds `(a[k], b[k], u[k])` for every admissible `k` of every trial.
/// Pairs never straddle two trials.
pub fn build_delay_snapshots(trials: &[Trajectory], delays: &DelaySpec) -> Result<SnapshotSet> {
    delays.validate()?;
    let w = delays.window();
    let q = delays.embedded_dim();
    let m = delays.input_dim;
    let mut per_trial = Vec::with_capacity(trials.len());
    let mut total = 0;
    for trial in trials {
        check_dim("trial state dimension", delays.state_dim, trial.state_dim())?;
        check_dim("trial input dimension", delays.input_dim, trial.input_dim())?;
        if trial.len() < w + 2 {
            return Err(Error::TooShort {
                needed: w + 2,
                got: trial.len(),
            });
        }
        trial.check_uniform(delays.sample_period)?;
        let count = trial.len() - 1 - w;
        per_trial.push(count);
        total += count;
    }

    let mut a = DMatrix::zeros(total, q);
    let mut b = DMatrix::zeros(total, q);
    let mut u = DMatrix::zeros(total, m);
    let mut provenance = Vec::with_capacity(total);
    let mut row = 0;
    for (trial, &count) in trials.iter().zip(&per_trial) {
        for k in w..w + count {
            a.set_row(row, &delays.embed_at(&trial.states, &trial.inputs, k).transpose());
            b.set_row(row, &delays.embed_at(&trial.states, &trial.inputs, k + 1).transpose());
            u.set_row(row, &trial.inputs.row(k));
            provenance.push((trial.id.clone(), k));
            row += 1;
        }
    }
    Ok(SnapshotSet {
        a,
        b,
        u,
        provenance,
    })
}

/// Input-augmented lifted data. `Psi_a`/`Psi_b` are the leading `N` columns
/// of `Gamma_alpha`/`Gamma_beta`; the trailing `m` columns hold `u[k]` in both.
#[derive(Clone, Debug)]
pub struct DataMatrices {
    pub lifted_dim: usize,
    pub gamma_alpha: DMatrix<f64>,
    pub gamma_beta: DMatrix<f64>,
}

impl DataMatrices {
    pub fn rows(&self) -> usize {
        self.gamma_alpha.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.gamma_alpha.ncols() - self.lifted_dim
    }

    pub fn psi_a(&self) -> nalgebra::DMatrixView<'_, f64> {
        self.gamma_alpha.columns(0, self.lifted_dim)
    }

    pub fn psi_b(&self) -> nalgebra::DMatrixView<'_, f64> {
        self.gamma_beta.columns(0, self.lifted_dim)
    }

    pub fn inputs(&self) -> nalgebra::DMatrixView<'_, f64> {
        self.gamma_alpha.columns(self.lifted_dim, self.input_dim())
    }
}

fn lift_rows(basis: &MonomialBasis, x: &DMatrix<f64>, inputs: &DMatrix<f64>) -> DMatrix<f64> {
    let n = basis.output_dim();
    let m = inputs.ncols();
    let rows: Vec<Vec<f64>> = (0..x.nrows())
        .into_par_iter()
        .map(|k| {
            let xi: Vec<f64> = x.row(k).iter().copied().collect();
            let mut out = vec![0.0; n + m];
            basis.lift_into(&xi, &mut out[..n]);
            for j in 0..m {
                out[n + j] = inputs[(k, j)];
            }
            out
        })
        .collect();
    DMatrix::from_fn(rows.len(), n + m, |i, j| rows[i][j])
}

pub fn assemble_matrices(basis: &MonomialBasis, snapshots: &SnapshotSet) -> Result<DataMatrices> {
    if snapshots.is_empty() {
        return Err(Error::InvalidArgument("no snapshot pairs to assemble".into()));
    }
    check_dim("snapshot embedding", basis.input_dim(), snapshots.a.ncols())?;
    check_dim("snapshot successor embedding", basis.input_dim(), snapshots.b.ncols())?;
    Ok(DataMatrices {
        lifted_dim: basis.output_dim(),
        gamma_alpha: lift_rows(basis, &snapshots.a, &snapshots.u),
        gamma_beta: lift_rows(basis, &snapshots.b, &snapshots.u),
    })
}

//! Linear state-space baseline: a least-squares ARX fit realized in block
//! observer canonical form.
//!
//! The difference equation is
//! `y[k+1] = sum_{i<p} a_i y[k-i] + sum_{j<r} b_j u[k-j]`. With
//! `L = max(p, r)` (missing coefficients zero) the realization has state
//! `s = [s_1; ..; s_L]`, `y = s_1`, and
//!
//! ```text
//! s_i[k+1] = a_i s_1[k] + s_{i+1}[k] + b_i u[k]     (s_{L+1} = 0)
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, lstsq_min_norm, matrix_to_rows, rows_to_matrix};
use crate::prediction::Predictor;
use crate::trajectory::Trajectory;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSSModel {
    pub output_lags: usize,
    pub input_lags: usize,
    /// `a_i`, n x n, coefficient of `y[k-i]`.
    pub arx_a: Vec<DMatrix<f64>>,
    /// `b_j`, n x m, coefficient of `u[k-j]`.
    pub arx_b: Vec<DMatrix<f64>>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub sample_period: f64,
}

impl LinearSSModel {
    /// Realizes the ARX coefficients in observer canonical form.
    pub fn from_arx(arx_a: Vec<DMatrix<f64>>, arx_b: Vec<DMatrix<f64>>, sample_period: f64) -> Result<Self> {
        let (p, r) = (arx_a.len(), arx_b.len());
        if p == 0 || r == 0 {
            return Err(Error::InvalidArgument("ARX lags must be at least 1".into()));
        }
        let n = arx_a[0].nrows();
        let m = arx_b[0].ncols();
        for a in &arx_a {
            check_dim("ARX output coefficient rows", n, a.nrows())?;
            check_dim("ARX output coefficient cols", n, a.ncols())?;
        }
        for b in &arx_b {
            check_dim("ARX input coefficient rows", n, b.nrows())?;
            check_dim("ARX input coefficient cols", m, b.ncols())?;
        }
        let blocks = p.max(r);
        let dim = n * blocks;
        let mut a = DMatrix::zeros(dim, dim);
        let mut b = DMatrix::zeros(dim, m);
        for i in 0..blocks {
            if let Some(ai) = arx_a.get(i) {
                a.view_mut((i * n, 0), (n, n)).copy_from(ai);
            }
            if i + 1 < blocks {
                a.view_mut((i * n, (i + 1) * n), (n, n)).fill_with_identity();
            }
            if let Some(bi) = arx_b.get(i) {
                b.view_mut((i * n, 0), (n, m)).copy_from(bi);
            }
        }
        let mut c = DMatrix::zeros(n, dim);
        c.view_mut((0, 0), (n, n)).fill_with_identity();
        Ok(Self {
            output_lags: p,
            input_lags: r,
            arx_a,
            arx_b,
            a,
            b,
            c,
            sample_period,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn blocks(&self) -> usize {
        self.output_lags.max(self.input_lags)
    }

    /// Samples of history needed before a prediction can start.
    pub fn warmup(&self) -> usize {
        self.blocks() - 1
    }

    /// State at time `k` from histories ordered newest first:
    /// `outputs[0] = y[k]`, `inputs[0] = u[k-1]`.
    pub fn initial_state(&self, outputs: &[DVector<f64>], inputs: &[DVector<f64>]) -> Result<DVector<f64>> {
        let blocks = self.blocks();
        let n = self.output_dim();
        if outputs.len() < blocks || inputs.len() + 1 < blocks {
            return Err(Error::TooShort {
                needed: blocks,
                got: outputs.len().min(inputs.len() + 1),
            });
        }
        let mut s = DVector::zeros(self.state_dim());
        s.rows_mut(0, n).copy_from(&outputs[0]);
        for i in 1..blocks {
            let mut si = DVector::zeros(n);
            for l in i..blocks {
                // lag behind k-1 for the l-th coefficient feeding block i
                let back = l - i;
                if let Some(al) = self.arx_a.get(l) {
                    si += al * &outputs[1 + back];
                }
                if let Some(bl) = self.arx_b.get(l) {
                    si += bl * &inputs[back];
                }
            }
            s.rows_mut(i * n, n).copy_from(&si);
        }
        Ok(s)
    }

    /// State at sample `k` of a log; requires `k >= warmup()`.
    pub fn state_from_log(&self, log: &Trajectory, k: usize) -> Result<DVector<f64>> {
        let blocks = self.blocks();
        if k + 1 < blocks {
            return Err(Error::TooShort { needed: blocks, got: k + 1 });
        }
        let outputs: Vec<DVector<f64>> = (0..blocks).map(|j| log.states.row(k - j).transpose()).collect();
        let inputs: Vec<DVector<f64>> = (0..blocks.saturating_sub(1))
            .map(|j| log.inputs.row(k - 1 - j).transpose())
            .collect();
        self.initial_state(&outputs, &inputs)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = LinearSSFile {
            kind: "linear-ss".into(),
            output_lags: self.output_lags,
            input_lags: self.input_lags,
            output_dim: self.output_dim(),
            input_dim: self.input_dim(),
            sample_period: self.sample_period,
            arx_a: self.arx_a.iter().map(matrix_to_rows).collect(),
            arx_b: self.arx_b.iter().map(matrix_to_rows).collect(),
            a: matrix_to_rows(&self.a),
            b: matrix_to_rows(&self.b),
            c: matrix_to_rows(&self.c),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Parses the JSON form; the realization is rebuilt from the ARX
    /// coefficients and checked against the stored matrices.
    pub fn from_json(text: &str) -> Result<Self> {
        let f: LinearSSFile = serde_json::from_str(text)?;
        if f.kind != "linear-ss" {
            return Err(Error::Parse(format!("expected kind \"linear-ss\", got {:?}", f.kind)));
        }
        let arx_a = f
            .arx_a
            .iter()
            .map(|m| rows_to_matrix(m, f.output_dim))
            .collect::<Result<Vec<_>>>()?;
        let arx_b = f
            .arx_b
            .iter()
            .map(|m| rows_to_matrix(m, f.input_dim))
            .collect::<Result<Vec<_>>>()?;
        let model = Self::from_arx(arx_a, arx_b, f.sample_period)?;
        if rows_to_matrix(&f.a, model.state_dim())? != model.a || rows_to_matrix(&f.b, model.input_dim())? != model.b {
            return Err(Error::Parse("state-space matrices disagree with the ARX coefficients".into()));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct LinearSSFile {
    kind: String,
    output_lags: usize,
    input_lags: usize,
    output_dim: usize,
    input_dim: usize,
    sample_period: f64,
    arx_a: Vec<Vec<Vec<f64>>>,
    arx_b: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
}

/// Least-squares ARX fit over every trial (no regressor bridges two trials).
pub fn fit_arx(trials: &[Trajectory], output_lags: usize, input_lags: usize, sample_period: f64) -> Result<LinearSSModel> {
    if output_lags == 0 || input_lags == 0 {
        return Err(Error::InvalidArgument("ARX lags must be at least 1".into()));
    }
    let first = trials
        .first()
        .ok_or_else(|| Error::InvalidArgument("no trials to fit".into()))?;
    let n = first.state_dim();
    let m = first.input_dim();
    let back = output_lags.max(input_lags) - 1;
    let cols = n * output_lags + m * input_lags;
    let mut phi_rows: Vec<f64> = Vec::new();
    let mut target_rows: Vec<f64> = Vec::new();
    for t in trials {
        check_dim("trial output dimension", n, t.state_dim())?;
        check_dim("trial input dimension", m, t.input_dim())?;
        for k in back..t.len().saturating_sub(1) {
            for i in 0..output_lags {
                phi_rows.extend(t.states.row(k - i).iter());
            }
            for j in 0..input_lags {
                phi_rows.extend(t.inputs.row(k - j).iter());
            }
            target_rows.extend(t.states.row(k + 1).iter());
        }
    }
    let rows = target_rows.len() / n;
    let phi = DMatrix::from_row_slice(rows, cols, &phi_rows);
    let target = DMatrix::from_row_slice(rows, n, &target_rows);
    let (rank, _) = linalg::rank(&phi, None)?;
    if rank < cols {
        return Err(Error::RankDeficient { rank, cols });
    }
    let theta = lstsq_min_norm(&phi, &target, None)?;
    // theta stacks the transposed coefficient blocks
    let arx_a = (0..output_lags)
        .map(|i| theta.rows(i * n, n).transpose())
        .collect();
    let off = n * output_lags;
    let arx_b = (0..input_lags)
        .map(|j| theta.rows(off + j * m, m).transpose())
        .collect();
    LinearSSModel::from_arx(arx_a, arx_b, sample_period)
}

/// Outputs `y[0..=H]` of the realization from an initial window
/// (newest first, as in [`LinearSSModel::initial_state`]).
pub fn rollout_linear(
    model: &LinearSSModel,
    outputs: &[DVector<f64>],
    past_inputs: &[DVector<f64>],
    inputs: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let s0 = model.initial_state(outputs, past_inputs)?;
    rollout_state(model, s0, inputs)
}

fn rollout_state(model: &LinearSSModel, mut s: DVector<f64>, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("rollout input width", model.input_dim(), inputs.ncols())?;
    let n = model.output_dim();
    let mut y = DMatrix::zeros(inputs.nrows() + 1, n);
    y.row_mut(0).copy_from(&(&model.c * &s).transpose());
    for j in 0..inputs.nrows() {
        s = &model.a * &s + &model.b * inputs.row(j).transpose();
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { step: j + 1 });
        }
        y.row_mut(j + 1).copy_from(&(&model.c * &s).transpose());
    }
    Ok(y)
}

impl Predictor for LinearSSModel {
    fn output_dim(&self) -> usize {
        LinearSSModel::output_dim(self)
    }

    fn warmup(&self) -> usize {
        LinearSSModel::warmup(self)
    }

    fn predict_from_log(&self, log: &Trajectory, start: usize, horizon: usize) -> Result<DMatrix<f64>> {
        let s0 = self.state_from_log(log, start)?;
        rollout_state(self, s0, &log.inputs.rows(start, horizon).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_dimensional_state_for_two_outputs() {
        let a = vec![DMatrix::identity(2, 2) * 0.5, DMatrix::identity(2, 2) * 0.1];
        let b = vec![DMatrix::zeros(2, 3), DMatrix::zeros(2, 3)];
        let model = LinearSSModel::from_arx(a, b, 0.1).unwrap();
        assert_eq!(model.state_dim(), 4);
        assert_eq!(model.c.columns(0, 2), DMatrix::<f64>::identity(2, 2));
    }

    #[test]
    fn zero_window_zero_inputs_give_zero() {
        let a = vec![DMatrix::from_element(1, 1, 0.9), DMatrix::from_element(1, 1, -0.2)];
        let b = vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 0.3)];
        let model = LinearSSModel::from_arx(a, b, 0.1).unwrap();
        let zeros = vec![DVector::zeros(1); 2];
        let y = rollout_linear(&model, &zeros, &zeros, &DMatrix::zeros(10, 1)).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn json_round_trip() {
        let a = vec![DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3])];
        let b = vec![DMatrix::from_row_slice(2, 1, &[1.0, 0.25]), DMatrix::from_row_slice(2, 1, &[0.0, 0.5])];
        let model = LinearSSModel::from_arx(a, b, 0.1).unwrap();
        let text = model.to_json().unwrap();
        assert!(text.contains("\"kind\":\"linear-ss\""));
        assert_eq!(LinearSSModel::from_json(&text).unwrap(), model);
    }

    #[test]
    fn constant_data_is_rank_deficient() {
        let t = Trajectory::new(
            "flat",
            (0..50).map(|k| k as f64 * 0.1).collect(),
            DMatrix::from_element(50, 1, 1.0),
            DMatrix::from_element(50, 1, 2.0),
        )
        .unwrap();
        assert!(matches!(fit_arx(&[t], 1, 1, 0.1), Err(Error::RankDeficient { .. })));
    }
}

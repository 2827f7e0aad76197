//! The closed loop: measure, solve, apply, log.

use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ControlModel, MpcController, TrackingTask};
use crate::error::{check_dim, Result};
use crate::plants::{trial_rng, PlantSpec};
use crate::qp::QpStatus;

/// Something the controller can be closed around.
pub trait SimulatedPlant {
    fn output_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Measurement of the current state.
    fn measure(&mut self) -> Result<DVector<f64>>;
    /// Holds `u` for one sample period.
    fn apply(&mut self, u: &DVector<f64>) -> Result<()>;
}

/// A [`PlantSpec`] with its state, seeded noise and sample period.
pub struct PlantRunner {
    pub spec: PlantSpec,
    pub x: DVector<f64>,
    pub sample_period: f64,
    rng: ChaCha8Rng,
}

impl PlantRunner {
    pub fn new(spec: PlantSpec, sample_period: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            x: spec.initial_state(),
            spec,
            sample_period,
            rng: trial_rng(seed, 0),
        })
    }
}

impl SimulatedPlant for PlantRunner {
    fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }
    fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }
    fn measure(&mut self) -> Result<DVector<f64>> {
        Ok(self.spec.measure(&self.x, &mut self.rng))
    }
    fn apply(&mut self, u: &DVector<f64>) -> Result<()> {
        self.x = self.spec.propagate(&self.x, u, self.sample_period)?;
        Ok(())
    }
}

/// The prediction model itself as a noiseless plant.
pub struct LiftedModelPlant<'a> {
    pub model: &'a dyn ControlModel,
    pub z: DVector<f64>,
}

impl SimulatedPlant for LiftedModelPlant<'_> {
    fn output_dim(&self) -> usize {
        self.model.output_dim()
    }
    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }
    fn measure(&mut self) -> Result<DVector<f64>> {
        Ok(self.model.c() * &self.z)
    }
    fn apply(&mut self, u: &DVector<f64>) -> Result<()> {
        check_dim("applied input", self.model.input_dim(), u.len())?;
        self.z = self.model.a() * &self.z + self.model.b() * u;
        if self.z.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(crate::error::Error::Diverged { step: 1 })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Tick {
    pub t: f64,
    /// Measured output.
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub r: Vec<f64>,
    pub error: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub solve_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosedLoopLog {
    pub task: String,
    pub ticks: Vec<Tick>,
    /// Set when the loop stopped early.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosedLoopSummary {
    pub task: String,
    pub ticks: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub max_error: f64,
    /// Ticks whose solve did not reach optimal status.
    pub flagged_ticks: usize,
    pub p95_solve_ms: f64,
    pub failure: Option<String>,
}

impl ClosedLoopLog {
    pub fn errors(&self) -> Vec<f64> {
        self.ticks.iter().map(|t| t.error).collect()
    }

    pub fn mean_error(&self) -> f64 {
        if self.ticks.is_empty() {
            return f64::NAN;
        }
        self.ticks.iter().map(|t| t.error).sum::<f64>() / self.ticks.len() as f64
    }

    pub fn std_error(&self) -> f64 {
        let mean = self.mean_error();
        let n = self.ticks.len() as f64;
        (self.ticks.iter().map(|t| (t.error - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    /// 95th percentile of the per-tick solve time (nearest rank).
    pub fn solve_ms_percentile(&self, pct: f64) -> f64 {
        let mut ms: Vec<f64> = self.ticks.iter().map(|t| t.solve_ms).collect();
        if ms.is_empty() {
            return f64::NAN;
        }
        ms.sort_by(f64::total_cmp);
        let rank = ((pct / 100.0) * ms.len() as f64).ceil().max(1.0) as usize;
        ms[rank.min(ms.len()) - 1]
    }

    pub fn summary(&self) -> ClosedLoopSummary {
        ClosedLoopSummary {
            task: self.task.clone(),
            ticks: self.ticks.len(),
            mean_error: self.mean_error(),
            std_error: self.std_error(),
            max_error: self.ticks.iter().map(|t| t.error).fold(0.0, f64::max),
            flagged_ticks: self.ticks.iter().filter(|t| t.status != QpStatus::Optimal).count(),
            p95_solve_ms: self.solve_ms_percentile(95.0),
            failure: self.failure.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let (n, m) = self
            .ticks
            .first()
            .map_or((0, 0), |t| (t.y.len(), t.u.len()));
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend((1..=n).map(|i| format!("r{i}")));
        header.extend(["error", "status", "solve_ms"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for t in &self.ticks {
            let mut fields = vec![t.t.to_string()];
            fields.extend(t.y.iter().map(|v| v.to_string()));
            fields.extend(t.u.iter().map(|v| v.to_string()));
            fields.extend(t.r.iter().map(|v| v.to_string()));
            fields.push(t.error.to_string());
            fields.push(t.status.to_string());
            fields.push(format!("{:.3}", t.solve_ms));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Runs `controller` against `plant` over the whole task. The delay history
/// starts as copies of the first measurement and zero inputs. Plant or
/// controller failures truncate the log and are recorded in `failure`.
pub fn run_closed_loop(plant: &mut dyn SimulatedPlant, controller: &mut MpcController<'_>, task: &TrackingTask) -> Result<ClosedLoopLog> {
    let model = controller.model;
    check_dim("plant output vs model output", model.output_dim(), plant.output_dim())?;
    check_dim("plant input vs model input", model.input_dim(), plant.input_dim())?;
    check_dim("reference dimension", model.output_dim(), task.reference.ncols())?;
    let (need_y, need_u) = model.history();
    let horizon = controller.config().horizon;
    let mut log = ClosedLoopLog {
        task: task.name.clone(),
        ticks: Vec::with_capacity(task.len()),
        failure: None,
    };
    let mut outputs: VecDeque<DVector<f64>> = VecDeque::with_capacity(need_y + 1);
    let mut inputs: VecDeque<DVector<f64>> = VecDeque::from(vec![DVector::zeros(model.input_dim()); need_u]);

    for k in 0..task.len() {
        let y = match plant.measure() {
            Ok(y) => y,
            Err(e) => {
                log.failure = Some(format!("measurement failed at tick {k}: {e}"));
                break;
            }
        };
        if outputs.is_empty() {
            outputs.extend(std::iter::repeat_n(y.clone(), need_y.max(1)));
        } else {
            outputs.push_front(y.clone());
            outputs.truncate(need_y.max(1));
        }
        let window = task.window(k, horizon);
        let started = Instant::now();
        let step = controller.step(outputs.make_contiguous(), inputs.make_contiguous(), &window);
        let solve_ms = started.elapsed().as_secs_f64() * 1e3;
        let step = match step {
            Ok(s) => s,
            Err(e) => {
                log.failure = Some(format!("controller failed at tick {k}: {e}"));
                break;
            }
        };
        let r = task.point(k);
        log.ticks.push(Tick {
            t: k as f64 * task.sample_period,
            error: (&y - &r).norm(),
            y: y.iter().copied().collect(),
            u: step.u.iter().copied().collect(),
            r: r.iter().copied().collect(),
            status: step.status(),
            iterations: step.solution.iterations,
            solve_ms,
        });
        if let Err(e) = plant.apply(&step.u) {
            log.failure = Some(format!("plant diverged at tick {k}: {e}"));
            break;
        }
        if need_u > 0 {
            inputs.push_front(step.u);
            inputs.truncate(need_u);
        }
    }
    Ok(log)
}

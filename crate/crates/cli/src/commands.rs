//! The five commands. Each returns its in-memory results and, given an
//! output directory, writes them there along with the effective config.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use koopman_core::baseline::{fit_arx, LinearSSModel};
use koopman_core::mpc::{
    make_reference, run_closed_loop, ClosedLoopLog, ClosedLoopSummary, ControlModel, KoopmanControl, LiftedModelPlant,
    MpcController, PlantRunner, SimulatedPlant,
};
use koopman_core::plants::{characterize_noise, collect_trials, NoiseReport, SignalSpec};
use koopman_core::prediction::{evaluate_prediction, EvalOptions, KoopmanPredictor, Predictor, RolloutOptions};
use koopman_core::regression::{identify, Identification, KoopmanModel};
use koopman_core::trajectory::{load_dir, Trajectory};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::config::{samples, ModelPaths, RunConfig, Stream};

pub const CONFIG_ECHO: &str = "config.toml";
pub const KOOPMAN_MODEL: &str = "koopman_model.json";
pub const LINEAR_MODEL: &str = "linear_model.json";

fn create(path: &Path) -> anyhow::Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Creates `out` and echoes the config into it.
pub fn prepare_output(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join(CONFIG_ECHO), &cfg.to_toml()?)
}

/// Ramp-input training trials, simulated or read from `collect.data_dir`.
pub fn training_data(cfg: &RunConfig) -> anyhow::Result<Vec<Trajectory>> {
    if let Some(dir) = &cfg.collect.data_dir {
        let trials = load_dir(dir).with_context(|| format!("loading trials from {}", dir.display()))?;
        if trials.is_empty() {
            bail!("no trial CSVs in {}", dir.display());
        }
        for t in &trials {
            t.check_uniform(cfg.sample_period)?;
        }
        return Ok(trials);
    }
    let steps = samples(cfg.collect.duration, cfg.sample_period)? + 1;
    Ok(collect_trials(
        &cfg.plant,
        &cfg.collect.signal,
        cfg.collect.trials,
        steps,
        cfg.sample_period,
        cfg.stream_seed(Stream::Collect),
    )?)
}

pub fn cmd_collect(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<Vec<Trajectory>> {
    let trials = training_data(cfg)?;
    if let Some(out) = out {
        prepare_output(cfg, out)?;
        let dir = out.join("data");
        fs::create_dir_all(&dir)?;
        for t in &trials {
            t.save(&dir.join(format!("{}.csv", t.id)))?;
        }
    }
    Ok(trials)
}

pub fn cmd_noise(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<NoiseReport> {
    let report = characterize_noise(
        &cfg.plant,
        &cfg.noise.periods,
        cfg.noise.periods_per_t,
        cfg.sample_period,
        cfg.stream_seed(Stream::Noise),
    )?;
    if let Some(out) = out {
        prepare_output(cfg, out)?;
        write_noise(&report, cfg.sample_period, out)?;
    }
    Ok(report)
}

#[derive(Serialize)]
struct NoiseSummary {
    spread_std: f64,
    noise_floor: f64,
    within_two_std: f64,
    max_deviation: f64,
    points: usize,
}

fn write_noise(report: &NoiseReport, ts: f64, out: &Path) -> anyhow::Result<()> {
    let mut w = create(&out.join("noise_mean.csv"))?;
    let n = report.responses.first().map_or(0, |r| r.mean.ncols());
    let mut header = vec!["period".to_string(), "t".to_string()];
    header.extend((1..=n).map(|i| format!("mean_x{i}")));
    writeln!(w, "{}", header.join(","))?;
    for r in &report.responses {
        for k in 0..r.mean.nrows() {
            let mut fields = vec![r.period.to_string(), (k as f64 * ts).to_string()];
            fields.extend(r.mean.row(k).iter().map(|v| v.to_string()));
            writeln!(w, "{}", fields.join(","))?;
        }
    }
    w.flush()?;

    let mut w = create(&out.join("noise_distances.csv"))?;
    writeln!(w, "distance")?;
    for d in &report.distances {
        writeln!(w, "{d}")?;
    }
    w.flush()?;

    let summary = NoiseSummary {
        spread_std: report.spread_std,
        noise_floor: report.noise_floor(),
        within_two_std: report.within_two_std,
        max_deviation: report.max_deviation,
        points: report.distances.len(),
    };
    write_text(&out.join("noise_summary.json"), &serde_json::to_string_pretty(&summary)?)
}

pub struct Models {
    pub koopman: KoopmanModel,
    pub linear: LinearSSModel,
    /// Present when the models were identified in this run.
    pub identification: Option<Identification>,
}

pub fn cmd_identify(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<Models> {
    let trials = training_data(cfg)?;
    let id = identify(&cfg.identify, &trials)?;
    let linear = fit_arx(&trials, cfg.baseline.output_lags, cfg.baseline.input_lags, cfg.sample_period)?;
    if let Some(out) = out {
        prepare_output(cfg, out)?;
        write_models(&id.model, &linear, out)?;
        id.write_report_csv(create(&out.join("lambda_report.csv"))?)?;
        let chosen = &id.report[id.chosen];
        let summary = serde_json::json!({
            "chosen_lambda": chosen.lambda,
            "chosen_density": chosen.density,
            "chosen_normalized_error": chosen.normalized_error,
            "lifted_dim": id.model.lifted_dim(),
            "bottom_block_deviation": id.bottom_block_deviation,
            "linear_state_dim": linear.state_dim(),
        });
        write_text(&out.join("identify_summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(Models {
        koopman: id.model.clone(),
        linear,
        identification: Some(id),
    })
}

fn write_models(koopman: &KoopmanModel, linear: &LinearSSModel, out: &Path) -> anyhow::Result<()> {
    write_text(&out.join(KOOPMAN_MODEL), &koopman.to_json()?)?;
    write_text(&out.join(LINEAR_MODEL), &linear.to_json()?)
}

/// Loads both models when their paths are given, otherwise identifies them.
pub fn obtain_models(cfg: &RunConfig, paths: &ModelPaths) -> anyhow::Result<Models> {
    match (&paths.koopman, &paths.linear) {
        (Some(k), Some(l)) => Ok(Models {
            koopman: KoopmanModel::from_json(&read(k)?)?,
            linear: LinearSSModel::from_json(&read(l)?)?,
            identification: None,
        }),
        (None, None) => cmd_identify(cfg, None),
        _ => bail!("give both model paths or neither"),
    }
}

fn read(path: &PathBuf) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// One row per model, one column per sinusoid period.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionTable {
    pub periods: Vec<f64>,
    /// `(model name, mean error per period)`.
    pub rows: Vec<(String, Vec<f64>)>,
}

impl PredictionTable {
    pub fn row(&self, name: &str) -> Option<&[f64]> {
        self.rows.iter().find(|r| r.0 == name).map(|r| r.1.as_slice())
    }

    pub fn average(&self, name: &str) -> Option<f64> {
        self.row(name).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> anyhow::Result<()> {
        let mut header = vec!["model".to_string()];
        header.extend(self.periods.iter().map(|p| format!("T{p}")));
        header.push("avg".into());
        writeln!(w, "{}", header.join(","))?;
        for (name, errs) in &self.rows {
            let avg = errs.iter().sum::<f64>() / errs.len() as f64;
            let mut fields = vec![name.clone()];
            fields.extend(errs.iter().map(|e| e.to_string()));
            fields.push(avg.to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// The log with its outputs replaced by the mean response at each phase of
/// the input period.
fn period_mean_log(log: &Trajectory, per: usize, offset: usize) -> Trajectory {
    let n = log.state_dim();
    let mut sums = DMatrix::<f64>::zeros(per, n);
    let mut counts = vec![0usize; per];
    for k in 0..log.len() {
        let phase = (k + offset) % per;
        for j in 0..n {
            sums[(phase, j)] += log.states[(k, j)];
        }
        counts[phase] += 1;
    }
    let mut mean = log.clone();
    for k in 0..log.len() {
        let phase = (k + offset) % per;
        for j in 0..n {
            mean.states[(k, j)] = sums[(phase, j)] / counts[phase] as f64;
        }
    }
    mean
}

pub fn cmd_predict(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<PredictionTable> {
    let models = obtain_models(cfg, &cfg.predict.models)?;
    let p = &cfg.predict;
    let ts = cfg.sample_period;
    let steps = samples(p.duration, ts)?;
    let settle = samples(p.settle, ts)?;
    if settle >= steps {
        bail!("predict.settle must be shorter than predict.duration");
    }
    let opts = EvalOptions {
        horizon: samples(p.horizon, ts)?,
        stride: p.stride,
        first_start: 0,
    };
    let koopman = KoopmanPredictor::new(&models.koopman, RolloutOptions::default())?;
    let predictors: [(&str, &dyn Predictor); 2] = [("koopman", &koopman), ("linear-ss", &models.linear)];
    let mut rows: Vec<(String, Vec<f64>)> = predictors
        .iter()
        .flat_map(|(name, _)| [(name.to_string(), vec![]), (format!("{name}-vs-mean"), vec![])])
        .collect();
    if let Some(out) = out {
        prepare_output(cfg, out)?;
        write_models(&models.koopman, &models.linear, out)?;
        fs::create_dir_all(out.join("predictions"))?;
    }
    for (idx, &period) in p.periods.iter().enumerate() {
        let signal = SignalSpec::Sinusoid { period };
        let seed = cfg.stream_seed(Stream::Predict).wrapping_add(idx as u64);
        let log = collect_trials(&cfg.plant, &signal, 1, steps, ts, seed)?.remove(0);
        let log = log.slice(settle, steps, "");
        let per = samples(period, ts)?;
        let mean_log = period_mean_log(&log, per.max(1), settle);
        for (i, (name, predictor)) in predictors.iter().enumerate() {
            let report = evaluate_prediction(*predictor, &log, opts)?;
            let against_mean = evaluate_prediction(*predictor, &mean_log, opts)?;
            rows[2 * i].1.push(report.mean_error);
            rows[2 * i + 1].1.push(against_mean.mean_error);
            if let Some(out) = out {
                let stem = out.join("predictions").join(format!("{name}_T{period}"));
                report.write_csv(create(&stem.with_extension("csv"))?)?;
                write_text(&stem.with_extension("json"), &serde_json::to_string_pretty(&report.summary())?)?;
            }
        }
    }
    let table = PredictionTable {
        periods: p.periods.clone(),
        rows,
    };
    if let Some(out) = out {
        table.write_csv(create(&out.join("prediction_table.csv"))?)?;
    }
    Ok(table)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrackingRun {
    pub controller: String,
    pub summary: ClosedLoopSummary,
    #[serde(skip)]
    pub log: ClosedLoopLog,
}

fn run_one(cfg: &RunConfig, model: &dyn ControlModel, task: &koopman_core::mpc::TrackingTask) -> anyhow::Result<ClosedLoopLog> {
    let mut controller = MpcController::new(cfg.mpc.controller, model)?;
    let mut plant: Box<dyn SimulatedPlant + '_> = if cfg.mpc.model_as_plant {
        let (ny, nu) = model.history();
        let y0 = DVector::zeros(model.output_dim());
        let z = model.state(&vec![y0; ny.max(1)], &vec![DVector::zeros(model.input_dim()); nu])?;
        Box::new(LiftedModelPlant { model, z })
    } else {
        Box::new(PlantRunner::new(cfg.plant.clone(), cfg.sample_period, cfg.stream_seed(Stream::Mpc))?)
    };
    Ok(run_closed_loop(plant.as_mut(), &mut controller, task)?)
}

pub fn cmd_mpc(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<Vec<TrackingRun>> {
    let models = obtain_models(cfg, &cfg.mpc.models)?;
    let koopman = KoopmanControl::new(&models.koopman)?;
    let controllers: [(&str, &dyn ControlModel); 2] = [("K-MPC", &koopman), ("L-MPC", &models.linear)];
    if let Some(out) = out {
        prepare_output(cfg, out)?;
        write_models(&models.koopman, &models.linear, out)?;
        fs::create_dir_all(out.join("logs"))?;
    }
    let mut runs = Vec::new();
    for t in &cfg.mpc.tasks {
        let task = make_reference(t.shape, t.scale, t.duration, cfg.sample_period)?;
        if let Some(out) = out {
            task.write_csv(create(&out.join("logs").join(format!("reference_{}.csv", task.name)))?)?;
        }
        for (name, model) in controllers {
            let log = run_one(cfg, model, &task)?;
            if let Some(out) = out {
                let file = format!("{}_{}.csv", name.to_lowercase(), task.name);
                log.write_csv(create(&out.join("logs").join(file))?)?;
            }
            runs.push(TrackingRun {
                controller: name.to_string(),
                summary: log.summary(),
                log,
            });
        }
    }
    if let Some(out) = out {
        write_tracking(&runs, out)?;
    }
    Ok(runs)
}

fn write_tracking(runs: &[TrackingRun], out: &Path) -> anyhow::Result<()> {
    let mut w = create(&out.join("tracking_table.csv"))?;
    writeln!(w, "controller,task,ticks,mean_error,std_error,max_error,flagged_ticks,failure")?;
    for r in runs {
        let s = &r.summary;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.controller,
            s.task,
            s.ticks,
            s.mean_error,
            s.std_error,
            s.max_error,
            s.flagged_ticks,
            s.failure.as_deref().unwrap_or("").replace(',', ";")
        )?;
    }
    w.flush()?;
    // Wall-clock figures live apart from the reproducible outputs.
    let timing: Vec<_> = runs
        .iter()
        .map(|r| {
            serde_json::json!({
                "controller": r.controller,
                "task": r.summary.task,
                "p95_solve_ms": r.summary.p95_solve_ms,
            })
        })
        .collect();
    write_text(&out.join("timing.json"), &serde_json::to_string_pretty(&timing)?)?;
    let summaries: Vec<_> = runs
        .iter()
        .map(|r| {
            let s = &r.summary;
            serde_json::json!({
                "controller": r.controller,
                "task": s.task,
                "ticks": s.ticks,
                "mean_error": s.mean_error,
                "std_error": s.std_error,
                "max_error": s.max_error,
                "flagged_ticks": s.flagged_ticks,
                "failure": s.failure,
            })
        })
        .collect();
    write_text(&out.join("tracking_summary.json"), &serde_json::to_string_pretty(&summaries)?)
}

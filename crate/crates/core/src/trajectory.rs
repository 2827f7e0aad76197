//! Uniformly sampled trial logs and their CSV representation.
//!
//! A log file has a header `t,x1..xn,u1..um`, one row per sample, and any
//! number of leading `# key=value` comment lines (the generating seed is
//! always recorded as `# seed=...`).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};

/// Timestamps may drift this far from `k * T_s` before sampling is rejected.
pub const SAMPLING_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub times: Vec<f64>,
    /// One row per sample.
    pub states: DMatrix<f64>,
    /// One row per sample; row k is the input held over `[t_k, t_{k+1})`.
    pub inputs: DMatrix<f64>,
    pub seed: Option<u64>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, times: Vec<f64>, states: DMatrix<f64>, inputs: DMatrix<f64>) -> Result<Self> {
        check_dim("trajectory state rows", times.len(), states.nrows())?;
        check_dim("trajectory input rows", times.len(), inputs.nrows())?;
        Ok(Self {
            id: id.into(),
            times,
            states,
            inputs,
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn check_uniform(&self, sample_period: f64) -> Result<()> {
        for (row, w) in self.times.windows(2).enumerate() {
            let step = w[1] - w[0];
            if (step - sample_period).abs() > SAMPLING_TOLERANCE {
                return Err(Error::NonUniformSampling {
                    row: row + 1,
                    step,
                    expected: sample_period,
                });
            }
        }
        Ok(())
    }

    /// Rows `[start, end)` as a new trajectory with the same id suffixed.
    pub fn slice(&self, start: usize, end: usize, suffix: &str) -> Trajectory {
        let end = end.min(self.len());
        let start = start.min(end);
        Trajectory {
            id: format!("{}{}", self.id, suffix),
            times: self.times[start..end].to_vec(),
            states: self.states.rows(start, end - start).into_owned(),
            inputs: self.inputs.rows(start, end - start).into_owned(),
            seed: self.seed,
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        if let Some(seed) = self.seed {
            writeln!(out, "# seed={seed}")?;
        }
        writeln!(out, "# trial={}", self.id)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.state_dim()).map(|i| format!("x{i}")));
        header.extend((1..=self.input_dim()).map(|i| format!("u{i}")));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut fields = vec![self.times[k].to_string()];
            fields.extend(self.states.row(k).iter().map(|v| v.to_string()));
            fields.extend(self.inputs.row(k).iter().map(|v| v.to_string()));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(id: &str, input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut seed = None;
        let mut id = id.to_string();
        let mut text = String::new();
        let mut line = String::new();
        while reader.read_line(&mut line)? > 0 {
            if let Some(comment) = line.trim_start().strip_prefix('#') {
                if let Some((key, value)) = comment.trim().split_once('=') {
                    match key.trim() {
                        "seed" => {
                            seed = Some(value.trim().parse::<u64>().map_err(|e| {
                                Error::Parse(format!("bad seed comment {value:?}: {e}"))
                            })?)
                        }
                        "trial" => id = value.trim().to_string(),
                        _ => {}
                    }
                }
            } else {
                text.push_str(&line);
            }
            line.clear();
        }

        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("t") {
            return Err(Error::Parse("first column must be `t`".into()));
        }
        let n = headers.iter().filter(|h| h.starts_with('x')).count();
        let m = headers.iter().filter(|h| h.starts_with('u')).count();
        if n + m + 1 != headers.len() {
            return Err(Error::Parse(format!("unexpected header {:?}", headers)));
        }
        let mut times = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let mut row = rec.iter().map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad number {f:?}: {e}")))
            });
            times.push(row.next().transpose()?.ok_or_else(|| Error::Parse("empty row".into()))?);
            for v in row {
                values.push(v?);
            }
        }
        let rows = times.len();
        let states = DMatrix::from_fn(rows, n, |i, j| values[i * (n + m) + j]);
        let inputs = DMatrix::from_fn(rows, m, |i, j| values[i * (n + m) + n + j]);
        let mut traj = Trajectory::new(id, times, states, inputs)?;
        traj.seed = seed;
        Ok(traj)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::read_csv(&id, std::fs::File::open(path)?)
    }
}

/// Loads every `*.csv` under `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<Trajectory>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Trajectory::load(p)).collect()
}

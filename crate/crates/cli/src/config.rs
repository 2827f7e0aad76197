//! Run configuration: one TOML file drives every command.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use koopman_core::lifting::DelaySpec;
use koopman_core::mpc::{ControllerConfig, Shape};
use koopman_core::plants::{arm_surrogate_plant, PlantSpec, SignalSpec};
use koopman_core::regression::IdentifyConfig;
use serde::{Deserialize, Serialize};

/// Everything a command needs. Missing sections take the defaults below;
/// the fully resolved config is echoed next to every command's output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Each command derives its own stream from it, see
    /// [`RunConfig::stream_seed`].
    pub seed: u64,
    pub sample_period: f64,
    pub plant: PlantSpec,
    pub collect: CollectConfig,
    pub noise: NoiseConfig,
    pub identify: IdentifyConfig,
    pub baseline: BaselineConfig,
    pub predict: PredictConfig,
    pub mpc: MpcConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectConfig {
    pub trials: usize,
    /// Seconds per trial.
    pub duration: f64,
    pub signal: SignalSpec,
    /// Read trial CSVs from here instead of simulating them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Sinusoid periods in seconds.
    pub periods: Vec<f64>,
    pub periods_per_t: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub output_lags: usize,
    pub input_lags: usize,
}

/// Where the two models come from: files, or an in-process identification.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub koopman: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub periods: Vec<f64>,
    /// Seconds simulated per sinusoid period setting.
    pub duration: f64,
    /// Leading seconds dropped before scoring.
    pub settle: f64,
    /// Prediction horizon in seconds.
    pub horizon: f64,
    /// Samples between prediction start indices.
    pub stride: usize,
    #[serde(default)]
    pub models: ModelPaths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub shape: Shape,
    pub duration: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    pub controller: ControllerConfig,
    pub tasks: Vec<TaskConfig>,
    /// Close the loop around the identified models themselves (noise-free)
    /// instead of the plant.
    #[serde(default)]
    pub model_as_plant: bool,
    #[serde(default)]
    pub models: ModelPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sample_period = 0.1;
        let delays = DelaySpec {
            state_dim: 2,
            input_dim: 3,
            state_delays: 1,
            input_delays: 0,
            sample_period,
        };
        let mut identify = IdentifyConfig::new(4, delays, (0..=50).map(f64::from).collect());
        identify.scale_coordinates = true;
        let controller = ControllerConfig {
            sample_period,
            ..ControllerConfig::default()
        };
        Self {
            seed: 1,
            sample_period,
            plant: arm_surrogate_plant(),
            collect: CollectConfig {
                trials: 16,
                duration: 150.0,
                signal: SignalSpec::RandomRamp {
                    transition_min: 5.0,
                    transition_max: 10.0,
                },
                data_dir: None,
            },
            noise: NoiseConfig {
                periods: sinusoid_periods(),
                periods_per_t: 30,
            },
            identify,
            baseline: BaselineConfig {
                output_lags: 2,
                input_lags: 2,
            },
            predict: PredictConfig {
                periods: sinusoid_periods(),
                duration: 120.0,
                settle: 20.0,
                horizon: 2.5,
                stride: 5,
                models: ModelPaths::default(),
            },
            mpc: MpcConfig {
                controller,
                tasks: vec![
                    TaskConfig {
                        shape: Shape::Pacman,
                        duration: 90.0,
                        scale: 2.5,
                    },
                    TaskConfig {
                        shape: Shape::Star,
                        duration: 180.0,
                        scale: 2.5,
                    },
                    TaskConfig {
                        shape: Shape::BlockM,
                        duration: 300.0,
                        scale: 2.5,
                    },
                ],
                model_as_plant: false,
                models: ModelPaths::default(),
            },
        }
    }
}

fn sinusoid_periods() -> Vec<f64> {
    (6..=12).map(f64::from).collect()
}

/// Converts a duration to a whole number of samples.
pub fn samples(seconds: f64, sample_period: f64) -> anyhow::Result<usize> {
    let n = seconds / sample_period;
    if !(n.is_finite() && n >= 0.0) {
        bail!("duration {seconds} s is not a valid sample count at T_s = {sample_period}");
    }
    Ok(n.round() as usize)
}

/// Command streams derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Collect,
    Noise,
    Predict,
    Mpc,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.sample_period > 0.0 && self.sample_period.is_finite()) {
            bail!("sample_period must be positive");
        }
        self.plant.validate()?;
        self.identify.delays.validate()?;
        self.mpc.controller.validate()?;
        let n = self.plant.output_dim();
        let m = self.plant.input_dim();
        let d = &self.identify.delays;
        if d.state_dim != n || d.input_dim != m {
            bail!(
                "identify.delays dimensions ({}, {}) do not match the plant ({n}, {m})",
                d.state_dim,
                d.input_dim
            );
        }
        for (name, ts) in [
            ("identify.delays", d.sample_period),
            ("mpc.controller", self.mpc.controller.sample_period),
        ] {
            if (ts - self.sample_period).abs() > 1e-12 {
                bail!("{name}.sample_period {ts} differs from sample_period {}", self.sample_period);
            }
        }
        if self.collect.trials == 0 {
            bail!("collect.trials must be positive");
        }
        Ok(())
    }

    /// Seed for one command's randomness. Streams are fixed offsets from the
    /// master seed so that commands never share noise.
    pub fn stream_seed(&self, stream: Stream) -> u64 {
        let offset = match stream {
            Stream::Collect => 0,
            Stream::Noise => 1,
            Stream::Predict => 2,
            Stream::Mpc => 3,
        };
        self.seed.wrapping_add(offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("sed = 3").is_err());
    }

    #[test]
    fn mismatched_delays_rejected() {
        let text = "[identify]\nmax_degree = 2\nlambdas = [0.0]\n[identify.delays]\nstate_dim = 3\ninput_dim = 3\nstate_delays = 1\ninput_delays = 0\nsample_period = 0.1\n";
        assert!(RunConfig::parse(text).is_err());
    }
}

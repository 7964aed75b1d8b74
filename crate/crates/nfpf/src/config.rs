//! Line-oriented `key = value` experiment configuration. Unknown keys are
//! rejected so typos fail loudly.

use crate::error::{Error, Result};
use crate::par::ExecMode;
use crate::sim::Controller;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Env {
    LinGauss,
    Pendulum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Oracle {
    Truth,
    Kf,
}

/// Everything the CLI needs, with documented defaults.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub env: Env,
    pub latent_dim: usize,
    pub flow_layers: usize,
    pub hidden: usize,
    pub sigma: f64,
    pub conditional: bool,
    pub window: usize,
    pub lr: f64,
    pub epochs: usize,
    pub n_trajectories: usize,
    pub t_steps: usize,
    pub image_side: usize,
    pub dt: f64,
    pub controller: Controller,
    pub n_particles: usize,
    pub resample_threshold: f64,
    pub seed: u64,
    pub q_scale: f64,
    /// None = derived from env (pendulum pixels are dequantized).
    pub dequantize: Option<bool>,
    pub exec: ExecMode,
    pub oracle: Oracle,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// None = out_dir/model.ckpt
    pub checkpoint_path: Option<PathBuf>,
    /// None = data_dir/traj_000.csv
    pub trajectory_path: Option<PathBuf>,
    pub trace_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub loss_path: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: Env::LinGauss,
            latent_dim: 4,
            flow_layers: 4,
            hidden: 64,
            sigma: 1.0,
            conditional: false,
            window: 8,
            lr: 1e-3,
            epochs: 50,
            n_trajectories: 10,
            t_steps: 200,
            image_side: 16,
            dt: 0.05,
            controller: Controller::RandomUniform { scale: 1.0 },
            n_particles: 1000,
            resample_threshold: 0.5,
            seed: 0,
            q_scale: 1e-4,
            dequantize: None,
            exec: ExecMode::Parallel,
            oracle: Oracle::Truth,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint_path: None,
            trajectory_path: None,
            trace_path: None,
            metrics_path: None,
            loss_path: None,
        }
    }
}

impl ExperimentConfig {
    pub fn dequantize(&self) -> bool {
        self.dequantize.unwrap_or(self.env == Env::Pendulum)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint_path.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    pub fn trajectory_path(&self) -> PathBuf {
        self.trajectory_path.clone().unwrap_or_else(|| self.data_dir.join("traj_000.csv"))
    }

    pub fn trace_path(&self) -> PathBuf {
        self.trace_path.clone().unwrap_or_else(|| self.out_dir.join("trace.csv"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics_path.clone().unwrap_or_else(|| self.out_dir.join("metrics.csv"))
    }

    pub fn loss_path(&self) -> PathBuf {
        self.loss_path.clone().unwrap_or_else(|| self.out_dir.join("loss.csv"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got '{line}'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{value}' for key {key}")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean '{value}' for key {key}"))),
            }
        }
        match key {
            "env" => {
                self.env = match value {
                    "lingauss" => Env::LinGauss,
                    "pendulum" => Env::Pendulum,
                    _ => {
                        return Err(Error::Config(format!(
                            "env must be lingauss or pendulum, got '{value}'"
                        )))
                    }
                }
            }
            "latent_dim" => self.latent_dim = num(key, value)?,
            "flow_layers" => self.flow_layers = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "conditional" => self.conditional = flag(key, value)?,
            "k" | "window" => self.window = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "n_trajectories" => self.n_trajectories = num(key, value)?,
            "t_steps" => self.t_steps = num(key, value)?,
            "image_side" => self.image_side = num(key, value)?,
            "dt" => self.dt = num(key, value)?,
            "controller" => self.controller = value.parse()?,
            "n_particles" => self.n_particles = num(key, value)?,
            "resample_threshold" => self.resample_threshold = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "q_scale" => self.q_scale = num(key, value)?,
            "dequantize" => self.dequantize = Some(flag(key, value)?),
            "exec" => {
                self.exec = match value {
                    "parallel" => ExecMode::Parallel,
                    "sequential" => ExecMode::Sequential,
                    _ => {
                        return Err(Error::Config(format!(
                            "exec must be parallel or sequential, got '{value}'"
                        )))
                    }
                }
            }
            "oracle" => {
                self.oracle = match value {
                    "truth" => Oracle::Truth,
                    "kf" => Oracle::Kf,
                    _ => {
                        return Err(Error::Config(format!(
                            "oracle must be truth or kf, got '{value}'"
                        )))
                    }
                }
            }
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint_path" => self.checkpoint_path = Some(PathBuf::from(value)),
            "trajectory_path" => self.trajectory_path = Some(PathBuf::from(value)),
            "trace_path" => self.trace_path = Some(PathBuf::from(value)),
            "metrics_path" => self.metrics_path = Some(PathBuf::from(value)),
            "loss_path" => self.loss_path = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.flow_layers == 0 || self.hidden == 0 {
            return Err(Error::Config("flow_layers and hidden must be positive".into()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.n_particles == 0 {
            return Err(Error::Config("n_particles must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return Err(Error::Config(format!(
                "resample_threshold must lie in [0, 1], got {}",
                self.resample_threshold
            )));
        }
        if self.env == Env::Pendulum && self.image_side < 8 {
            return Err(Error::Config("image_side must be >= 8".into()));
        }
        if self.dt <= 0.0 {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.q_scale <= 0.0 {
            return Err(Error::Config(format!("q_scale must be positive, got {}", self.q_scale)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_config() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.latent_dim, 4);
        assert_eq!(cfg.window, 8);
        assert_eq!(cfg.env, Env::LinGauss);
        assert!(!cfg.dequantize());
    }

    #[test]
    fn parses_keys_comments_and_blank_lines() {
        let cfg = ExperimentConfig::parse(
            "# experiment\nenv = pendulum\nlatent_dim = 100\n\nseed=7\nlr = 0.0\nexec = sequential\n",
        )
        .unwrap();
        assert_eq!(cfg.env, Env::Pendulum);
        assert_eq!(cfg.latent_dim, 100);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.lr, 0.0);
        assert_eq!(cfg.exec, ExecMode::Sequential);
        assert!(cfg.dequantize()); // pendulum default
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let err = ExperimentConfig::parse("particels = 100\n").unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("particels"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(ExperimentConfig::parse("latent_dim = four\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("sigma = -1\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("env = cartpole\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("no_equals_sign\n"), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::parse("resample_threshold = 1.5\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn derived_paths_follow_directories() {
        let cfg = ExperimentConfig::parse("data_dir = /tmp/d\nout_dir = /tmp/o\n").unwrap();
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("/tmp/o/model.ckpt"));
        assert_eq!(cfg.trajectory_path(), PathBuf::from("/tmp/d/traj_000.csv"));
        let cfg2 = ExperimentConfig::parse("checkpoint_path = /x/m.ckpt\n").unwrap();
        assert_eq!(cfg2.checkpoint_path(), PathBuf::from("/x/m.ckpt"));
    }
}

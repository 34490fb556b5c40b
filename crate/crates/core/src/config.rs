//! Flat `key = value` experiment configuration.
//!
//! Parsing starts from the preset for the `pde` key and overrides the keys
//! present in the file; any other key is an error. Every key, its unit and
//! its default are listed by [`ExperimentConfig::to_text`].

use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{make_dataset, DataError, OperatorDataset, Pde};
use crate::exact_gp::InitConfig;
use crate::io::{self, IoError};
use crate::kernel::BaseKernel;
use crate::pipeline::{EvalSettings, TrainSettings};
use crate::posterior::{SampleSolver, MIN_BAND_SAMPLES};
use crate::sdd::SddConfig;
use crate::wavelet::WaveletBasis;
use crate::wno::WnoConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown configuration key '{0}'")]
    UnknownKey(String),
    #[error("bad value '{value}' for '{key}': {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    SInit,
    SSdd,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::SInit => "s_init",
            SweepAxis::SSdd => "s_sdd",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "s_init" => Ok(SweepAxis::SInit),
            "s_sdd" => Ok(SweepAxis::SSdd),
            _ => Err("expected s_init or s_sdd".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub pde: Pde,
    pub n_train: usize,
    pub n_test: usize,
    /// Points per axis.
    pub resolution: usize,
    pub data_seed: u64,
    pub seed: u64,

    pub kernel: BaseKernel,
    pub width: usize,
    pub layers: usize,
    pub levels: usize,
    pub basis: WaveletBasis,
    pub latent_channels: usize,
    pub grid_coords: bool,
    pub pad: bool,

    pub s_init: usize,
    pub init_epochs: usize,
    pub init_lr: f64,
    pub train_operator: bool,
    pub chunk: usize,
    pub max_variance: f64,
    pub min_noise: f64,
    pub initial_noise: f64,

    pub s_sdd: Option<usize>,
    pub batch: usize,
    pub beta: f64,
    pub momentum: f64,
    pub averaging: f64,
    pub sdd_epochs: usize,
    pub exact_weights: bool,

    pub samples: usize,
    pub level: f64,
    pub sample_solver: String,
    pub superres: usize,

    pub sweep_axis: SweepAxis,
    pub sweep_values: Vec<usize>,
    pub sweep_seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Pde::Burgers)
    }
}

fn value_err(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: ToString,
{
    value.parse().map_err(|e: T::Err| value_err(key, value, e))
}

impl ExperimentConfig {
    /// Desk-scale settings for each benchmark.
    pub fn preset(pde: Pde) -> Self {
        let mut c = ExperimentConfig {
            pde,
            n_train: 300,
            n_test: 100,
            resolution: pde.default_resolution(),
            data_seed: 1,
            seed: 0,
            kernel: BaseKernel::Matern52,
            width: 16,
            layers: 2,
            levels: 3,
            basis: WaveletBasis::Db6,
            latent_channels: 8,
            grid_coords: true,
            pad: false,
            s_init: 100,
            init_epochs: 60,
            init_lr: 0.01,
            train_operator: true,
            chunk: 32,
            max_variance: 2.0,
            min_noise: 1e-3,
            initial_noise: 0.1,
            s_sdd: None,
            batch: 32,
            beta: 0.1,
            momentum: 0.9,
            averaging: 0.9,
            sdd_epochs: 450,
            exact_weights: false,
            samples: 200,
            level: 0.95,
            sample_solver: "exact".into(),
            superres: 0,
            sweep_axis: SweepAxis::SSdd,
            sweep_values: vec![50, 100, 200, 300],
            sweep_seeds: 3,
        };
        match pde {
            Pde::Advection => {
                c.batch = 20;
                c.sdd_epochs = 400;
            }
            Pde::Darcy => {
                c.pad = true;
                c.batch = 16;
                c.beta = 0.01;
                c.sdd_epochs = 300;
                c.superres = 58;
            }
            Pde::Burgers | Pde::External => {}
        }
        c
    }

    pub fn parse_text(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let pairs = io::parse_key_values(text, path)?;
        let pde = match pairs.iter().find(|(k, _)| k == "pde") {
            Some((k, v)) => parse::<Pde>(k, v)?,
            None => Pde::Burgers,
        };
        let mut c = Self::preset(pde);
        for (k, v) in &pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
        Self::parse_text(&text, path)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "pde" => self.pde = parse(key, v)?,
            "n_train" => self.n_train = parse(key, v)?,
            "n_test" => self.n_test = parse(key, v)?,
            "resolution" => self.resolution = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "kernel" => self.kernel = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "levels" => self.levels = parse(key, v)?,
            "basis" => self.basis = parse(key, v)?,
            "latent_channels" => self.latent_channels = parse(key, v)?,
            "grid_coords" => self.grid_coords = parse(key, v)?,
            "pad" => self.pad = parse(key, v)?,
            "s_init" => self.s_init = parse(key, v)?,
            "init_epochs" => self.init_epochs = parse(key, v)?,
            "init_lr" => self.init_lr = parse(key, v)?,
            "train_operator" => self.train_operator = parse(key, v)?,
            "chunk" => self.chunk = parse(key, v)?,
            "max_variance" => self.max_variance = parse(key, v)?,
            "min_noise" => self.min_noise = parse(key, v)?,
            "initial_noise" => self.initial_noise = parse(key, v)?,
            "s_sdd" => self.s_sdd = if v == "all" { None } else { Some(parse(key, v)?) },
            "batch" => self.batch = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "averaging" => self.averaging = parse(key, v)?,
            "sdd_epochs" => self.sdd_epochs = parse(key, v)?,
            "exact_weights" => self.exact_weights = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "level" => self.level = parse(key, v)?,
            "sample_solver" => match v {
                "exact" | "sdd" => self.sample_solver = v.to_string(),
                _ => return Err(value_err(key, v, "expected exact or sdd")),
            },
            "superres" => self.superres = parse(key, v)?,
            "sweep_axis" => self.sweep_axis = parse(key, v)?,
            "sweep_values" => {
                self.sweep_values = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_, _>>()?
            }
            "sweep_seeds" => self.sweep_seeds = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.pde == Pde::External {
            return bad("pde 'external' cannot be generated; ingest the data instead".into());
        }
        if self.n_train == 0 {
            return bad("n_train must be positive".into());
        }
        if self.resolution < 2 {
            return bad(format!("resolution {} is too small", self.resolution));
        }
        if self.s_init == 0 {
            return bad("s_init must be positive".into());
        }
        if self.init_epochs == 0 || !(self.init_lr > 0.0) {
            return bad("init_epochs and init_lr must be positive".into());
        }
        if !(self.max_variance > 0.0 && self.min_noise > 0.0 && self.initial_noise >= self.min_noise) {
            return bad("variance bounds must be positive with initial_noise >= min_noise".into());
        }
        if self.chunk == 0 {
            return bad("chunk must be positive".into());
        }
        let n_sdd = self.s_sdd.unwrap_or(self.n_train);
        if n_sdd == 0 || n_sdd > self.n_train {
            return bad(format!("s_sdd {n_sdd} must lie in 1..={}", self.n_train));
        }
        self.sdd_config()
            .validate(n_sdd.max(self.batch))
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.wno_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.samples != 0 && self.samples < MIN_BAND_SAMPLES {
            return bad(format!("samples must be 0 or at least {MIN_BAND_SAMPLES}"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level {} must lie in (0, 1)", self.level));
        }
        if self.superres != 0 && !self.superres.is_multiple_of(self.resolution) {
            return bad(format!(
                "superres {} must be a multiple of the resolution {}",
                self.superres, self.resolution
            ));
        }
        if self.sweep_values.is_empty() || self.sweep_values.contains(&0) || self.sweep_seeds == 0 {
            return bad("sweep values and seed count must be positive".into());
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.resolution; self.pde.rank()]
    }

    pub fn wno_config(&self) -> WnoConfig {
        WnoConfig {
            width: self.width,
            layers: self.layers,
            basis: self.basis,
            levels: self.levels,
            latent_channels: self.latent_channels,
            grid_coords: self.grid_coords,
            pad: self.pad,
            ..WnoConfig::default()
        }
    }

    pub fn sdd_config(&self) -> SddConfig {
        SddConfig {
            steps: 0,
            batch: self.batch,
            beta: self.beta,
            momentum: self.momentum,
            averaging: self.averaging,
            seed: self.seed,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            wno: self.wno_config(),
            kernel: self.kernel,
            init: InitConfig {
                s_init: self.s_init,
                epochs: self.init_epochs,
                lr: self.init_lr,
                operator_lr: None,
                train_operator: self.train_operator,
                chunk: self.chunk,
                seed: self.seed,
                max_variance: self.max_variance,
                min_noise: self.min_noise,
                initial_noise: self.initial_noise,
            },
            sdd: self.sdd_config(),
            sdd_epochs: self.sdd_epochs,
            s_sdd: self.s_sdd,
            exact_weights: self.exact_weights,
            model_seed: self.seed,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        let solver = if self.sample_solver == "sdd" {
            let n = self.s_sdd.unwrap_or(self.n_train);
            let mut cfg = self.sdd_config().with_epochs(self.sdd_epochs, n);
            cfg.batch = cfg.batch.min(n);
            SampleSolver::Sdd(cfg)
        } else {
            SampleSolver::Exact
        };
        EvalSettings {
            samples: self.samples,
            level: self.level,
            seed: self.seed,
            solver,
        }
    }

    /// Test data use a seed distinct from the training data.
    pub fn test_seed(&self) -> u64 {
        self.data_seed.wrapping_add(1)
    }

    pub fn train_data(&self) -> Result<OperatorDataset, DataError> {
        make_dataset(self.pde, self.n_train, self.resolution, self.data_seed)
    }

    /// Test data at `resolution`, the native one when `None`.
    pub fn test_data(&self, resolution: Option<usize>) -> Result<OperatorDataset, DataError> {
        make_dataset(
            self.pde,
            self.n_test,
            resolution.unwrap_or(self.resolution),
            self.test_seed(),
        )
    }

    /// Every key with its current value, one per line, with units.
    pub fn to_text(&self) -> String {
        let s_sdd = self.s_sdd.map_or("all".to_string(), |n| n.to_string());
        let values = self
            .sweep_values
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let rows: Vec<(&str, String, &str)> = vec![
            ("pde", self.pde.name().into(), "burgers | advection | darcy"),
            ("n_train", self.n_train.to_string(), "samples"),
            ("n_test", self.n_test.to_string(), "samples"),
            ("resolution", self.resolution.to_string(), "grid points per axis"),
            (
                "data_seed",
                self.data_seed.to_string(),
                "training data; test data use data_seed + 1",
            ),
            ("seed", self.seed.to_string(), "operator init, subsets, batches, draws"),
            ("kernel", self.kernel.to_string(), "matern52 | rbf"),
            ("width", self.width.to_string(), "hidden channels"),
            ("layers", self.layers.to_string(), "wavelet layers"),
            ("levels", self.levels.to_string(), "decomposition levels"),
            ("basis", self.basis.to_string(), "haar | db4 | db6"),
            ("latent_channels", self.latent_channels.to_string(), "channels"),
            (
                "grid_coords",
                self.grid_coords.to_string(),
                "append coordinates to inputs",
            ),
            ("pad", self.pad.to_string(), "zero-pad to a multiple of 2^levels"),
            ("s_init", self.s_init.to_string(), "samples in the likelihood fit"),
            (
                "init_epochs",
                self.init_epochs.to_string(),
                "full-batch optimiser steps",
            ),
            ("init_lr", self.init_lr.to_string(), "optimiser step size"),
            (
                "train_operator",
                self.train_operator.to_string(),
                "fit operator weights with the hypers",
            ),
            ("chunk", self.chunk.to_string(), "samples per taped operator pass"),
            (
                "max_variance",
                self.max_variance.to_string(),
                "upper bound on the process variance",
            ),
            (
                "min_noise",
                self.min_noise.to_string(),
                "lower bound on the noise variance",
            ),
            (
                "initial_noise",
                self.initial_noise.to_string(),
                "noise variance at the start",
            ),
            ("s_sdd", s_sdd, "samples in the dual descent, or all"),
            ("batch", self.batch.to_string(), "rows per step"),
            ("beta", self.beta.to_string(), "step size, divided by the sample count"),
            ("momentum", self.momentum.to_string(), "in [0, 1)"),
            ("averaging", self.averaging.to_string(), "in (0, 1]"),
            (
                "sdd_epochs",
                self.sdd_epochs.to_string(),
                "epochs of ceil(N/batch) steps",
            ),
            (
                "exact_weights",
                self.exact_weights.to_string(),
                "Cholesky weights, no dual descent",
            ),
            ("samples", self.samples.to_string(), "posterior draws, 0 disables bands"),
            ("level", self.level.to_string(), "band coverage level"),
            ("sample_solver", self.sample_solver.clone(), "exact | sdd"),
            (
                "superres",
                self.superres.to_string(),
                "finer test resolution, 0 disables",
            ),
            ("sweep_axis", self.sweep_axis.name().into(), "s_init | s_sdd"),
            ("sweep_values", values, "comma separated sample counts"),
            ("sweep_seeds", self.sweep_seeds.to_string(), "seeds per value"),
        ];
        rows.into_iter()
            .map(|(k, v, unit)| format!("{k} = {v}  # {unit}\n"))
            .collect()
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        io::parse_key_values(&self.to_text(), Path::new("<config>")).expect("rendered config parses")
    }
}

//! Dataset generation for the Burgers, advection and Darcy benchmarks, and
//! dataset persistence as GPOT containers plus a key-value sidecar.

pub mod advection;
pub mod burgers;
pub mod darcy;
pub mod grf;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{Boundary, GridError, GridFunction};
use crate::io::{self, IoError, RawTensor};

pub use advection::{advection_solve, AdvectionIc};
pub use burgers::burgers_solve;
pub use darcy::{darcy_permeability_sample, darcy_solve};
pub use grf::GrfSpec;

pub const BURGERS_VISCOSITY: f64 = 0.1;
pub const BURGERS_TIME: f64 = 1.0;
pub const ADVECTION_SPEED: f64 = 1.0;
pub const ADVECTION_TIME: f64 = 0.5;
pub const DARCY_FORCING: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data request: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pde {
    Burgers,
    Advection,
    Darcy,
    /// Ingested data without a generator.
    External,
}

impl Pde {
    pub fn name(self) -> &'static str {
        match self {
            Pde::Burgers => "burgers",
            Pde::Advection => "advection",
            Pde::Darcy => "darcy",
            Pde::External => "external",
        }
    }

    pub fn boundary(self) -> Boundary {
        match self {
            Pde::Darcy => Boundary::Dirichlet,
            _ => Boundary::Periodic,
        }
    }

    pub fn rank(self) -> usize {
        match self {
            Pde::Darcy => 2,
            _ => 1,
        }
    }

    pub fn default_resolution(self) -> usize {
        match self {
            Pde::Burgers => 128,
            Pde::Advection => 40,
            Pde::Darcy => 29,
            Pde::External => 0,
        }
    }
}

impl fmt::Display for Pde {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pde {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "burgers" => Ok(Pde::Burgers),
            "advection" => Ok(Pde::Advection),
            "darcy" => Ok(Pde::Darcy),
            "external" => Ok(Pde::External),
            _ => Err(DataError::Invalid(format!(
                "unknown pde '{s}' (expected burgers, advection, darcy or external)"
            ))),
        }
    }
}

/// Input/target pairs on one grid with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorDataset {
    pub pde: Pde,
    pub inputs: Vec<GridFunction>,
    pub targets: Vec<GridFunction>,
    pub resolution: Vec<usize>,
    pub seed: u64,
    pub params: Vec<(String, String)>,
}

/// Independent stream per sample, so sample `i` does not depend on `N`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates one input/target pair for `pde` at `resolution`.
pub fn make_sample(
    pde: Pde,
    resolution: usize,
    seed: u64,
    index: usize,
) -> Result<(GridFunction, GridFunction), DataError> {
    let mut rng = sample_rng(seed, index);
    match pde {
        Pde::Burgers => {
            let u0 = GrfSpec::burgers().sample(&[resolution], Boundary::Periodic, &mut rng)?;
            let u1 = burgers_solve(&u0, BURGERS_VISCOSITY, BURGERS_TIME)?;
            Ok((u0, u1))
        }
        Pde::Advection => {
            let ic = AdvectionIc::random(&mut rng);
            Ok((
                ic.sample(resolution)?,
                advection_solve(&ic, ADVECTION_SPEED, ADVECTION_TIME, resolution)?,
            ))
        }
        Pde::Darcy => {
            let a = darcy_permeability_sample(resolution, &mut rng)?;
            let u = darcy_solve(&a, DARCY_FORCING)?;
            Ok((a, u))
        }
        Pde::External => Err(DataError::Invalid(
            "external datasets are ingested, not generated".into(),
        )),
    }
}

pub fn make_dataset(pde: Pde, n: usize, resolution: usize, seed: u64) -> Result<OperatorDataset, DataError> {
    if resolution < 2 {
        return Err(DataError::Invalid(format!("resolution {resolution} too small")));
    }
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let (z, u) = make_sample(pde, resolution, seed, i)?;
        inputs.push(z);
        targets.push(u);
    }
    let params = match pde {
        Pde::Burgers => vec![
            ("viscosity".to_string(), BURGERS_VISCOSITY.to_string()),
            ("t_final".to_string(), BURGERS_TIME.to_string()),
            ("cfl".to_string(), burgers::CFL.to_string()),
        ],
        Pde::Advection => vec![
            ("speed".to_string(), ADVECTION_SPEED.to_string()),
            ("t_final".to_string(), ADVECTION_TIME.to_string()),
        ],
        Pde::Darcy => vec![
            ("forcing".to_string(), DARCY_FORCING.to_string()),
            (
                "phases".to_string(),
                format!("{},{}", darcy::PHASE_LOW, darcy::PHASE_HIGH),
            ),
        ],
        Pde::External => Vec::new(),
    };
    Ok(OperatorDataset {
        pde,
        inputs,
        targets,
        resolution: vec![resolution; pde.rank()],
        seed,
        params,
    })
}

fn stack(fields: &[GridFunction], resolution: &[usize]) -> Result<RawTensor, DataError> {
    let channels = fields.first().map_or(1, |f| f.channels());
    let mut dims = vec![fields.len(), channels];
    dims.extend_from_slice(resolution);
    let mut data = Vec::with_capacity(dims.iter().product());
    for f in fields {
        data.extend_from_slice(f.values());
    }
    Ok(RawTensor::new(dims, data)?)
}

impl OperatorDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn boundary(&self) -> Boundary {
        self.inputs.first().map_or(self.pde.boundary(), |f| f.boundary())
    }

    /// Hex SHA-256 over tag, grid and every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.pde.name().as_bytes());
        for d in &self.resolution {
            h.update((*d as u64).to_le_bytes());
        }
        for f in self.inputs.iter().chain(&self.targets) {
            for v in f.values() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.inputs.truncate(n);
        out.targets.truncate(n);
        out
    }

    /// Writes `inputs.gpot`, `targets.gpot` and `dataset.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
        io::write_tensor(&dir.join("inputs.gpot"), &stack(&self.inputs, &self.resolution)?)?;
        io::write_tensor(&dir.join("targets.gpot"), &stack(&self.targets, &self.resolution)?)?;
        let mut meta = vec![
            ("pde".to_string(), self.pde.name().to_string()),
            ("samples".to_string(), self.len().to_string()),
            (
                "resolution".to_string(),
                self.resolution
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("x"),
            ),
            ("boundary".to_string(), self.boundary().name().to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("digest".to_string(), self.digest()),
        ];
        meta.extend(self.params.iter().cloned());
        io::write_key_values(&dir.join("dataset.txt"), &meta)?;
        Ok(())
    }

    /// Reads a dataset directory. The sidecar is optional; without it the
    /// data are treated as external, periodic, on the unit domain.
    pub fn ingest(dir: &Path) -> Result<Self, DataError> {
        let inputs = io::read_tensor(&dir.join("inputs.gpot"))?;
        let targets = io::read_tensor(&dir.join("targets.gpot"))?;
        let sidecar = dir.join("dataset.txt");
        let meta = if sidecar.exists() {
            io::read_key_values(&sidecar)?
        } else {
            Vec::new()
        };
        let get = |k: &str| meta.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let pde = get("pde").map_or(Ok(Pde::External), Pde::from_str)?;
        let boundary = match get("boundary") {
            Some(b) => b.parse()?,
            None => pde.boundary(),
        };
        let seed = get("seed").map_or(Ok(0), |s| {
            s.parse()
                .map_err(|_| DataError::Invalid(format!("bad seed '{s}' in {}", sidecar.display())))
        })?;
        let split = |t: &RawTensor, what: &str| -> Result<Vec<GridFunction>, DataError> {
            if t.dims.len() < 3 || t.dims.len() > 4 {
                return Err(DataError::Invalid(format!(
                    "{what} must be [N, channels, spatial...] with 1 or 2 spatial axes, got {:?}",
                    t.dims
                )));
            }
            let spatial = t.dims[2..].to_vec();
            let per = t.dims[1..].iter().product::<usize>();
            t.data
                .chunks(per.max(1))
                .take(t.dims[0])
                .map(|c| {
                    Ok(GridFunction::new(
                        t.dims[1],
                        spatial.clone(),
                        vec![1.0; spatial.len()],
                        boundary,
                        c.to_vec(),
                    )?)
                })
                .collect()
        };
        let zs = split(&inputs, "inputs")?;
        let us = split(&targets, "targets")?;
        if inputs.dims[0] != targets.dims[0] || inputs.dims[2..] != targets.dims[2..] {
            return Err(DataError::Invalid(format!(
                "inputs {:?} and targets {:?} disagree",
                inputs.dims, targets.dims
            )));
        }
        let params = meta
            .iter()
            .filter(|(k, _)| !["pde", "samples", "resolution", "boundary", "seed", "digest"].contains(&k.as_str()))
            .cloned()
            .collect();
        let ds = OperatorDataset {
            pde,
            inputs: zs,
            targets: us,
            resolution: inputs.dims[2..].to_vec(),
            seed,
            params,
        };
        if let Some(d) = get("digest") {
            if d != ds.digest() {
                return Err(DataError::Invalid(format!("digest mismatch for {}", dir.display())));
            }
        }
        Ok(ds)
    }
}

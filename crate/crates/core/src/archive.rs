//! Trained models on disk: one GPOT container per tensor and a `manifest.txt`
//! of scalars and settings. A probe input and its stored prediction are
//! checked bit for bit on every load.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::grid::{Boundary, GridError, GridFunction};
use crate::io::{self, IoError, RawTensor};
use crate::kernel::{KernelError, KernelHyper, LatentCache};
use crate::posterior::{GpoModel, Normalizer, PosteriorError};
use crate::tensor::{Tensor, TensorError};
use crate::wno::{Activation, WnoConfig, WnoError, WnoParams};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";
/// Prefix for the experiment settings echoed into the manifest.
const CONFIG_PREFIX: &str = "config.";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error(
        "archive {path} does not reproduce its probe prediction; it is corrupt or was written by an incompatible build"
    )]
    Probe { path: String },
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Operator(#[from] WnoError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A model together with the experiment settings it was trained with.
#[derive(Clone, Debug)]
pub struct ModelArchive {
    pub model: GpoModel,
    pub config: Vec<(String, String)>,
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn field_tensor(f: &GridFunction) -> Result<RawTensor, IoError> {
    let mut dims = vec![f.channels()];
    dims.extend_from_slice(f.dims());
    RawTensor::new(dims, f.values().to_vec())
}

fn matrix_tensor(m: &DMatrix<f64>) -> Result<RawTensor, IoError> {
    RawTensor::new(vec![m.nrows(), m.ncols()], m.transpose().as_slice().to_vec())
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Gelu => "gelu",
        Activation::Linear => "linear",
    }
}

impl ModelArchive {
    /// Writes the archive, predicting at `probe` to store the reference
    /// output.
    pub fn save(&self, dir: &Path, probe: &GridFunction) -> Result<(), ArchiveError> {
        fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
        let m = &self.model;
        let c = &m.config;
        let t = &m.target_template;
        let mut meta: Vec<(String, String)> = vec![
            ("format".into(), FORMAT_VERSION.to_string()),
            ("kernel".into(), m.kernel.to_string()),
            ("log_lengthscale".into(), m.hyper.log_lengthscale.to_string()),
            ("log_variance".into(), m.hyper.log_variance.to_string()),
            ("log_noise".into(), m.hyper.log_noise.to_string()),
            ("fingerprint".into(), m.cache.fingerprint().to_string()),
            ("wno.width".into(), c.width.to_string()),
            ("wno.layers".into(), c.layers.to_string()),
            ("wno.basis".into(), c.basis.to_string()),
            ("wno.levels".into(), c.levels.to_string()),
            ("wno.latent_channels".into(), c.latent_channels.to_string()),
            ("wno.grid_coords".into(), c.grid_coords.to_string()),
            ("wno.pad".into(), c.pad.to_string()),
            ("wno.activation".into(), activation_name(c.activation).into()),
            ("coarse_dims".into(), join(&m.params.coarse_dims)),
            ("in_channels".into(), m.params.in_channels.to_string()),
            ("parameter_tensors".into(), m.params.tensors().len().to_string()),
            ("train_dims".into(), join(&m.train_dims)),
            ("input_mean".into(), m.normalizer.input_mean.to_string()),
            ("input_std".into(), m.normalizer.input_std.to_string()),
            ("target_extents".into(), join(t.extents())),
            ("target_boundary".into(), t.boundary().to_string()),
            ("probe_extents".into(), join(probe.extents())),
            ("probe_boundary".into(), probe.boundary().to_string()),
        ];
        meta.extend(
            self.config
                .iter()
                .map(|(k, v)| (format!("{CONFIG_PREFIX}{k}"), v.clone())),
        );

        for (i, p) in m.params.tensors().iter().enumerate() {
            let raw = RawTensor::new(p.shape().to_vec(), p.data().to_vec())?;
            io::write_tensor(&dir.join(format!("param_{i:03}.gpot")), &raw)?;
        }
        let latents = RawTensor::new(vec![m.cache.len(), m.cache.dim()], m.cache.features().to_vec())?;
        io::write_tensor(&dir.join("latents.gpot"), &latents)?;
        io::write_tensor(&dir.join("weights.gpot"), &matrix_tensor(&m.weights)?)?;
        let d = m.normalizer.target_mean.len();
        io::write_tensor(
            &dir.join("target_mean.gpot"),
            &RawTensor::new(vec![d], m.normalizer.target_mean.clone())?,
        )?;
        io::write_tensor(
            &dir.join("target_std.gpot"),
            &RawTensor::new(vec![d], m.normalizer.target_std.clone())?,
        )?;
        io::write_tensor(&dir.join("target_template.gpot"), &field_tensor(t)?)?;
        let out = m.predict_mean(std::slice::from_ref(probe))?;
        io::write_tensor(&dir.join("probe_input.gpot"), &field_tensor(probe)?)?;
        io::write_tensor(&dir.join("probe_output.gpot"), &field_tensor(&out[0])?)?;
        io::write_key_values(&dir.join(MANIFEST), &meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ArchiveError> {
        let manifest = dir.join(MANIFEST);
        let meta = io::read_key_values(&manifest)?;
        let path = manifest.display().to_string();
        let bad = |reason: String| ArchiveError::Manifest {
            path: path.clone(),
            reason,
        };
        let get = |k: &str| {
            meta.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| bad(format!("missing key '{k}'")))
        };
        fn num<T: std::str::FromStr>(
            v: &str,
            k: &str,
            bad: &dyn Fn(String) -> ArchiveError,
        ) -> Result<T, ArchiveError> {
            v.parse().map_err(|_| bad(format!("bad value '{v}' for '{k}'")))
        }
        let list =
            |k: &str| -> Result<Vec<f64>, ArchiveError> { get(k)?.split(',').map(|s| num(s, k, &bad)).collect() };
        let ulist =
            |k: &str| -> Result<Vec<usize>, ArchiveError> { get(k)?.split(',').map(|s| num(s, k, &bad)).collect() };

        let format: u32 = num(get("format")?, "format", &bad)?;
        if format != FORMAT_VERSION {
            return Err(bad(format!(
                "format {format} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let config = WnoConfig {
            width: num(get("wno.width")?, "wno.width", &bad)?,
            layers: num(get("wno.layers")?, "wno.layers", &bad)?,
            basis: get("wno.basis")?.parse().map_err(|_| bad("bad wavelet basis".into()))?,
            levels: num(get("wno.levels")?, "wno.levels", &bad)?,
            latent_channels: num(get("wno.latent_channels")?, "wno.latent_channels", &bad)?,
            grid_coords: num(get("wno.grid_coords")?, "wno.grid_coords", &bad)?,
            pad: num(get("wno.pad")?, "wno.pad", &bad)?,
            activation: match get("wno.activation")? {
                "gelu" => Activation::Gelu,
                "linear" => Activation::Linear,
                other => return Err(bad(format!("unknown activation '{other}'"))),
            },
        };
        let kernel = get("kernel")?.parse()?;
        let hyper = KernelHyper {
            log_lengthscale: num(get("log_lengthscale")?, "log_lengthscale", &bad)?,
            log_variance: num(get("log_variance")?, "log_variance", &bad)?,
            log_noise: num(get("log_noise")?, "log_noise", &bad)?,
        };
        let count: usize = num(get("parameter_tensors")?, "parameter_tensors", &bad)?;
        let tensors = (0..count)
            .map(|i| {
                let raw = io::read_tensor(&dir.join(format!("param_{i:03}.gpot")))?;
                Ok(Tensor::new(raw.dims, raw.data)?)
            })
            .collect::<Result<Vec<_>, ArchiveError>>()?;
        let params = WnoParams::from_tensors(
            ulist("coarse_dims")?,
            num(get("in_channels")?, "in_channels", &bad)?,
            tensors,
        )?;

        let latents = io::read_tensor(&dir.join("latents.gpot"))?;
        if latents.dims.len() != 2 {
            return Err(bad("latents must be a matrix".into()));
        }
        let cache = LatentCache::from_features(latents.data, latents.dims[1], get("fingerprint")?.to_string())?;
        let w = io::read_tensor(&dir.join("weights.gpot"))?;
        if w.dims.len() != 2 || w.dims[0] != cache.len() {
            return Err(bad(format!(
                "weights {:?} do not match {} latents",
                w.dims,
                cache.len()
            )));
        }
        let weights = DMatrix::from_row_slice(w.dims[0], w.dims[1], &w.data);
        let target_mean = io::read_tensor(&dir.join("target_mean.gpot"))?.data;
        let target_std = io::read_tensor(&dir.join("target_std.gpot"))?.data;
        if target_mean.len() != weights.ncols() || target_std.len() != weights.ncols() {
            return Err(bad("normaliser length differs from the output size".into()));
        }
        let normalizer = Normalizer {
            input_mean: num(get("input_mean")?, "input_mean", &bad)?,
            input_std: num(get("input_std")?, "input_std", &bad)?,
            target_mean,
            target_std,
        };
        let field = |file: &str, extents: &str, boundary: &str| -> Result<GridFunction, ArchiveError> {
            let raw = io::read_tensor(&dir.join(file))?;
            if raw.dims.len() < 2 {
                return Err(bad(format!("{file} is not a field")));
            }
            let b: Boundary = get(boundary)?.parse().map_err(|_| bad(format!("bad '{boundary}'")))?;
            Ok(GridFunction::new(
                raw.dims[0],
                raw.dims[1..].to_vec(),
                list(extents)?,
                b,
                raw.data,
            )?)
        };
        let target_template = field("target_template.gpot", "target_extents", "target_boundary")?;
        let model = GpoModel {
            config,
            kernel,
            params,
            hyper,
            normalizer,
            cache,
            weights,
            target_template,
            train_dims: ulist("train_dims")?,
        };

        let probe = field("probe_input.gpot", "probe_extents", "probe_boundary")?;
        let stored = io::read_tensor(&dir.join("probe_output.gpot"))?;
        let again = model.predict_mean(std::slice::from_ref(&probe))?;
        let same = again[0].values().len() == stored.data.len()
            && again[0]
                .values()
                .iter()
                .zip(&stored.data)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(ArchiveError::Probe {
                path: dir.display().to_string(),
            });
        }
        let config = meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(CONFIG_PREFIX).map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(ModelArchive { model, config })
    }
}

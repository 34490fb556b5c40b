use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpo_core::archive::{ArchiveError, ModelArchive};
use gpo_core::config::{ConfigError, ExperimentConfig};
use gpo_core::data::{make_dataset, DataError, OperatorDataset, Pde};
use gpo_core::grid::GridFunction;
use gpo_core::io::{self, IoError, RawTensor};
use gpo_core::pipeline::{evaluate, sweep, sweep_summary, train, EvalSettings, PipelineError};
use gpo_core::posterior::{pathwise_sample, PosteriorError};
use gpo_core::report;
use gpo_core::sdd::SddError;

/// Gaussian process operator benchmarks: data generation, training,
/// evaluation, posterior sampling and sample-count sweeps.
#[derive(Parser)]
#[command(name = "gpo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` (`data_seed` for generate).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and test datasets.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the operator kernel and the representer weights.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training dataset directory; generated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Relative errors, band coverage and plots on a test set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model archive directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Test dataset directory; generated from the model's config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Posterior draws for the bands (0 skips them).
        #[arg(long)]
        samples: Option<usize>,
        /// Nominal band level, e.g. 0.95.
        #[arg(long)]
        level: Option<f64>,
        /// Also evaluate on freshly generated test data at this resolution.
        #[arg(long)]
        superres: Option<usize>,
    },
    /// Draw posterior samples at test inputs.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Model archive directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Test dataset directory; generated from the model's config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of posterior draws.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train and evaluate over a list of sample counts and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Numerical(m) | CliError::Io(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(e) => e.into(),
            e => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(e) => e.into(),
            DataError::Numerical(m) => CliError::Numerical(m),
            e => CliError::Validation(e.to_string()),
        }
    }
}

impl From<PosteriorError> for CliError {
    fn from(e: PosteriorError) -> Self {
        match e {
            PosteriorError::Factorisation { .. } | PosteriorError::Solver(SddError::NonFinite { .. }) => {
                CliError::Numerical(e.to_string())
            }
            e => CliError::Validation(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Posterior(p) => p.into(),
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ArchiveError> for CliError {
    fn from(e: ArchiveError) -> Self {
        match e {
            ArchiveError::Posterior(p) => p.into(),
            e @ (ArchiveError::Io(_) | ArchiveError::Manifest { .. } | ArchiveError::Probe { .. }) => {
                CliError::Io(e.to_string())
            }
            e => CliError::Validation(e.to_string()),
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut c = match &common.config {
        Some(p) => ExperimentConfig::read(p)?,
        None => ExperimentConfig::default(),
    };
    apply_overrides(&mut c, &common.overrides)?;
    Ok(c)
}

fn apply_overrides(c: &mut ExperimentConfig, overrides: &[String]) -> Result<(), CliError> {
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("override '{kv}' is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "pde" {
            // A new benchmark starts from its own preset.
            let keep = std::mem::replace(c, ExperimentConfig::preset(v.parse()?));
            c.seed = keep.seed;
            c.data_seed = keep.data_seed;
        } else {
            c.set(k, v)?;
        }
    }
    c.validate()?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| IoError::file(path, e).into())
}

fn write_config(dir: &Path, c: &ExperimentConfig) -> Result<(), CliError> {
    Ok(report::write_text(&dir.join("config.txt"), &c.to_text())?)
}

fn stack_fields(fields: &[GridFunction]) -> Result<RawTensor, IoError> {
    let mut dims = vec![fields.len()];
    if let Some(f) = fields.first() {
        dims.push(f.channels());
        dims.extend_from_slice(f.dims());
    }
    RawTensor::new(dims, fields.iter().flat_map(|f| f.values().iter().copied()).collect())
}

fn generate(common: &Common) -> Result<(), CliError> {
    let mut c = load_config(common)?;
    if let Some(s) = common.seed {
        c.data_seed = s;
    }
    create_dir(&common.out)?;
    c.train_data()?.write(&common.out.join("train"))?;
    c.test_data(None)?.write(&common.out.join("test"))?;
    if c.superres > 0 {
        c.test_data(Some(c.superres))?
            .write(&common.out.join("test_superres"))?;
    }
    write_config(&common.out, &c)?;
    println!("wrote {}", common.out.display());
    Ok(())
}

fn train_cmd(common: &Common, data: Option<&Path>) -> Result<(), CliError> {
    let mut c = load_config(common)?;
    if let Some(s) = common.seed {
        c.seed = s;
    }
    let dataset = match data {
        Some(d) => OperatorDataset::ingest(d)?,
        None => c.train_data()?,
    };
    let out = train(&dataset, &c.train_settings())?;
    create_dir(&common.out)?;
    report::write_trace_csv(&common.out.join("trace.csv"), &out.init_trace, &out.sdd_trace)?;
    let archive = ModelArchive {
        model: out.model,
        config: c.pairs(),
    };
    archive.save(&common.out.join("model"), &dataset.inputs[0])?;
    write_config(&common.out, &c)?;
    let h = archive.model.hyper;
    println!(
        "trained on {} samples: lengthscale {:.4}, variance {:.4}, noise {:.3e}",
        archive.model.len(),
        h.lengthscale(),
        h.variance(),
        h.noise()
    );
    Ok(())
}

/// Experiment config stored in the archive, with command-line overrides.
fn archived_config(archive: &ModelArchive, common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut c = match &common.config {
        Some(p) => ExperimentConfig::read(p)?,
        None => {
            let text = io::format_key_values(&archive.config);
            ExperimentConfig::parse_text(&text, Path::new("<archive>"))?
        }
    };
    apply_overrides(&mut c, &common.overrides)?;
    if let Some(s) = common.seed {
        c.seed = s;
    }
    Ok(c)
}

fn test_data(c: &ExperimentConfig, data: Option<&Path>) -> Result<OperatorDataset, CliError> {
    Ok(match data {
        Some(d) => OperatorDataset::ingest(d)?,
        None => c.test_data(None)?,
    })
}

fn evaluate_cmd(
    common: &Common,
    model: &Path,
    data: Option<&Path>,
    samples: Option<usize>,
    level: Option<f64>,
    superres: Option<usize>,
) -> Result<(), CliError> {
    let archive = ModelArchive::load(model)?;
    let mut c = archived_config(&archive, common)?;
    if let Some(s) = samples {
        c.samples = s;
    }
    if let Some(l) = level {
        c.level = l;
    }
    if let Some(r) = superres {
        c.superres = r;
    }
    c.validate()?;
    let test = test_data(&c, data)?;
    let settings = c.eval_settings();
    let eval = evaluate(&archive.model, &test, &settings)?;
    create_dir(&common.out)?;
    report::write_errors_csv(&common.out.join("errors.csv"), &eval.rel_l2)?;

    let mut summary = vec![
        ("test_samples".to_string(), test.len().to_string()),
        ("rel_l2_mean".to_string(), eval.mean.to_string()),
        ("rel_l2_std".to_string(), eval.std.to_string()),
        (
            "rel_l2_note".to_string(),
            "mean +- standard deviation of per-sample relative L2 over the test set".to_string(),
        ),
    ];
    if let Some(cov) = eval.coverage {
        summary.push(("level".into(), c.level.to_string()));
        summary.push(("coverage".into(), cov.to_string()));
    }
    let plots = common.out.join("plots");
    create_dir(&plots)?;
    for i in 0..test.len().min(3) {
        let (truth, mean) = (&test.targets[i], &eval.predictions[i]);
        let svg = if truth.dims().len() == 1 {
            let band = eval.bands.as_ref().map(|b| (&b[i].0, &b[i].1));
            report::line_plot_svg(truth, mean, band)
        } else {
            let err = mean
                .with_values(
                    mean.channels(),
                    mean.values()
                        .iter()
                        .zip(truth.values())
                        .map(|(m, t)| (m - t).abs())
                        .collect(),
                )
                .map_err(|e| CliError::Validation(e.to_string()))?;
            let mut panels = vec![("truth", truth), ("mean", mean), ("abs error", &err)];
            let width;
            if let Some(b) = &eval.bands {
                width = b[i]
                    .1
                    .with_values(
                        1,
                        b[i].1
                            .values()
                            .iter()
                            .zip(b[i].0.values())
                            .map(|(h, l)| h - l)
                            .collect(),
                    )
                    .map_err(|e| CliError::Validation(e.to_string()))?;
                panels.push(("band width", &width));
            }
            report::heatmap_svg(&panels)
        };
        report::write_text(&plots.join(format!("sample_{i}.svg")), &svg)?;
    }

    if c.superres > 0 {
        // Same draws as the native test set when it records its generator.
        let fine = if test.pde.rank() == c.pde.rank() && test.pde != Pde::External {
            make_dataset(test.pde, test.len(), c.superres, test.seed)?
        } else {
            c.test_data(Some(c.superres))?
        };
        let fine_eval = evaluate(&archive.model, &fine, &EvalSettings { samples: 0, ..settings })?;
        report::write_errors_csv(&common.out.join("errors_superres.csv"), &fine_eval.rel_l2)?;
        summary.push(("superres_resolution".into(), c.superres.to_string()));
        summary.push(("superres_rel_l2_mean".into(), fine_eval.mean.to_string()));
        summary.push(("superres_rel_l2_std".into(), fine_eval.std.to_string()));
        println!(
            "super-resolution {}: relative L2 {:.3}% +- {:.3}%",
            c.superres,
            100.0 * fine_eval.mean,
            100.0 * fine_eval.std
        );
    }
    summary.extend(c.pairs().into_iter().map(|(k, v)| (format!("config.{k}"), v)));
    io::write_key_values(&common.out.join("report.txt"), &summary)?;
    print!("relative L2 {:.3}% +- {:.3}%", 100.0 * eval.mean, 100.0 * eval.std);
    match eval.coverage {
        Some(cov) => println!(", {:.1}% band coverage at level {}", 100.0 * cov, c.level),
        None => println!(),
    }
    Ok(())
}

fn sample_cmd(common: &Common, model: &Path, data: Option<&Path>, samples: Option<usize>) -> Result<(), CliError> {
    let archive = ModelArchive::load(model)?;
    let mut c = archived_config(&archive, common)?;
    if let Some(s) = samples {
        c.samples = s;
    }
    if c.samples == 0 {
        return Err(CliError::Validation("samples must be positive".into()));
    }
    let test = test_data(&c, data)?;
    let settings = c.eval_settings();
    let set = pathwise_sample(&archive.model, &test.inputs, c.samples, settings.seed, settings.solver)?;
    create_dir(&common.out)?;
    let mut dims = vec![set.samples.len()];
    let flat: Vec<GridFunction> = set.samples.iter().flatten().cloned().collect();
    let per = stack_fields(&flat)?;
    dims.extend_from_slice(&per.dims);
    dims[1] = test.len();
    io::write_tensor(&common.out.join("samples.gpot"), &RawTensor::new(dims, per.data)?)?;
    io::write_tensor(&common.out.join("mean.gpot"), &stack_fields(&set.mean)?)?;
    io::write_tensor(&common.out.join("std.gpot"), &stack_fields(&set.std)?)?;
    write_config(&common.out, &c)?;
    println!("{} draws at {} inputs", set.samples.len(), test.len());
    Ok(())
}

fn sweep_cmd(common: &Common) -> Result<(), CliError> {
    let mut c = load_config(common)?;
    if let Some(s) = common.seed {
        c.seed = s;
    }
    let max = *c.sweep_values.iter().max().expect("validated non-empty");
    if max > c.n_train {
        return Err(CliError::Validation(format!(
            "sweep value {max} exceeds n_train {}",
            c.n_train
        )));
    }
    let train_data = c.train_data()?;
    let test = c.test_data(None)?;
    let seeds: Vec<u64> = (0..c.sweep_seeds as u64).map(|i| c.seed + i).collect();
    let rows = sweep(
        &train_data,
        &test,
        &c.train_settings(),
        c.sweep_axis,
        &c.sweep_values,
        &seeds,
    )?;
    create_dir(&common.out)?;
    report::write_sweep_csv(&common.out.join("sweep.csv"), &rows)?;
    let summary = sweep_summary(&rows);
    report::write_text(
        &common.out.join("sweep.svg"),
        &report::sweep_svg(&summary, c.sweep_axis.name()),
    )?;
    write_config(&common.out, &c)?;
    for (v, med, lo, hi) in summary {
        println!(
            "{} = {v}: median {:.3}% (range {:.3}% to {:.3}%)",
            c.sweep_axis.name(),
            100.0 * med,
            100.0 * lo,
            100.0 * hi
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate { common } => generate(common),
        Command::Train { common, data } => train_cmd(common, data.as_deref()),
        Command::Evaluate {
            common,
            model,
            data,
            samples,
            level,
            superres,
        } => evaluate_cmd(common, model, data.as_deref(), *samples, *level, *superres),
        Command::Sample {
            common,
            model,
            data,
            samples,
        } => sample_cmd(common, model, data.as_deref(), *samples),
        Command::Sweep { common } => sweep_cmd(common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

//! The `morphatlas` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::atlas::{build_atlas, evaluate_atlas, AtlasConfig, AtlasState, Cohort};
use crate::error::{Error, Result};
use crate::flow::{deform, IntegrationConfig, Parameterization, Scheme};
use crate::grid::{warp_image, ScalarImage};
use crate::io::{self, Format, Volume};
use crate::prior::{
    validate_provider, write_velocity_dir, FileProvider, OracleProvider, PriorProvider, SubprocessProvider,
    ValidationReport,
};
use crate::registration::{Registrar, RegistrationConfig};
use crate::scalar::Real;
use crate::spectral::{MetricOperator, MetricParams, NormVariant};
use crate::synth::{synthesize, write_synthetic, SynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_PROVIDER: i32 = 2;
pub const EXIT_DIFFEO: i32 = 3;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_NO_INPUT: i32 = 66;

#[derive(Parser, Debug)]
#[command(name = "morphatlas", version, about = "Hybrid diffeomorphic atlas building")]
pub struct Cli {
    /// Worker threads (MORPHATLAS_THREADS takes precedence).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Floating-point type used for all computation.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ParamArg {
    Geodesic,
    Stationary,
}

impl From<ParamArg> for Parameterization {
    fn from(p: ParamArg) -> Self {
        match p {
            ParamArg::Geodesic => Parameterization::Geodesic,
            ParamArg::Stationary => Parameterization::Stationary,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SchemeArg {
    Euler,
    Rk4,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum NormArg {
    LvLv,
    LvV,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FormatArg {
    Rawf32,
    Nii,
}

/// Deformation model and metric.
#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "geodesic")]
    param: ParamArg,
    /// Time steps for geodesic shooting.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, value_enum, default_value = "rk4")]
    scheme: SchemeArg,
    /// Scaling-and-squaring steps for stationary fields.
    #[arg(long, default_value_t = 6)]
    squarings: u32,
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 3)]
    power: u32,
    #[arg(long, value_enum, default_value = "lv-lv")]
    norm: NormArg,
}

impl ModelArgs {
    fn integration(&self) -> IntegrationConfig {
        IntegrationConfig {
            num_steps: self.steps,
            scheme: match self.scheme {
                SchemeArg::Euler => Scheme::Euler,
                SchemeArg::Rk4 => Scheme::Rk4,
            },
            parameterization: self.param.into(),
            squarings: self.squarings,
        }
    }

    fn metric(&self) -> MetricParams {
        MetricParams {
            alpha: self.alpha,
            gamma: self.gamma,
            power: self.power,
            norm: match self.norm {
                NormArg::LvLv => NormVariant::LvLv,
                NormArg::LvV => NormVariant::LvV,
            },
        }
    }
}

/// Settings of the built-in greedy registration.
#[derive(Args, Debug, Clone)]
struct OracleArgs {
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    step_size: f64,
    #[arg(long, default_value_t = 200)]
    reg_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    reg_tol: f64,
    /// Keep the step size fixed (no backtracking on energy increases).
    #[arg(long)]
    fixed_step: bool,
}

impl OracleArgs {
    fn config(&self, model: &ModelArgs) -> RegistrationConfig {
        RegistrationConfig {
            sigma: self.sigma,
            step_size: self.step_size,
            max_iters: self.reg_iters,
            tol: self.reg_tol,
            backtracking: !self.fixed_step,
            integration: model.integration(),
            metric: model.metric(),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build an atlas from a cohort.
    Build(BuildArgs),
    /// Register a source image onto a target; writes the initial velocity.
    Register(RegisterArgs),
    /// Deform an image by a velocity field.
    Warp(WarpArgs),
    /// Per-subject NCC of an atlas registered onto each cohort image.
    Evaluate(EvaluateArgs),
    /// Generate a seeded synthetic cohort.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Directory of volumes, or a text file listing one path per line.
    #[arg(long)]
    cohort: PathBuf,
    /// `oracle`, `files:<dir>` or `cmd:<command>`.
    #[arg(long, default_value = "oracle")]
    provider: String,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 20)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Seconds before a provider subprocess is killed.
    #[arg(long, default_value_t = 300.0)]
    timeout: f64,
    /// Extra data-term gradient step on each velocity after shrinkage.
    #[arg(long)]
    research: bool,
    #[arg(long, default_value_t = 0.05)]
    research_step: f64,
    /// Atlas file format.
    #[arg(long, value_enum, default_value = "rawf32")]
    format: FormatArg,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    oracle: OracleArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    oracle: OracleArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct WarpArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    velocity: PathBuf,
    /// Pull back by the forward map (`I∘φ`) instead of pushing forward
    /// (`I∘φ⁻¹`).
    #[arg(long)]
    inverse: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    atlas: PathBuf,
    #[arg(long)]
    cohort: PathBuf,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    oracle: OracleArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON `SynthConfig`; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Provider { .. } => EXIT_PROVIDER,
        Error::DiffeomorphismViolation { .. } => EXIT_DIFFEO,
        Error::MissingFile(_) => EXIT_NO_INPUT,
        Error::InvalidConfig(_) => EXIT_USAGE,
        Error::Format { .. } | Error::Unsupported { .. } | Error::ShapeMismatch(_) => EXIT_DATA,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` and runs the command; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let result = match cli.precision {
        Precision::F32 => dispatch::<f32>(&cli),
        Precision::F64 => dispatch::<f64>(&cli),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("morphatlas: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch<T: Real>(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Build(a) => run_build::<T>(cli, a),
        Command::Register(a) => run_register::<T>(cli, a).map(|_| EXIT_OK),
        Command::Warp(a) => run_warp::<T>(cli, a).map(|_| EXIT_OK),
        Command::Evaluate(a) => run_evaluate::<T>(cli, a).map(|_| EXIT_OK),
        Command::Synth(a) => run_synth::<T>(cli, a).map(|_| EXIT_OK),
    }
}

fn is_volume(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("rawf32") | Some("nii"))
}

fn subject_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Resolves a cohort argument into volume paths: every `.rawf32`/`.nii` in
/// a directory (sorted), or the lines of a list file (relative to it).
pub fn cohort_paths(spec: &Path) -> Result<Vec<PathBuf>> {
    if spec.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(spec)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_volume(p))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::InvalidConfig(format!("no volumes in {}", spec.display())));
        }
        return Ok(paths);
    }
    if !spec.is_file() {
        return Err(Error::MissingFile(spec.to_path_buf()));
    }
    let base = spec.parent().unwrap_or_else(|| Path::new("."));
    let paths: Vec<PathBuf> = fs::read_to_string(spec)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect();
    if paths.is_empty() {
        return Err(Error::InvalidConfig(format!("{} lists no volumes", spec.display())));
    }
    Ok(paths)
}

/// Loads a cohort; subject ids are file stems.
pub fn load_cohort<T: Real>(spec: &Path) -> Result<Cohort<T>> {
    let paths = cohort_paths(spec)?;
    let images = paths
        .iter()
        .map(|p| io::read_scalar(p))
        .collect::<Result<Vec<ScalarImage<T>>>>()?;
    Cohort::new(paths.iter().map(|p| subject_id(p)).collect(), images)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run_config_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.run.json"))
}

fn workers(cli: &Cli) -> Result<usize> {
    AtlasConfig {
        worker_count: cli.threads,
        ..Default::default()
    }
    .resolved_workers()
}

fn make_provider<T: Real>(
    spec: &str,
    cohort: &Cohort<T>,
    oracle: RegistrationConfig,
    param: Parameterization,
    timeout: f64,
) -> Result<Box<dyn PriorProvider<T>>> {
    if spec == "oracle" {
        Ok(Box::new(OracleProvider::new(cohort.shape(), oracle)?))
    } else if let Some(dir) = spec.strip_prefix("files:") {
        Ok(Box::new(FileProvider::open(dir)?))
    } else if let Some(cmd) = spec.strip_prefix("cmd:") {
        if !(timeout.is_finite() && timeout > 0.0) {
            return Err(Error::InvalidConfig(format!("timeout must be > 0, got {timeout}")));
        }
        Ok(Box::new(
            SubprocessProvider::new(cmd, param)?.with_timeout(Duration::from_secs_f64(timeout)),
        ))
    } else {
        Err(Error::InvalidConfig(format!(
            "unknown provider '{spec}' (expected oracle, files:<dir> or cmd:<command>)"
        )))
    }
}

#[derive(Serialize)]
struct SubjectSummary<'a> {
    subject_id: &'a str,
    velocity_max_norm: f64,
    prior_max_norm: f64,
    min_jacobian: f64,
}

fn summarize<T: Real>(state: &AtlasState<T>, ids: &[String]) -> Vec<serde_json::Value> {
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            let jac = state.deformations[i].jac_det_forward().min_max().0;
            serde_json::to_value(SubjectSummary {
                subject_id: id,
                velocity_max_norm: state.velocities[i].max_norm().as_f64(),
                prior_max_norm: state.priors[i].max_norm().as_f64(),
                min_jacobian: jac.as_f64(),
            })
            .expect("serializable")
        })
        .collect()
}

fn run_build<T: Real>(cli: &Cli, a: &BuildArgs) -> Result<i32> {
    let started = Instant::now();
    let cfg = AtlasConfig {
        sigma: a.oracle.sigma,
        lambda: a.lambda,
        max_outer_iters: a.max_iters,
        tol: a.tol,
        integration: a.model.integration(),
        metric: a.model.metric(),
        worker_count: cli.threads,
        research_mode: a.research,
        research_step_size: a.research_step,
    };
    cfg.validate()?;
    let oracle = a.oracle.config(&a.model);
    oracle.validate()?;
    let paths = cohort_paths(&a.cohort)?;
    let cohort = load_cohort::<T>(&a.cohort)?;
    let provider = make_provider(
        &a.provider,
        &cohort,
        oracle,
        cfg.integration.parameterization,
        a.timeout,
    )?;
    fs::create_dir_all(&a.out)?;

    let mut resolved = cfg;
    resolved.worker_count = Some(cfg.resolved_workers()?);
    let mut manifest = json!({
        "tool": "morphatlas",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "build",
        "precision": cli.precision,
        "config": {
            "atlas": resolved,
            "oracle": oracle,
            "provider": a.provider,
            "provider_timeout_s": a.timeout,
            "cohort": a.cohort,
            "subjects": cohort.ids().iter().zip(&paths).map(|(id, p)| json!({"id": id, "path": p})).collect::<Vec<_>>(),
        },
        "provider": {
            "kind": provider.provenance(),
            "mode": provider.mode(),
            "description": provider.describe(),
        },
    });
    let manifest_path = a.out.join("build_manifest.json");

    let report: ValidationReport = validate_provider(provider.as_ref(), cohort.shape(), cohort.ids());
    manifest["validation"] = serde_json::to_value(&report)?;
    if !report.is_ok() {
        let mut problems = report.config_errors.clone();
        problems.extend(
            report
                .subjects
                .iter()
                .filter(|s| !s.ok)
                .map(|s| format!("{}: {}", s.subject_id, s.message.as_deref().unwrap_or("failed"))),
        );
        manifest["stop_reason"] = json!("provider_invalid");
        manifest["error"] = json!(problems.join("; "));
        write_json(&manifest_path, &manifest)?;
        eprintln!("morphatlas: provider validation failed: {}", problems.join("; "));
        return Ok(EXIT_PROVIDER);
    }

    let state = match build_atlas(&cohort, provider.as_ref(), &cfg) {
        Ok(state) => state,
        Err(e) => {
            manifest["stop_reason"] = json!("error");
            manifest["error"] = json!(e.to_string());
            if let Error::Build { iteration, .. } = &e {
                manifest["failed_iteration"] = json!(iteration);
            }
            write_json(&manifest_path, &manifest)?;
            return Err(e);
        }
    };

    let atlas_name = match a.format {
        FormatArg::Rawf32 => "atlas.rawf32",
        FormatArg::Nii => "atlas.nii",
    };
    let atlas_path = a.out.join(atlas_name);
    io::write_volume(
        &Volume::Scalar(state.atlas.clone()),
        &atlas_path,
        Format::from_path(&atlas_path),
    )?;
    let vel_dir = a.out.join("velocities");
    write_velocity_dir(&vel_dir, cohort.ids(), &state.velocities, Some(state.parameterization))?;
    state.write_energy_trace(&a.out.join("energy_trace.csv"))?;

    manifest["provider"]["parameterization"] = serde_json::to_value(state.parameterization)?;
    manifest["stop_reason"] = serde_json::to_value(state.stop)?;
    manifest["iterations"] = json!(state.iterations());
    manifest["workers"] = json!(state.workers);
    manifest["per_iteration"] = json!(state
        .trace
        .iter()
        .map(|r| json!({
            "iter": r.iter,
            "total_energy": r.total.total,
            "data_term": r.total.data,
            "wall_time_s": r.wall_time_s,
            "provider_time_s": r.provider_time_s,
        }))
        .collect::<Vec<_>>());
    manifest["subjects"] = json!(summarize(&state, cohort.ids()));
    manifest["outputs"] = json!({
        "atlas": atlas_name,
        "velocities": "velocities",
        "energy_trace": "energy_trace.csv",
    });
    manifest["wall_time_s"] = json!(started.elapsed().as_secs_f64());
    write_json(&manifest_path, &manifest)?;
    println!(
        "atlas written to {} ({:?} after {} iterations, energy {:.6e})",
        atlas_path.display(),
        state.stop,
        state.iterations(),
        state.trace.last().map_or(f64::NAN, |r| r.total.total)
    );
    Ok(EXIT_OK)
}

fn run_register<T: Real>(cli: &Cli, a: &RegisterArgs) -> Result<()> {
    let cfg = a.oracle.config(&a.model);
    let source: ScalarImage<T> = io::read_scalar(&a.source)?;
    let target: ScalarImage<T> = io::read_scalar(&a.target)?;
    source.shape().ensure_same(target.shape(), "source and target")?;
    let outcome = Registrar::new(source.shape(), cfg)?.register(&source, &target)?;
    io::write_vector(&outcome.velocity, &a.out)?;
    write_json(
        &run_config_path(&a.out),
        &json!({
            "command": "register",
            "precision": cli.precision,
            "source": a.source,
            "target": a.target,
            "config": cfg,
            "initial_energy": outcome.initial_energy,
            "energy": outcome.energy,
            "iterations": outcome.trace.len(),
            "stop": outcome.stop,
        }),
    )
}

fn run_warp<T: Real>(cli: &Cli, a: &WarpArgs) -> Result<()> {
    let integration = a.model.integration();
    let metric = a.model.metric();
    let image: ScalarImage<T> = io::read_scalar(&a.image)?;
    let v = io::read_vector::<T>(&a.velocity)?;
    image.shape().ensure_same(v.shape(), "image and velocity")?;
    let op = MetricOperator::new(image.shape(), metric)?;
    let pair = deform(&op, &v, &integration)?;
    let map = if a.inverse { pair.forward() } else { pair.inverse() };
    io::write_scalar(&warp_image(&image, map)?, &a.out)?;
    write_json(
        &run_config_path(&a.out),
        &json!({
            "command": "warp",
            "precision": cli.precision,
            "image": a.image,
            "velocity": a.velocity,
            "inverse": a.inverse,
            "integration": integration,
            "metric": metric,
        }),
    )
}

fn run_evaluate<T: Real>(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let cfg = a.oracle.config(&a.model);
    let atlas: ScalarImage<T> = io::read_scalar(&a.atlas)?;
    let cohort = load_cohort::<T>(&a.cohort)?;
    let scores = evaluate_atlas(&atlas, &cohort, &cfg, workers(cli)?)?;
    let mut csv = String::from("subject_id,ncc\n");
    for (id, s) in cohort.ids().iter().zip(&scores) {
        csv.push_str(&format!("{id},{s}\n"));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    csv.push_str(&format!("MEAN,{mean}\n"));
    fs::write(&a.out, csv)?;
    write_json(
        &run_config_path(&a.out),
        &json!({
            "command": "evaluate",
            "precision": cli.precision,
            "atlas": a.atlas,
            "cohort": a.cohort,
            "config": cfg,
            "mean_ncc": mean,
        }),
    )?;
    println!("mean NCC {mean:.6}");
    Ok(())
}

fn run_synth<T: Real>(_cli: &Cli, a: &SynthArgs) -> Result<()> {
    let cfg: SynthConfig = match &a.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::MissingFile(path.clone()));
            }
            serde_json::from_str(&fs::read_to_string(path)?)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        }
        None => SynthConfig::default(),
    };
    let synth = synthesize::<T>(&cfg)?;
    write_synthetic(&synth, &cfg, &a.out)?;
    println!("{} subjects written to {}", cfg.n_subjects, a.out.display());
    Ok(())
}

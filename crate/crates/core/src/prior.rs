//! Registration priors `g(atlas, subject)`: a velocity predicted for an
//! (atlas, subject) pair.
//!
//! Three providers share one interface:
//!
//! * [`OracleProvider`] runs the built-in greedy registration (live);
//! * [`FileProvider`] serves velocities cached on disk as
//!   `<dir>/<subject_id>.vel.rawf32` with a shared `meta.json` (frozen: the
//!   atlas argument is ignored);
//! * [`SubprocessProvider`] runs an external command through a work
//!   directory (live).
//!
//! Subprocess wire format: the work directory holds `atlas.rawf32`,
//! `subject.rawf32` and `meta.json` (`dims`, `spacing`, `subject_id`,
//! `iteration`, `parameterization`). The command is invoked with the
//! directory as its single extra argument and must leave `velocity.rawf32`
//! there (`d` components concatenated, same layout).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Parameterization;
use crate::grid::{GridShape, ScalarImage, VectorField};
use crate::io::{self, Intent, RawHeader, Volume};
use crate::registration::{Registrar, RegistrationConfig};
use crate::scalar::Real;

pub const META_FILE: &str = "meta.json";
pub const VELOCITY_SUFFIX: &str = ".vel.rawf32";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Oracle,
    File,
    Subprocess,
}

/// Whether predictions follow the evolving atlas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Re-queried every outer iteration with the current atlas.
    Live,
    /// Fixed after the first query.
    Frozen,
}

#[derive(Clone, Copy, Debug)]
pub struct PriorRequest<'a, T> {
    pub atlas: &'a ScalarImage<T>,
    pub subject: &'a ScalarImage<T>,
    pub subject_id: &'a str,
    pub iteration: usize,
}

#[derive(Clone, Debug)]
pub struct PriorResponse<T> {
    pub velocity: VectorField<T>,
    pub provenance: Provenance,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SubjectStatus {
    pub subject_id: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Dry-run result of [`validate_provider`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub config_errors: Vec<String>,
    pub subjects: Vec<SubjectStatus>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.config_errors.is_empty() && self.subjects.iter().all(|s| s.ok)
    }

    pub fn failing_subjects(&self) -> Vec<&str> {
        self.subjects
            .iter()
            .filter(|s| !s.ok)
            .map(|s| s.subject_id.as_str())
            .collect()
    }

    fn all_ok(ids: &[String]) -> Self {
        Self {
            config_errors: Vec::new(),
            subjects: ids
                .iter()
                .map(|id| SubjectStatus {
                    subject_id: id.clone(),
                    ok: true,
                    message: None,
                })
                .collect(),
        }
    }
}

pub trait PriorProvider<T: Real>: Send + Sync {
    /// Predicts a velocity; callers go through [`provide`], which adds the
    /// request/response checks.
    fn predict(&self, req: &PriorRequest<'_, T>) -> Result<VectorField<T>>;

    fn provenance(&self) -> Provenance;

    fn mode(&self) -> PriorMode;

    /// Parameterization the predictions are meant for, when the provider
    /// declares one.
    fn parameterization(&self) -> Option<Parameterization> {
        None
    }

    /// Checks that can run before any iteration.
    fn check(&self, shape: &GridShape, ids: &[String]) -> ValidationReport;

    fn describe(&self) -> String;
}

fn provider_error(req: &PriorRequest<'_, impl Real>, message: impl Into<String>) -> Error {
    Error::Provider {
        subject_id: req.subject_id.to_string(),
        iteration: req.iteration,
        message: message.into(),
    }
}

/// Queries `provider`, validating the request and the returned shape. Every
/// failure is reported as [`Error::Provider`] naming the subject and
/// iteration.
pub fn provide<T: Real>(provider: &dyn PriorProvider<T>, req: &PriorRequest<'_, T>) -> Result<PriorResponse<T>> {
    if req.subject_id.is_empty() {
        return Err(provider_error(req, "empty subject_id"));
    }
    if req.atlas.shape() != req.subject.shape() {
        return Err(provider_error(
            req,
            format!(
                "atlas {:?} and subject {:?} shapes differ",
                req.atlas.shape().dims(),
                req.subject.shape().dims()
            ),
        ));
    }
    let start = Instant::now();
    let velocity = provider.predict(req).map_err(|e| match e {
        e @ Error::Provider { .. } => e,
        other => provider_error(req, other.to_string()),
    })?;
    if velocity.shape().dims() != req.subject.shape().dims() {
        return Err(provider_error(
            req,
            format!(
                "velocity of shape {:?} for a request of shape {:?}",
                velocity.shape().dims(),
                req.subject.shape().dims()
            ),
        ));
    }
    if velocity.components().iter().flatten().any(|v| !v.is_finite()) {
        return Err(provider_error(req, "non-finite velocity"));
    }
    Ok(PriorResponse {
        velocity,
        provenance: provider.provenance(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Dry-run checks (files, executables, shapes); never consumes iterations.
pub fn validate_provider<T: Real>(
    provider: &dyn PriorProvider<T>,
    shape: &GridShape,
    ids: &[String],
) -> ValidationReport {
    provider.check(shape, ids)
}

/// Built-in greedy registration of the atlas onto the subject.
#[derive(Debug)]
pub struct OracleProvider<T: Real> {
    registrar: Registrar<T>,
}

impl<T: Real> OracleProvider<T> {
    pub fn new(shape: &GridShape, cfg: RegistrationConfig) -> Result<Self> {
        Ok(Self {
            registrar: Registrar::new(shape, cfg)?,
        })
    }

    pub fn config(&self) -> &RegistrationConfig {
        self.registrar.config()
    }
}

impl<T: Real> PriorProvider<T> for OracleProvider<T> {
    fn predict(&self, req: &PriorRequest<'_, T>) -> Result<VectorField<T>> {
        Ok(self.registrar.register(req.atlas, req.subject)?.velocity)
    }

    fn provenance(&self) -> Provenance {
        Provenance::Oracle
    }

    fn mode(&self) -> PriorMode {
        PriorMode::Live
    }

    fn parameterization(&self) -> Option<Parameterization> {
        Some(self.registrar.config().integration.parameterization)
    }

    fn check(&self, shape: &GridShape, ids: &[String]) -> ValidationReport {
        let mut report = ValidationReport::all_ok(ids);
        if shape != self.registrar.operator().shape() {
            report.config_errors.push(format!(
                "oracle configured for {:?}, cohort is {:?}",
                self.registrar.operator().shape().dims(),
                shape.dims()
            ));
        }
        report
    }

    fn describe(&self) -> String {
        "oracle".into()
    }
}

/// Shared `meta.json` of a velocity directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityDirMeta {
    pub dims: Vec<usize>,
    #[serde(default)]
    pub spacing: Option<Vec<f64>>,
    #[serde(default)]
    pub parameterization: Option<Parameterization>,
}

impl VelocityDirMeta {
    fn header(&self) -> RawHeader {
        RawHeader {
            dims: self.dims.clone(),
            spacing: self.spacing.clone(),
            intent: Some(Intent::Vector),
        }
    }
}

/// Writes `velocities` as a directory a [`FileProvider`] can serve.
pub fn write_velocity_dir<T: Real>(
    dir: &Path,
    ids: &[String],
    velocities: &[VectorField<T>],
    parameterization: Option<Parameterization>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let Some(first) = velocities.first() else {
        return Ok(());
    };
    let meta = VelocityDirMeta {
        dims: first.shape().dims().to_vec(),
        spacing: Some(first.shape().spacing().to_vec()),
        parameterization,
    };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
    for (id, v) in ids.iter().zip(velocities) {
        io::write_payload_only(&Volume::Vector(v.clone()), &dir.join(format!("{id}{VELOCITY_SUFFIX}")))?;
    }
    Ok(())
}

/// Precomputed velocities keyed by subject id.
#[derive(Debug, Clone)]
pub struct FileProvider {
    dir: PathBuf,
    meta: VelocityDirMeta,
}

impl FileProvider {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let meta_path = dir.join(META_FILE);
        if !meta_path.is_file() {
            return Err(Error::MissingFile(meta_path));
        }
        let meta = serde_json::from_str(&fs::read_to_string(&meta_path)?).map_err(|e| Error::Format {
            path: meta_path,
            message: e.to_string(),
        })?;
        Ok(Self { dir, meta })
    }

    pub fn path_for(&self, subject_id: &str) -> PathBuf {
        self.dir.join(format!("{subject_id}{VELOCITY_SUFFIX}"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl<T: Real> PriorProvider<T> for FileProvider {
    fn predict(&self, req: &PriorRequest<'_, T>) -> Result<VectorField<T>> {
        let path = self.path_for(req.subject_id);
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        io::read_rawf32_with(&path, &self.meta.header())?.into_vector(&path)
    }

    fn provenance(&self) -> Provenance {
        Provenance::File
    }

    fn mode(&self) -> PriorMode {
        PriorMode::Frozen
    }

    fn parameterization(&self) -> Option<Parameterization> {
        self.meta.parameterization
    }

    fn check(&self, shape: &GridShape, ids: &[String]) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.meta.dims != shape.dims() {
            report.config_errors.push(format!(
                "{} declares dims {:?}, cohort is {:?}",
                self.dir.join(META_FILE).display(),
                self.meta.dims,
                shape.dims()
            ));
        }
        let expected_bytes = 4 * shape.ndim() * shape.len();
        for id in ids {
            let path = self.path_for(id);
            let message = match fs::metadata(&path) {
                Err(_) => Some(format!("missing {}", path.display())),
                Ok(m) if m.len() as usize != expected_bytes => Some(format!(
                    "{} holds {} bytes, expected {expected_bytes}",
                    path.display(),
                    m.len()
                )),
                Ok(_) => None,
            };
            report.subjects.push(SubjectStatus {
                subject_id: id.clone(),
                ok: message.is_none(),
                message,
            });
        }
        report
    }

    fn describe(&self) -> String {
        format!("files:{}", self.dir.display())
    }
}

/// `meta.json` written into each subprocess work directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireMeta {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub subject_id: String,
    pub iteration: usize,
    pub parameterization: Parameterization,
}

/// External predictor driven through the work-directory protocol.
#[derive(Debug)]
pub struct SubprocessProvider {
    program: String,
    args: Vec<String>,
    work_root: tempfile::TempDir,
    timeout: Duration,
    retries: usize,
    parameterization: Parameterization,
    counter: AtomicU64,
}

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

impl SubprocessProvider {
    /// `command` is split on whitespace; the work directory is appended as
    /// the last argument.
    pub fn new(command: &str, parameterization: Parameterization) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::InvalidConfig("empty subprocess command".into()))?;
        Ok(Self {
            program,
            args: parts.collect(),
            work_root: tempfile::Builder::new().prefix("morphatlas-prior-").tempdir()?,
            timeout: DEFAULT_TIMEOUT,
            retries: 1,
            parameterization,
            counter: AtomicU64::new(0),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    fn resolve_program(&self) -> Option<PathBuf> {
        let p = Path::new(&self.program);
        if p.components().count() > 1 {
            return p.is_file().then(|| p.to_path_buf());
        }
        std::env::var_os("PATH").and_then(|paths| {
            std::env::split_paths(&paths)
                .map(|d| d.join(&self.program))
                .find(|c| c.is_file())
        })
    }

    fn run_once<T: Real>(&self, req: &PriorRequest<'_, T>, attempt: usize) -> Result<VectorField<T>> {
        let seq = self.counter.fetch_add(1, Ordering::Relaxed);
        let sanitized: String = req
            .subject_id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        let dir = self
            .work_root
            .path()
            .join(format!("it{:03}_{sanitized}_{seq}_try{attempt}", req.iteration));
        fs::create_dir_all(&dir)?;
        let shape = req.subject.shape();
        io::write_payload_only(&Volume::Scalar(req.atlas.clone()), &dir.join("atlas.rawf32"))?;
        io::write_payload_only(&Volume::Scalar(req.subject.clone()), &dir.join("subject.rawf32"))?;
        let meta = WireMeta {
            dims: shape.dims().to_vec(),
            spacing: shape.spacing().to_vec(),
            subject_id: req.subject_id.to_string(),
            iteration: req.iteration,
            parameterization: self.parameterization,
        };
        fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;

        let stdout = fs::File::create(dir.join("stdout.log"))?;
        let stderr = fs::File::create(dir.join("stderr.log"))?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(&dir)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .spawn()
            .map_err(|e| provider_error(req, format!("cannot start '{}': {e}", self.program)))?;
        let deadline = Instant::now() + self.timeout;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Err(provider_error(
                    req,
                    format!("'{}' timed out after {:?}", self.program, self.timeout),
                ));
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        if !status.success() {
            let tail = fs::read_to_string(dir.join("stderr.log")).unwrap_or_default();
            let tail: String = tail.lines().rev().take(5).collect::<Vec<_>>().join(" | ");
            return Err(provider_error(
                req,
                format!("'{}' exited with {status}: {tail}", self.program),
            ));
        }
        let out = dir.join("velocity.rawf32");
        if !out.is_file() {
            return Err(provider_error(req, "command did not write velocity.rawf32"));
        }
        let header = RawHeader {
            dims: meta.dims.clone(),
            spacing: Some(meta.spacing.clone()),
            intent: Some(Intent::Vector),
        };
        let v = io::read_rawf32_with(&out, &header)
            .and_then(|vol| vol.into_vector(&out))
            .map_err(|e| provider_error(req, format!("malformed output: {e}")))?;
        let _ = fs::remove_dir_all(&dir);
        Ok(v)
    }
}

impl<T: Real> PriorProvider<T> for SubprocessProvider {
    fn predict(&self, req: &PriorRequest<'_, T>) -> Result<VectorField<T>> {
        let mut last = None;
        for attempt in 0..=self.retries {
            match self.run_once(req, attempt) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("prior subprocess attempt {attempt} failed: {e}");
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn provenance(&self) -> Provenance {
        Provenance::Subprocess
    }

    fn mode(&self) -> PriorMode {
        PriorMode::Live
    }

    fn parameterization(&self) -> Option<Parameterization> {
        Some(self.parameterization)
    }

    fn check(&self, _shape: &GridShape, ids: &[String]) -> ValidationReport {
        let mut report = ValidationReport::all_ok(ids);
        if self.resolve_program().is_none() {
            report
                .config_errors
                .push(format!("command not found: {}", self.program));
        }
        report
    }

    fn describe(&self) -> String {
        std::iter::once(self.program.as_str())
            .chain(self.args.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> GridShape {
        GridShape::new(&[8, 8]).unwrap()
    }

    fn image(seed: f64) -> ScalarImage<f64> {
        ScalarImage::from_fn(&shape(), |c| {
            ((c[0] as f64 + seed) * 0.7).sin() + (c[1] as f64 * 0.4).cos()
        })
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn oracle_self_registration_is_zero() {
        let p = OracleProvider::<f64>::new(&shape(), RegistrationConfig::default()).unwrap();
        let img = image(0.0);
        let req = PriorRequest {
            atlas: &img,
            subject: &img,
            subject_id: "a",
            iteration: 1,
        };
        let r = provide(&p, &req).unwrap();
        assert!(r.velocity.max_abs() < 1e-6);
        assert_eq!(r.provenance, Provenance::Oracle);
    }

    #[test]
    fn file_provider_serves_stored_zero_field() {
        let dir = tempfile::tempdir().unwrap();
        let ids = ids(2);
        let zeros = vec![VectorField::<f64>::zeros(&shape()); 2];
        write_velocity_dir(dir.path(), &ids, &zeros, None).unwrap();
        let p = FileProvider::open(dir.path()).unwrap();
        assert!(validate_provider::<f64>(&p, &shape(), &ids).is_ok());
        let (a, b, s) = (image(0.0), image(3.0), image(1.0));
        for atlas in [&a, &b] {
            let req = PriorRequest {
                atlas,
                subject: &s,
                subject_id: "s1",
                iteration: 2,
            };
            let r = provide::<f64>(&p, &req).unwrap();
            assert!(r.velocity.is_zero());
            assert_eq!(r.provenance, Provenance::File);
        }
    }

    #[test]
    fn file_provider_reports_missing_and_errors_with_context() {
        let dir = tempfile::tempdir().unwrap();
        let ids = ids(3);
        let zeros = vec![VectorField::<f64>::zeros(&shape()); 3];
        write_velocity_dir(dir.path(), &ids, &zeros, None).unwrap();
        fs::remove_file(dir.path().join("s1.vel.rawf32")).unwrap();
        let p = FileProvider::open(dir.path()).unwrap();
        let report = validate_provider::<f64>(&p, &shape(), &ids);
        assert_eq!(report.failing_subjects(), vec!["s1"]);

        let img = image(0.0);
        let req = PriorRequest {
            atlas: &img,
            subject: &img,
            subject_id: "s1",
            iteration: 4,
        };
        match provide::<f64>(&p, &req).unwrap_err() {
            Error::Provider {
                subject_id, iteration, ..
            } => {
                assert_eq!(subject_id, "s1");
                assert_eq!(iteration, 4);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn file_provider_rejects_wrong_shape() {
        let dir = tempfile::tempdir().unwrap();
        let other = GridShape::new(&[8, 6]).unwrap();
        write_velocity_dir(dir.path(), &ids(1), &[VectorField::<f64>::zeros(&other)], None).unwrap();
        let p = FileProvider::open(dir.path()).unwrap();
        assert!(!validate_provider::<f64>(&p, &shape(), &ids(1)).is_ok());
        let img = image(0.0);
        let req = PriorRequest {
            atlas: &img,
            subject: &img,
            subject_id: "s0",
            iteration: 1,
        };
        assert!(matches!(provide::<f64>(&p, &req), Err(Error::Provider { .. })));
    }

    #[test]
    fn subprocess_missing_command_flagged_before_running() {
        let p = SubprocessProvider::new("/definitely/not/here --flag", Parameterization::Geodesic).unwrap();
        let report = validate_provider::<f64>(&p, &shape(), &ids(2));
        assert!(!report.is_ok());
        assert_eq!(report.config_errors.len(), 1);
    }

    #[cfg(unix)]
    #[test]
    fn subprocess_failures_carry_context() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("fail.sh");
        fs::write(&script, "#!/bin/sh\necho boom >&2\nexit 3\n").unwrap();
        make_executable(&script);
        let p = SubprocessProvider::new(script.to_str().unwrap(), Parameterization::Geodesic).unwrap();
        let img = image(0.0);
        let req = PriorRequest {
            atlas: &img,
            subject: &img,
            subject_id: "x",
            iteration: 7,
        };
        let err = provide::<f64>(&p, &req).unwrap_err();
        let text = err.to_string();
        assert!(
            text.contains("'x'") && text.contains("iteration 7") && text.contains("boom"),
            "{text}"
        );

        let slow = dir.path().join("slow.sh");
        fs::write(&slow, "#!/bin/sh\nsleep 5\n").unwrap();
        make_executable(&slow);
        let p = SubprocessProvider::new(slow.to_str().unwrap(), Parameterization::Geodesic)
            .unwrap()
            .with_timeout(Duration::from_millis(100));
        assert!(provide::<f64>(&p, &req).unwrap_err().to_string().contains("timed out"));
    }

    #[cfg(unix)]
    #[test]
    fn subprocess_roundtrip_through_wire_format() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("copy.sh");
        // velocity = (atlas, subject) as two components
        fs::write(
            &script,
            "#!/bin/sh\ncat \"$1/atlas.rawf32\" \"$1/subject.rawf32\" > \"$1/velocity.rawf32\"\n",
        )
        .unwrap();
        make_executable(&script);
        let p = SubprocessProvider::new(script.to_str().unwrap(), Parameterization::Stationary).unwrap();
        let (a, s) = (image(0.0).cast::<f32>(), image(2.0).cast::<f32>());
        let req = PriorRequest {
            atlas: &a,
            subject: &s,
            subject_id: "w",
            iteration: 1,
        };
        let r = provide::<f32>(&p, &req).unwrap();
        assert_eq!(r.velocity.component(0), a.values());
        assert_eq!(r.velocity.component(1), s.values());
        assert_eq!(r.provenance, Provenance::Subprocess);
    }

    #[cfg(unix)]
    fn make_executable(path: &Path) {
        use std::os::unix::fs::PermissionsExt;
        let mut perm = fs::metadata(path).unwrap().permissions();
        perm.set_mode(0o755);
        fs::set_permissions(path, perm).unwrap();
    }
}

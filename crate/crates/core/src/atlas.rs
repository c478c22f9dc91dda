//! Hybrid atlas building: alternate prior prediction, velocity shrinkage,
//! deformation and a closed-form atlas update.
//!
//! Joint energy, averaged over the `N` subjects:
//!
//! ```text
//! E = (1/N) Σ_i [ (1/2σ²) mean((Î∘φ_i⁻¹ − I_i)²) + ½‖v_i‖²_V + ½λ‖v_i − g_i‖²_V ]
//! ```
//!
//! For fixed predictions `g_i` the velocity minimizing the last two terms is
//! `λ/(1+λ) · g_i`; for fixed deformations the atlas minimizing the data term
//! is `Σ_i (I_i∘φ_i)|Dφ_i| / Σ_i |Dφ_i|`.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{deform, IntegrationConfig, Parameterization};
use crate::grid::{warp_image, DeformationPair, GridShape, ScalarImage, VectorField};
use crate::prior::{provide, PriorMode, PriorProvider, PriorRequest, Provenance};
use crate::registration::{data_gradient, ncc, ssd_term, Registrar, RegistrationConfig};
use crate::scalar::Real;
use crate::spectral::{MetricOperator, MetricParams};

pub const THREADS_ENV: &str = "MORPHATLAS_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtlasConfig {
    pub sigma: f64,
    pub lambda: f64,
    pub max_outer_iters: usize,
    pub tol: f64,
    pub integration: IntegrationConfig,
    pub metric: MetricParams,
    /// `None` uses all available cores; `MORPHATLAS_THREADS` overrides both.
    pub worker_count: Option<usize>,
    /// Adds one data-term gradient step on each velocity after shrinkage.
    pub research_mode: bool,
    pub research_step_size: f64,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            lambda: 1.0,
            max_outer_iters: 20,
            tol: 1e-3,
            integration: IntegrationConfig::default(),
            metric: MetricParams::default(),
            worker_count: None,
            research_mode: false,
            research_step_size: 0.05,
        }
    }
}

impl AtlasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.max_outer_iters < 1 {
            return Err(Error::InvalidConfig("max_outer_iters must be >= 1".into()));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(Error::InvalidConfig(format!("tol must be >= 0, got {}", self.tol)));
        }
        if self.worker_count == Some(0) {
            return Err(Error::InvalidConfig("worker_count must be >= 1".into()));
        }
        if !(self.research_step_size.is_finite() && self.research_step_size >= 0.0) {
            return Err(Error::InvalidConfig("research_step_size must be >= 0".into()));
        }
        self.integration.validate()?;
        self.metric.validate()
    }

    /// Worker count after applying `MORPHATLAS_THREADS`.
    pub fn resolved_workers(&self) -> Result<usize> {
        if let Ok(raw) = std::env::var(THREADS_ENV) {
            return match raw.trim().parse::<usize>() {
                Ok(n) if n >= 1 => Ok(n),
                _ => Err(Error::InvalidConfig(format!(
                    "{THREADS_ENV}={raw:?} is not a positive integer"
                ))),
            };
        }
        Ok(self
            .worker_count
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())))
    }
}

/// Subject images sharing one grid, keyed by unique ids.
#[derive(Clone, Debug)]
pub struct Cohort<T> {
    ids: Vec<String>,
    images: Vec<ScalarImage<T>>,
}

impl<T: Real> Cohort<T> {
    pub fn new(ids: Vec<String>, images: Vec<ScalarImage<T>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidConfig("cohort is empty".into()));
        }
        if ids.len() != images.len() {
            return Err(Error::InvalidConfig(format!(
                "{} ids for {} images",
                ids.len(),
                images.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &ids {
            if id.is_empty() || !seen.insert(id.as_str()) {
                return Err(Error::InvalidConfig(format!("subject id {id:?} is empty or repeated")));
            }
        }
        for img in &images[1..] {
            images[0].shape().ensure_same(img.shape(), "cohort images")?;
        }
        if images.iter().any(|img| img.values().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("cohort image"));
        }
        Ok(Self { ids, images })
    }

    /// Ids `s000`, `s001`, ...
    pub fn numbered(images: Vec<ScalarImage<T>>) -> Result<Self> {
        let ids = (0..images.len()).map(|i| format!("s{i:03}")).collect();
        Self::new(ids, images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> &GridShape {
        self.images[0].shape()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn images(&self) -> &[ScalarImage<T>] {
        &self.images
    }

    pub fn voxelwise_mean(&self) -> ScalarImage<T> {
        let n = T::lit(self.images.len() as f64);
        let len = self.shape().len();
        let mut acc = vec![T::zero(); len];
        for img in &self.images {
            for (a, &v) in acc.iter_mut().zip(img.values()) {
                *a = *a + v;
            }
        }
        ScalarImage::new(self.shape().clone(), acc.into_iter().map(|a| a / n).collect()).expect("cohort shape")
    }
}

/// `λ/(1+λ) · g`: the velocity minimizing `½‖v‖² + ½λ‖v − g‖²`.
pub fn shrink_velocity<T: Real>(g: &VectorField<T>, lambda: f64) -> VectorField<T> {
    g.scaled(T::lit(lambda / (1.0 + lambda)))
}

/// Closed-form atlas for fixed deformations:
/// `Σ_i (I_i∘φ_i)|Dφ_i| / Σ_i |Dφ_i|`, accumulated in subject order.
pub fn update_atlas<T: Real>(cohort: &Cohort<T>, deformations: &[DeformationPair<T>]) -> Result<ScalarImage<T>> {
    if deformations.len() != cohort.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} deformations for {} subjects",
            deformations.len(),
            cohort.len()
        )));
    }
    let shape = cohort.shape();
    let mut num = vec![T::zero(); shape.len()];
    let mut den = vec![T::zero(); shape.len()];
    for (img, pair) in cohort.images().iter().zip(deformations) {
        shape.ensure_same(pair.shape(), "atlas update deformation")?;
        let pulled = warp_image(img, pair.forward())?;
        let jac = pair.jac_det_forward();
        for k in 0..shape.len() {
            let w = jac.values()[k];
            num[k] = num[k] + pulled.values()[k] * w;
            den[k] = den[k] + w;
        }
    }
    if let Some(min) = den.iter().copied().reduce(T::min) {
        if !(min > T::zero()) {
            return Err(Error::DiffeomorphismViolation {
                stage: "atlas update",
                step: 0,
                min_jacobian: min.as_f64(),
            });
        }
    }
    ScalarImage::new(shape.clone(), num.into_iter().zip(den).map(|(n, d)| n / d).collect())
}

/// Energy terms of one subject, or their cohort average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Terms {
    pub data: f64,
    pub reg: f64,
    pub prior: f64,
    pub total: f64,
}

impl Terms {
    fn new(data: f64, reg: f64, prior: f64) -> Self {
        Self {
            data,
            reg,
            prior,
            total: data + reg + prior,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AtlasEnergy {
    pub subjects: Vec<Terms>,
    pub mean: Terms,
}

#[allow(clippy::too_many_arguments)]
fn subject_terms<T: Real>(
    op: &MetricOperator<T>,
    atlas: &ScalarImage<T>,
    image: &ScalarImage<T>,
    v: &VectorField<T>,
    pair: &DeformationPair<T>,
    g: &VectorField<T>,
    sigma: f64,
    lambda: f64,
) -> Result<Terms> {
    let data = ssd_term(&warp_image(atlas, pair.inverse())?, image, sigma)?;
    let reg = 0.5 * op.sobolev_norm_sq(v)?.as_f64();
    let prior = if lambda == 0.0 {
        0.0
    } else {
        0.5 * lambda * op.sobolev_norm_sq(&v.sub(g)?)?.as_f64()
    };
    Ok(Terms::new(data, reg, prior))
}

/// Joint energy of an atlas, its deformations and the predictions they
/// were shrunk from.
pub fn atlas_energy<T: Real>(
    op: &MetricOperator<T>,
    atlas: &ScalarImage<T>,
    cohort: &Cohort<T>,
    velocities: &[VectorField<T>],
    deformations: &[DeformationPair<T>],
    priors: &[VectorField<T>],
    cfg: &AtlasConfig,
) -> Result<AtlasEnergy> {
    let n = cohort.len();
    if velocities.len() != n || deformations.len() != n || priors.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} subjects, {} velocities, {} deformations, {} priors",
            velocities.len(),
            deformations.len(),
            priors.len()
        )));
    }
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        subjects.push(subject_terms(
            op,
            atlas,
            &cohort.images()[i],
            &velocities[i],
            &deformations[i],
            &priors[i],
            cfg.sigma,
            cfg.lambda,
        )?);
    }
    let avg = |f: fn(&Terms) -> f64| subjects.iter().map(f).sum::<f64>() / n as f64;
    let mean = Terms::new(avg(|t| t.data), avg(|t| t.reg), avg(|t| t.prior));
    Ok(AtlasEnergy { subjects, mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildStop {
    Converged,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    #[serde(flatten)]
    pub terms: Terms,
    pub wall_time_s: f64,
}

/// Energies after one outer iteration (iteration 0 is the initial state).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub subjects: Vec<SubjectRecord>,
    pub total: Terms,
    pub wall_time_s: f64,
    pub provider_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct AtlasState<T> {
    pub atlas: ScalarImage<T>,
    pub velocities: Vec<VectorField<T>>,
    pub priors: Vec<VectorField<T>>,
    pub deformations: Vec<DeformationPair<T>>,
    pub trace: Vec<IterationRecord>,
    pub stop: BuildStop,
    pub provenance: Provenance,
    pub mode: PriorMode,
    pub parameterization: Parameterization,
    pub workers: usize,
}

impl<T: Real> AtlasState<T> {
    /// Completed outer iterations.
    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }

    pub fn energy_totals(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.total.total).collect()
    }

    /// CSV with one row per subject and a `TOTAL` row per iteration.
    pub fn energy_trace_csv(&self) -> String {
        let mut out = String::from("iter,subject_id,data_term,reg_term,prior_term,total,wall_time_s\n");
        let mut row = |iter: usize, id: &str, t: &Terms, wall: f64| {
            let _ = writeln!(
                out,
                "{iter},{id},{},{},{},{},{wall:.6}",
                t.data, t.reg, t.prior, t.total
            );
        };
        for rec in &self.trace {
            for s in &rec.subjects {
                row(rec.iter, &s.subject_id, &s.terms, s.wall_time_s);
            }
            row(rec.iter, "TOTAL", &rec.total, rec.wall_time_s);
        }
        out
    }

    pub fn write_energy_trace(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.energy_trace_csv())?;
        Ok(())
    }
}

struct SubjectStep<T> {
    prior: VectorField<T>,
    velocity: VectorField<T>,
    pair: DeformationPair<T>,
    provider_time: f64,
    wall_time: f64,
}

/// Builds an atlas for `cohort` with predictions from `provider`.
///
/// Starts from the voxelwise mean with identity deformations and stops when
/// the relative change of the total energy drops below `cfg.tol` or after
/// `cfg.max_outer_iters` iterations. Subjects are processed in parallel;
/// every reduction runs in subject order, so results do not depend on the
/// worker count.
pub fn build_atlas<T: Real>(
    cohort: &Cohort<T>,
    provider: &dyn PriorProvider<T>,
    cfg: &AtlasConfig,
) -> Result<AtlasState<T>> {
    cfg.validate()?;
    let workers = cfg.resolved_workers()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let shape = cohort.shape().clone();
    let op = MetricOperator::<T>::new(&shape, cfg.metric)?;
    let mut integration = cfg.integration;
    if let Some(p) = provider.parameterization() {
        if p != integration.parameterization {
            log::info!("provider declares {p:?} velocities; using that parameterization");
        }
        integration.parameterization = p;
    }
    let n = cohort.len();
    let start = Instant::now();

    let mut atlas = cohort.voxelwise_mean();
    let mut velocities = vec![VectorField::zeros(&shape); n];
    let mut priors = velocities.clone();
    let mut deformations = vec![DeformationPair::identity(&shape); n];
    let energy = atlas_energy(&op, &atlas, cohort, &velocities, &deformations, &priors, cfg)?;
    let mut trace = vec![record(
        0,
        cohort,
        &energy,
        &vec![0.0; n],
        start.elapsed().as_secs_f64(),
        0.0,
    )];
    let mut frozen: Option<Vec<VectorField<T>>> = None;
    let mut stop = BuildStop::MaxIterations;

    for iter in 1..=cfg.max_outer_iters {
        let t0 = Instant::now();
        let wrap = |e: Error| Error::Build {
            iteration: iter,
            source: Box::new(e),
        };
        let atlas_ref = &atlas;
        let frozen_ref = frozen.as_ref();
        let op_ref = &op;
        let steps: Vec<SubjectStep<T>> = pool
            .install(|| {
                (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let ts = Instant::now();
                        let (prior, provider_time) = match frozen_ref {
                            Some(cached) => (cached[i].clone(), 0.0),
                            None => {
                                let req = PriorRequest {
                                    atlas: atlas_ref,
                                    subject: &cohort.images()[i],
                                    subject_id: &cohort.ids()[i],
                                    iteration: iter,
                                };
                                let r = provide(provider, &req)?;
                                (r.velocity, r.wall_time)
                            }
                        };
                        let mut velocity = shrink_velocity(&prior, cfg.lambda);
                        let mut pair = deform(op_ref, &velocity, &integration)?;
                        if cfg.research_mode {
                            let warped = warp_image(atlas_ref, pair.inverse())?;
                            let grad = data_gradient(&warped, &cohort.images()[i], cfg.sigma)?;
                            velocity = velocity.axpy(T::lit(-cfg.research_step_size), &op_ref.riesz(&grad)?)?;
                            pair = deform(op_ref, &velocity, &integration)?;
                        }
                        Ok(SubjectStep {
                            prior,
                            velocity,
                            pair,
                            provider_time,
                            wall_time: ts.elapsed().as_secs_f64(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .map_err(wrap)?;

        let provider_time: f64 = steps.iter().map(|s| s.provider_time).sum();
        let walls: Vec<f64> = steps.iter().map(|s| s.wall_time).collect();
        priors.clear();
        velocities.clear();
        deformations.clear();
        for s in steps {
            priors.push(s.prior);
            velocities.push(s.velocity);
            deformations.push(s.pair);
        }
        if provider.mode() == PriorMode::Frozen && frozen.is_none() {
            frozen = Some(priors.clone());
        }
        atlas = update_atlas(cohort, &deformations).map_err(wrap)?;
        let energy = atlas_energy(&op, &atlas, cohort, &velocities, &deformations, &priors, cfg).map_err(wrap)?;
        let prev = trace.last().expect("initial record").total.total;
        let current = energy.mean.total;
        trace.push(record(
            iter,
            cohort,
            &energy,
            &walls,
            t0.elapsed().as_secs_f64(),
            provider_time,
        ));
        log::info!(
            "iteration {iter}: energy {current:.6e} ({:.3}s)",
            t0.elapsed().as_secs_f64()
        );
        if !current.is_finite() {
            return Err(wrap(Error::NonFinite("atlas energy")));
        }
        if (prev - current).abs() <= cfg.tol * prev.abs() {
            stop = BuildStop::Converged;
            break;
        }
    }

    Ok(AtlasState {
        atlas,
        velocities,
        priors,
        deformations,
        trace,
        stop,
        provenance: provider.provenance(),
        mode: provider.mode(),
        parameterization: integration.parameterization,
        workers,
    })
}

/// Registers `atlas` onto each subject with the oracle and returns
/// `ncc(Î∘φ_i⁻¹, I_i)` per subject, in cohort order.
pub fn evaluate_atlas<T: Real>(
    atlas: &ScalarImage<T>,
    cohort: &Cohort<T>,
    cfg: &RegistrationConfig,
    workers: usize,
) -> Result<Vec<f64>> {
    cohort.shape().ensure_same(atlas.shape(), "atlas")?;
    let registrar = Registrar::<T>::new(cohort.shape(), *cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| {
        cohort
            .images()
            .par_iter()
            .map(|img| {
                let v = registrar.register(atlas, img)?.velocity;
                let pair = deform(registrar.operator(), &v, &cfg.integration)?;
                ncc(&warp_image(atlas, pair.inverse())?, img)
            })
            .collect()
    })
}

fn record<T: Real>(
    iter: usize,
    cohort: &Cohort<T>,
    energy: &AtlasEnergy,
    walls: &[f64],
    wall_time_s: f64,
    provider_time_s: f64,
) -> IterationRecord {
    IterationRecord {
        iter,
        subjects: cohort
            .ids()
            .iter()
            .zip(&energy.subjects)
            .zip(walls)
            .map(|((id, t), &w)| SubjectRecord {
                subject_id: id.clone(),
                terms: *t,
                wall_time_s: w,
            })
            .collect(),
        total: energy.mean,
        wall_time_s,
        provider_time_s,
    }
}

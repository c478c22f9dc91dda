//! Pairwise registration: the SSD energy, global NCC, and a greedy gradient
//! descent registration used as the built-in prior and as a baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{deform, IntegrationConfig};
use crate::grid::{warp_image, DeformationPair, GridShape, ScalarImage, VectorField};
use crate::scalar::Real;
use crate::spectral::{MetricOperator, MetricParams};

/// Consecutive energy increases tolerated before declaring divergence.
const DIVERGENCE_RUN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub sigma: f64,
    pub step_size: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Undo a step that raises the energy and halve the step size, instead
    /// of keeping a fixed step.
    pub backtracking: bool,
    pub integration: IntegrationConfig,
    pub metric: MetricParams,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            step_size: 0.05,
            max_iters: 200,
            tol: 1e-4,
            backtracking: true,
            integration: IntegrationConfig::default(),
            metric: MetricParams::default(),
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "step_size must be >= 0, got {}",
                self.step_size
            )));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(Error::InvalidConfig(format!("tol must be >= 0, got {}", self.tol)));
        }
        self.integration.validate()?;
        self.metric.validate()
    }
}

/// Registration energy split into its two terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub data: f64,
    pub reg: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    fn new(data: f64, reg: f64) -> Self {
        Self {
            data,
            reg,
            total: data + reg,
        }
    }
}

/// `(1 / 2σ²) · mean((a - b)²)`.
pub fn ssd_term<T: Real>(a: &ScalarImage<T>, b: &ScalarImage<T>, sigma: f64) -> Result<f64> {
    a.shape().ensure_same(b.shape(), "ssd")?;
    let sum: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| {
            let r = (x - y).as_f64();
            r * r
        })
        .sum();
    Ok(sum / a.values().len() as f64 / (2.0 * sigma * sigma))
}

/// Global Pearson correlation of two images.
pub fn ncc<T: Real>(a: &ScalarImage<T>, b: &ScalarImage<T>) -> Result<f64> {
    a.shape().ensure_same(b.shape(), "ncc")?;
    let n = a.values().len() as f64;
    let mean = |img: &ScalarImage<T>| img.values().iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (dx, dy) = (x.as_f64() - ma, y.as_f64() - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 {
        return Err(Error::UndefinedCorrelation("first image"));
    }
    if sbb <= 0.0 {
        return Err(Error::UndefinedCorrelation("second image"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// L² gradient of the data term with the current map frozen:
/// `-(1/σ²) (J - T) ∇J` where `J = S ∘ φ⁻¹`.
pub fn data_gradient<T: Real>(warped: &ScalarImage<T>, target: &ScalarImage<T>, sigma: f64) -> Result<VectorField<T>> {
    warped.shape().ensure_same(target.shape(), "data_gradient")?;
    let k = T::lit(-1.0 / (sigma * sigma));
    let residual: Vec<T> = warped
        .values()
        .iter()
        .zip(target.values())
        .map(|(&j, &t)| (j - t) * k)
        .collect();
    let grad = warped.gradient();
    Ok(grad.map_components(|_, c| c.iter().zip(&residual).map(|(&g, &r)| g * r).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIters,
    ZeroStep,
    /// Ten consecutive backtracked steps failed to lower the energy.
    Stalled,
}

#[derive(Clone, Debug)]
pub struct RegistrationOutcome<T> {
    /// Best velocity seen.
    pub velocity: VectorField<T>,
    pub energy: EnergyBreakdown,
    pub initial_energy: EnergyBreakdown,
    /// Total energy at every evaluated iterate.
    pub trace: Vec<f64>,
    pub stop: StopReason,
}

/// A registration problem bound to one grid: metric operator plus config.
#[derive(Debug)]
pub struct Registrar<T: Real> {
    cfg: RegistrationConfig,
    op: MetricOperator<T>,
}

impl<T: Real> Registrar<T> {
    pub fn new(shape: &GridShape, cfg: RegistrationConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            op: MetricOperator::new(shape, cfg.metric)?,
            cfg,
        })
    }

    pub fn config(&self) -> &RegistrationConfig {
        &self.cfg
    }

    pub fn operator(&self) -> &MetricOperator<T> {
        &self.op
    }

    /// Energy of `v0` for warping `source` onto `target`.
    pub fn energy(
        &self,
        source: &ScalarImage<T>,
        target: &ScalarImage<T>,
        v0: &VectorField<T>,
    ) -> Result<EnergyBreakdown> {
        Ok(self.evaluate(source, target, v0)?.0)
    }

    fn evaluate(
        &self,
        source: &ScalarImage<T>,
        target: &ScalarImage<T>,
        v0: &VectorField<T>,
    ) -> Result<(EnergyBreakdown, ScalarImage<T>, DeformationPair<T>)> {
        source.shape().ensure_same(target.shape(), "registration images")?;
        source.shape().ensure_same(v0.shape(), "registration velocity")?;
        let pair = deform(&self.op, v0, &self.cfg.integration)?;
        let warped = warp_image(source, pair.inverse())?;
        let data = ssd_term(&warped, target, self.cfg.sigma)?;
        let reg = 0.5 * self.op.sobolev_norm_sq(v0)?.as_f64();
        Ok((EnergyBreakdown::new(data, reg), warped, pair))
    }

    /// Greedy gradient descent from `v = 0`:
    /// `v ← v - step · (R[-(1/σ²)(J - T)∇J] + v)`, where `R` is the Riesz map
    /// of the metric. Returns the best iterate seen.
    ///
    /// With a fixed step, ten consecutive energy increases are reported as
    /// [`Error::NonConvergence`]. With backtracking, a rise is undone and
    /// the step halved; ten consecutive rises end the run as
    /// [`StopReason::Stalled`].
    pub fn register(&self, source: &ScalarImage<T>, target: &ScalarImage<T>) -> Result<RegistrationOutcome<T>> {
        let shape = source.shape();
        let mut step = self.cfg.step_size;
        let (energy, warped, _) = self.evaluate(source, target, &VectorField::zeros(shape))?;
        let initial = energy;
        let mut current = (VectorField::zeros(shape), energy, warped);
        let mut best = (current.0.clone(), current.1);
        let mut trace = vec![energy.total];
        let mut rising = 0usize;
        let mut stop = StopReason::MaxIters;

        if step == 0.0 {
            stop = StopReason::ZeroStep;
        } else {
            for _ in 0..self.cfg.max_iters {
                let grad = data_gradient(&current.2, target, self.cfg.sigma)?;
                let direction = self.op.riesz(&grad)?.add(&current.0)?;
                let v = current.0.axpy(T::lit(-step), &direction)?;
                let attempt = match self.evaluate(source, target, &v) {
                    Ok((energy, warped, _)) => Some((v, energy, warped)),
                    Err(Error::DiffeomorphismViolation { .. }) if self.cfg.backtracking => None,
                    Err(e) => return Err(e),
                };
                let prev = current.1.total;
                let total = attempt.as_ref().map_or(f64::INFINITY, |a| a.1.total);
                trace.push(total);
                if total <= prev {
                    rising = 0;
                    current = attempt.expect("finite energy");
                    if current.1.total < best.1.total {
                        best = (current.0.clone(), current.1);
                    }
                    if (prev - total) / prev.abs().max(f64::MIN_POSITIVE) < self.cfg.tol {
                        stop = StopReason::Converged;
                        break;
                    }
                    continue;
                }
                rising += 1;
                if self.cfg.backtracking {
                    if rising >= DIVERGENCE_RUN {
                        stop = StopReason::Stalled;
                        break;
                    }
                    step *= 0.5;
                } else {
                    if rising >= DIVERGENCE_RUN {
                        return Err(Error::NonConvergence {
                            consecutive: rising,
                            trace,
                        });
                    }
                    current = attempt.expect("fixed-step evaluation");
                }
            }
        }

        let (velocity, energy) = best;
        Ok(RegistrationOutcome {
            velocity,
            energy,
            initial_energy: initial,
            trace,
            stop,
        })
    }
}

/// One-shot [`Registrar::energy`].
pub fn registration_energy<T: Real>(
    source: &ScalarImage<T>,
    target: &ScalarImage<T>,
    v0: &VectorField<T>,
    cfg: &RegistrationConfig,
) -> Result<EnergyBreakdown> {
    Registrar::new(source.shape(), *cfg)?.energy(source, target, v0)
}

/// One-shot [`Registrar::register`], returning only the velocity.
pub fn oracle_register<T: Real>(
    source: &ScalarImage<T>,
    target: &ScalarImage<T>,
    cfg: &RegistrationConfig,
) -> Result<VectorField<T>> {
    Ok(Registrar::new(source.shape(), *cfg)?.register(source, target)?.velocity)
}

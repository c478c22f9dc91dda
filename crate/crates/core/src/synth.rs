//! Seeded synthetic cohorts: a base pattern warped by random smooth
//! stationary fields, plus Gaussian noise.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::atlas::Cohort;
use crate::error::{Error, Result};
use crate::flow::{svf_exponential, IntegrationConfig, Parameterization};
use crate::grid::{warp_image, DeformationPair, GridShape, ScalarImage, VectorField};
use crate::io;
use crate::prior::write_velocity_dir;
use crate::scalar::Real;
use crate::spectral::{MetricOperator, MetricParams};

pub const MAX_DEFORMATION_SCALE: f64 = 2.0;

/// Applications of `K` to the white noise behind each generating field.
const SMOOTHING_PASSES: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    /// Concentric rings inside a disc.
    #[default]
    Bullseye,
    /// A Gaussian blob modulated by a soft checkerboard.
    CheckerBlob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub dims: Vec<usize>,
    /// Largest displacement of the generating field, in voxels.
    pub deformation_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub pattern: Pattern,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 20,
            dims: vec![64, 64],
            deformation_scale: 2.0,
            noise_sigma: 0.02,
            seed: 0,
            pattern: Pattern::Bullseye,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<GridShape> {
        if self.n_subjects < 1 {
            return Err(Error::InvalidConfig("n_subjects must be >= 1".into()));
        }
        if !(0.0..=MAX_DEFORMATION_SCALE).contains(&self.deformation_scale) {
            return Err(Error::InvalidConfig(format!(
                "deformation_scale must lie in [0, {MAX_DEFORMATION_SCALE}], got {}",
                self.deformation_scale
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        GridShape::new(&self.dims)
    }
}

/// A generated cohort together with the ground truth that produced it.
#[derive(Clone, Debug)]
pub struct SyntheticCohort<T> {
    pub cohort: Cohort<T>,
    pub base: ScalarImage<T>,
    /// Stationary fields `w_i`; subject `i` is `base ∘ exp(w_i)⁻¹ + noise`.
    pub velocities: Vec<VectorField<T>>,
    pub deformations: Vec<DeformationPair<T>>,
}

pub fn base_image(shape: &GridShape, pattern: Pattern) -> ScalarImage<f64> {
    let dims = shape.dims().to_vec();
    let radius = 0.35 * *dims.iter().min().expect("ndim >= 2") as f64;
    let center: Vec<f64> = dims.iter().map(|&n| n as f64 / 2.0).collect();
    ScalarImage::from_fn(shape, |c| {
        let r = c
            .iter()
            .zip(&center)
            .map(|(&x, &m)| (x as f64 - m).powi(2))
            .sum::<f64>()
            .sqrt();
        match pattern {
            Pattern::Bullseye => {
                let edge = 0.5 - 0.5 * ((r - radius) / 1.5).tanh();
                edge * (0.5 + 0.5 * (TAU * 3.0 * r / radius).cos())
            }
            Pattern::CheckerBlob => {
                let period = radius / 2.0;
                let checker: f64 = c.iter().map(|&x| (TAU * x as f64 / period).sin()).product();
                let blob = (-(r * r) / (2.0 * (0.6 * radius).powi(2))).exp();
                blob * (0.5 + 0.5 * (3.0 * checker).tanh())
            }
        }
    })
}

fn gaussian_field(shape: &GridShape, rng: &mut ChaCha8Rng) -> VectorField<f64> {
    VectorField::from_fn(shape, |_, _| StandardNormal.sample(rng))
}

/// Deterministic in `cfg`: identical configs give bit-identical cohorts.
pub fn synthesize<T: Real>(cfg: &SynthConfig) -> Result<SyntheticCohort<T>> {
    let shape = cfg.validate()?;
    let base = base_image(&shape, cfg.pattern);
    let op = MetricOperator::<f64>::new(&shape, MetricParams::default())?;
    let integration = IntegrationConfig {
        parameterization: Parameterization::Stationary,
        ..Default::default()
    };
    let mut images = Vec::with_capacity(cfg.n_subjects);
    let mut velocities = Vec::with_capacity(cfg.n_subjects);
    let mut deformations = Vec::with_capacity(cfg.n_subjects);
    for i in 0..cfg.n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let mut smooth = gaussian_field(&shape, &mut rng);
        for _ in 0..SMOOTHING_PASSES {
            smooth = op.smooth(&smooth)?;
        }
        let peak = smooth.max_norm();
        let w = if peak > 0.0 {
            smooth.scaled(cfg.deformation_scale / peak)
        } else {
            smooth
        };
        let pair = svf_exponential(&w, &integration)?;
        let warped = warp_image(&base, pair.inverse())?;
        let noise: Vec<f64> = (0..shape.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let noisy = ScalarImage::new(
            shape.clone(),
            warped
                .values()
                .iter()
                .zip(&noise)
                .map(|(&x, &e)| x + cfg.noise_sigma * e)
                .collect(),
        )?;
        images.push(noisy.cast());
        velocities.push(w.cast());
        deformations.push(DeformationPair::new(pair.forward().cast(), pair.inverse().cast())?);
    }
    Ok(SyntheticCohort {
        cohort: Cohort::numbered(images)?,
        base: base.cast(),
        velocities,
        deformations,
    })
}

/// Writes `<out>/<id>.rawf32` per subject, the base image and the
/// generating velocities under `<out>/truth/` (a velocity directory), and
/// the resolved config.
pub fn write_synthetic<T: Real>(synth: &SyntheticCohort<T>, cfg: &SynthConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    for (id, img) in synth.cohort.ids().iter().zip(synth.cohort.images()) {
        io::write_scalar(img, &out.join(format!("{id}.rawf32")))?;
    }
    let truth = out.join("truth");
    write_velocity_dir(
        &truth,
        synth.cohort.ids(),
        &synth.velocities,
        Some(Parameterization::Stationary),
    )?;
    io::write_scalar(&synth.base, &truth.join("base.rawf32"))?;
    fs::write(out.join("synth_config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_subjects: 3,
            dims: vec![32, 32],
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = synthesize::<f64>(&small()).unwrap();
        let b = synthesize::<f64>(&small()).unwrap();
        for (x, y) in a.cohort.images().iter().zip(b.cohort.images()) {
            assert_eq!(x, y);
        }
        let c = synthesize::<f64>(&SynthConfig { seed: 9, ..small() }).unwrap();
        assert_ne!(a.cohort.images()[0], c.cohort.images()[0]);
        assert_ne!(a.cohort.images()[0], a.cohort.images()[1]);
    }

    #[test]
    fn velocities_hit_requested_scale() {
        let s = synthesize::<f64>(&SynthConfig {
            deformation_scale: 1.5,
            ..small()
        })
        .unwrap();
        for w in &s.velocities {
            assert!((w.max_norm() - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_scale_zero_noise_reproduces_base() {
        let s = synthesize::<f64>(&SynthConfig {
            deformation_scale: 0.0,
            noise_sigma: 0.0,
            ..small()
        })
        .unwrap();
        for img in s.cohort.images() {
            assert_eq!(img, &s.base);
        }
    }

    #[test]
    fn unit_scale_subjects_resemble_but_differ_from_base() {
        let s = synthesize::<f64>(&SynthConfig {
            n_subjects: 5,
            deformation_scale: 1.0,
            noise_sigma: 0.0,
            ..small()
        })
        .unwrap();
        for (img, pair) in s.cohort.images().iter().zip(&s.deformations) {
            let r = crate::registration::ncc(img, &s.base).unwrap();
            assert!(r > 0.5 && r < 1.0, "{r}");
            assert!(pair.jac_det_forward().min_max().0 > 0.0);
        }
    }

    #[test]
    fn rejects_large_scale() {
        assert!(synthesize::<f64>(&SynthConfig {
            deformation_scale: 2.5,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn patterns_have_texture() {
        let shape = GridShape::new(&[32, 32]).unwrap();
        for p in [Pattern::Bullseye, Pattern::CheckerBlob] {
            let (lo, hi) = base_image(&shape, p).min_max();
            assert!(hi - lo > 0.5, "{p:?}");
        }
    }
}

//! Sobolev metric `L = (-alpha Δ + gamma I)^c`, its inverse `K`, and the
//! stencil operators used by EPDiff.
//!
//! The Laplacian is the second-order periodic stencil, diagonalized exactly
//! by the DFT with multiplier `2 Σ_j (1 - cos(2π k_j / n_j)) / h_j²`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{central_diff, for_each_point, GridShape, ScalarImage, VectorField};
use crate::scalar::Real;

/// Which quadratic form `‖v‖²_V` denotes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormVariant {
    /// `<Lv, Lv>`: `L` applied once, then the squared L² norm.
    #[default]
    LvLv,
    /// `<Lv, v>`: the dual pairing of momentum and velocity.
    LvV,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricParams {
    pub alpha: f64,
    pub gamma: f64,
    pub power: u32,
    pub norm: NormVariant,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            gamma: 1.0,
            power: 3,
            norm: NormVariant::LvLv,
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.power < 1 {
            return Err(Error::InvalidConfig("power must be >= 1".into()));
        }
        Ok(())
    }

    /// Discrete Laplacian symbol `gamma + alpha * 2 Σ (1 - cos θ_j) / h_j²`
    /// at integer frequency `freq`.
    pub fn symbol(&self, shape: &GridShape, freq: &[usize]) -> f64 {
        let lap: f64 = freq
            .iter()
            .zip(shape.dims())
            .zip(shape.spacing())
            .map(|((&k, &n), &h)| 2.0 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()) / (h * h))
            .sum();
        self.gamma + self.alpha * lap
    }
}

/// Multi-dimensional complex DFT built from per-axis 1D plans.
struct FftNd<T: Real> {
    dims: Vec<usize>,
    forward: Vec<Arc<dyn Fft<T>>>,
    inverse: Vec<Arc<dyn Fft<T>>>,
}

impl<T: Real> FftNd<T> {
    fn new(shape: &GridShape) -> Self {
        let mut planner = FftPlanner::new();
        let dims = shape.dims().to_vec();
        let forward = dims.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inverse = dims.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Self { dims, forward, inverse }
    }

    /// Unnormalized transform in place.
    fn process(&self, buf: &mut [Complex<T>], direction: FftDirection) {
        let plans = match direction {
            FftDirection::Forward => &self.forward,
            FftDirection::Inverse => &self.inverse,
        };
        let total = buf.len();
        let max_scratch = plans.iter().map(|p| p.get_inplace_scratch_len()).max().unwrap_or(0);
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); max_scratch];
        let mut block = Vec::new();
        for (axis, plan) in plans.iter().enumerate() {
            let n = self.dims[axis];
            let stride: usize = self.dims[axis + 1..].iter().product();
            if stride == 1 {
                plan.process_with_scratch(buf, &mut scratch);
                continue;
            }
            // Each block of n * stride values holds `stride` interleaved lines;
            // transpose to contiguous lines, transform, transpose back.
            block.resize(n * stride, Complex::new(T::zero(), T::zero()));
            for chunk in buf.chunks_exact_mut(n * stride) {
                for c in 0..n {
                    for k in 0..stride {
                        block[k * n + c] = chunk[c * stride + k];
                    }
                }
                plan.process_with_scratch(&mut block, &mut scratch);
                for c in 0..n {
                    for k in 0..stride {
                        chunk[c * stride + k] = block[k * n + c];
                    }
                }
            }
            debug_assert_eq!(total % (n * stride), 0);
        }
    }
}

/// Precomputed spectral multipliers for `L` and `K = L⁻¹` on one grid.
///
/// Immutable after construction; shareable across threads.
pub struct MetricOperator<T: Real> {
    shape: GridShape,
    params: MetricParams,
    multipliers: Vec<T>,
    // Both tables below carry the 1/len normalization of the inverse DFT.
    l_scaled: Vec<T>,
    k_scaled: Vec<T>,
    k2_scaled: Vec<T>,
    fft: FftNd<T>,
}

impl<T: Real> std::fmt::Debug for MetricOperator<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricOperator")
            .field("dims", &self.shape.dims())
            .field("params", &self.params)
            .finish()
    }
}

/// Element of the dual space `V*`, produced by [`MetricOperator::apply_l`].
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumField<T>(VectorField<T>);

impl<T: Real> MomentumField<T> {
    pub fn from_field(field: VectorField<T>) -> Self {
        Self(field)
    }

    pub fn as_field(&self) -> &VectorField<T> {
        &self.0
    }

    pub fn into_field(self) -> VectorField<T> {
        self.0
    }
}

impl<T: Real> MetricOperator<T> {
    pub fn new(shape: &GridShape, params: MetricParams) -> Result<Self> {
        params.validate()?;
        let len = shape.len() as f64;
        let mut multipliers = Vec::with_capacity(shape.len());
        let mut l_scaled = Vec::with_capacity(shape.len());
        let mut k_scaled = Vec::with_capacity(shape.len());
        let mut k2_scaled = Vec::with_capacity(shape.len());
        for_each_point(shape, |_, freq| {
            let ell = params.symbol(shape, freq).powi(params.power as i32);
            multipliers.push(T::lit(ell));
            l_scaled.push(T::lit(ell / len));
            k_scaled.push(T::lit(1.0 / (ell * len)));
            k2_scaled.push(T::lit(1.0 / (ell * ell * len)));
        });
        Ok(Self {
            shape: shape.clone(),
            params,
            multipliers,
            l_scaled,
            k_scaled,
            k2_scaled,
            fft: FftNd::new(shape),
        })
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn params(&self) -> &MetricParams {
        &self.params
    }

    /// `ℓ(k)^c` for every frequency, in grid linearization order.
    pub fn multipliers(&self) -> &[T] {
        &self.multipliers
    }

    pub fn apply_l(&self, v: &VectorField<T>) -> Result<MomentumField<T>> {
        self.shape.ensure_same(v.shape(), "apply_L")?;
        Ok(MomentumField(self.filter(v, &self.l_scaled)))
    }

    pub fn apply_k(&self, m: &MomentumField<T>) -> Result<VectorField<T>> {
        self.shape.ensure_same(m.0.shape(), "apply_K")?;
        Ok(self.filter(&m.0, &self.k_scaled))
    }

    /// Smooths a plain vector field by `K`.
    pub fn smooth(&self, v: &VectorField<T>) -> Result<VectorField<T>> {
        self.shape.ensure_same(v.shape(), "smooth")?;
        Ok(self.filter(v, &self.k_scaled))
    }

    /// Representative in `V` of an L² gradient, for the configured norm:
    /// `K² g` for `<Lv, Lv>` and `K g` for `<Lv, v>`. In both cases the
    /// gradient of `½‖v‖²_V` maps to `v` itself.
    pub fn riesz(&self, l2_gradient: &VectorField<T>) -> Result<VectorField<T>> {
        self.shape.ensure_same(l2_gradient.shape(), "riesz")?;
        let table = match self.params.norm {
            NormVariant::LvLv => &self.k2_scaled,
            NormVariant::LvV => &self.k_scaled,
        };
        Ok(self.filter(l2_gradient, table))
    }

    /// Voxel-normalized `‖v‖²_V` per the configured [`NormVariant`].
    pub fn sobolev_norm_sq(&self, v: &VectorField<T>) -> Result<T> {
        let lv = self.apply_l(v)?;
        match self.params.norm {
            NormVariant::LvLv => lv.0.mean_dot(&lv.0),
            NormVariant::LvV => lv.0.mean_dot(v),
        }
    }

    /// Real-to-real filtering by a real even multiplier table. Two real
    /// components ride in one complex transform as real and imaginary parts.
    fn filter(&self, v: &VectorField<T>, table: &[T]) -> VectorField<T> {
        let comps = v.components();
        let len = self.shape.len();
        let mut out: Vec<Vec<T>> = Vec::with_capacity(comps.len());
        let mut buf = vec![Complex::new(T::zero(), T::zero()); len];
        for pair in comps.chunks(2) {
            let (re, im) = (&pair[0], pair.get(1));
            for (k, z) in buf.iter_mut().enumerate() {
                *z = Complex::new(re[k], im.map_or(T::zero(), |c| c[k]));
            }
            self.fft.process(&mut buf, FftDirection::Forward);
            for (z, &w) in buf.iter_mut().zip(table) {
                *z = *z * w;
            }
            self.fft.process(&mut buf, FftDirection::Inverse);
            out.push(buf.iter().map(|z| z.re).collect());
            if im.is_some() {
                out.push(buf.iter().map(|z| z.im).collect());
            } else {
                debug_assert!(imag_residue_ok(&buf), "imaginary residue after real filtering");
            }
        }
        VectorField::from_raw(self.shape.clone(), out)
    }
}

fn imag_residue_ok<T: Real>(buf: &[Complex<T>]) -> bool {
    let scale = buf.iter().fold(T::zero(), |m, z| m.max(z.re.abs()));
    let residue = buf.iter().fold(T::zero(), |m, z| m.max(z.im.abs()));
    let tol = T::lit(1e-10).max(T::epsilon() * T::lit(1e4));
    residue <= tol * scale.max(T::one())
}

/// Per-voxel Jacobian matrices of a vector field.
#[derive(Clone, Debug)]
pub struct JacobianField<T> {
    shape: GridShape,
    // entries[i * d + j] = ∂v_i / ∂x_j
    entries: Vec<Vec<T>>,
}

impl<T: Real> JacobianField<T> {
    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    /// All voxel values of `∂v_i / ∂x_j`.
    pub fn entry(&self, i: usize, j: usize) -> &[T] {
        &self.entries[i * self.shape.ndim() + j]
    }

    /// The `d × d` matrix at one voxel, row-major.
    pub fn matrix_at(&self, index: usize) -> Vec<T> {
        self.entries.iter().map(|e| e[index]).collect()
    }
}

/// `∂v_i/∂x_j` by periodic central differences, in voxel units.
pub fn jacobian_matrix<T: Real>(v: &VectorField<T>) -> JacobianField<T> {
    let shape = v.shape();
    let d = shape.ndim();
    let entries = (0..d * d)
        .map(|e| central_diff(v.component(e / d), shape, e % d))
        .collect();
    JacobianField {
        shape: shape.clone(),
        entries,
    }
}

/// Trace of [`jacobian_matrix`].
pub fn divergence<T: Real>(v: &VectorField<T>) -> ScalarImage<T> {
    let shape = v.shape();
    let mut acc = vec![T::zero(); shape.len()];
    for a in 0..shape.ndim() {
        for (s, d) in acc.iter_mut().zip(central_diff(v.component(a), shape, a)) {
            *s = *s + d;
        }
    }
    ScalarImage::from_raw(shape.clone(), acc)
}

//! Dense containers on a periodic grid.
//!
//! Every container is linearized with the last axis fastest, i.e. for a 3D
//! grid with dims `[n0, n1, n2]` the point `(i0, i1, i2)` lives at
//! `(i0 * n1 + i1) * n2 + i2`. Vector fields store their `d` components one
//! after another, each in that order.
//!
//! Coordinates, displacements and finite differences are all expressed in
//! voxel units. The physical `spacing` of a [`GridShape`] only enters the
//! metric operator.
//!
//! Maps are stored as displacements: `phi(x) = x + u(x)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lerp, Real};

const MIN_POINTS_PER_AXIS: usize = 4;

/// Per-axis point counts and spacings of a 2D or 3D torus grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridShape {
    dims: Vec<usize>,
    spacing: Vec<f64>,
}

impl GridShape {
    /// Unit-spacing grid.
    pub fn new(dims: &[usize]) -> Result<Self> {
        Self::with_spacing(dims, &vec![1.0; dims.len()])
    }

    pub fn with_spacing(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::InvalidGrid(format!("expected 2 or 3 axes, got {}", dims.len())));
        }
        if spacing.len() != dims.len() {
            return Err(Error::InvalidGrid(format!(
                "{} spacings for {} axes",
                spacing.len(),
                dims.len()
            )));
        }
        if let Some(n) = dims.iter().find(|&&n| n < MIN_POINTS_PER_AXIS) {
            return Err(Error::InvalidGrid(format!(
                "axis with {n} points, need at least {MIN_POINTS_PER_AXIS}"
            )));
        }
        if spacing.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            spacing: spacing.to_vec(),
        })
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Linear-index stride of each axis.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.ndim()];
        for a in (0..self.ndim() - 1).rev() {
            strides[a] = strides[a + 1] * self.dims[a + 1];
        }
        strides
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.dims).fold(0, |acc, (&c, &n)| acc * n + c)
    }

    pub fn coords(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.ndim()];
        for a in (0..self.ndim()).rev() {
            out[a] = index % self.dims[a];
            index /= self.dims[a];
        }
        out
    }

    /// Shapes agree on dims; spacing is compared too.
    pub(crate) fn ensure_same(&self, other: &GridShape, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Visits every grid point in linear order with its integer coordinates.
pub(crate) fn for_each_point(shape: &GridShape, mut f: impl FnMut(usize, &[usize])) {
    let dims = shape.dims();
    let mut c = vec![0usize; dims.len()];
    for idx in 0..shape.len() {
        f(idx, &c);
        for a in (0..dims.len()).rev() {
            c[a] += 1;
            if c[a] < dims[a] {
                break;
            }
            c[a] = 0;
        }
    }
}

/// One real value per grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarImage<T> {
    shape: GridShape,
    values: Vec<T>,
}

impl<T: Real> ScalarImage<T> {
    pub fn new(shape: GridShape, values: Vec<T>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a grid of {} points",
                values.len(),
                shape.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scalar image"));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &GridShape) -> Self {
        Self::constant(shape, T::zero())
    }

    pub fn constant(shape: &GridShape, value: T) -> Self {
        Self {
            shape: shape.clone(),
            values: vec![value; shape.len()],
        }
    }

    /// Builds an image from a function of integer grid coordinates.
    pub fn from_fn(shape: &GridShape, mut f: impl FnMut(&[usize]) -> T) -> Self {
        let mut values = Vec::with_capacity(shape.len());
        for_each_point(shape, |_, c| values.push(f(c)));
        Self {
            shape: shape.clone(),
            values,
        }
    }

    pub(crate) fn from_raw(shape: GridShape, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), shape.len());
        Self { shape, values }
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn get(&self, coords: &[usize]) -> T {
        self.values[self.shape.index(coords)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.shape.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.shape.ensure_same(&other.shape, "image arithmetic")?;
        Ok(Self::from_raw(
            self.shape.clone(),
            self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    /// Mean over all voxels (sequential summation).
    pub fn mean(&self) -> T {
        self.values.iter().copied().sum::<T>() / T::lit(self.values.len() as f64)
    }

    pub fn min_max(&self) -> (T, T) {
        self.values
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Periodic central-difference gradient, one component per axis.
    pub fn gradient(&self) -> VectorField<T> {
        let components = (0..self.shape.ndim())
            .map(|a| central_diff(&self.values, &self.shape, a))
            .collect();
        VectorField::from_raw(self.shape.clone(), components)
    }

    /// Converts the scalar type.
    pub fn cast<U: Real>(&self) -> ScalarImage<U> {
        ScalarImage::from_raw(
            self.shape.clone(),
            self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        )
    }
}

/// `d` real components per grid point: velocities, displacements, momenta.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T> {
    shape: GridShape,
    components: Vec<Vec<T>>,
}

impl<T: Real> VectorField<T> {
    pub fn new(shape: GridShape, components: Vec<Vec<T>>) -> Result<Self> {
        if components.len() != shape.ndim() {
            return Err(Error::ShapeMismatch(format!(
                "{} components for a {}-dimensional grid",
                components.len(),
                shape.ndim()
            )));
        }
        if let Some(c) = components.iter().find(|c| c.len() != shape.len()) {
            return Err(Error::ShapeMismatch(format!(
                "component of {} values for a grid of {} points",
                c.len(),
                shape.len()
            )));
        }
        if components.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector field"));
        }
        Ok(Self { shape, components })
    }

    pub fn zeros(shape: &GridShape) -> Self {
        Self::constant(shape, &vec![T::zero(); shape.ndim()])
    }

    /// Same vector at every point.
    pub fn constant(shape: &GridShape, value: &[T]) -> Self {
        assert_eq!(value.len(), shape.ndim(), "constant vector arity");
        Self {
            shape: shape.clone(),
            components: value.iter().map(|&v| vec![v; shape.len()]).collect(),
        }
    }

    /// Builds a field from `f(axis, coords)`.
    pub fn from_fn(shape: &GridShape, mut f: impl FnMut(usize, &[usize]) -> T) -> Self {
        let components = (0..shape.ndim())
            .map(|a| {
                let mut comp = Vec::with_capacity(shape.len());
                for_each_point(shape, |_, c| comp.push(f(a, c)));
                comp
            })
            .collect();
        Self {
            shape: shape.clone(),
            components,
        }
    }

    pub(crate) fn from_raw(shape: GridShape, components: Vec<Vec<T>>) -> Self {
        debug_assert_eq!(components.len(), shape.ndim());
        Self { shape, components }
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, axis: usize) -> &[T] {
        &self.components[axis]
    }

    pub fn components(&self) -> &[Vec<T>] {
        &self.components
    }

    pub(crate) fn components_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.components
    }

    pub fn into_components(self) -> Vec<Vec<T>> {
        self.components
    }

    /// Vector at a grid point.
    pub fn at(&self, index: usize) -> Vec<T> {
        self.components.iter().map(|c| c[index]).collect()
    }

    pub fn scaled(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(
            self.shape.clone(),
            self.components
                .iter()
                .map(|c| c.iter().map(|&v| f(v)).collect())
                .collect(),
        )
    }

    /// Rebuilds every component from `f(axis, component)`.
    pub(crate) fn map_components(&self, f: impl Fn(usize, &[T]) -> Vec<T>) -> Self {
        let components: Vec<Vec<T>> = self.components.iter().enumerate().map(|(a, c)| f(a, c)).collect();
        debug_assert!(components.iter().all(|c| c.len() == self.shape.len()));
        Self::from_raw(self.shape.clone(), components)
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.shape.ensure_same(&other.shape, "field arithmetic")?;
        Ok(self.zip_map_unchecked(other, f))
    }

    pub(crate) fn zip_map_unchecked(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self::from_raw(
            self.shape.clone(),
            self.components
                .iter()
                .zip(&other.components)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
                .collect(),
        )
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self + k * other`.
    pub fn axpy(&self, k: T, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + k * b)
    }

    /// Largest per-point Euclidean magnitude.
    pub fn max_norm(&self) -> T {
        (0..self.shape.len())
            .map(|i| self.components.iter().map(|c| c[i] * c[i]).sum::<T>().sqrt())
            .fold(T::zero(), T::max)
    }

    /// Largest absolute component value.
    pub fn max_abs(&self) -> T {
        self.components.iter().flatten().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.components
            .iter()
            .flatten()
            .zip(other.components.iter().flatten())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Voxel-mean of the pointwise dot product.
    pub fn mean_dot(&self, other: &Self) -> Result<T> {
        self.shape.ensure_same(&other.shape, "field inner product")?;
        let sum: T = self
            .components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>())
            .sum();
        Ok(sum / T::lit(self.shape.len() as f64))
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().flatten().all(|v| *v == T::zero())
    }

    pub fn cast<U: Real>(&self) -> VectorField<U> {
        VectorField::from_raw(
            self.shape.clone(),
            self.components
                .iter()
                .map(|c| c.iter().map(|v| U::lit(v.as_f64())).collect())
                .collect(),
        )
    }
}

/// A diffeomorphism with its inverse and the Jacobian determinant of the
/// forward map.
#[derive(Clone, Debug)]
pub struct DeformationPair<T> {
    forward: VectorField<T>,
    inverse: VectorField<T>,
    jac_det_forward: ScalarImage<T>,
}

impl<T: Real> DeformationPair<T> {
    /// Validates the shapes and the positivity of `|D phi|`.
    pub fn new(forward: VectorField<T>, inverse: VectorField<T>) -> Result<Self> {
        forward.shape().ensure_same(inverse.shape(), "forward/inverse maps")?;
        let jac_det_forward = jacobian_determinant(&forward);
        let min = jac_det_forward.values().iter().fold(T::infinity(), |m, &v| m.min(v));
        if !(min > T::zero()) {
            return Err(Error::DiffeomorphismViolation {
                stage: "forward map",
                step: 0,
                min_jacobian: min.as_f64(),
            });
        }
        Ok(Self {
            forward,
            inverse,
            jac_det_forward,
        })
    }

    pub fn identity(shape: &GridShape) -> Self {
        Self {
            forward: VectorField::zeros(shape),
            inverse: VectorField::zeros(shape),
            jac_det_forward: ScalarImage::constant(shape, T::one()),
        }
    }

    pub fn shape(&self) -> &GridShape {
        self.forward.shape()
    }

    /// Displacement of `phi`.
    pub fn forward(&self) -> &VectorField<T> {
        &self.forward
    }

    /// Displacement of `phi^{-1}`.
    pub fn inverse(&self) -> &VectorField<T> {
        &self.inverse
    }

    pub fn jac_det_forward(&self) -> &ScalarImage<T> {
        &self.jac_det_forward
    }

    /// Largest `|phi(phi^{-1}(x)) - x|` over the grid, in voxels.
    pub fn inverse_consistency_error(&self) -> T {
        compose_maps(&self.forward, &self.inverse)
            .map(|w| w.max_norm())
            .unwrap_or_else(|_| T::infinity())
    }
}

#[inline(always)]
fn wrap_floor<T: Real>(p: T, n: usize) -> (usize, usize, T) {
    let fl = p.floor();
    let frac = p - fl;
    let i = fl.to_i64().unwrap_or(0).rem_euclid(n as i64) as usize;
    let ip = if i + 1 == n { 0 } else { i + 1 };
    (i, ip, frac)
}

/// Periodic multilinear sample of raw grid values at a continuous point.
#[inline]
pub(crate) fn sample_raw<T: Real>(values: &[T], dims: &[usize], point: &[T]) -> T {
    match dims.len() {
        2 => {
            let n1 = dims[1];
            let (i0, i0p, f0) = wrap_floor(point[0], dims[0]);
            let (i1, i1p, f1) = wrap_floor(point[1], n1);
            let a = lerp(values[i0 * n1 + i1], values[i0 * n1 + i1p], f1);
            let b = lerp(values[i0p * n1 + i1], values[i0p * n1 + i1p], f1);
            lerp(a, b, f0)
        }
        3 => {
            let (n1, n2) = (dims[1], dims[2]);
            let (i0, i0p, f0) = wrap_floor(point[0], dims[0]);
            let (i1, i1p, f1) = wrap_floor(point[1], n1);
            let (i2, i2p, f2) = wrap_floor(point[2], n2);
            let at = |a: usize, b: usize, c: usize| values[(a * n1 + b) * n2 + c];
            let plane = |a: usize| {
                lerp(
                    lerp(at(a, i1, i2), at(a, i1, i2p), f2),
                    lerp(at(a, i1p, i2), at(a, i1p, i2p), f2),
                    f1,
                )
            };
            lerp(plane(i0), plane(i0p), f0)
        }
        d => unreachable!("grids are 2D or 3D, got {d}"),
    }
}

/// Samples `values` at `x + disp(x)` for every grid point `x`.
pub(crate) fn sample_displaced<T: Real>(values: &[T], shape: &GridShape, disp: &[Vec<T>]) -> Vec<T> {
    let dims = shape.dims();
    let mut out = Vec::with_capacity(shape.len());
    let mut p = vec![T::zero(); dims.len()];
    for_each_point(shape, |idx, c| {
        for a in 0..dims.len() {
            p[a] = T::lit(c[a] as f64) + disp[a][idx];
        }
        out.push(sample_raw(values, dims, &p));
    });
    out
}

/// Single-point periodic multilinear sample.
pub fn sample<T: Real>(img: &ScalarImage<T>, point: &[T]) -> Result<T> {
    if point.len() != img.shape.ndim() {
        return Err(Error::ShapeMismatch(format!(
            "{}-dimensional query on a {}-dimensional image",
            point.len(),
            img.shape.ndim()
        )));
    }
    if point.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("query coordinates"));
    }
    Ok(sample_raw(&img.values, img.shape.dims(), point))
}

/// Multilinear interpolation with periodic wrap.
///
/// `query[axis][k]` is the continuous voxel coordinate of output point `k`
/// along `axis`; the result has shape `out_shape`.
pub fn interpolate<T: Real>(img: &ScalarImage<T>, query: &[Vec<T>], out_shape: &GridShape) -> Result<ScalarImage<T>> {
    let d = img.shape.ndim();
    if query.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "{} query axes for a {d}-dimensional image",
            query.len()
        )));
    }
    if query.iter().any(|q| q.len() != out_shape.len()) {
        return Err(Error::ShapeMismatch(format!(
            "query length does not match output grid of {} points",
            out_shape.len()
        )));
    }
    if query.iter().flatten().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("query coordinates"));
    }
    let mut p = vec![T::zero(); d];
    let values = (0..out_shape.len())
        .map(|k| {
            for a in 0..d {
                p[a] = query[a][k];
            }
            sample_raw(&img.values, img.shape.dims(), &p)
        })
        .collect();
    Ok(ScalarImage::from_raw(out_shape.clone(), values))
}

/// `img ∘ phi` with `phi(x) = x + u(x)`.
pub fn warp_image<T: Real>(img: &ScalarImage<T>, map_disp: &VectorField<T>) -> Result<ScalarImage<T>> {
    img.shape.ensure_same(&map_disp.shape, "warp_image")?;
    Ok(ScalarImage::from_raw(
        img.shape.clone(),
        sample_displaced(&img.values, &img.shape, &map_disp.components),
    ))
}

/// Displacement of `phi_outer ∘ phi_inner`.
pub fn compose_maps<T: Real>(outer_disp: &VectorField<T>, inner_disp: &VectorField<T>) -> Result<VectorField<T>> {
    outer_disp.shape.ensure_same(&inner_disp.shape, "compose_maps")?;
    let shape = &inner_disp.shape;
    let components = outer_disp
        .components
        .iter()
        .zip(&inner_disp.components)
        .map(|(outer, inner)| {
            sample_displaced(outer, shape, &inner_disp.components)
                .into_iter()
                .zip(inner)
                .map(|(o, &i)| i + o)
                .collect()
        })
        .collect();
    Ok(VectorField::from_raw(shape.clone(), components))
}

/// Second-order periodic central difference along `axis`, in voxel units.
pub(crate) fn central_diff<T: Real>(src: &[T], shape: &GridShape, axis: usize) -> Vec<T> {
    let dims = shape.dims();
    let n = dims[axis];
    let stride: usize = dims[axis + 1..].iter().product();
    let outer = src.len() / (n * stride);
    let half = T::lit(0.5);
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        let base = o * n * stride;
        for c in 0..n {
            let cp = if c + 1 == n { 0 } else { c + 1 };
            let cm = if c == 0 { n - 1 } else { c - 1 };
            let (row, plus, minus) = (base + c * stride, base + cp * stride, base + cm * stride);
            for k in 0..stride {
                out[row + k] = (src[plus + k] - src[minus + k]) * half;
            }
        }
    }
    out
}

/// Per-voxel `det(I + Du)` with periodic central differences.
pub fn jacobian_determinant<T: Real>(map_disp: &VectorField<T>) -> ScalarImage<T> {
    let shape = map_disp.shape();
    let d = shape.ndim();
    // du[i][j] = d u_i / d x_j
    let du: Vec<Vec<Vec<T>>> = map_disp
        .components
        .iter()
        .map(|c| (0..d).map(|j| central_diff(c, shape, j)).collect())
        .collect();
    let one = T::one();
    let values = (0..shape.len())
        .map(|k| {
            let e = |i: usize, j: usize| du[i][j][k] + if i == j { one } else { T::zero() };
            if d == 2 {
                e(0, 0) * e(1, 1) - e(0, 1) * e(1, 0)
            } else {
                e(0, 0) * (e(1, 1) * e(2, 2) - e(1, 2) * e(2, 1)) - e(0, 1) * (e(1, 0) * e(2, 2) - e(1, 2) * e(2, 0))
                    + e(0, 2) * (e(1, 0) * e(2, 1) - e(1, 1) * e(2, 0))
            }
        })
        .collect();
    ScalarImage::from_raw(shape.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn shape2(n0: usize, n1: usize) -> GridShape {
        GridShape::new(&[n0, n1]).unwrap()
    }

    fn smooth_image(shape: &GridShape) -> ScalarImage<f64> {
        let dims = shape.dims().to_vec();
        ScalarImage::from_fn(shape, |c| {
            c.iter()
                .zip(&dims)
                .enumerate()
                .map(|(a, (&x, &n))| ((a + 1) as f64 * 2.0 * PI * x as f64 / n as f64).sin())
                .sum::<f64>()
                + 0.1 * c[0] as f64
        })
    }

    /// Independent periodic interpolator: enumerate the 2^d cell corners with
    /// explicit weights.
    fn brute_interp(img: &ScalarImage<f64>, p: &[f64]) -> f64 {
        let dims = img.shape().dims();
        let d = dims.len();
        let mut total = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = vec![0usize; d];
            for a in 0..d {
                let base = p[a].floor();
                let t = p[a] - base;
                let bit = (corner >> a) & 1;
                w *= if bit == 1 { t } else { 1.0 - t };
                let n = dims[a] as i64;
                idx[a] = (((base as i64 + bit as i64) % n + n) % n) as usize;
            }
            total += w * img.get(&idx);
        }
        total
    }

    #[test]
    fn grid_shape_validation() {
        assert!(GridShape::new(&[3, 8]).is_err());
        assert!(GridShape::new(&[8]).is_err());
        assert!(GridShape::new(&[4, 4, 4, 4]).is_err());
        assert!(GridShape::with_spacing(&[8, 8], &[1.0, 0.0]).is_err());
        let s = GridShape::new(&[4, 5, 6]).unwrap();
        assert_eq!(s.strides(), vec![30, 6, 1]);
        assert_eq!(s.index(&[1, 2, 3]), 30 + 12 + 3);
        assert_eq!(s.coords(45), vec![1, 2, 3]);
    }

    #[test]
    fn containers_reject_bad_payloads() {
        let s = shape2(4, 4);
        assert!(ScalarImage::new(s.clone(), vec![0.0f64; 15]).is_err());
        let mut vals = vec![0.0f64; 16];
        vals[3] = f64::NAN;
        assert!(matches!(ScalarImage::new(s.clone(), vals), Err(Error::NonFinite(_))));
        assert!(VectorField::new(s.clone(), vec![vec![0.0f64; 16]]).is_err());
    }

    #[test]
    fn interpolation_at_grid_points_is_exact() {
        let s = GridShape::new(&[6, 5, 4]).unwrap();
        let img = ScalarImage::from_fn(&s, |c| (c[0] * 31 + c[1] * 7 + c[2]) as f64 * 0.37 - 3.0);
        let query: Vec<Vec<f64>> = (0..3)
            .map(|a| (0..s.len()).map(|k| s.coords(k)[a] as f64).collect())
            .collect();
        let out = interpolate(&img, &query, &s).unwrap();
        assert_eq!(out.values(), img.values());
    }

    #[test]
    fn interpolation_of_ramp_is_linear() {
        let s = shape2(4, 4);
        let img = ScalarImage::from_fn(&s, |c| c[0] as f64);
        assert_eq!(sample(&img, &[1.5, 0.0]).unwrap(), 1.5);
        assert_eq!(sample(&img, &[1.5, 2.25]).unwrap(), 1.5);
    }

    #[test]
    fn interpolation_wraps_periodically() {
        let s = shape2(4, 6);
        let img = smooth_image(&s);
        let a = sample(&img, &[-0.5, 1.25]).unwrap();
        let b = sample(&img, &[3.5, 1.25]).unwrap();
        assert!((a - b).abs() < 1e-14);
        for p in [[-0.5, 1.25], [3.5, -2.75], [7.9, 13.1], [-11.3, 0.4]] {
            assert!((sample(&img, &p).unwrap() - brute_interp(&img, &p)).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolate_rejects_mismatched_query() {
        let s = shape2(4, 4);
        let img = ScalarImage::<f64>::zeros(&s);
        let q = vec![vec![0.0; 16], vec![0.0; 15]];
        assert!(matches!(interpolate(&img, &q, &s), Err(Error::ShapeMismatch(_))));
        let q = vec![vec![0.0; 16]];
        assert!(interpolate(&img, &q, &s).is_err());
    }

    #[test]
    fn warp_with_zero_displacement_is_identity() {
        let s = shape2(16, 12);
        let img = smooth_image(&s);
        let out = warp_image(&img, &VectorField::zeros(&s)).unwrap();
        assert_eq!(out.values(), img.values());
    }

    #[test]
    fn warp_by_unit_shift_rolls_the_image() {
        let s = shape2(8, 6);
        let img = smooth_image(&s);
        let shift = VectorField::constant(&s, &[1.0, 0.0]);
        let out = warp_image(&img, &shift).unwrap();
        for_each_point(&s, |k, c| {
            let src = [(c[0] + 1) % 8, c[1]];
            assert_eq!(out.values()[k], img.get(&src));
        });
    }

    #[test]
    fn warp_matches_per_voxel_oracle() {
        let s = shape2(16, 16);
        let img = smooth_image(&s);
        let u = VectorField::from_fn(&s, |a, c| {
            0.8 * (2.0 * PI * (c[1] as f64 + a as f64) / 16.0).sin() + 0.3 * (2.0 * PI * c[0] as f64 / 16.0).cos()
        });
        let out = warp_image(&img, &u).unwrap();
        for_each_point(&s, |k, c| {
            let p = [c[0] as f64 + u.component(0)[k], c[1] as f64 + u.component(1)[k]];
            assert!((out.values()[k] - brute_interp(&img, &p)).abs() < 1e-12);
        });
    }

    #[test]
    fn warp_rejects_shape_mismatch() {
        let img = ScalarImage::<f64>::zeros(&shape2(8, 8));
        let u = VectorField::zeros(&shape2(8, 6));
        assert!(matches!(warp_image(&img, &u), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn composition_identities_and_translations() {
        let s = shape2(12, 10);
        let f = VectorField::from_fn(&s, |a, c| 0.4 * ((c[0] + 2 * c[1] + a) as f64 * 0.3).sin());
        let zero = VectorField::zeros(&s);
        assert_eq!(compose_maps(&zero, &f).unwrap(), f);
        assert_eq!(compose_maps(&f, &zero).unwrap(), f);

        let a = VectorField::constant(&s, &[0.75, -1.5]);
        let b = VectorField::constant(&s, &[2.25, 0.5]);
        let ab = compose_maps(&a, &b).unwrap();
        assert_eq!(ab, VectorField::constant(&s, &[3.0, -1.0]));
    }

    #[test]
    fn composition_is_associative_for_translations() {
        let s = GridShape::new(&[6, 6, 6]).unwrap();
        let a = VectorField::constant(&s, &[0.5, 1.25, -0.75]);
        let b = VectorField::constant(&s, &[-2.0, 0.25, 3.5]);
        let c = VectorField::constant(&s, &[1.5, -0.5, 0.125]);
        let left = compose_maps(&compose_maps(&a, &b).unwrap(), &c).unwrap();
        let right = compose_maps(&a, &compose_maps(&b, &c).unwrap()).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn jacobian_of_identity_and_translation_is_one() {
        let s = GridShape::new(&[5, 6, 7]).unwrap();
        for u in [VectorField::zeros(&s), VectorField::constant(&s, &[0.3, -1.7, 4.0])] {
            assert!(jacobian_determinant(&u).values().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn jacobian_matches_independent_stencil() {
        let n = 16usize;
        let s = shape2(n, n);
        let eps = 0.1;
        let u = VectorField::from_fn(&s, |a, c| {
            let (x, y) = (c[0] as f64, c[1] as f64);
            if a == 0 {
                eps * (2.0 * PI * (x + 2.0 * y) / n as f64).sin()
            } else {
                eps * (2.0 * PI * x / n as f64).cos() * (2.0 * PI * y / n as f64).sin()
            }
        });
        let det = jacobian_determinant(&u);
        let w = |i: i64| ((i % n as i64 + n as i64) % n as i64) as usize;
        for x in 0..n as i64 {
            for y in 0..n as i64 {
                let g = |a: usize, xx: i64, yy: i64| u.component(a)[w(xx) * n + w(yy)];
                let a = 1.0 + (g(0, x + 1, y) - g(0, x - 1, y)) / 2.0;
                let b = (g(0, x, y + 1) - g(0, x, y - 1)) / 2.0;
                let c = (g(1, x + 1, y) - g(1, x - 1, y)) / 2.0;
                let d = 1.0 + (g(1, x, y + 1) - g(1, x, y - 1)) / 2.0;
                let expect = a * d - b * c;
                let got = det.get(&[x as usize, y as usize]);
                assert!((got - expect).abs() < 1e-13, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn folded_map_is_rejected() {
        let s = shape2(16, 16);
        let u = VectorField::from_fn(&s, |a, c| {
            if a == 0 {
                3.0 * (2.0 * PI * c[0] as f64 / 16.0).sin()
            } else {
                0.0
            }
        });
        let err = DeformationPair::new(u.clone(), u).unwrap_err();
        assert!(matches!(err, Error::DiffeomorphismViolation { .. }));
    }

    #[test]
    fn gradient_of_ramp_free_sinusoid() {
        let n = 32usize;
        let s = shape2(n, n);
        let k = 2.0 * PI / n as f64;
        let img = ScalarImage::from_fn(&s, |c| (k * c[0] as f64).sin());
        let g = img.gradient();
        for_each_point(&s, |i, c| {
            let exact = k * (k * c[0] as f64).cos();
            assert!((g.component(0)[i] - exact).abs() < 1e-2);
            assert_eq!(g.component(1)[i], 0.0);
        });
    }
}

//! Diffeomorphisms from velocity fields.
//!
//! Two parameterizations are supported:
//!
//! * geodesic shooting: the initial velocity evolves by EPDiff
//!   `dv/dt = -K[(Dv)ᵀ m + (Dm) v + m div v]`, `m = Lv`, and generates the
//!   flow `dφ/dt = v_t ∘ φ_t`;
//! * stationary velocity: `dφ/dt = w(φ)`, whose time-one map is the group
//!   exponential, computed by scaling and squaring.
//!
//! Both maps are integrated in Eulerian form on the grid. The inverse
//! `ψ_t = φ_t⁻¹` obeys the transport equation `dψ/dt = -(Dψ) v_t` forward in
//! time. The forward map `φ_1` is recovered as the time-zero value of
//! `χ_s = φ_1 ∘ φ_s⁻¹`, which solves the same transport equation backward
//! from `χ_1 = id`. Velocities between stored steps come from cubic Hermite
//! interpolation on `(v_n, dv/dt(v_n))`, so the backward pass keeps the
//! order of the forward scheme.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{central_diff, compose_maps, jacobian_determinant, sample_displaced, DeformationPair, VectorField};
use crate::scalar::Real;
use crate::spectral::MetricOperator;

/// Speed (voxels per unit time) above which shooting logs a warning.
const SPEED_WARN_VOXELS: f64 = 4.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    #[default]
    Rk4,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    #[default]
    Geodesic,
    Stationary,
}

impl std::str::FromStr for Parameterization {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "geodesic" => Ok(Self::Geodesic),
            "stationary" => Ok(Self::Stationary),
            other => Err(format!("unknown parameterization '{other}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrationConfig {
    pub num_steps: usize,
    pub scheme: Scheme,
    pub parameterization: Parameterization,
    pub squarings: u32,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            num_steps: 10,
            scheme: Scheme::Rk4,
            parameterization: Parameterization::Geodesic,
            squarings: 6,
        }
    }
}

impl IntegrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 1 {
            return Err(Error::InvalidConfig("num_steps must be >= 1".into()));
        }
        if !(1..=12).contains(&self.squarings) {
            return Err(Error::InvalidConfig(format!(
                "squarings must lie in [1, 12], got {}",
                self.squarings
            )));
        }
        Ok(())
    }
}

/// Velocities and inverse maps at every time step of a shot.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub velocities: Vec<VectorField<T>>,
    pub inverse_maps: Vec<VectorField<T>>,
}

#[derive(Clone, Debug)]
pub struct GeodesicShot<T> {
    pub deformation: DeformationPair<T>,
    pub final_velocity: VectorField<T>,
    /// Present only when requested.
    pub trajectory: Option<Trajectory<T>>,
}

/// `-K[(Dv)ᵀ m + (Dm) v + m div v]` with `m = Lv`.
pub fn epdiff_rhs<T: Real>(op: &MetricOperator<T>, v: &VectorField<T>) -> Result<VectorField<T>> {
    let m = op.apply_l(v)?.into_field();
    let shape = v.shape();
    let d = shape.ndim();
    // dv[j][i] = ∂_i v_j ; dm[i][j] = ∂_j m_i
    let dv: Vec<Vec<Vec<T>>> = (0..d)
        .map(|j| (0..d).map(|i| central_diff(v.component(j), shape, i)).collect())
        .collect();
    let dm: Vec<Vec<Vec<T>>> = (0..d)
        .map(|i| (0..d).map(|j| central_diff(m.component(i), shape, j)).collect())
        .collect();
    let mut bracket = vec![vec![T::zero(); shape.len()]; d];
    for k in 0..shape.len() {
        let mut div = T::zero();
        for j in 0..d {
            div = div + dv[j][j][k];
        }
        for (i, out) in bracket.iter_mut().enumerate() {
            let mut acc = m.component(i)[k] * div;
            for j in 0..d {
                acc = acc + dv[j][i][k] * m.component(j)[k] + dm[i][j][k] * v.component(j)[k];
            }
            out[k] = acc;
        }
    }
    let bracket = VectorField::from_raw(shape.clone(), bracket);
    Ok(op.smooth(&bracket)?.map(|x| -x))
}

/// Transport velocity of a map displacement `u` (map `x + u`) under `v`:
/// returns `sign * (v + (Du) v)`.
fn transport_rhs<T: Real>(u: &VectorField<T>, v: &VectorField<T>, sign: T) -> VectorField<T> {
    let shape = u.shape();
    let d = shape.ndim();
    let comps = (0..d)
        .map(|a| {
            let mut out: Vec<T> = v.component(a).to_vec();
            for j in 0..d {
                let du = central_diff(u.component(a), shape, j);
                for ((o, g), &vj) in out.iter_mut().zip(du).zip(v.component(j)) {
                    *o = *o + g * vj;
                }
            }
            out.into_iter().map(|x| x * sign).collect()
        })
        .collect();
    VectorField::from_raw(shape.clone(), comps)
}

fn lincomb<T: Real>(base: &VectorField<T>, terms: &[(T, &VectorField<T>)]) -> VectorField<T> {
    let mut out = base.clone();
    for (k, f) in terms {
        for (o, s) in out.components_mut().iter_mut().zip(f.components()) {
            for (x, &y) in o.iter_mut().zip(s) {
                *x = *x + *k * y;
            }
        }
    }
    out
}

fn min_jacobian<T: Real>(u: &VectorField<T>) -> T {
    jacobian_determinant(u)
        .values()
        .iter()
        .fold(T::infinity(), |m, &x| m.min(x))
}

fn check_jacobian<T: Real>(u: &VectorField<T>, stage: &'static str, step: usize) -> Result<()> {
    let min = min_jacobian(u);
    if min > T::zero() {
        Ok(())
    } else {
        Err(Error::DiffeomorphismViolation {
            stage,
            step,
            min_jacobian: min.as_f64(),
        })
    }
}

fn warn_on_speed<T: Real>(v: &VectorField<T>, num_steps: usize) {
    let speed = v.max_norm().as_f64();
    if speed > SPEED_WARN_VOXELS {
        log::warn!(
            "velocity of {speed:.2} voxels per unit time exceeds {SPEED_WARN_VOXELS} \
             ({:.2} voxels per step over {num_steps} steps)",
            speed / num_steps as f64
        );
    }
}

/// Geodesic shooting from `v0`: returns `(φ_1, φ_1⁻¹, |Dφ_1|)` and `v_1`.
pub fn geodesic_shoot<T: Real>(
    op: &MetricOperator<T>,
    v0: &VectorField<T>,
    cfg: &IntegrationConfig,
) -> Result<GeodesicShot<T>> {
    shoot(op, v0, cfg, false)
}

/// As [`geodesic_shoot`], keeping every intermediate velocity and inverse map.
pub fn geodesic_shoot_with_trajectory<T: Real>(
    op: &MetricOperator<T>,
    v0: &VectorField<T>,
    cfg: &IntegrationConfig,
) -> Result<GeodesicShot<T>> {
    shoot(op, v0, cfg, true)
}

fn shoot<T: Real>(
    op: &MetricOperator<T>,
    v0: &VectorField<T>,
    cfg: &IntegrationConfig,
    keep: bool,
) -> Result<GeodesicShot<T>> {
    cfg.validate()?;
    op.shape().ensure_same(v0.shape(), "geodesic_shoot")?;
    let shape = v0.shape();
    if v0.is_zero() {
        let trajectory = keep.then(|| Trajectory {
            velocities: vec![v0.clone(); cfg.num_steps + 1],
            inverse_maps: vec![VectorField::zeros(shape); cfg.num_steps + 1],
        });
        return Ok(GeodesicShot {
            deformation: DeformationPair::identity(shape),
            final_velocity: v0.clone(),
            trajectory,
        });
    }
    warn_on_speed(v0, cfg.num_steps);

    let n = cfg.num_steps;
    let dt = T::lit(1.0 / n as f64);
    let half = T::lit(0.5);
    let minus = -T::one();

    let mut v = v0.clone();
    let mut psi = VectorField::zeros(shape);
    // v_n and dv/dt at v_n, for the backward pass.
    let mut velocities = Vec::with_capacity(n + 1);
    let mut slopes = Vec::with_capacity(n + 1);
    let mut inverse_maps = Vec::new();
    if keep {
        inverse_maps.push(psi.clone());
    }

    for step in 0..n {
        let f1 = epdiff_rhs(op, &v)?;
        match cfg.scheme {
            Scheme::Euler => {
                let g1 = transport_rhs(&psi, &v, minus);
                let v_next = lincomb(&v, &[(dt, &f1)]);
                psi = lincomb(&psi, &[(dt, &g1)]);
                velocities.push(std::mem::replace(&mut v, v_next));
            }
            Scheme::Rk4 => {
                let g1 = transport_rhs(&psi, &v, minus);
                let v2 = lincomb(&v, &[(dt * half, &f1)]);
                let p2 = lincomb(&psi, &[(dt * half, &g1)]);
                let f2 = epdiff_rhs(op, &v2)?;
                let g2 = transport_rhs(&p2, &v2, minus);
                let v3 = lincomb(&v, &[(dt * half, &f2)]);
                let p3 = lincomb(&psi, &[(dt * half, &g2)]);
                let f3 = epdiff_rhs(op, &v3)?;
                let g3 = transport_rhs(&p3, &v3, minus);
                let v4 = lincomb(&v, &[(dt, &f3)]);
                let p4 = lincomb(&psi, &[(dt, &g3)]);
                let f4 = epdiff_rhs(op, &v4)?;
                let g4 = transport_rhs(&p4, &v4, minus);
                let w = dt / T::lit(6.0);
                let two = T::lit(2.0);
                let v_next = lincomb(&v, &[(w, &f1), (w * two, &f2), (w * two, &f3), (w, &f4)]);
                psi = lincomb(&psi, &[(w, &g1), (w * two, &g2), (w * two, &g3), (w, &g4)]);
                velocities.push(std::mem::replace(&mut v, v_next));
            }
        }
        slopes.push(f1);
        check_jacobian(&psi, "inverse map", step + 1)?;
        if keep {
            inverse_maps.push(psi.clone());
        }
    }
    if cfg.scheme == Scheme::Rk4 {
        slopes.push(epdiff_rhs(op, &v)?);
    }
    velocities.push(v.clone());

    let forward = backward_transport(&velocities, &slopes, cfg.scheme, dt);
    let deformation = DeformationPair::new(forward, psi).map_err(|e| match e {
        Error::DiffeomorphismViolation { min_jacobian, .. } => Error::DiffeomorphismViolation {
            stage: "forward map",
            step: n,
            min_jacobian,
        },
        other => other,
    })?;
    Ok(GeodesicShot {
        deformation,
        final_velocity: v,
        trajectory: keep.then_some(Trajectory {
            velocities,
            inverse_maps,
        }),
    })
}

/// Integrates `χ` from `s = 1` back to `s = 0`, returning the displacement of
/// `φ_1`.
fn backward_transport<T: Real>(
    velocities: &[VectorField<T>],
    slopes: &[VectorField<T>],
    scheme: Scheme,
    dt: T,
) -> VectorField<T> {
    let n = velocities.len() - 1;
    let shape = velocities[0].shape();
    let mut chi = VectorField::zeros(shape);
    let one = T::one();
    for k in (0..n).rev() {
        // step from s_{k+1} down to s_k
        match scheme {
            Scheme::Euler => {
                let g = transport_rhs(&chi, &velocities[k + 1], one);
                chi = lincomb(&chi, &[(dt, &g)]);
            }
            Scheme::Rk4 => {
                let (v_hi, v_lo) = (&velocities[k + 1], &velocities[k]);
                let eighth = dt / T::lit(8.0);
                let mid = lincomb(
                    &lincomb(&v_lo.scaled(T::lit(0.5)), &[(T::lit(0.5), v_hi)]),
                    &[(eighth, &slopes[k]), (-eighth, &slopes[k + 1])],
                );
                let half = dt * T::lit(0.5);
                let g1 = transport_rhs(&chi, v_hi, one);
                let g2 = transport_rhs(&lincomb(&chi, &[(half, &g1)]), &mid, one);
                let g3 = transport_rhs(&lincomb(&chi, &[(half, &g2)]), &mid, one);
                let g4 = transport_rhs(&lincomb(&chi, &[(dt, &g3)]), v_lo, one);
                let w = dt / T::lit(6.0);
                let two = T::lit(2.0);
                chi = lincomb(&chi, &[(w, &g1), (w * two, &g2), (w * two, &g3), (w, &g4)]);
            }
        }
    }
    chi
}

/// Max-norm relative residual of momentum transport at `t = 1`:
/// `‖m_1 - |Dψ_1| (Dψ_1)ᵀ (m_0 ∘ ψ_1)‖ / ‖m_0‖` with `ψ_1 = φ_1⁻¹`.
pub fn momentum_conservation_residual<T: Real>(op: &MetricOperator<T>, trajectory: &Trajectory<T>) -> Result<T> {
    let (Some(v0), Some(v1)) = (trajectory.velocities.first(), trajectory.velocities.last()) else {
        return Err(Error::MissingIntermediates("velocities"));
    };
    let Some(psi) = trajectory.inverse_maps.last() else {
        return Err(Error::MissingIntermediates("inverse maps"));
    };
    if trajectory.velocities.len() < 2 || trajectory.inverse_maps.len() != trajectory.velocities.len() {
        return Err(Error::MissingIntermediates("trajectory steps"));
    }
    let m0 = op.apply_l(v0)?.into_field();
    let m1 = op.apply_l(v1)?.into_field();
    let scale = m0.max_norm();
    if scale == T::zero() {
        return Ok(m1.max_norm());
    }
    let shape = psi.shape();
    let d = shape.ndim();
    let pulled: Vec<Vec<T>> = m0
        .components()
        .iter()
        .map(|c| sample_displaced(c, shape, psi.components()))
        .collect();
    let det = jacobian_determinant(psi);
    // dpsi[i][j] = δ_ij + ∂_j u_i
    let dpsi: Vec<Vec<Vec<T>>> = (0..d)
        .map(|i| (0..d).map(|j| central_diff(psi.component(i), shape, j)).collect())
        .collect();
    let mut worst = T::zero();
    for k in 0..shape.len() {
        let mut norm_sq = T::zero();
        for j in 0..d {
            // ((Dψ)ᵀ p)_j = Σ_i (Dψ)_{ij} p_i
            let mut t = T::zero();
            for i in 0..d {
                let e = dpsi[i][j][k] + if i == j { T::one() } else { T::zero() };
                t = t + e * pulled[i][k];
            }
            let r = m1.component(j)[k] - det.values()[k] * t;
            norm_sq = norm_sq + r * r;
        }
        worst = worst.max(norm_sq.sqrt());
    }
    Ok(worst / scale)
}

/// Group exponential of a stationary field by scaling and squaring; the
/// inverse is the exponential of `-w`.
pub fn svf_exponential<T: Real>(w: &VectorField<T>, cfg: &IntegrationConfig) -> Result<DeformationPair<T>> {
    cfg.validate()?;
    if w.is_zero() {
        return Ok(DeformationPair::identity(w.shape()));
    }
    let forward = scaling_and_squaring(w, cfg.squarings)?;
    let inverse = scaling_and_squaring(&w.map(|x| -x), cfg.squarings)?;
    DeformationPair::new(forward, inverse).map_err(|e| match e {
        Error::DiffeomorphismViolation { min_jacobian, .. } => Error::DiffeomorphismViolation {
            stage: "exponential map",
            step: cfg.squarings as usize,
            min_jacobian,
        },
        other => other,
    })
}

fn scaling_and_squaring<T: Real>(w: &VectorField<T>, squarings: u32) -> Result<VectorField<T>> {
    let mut u = w.scaled(T::lit(0.5f64.powi(squarings as i32)));
    for _ in 0..squarings {
        u = compose_maps(&u, &u)?;
    }
    Ok(u)
}

/// Dispatches on `cfg.parameterization`.
pub fn deform<T: Real>(
    op: &MetricOperator<T>,
    v: &VectorField<T>,
    cfg: &IntegrationConfig,
) -> Result<DeformationPair<T>> {
    match cfg.parameterization {
        Parameterization::Geodesic => Ok(geodesic_shoot(op, v, cfg)?.deformation),
        Parameterization::Stationary => svf_exponential(v, cfg),
    }
}

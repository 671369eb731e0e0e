//! Correlation kernels and Gram-matrix assembly.
//!
//! Three families are supported: the Matérn kernel on planar distance, the
//! non-separable space-time kernel
//!
//! ```text
//! K((s,t),(s',t')) = 1/(φ₁|t-t'|² + 1) · exp(-φ₂‖s-s'‖ / sqrt(1 + φ₁|t-t'|²))
//! ```
//!
//! and the squared-exponential temporal kernel `exp(-ξ²|t-t'|²)`.
//! Distances are Euclidean in the plane.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bessel::bessel_k;
use crate::error::{Error, Result};
use crate::linalg::{JitterPolicy, SpdMatrix};

/// A point `(s, t)` on a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimePoint {
    pub t: f64,
    pub s: [f64; 2],
}

impl SpaceTimePoint {
    pub fn new(t: f64, s: [f64; 2]) -> Self {
        SpaceTimePoint { t, s }
    }

    /// A purely spatial point (time fixed at zero).
    pub fn at(s: [f64; 2]) -> Self {
        SpaceTimePoint { t: 0.0, s }
    }

    /// A purely temporal point (location fixed at the origin).
    pub fn when(t: f64) -> Self {
        SpaceTimePoint { t, s: [0.0, 0.0] }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.s[0].is_finite() && self.s[1].is_finite()
    }

    pub fn spatial_distance(&self, other: &SpaceTimePoint) -> f64 {
        planar_distance(&self.s, &other.s)
    }
}

pub fn planar_distance(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Matérn kernel in space with decay `phi` and smoothness `nu`.
    Matern { phi: f64, nu: f64 },
    /// Non-separable space-time kernel.
    Gneiting { phi1: f64, phi2: f64 },
    /// Squared-exponential kernel in time.
    SqExp { xi: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::ParameterDomain(format!("kernel parameter {name} must be positive and finite, got {v}")))
            }
        };
        match *self {
            KernelSpec::Matern { phi, nu } => {
                check("phi", phi)?;
                check("nu", nu)
            }
            KernelSpec::Gneiting { phi1, phi2 } => {
                check("phi1", phi1)?;
                check("phi2", phi2)
            }
            KernelSpec::SqExp { xi } => check("xi", xi),
        }
    }

    /// Correlation between two points. Parameters are assumed validated.
    pub fn corr(&self, p: &SpaceTimePoint, q: &SpaceTimePoint) -> f64 {
        match *self {
            KernelSpec::Matern { phi, nu } => matern_unchecked(p.spatial_distance(q), phi, nu),
            KernelSpec::Gneiting { phi1, phi2 } => gneiting_unchecked(p, q, phi1, phi2),
            KernelSpec::SqExp { xi } => sqexp_unchecked(p.t, q.t, xi),
        }
    }

    /// Separation used when reporting near-duplicate points.
    fn separation(&self, p: &SpaceTimePoint, q: &SpaceTimePoint) -> f64 {
        match self {
            KernelSpec::Matern { .. } => p.spatial_distance(q),
            KernelSpec::SqExp { .. } => (p.t - q.t).abs(),
            KernelSpec::Gneiting { .. } => p.spatial_distance(q).hypot(p.t - q.t),
        }
    }
}

fn matern_unchecked(d: f64, phi: f64, nu: f64) -> f64 {
    if d == 0.0 {
        return 1.0;
    }
    let x = d / phi;
    if nu == 0.5 {
        return (-x).exp();
    }
    if nu == 1.5 {
        return (1.0 + x) * (-x).exp();
    }
    if nu == 2.5 {
        return (1.0 + x + x * x / 3.0) * (-x).exp();
    }
    if x < 1e-100 {
        return 1.0;
    }
    let k = bessel_k(nu, x);
    if k == 0.0 {
        return 0.0;
    }
    let log_corr = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * x.ln() + k.ln();
    log_corr.exp().min(1.0)
}

fn gneiting_unchecked(p: &SpaceTimePoint, q: &SpaceTimePoint, phi1: f64, phi2: f64) -> f64 {
    let dt = p.t - q.t;
    let a = phi1 * dt * dt + 1.0;
    (-phi2 * p.spatial_distance(q) / a.sqrt()).exp() / a
}

fn sqexp_unchecked(t: f64, t2: f64, xi: f64) -> f64 {
    let dt = t - t2;
    (-(xi * xi) * dt * dt).exp()
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::ParameterDomain(format!("{name} must be finite, got {v}")))
    }
}

/// Matérn correlation `(2^{1-ν}/Γ(ν)) (d/φ)^ν K_ν(d/φ)`, exactly 1 at `d = 0`.
pub fn matern_corr(d: f64, phi: f64, nu: f64) -> Result<f64> {
    KernelSpec::Matern { phi, nu }.validate()?;
    if !(d.is_finite() && d >= 0.0) {
        return Err(Error::ParameterDomain(format!("distance must be finite and non-negative, got {d}")));
    }
    Ok(matern_unchecked(d, phi, nu))
}

pub fn gneiting_st_corr(p: &SpaceTimePoint, q: &SpaceTimePoint, phi1: f64, phi2: f64) -> Result<f64> {
    KernelSpec::Gneiting { phi1, phi2 }.validate()?;
    if !(p.is_finite() && q.is_finite()) {
        return Err(Error::ParameterDomain("space-time points must be finite".into()));
    }
    Ok(gneiting_unchecked(p, q, phi1, phi2))
}

pub fn sqexp_corr(t: f64, t2: f64, xi: f64) -> Result<f64> {
    KernelSpec::SqExp { xi }.validate()?;
    finite("t", t)?;
    finite("t'", t2)?;
    Ok(sqexp_unchecked(t, t2, xi))
}

/// Elementwise kernel matrix, symmetric by construction: the upper triangle
/// is evaluated and mirrored, with a unit diagonal.
pub fn kernel_matrix(points: &[SpaceTimePoint], spec: &KernelSpec) -> DMatrix<f64> {
    let n = points.len();
    let rows: Vec<Vec<f64>> = if n >= 256 {
        (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).map(|j| spec.corr(&points[i], &points[j])).collect())
            .collect()
    } else {
        (0..n).map(|i| (i + 1..n).map(|j| spec.corr(&points[i], &points[j])).collect()).collect()
    };
    let mut m = DMatrix::identity(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            let j = i + 1 + k;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Rectangular kernel matrix `K(a_i, b_j)`.
pub fn cross_kernel(a: &[SpaceTimePoint], b: &[SpaceTimePoint], spec: &KernelSpec) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| spec.corr(&a[i], &b[j]))
}

/// A factorized Gram matrix and the jitter that was needed to factor it.
#[derive(Debug, Clone)]
pub struct Gram {
    spd: SpdMatrix,
}

impl Gram {
    pub fn matrix(&self) -> &DMatrix<f64> {
        self.spd.matrix()
    }

    pub fn spd(&self) -> &SpdMatrix {
        &self.spd
    }

    pub fn into_spd(self) -> SpdMatrix {
        self.spd
    }

    pub fn jitter(&self) -> f64 {
        self.spd.jitter()
    }
}

/// Assembles and factorizes the Gram matrix of `points` under `spec`.
///
/// On failure after the jitter ladder the error names the pair of points
/// with the smallest separation.
pub fn gram(points: &[SpaceTimePoint], spec: &KernelSpec, policy: JitterPolicy) -> Result<Gram> {
    spec.validate()?;
    if points.is_empty() {
        return Err(Error::EmptyData("gram requires at least one point".into()));
    }
    if let Some(i) = points.iter().position(|p| !p.is_finite()) {
        return Err(Error::ParameterDomain(format!("point {i} has non-finite coordinates")));
    }
    let m = kernel_matrix(points, spec);
    match SpdMatrix::new(m, policy, "gram") {
        Ok(spd) => Ok(Gram { spd }),
        Err(_) => {
            let (i, j, d) = closest_pair(points, spec);
            Err(Error::rank(
                "gram",
                format!("kernel matrix is singular; closest points are {i} and {j} (separation {d:e})"),
            ))
        }
    }
}

fn closest_pair(points: &[SpaceTimePoint], spec: &KernelSpec) -> (usize, usize, f64) {
    let mut best = (0, 0, f64::INFINITY);
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d = spec.separation(&points[i], &points[j]);
            if d < best.2 {
                best = (i, j, d);
            }
        }
    }
    best
}

//! Extrinsic sphere primitives.
//!
//! Points on `S^{d-1}` are unit vectors in `R^d`; tangent vectors at `x` are
//! the orthogonal complement of `x`. Everything here is pure given an
//! explicit RNG handle.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Threshold below which `x + step` is considered degenerate.
pub const RETRACTION_EPS: f64 = 1e-12;
/// Angles above `pi - ANTIPODAL_EPS` have no unique geodesic.
pub const ANTIPODAL_EPS: f64 = 1e-6;
/// Angles below this collapse slerp to its right endpoint.
pub const COINCIDENT_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// slice helpers shared by the hot paths

/// Euclidean inner product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Normalize in place; errors when the vector is numerically zero.
#[inline]
pub(crate) fn normalize_in_place(a: &mut [f64]) -> Result<()> {
    let n = norm(a);
    if n < RETRACTION_EPS {
        return Err(Error::DegenerateRetraction { norm: n });
    }
    let inv = 1.0 / n;
    for v in a.iter_mut() {
        *v *= inv;
    }
    Ok(())
}

/// `w <- w - <w,x> x`, the tangent projection at unit `x`, on raw slices.
#[inline]
pub(crate) fn project_tangent_in_place(x: &[f64], w: &mut [f64]) {
    let c = dot(x, w);
    for (wi, xi) in w.iter_mut().zip(x) {
        *wi -= c * xi;
    }
}

/// Clamp a cosine into `[-1, 1]` before `acos`.
#[inline]
pub(crate) fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0, 1.0)
}

pub(crate) fn standard_normal_vec(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

// ---------------------------------------------------------------------------

/// A point on `S^{d-1}`: unit norm within 1e-12, `d >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector {
    coords: Vec<f64>,
}

impl UnitVector {
    /// Normalizes the input onto the sphere. Errors on `d < 2` or a
    /// numerically zero vector.
    pub fn new(mut coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "sphere points need d >= 2, got d = {}",
                coords.len()
            )));
        }
        normalize_in_place(&mut coords)?;
        Ok(Self { coords })
    }

    /// Wraps coordinates already known to be unit norm.
    pub(crate) fn from_unit_unchecked(coords: Vec<f64>) -> Self {
        debug_assert!((norm(&coords) - 1.0).abs() < 1e-9);
        Self { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn cos_angle_to(&self, other: &UnitVector) -> f64 {
        clamp_cos(dot(&self.coords, &other.coords))
    }
}

/// A tangent vector at `base`: `<coords, base> = 0` within 1e-10.
#[derive(Debug, Clone)]
pub struct TangentVector {
    pub base: UnitVector,
    pub coords: Vec<f64>,
}

impl TangentVector {
    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }
}

/// Orthogonal projection of `w` onto the tangent space at `x`:
/// `P_x(w) = w - <w,x> x`.
pub fn project_tangent(x: &UnitVector, w: &[f64]) -> TangentVector {
    let mut coords = w.to_vec();
    project_tangent_in_place(x.as_slice(), &mut coords);
    TangentVector {
        base: x.clone(),
        coords,
    }
}

/// Retraction: normalize `x + step` back onto the sphere.
///
/// Errors with [`Error::DegenerateRetraction`] when `|x + step|` vanishes;
/// the caller must reduce the step.
pub fn retract(x: &UnitVector, step: &[f64]) -> Result<UnitVector> {
    let mut out: Vec<f64> = x.as_slice().iter().zip(step).map(|(a, b)| a + b).collect();
    normalize_in_place(&mut out)?;
    Ok(UnitVector::from_unit_unchecked(out))
}

/// Uniform draw on `S^{d-1}` (normalized standard Gaussian).
pub fn sample_uniform_sphere(d: usize, rng: &mut impl Rng) -> UnitVector {
    assert!(d >= 2, "sphere sampling needs d >= 2");
    loop {
        let mut z = standard_normal_vec(d, rng);
        if normalize_in_place(&mut z).is_ok() {
            return UnitVector::from_unit_unchecked(z);
        }
    }
}

/// Standard Gaussian projected onto the tangent plane at `x`.
pub fn sample_tangent_gaussian(x: &UnitVector, rng: &mut impl Rng) -> TangentVector {
    let mut z = standard_normal_vec(x.dim(), rng);
    project_tangent_in_place(x.as_slice(), &mut z);
    TangentVector {
        base: x.clone(),
        coords: z,
    }
}

/// Spherical linear interpolation between `x0` and `x1`.
///
/// Near-coincident endpoints (`theta < 1e-8`) collapse to `x1`; antipodal
/// endpoints are an error, not a convention pick.
pub fn slerp(x0: &UnitVector, x1: &UnitVector, t: f64) -> Result<UnitVector> {
    let theta = x0.cos_angle_to(x1).acos();
    if theta > std::f64::consts::PI - ANTIPODAL_EPS {
        return Err(Error::AntipodalPoints { angle: theta });
    }
    if theta < COINCIDENT_EPS {
        return Ok(x1.clone());
    }
    let sin_theta = theta.sin();
    let a = (((1.0 - t) * theta).sin()) / sin_theta;
    let b = ((t * theta).sin()) / sin_theta;
    let mut out: Vec<f64> = x0
        .as_slice()
        .iter()
        .zip(x1.as_slice())
        .map(|(p, q)| a * p + b * q)
        .collect();
    normalize_in_place(&mut out)?;
    Ok(UnitVector::from_unit_unchecked(out))
}

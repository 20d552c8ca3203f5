//! The four conditional noise processes: vMF, geodesic slerp, VP, VE.
//!
//! Each path supplies training-time corruption, the conditional velocity,
//! the conditional score where one exists, a unified progress variable
//! `u in [0, 1]` running from the noise end to the clean end, and the
//! network-input preconditioning. Spherical paths keep the state on
//! `S^{d-1}`; VP/VE live in `R^d`.

use rand::Rng;

use crate::geometry::{self, UnitVector};
use crate::schedule::ConcentrationSchedule;
use crate::vmf::{sample_vmf, RadialCdfTable, VelocityTable};
use crate::{Error, Result};

/// VP velocity and score are singular at t = 1; both are refused above this.
pub const VP_TIME_CAP: f64 = 1.0 - 1e-3;
/// VE sigma floor; doubles as the clean-end value of the geometric schedule.
pub const VE_SIGMA_FLOOR: f64 = 1e-3;

/// Conditional path selector with its per-path parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathKind {
    Vmf { kappa_max: f64 },
    Geodesic,
    Vp,
    Ve { sigma_max: f64 },
}

/// Embedding norm convention required by a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NormConvention {
    /// Unit rows (spherical paths).
    Unit,
    /// Rows of norm sqrt(d) (VE).
    SqrtD,
    /// Unconstrained (VP).
    Free,
}

impl PathKind {
    pub fn name(&self) -> &'static str {
        match self {
            PathKind::Vmf { .. } => "vmf",
            PathKind::Geodesic => "geodesic",
            PathKind::Vp => "vp",
            PathKind::Ve { .. } => "ve",
        }
    }

    pub fn is_spherical(&self) -> bool {
        matches!(self, PathKind::Vmf { .. } | PathKind::Geodesic)
    }

    pub fn has_score(&self) -> bool {
        !matches!(self, PathKind::Geodesic)
    }

    pub fn norm_convention(&self) -> NormConvention {
        match self {
            PathKind::Vmf { .. } | PathKind::Geodesic => NormConvention::Unit,
            PathKind::Ve { .. } => NormConvention::SqrtD,
            PathKind::Vp => NormConvention::Free,
        }
    }

    pub fn schedule(&self) -> Option<ConcentrationSchedule> {
        match self {
            PathKind::Vmf { kappa_max } => Some(ConcentrationSchedule {
                kappa_max: *kappa_max,
            }),
            _ => None,
        }
    }

    /// VE noise level: geometric interpolation from sigma_max at the noise
    /// end (t = 0) down to the floor at the clean end (t = 1).
    pub fn sigma(&self, t: f64) -> f64 {
        match self {
            PathKind::Ve { sigma_max } => {
                (sigma_max.powf(1.0 - t) * VE_SIGMA_FLOOR.powf(t)).max(VE_SIGMA_FLOOR)
            }
            _ => panic!("sigma is only defined for the VE path"),
        }
    }

    /// Per-path progress variable: `kappa_t / kappa_max` for vMF, `t` for
    /// VP, `1 - sigma_t / sigma_max` for VE.
    pub fn progress(&self, t: f64) -> Result<f64> {
        match self {
            PathKind::Vmf { kappa_max } => {
                let sched = ConcentrationSchedule {
                    kappa_max: *kappa_max,
                };
                Ok(sched.kappa(t) / kappa_max)
            }
            PathKind::Vp => Ok(t),
            PathKind::Ve { sigma_max } => Ok(1.0 - self.sigma(t) / sigma_max),
            PathKind::Geodesic => Err(Error::ProgressUnavailable { kind: self.name() }),
        }
    }

    fn check_vp_time(&self, t: f64) -> Result<()> {
        if matches!(self, PathKind::Vp) && t > VP_TIME_CAP {
            return Err(Error::TimeSingularity {
                t,
                cap: VP_TIME_CAP,
            });
        }
        Ok(())
    }
}

/// One corrupted training point.
#[derive(Debug, Clone)]
pub struct CorruptionSample {
    pub x_t: Vec<f64>,
    pub w: Vec<f64>,
    pub t: f64,
}

/// A path plus the tables it needs at runtime. The vMF path requires both
/// tables; the others need none.
#[derive(Clone, Copy)]
pub struct PathContext<'a> {
    pub kind: PathKind,
    pub velocity_table: Option<&'a VelocityTable>,
    pub cdf_table: Option<&'a RadialCdfTable>,
}

impl<'a> PathContext<'a> {
    pub fn vmf(kappa_max: f64, velocity: &'a VelocityTable, cdf: &'a RadialCdfTable) -> Self {
        Self {
            kind: PathKind::Vmf { kappa_max },
            velocity_table: Some(velocity),
            cdf_table: Some(cdf),
        }
    }

    pub fn tableless(kind: PathKind) -> Result<Self> {
        if matches!(kind, PathKind::Vmf { .. }) {
            return Err(Error::InvalidConfig(
                "the vMF path needs velocity and CDF tables".into(),
            ));
        }
        Ok(Self {
            kind,
            velocity_table: None,
            cdf_table: None,
        })
    }

    fn velocity_table(&self) -> Result<&'a VelocityTable> {
        self.velocity_table
            .ok_or_else(|| Error::InvalidConfig("missing velocity table".into()))
    }

    fn cdf_table(&self) -> Result<&'a RadialCdfTable> {
        self.cdf_table
            .ok_or_else(|| Error::InvalidConfig("missing radial CDF table".into()))
    }

    /// Velocity-scalar lookup with the schedule factor removed; the full
    /// conditional velocity multiplies this by `kappa_dot`.
    pub(crate) fn velocity_scalar(&self, cosine: f64, kappa: f64) -> Result<f64> {
        Ok(self.velocity_table()?.lookup(cosine, kappa))
    }

    /// Draw `x_t ~ p_t(. | w)`.
    pub fn corrupt(&self, w: &[f64], t: f64, rng: &mut impl Rng) -> Result<CorruptionSample> {
        let x_t = match self.kind {
            PathKind::Vmf { kappa_max } => {
                let kappa = ConcentrationSchedule { kappa_max }.kappa(t);
                sample_vmf(w, kappa, self.cdf_table()?, rng)
            }
            PathKind::Geodesic => {
                let target = UnitVector::new(w.to_vec())?;
                let mut x0 = geometry::sample_uniform_sphere(w.len(), rng);
                match geometry::slerp(&x0, &target, t) {
                    Ok(x) => x.into_coords(),
                    Err(Error::AntipodalPoints { .. }) => {
                        // measure-zero draw; resample once, then fail loudly
                        x0 = geometry::sample_uniform_sphere(w.len(), rng);
                        geometry::slerp(&x0, &target, t)?.into_coords()
                    }
                    Err(e) => return Err(e),
                }
            }
            PathKind::Vp => {
                let z = geometry::standard_normal_vec(w.len(), rng);
                z.iter()
                    .zip(w)
                    .map(|(zi, wi)| (1.0 - t) * zi + t * wi)
                    .collect()
            }
            PathKind::Ve { .. } => {
                let sigma = self.kind.sigma(t);
                let z = geometry::standard_normal_vec(w.len(), rng);
                z.iter().zip(w).map(|(zi, wi)| wi + sigma * zi).collect()
            }
        };
        Ok(CorruptionSample {
            x_t,
            w: w.to_vec(),
            t,
        })
    }

    /// Conditional velocity `v_t(x | w)`; tangent at `x` for spherical kinds.
    pub fn conditional_velocity(&self, x: &[f64], w: &[f64], t: f64) -> Result<Vec<f64>> {
        self.kind.check_vp_time(t)?;
        match self.kind {
            PathKind::Vmf { kappa_max } => {
                let sched = ConcentrationSchedule { kappa_max };
                let s = geometry::clamp_cos(geometry::dot(w, x));
                let scalar = sched.kappa_dot(t) * self.velocity_scalar(s, sched.kappa(t))?;
                Ok(w.iter()
                    .zip(x)
                    .map(|(wi, xi)| scalar * (wi - s * xi))
                    .collect())
            }
            PathKind::Geodesic => Ok(geodesic_velocity(x, w, t)),
            PathKind::Vp => Ok(w
                .iter()
                .zip(x)
                .map(|(wi, xi)| (wi - xi) / (1.0 - t))
                .collect()),
            PathKind::Ve { sigma_max } => {
                // d x_t / dt at fixed z is (sigma_dot / sigma)(x - w); the
                // geometric schedule makes the rate constant.
                let rate = (VE_SIGMA_FLOOR / sigma_max).ln();
                Ok(x.iter().zip(w).map(|(xi, wi)| rate * (xi - wi)).collect())
            }
        }
    }

    /// Conditional score where defined; the geodesic path has none.
    pub fn conditional_score(&self, x: &[f64], w: &[f64], t: f64) -> Result<Vec<f64>> {
        self.kind.check_vp_time(t)?;
        match self.kind {
            PathKind::Vmf { kappa_max } => {
                let kappa = ConcentrationSchedule { kappa_max }.kappa(t);
                let s = geometry::dot(w, x);
                Ok(w.iter()
                    .zip(x)
                    .map(|(wi, xi)| kappa * (wi - s * xi))
                    .collect())
            }
            PathKind::Geodesic => Err(Error::ScoreUnavailable { kind: "geodesic" }),
            PathKind::Vp => {
                let denom = (1.0 - t) * (1.0 - t);
                Ok(w.iter()
                    .zip(x)
                    .map(|(wi, xi)| (t * wi - xi) / denom)
                    .collect())
            }
            PathKind::Ve { .. } => {
                let sigma = self.kind.sigma(t);
                let inv = 1.0 / (sigma * sigma);
                Ok(w.iter().zip(x).map(|(wi, xi)| (wi - xi) * inv).collect())
            }
        }
    }

    /// Network input preconditioning: VE divides by sqrt(sigma^2 + 1), all
    /// other kinds pass the state through unchanged.
    pub fn precondition_input(&self, x: &[f64], t: f64) -> Vec<f64> {
        match self.kind {
            PathKind::Ve { .. } => {
                let sigma = self.kind.sigma(t);
                let scale = 1.0 / (sigma * sigma + 1.0).sqrt();
                x.iter().map(|v| v * scale).collect()
            }
            _ => x.to_vec(),
        }
    }
}

/// Geodesic conditional velocity: the log map toward `w` divided by the
/// remaining time, `theta / ((1 - t) sin(theta)) * P_x(w)`.
fn geodesic_velocity(x: &[f64], w: &[f64], t: f64) -> Vec<f64> {
    let s = geometry::dot(w, x).clamp(-1.0 + 1e-12, 1.0);
    let theta = s.acos();
    let factor = if theta < 1e-6 {
        // theta/sin(theta) -> 1 + theta^2/6
        (1.0 + theta * theta / 6.0) / (1.0 - t)
    } else {
        theta / (theta.sin() * (1.0 - t))
    };
    w.iter()
        .zip(x)
        .map(|(wi, xi)| factor * (wi - s * xi))
        .collect()
}

/// Monte-Carlo mean-cosine curve `E<w, x_t>` with standard errors at each
/// grid time, for the spherical paths.
pub fn expected_cosine_curve(
    ctx: &PathContext,
    d: usize,
    t_grid: &[f64],
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(f64, f64)>> {
    if !ctx.kind.is_spherical() {
        return Err(Error::InvalidConfig(
            "mean-cosine curves are defined for spherical paths".into(),
        ));
    }
    let w = geometry::sample_uniform_sphere(d, rng);
    let mut out = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n_samples {
            let sample = ctx.corrupt(w.as_slice(), t, rng)?;
            let c = geometry::dot(&sample.x_t, w.as_slice());
            sum += c;
            sumsq += c * c;
        }
        let mean = sum / n_samples as f64;
        let var = (sumsq / n_samples as f64 - mean * mean).max(0.0);
        out.push((mean, (var / n_samples as f64).sqrt()));
    }
    Ok(out)
}

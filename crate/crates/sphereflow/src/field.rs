//! Marginal quantities assembled from a posterior matrix.
//!
//! Velocity, score, and SDE drift at position `l` are all posterior-weighted
//! sums over the vocabulary of tangent projections `P_{x^l}(w_k)`, differing
//! only in the scalar weight per token. The assembly is a single fused pass
//! over `(l, k)`: each embedding row is touched once, the cosine
//! `s_k = <w_k, x^l>` feeds the weight, and the projection is accumulated as
//! `sum_k c_k w_k - (sum_k c_k s_k) x^l`, which is tangent by construction.

use rand::Rng;

use crate::geometry;
use crate::paths::{PathContext, PathKind, VE_SIGMA_FLOOR};
use crate::posterior::{EmbeddingTable, PosteriorMatrix};
use crate::schedule::ConcentrationSchedule;
use crate::{Error, Result};

/// The noisy sequence state: `L` vectors in `R^d`, unit rows for spherical
/// paths.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereState {
    pub positions: Vec<f64>,
    pub seq_len: usize,
    pub dim: usize,
}

impl SphereState {
    pub fn uniform(seq_len: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut positions = Vec::with_capacity(seq_len * dim);
        for _ in 0..seq_len {
            positions.extend(geometry::sample_uniform_sphere(dim, rng).into_coords());
        }
        Self {
            positions,
            seq_len,
            dim,
        }
    }

    /// Gaussian prior scaled by `scale` (VP uses 1, VE uses sigma_max).
    pub fn gaussian(seq_len: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut positions = Vec::with_capacity(seq_len * dim);
        for _ in 0..seq_len {
            positions.extend(
                geometry::standard_normal_vec(dim, rng)
                    .into_iter()
                    .map(|z| scale * z),
            );
        }
        Self {
            positions,
            seq_len,
            dim,
        }
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.positions[l * self.dim..(l + 1) * self.dim]
    }

    pub fn row_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.positions[l * self.dim..(l + 1) * self.dim]
    }

    pub fn max_norm_deviation(&self) -> f64 {
        (0..self.seq_len)
            .map(|l| (geometry::norm(self.row(l)) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-position vectors attached to a state (velocity, score, or drift).
#[derive(Debug, Clone)]
pub struct TangentField {
    pub vectors: Vec<f64>,
    pub seq_len: usize,
    pub dim: usize,
}

impl TangentField {
    fn zeros(seq_len: usize, dim: usize) -> Self {
        Self {
            vectors: vec![0.0; seq_len * dim],
            seq_len,
            dim,
        }
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.vectors[l * self.dim..(l + 1) * self.dim]
    }
}

/// Fused posterior-weighted tangent sum at one position:
/// `out = sum_k weight(k, s_k) p_k w_k - (sum_k weight(k, s_k) p_k s_k) x`.
fn weighted_projection_sum(
    x_l: &[f64],
    emb: &EmbeddingTable,
    probs: &[f64],
    mut weight: impl FnMut(usize, f64) -> f64,
    out: &mut [f64],
) {
    out.fill(0.0);
    let mut radial = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let w_k = emb.row(k);
        let s = geometry::dot(w_k, x_l);
        let c = p * weight(k, s);
        for (o, wi) in out.iter_mut().zip(w_k) {
            *o += c * wi;
        }
        radial += c * s;
    }
    for (o, xi) in out.iter_mut().zip(x_l) {
        *o -= radial * xi;
    }
}

/// Posterior-weighted mean embedding, used by the Euclidean assemblies.
fn mean_embedding(emb: &EmbeddingTable, probs: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for (k, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (o, wi) in out.iter_mut().zip(emb.row(k)) {
            *o += p * wi;
        }
    }
}

/// Marginal velocity field: the posterior-weighted sum of conditional
/// velocities, tangent at every position for spherical kinds.
pub fn marginal_velocity(
    ctx: &PathContext,
    post: &PosteriorMatrix,
    x: &SphereState,
    t: f64,
    emb: &EmbeddingTable,
) -> Result<TangentField> {
    let mut field = TangentField::zeros(x.seq_len, x.dim);
    match ctx.kind {
        PathKind::Vmf { kappa_max } => {
            let sched = ConcentrationSchedule { kappa_max };
            let kappa = sched.kappa(t);
            let kdot = sched.kappa_dot(t);
            let table = ctx
                .velocity_table
                .ok_or_else(|| Error::InvalidConfig("missing velocity table".into()))?;
            for l in 0..x.seq_len {
                weighted_projection_sum(
                    x.row(l),
                    emb,
                    post.row(l),
                    |_, s| kdot * table.lookup(s, kappa),
                    &mut field.vectors[l * x.dim..(l + 1) * x.dim],
                );
            }
        }
        PathKind::Geodesic => {
            for l in 0..x.seq_len {
                weighted_projection_sum(
                    x.row(l),
                    emb,
                    post.row(l),
                    |_, s| geodesic_rate(s, t),
                    &mut field.vectors[l * x.dim..(l + 1) * x.dim],
                );
            }
        }
        PathKind::Vp => {
            ctx.kind.progress(t)?;
            if t > crate::paths::VP_TIME_CAP {
                return Err(Error::TimeSingularity {
                    t,
                    cap: crate::paths::VP_TIME_CAP,
                });
            }
            let inv = 1.0 / (1.0 - t);
            for l in 0..x.seq_len {
                let out = &mut field.vectors[l * x.dim..(l + 1) * x.dim];
                mean_embedding(emb, post.row(l), out);
                for (o, xi) in out.iter_mut().zip(x.row(l)) {
                    *o = (*o - xi) * inv;
                }
            }
        }
        PathKind::Ve { sigma_max } => {
            let rate = (VE_SIGMA_FLOOR / sigma_max).ln();
            for l in 0..x.seq_len {
                let out = &mut field.vectors[l * x.dim..(l + 1) * x.dim];
                mean_embedding(emb, post.row(l), out);
                for (o, xi) in out.iter_mut().zip(x.row(l)) {
                    *o = rate * (xi - *o);
                }
            }
        }
    }
    Ok(field)
}

/// `theta / ((1 - t) sin theta)` with the small-angle limit.
fn geodesic_rate(s: f64, t: f64) -> f64 {
    let s = s.clamp(-1.0 + 1e-12, 1.0);
    let theta = s.acos();
    if theta < 1e-6 {
        (1.0 + theta * theta / 6.0) / (1.0 - t)
    } else {
        theta / (theta.sin() * (1.0 - t))
    }
}

/// Marginal score field; unavailable for the geodesic path.
pub fn marginal_score(
    ctx: &PathContext,
    post: &PosteriorMatrix,
    x: &SphereState,
    t: f64,
    emb: &EmbeddingTable,
) -> Result<TangentField> {
    let mut field = TangentField::zeros(x.seq_len, x.dim);
    match ctx.kind {
        PathKind::Vmf { kappa_max } => {
            let kappa = ConcentrationSchedule { kappa_max }.kappa(t);
            for l in 0..x.seq_len {
                weighted_projection_sum(
                    x.row(l),
                    emb,
                    post.row(l),
                    |_, _| kappa,
                    &mut field.vectors[l * x.dim..(l + 1) * x.dim],
                );
            }
        }
        PathKind::Geodesic => return Err(Error::ScoreUnavailable { kind: "geodesic" }),
        PathKind::Vp => {
            if t > crate::paths::VP_TIME_CAP {
                return Err(Error::TimeSingularity {
                    t,
                    cap: crate::paths::VP_TIME_CAP,
                });
            }
            let inv = 1.0 / ((1.0 - t) * (1.0 - t));
            for l in 0..x.seq_len {
                let out = &mut field.vectors[l * x.dim..(l + 1) * x.dim];
                mean_embedding(emb, post.row(l), out);
                for (o, xi) in out.iter_mut().zip(x.row(l)) {
                    *o = (t * *o - xi) * inv;
                }
            }
        }
        PathKind::Ve { sigma_max } => {
            let sigma = PathKind::Ve { sigma_max }.sigma(t);
            let inv = 1.0 / (sigma * sigma);
            for l in 0..x.seq_len {
                let out = &mut field.vectors[l * x.dim..(l + 1) * x.dim];
                mean_embedding(emb, post.row(l), out);
                for (o, xi) in out.iter_mut().zip(x.row(l)) {
                    *o = (*o - xi) * inv;
                }
            }
        }
    }
    Ok(field)
}

/// SDE drift `velocity + (sigma^2 / 2) * score`, assembled in one weighted
/// pass for the vMF path (the two weights share posteriors and projections).
pub fn sde_drift(
    ctx: &PathContext,
    post: &PosteriorMatrix,
    x: &SphereState,
    t: f64,
    emb: &EmbeddingTable,
    sigma: f64,
) -> Result<TangentField> {
    if sigma == 0.0 {
        return marginal_velocity(ctx, post, x, t, emb);
    }
    match ctx.kind {
        PathKind::Vmf { kappa_max } => {
            let sched = ConcentrationSchedule { kappa_max };
            let kappa = sched.kappa(t);
            let kdot = sched.kappa_dot(t);
            let table = ctx
                .velocity_table
                .ok_or_else(|| Error::InvalidConfig("missing velocity table".into()))?;
            let half_sq = 0.5 * sigma * sigma;
            let mut field = TangentField::zeros(x.seq_len, x.dim);
            for l in 0..x.seq_len {
                weighted_projection_sum(
                    x.row(l),
                    emb,
                    post.row(l),
                    |_, s| kdot * table.lookup(s, kappa) + half_sq * kappa,
                    &mut field.vectors[l * x.dim..(l + 1) * x.dim],
                );
            }
            Ok(field)
        }
        _ => {
            let mut v = marginal_velocity(ctx, post, x, t, emb)?;
            let s = marginal_score(ctx, post, x, t, emb)?;
            let half_sq = 0.5 * sigma * sigma;
            for (vi, si) in v.vectors.iter_mut().zip(&s.vectors) {
                *vi += half_sq * si;
            }
            Ok(v)
        }
    }
}

//! Inference: Euler predictor, Langevin corrector, the full
//! predictor-corrector loop, the Euler-Maruyama SDE sampler, time grids,
//! step-size damping, clue pinning, and decoding.
//!
//! The vMF predictor is parameterized by concentration increments
//! `delta_kappa = kappa(t1) - kappa(t0)`, so the schedule derivative never
//! appears. One posterior evaluation is spent per predictor step and per
//! corrector step (`NFE = n (1 + k)`); the terminal decode forward is not
//! counted and is reported separately.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::SphereState;
use crate::geometry;
use crate::paths::{PathContext, PathKind, VP_TIME_CAP};
use crate::posterior::{EmbeddingTable, PosteriorMatrix, PosteriorSource};
use crate::schedule::{ConcentrationSchedule, WarpSchedule};
use crate::{Error, Result};

/// Sampler configuration; `NFE = n_predictor * (1 + k_corrector)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_predictor: usize,
    pub k_corrector: usize,
    pub epsilon: f64,
    pub warp_aware: bool,
    pub damping: bool,
    pub sigma: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn ode(n: usize, seed: u64) -> Self {
        Self {
            n_predictor: n,
            k_corrector: 0,
            epsilon: 1e-2,
            warp_aware: false,
            damping: false,
            sigma: 0.0,
            seed,
        }
    }

    pub fn nfe(&self) -> usize {
        self.n_predictor * (1 + self.k_corrector)
    }

    /// Flag string in sweep notation: `w`, `d`, `wd`, or `-`.
    pub fn flags(&self) -> String {
        match (self.warp_aware, self.damping) {
            (true, true) => "wd".into(),
            (true, false) => "w".into(),
            (false, true) => "d".into(),
            (false, false) => "-".into(),
        }
    }

    pub fn validate(&self, kind: PathKind) -> Result<()> {
        if self.n_predictor == 0 {
            return Err(Error::InvalidConfig("n_predictor must be >= 1".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("epsilon must be > 0".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::InvalidConfig("sigma must be >= 0".into()));
        }
        if !kind.has_score() && (self.k_corrector > 0 || self.sigma > 0.0) {
            return Err(Error::ScoreUnavailable { kind: kind.name() });
        }
        if self.damping && kind.progress(0.0).is_err() {
            return Err(Error::ProgressUnavailable { kind: kind.name() });
        }
        Ok(())
    }
}

/// Pinned (conditioned) positions and their token values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClueMask {
    pub pinned: Vec<bool>,
    pub values: Vec<usize>,
}

impl ClueMask {
    pub fn none(seq_len: usize) -> Self {
        Self {
            pinned: vec![false; seq_len],
            values: vec![0; seq_len],
        }
    }

    pub fn validate(&self, seq_len: usize, n_vocab: usize) -> Result<()> {
        if self.pinned.len() != seq_len || self.values.len() != seq_len {
            return Err(Error::InvalidConfig("clue mask length mismatch".into()));
        }
        for (l, &p) in self.pinned.iter().enumerate() {
            if p && self.values[l] >= n_vocab {
                return Err(Error::InvalidConfig(format!(
                    "clue value {} out of vocabulary at position {}",
                    self.values[l], l
                )));
            }
        }
        Ok(())
    }

    /// Overwrite pinned positions with their clue embeddings.
    pub fn pin(&self, state: &mut SphereState, emb: &EmbeddingTable) {
        for l in 0..state.seq_len {
            if self.pinned[l] {
                state.row_mut(l).copy_from_slice(emb.row(self.values[l]));
            }
        }
    }
}

/// Predictor node times: uniform in `t`, or uniform in the warp coordinate
/// when `warp_aware`. The VP grid is capped below the time singularity.
pub fn time_grid(
    kind: PathKind,
    n: usize,
    warp_aware: bool,
    warp: &WarpSchedule,
) -> Result<Vec<f64>> {
    assert!(n >= 1);
    let mut grid: Vec<f64> = if warp_aware {
        warp.grid(n)
    } else {
        (0..=n).map(|i| i as f64 / n as f64).collect()
    };
    if matches!(kind, PathKind::Vp) {
        for t in grid.iter_mut() {
            *t = t.min(VP_TIME_CAP);
        }
        for w in grid.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidConfig(
                    "VP time cap collapsed the grid; use fewer predictor steps".into(),
                ));
            }
        }
    }
    Ok(grid)
}

/// Corrector step size with optional damping `epsilon (1 - u)^2`.
pub fn effective_epsilon(config: &SamplerConfig, kind: PathKind, t: f64) -> Result<f64> {
    if !config.damping {
        return Ok(config.epsilon);
    }
    let u = kind.progress(t)?;
    Ok(config.epsilon * (1.0 - u) * (1.0 - u))
}

/// One Euler predictor step from `t0` to `t1`, in place. For the vMF path
/// the update is assembled with the concentration increment directly; for
/// `sigma > 0` the same pass carries the Langevin part of the SDE drift and
/// tangent-projected noise (Euler-Maruyama).
#[allow(clippy::too_many_arguments)]
pub fn drift_step(
    ctx: &PathContext,
    state: &mut SphereState,
    post: &PosteriorMatrix,
    t0: f64,
    t1: f64,
    emb: &EmbeddingTable,
    sigma: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<()> {
    let dt = t1 - t0;
    debug_assert!(dt > 0.0);
    match ctx.kind {
        PathKind::Vmf { kappa_max } => {
            let sched = ConcentrationSchedule { kappa_max };
            let kappa = sched.kappa(t0);
            let dk = sched.kappa(t1) - sched.kappa(t0);
            let table = ctx
                .velocity_table
                .ok_or_else(|| Error::InvalidConfig("missing velocity table".into()))?;
            let half_sq_dt = 0.5 * sigma * sigma * dt;
            let dim = state.dim;
            let mut step = vec![0.0; dim];
            for l in 0..state.seq_len {
                let x_l = state.row(l);
                step.fill(0.0);
                let mut radial = 0.0;
                for (k, &p) in post.row(l).iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let w_k = emb.row(k);
                    let s = geometry::dot(w_k, x_l);
                    let c = if sigma == 0.0 {
                        p * (dk * table.lookup(s, kappa))
                    } else {
                        p * (dk * table.lookup(s, kappa) + half_sq_dt * kappa)
                    };
                    for (o, wi) in step.iter_mut().zip(w_k) {
                        *o += c * wi;
                    }
                    radial += c * s;
                }
                for (o, xi) in step.iter_mut().zip(x_l) {
                    *o -= radial * xi;
                }
                if sigma > 0.0 {
                    let r = rng.as_deref_mut().expect("SDE steps need an RNG");
                    let mut noise = geometry::standard_normal_vec(dim, r);
                    geometry::project_tangent_in_place(x_l, &mut noise);
                    let scale = sigma * dt.sqrt();
                    for (o, ni) in step.iter_mut().zip(&noise) {
                        *o += scale * ni;
                    }
                }
                let row = state.row_mut(l);
                for (xi, si) in row.iter_mut().zip(&step) {
                    *xi += si;
                }
                geometry::normalize_in_place(row)?;
            }
        }
        PathKind::Geodesic => {
            let v = crate::field::marginal_velocity(ctx, post, state, t0, emb)?;
            for l in 0..state.seq_len {
                let row = state.row_mut(l);
                for (xi, vi) in row.iter_mut().zip(v.row(l)) {
                    *xi += dt * vi;
                }
                geometry::normalize_in_place(row)?;
            }
        }
        PathKind::Vp | PathKind::Ve { .. } => {
            let drift = crate::field::sde_drift(ctx, post, state, t0, emb, sigma)?;
            let noise_scale = sigma * dt.sqrt();
            for l in 0..state.seq_len {
                let row = state.row_mut(l);
                for (xi, di) in row.iter_mut().zip(drift.row(l)) {
                    *xi += dt * di;
                }
                if sigma > 0.0 {
                    let r = rng.as_deref_mut().expect("SDE steps need an RNG");
                    let noise = geometry::standard_normal_vec(state.dim, r);
                    let row = state.row_mut(l);
                    for (xi, ni) in row.iter_mut().zip(&noise) {
                        *xi += noise_scale * ni;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Deterministic Euler predictor step (no diffusion, no noise).
pub fn euler_step(
    ctx: &PathContext,
    state: &mut SphereState,
    post: &PosteriorMatrix,
    t0: f64,
    t1: f64,
    emb: &EmbeddingTable,
) -> Result<()> {
    drift_step(ctx, state, post, t0, t1, emb, 0.0, None)
}

/// One Langevin corrector iteration at fixed `t`:
/// `x <- retract(x + P_x(eps g + sqrt(2 eps) xi))` per position (Euclidean
/// kinds drop the projection and retraction). `noise_scale` is test
/// instrumentation; production callers pass 1.
#[allow(clippy::too_many_arguments)]
pub fn langevin_step(
    ctx: &PathContext,
    state: &mut SphereState,
    post: &PosteriorMatrix,
    t: f64,
    eps_eff: f64,
    emb: &EmbeddingTable,
    rng: &mut ChaCha8Rng,
    noise_scale: f64,
) -> Result<()> {
    if eps_eff == 0.0 {
        return Ok(());
    }
    let score = crate::field::marginal_score(ctx, post, state, t, emb)?;
    let sqrt2eps = (2.0 * eps_eff).sqrt() * noise_scale;
    let spherical = ctx.kind.is_spherical();
    for l in 0..state.seq_len {
        let mut step: Vec<f64> = score.row(l).iter().map(|g| eps_eff * g).collect();
        let noise = geometry::standard_normal_vec(state.dim, rng);
        for (s, n) in step.iter_mut().zip(&noise) {
            *s += sqrt2eps * n;
        }
        if spherical {
            geometry::project_tangent_in_place(state.row(l), &mut step);
        }
        let row = state.row_mut(l);
        for (xi, si) in row.iter_mut().zip(&step) {
            *xi += si;
        }
        if spherical {
            geometry::normalize_in_place(row)?;
        }
    }
    Ok(())
}

/// Per-position argmax of decoder logits `<w_k, xhat> + b_k`; ties break
/// toward the lowest index.
pub fn decode(emb: &EmbeddingTable, x_hat: &[f64]) -> Vec<usize> {
    let seq_len = x_hat.len() / emb.dim;
    (0..seq_len)
        .map(|l| {
            let xh = &x_hat[l * emb.dim..(l + 1) * emb.dim];
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for k in 0..emb.n_vocab {
                let s = geometry::dot(emb.row(k), xh) + emb.biases[k];
                if s > best_score {
                    best_score = s;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// One generated sequence with its diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleOutput {
    pub tokens: Vec<usize>,
    /// Unigram entropy of the decoded sequence, in nats.
    pub terminal_entropy: f64,
    /// Posterior evaluations spent inside the loop, `n (1 + k)`.
    pub nfe_used: usize,
    /// The uncounted terminal decode forward.
    pub terminal_forwards: usize,
    #[serde(skip)]
    pub terminal_state: Option<SphereState>,
}

fn unigram_entropy(tokens: &[usize], n_vocab: usize) -> f64 {
    let mut counts = vec![0usize; n_vocab];
    for &t in tokens {
        counts[t] += 1;
    }
    let total = tokens.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

fn init_state(kind: PathKind, seq_len: usize, dim: usize, rng: &mut ChaCha8Rng) -> SphereState {
    match kind {
        PathKind::Vmf { .. } | PathKind::Geodesic => SphereState::uniform(seq_len, dim, rng),
        PathKind::Vp => SphereState::gaussian(seq_len, dim, 1.0, rng),
        PathKind::Ve { sigma_max } => SphereState::gaussian(seq_len, dim, sigma_max, rng),
    }
}

/// Full predictor-corrector loop: init from the path prior, per grid step
/// one Euler predictor then `k` Langevin correctors (each on a fresh
/// posterior at the corrected state), clue positions pinned after every
/// substep, terminal decode from one extra posterior forward.
#[allow(clippy::too_many_arguments)]
pub fn pc_sample(
    ctx: &PathContext,
    config: &SamplerConfig,
    emb: &EmbeddingTable,
    source: &dyn PosteriorSource,
    warp: &WarpSchedule,
    seq_len: usize,
    clues: Option<&ClueMask>,
    rng: &mut ChaCha8Rng,
) -> Result<SampleOutput> {
    config.validate(ctx.kind)?;
    if let Some(c) = clues {
        c.validate(seq_len, emb.n_vocab)?;
    }
    let grid = time_grid(ctx.kind, config.n_predictor, config.warp_aware, warp)?;
    let mut state = init_state(ctx.kind, seq_len, emb.dim, rng);
    if let Some(c) = clues {
        c.pin(&mut state, emb);
    }
    let mut nfe = 0usize;
    for i in 0..config.n_predictor {
        let (t0, t1) = (grid[i], grid[i + 1]);
        let post = source.eval(&state, t0)?;
        nfe += 1;
        euler_step(ctx, &mut state, &post, t0, t1, emb)?;
        if let Some(c) = clues {
            c.pin(&mut state, emb);
        }
        for _ in 0..config.k_corrector {
            let post = source.eval(&state, t1)?;
            nfe += 1;
            let eps = effective_epsilon(config, ctx.kind, t1)?;
            langevin_step(ctx, &mut state, &post, t1, eps, emb, rng, 1.0)?;
            if let Some(c) = clues {
                c.pin(&mut state, emb);
            }
        }
    }
    let terminal = source.eval(&state, *grid.last().unwrap())?;
    let mut tokens = terminal.argmax();
    if let Some(c) = clues {
        passthrough_clues(&mut tokens, c);
    }
    Ok(SampleOutput {
        terminal_entropy: unigram_entropy(&tokens, emb.n_vocab),
        tokens,
        nfe_used: nfe,
        terminal_forwards: 1,
        terminal_state: Some(state),
    })
}

/// Conditioned positions are known, not generated: their tokens are emitted
/// verbatim rather than re-decoded through the backbone.
fn passthrough_clues(tokens: &mut [usize], clues: &ClueMask) {
    for (l, token) in tokens.iter_mut().enumerate() {
        if clues.pinned[l] {
            *token = clues.values[l];
        }
    }
}

/// Euler-Maruyama SDE sampler: one stochastic drift step per grid interval,
/// drift `velocity + (sigma^2/2) score`, tangent-projected noise and
/// retraction on spherical paths. At `sigma = 0` the trajectory coincides
/// with the predictor-only ODE loop.
#[allow(clippy::too_many_arguments)]
pub fn sde_sample(
    ctx: &PathContext,
    config: &SamplerConfig,
    emb: &EmbeddingTable,
    source: &dyn PosteriorSource,
    warp: &WarpSchedule,
    seq_len: usize,
    clues: Option<&ClueMask>,
    rng: &mut ChaCha8Rng,
) -> Result<SampleOutput> {
    config.validate(ctx.kind)?;
    if config.sigma > 0.0 && !ctx.kind.has_score() {
        return Err(Error::ScoreUnavailable {
            kind: ctx.kind.name(),
        });
    }
    if let Some(c) = clues {
        c.validate(seq_len, emb.n_vocab)?;
    }
    let grid = time_grid(ctx.kind, config.n_predictor, config.warp_aware, warp)?;
    let mut state = init_state(ctx.kind, seq_len, emb.dim, rng);
    if let Some(c) = clues {
        c.pin(&mut state, emb);
    }
    let mut nfe = 0usize;
    for i in 0..config.n_predictor {
        let (t0, t1) = (grid[i], grid[i + 1]);
        let post = source.eval(&state, t0)?;
        nfe += 1;
        drift_step(ctx, &mut state, &post, t0, t1, emb, config.sigma, Some(rng))?;
        if let Some(c) = clues {
            c.pin(&mut state, emb);
        }
    }
    let terminal = source.eval(&state, *grid.last().unwrap())?;
    let mut tokens = terminal.argmax();
    if let Some(c) = clues {
        passthrough_clues(&mut tokens, c);
    }
    Ok(SampleOutput {
        terminal_entropy: unigram_entropy(&tokens, emb.n_vocab),
        tokens,
        nfe_used: nfe,
        terminal_forwards: 1,
        terminal_state: Some(state),
    })
}

/// Which loop to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerAlgorithm {
    PredictorCorrector,
    Sde,
}

/// Draw `count` sequences in parallel with one RNG stream per sequence
/// (seeded from `config.seed`, stream = sequence index), so results are
/// deterministic regardless of thread scheduling.
#[allow(clippy::too_many_arguments)]
pub fn sample_batch<S: PosteriorSource + Sync>(
    ctx: &PathContext,
    config: &SamplerConfig,
    emb: &EmbeddingTable,
    source: &S,
    warp: &WarpSchedule,
    seq_len: usize,
    clues: Option<&ClueMask>,
    algorithm: SamplerAlgorithm,
    count: usize,
) -> Result<Vec<SampleOutput>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64 + 1);
            let mut out = match algorithm {
                SamplerAlgorithm::PredictorCorrector => {
                    pc_sample(ctx, config, emb, source, warp, seq_len, clues, &mut rng)
                }
                SamplerAlgorithm::Sde => {
                    sde_sample(ctx, config, emb, source, warp, seq_len, clues, &mut rng)
                }
            }?;
            out.terminal_state = None;
            Ok(out)
        })
        .collect()
}

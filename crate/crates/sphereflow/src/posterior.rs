//! Sources of the per-position posterior `p_t(w_k | x)`.
//!
//! Three producers share the [`PosteriorMatrix`] output: the softmax decoder
//! head over tied embeddings, an exact brute-force Bayes oracle for tiny
//! instances (enumerates all `N^L` clean sequences in log space), and a
//! small two-layer backbone trained by cross entropy with fully analytic
//! gradients.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::field::SphereState;
use crate::geometry;
use crate::paths::{NormConvention, PathContext, PathKind, VP_TIME_CAP};
use crate::schedule::WarpSchedule;
use crate::{Error, Result};

/// Largest `N^L` the exact oracle will enumerate.
pub const ORACLE_SIZE_BOUND: u128 = 1_000_000;

/// Token embeddings plus decoder biases, tied between the corruption process
/// and the softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: Vec<f64>,
    pub biases: Vec<f64>,
    pub n_vocab: usize,
    pub dim: usize,
    pub convention: NormConvention,
}

impl EmbeddingTable {
    /// Random initialization: directions uniform on the sphere, scaled to the
    /// convention's norm; biases zero.
    pub fn random(
        n_vocab: usize,
        dim: usize,
        convention: NormConvention,
        rng: &mut impl Rng,
    ) -> Self {
        let mut vectors = Vec::with_capacity(n_vocab * dim);
        let scale = match convention {
            NormConvention::SqrtD => (dim as f64).sqrt(),
            _ => 1.0,
        };
        for _ in 0..n_vocab {
            let u = geometry::sample_uniform_sphere(dim, rng);
            vectors.extend(u.as_slice().iter().map(|v| v * scale));
        }
        Self {
            vectors,
            biases: vec![0.0; n_vocab],
            n_vocab,
            dim,
            convention,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, convention: NormConvention) -> Result<Self> {
        let n_vocab = rows.len();
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if n_vocab == 0 || dim < 2 {
            return Err(Error::InvalidConfig(
                "embedding table needs N >= 1, d >= 2".into(),
            ));
        }
        let mut vectors = Vec::with_capacity(n_vocab * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::InvalidConfig("ragged embedding rows".into()));
            }
            vectors.extend(r);
        }
        let mut table = Self {
            vectors,
            biases: vec![0.0; n_vocab],
            n_vocab,
            dim,
            convention,
        };
        table.renormalize()?;
        Ok(table)
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    /// Rescale every row to the convention's norm, preserving direction.
    /// A no-op under the free convention.
    pub fn renormalize(&mut self) -> Result<()> {
        let target = match self.convention {
            NormConvention::Unit => 1.0,
            NormConvention::SqrtD => (self.dim as f64).sqrt(),
            NormConvention::Free => return Ok(()),
        };
        for k in 0..self.n_vocab {
            let row = self.row_mut(k);
            let n = geometry::norm(row);
            if n < 1e-12 {
                return Err(Error::ZeroEmbedding { row: k });
            }
            let scale = target / n;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        Ok(())
    }
}

/// Row-stochastic `L x N` posterior matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    pub probs: Vec<f64>,
    pub seq_len: usize,
    pub n_vocab: usize,
}

impl PosteriorMatrix {
    pub fn row(&self, l: usize) -> &[f64] {
        &self.probs[l * self.n_vocab..(l + 1) * self.n_vocab]
    }

    /// Per-position argmax, ties broken toward the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.seq_len)
            .map(|l| {
                let row = self.row(l);
                let mut best = 0usize;
                for (k, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Mean over positions of the row entropy, in nats.
    pub fn mean_entropy(&self) -> f64 {
        let mut total = 0.0;
        for l in 0..self.seq_len {
            for &p in self.row(l) {
                if p > 0.0 {
                    total -= p * p.ln();
                }
            }
        }
        total / self.seq_len as f64
    }
}

/// `s_k = <w_k, xhat> + b_k` per position, row softmax with max subtraction.
pub fn softmax_head(emb: &EmbeddingTable, x_hat: &[f64]) -> PosteriorMatrix {
    debug_assert_eq!(x_hat.len() % emb.dim, 0);
    let seq_len = x_hat.len() / emb.dim;
    let mut probs = vec![0.0; seq_len * emb.n_vocab];
    for l in 0..seq_len {
        let xh = &x_hat[l * emb.dim..(l + 1) * emb.dim];
        let row = &mut probs[l * emb.n_vocab..(l + 1) * emb.n_vocab];
        let mut max = f64::NEG_INFINITY;
        for k in 0..emb.n_vocab {
            let s = geometry::dot(&emb.vectors[k * emb.dim..(k + 1) * emb.dim], xh) + emb.biases[k];
            row[k] = s;
            if s > max {
                max = s;
            }
        }
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    PosteriorMatrix {
        probs,
        seq_len,
        n_vocab: emb.n_vocab,
    }
}

// ---------------------------------------------------------------------------
// exact oracle

/// Data distribution over token sequences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum DataPmf {
    /// Full table over `N^L` sequences, token index of position 0 fastest.
    Explicit(Vec<f64>),
    /// Independent per-position pmfs (`L` rows of length `N`).
    Factorized(Vec<Vec<f64>>),
}

/// Explicit data distribution for oracle-sized instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleSpec {
    pub n_vocab: usize,
    pub seq_len: usize,
    pub pmf: DataPmf,
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        let size = (self.n_vocab as u128).pow(self.seq_len as u32);
        if size > ORACLE_SIZE_BOUND {
            return Err(Error::InstanceTooLarge {
                size,
                bound: ORACLE_SIZE_BOUND,
            });
        }
        match &self.pmf {
            DataPmf::Explicit(table) => {
                if table.len() as u128 != size {
                    return Err(Error::InvalidConfig("explicit pmf size mismatch".into()));
                }
                let sum: f64 = table.iter().sum();
                if (sum - 1.0).abs() > 1e-12 || table.iter().any(|&p| p < 0.0) {
                    return Err(Error::InvalidConfig(
                        "explicit pmf is not a distribution".into(),
                    ));
                }
            }
            DataPmf::Factorized(rows) => {
                if rows.len() != self.seq_len {
                    return Err(Error::InvalidConfig("factorized pmf needs L rows".into()));
                }
                for row in rows {
                    if row.len() != self.n_vocab {
                        return Err(Error::InvalidConfig("factorized pmf row length".into()));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-12 || row.iter().any(|&p| p < 0.0) {
                        return Err(Error::InvalidConfig(
                            "factorized pmf row is not a distribution".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn log_prob(&self, tokens: &[usize]) -> f64 {
        self.joint_prob(tokens).max(0.0).ln()
    }

    pub fn joint_prob(&self, tokens: &[usize]) -> f64 {
        match &self.pmf {
            DataPmf::Explicit(table) => {
                let mut idx = 0usize;
                for (l, &k) in tokens.iter().enumerate() {
                    idx += k * self.n_vocab.pow(l as u32);
                }
                table[idx]
            }
            DataPmf::Factorized(rows) => tokens
                .iter()
                .enumerate()
                .map(|(l, &k)| rows[l][k])
                .product(),
        }
    }

    /// Draw one token sequence from the pmf.
    pub fn sample_tokens(&self, rng: &mut impl Rng) -> Vec<usize> {
        match &self.pmf {
            DataPmf::Factorized(rows) => rows
                .iter()
                .map(|row| sample_categorical(row, rng))
                .collect(),
            DataPmf::Explicit(table) => {
                let flat = sample_categorical(table, rng);
                let mut idx = flat;
                (0..self.seq_len)
                    .map(|_| {
                        let k = idx % self.n_vocab;
                        idx /= self.n_vocab;
                        k
                    })
                    .collect()
            }
        }
    }
}

fn sample_categorical(pmf: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    pmf.len() - 1
}

/// Per-position log conditional density `log p_t(x^l | w_k)` up to additive
/// constants independent of the token (those cancel in the Bayes ratio).
fn conditional_loglik(kind: PathKind, x_l: &[f64], w_k: &[f64], t: f64) -> f64 {
    match kind {
        PathKind::Vmf { kappa_max } => kappa_max * t * geometry::dot(w_k, x_l),
        PathKind::Geodesic => {
            // cos(theta_t) = cos((1-t) theta_0): transporting the uniform
            // angle law along slerp gives the log ratio
            // (d-2) [log sin(theta_t/(1-t)) - log sin(theta_t)]
            // on the support theta_t <= (1-t) pi.
            let d = x_l.len() as f64;
            let t = t.min(1.0 - 1e-9);
            let theta = geometry::clamp_cos(geometry::dot(w_k, x_l)).acos();
            let theta0 = theta / (1.0 - t);
            if theta0 >= std::f64::consts::PI {
                return f64::NEG_INFINITY;
            }
            if theta < 1e-8 {
                return -(d - 2.0) * (1.0 - t).ln();
            }
            (d - 2.0) * (theta0.sin().ln() - theta.sin().ln())
        }
        PathKind::Vp => {
            let t = t.min(VP_TIME_CAP);
            let var = (1.0 - t) * (1.0 - t);
            let q: f64 = x_l
                .iter()
                .zip(w_k)
                .map(|(xi, wi)| (xi - t * wi) * (xi - t * wi))
                .sum();
            -q / (2.0 * var)
        }
        PathKind::Ve { sigma_max } => {
            let sigma = PathKind::Ve { sigma_max }.sigma(t);
            let q: f64 = x_l
                .iter()
                .zip(w_k)
                .map(|(xi, wi)| (xi - wi) * (xi - wi))
                .sum();
            -q / (2.0 * sigma * sigma)
        }
    }
}

/// Exact posterior by enumeration of all clean sequences: for every
/// `w in W^L`, weight `log p_data(w) + sum_l log p_t(x^l | w^l)`, then
/// marginalize per position with a streaming log-sum-exp.
pub fn oracle_posterior(
    spec: &OracleSpec,
    kind: PathKind,
    emb: &EmbeddingTable,
    x: &SphereState,
    t: f64,
) -> Result<PosteriorMatrix> {
    spec.validate()?;
    let n = spec.n_vocab;
    let seq_len = spec.seq_len;
    if x.seq_len != seq_len || x.dim != emb.dim || emb.n_vocab != n {
        return Err(Error::InvalidConfig("oracle shape mismatch".into()));
    }

    // loglik[l][k] depends only on (l, k); precompute once
    let mut loglik = vec![0.0; seq_len * n];
    for l in 0..seq_len {
        for k in 0..n {
            loglik[l * n + k] = conditional_loglik(kind, x.row(l), emb.row(k), t);
        }
    }

    // streaming log-sum-exp accumulators per (l, k) cell
    let mut cell_max = vec![f64::NEG_INFINITY; seq_len * n];
    let mut cell_sum = vec![0.0f64; seq_len * n];
    let mut tokens = vec![0usize; seq_len];
    loop {
        let logw = spec.log_prob(&tokens)
            + tokens
                .iter()
                .enumerate()
                .map(|(l, &k)| loglik[l * n + k])
                .sum::<f64>();
        if logw > f64::NEG_INFINITY {
            for (l, &k) in tokens.iter().enumerate() {
                let cell = l * n + k;
                if logw <= cell_max[cell] {
                    cell_sum[cell] += (logw - cell_max[cell]).exp();
                } else {
                    cell_sum[cell] = cell_sum[cell] * (cell_max[cell] - logw).exp() + 1.0;
                    cell_max[cell] = logw;
                }
            }
        }
        // odometer over W^L, position 0 fastest
        let mut pos = 0;
        while pos < seq_len {
            tokens[pos] += 1;
            if tokens[pos] < n {
                break;
            }
            tokens[pos] = 0;
            pos += 1;
        }
        if pos == seq_len {
            break;
        }
    }

    let mut probs = vec![0.0; seq_len * n];
    for l in 0..seq_len {
        let cells = &mut probs[l * n..(l + 1) * n];
        let mut row_max = f64::NEG_INFINITY;
        for k in 0..n {
            let lse = if cell_sum[l * n + k] > 0.0 {
                cell_max[l * n + k] + cell_sum[l * n + k].ln()
            } else {
                f64::NEG_INFINITY
            };
            cells[k] = lse;
            row_max = row_max.max(lse);
        }
        let mut z = 0.0;
        for c in cells.iter_mut() {
            *c = (*c - row_max).exp();
            z += *c;
        }
        for c in cells.iter_mut() {
            *c /= z;
        }
    }
    Ok(PosteriorMatrix {
        probs,
        seq_len,
        n_vocab: n,
    })
}

// ---------------------------------------------------------------------------
// tiny backbone

/// Two-layer tanh network mapping the flattened (optionally time-conditioned)
/// state to one output vector per position.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyBackbone {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub n_in: usize,
    pub hidden: usize,
    pub n_out: usize,
    pub time_conditioned: bool,
}

impl TinyBackbone {
    pub fn random(
        seq_len: usize,
        dim: usize,
        hidden: usize,
        time_conditioned: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let n_state = seq_len * dim;
        let n_in = n_state + usize::from(time_conditioned);
        let n_out = n_state;
        let scale1 = 1.0 / (n_in as f64).sqrt();
        let scale2 = 1.0 / (hidden as f64).sqrt();
        let mut normal = |scale: f64, len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    z * scale
                })
                .collect()
        };
        Self {
            w1: normal(scale1, hidden * n_in),
            b1: vec![0.0; hidden],
            w2: normal(scale2, n_out * hidden),
            b2: vec![0.0; n_out],
            n_in,
            hidden,
            n_out,
            time_conditioned,
        }
    }

    /// Deterministic forward pass; the time feature enters iff the network
    /// is time-conditioned (callers pass the normalized schedule parameter).
    pub fn forward(&self, x_input: &[f64], t_feature: f64) -> Vec<f64> {
        self.forward_cached(x_input, t_feature).1
    }

    fn forward_cached(&self, x_input: &[f64], t_feature: f64) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(
            x_input.len() + usize::from(self.time_conditioned),
            self.n_in
        );
        let mut h = vec![0.0; self.hidden];
        for j in 0..self.hidden {
            let row = &self.w1[j * self.n_in..(j + 1) * self.n_in];
            let mut acc = self.b1[j];
            for (w, x) in row.iter().zip(x_input) {
                acc += w * x;
            }
            if self.time_conditioned {
                acc += row[self.n_in - 1] * t_feature;
            }
            h[j] = acc.tanh();
        }
        let mut out = vec![0.0; self.n_out];
        for o in 0..self.n_out {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            out[o] = self.b2[o] + geometry::dot(row, &h);
        }
        (h, out)
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// Gradients of the per-sample cross-entropy through the softmax head and
/// the backbone, with the network input treated as given. `d_input` carries
/// the gradient with respect to the input block so callers can add the
/// reparameterized corruption channel where it exists (VP/VE).
#[derive(Debug, Clone)]
pub struct BackboneGradients {
    pub d_w1: Vec<f64>,
    pub d_b1: Vec<f64>,
    pub d_w2: Vec<f64>,
    pub d_b2: Vec<f64>,
    pub d_emb: Vec<f64>,
    pub d_bias: Vec<f64>,
    pub d_input: Vec<f64>,
}

impl BackboneGradients {
    pub fn zeros(net: &TinyBackbone, emb: &EmbeddingTable) -> Self {
        Self {
            d_w1: vec![0.0; net.w1.len()],
            d_b1: vec![0.0; net.b1.len()],
            d_w2: vec![0.0; net.w2.len()],
            d_b2: vec![0.0; net.b2.len()],
            d_emb: vec![0.0; emb.vectors.len()],
            d_bias: vec![0.0; emb.biases.len()],
            d_input: vec![0.0; net.n_out],
        }
    }

    pub fn clear(&mut self) {
        for buf in [
            &mut self.d_w1,
            &mut self.d_b1,
            &mut self.d_w2,
            &mut self.d_b2,
            &mut self.d_emb,
            &mut self.d_bias,
            &mut self.d_input,
        ] {
            buf.fill(0.0);
        }
    }
}

/// Forward + analytic backward of the summed-over-positions cross entropy
/// for one sample. Accumulates into `grads` and returns the loss.
pub fn backbone_backward(
    net: &TinyBackbone,
    emb: &EmbeddingTable,
    x_input: &[f64],
    t_feature: f64,
    targets: &[usize],
    grads: &mut BackboneGradients,
) -> f64 {
    let dim = emb.dim;
    let n = emb.n_vocab;
    let (h, out) = net.forward_cached(x_input, t_feature);
    let post = softmax_head(emb, &out);

    let mut loss = 0.0;
    let mut d_out = vec![0.0; net.n_out];
    for (l, &target) in targets.iter().enumerate() {
        let row = post.row(l);
        loss -= row[target].max(1e-300).ln();
        let xh = &out[l * dim..(l + 1) * dim];
        for k in 0..n {
            let delta = row[k] - f64::from(u8::from(k == target));
            grads.d_bias[k] += delta;
            let wk = emb.row(k);
            for i in 0..dim {
                d_out[l * dim + i] += delta * wk[i];
                grads.d_emb[k * dim + i] += delta * xh[i];
            }
        }
    }

    // through the output layer
    let mut d_h = vec![0.0; net.hidden];
    for o in 0..net.n_out {
        grads.d_b2[o] += d_out[o];
        let row = &net.w2[o * net.hidden..(o + 1) * net.hidden];
        for j in 0..net.hidden {
            grads.d_w2[o * net.hidden + j] += d_out[o] * h[j];
            d_h[j] += d_out[o] * row[j];
        }
    }
    // through tanh and the input layer
    let n_state = x_input.len();
    for j in 0..net.hidden {
        let da = d_h[j] * (1.0 - h[j] * h[j]);
        grads.d_b1[j] += da;
        let row_off = j * net.n_in;
        for (i, x) in x_input.iter().enumerate() {
            grads.d_w1[row_off + i] += da * x;
        }
        if net.time_conditioned {
            grads.d_w1[row_off + net.n_in - 1] += da * t_feature;
        }
        for i in 0..n_state {
            grads.d_input[i] += da * net.w1[row_off + i];
        }
    }
    loss
}

// ---------------------------------------------------------------------------
// posterior sources

/// Anything that can answer "posterior at this state and time".
pub trait PosteriorSource {
    fn eval(&self, x: &SphereState, t: f64) -> Result<PosteriorMatrix>;
}

/// Exact enumerating oracle.
pub struct OraclePosteriorSource<'a> {
    pub spec: &'a OracleSpec,
    pub kind: PathKind,
    pub emb: &'a EmbeddingTable,
}

impl PosteriorSource for OraclePosteriorSource<'_> {
    fn eval(&self, x: &SphereState, t: f64) -> Result<PosteriorMatrix> {
        oracle_posterior(self.spec, self.kind, self.emb, x, t)
    }
}

/// Trained-model source: preconditions the state, feeds the normalized
/// schedule parameter when time-conditioned, runs the backbone, applies the
/// softmax head.
pub struct ModelPosteriorSource<'a> {
    pub net: &'a TinyBackbone,
    pub emb: &'a EmbeddingTable,
    pub ctx: PathContext<'a>,
}

impl ModelPosteriorSource<'_> {
    pub fn backbone_output(&self, x: &SphereState, t: f64) -> Result<Vec<f64>> {
        let input = self.ctx.precondition_input(&x.positions, t);
        let t_feature = if self.net.time_conditioned {
            self.ctx.kind.progress(t)?
        } else {
            0.0
        };
        Ok(self.net.forward(&input, t_feature))
    }
}

impl PosteriorSource for ModelPosteriorSource<'_> {
    fn eval(&self, x: &SphereState, t: f64) -> Result<PosteriorMatrix> {
        Ok(softmax_head(self.emb, &self.backbone_output(x, t)?))
    }
}

// ---------------------------------------------------------------------------
// checkpoint format: JSON header line, raw little-endian f64 blobs in the
// declared order (embeddings, biases, backbone layers), then the warp record
// as one JSON line.

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    n_vocab: usize,
    seq_len: usize,
    dim: usize,
    path_kind: String,
    kappa_max: Option<f64>,
    sigma_max: Option<f64>,
    time_conditioned: bool,
    hidden: usize,
    norm_convention: NormConvention,
}

/// Everything needed to restore a trained posterior model.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub emb: EmbeddingTable,
    pub net: TinyBackbone,
    pub warp: WarpSchedule,
    pub kind: PathKind,
    pub seq_len: usize,
}

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let (kappa_max, sigma_max) = match self.kind {
            PathKind::Vmf { kappa_max } => (Some(kappa_max), None),
            PathKind::Ve { sigma_max } => (None, Some(sigma_max)),
            _ => (None, None),
        };
        let header = CheckpointHeader {
            schema_version: 1,
            n_vocab: self.emb.n_vocab,
            seq_len: self.seq_len,
            dim: self.emb.dim,
            path_kind: self.kind.name().to_string(),
            kappa_max,
            sigma_max,
            time_conditioned: self.net.time_conditioned,
            hidden: self.net.hidden,
            norm_convention: self.emb.convention,
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        for blob in [
            &self.emb.vectors,
            &self.emb.biases,
            &self.net.w1,
            &self.net.b1,
            &self.net.w2,
            &self.net.b2,
        ] {
            for v in blob.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        serde_json::to_writer(&mut w, &self.warp).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(e.to_string()))?;
        if header.schema_version != 1 {
            return Err(Error::Format("unsupported checkpoint schema".into()));
        }
        let kind = match header.path_kind.as_str() {
            "vmf" => PathKind::Vmf {
                kappa_max: header
                    .kappa_max
                    .ok_or_else(|| Error::Format("vmf checkpoint without kappa_max".into()))?,
            },
            "geodesic" => PathKind::Geodesic,
            "vp" => PathKind::Vp,
            "ve" => PathKind::Ve {
                sigma_max: header
                    .sigma_max
                    .ok_or_else(|| Error::Format("ve checkpoint without sigma_max".into()))?,
            },
            other => return Err(Error::Format(format!("unknown path kind '{}'", other))),
        };
        let n_state = header.seq_len * header.dim;
        let n_in = n_state + usize::from(header.time_conditioned);
        let counts = [
            header.n_vocab * header.dim,
            header.n_vocab,
            header.hidden * n_in,
            header.hidden,
            n_state * header.hidden,
            n_state,
        ];
        let total: usize = counts.iter().sum();
        let mut bytes = vec![0u8; total * 8];
        r.read_exact(&mut bytes)?;
        let mut vals = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |count: usize| -> Vec<f64> { vals.by_ref().take(count).collect() };
        let vectors = take(counts[0]);
        let biases = take(counts[1]);
        let w1 = take(counts[2]);
        let b1 = take(counts[3]);
        let w2 = take(counts[4]);
        let b2 = take(counts[5]);
        let mut warp_line = String::new();
        r.read_line(&mut warp_line)?;
        let warp: WarpSchedule =
            serde_json::from_str(warp_line.trim_end()).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            emb: EmbeddingTable {
                vectors,
                biases,
                n_vocab: header.n_vocab,
                dim: header.dim,
                convention: header.norm_convention,
            },
            net: TinyBackbone {
                w1,
                b1,
                w2,
                b2,
                n_in,
                hidden: header.hidden,
                n_out: n_state,
                time_conditioned: header.time_conditioned,
            },
            warp,
            kind,
            seq_len: header.seq_len,
        })
    }
}

//! Cross-entropy training of the tiny posterior model.
//!
//! Per step: draw `t` from the learned warp by inverse transform, draw clean
//! sequences from the task, corrupt per position along the chosen path,
//! forward through the (preconditioned, optionally time-conditioned)
//! backbone and softmax head, analytic backward, SGD-with-momentum update,
//! embedding renormalization, and one warp fit step on the per-sample
//! losses. Everything runs off one sequential RNG stream, so a seed pins the
//! whole loss trajectory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::field::SphereState;
use crate::paths::{PathContext, PathKind};
use crate::posterior::{
    backbone_backward, softmax_head, BackboneGradients, EmbeddingTable, ModelCheckpoint,
    OracleSpec, PosteriorSource, TinyBackbone,
};
use crate::sampler::ClueMask;
use crate::schedule::WarpSchedule;
use crate::sudoku::{self, MiniSudokuTask};
use crate::{Error, Result};

/// Training hyperparameters. Desk-scale defaults; the learning rate may be
/// zero (parameters frozen, warp still fits).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub warp_lr: f64,
    pub warp_bins: usize,
    pub ema_decay: Option<f64>,
    pub time_conditioned: bool,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 256,
            learning_rate: 1e-2,
            momentum: 0.9,
            warp_lr: 1e-2,
            warp_bins: 100,
            ema_decay: None,
            time_conditioned: true,
            hidden: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "steps and batch_size must be >= 1".into(),
            ));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::InvalidConfig("ema_decay must be in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// What the trainer draws clean sequences from.
#[derive(Debug, Clone)]
pub enum TrainTask {
    Synthetic(OracleSpec),
    Sudoku(MiniSudokuTask),
}

impl TrainTask {
    pub fn n_vocab(&self) -> usize {
        match self {
            TrainTask::Synthetic(s) => s.n_vocab,
            TrainTask::Sudoku(_) => sudoku::VOCAB,
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            TrainTask::Synthetic(s) => s.seq_len,
            TrainTask::Sudoku(_) => sudoku::CELLS,
        }
    }

    /// One clean sequence plus its clue mask where the task has one.
    fn draw(&self, rng: &mut ChaCha8Rng) -> (Vec<usize>, Option<ClueMask>) {
        match self {
            TrainTask::Synthetic(s) => (s.sample_tokens(rng), None),
            TrainTask::Sudoku(task) => {
                let idx = rng.random_range(0..task.boards.len());
                let board = task.boards[idx].clone();
                let mask = sudoku::random_clue_mask(task.clue_fraction, &board, rng);
                (board, Some(mask))
            }
        }
    }
}

/// i.i.d. dataset from a declared pmf, with the pmf echoed for oracle and
/// total-variation evaluation.
pub fn gen_synthetic_task(
    spec: &OracleSpec,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<usize>>, OracleSpec)> {
    spec.validate()?;
    let data = (0..count).map(|_| spec.sample_tokens(rng)).collect();
    Ok((data, spec.clone()))
}

/// `avg <- decay * avg + (1 - decay) * current`, elementwise.
pub fn ema_update(avg: &mut [f64], current: &[f64], decay: f64) {
    debug_assert_eq!(avg.len(), current.len());
    for (a, c) in avg.iter_mut().zip(current) {
        *a = decay * *a + (1.0 - decay) * c;
    }
}

/// Cross entropy of a posterior source on a fixed batch: the scalar loss is
/// the batch mean of per-position sums; the returned per-sample values are
/// position means (the warp's regression target).
pub fn ce_loss(
    source: &dyn PosteriorSource,
    batch: &[(Vec<usize>, SphereState, f64)],
) -> Result<(f64, Vec<f64>)> {
    assert!(!batch.is_empty(), "ce_loss needs a nonempty batch");
    let mut total = 0.0;
    let mut per_sample = Vec::with_capacity(batch.len());
    for (tokens, state, t) in batch {
        let post = source.eval(state, *t)?;
        let mut sum = 0.0;
        for (l, &k) in tokens.iter().enumerate() {
            sum -= post.row(l)[k].max(1e-300).ln();
        }
        total += sum;
        per_sample.push(sum / tokens.len() as f64);
    }
    Ok((total / batch.len() as f64, per_sample))
}

/// Mutable training state: parameters, momentum buffers, warp, optional EMA
/// shadow, and the RNG stream.
pub struct Trainer {
    pub emb: EmbeddingTable,
    pub net: TinyBackbone,
    pub warp: WarpSchedule,
    pub ema: Option<(EmbeddingTable, TinyBackbone)>,
    mom: BackboneGradients,
    grads: BackboneGradients,
    rng: ChaCha8Rng,
    pub config: TrainConfig,
    pub kind: PathKind,
    seq_len: usize,
}

/// Per-step scalars exported for loss curves.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub warp_total: f64,
}

impl Trainer {
    /// Fresh trainer with explicit embedding dimension.
    pub fn with_dim(
        config: &TrainConfig,
        task: &TrainTask,
        kind: PathKind,
        dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let emb = EmbeddingTable::random(task.n_vocab(), dim, kind.norm_convention(), &mut rng);
        let net = TinyBackbone::random(
            task.seq_len(),
            dim,
            config.hidden,
            config.time_conditioned,
            &mut rng,
        );
        let warp = WarpSchedule::identity(config.warp_bins);
        let mom = BackboneGradients::zeros(&net, &emb);
        let grads = BackboneGradients::zeros(&net, &emb);
        let ema = config.ema_decay.map(|_| (emb.clone(), net.clone()));
        Ok(Self {
            emb,
            net,
            warp,
            ema,
            mom,
            grads,
            rng,
            config: config.clone(),
            kind,
            seq_len: task.seq_len(),
        })
    }

    /// Normalized schedule parameter fed to time-conditioned backbones;
    /// plain `t` for the geodesic path (its progress variable is undefined).
    pub fn time_feature(kind: PathKind, t: f64) -> f64 {
        kind.progress(t).unwrap_or(t)
    }

    /// One optimizer step; errors with [`Error::NonFiniteLoss`] on a
    /// non-finite batch loss.
    pub fn step(
        &mut self,
        ctx: &PathContext,
        task: &TrainTask,
        step_idx: usize,
    ) -> Result<StepMetrics> {
        let batch = self.config.batch_size;
        let dim = self.emb.dim;
        let seq_len = self.seq_len;
        self.grads.clear();
        let mut warp_batch = Vec::with_capacity(batch);
        let mut total_loss = 0.0;

        for _ in 0..batch {
            let u: f64 = self.rng.random();
            let t = self.warp.inverse(u);
            let (tokens, clues) = task.draw(&mut self.rng);
            let mut positions = vec![0.0; seq_len * dim];
            for (l, &k) in tokens.iter().enumerate() {
                let pinned = clues.as_ref().map(|c| c.pinned[l]).unwrap_or(false);
                let row = if pinned {
                    self.emb.row(k).to_vec()
                } else {
                    self.ctx_corrupt(ctx, k, t)?
                };
                positions[l * dim..(l + 1) * dim].copy_from_slice(&row);
            }
            let input = ctx.precondition_input(&positions, t);
            let t_feature = if self.net.time_conditioned {
                Self::time_feature(self.kind, t)
            } else {
                0.0
            };
            self.grads.d_input.fill(0.0);
            let loss = backbone_backward(
                &self.net,
                &self.emb,
                &input,
                t_feature,
                &tokens,
                &mut self.grads,
            );
            // reparameterized corruption channel into the embeddings (the
            // table-based vMF draw and the slerp draw are not
            // differentiable in w; their corruption gradient is omitted)
            let factor = match self.kind {
                PathKind::Vp => t,
                PathKind::Ve { sigma_max } => {
                    let sigma = PathKind::Ve { sigma_max }.sigma(t);
                    1.0 / (sigma * sigma + 1.0).sqrt()
                }
                _ => 0.0,
            };
            if factor != 0.0 {
                for (l, &k) in tokens.iter().enumerate() {
                    let pinned = clues.as_ref().map(|c| c.pinned[l]).unwrap_or(false);
                    if pinned {
                        continue;
                    }
                    for i in 0..dim {
                        self.grads.d_emb[k * dim + i] += factor * self.grads.d_input[l * dim + i];
                    }
                }
            }
            total_loss += loss;
            warp_batch.push((t, loss / seq_len as f64));
        }

        let mean_loss = total_loss / batch as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step_idx });
        }

        if self.config.learning_rate > 0.0 {
            let inv_batch = 1.0 / batch as f64;
            let lr = self.config.learning_rate;
            let beta = self.config.momentum;
            update(
                &mut self.net.w1,
                &mut self.mom.d_w1,
                &self.grads.d_w1,
                beta,
                lr,
                inv_batch,
            );
            update(
                &mut self.net.b1,
                &mut self.mom.d_b1,
                &self.grads.d_b1,
                beta,
                lr,
                inv_batch,
            );
            update(
                &mut self.net.w2,
                &mut self.mom.d_w2,
                &self.grads.d_w2,
                beta,
                lr,
                inv_batch,
            );
            update(
                &mut self.net.b2,
                &mut self.mom.d_b2,
                &self.grads.d_b2,
                beta,
                lr,
                inv_batch,
            );
            update(
                &mut self.emb.vectors,
                &mut self.mom.d_emb,
                &self.grads.d_emb,
                beta,
                lr,
                inv_batch,
            );
            update(
                &mut self.emb.biases,
                &mut self.mom.d_bias,
                &self.grads.d_bias,
                beta,
                lr,
                inv_batch,
            );
            self.emb.renormalize()?;
        }

        self.warp.fit_step(&warp_batch, self.config.warp_lr);

        if let Some(decay) = self.config.ema_decay {
            let (ema_emb, ema_net) = self.ema.as_mut().expect("ema buffers exist");
            ema_update(&mut ema_emb.vectors, &self.emb.vectors, decay);
            ema_update(&mut ema_emb.biases, &self.emb.biases, decay);
            ema_update(&mut ema_net.w1, &self.net.w1, decay);
            ema_update(&mut ema_net.b1, &self.net.b1, decay);
            ema_update(&mut ema_net.w2, &self.net.w2, decay);
            ema_update(&mut ema_net.b2, &self.net.b2, decay);
        }

        Ok(StepMetrics {
            step: step_idx,
            loss: mean_loss,
            warp_total: self.warp.raw_total(),
        })
    }

    fn ctx_corrupt(&mut self, ctx: &PathContext, token: usize, t: f64) -> Result<Vec<f64>> {
        let sample = ctx.corrupt(self.emb.row(token), t, &mut self.rng)?;
        Ok(sample.x_t)
    }

    /// Checkpoint of the sampling-time weights (EMA shadow when enabled).
    pub fn checkpoint(&self) -> ModelCheckpoint {
        let (emb, net) = match &self.ema {
            Some((e, n)) => (e.clone(), n.clone()),
            None => (self.emb.clone(), self.net.clone()),
        };
        ModelCheckpoint {
            emb,
            net,
            warp: self.warp.clone(),
            kind: self.kind,
            seq_len: self.seq_len,
        }
    }

    /// Posterior of the current (non-EMA) weights on a state.
    pub fn posterior(
        &self,
        ctx: &PathContext,
        x: &SphereState,
        t: f64,
    ) -> Result<crate::posterior::PosteriorMatrix> {
        let input = ctx.precondition_input(&x.positions, t);
        let t_feature = if self.net.time_conditioned {
            Self::time_feature(self.kind, t)
        } else {
            0.0
        };
        Ok(softmax_head(
            &self.emb,
            &self.net.forward(&input, t_feature),
        ))
    }
}

fn update(params: &mut [f64], momentum: &mut [f64], grads: &[f64], beta: f64, lr: f64, scale: f64) {
    for ((p, m), g) in params.iter_mut().zip(momentum.iter_mut()).zip(grads) {
        *m = beta * *m + g * scale;
        *p -= lr * *m;
    }
}

/// Run the full loop; returns the trainer and the loss curve.
pub fn train(
    config: &TrainConfig,
    task: &TrainTask,
    ctx: &PathContext,
    dim: usize,
) -> Result<(Trainer, Vec<StepMetrics>)> {
    let mut trainer = Trainer::with_dim(config, task, ctx.kind, dim)?;
    let mut curve = Vec::with_capacity(config.steps);
    for step_idx in 0..config.steps {
        curve.push(trainer.step(ctx, task, step_idx)?);
    }
    Ok((trainer, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::{DataPmf, OraclePosteriorSource};
    use crate::vmf::{KernelConfig, RadialCdfTable, VelocityTable};

    fn tiny_spec() -> OracleSpec {
        OracleSpec {
            n_vocab: 3,
            seq_len: 2,
            pmf: DataPmf::Factorized(vec![vec![0.5, 0.3, 0.2], vec![0.2, 0.3, 0.5]]),
        }
    }

    struct Tables {
        vel: VelocityTable,
        cdf: RadialCdfTable,
    }

    fn tables(d: usize, kappa_max: f64) -> Tables {
        let mut cfg = KernelConfig::new(d, kappa_max);
        cfg.n_kappa = 128;
        Tables {
            vel: VelocityTable::build(&cfg).unwrap(),
            cdf: RadialCdfTable::build(&cfg).unwrap(),
        }
    }

    #[test]
    fn ce_loss_extremes_and_oracle_floor() {
        let tb = tables(3, 50.0);
        let ctx = PathContext::vmf(50.0, &tb.vel, &tb.cdf);
        let spec = tiny_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = EmbeddingTable::random(3, 3, crate::paths::NormConvention::Unit, &mut rng);

        // build a batch of corrupted states
        let mut batch = Vec::new();
        for i in 0..512 {
            let t = (i % 64) as f64 / 63.0;
            let tokens = spec.sample_tokens(&mut rng);
            let mut positions = vec![0.0; 6];
            for (l, &k) in tokens.iter().enumerate() {
                let s = ctx.corrupt(emb.row(k), t, &mut rng).unwrap();
                positions[l * 3..(l + 1) * 3].copy_from_slice(&s.x_t);
            }
            batch.push((
                tokens,
                SphereState {
                    positions,
                    seq_len: 2,
                    dim: 3,
                },
                t,
            ));
        }
        let oracle = OraclePosteriorSource {
            spec: &spec,
            kind: ctx.kind,
            emb: &emb,
        };
        let (oracle_ce, per_sample) = ce_loss(&oracle, &batch).unwrap();
        assert_eq!(per_sample.len(), 512);
        assert!(oracle_ce > 0.0 && oracle_ce < 2.0 * 3.0f64.ln());

        // a random untrained model cannot beat the exact posterior
        let net = TinyBackbone::random(2, 3, 16, true, &mut rng);
        struct ModelSource<'a> {
            net: &'a TinyBackbone,
            emb: &'a EmbeddingTable,
            ctx: PathContext<'a>,
        }
        impl PosteriorSource for ModelSource<'_> {
            fn eval(
                &self,
                x: &SphereState,
                t: f64,
            ) -> crate::Result<crate::posterior::PosteriorMatrix> {
                let input = self.ctx.precondition_input(&x.positions, t);
                Ok(softmax_head(self.emb, &self.net.forward(&input, t)))
            }
        }
        let model = ModelSource {
            net: &net,
            emb: &emb,
            ctx,
        };
        let (model_ce, _) = ce_loss(&model, &batch).unwrap();
        assert!(
            model_ce >= oracle_ce - 1e-6,
            "{} vs {}",
            model_ce,
            oracle_ce
        );
    }

    #[test]
    fn loss_decreases_on_tiny_task() {
        let tb = tables(3, 50.0);
        let ctx = PathContext::vmf(50.0, &tb.vel, &tb.cdf);
        let task = TrainTask::Synthetic(tiny_spec());
        let config = TrainConfig {
            steps: 200,
            batch_size: 64,
            seed: 5,
            ..TrainConfig::default()
        };
        let (_, curve) = train(&config, &task, &ctx, 3).unwrap();
        let first: f64 = curve[..20].iter().map(|m| m.loss).sum::<f64>() / 20.0;
        let last: f64 = curve[curve.len() - 20..]
            .iter()
            .map(|m| m.loss)
            .sum::<f64>()
            / 20.0;
        assert!(last < first - 0.1, "loss {} -> {}", first, last);
    }

    #[test]
    fn embeddings_stay_normalized_and_zero_lr_freezes_params() {
        let tb = tables(3, 30.0);
        let ctx = PathContext::vmf(30.0, &tb.vel, &tb.cdf);
        let task = TrainTask::Synthetic(tiny_spec());
        let mut config = TrainConfig {
            steps: 5,
            batch_size: 32,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::with_dim(&config, &task, ctx.kind, 3).unwrap();
        for s in 0..5 {
            trainer.step(&ctx, &task, s).unwrap();
            for k in 0..3 {
                let n = crate::geometry::norm(trainer.emb.row(k));
                assert!((n - 1.0).abs() < 1e-10);
            }
        }

        config.learning_rate = 0.0;
        let mut frozen = Trainer::with_dim(&config, &task, ctx.kind, 3).unwrap();
        let emb_before = frozen.emb.clone();
        let net_before = frozen.net.clone();
        let warp_before = frozen.warp.clone();
        for s in 0..5 {
            frozen.step(&ctx, &task, s).unwrap();
        }
        assert_eq!(frozen.emb, emb_before);
        assert_eq!(frozen.net, net_before);
        assert_ne!(
            frozen.warp.logits_out, warp_before.logits_out,
            "warp must still update"
        );
    }

    #[test]
    fn training_is_reproducible() {
        let tb = tables(3, 30.0);
        let ctx = PathContext::vmf(30.0, &tb.vel, &tb.cdf);
        let task = TrainTask::Synthetic(tiny_spec());
        let config = TrainConfig {
            steps: 30,
            batch_size: 16,
            seed: 123,
            ..TrainConfig::default()
        };
        let (_, a) = train(&config, &task, &ctx, 3).unwrap();
        let (_, b) = train(&config, &task, &ctx, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
    }

    /// After training, the warp must remain a valid CDF with a finite
    /// positive scale. The regression's scale property itself (raw total
    /// converging to the target level) is exercised on a constant loss
    /// curve in the schedule module; on this task the per-sample CE
    /// decreases in t, which a monotone curve pinned at zero cannot track
    /// pointwise, so no scale identity is asserted here.
    #[test]
    fn trained_warp_stays_a_valid_cdf() {
        let tb = tables(3, 50.0);
        let ctx = PathContext::vmf(50.0, &tb.vel, &tb.cdf);
        let task = TrainTask::Synthetic(tiny_spec());
        let config = TrainConfig {
            steps: 3000,
            batch_size: 128,
            seed: 21,
            ..TrainConfig::default()
        };
        let (trainer, _) = train(&config, &task, &ctx, 3).unwrap();
        let warp = &trainer.warp;
        assert_eq!(warp.cdf(0.0), 0.0);
        assert_eq!(warp.cdf(1.0), 1.0);
        let mut prev = 0.0;
        for i in 1..=200 {
            let f = warp.cdf(i as f64 / 200.0);
            assert!(f >= prev - 1e-15);
            prev = f;
        }
        let total = warp.raw_total();
        assert!(total.is_finite() && total > 0.0, "raw total {}", total);
        // roundtrip stays exact on the trained warp
        for u in [0.1, 0.33, 0.5, 0.77, 0.99] {
            assert!((warp.cdf(warp.inverse(u)) - u).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_semantics() {
        let mut avg = vec![1.0, 2.0];
        ema_update(&mut avg, &[3.0, 4.0], 0.0);
        assert_eq!(avg, vec![3.0, 4.0]);
        let mut avg = vec![1.0, 1.0];
        for _ in 0..10 {
            ema_update(&mut avg, &[2.0, 2.0], 0.5);
        }
        for v in &avg {
            assert!((v - 2.0).abs() < 2e-3);
        }
        // fixed point
        let mut avg = vec![5.0];
        ema_update(&mut avg, &[5.0], 0.999);
        assert_eq!(avg, vec![5.0]);
    }

    #[test]
    fn synthetic_dataset_statistics() {
        let spec = tiny_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (data, echo) = gen_synthetic_task(&spec, 100_000, &mut rng).unwrap();
        assert_eq!(echo.seq_len, 2);
        let mut counts = [[0usize; 3]; 2];
        for seq in &data {
            for (l, &k) in seq.iter().enumerate() {
                counts[l][k] += 1;
            }
        }
        let expect = [[0.5, 0.3, 0.2], [0.2, 0.3, 0.5]];
        for l in 0..2 {
            for k in 0..3 {
                let p = counts[l][k] as f64 / data.len() as f64;
                let se = (expect[l][k] * (1.0 - expect[l][k]) / data.len() as f64).sqrt();
                assert!((p - expect[l][k]).abs() < 3.0 * se + 1e-9);
            }
        }

        // point mass and correlated support
        let point = OracleSpec {
            n_vocab: 2,
            seq_len: 2,
            pmf: DataPmf::Explicit(vec![0.0, 0.0, 1.0, 0.0]),
        };
        let (data, _) = gen_synthetic_task(&point, 50, &mut rng).unwrap();
        for seq in &data {
            assert_eq!(seq, &vec![0, 1]);
        }
        let ab = OracleSpec {
            n_vocab: 2,
            seq_len: 2,
            pmf: DataPmf::Explicit(vec![0.0, 0.5, 0.5, 0.0]),
        };
        let (data, _) = gen_synthetic_task(&ab, 2000, &mut rng).unwrap();
        for seq in &data {
            assert_ne!(seq[0], seq[1], "AA/BB must never appear");
        }
    }
}

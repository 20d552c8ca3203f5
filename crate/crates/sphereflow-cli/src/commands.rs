//! Command implementations. Each command resolves its configuration
//! (flags > config file > defaults), executes against a `Resolved*` config
//! struct, and records that struct in the run manifest so `replay` can
//! re-execute it verbatim.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use sphereflow::diag;
use sphereflow::paths::{NormConvention, PathContext, PathKind};
use sphereflow::posterior::{
    DataPmf, EmbeddingTable, ModelCheckpoint, ModelPosteriorSource, OraclePosteriorSource,
    OracleSpec, PosteriorSource,
};
use sphereflow::sampler::{
    pc_sample, sample_batch, ClueMask, SampleOutput, SamplerAlgorithm, SamplerConfig,
};
use sphereflow::schedule::WarpSchedule;
use sphereflow::sudoku;
use sphereflow::train::{train, TrainConfig, TrainTask};
use sphereflow::vmf::{KernelConfig, RadialCdfTable, VelocityTable};

use crate::manifest::RunManifest;

/// Configuration-class error (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_file(path: &Option<PathBuf>) -> Result<serde_json::Value> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(serde_json::Value::Object(Default::default())),
    }
}

fn resolve<T: serde::de::DeserializeOwned>(
    flag: Option<T>,
    file: &serde_json::Value,
    key: &str,
    default: T,
) -> T {
    if let Some(v) = flag {
        return v;
    }
    file.get(key)
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or(default)
}

/// Built-in tiny synthetic task: the oracle-sized reference instance.
fn tiny_spec() -> OracleSpec {
    OracleSpec {
        n_vocab: 3,
        seq_len: 2,
        pmf: DataPmf::Factorized(vec![vec![0.5, 0.3, 0.2], vec![0.2, 0.3, 0.5]]),
    }
}

/// Fixed well-separated S^2 embeddings for the oracle source.
fn planar_embeddings() -> EmbeddingTable {
    let r3 = 3.0f64.sqrt() / 2.0;
    EmbeddingTable::from_rows(
        vec![
            vec![1.0, 0.0, 0.0],
            vec![-0.5, r3, 0.0],
            vec![-0.5, -r3, 0.0],
        ],
        NormConvention::Unit,
    )
    .expect("static embeddings are valid")
}

/// vMF tables for runtime use: loaded from `SPHEREFLOW_TABLE_DIR` when a
/// matching pair exists there, built in memory otherwise.
fn tables_for(d: usize, kappa_max: f64) -> Result<(VelocityTable, RadialCdfTable)> {
    if let Ok(dir) = std::env::var("SPHEREFLOW_TABLE_DIR") {
        let dir = PathBuf::from(dir);
        let vel = VelocityTable::load(&dir.join("velocity.tbl"));
        let cdf = RadialCdfTable::load(&dir.join("radial_cdf.tbl"));
        if let (Ok(vel), Ok(cdf)) = (vel, cdf) {
            if vel.config.d == d
                && vel.config.kappa_max == kappa_max
                && cdf.config.d == d
                && cdf.config.kappa_max == kappa_max
            {
                return Ok((vel, cdf));
            }
        }
    }
    let mut cfg = KernelConfig::new(d, kappa_max);
    cfg.n_kappa = 128;
    Ok((VelocityTable::build(&cfg)?, RadialCdfTable::build(&cfg)?))
}

fn parse_path_kind(name: &str, kappa_max: f64, sigma_max: f64) -> Result<PathKind> {
    Ok(match name {
        "vmf" => PathKind::Vmf { kappa_max },
        "geodesic" => PathKind::Geodesic,
        "vp" => PathKind::Vp,
        "ve" => PathKind::Ve { sigma_max },
        other => bail!(ConfigError(format!("unknown path kind '{}'", other))),
    })
}

fn finish_manifest(
    mut manifest: RunManifest,
    out: &Path,
    outputs: Vec<PathBuf>,
    started: Instant,
) -> Result<()> {
    manifest.outputs = outputs;
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// tables

pub mod tables {
    use super::*;

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ResolvedTables {
        pub d: usize,
        pub kappa_max: f64,
        pub n_mu: usize,
        pub n_kappa: usize,
    }

    pub fn run(args: crate::TablesArgs) -> Result<()> {
        let cfg = ResolvedTables {
            d: args.d,
            kappa_max: args.kappa_max,
            n_mu: args.n_mu,
            n_kappa: args.n_kappa,
        };
        execute(&cfg, &args.out)
    }

    pub fn execute(cfg: &ResolvedTables, out: &Path) -> Result<()> {
        let started = Instant::now();
        std::fs::create_dir_all(out)?;
        let mut kernel = KernelConfig::new(cfg.d, cfg.kappa_max);
        kernel.n_mu = cfg.n_mu;
        kernel.n_kappa = cfg.n_kappa;
        let vel = VelocityTable::build(&kernel)?;
        let cdf = RadialCdfTable::build(&kernel)?;
        let vel_path = out.join("velocity.tbl");
        let cdf_path = out.join("radial_cdf.tbl");
        vel.save(&vel_path)?;
        cdf.save(&cdf_path)?;

        // build-time residual summary on a few stored columns
        let h = 2.0 / (cfg.n_mu - 1) as f64;
        println!(
            "built {}x{} tables for d={} kappa_max={}",
            cfg.n_mu, cfg.n_kappa, cfg.d, cfg.kappa_max
        );
        for frac in [0.01, 0.1, 1.0] {
            let j = (((cfg.n_kappa - 1) as f64) * frac).round() as usize;
            let kappa = cfg.kappa_max * j as f64 / (cfg.n_kappa - 1) as f64;
            let a = vel.bessel_at(j);
            let mut worst = 0.0f64;
            for i in 2..cfg.n_mu - 2 {
                let s = -1.0 + h * i as f64;
                if s.abs() > 0.99 {
                    continue;
                }
                let dv = (-vel.at(i + 2, j) + 8.0 * vel.at(i + 1, j) - 8.0 * vel.at(i - 1, j)
                    + vel.at(i - 2, j))
                    / (12.0 * h);
                let r = (1.0 - s * s) * dv
                    + (kappa * (1.0 - s * s) - (cfg.d as f64 - 1.0) * s) * vel.at(i, j)
                    - (a - s);
                worst = worst.max(r.abs());
            }
            println!("  residual at kappa={:.4}: {:.3e}", kappa, worst);
        }

        let manifest = RunManifest::new("tables", serde_json::to_value(cfg)?, 0);
        finish_manifest(manifest, out, vec![vel_path, cdf_path], started)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// selfcheck

pub mod selfcheck {
    use super::*;

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ResolvedSelfcheck {
        pub suite: String,
        pub seed: u64,
        pub inject_psi_sign_flip: bool,
    }

    pub fn run(args: crate::SelfcheckArgs) -> Result<()> {
        let cfg = ResolvedSelfcheck {
            suite: args.suite,
            seed: args.seed,
            inject_psi_sign_flip: args.inject_psi_sign_flip,
        };
        execute(&cfg, args.out.as_deref())
    }

    pub fn execute(cfg: &ResolvedSelfcheck, out: Option<&Path>) -> Result<()> {
        let started = Instant::now();
        let mut reports = Vec::new();
        let want = |name: &str| cfg.suite == "all" || cfg.suite == name;
        if !["all", "psi", "transport", "scores", "signal", "tv"].contains(&cfg.suite.as_str()) {
            bail!(ConfigError(format!("unknown suite '{}'", cfg.suite)));
        }

        if want("psi") {
            let rep = if cfg.inject_psi_sign_flip {
                diag::check_psi_ode_corrupted(&[3, 8, 12], &[0.5, 5.0, 50.0])?
            } else {
                diag::check_psi_ode(&[3, 8, 12], &[0.5, 5.0, 50.0])?
            };
            reports.push(rep);
        }
        if want("transport") {
            let cfg20 = KernelConfig::new(3, 20.0);
            let vel = VelocityTable::build(&cfg20)?;
            let cdf = RadialCdfTable::build(&cfg20)?;
            reports.push(diag::check_flux_transport(
                3, 20.0, 100_000, 1000, &vel, &cdf, cfg.seed,
            ));
            reports.push(diag::check_sphere_continuity(
                100_000,
                2000,
                20.0,
                &vel,
                &cdf,
                cfg.seed + 1,
            ));
        }
        if want("scores") {
            reports.push(diag::check_scores(cfg.seed + 2)?);
        }
        if want("signal") {
            let mut c8 = KernelConfig::new(8, 10.0);
            c8.n_kappa = 128;
            let cdf8 = RadialCdfTable::build(&c8)?;
            let mut c10 = KernelConfig::new(10, 10.0);
            c10.n_kappa = 128;
            let cdf10 = RadialCdfTable::build(&c10)?;
            reports.push(diag::check_signal_curves(&cdf8, &cdf10, cfg.seed + 3)?);
        }
        if want("tv") {
            let (vel, cdf) = tables_for(3, 50.0)?;
            let ctx = PathContext::vmf(50.0, &vel, &cdf);
            let spec = tiny_spec();
            let emb = planar_embeddings();
            let mut pc = SamplerConfig::ode(100, cfg.seed + 4);
            pc.k_corrector = 1;
            pc.epsilon = 1e-3;
            let mut sde = SamplerConfig::ode(400, cfg.seed + 5);
            sde.sigma = 0.5;
            let cases = vec![
                diag::TvCase {
                    label: "ode_n200".into(),
                    config: SamplerConfig::ode(200, cfg.seed + 6),
                    algorithm: SamplerAlgorithm::PredictorCorrector,
                    threshold: 0.05,
                },
                diag::TvCase {
                    label: "pc_n100_k1".into(),
                    config: pc,
                    algorithm: SamplerAlgorithm::PredictorCorrector,
                    threshold: 0.05,
                },
                diag::TvCase {
                    label: "sde_n400_s0.5".into(),
                    config: sde,
                    algorithm: SamplerAlgorithm::Sde,
                    threshold: 0.07,
                },
            ];
            reports.push(diag::check_sampler_tv(&spec, &emb, &ctx, &cases, 20_000)?);
        }

        let mut all_pass = true;
        let mut lines = String::new();
        for rep in &reports {
            all_pass &= rep.pass;
            let line = rep.to_json_line();
            println!("{}", line);
            lines.push_str(&line);
            lines.push('\n');
            println!(
                "suite {}: {}",
                rep.name,
                if rep.pass { "PASS" } else { "FAIL" }
            );
        }
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            let report_path = dir.join("report.jsonl");
            std::fs::write(&report_path, lines)?;
            let manifest = RunManifest::new("selfcheck", serde_json::to_value(cfg)?, cfg.seed);
            finish_manifest(manifest, dir, vec![report_path], started)?;
        }
        if !all_pass {
            bail!("self-check failed");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// train

pub mod train {
    use super::*;

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ResolvedTrain {
        pub task: String,
        pub path: String,
        pub kappa_max: f64,
        pub sigma_max: f64,
        pub dim: usize,
        pub train: TrainConfig,
    }

    pub fn run(args: crate::TrainArgs) -> Result<()> {
        let file = config_file(&args.config)?;
        let task = args.task;
        let sudoku_task = task == "mini-sudoku";
        let cfg = ResolvedTrain {
            path: args.path,
            kappa_max: resolve(args.kappa_max, &file, "kappa_max", 50.0),
            sigma_max: resolve(args.sigma_max, &file, "sigma_max", 300.0),
            dim: resolve(args.dim, &file, "dim", if sudoku_task { 6 } else { 3 }),
            train: TrainConfig {
                steps: resolve(
                    args.steps,
                    &file,
                    "steps",
                    if sudoku_task { 12_000 } else { 20_000 },
                ),
                batch_size: resolve(
                    args.batch,
                    &file,
                    "batch",
                    if sudoku_task { 128 } else { 256 },
                ),
                learning_rate: resolve(args.lr, &file, "lr", 1e-2),
                hidden: resolve(
                    args.hidden,
                    &file,
                    "hidden",
                    if sudoku_task { 96 } else { 128 },
                ),
                warp_bins: resolve(
                    args.warp_bins,
                    &file,
                    "warp_bins",
                    if sudoku_task { 50 } else { 100 },
                ),
                ema_decay: args
                    .ema_decay
                    .or_else(|| file.get("ema_decay").and_then(|v| v.as_f64())),
                time_conditioned: args.time_conditioned
                    || file
                        .get("time_conditioned")
                        .and_then(|v| v.as_bool())
                        .unwrap_or(false),
                seed: resolve(args.seed, &file, "seed", 0),
                ..TrainConfig::default()
            },
            task,
        };
        execute(&cfg, &args.out)
    }

    pub fn execute(cfg: &ResolvedTrain, out: &Path) -> Result<()> {
        let started = Instant::now();
        std::fs::create_dir_all(out)?;
        let kind = parse_path_kind(&cfg.path, cfg.kappa_max, cfg.sigma_max)?;
        let mut task_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5eed_7a5c);
        let task = match cfg.task.as_str() {
            "synthetic" => TrainTask::Synthetic(tiny_spec()),
            "mini-sudoku" => TrainTask::Sudoku(sudoku::mini_sudoku(2000, 0.5, &mut task_rng)),
            other => bail!(ConfigError(format!("unknown task '{}'", other))),
        };

        // dataset files: line-delimited token sequences plus a metadata sidecar
        let dataset_path = out.join("dataset.txt");
        let sidecar_path = out.join("task.json");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&dataset_path)?);
            match &task {
                TrainTask::Synthetic(spec) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xda7a);
                    for _ in 0..10_000 {
                        let toks = spec.sample_tokens(&mut rng);
                        writeln!(
                            f,
                            "{}",
                            toks.iter()
                                .map(|t| t.to_string())
                                .collect::<Vec<_>>()
                                .join(" ")
                        )?;
                    }
                    std::fs::write(
                        &sidecar_path,
                        serde_json::to_string_pretty(&serde_json::json!({
                            "n_vocab": spec.n_vocab,
                            "seq_len": spec.seq_len,
                            "pmf": spec.pmf,
                        }))?,
                    )?;
                }
                TrainTask::Sudoku(t) => {
                    for board in &t.boards {
                        writeln!(
                            f,
                            "{}",
                            board
                                .iter()
                                .map(|c| c.to_string())
                                .collect::<Vec<_>>()
                                .join(" ")
                        )?;
                    }
                    std::fs::write(
                        &sidecar_path,
                        serde_json::to_string_pretty(&serde_json::json!({
                            "n_vocab": sudoku::VOCAB,
                            "seq_len": sudoku::CELLS,
                            "clue_fraction": t.clue_fraction,
                            "clue_masks": t.clue_masks,
                        }))?,
                    )?;
                }
            }
        }

        // table-backed context for the vMF path; the others run tableless
        let vmf_tables = match kind {
            PathKind::Vmf { kappa_max } => Some(tables_for(cfg.dim, kappa_max)?),
            _ => None,
        };
        let ctx = match &vmf_tables {
            Some((vel, cdf)) => PathContext::vmf(cfg.kappa_max, vel, cdf),
            None => PathContext::tableless(kind)?,
        };

        let (trainer, curve) = train(&cfg.train, &task, &ctx, cfg.dim)?;

        let ckpt_path = out.join("model.ckpt");
        trainer.checkpoint().save(&ckpt_path)?;
        let loss_path = out.join("loss.csv");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&loss_path)?);
            writeln!(f, "step,loss,warp_total")?;
            for m in &curve {
                writeln!(f, "{},{},{}", m.step, m.loss, m.warp_total)?;
            }
        }
        println!(
            "trained {} steps on {} ({} path): final loss {:.4}",
            cfg.train.steps,
            cfg.task,
            cfg.path,
            curve.last().map(|m| m.loss).unwrap_or(f64::NAN)
        );

        let manifest = RunManifest::new("train", serde_json::to_value(cfg)?, cfg.train.seed);
        finish_manifest(
            manifest,
            out,
            vec![ckpt_path, loss_path, dataset_path, sidecar_path],
            started,
        )?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// sample

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SourceCfg {
    Oracle { kappa_max: f64 },
    Checkpoint { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleKnobs {
    pub n: usize,
    pub k: usize,
    pub epsilon: f64,
    pub warp_aware: bool,
    pub damping: bool,
    pub sigma: f64,
}

impl SampleKnobs {
    fn sampler_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_predictor: self.n,
            k_corrector: self.k,
            epsilon: self.epsilon,
            warp_aware: self.warp_aware,
            damping: self.damping,
            sigma: self.sigma,
            seed,
        }
    }

    fn algorithm(&self) -> SamplerAlgorithm {
        if self.sigma > 0.0 {
            SamplerAlgorithm::Sde
        } else {
            SamplerAlgorithm::PredictorCorrector
        }
    }

    fn sampler_name(&self) -> &'static str {
        if self.sigma > 0.0 {
            "sde"
        } else if self.k > 0 {
            "pc"
        } else {
            "ode"
        }
    }
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    run_id: &'a str,
    seed: u64,
    config: &'a SampleKnobs,
    flags: String,
    tokens: &'a [usize],
    terminal_entropy: f64,
    nfe_used: usize,
}

/// Everything a sampling run needs, resolved from either source.
struct SamplingSetup {
    emb: EmbeddingTable,
    warp: WarpSchedule,
    kind: PathKind,
    seq_len: usize,
    net: Option<sphereflow::posterior::TinyBackbone>,
    spec: Option<OracleSpec>,
}

fn resolve_source(source: &SourceCfg, task: &str) -> Result<SamplingSetup> {
    match source {
        SourceCfg::Oracle { kappa_max } => {
            if task != "synthetic" {
                bail!(ConfigError(
                    "the exact oracle is only available on the synthetic task".into()
                ));
            }
            Ok(SamplingSetup {
                emb: planar_embeddings(),
                warp: WarpSchedule::identity(100),
                kind: PathKind::Vmf {
                    kappa_max: *kappa_max,
                },
                seq_len: 2,
                net: None,
                spec: Some(tiny_spec()),
            })
        }
        SourceCfg::Checkpoint { path } => {
            let ckpt = ModelCheckpoint::load(path)?;
            let spec = if task == "synthetic" {
                Some(tiny_spec())
            } else {
                None
            };
            if task == "mini-sudoku" && ckpt.seq_len != sudoku::CELLS {
                bail!(ConfigError(format!(
                    "checkpoint sequence length {} does not match the mini-sudoku board",
                    ckpt.seq_len
                )));
            }
            Ok(SamplingSetup {
                emb: ckpt.emb,
                warp: ckpt.warp,
                kind: ckpt.kind,
                seq_len: ckpt.seq_len,
                net: Some(ckpt.net),
                spec,
            })
        }
    }
}

/// Run one batch for a given knob set. Sudoku draws a fresh board and clue
/// mask per sequence; clue positions ride along in the per-sequence RNG
/// stream so the whole batch is deterministic in (seed, index).
fn run_cells(
    setup: &SamplingSetup,
    ctx: &PathContext,
    knobs: &SampleKnobs,
    task: &str,
    count: usize,
    seed: u64,
) -> Result<Vec<SampleOutput>> {
    let config = knobs.sampler_config(seed);
    config.validate(ctx.kind).map_err(anyhow::Error::from)?;
    match (&setup.net, task) {
        (None, _) => {
            let spec = setup.spec.as_ref().expect("oracle source has a spec");
            let source = OraclePosteriorSource {
                spec,
                kind: ctx.kind,
                emb: &setup.emb,
            };
            Ok(sample_batch(
                ctx,
                &config,
                &setup.emb,
                &source,
                &setup.warp,
                setup.seq_len,
                None,
                knobs.algorithm(),
                count,
            )?)
        }
        (Some(net), "mini-sudoku") => {
            let source = ModelPosteriorSource {
                net,
                emb: &setup.emb,
                ctx: *ctx,
            };
            (0..count)
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64 + 1);
                    let board = sudoku::random_solution(&mut rng);
                    let clues = sudoku::random_clue_mask(0.5, &board, &mut rng);
                    let mut out =
                        dispatch_one(ctx, &config, setup, &source, Some(&clues), &mut rng, knobs)?;
                    out.terminal_state = None;
                    Ok(out)
                })
                .collect()
        }
        (Some(net), _) => {
            let source = ModelPosteriorSource {
                net,
                emb: &setup.emb,
                ctx: *ctx,
            };
            Ok(sample_batch(
                ctx,
                &config,
                &setup.emb,
                &source,
                &setup.warp,
                setup.seq_len,
                None,
                knobs.algorithm(),
                count,
            )?)
        }
    }
}

fn dispatch_one<S: PosteriorSource>(
    ctx: &PathContext,
    config: &SamplerConfig,
    setup: &SamplingSetup,
    source: &S,
    clues: Option<&ClueMask>,
    rng: &mut ChaCha8Rng,
    knobs: &SampleKnobs,
) -> Result<SampleOutput> {
    let out = match knobs.algorithm() {
        SamplerAlgorithm::PredictorCorrector => pc_sample(
            ctx,
            config,
            &setup.emb,
            source,
            &setup.warp,
            setup.seq_len,
            clues,
            rng,
        )?,
        SamplerAlgorithm::Sde => sphereflow::sampler::sde_sample(
            ctx,
            config,
            &setup.emb,
            source,
            &setup.warp,
            setup.seq_len,
            clues,
            rng,
        )?,
    };
    Ok(out)
}

/// Task metric over a batch: TV against the known pmf for the synthetic
/// task, validity rate for mini-sudoku.
fn batch_metric(setup: &SamplingSetup, task: &str, outputs: &[SampleOutput]) -> (String, f64) {
    match task {
        "mini-sudoku" => {
            let valid = outputs
                .iter()
                .filter(|o| sudoku::is_valid(&o.tokens))
                .count();
            ("validity".into(), valid as f64 / outputs.len() as f64)
        }
        _ => {
            let spec = setup.spec.as_ref().expect("synthetic task has a spec");
            ("tv".into(), diag::decoded_tv(spec, outputs))
        }
    }
}

pub mod sample {
    use super::*;

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ResolvedSample {
        pub source: SourceCfg,
        pub task: String,
        pub knobs: SampleKnobs,
        pub count: usize,
        pub seed: u64,
    }

    pub fn run(args: crate::SampleArgs) -> Result<()> {
        let file = config_file(&args.config)?;
        let source = if args.oracle {
            SourceCfg::Oracle {
                kappa_max: resolve(args.kappa_max, &file, "kappa_max", 50.0),
            }
        } else if let Some(path) = args.ckpt {
            SourceCfg::Checkpoint { path }
        } else {
            bail!(ConfigError("pass either --oracle or --ckpt".into()));
        };
        let cfg = ResolvedSample {
            source,
            task: resolve(args.task, &file, "task", "synthetic".to_string()),
            knobs: SampleKnobs {
                n: resolve(args.n, &file, "n", 128),
                k: resolve(args.k, &file, "k", 0),
                epsilon: resolve(args.epsilon, &file, "epsilon", 1e-2),
                warp_aware: args.warp_aware
                    || file
                        .get("warp_aware")
                        .and_then(|v| v.as_bool())
                        .unwrap_or(false),
                damping: args.damping
                    || file
                        .get("damping")
                        .and_then(|v| v.as_bool())
                        .unwrap_or(false),
                sigma: resolve(args.sigma, &file, "sigma", 0.0),
            },
            count: resolve(args.count, &file, "count", 1000),
            seed: resolve(args.seed, &file, "seed", 0),
        };
        execute(&cfg, &args.out)
    }

    pub fn execute(cfg: &ResolvedSample, out: &Path) -> Result<()> {
        let started = Instant::now();
        std::fs::create_dir_all(out)?;
        let setup = resolve_source(&cfg.source, &cfg.task)?;
        let vmf_tables = match setup.kind {
            PathKind::Vmf { kappa_max } => Some(tables_for(setup.emb.dim, kappa_max)?),
            _ => None,
        };
        let ctx = match (&vmf_tables, setup.kind) {
            (Some((vel, cdf)), PathKind::Vmf { kappa_max }) => {
                PathContext::vmf(kappa_max, vel, cdf)
            }
            (_, kind) => PathContext::tableless(kind)?,
        };

        let outputs = run_cells(&setup, &ctx, &cfg.knobs, &cfg.task, cfg.count, cfg.seed)?;
        let mut manifest = RunManifest::new("sample", serde_json::to_value(cfg)?, cfg.seed);
        if let SourceCfg::Checkpoint { path } = &cfg.source {
            manifest.inputs.push(path.clone());
        }
        let run_id = manifest.run_id.clone();

        let samples_path = out.join("samples.jsonl");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&samples_path)?);
            for o in &outputs {
                let rec = SampleRecord {
                    run_id: &run_id,
                    seed: cfg.seed,
                    config: &cfg.knobs,
                    flags: cfg.knobs.sampler_config(cfg.seed).flags(),
                    tokens: &o.tokens,
                    terminal_entropy: o.terminal_entropy,
                    nfe_used: o.nfe_used,
                };
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
        }

        let (metric_name, metric_value) = batch_metric(&setup, &cfg.task, &outputs);
        let mean_entropy: f64 =
            outputs.iter().map(|o| o.terminal_entropy).sum::<f64>() / outputs.len() as f64;
        let metrics_path = out.join("metrics.csv");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
            writeln!(f, "run_id,sampler,n,k,epsilon,flags,metric_name,value")?;
            let flags = cfg.knobs.sampler_config(cfg.seed).flags();
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                run_id,
                cfg.knobs.sampler_name(),
                cfg.knobs.n,
                cfg.knobs.k,
                cfg.knobs.epsilon,
                flags,
                metric_name,
                metric_value
            )?;
            writeln!(
                f,
                "{},{},{},{},{},{},mean_entropy,{}",
                run_id,
                cfg.knobs.sampler_name(),
                cfg.knobs.n,
                cfg.knobs.k,
                cfg.knobs.epsilon,
                flags,
                mean_entropy
            )?;
        }
        println!(
            "{} sequences via {} [{}]: {} = {:.4}, mean entropy {:.3}, NFE {}",
            outputs.len(),
            cfg.knobs.sampler_name(),
            cfg.knobs.sampler_config(cfg.seed).flags(),
            metric_name,
            metric_value,
            mean_entropy,
            outputs.first().map(|o| o.nfe_used).unwrap_or(0)
        );

        finish_manifest(manifest, out, vec![samples_path, metrics_path], started)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// sweep

pub mod sweep {
    use super::*;

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ResolvedSweep {
        pub source: SourceCfg,
        pub task: String,
        pub eps_grid: Vec<f64>,
        pub count: usize,
        pub seed: u64,
        pub jobs: Option<usize>,
    }

    pub fn run(args: crate::SweepArgs) -> Result<()> {
        let file = config_file(&args.config)?;
        let source = if args.oracle {
            SourceCfg::Oracle {
                kappa_max: resolve(args.kappa_max, &file, "kappa_max", 50.0),
            }
        } else if let Some(path) = args.ckpt {
            SourceCfg::Checkpoint { path }
        } else {
            bail!(ConfigError("pass either --oracle or --ckpt".into()));
        };
        let mut eps_grid: Vec<f64> = match &args.eps_grid {
            Some(spec) => spec
                .split(',')
                .map(|s| s.trim().parse::<f64>().context("parsing --eps-grid"))
                .collect::<Result<_>>()?,
            None => vec![1e-3, 1e-2, 1e-1, 1.0],
        };
        if args.include_saturation {
            eps_grid.push(2.0);
        }
        let cfg = ResolvedSweep {
            source,
            task: resolve(args.task, &file, "task", "synthetic".to_string()),
            eps_grid,
            count: resolve(args.count, &file, "count", 2000),
            seed: resolve(args.seed, &file, "seed", 0),
            jobs: args.jobs,
        };
        execute(&cfg, &args.out)
    }

    pub fn execute(cfg: &ResolvedSweep, out: &Path) -> Result<()> {
        let started = Instant::now();
        std::fs::create_dir_all(out)?;
        if let Some(jobs) = cfg.jobs {
            // ignore failure when a global pool already exists
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global();
        }
        let setup = resolve_source(&cfg.source, &cfg.task)?;
        if !setup.kind.has_score() {
            return Err(anyhow::Error::from(sphereflow::Error::ScoreUnavailable {
                kind: setup.kind.name(),
            }))
            .context("the sweep runs corrector cells");
        }
        let vmf_tables = match setup.kind {
            PathKind::Vmf { kappa_max } => Some(tables_for(setup.emb.dim, kappa_max)?),
            _ => None,
        };
        let ctx = match (&vmf_tables, setup.kind) {
            (Some((vel, cdf)), PathKind::Vmf { kappa_max }) => {
                PathContext::vmf(kappa_max, vel, cdf)
            }
            (_, kind) => PathContext::tableless(kind)?,
        };

        let mut manifest = RunManifest::new("sweep", serde_json::to_value(cfg)?, cfg.seed);
        if let SourceCfg::Checkpoint { path } = &cfg.source {
            manifest.inputs.push(path.clone());
        }
        let run_id = manifest.run_id.clone();

        let splits = [(64usize, 1usize), (32, 3), (16, 7)];
        let flags = [(false, false), (true, false), (false, true), (true, true)];
        let mut rows = Vec::new();
        let mut best: std::collections::BTreeMap<(usize, String), (f64, String)> =
            Default::default();
        let metric_better_high = cfg.task == "mini-sudoku";
        for (n, k) in splits {
            for &eps in &cfg.eps_grid {
                for (warp_aware, damping) in flags {
                    let knobs = SampleKnobs {
                        n,
                        k,
                        epsilon: eps,
                        warp_aware,
                        damping,
                        sigma: 0.0,
                    };
                    let outputs = run_cells(&setup, &ctx, &knobs, &cfg.task, cfg.count, cfg.seed)?;
                    let (metric_name, value) = batch_metric(&setup, &cfg.task, &outputs);
                    let flag_str = knobs.sampler_config(cfg.seed).flags();
                    rows.push(format!(
                        "{},pc,{},{},{},{},{},{}",
                        run_id, n, k, eps, flag_str, metric_name, value
                    ));
                    let key = (n, format!("{}", eps));
                    let improved = match best.get(&key) {
                        None => true,
                        Some((cur, _)) => {
                            if metric_better_high {
                                value > *cur
                            } else {
                                value < *cur
                            }
                        }
                    };
                    if improved {
                        best.insert(key, (value, flag_str));
                    }
                }
            }
        }

        let metrics_path = out.join("metrics.csv");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
            writeln!(f, "run_id,sampler,n,k,epsilon,flags,metric_name,value")?;
            for row in &rows {
                writeln!(f, "{}", row)?;
            }
        }

        // best-over-flags summary per (n, k) x epsilon cell
        let summary_path = out.join("summary.csv");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&summary_path)?);
            writeln!(f, "n,k,epsilon,best_value,best_flags")?;
            let mut text = String::new();
            for (n, k) in splits {
                for &eps in &cfg.eps_grid {
                    let key = (n, format!("{}", eps));
                    if let Some((value, flag_str)) = best.get(&key) {
                        writeln!(f, "{},{},{},{},{}", n, k, eps, value, flag_str)?;
                        let _ = write!(
                            text,
                            "({:>2},{}) eps={:<7} {:.4} [{}]  ",
                            n, k, eps, value, flag_str
                        );
                    }
                }
                text.push('\n');
            }
            print!("{}", text);
        }
        println!("{} sweep cells written", rows.len());

        finish_manifest(manifest, out, vec![metrics_path, summary_path], started)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// replay

pub fn replay(args: crate::ReplayArgs) -> Result<()> {
    let manifest = RunManifest::load(&args.manifest)?;
    match manifest.command.as_str() {
        "tables" => tables::execute(&serde_json::from_value(manifest.config)?, &args.out),
        "selfcheck" => {
            selfcheck::execute(&serde_json::from_value(manifest.config)?, Some(&args.out))
        }
        "train" => train::execute(&serde_json::from_value(manifest.config)?, &args.out),
        "sample" => sample::execute(&serde_json::from_value(manifest.config)?, &args.out),
        "sweep" => sweep::execute(&serde_json::from_value(manifest.config)?, &args.out),
        other => bail!(ConfigError(format!(
            "manifest records unknown command '{}'",
            other
        ))),
    }
}

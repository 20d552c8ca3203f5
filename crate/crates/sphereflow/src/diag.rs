//! Runnable numerical diagnostics.
//!
//! Each check is the executable embodiment of one analytic claim the engine
//! relies on: the velocity-scalar ODE residual, the one-dimensional flux
//! transport law, the full continuity equation on S^2, closed-form scores
//! against finite differences, mean-cosine signal curves, and end-to-end
//! sampler total variation against a known data pmf. All checks are
//! deterministic under a fixed seed and emit machine-readable pass/fail
//! records.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::geometry;
use crate::paths::{expected_cosine_curve, PathContext, PathKind};
use crate::posterior::{EmbeddingTable, OraclePosteriorSource, OracleSpec};
use crate::sampler::{sample_batch, SampleOutput, SamplerAlgorithm, SamplerConfig};
use crate::schedule::WarpSchedule;
use crate::vmf::{bessel_ratio, build_psi_column, RadialCdfTable, VelocityTable};
use crate::Result;

/// One metric with its tolerance and outcome.
#[derive(Debug, Clone, Serialize)]
pub struct MetricCheck {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl MetricCheck {
    fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value < threshold,
        }
    }
}

/// A named diagnostic with its parameters and metric outcomes.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticReport {
    pub name: String,
    pub parameters: serde_json::Value,
    pub metrics: Vec<MetricCheck>,
    pub pass: bool,
}

impl DiagnosticReport {
    fn new(name: &str, parameters: serde_json::Value, metrics: Vec<MetricCheck>) -> Self {
        let pass = metrics.iter().all(|m| m.pass);
        Self {
            name: name.to_string(),
            parameters,
            metrics,
            pass,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Two-sided KS statistic of sorted samples against a reference CDF.
pub fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    let mut ks = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        ks = ks
            .max((f - i as f64 / n).abs())
            .max((f - (i + 1) as f64 / n).abs());
    }
    ks
}

fn sort(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

/// Fibonacci point set on S^2 for cheap quadrature.
fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

// ---------------------------------------------------------------------------

/// Residual of the velocity-scalar ODE on tabulated columns,
/// `(1-s^2) v' + (kappa (1-s^2) - (d-1) s) v - (A_d - s)`,
/// with `v'` from the fourth-order central stencil on the default grid.
/// The second-order stencil's own truncation error already exceeds the
/// tolerance at (d=3, kappa=50), so the higher-order stencil is required for
/// the residual to measure the table rather than the differencer.
pub fn check_psi_ode(ds: &[usize], kappas: &[f64]) -> Result<DiagnosticReport> {
    check_psi_ode_impl(ds, kappas, false)
}

/// Mutation hook: negates the tabulated values first; the suite must fail.
pub fn check_psi_ode_corrupted(ds: &[usize], kappas: &[f64]) -> Result<DiagnosticReport> {
    check_psi_ode_impl(ds, kappas, true)
}

fn check_psi_ode_impl(ds: &[usize], kappas: &[f64], flip_sign: bool) -> Result<DiagnosticReport> {
    let n_mu = 512usize;
    let h = 2.0 / (n_mu - 1) as f64;
    let mut metrics = Vec::new();
    for &d in ds {
        for &kappa in kappas {
            let mut col = build_psi_column(d, kappa, n_mu, 0.10, 1e-14)?;
            if flip_sign {
                for v in col.iter_mut() {
                    *v = -*v;
                }
            }
            let a = bessel_ratio(d, kappa, 1e-14)?;
            let mut worst = 0.0f64;
            for i in 2..n_mu - 2 {
                let s = -1.0 + h * i as f64;
                if s.abs() > 0.99 {
                    continue;
                }
                let dv =
                    (-col[i + 2] + 8.0 * col[i + 1] - 8.0 * col[i - 1] + col[i - 2]) / (12.0 * h);
                let r = (1.0 - s * s) * dv
                    + (kappa * (1.0 - s * s) - (d as f64 - 1.0) * s) * col[i]
                    - (a - s);
                worst = worst.max(r.abs());
            }
            metrics.push(MetricCheck::below(
                format!("ode_residual_d{}_kappa{}", d, kappa),
                worst,
                1e-3,
            ));
        }
    }
    Ok(DiagnosticReport::new(
        "psi_ode_residual",
        serde_json::json!({"n_mu": n_mu, "ds": ds, "kappas": kappas, "window": 0.99}),
        metrics,
    ))
}

/// Transport the initial cosine law along the 1-D characteristic
/// `ds = dkappa * v(s) (1 - s^2)` and compare the terminal sample law to the
/// tabulated radial CDF column at `kappa_max`.
pub fn check_flux_transport(
    d: usize,
    kappa_max: f64,
    n_particles: usize,
    n_steps: usize,
    psi: &VelocityTable,
    cdf: &RadialCdfTable,
    seed: u64,
) -> DiagnosticReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s: Vec<f64> = (0..n_particles)
        .map(|_| geometry::sample_uniform_sphere(d, &mut rng).as_slice()[0])
        .collect();
    let dt = 1.0 / n_steps as f64;
    for i in 0..n_steps {
        let kappa_t = kappa_max * (i as f64 * dt);
        let dk = kappa_max * dt;
        for x in s.iter_mut() {
            *x = (*x + dk * psi.lookup(*x, kappa_t) * (1.0 - *x * *x)).clamp(-1.0, 1.0);
        }
    }
    let sorted = sort(s);
    let ks = ks_statistic(&sorted, |x| cdf.cdf_lookup(x, kappa_max));
    DiagnosticReport::new(
        "flux_transport",
        serde_json::json!({
            "d": d, "kappa_max": kappa_max,
            "n_particles": n_particles, "n_steps": n_steps, "seed": seed
        }),
        vec![MetricCheck::below("terminal_ks", ks, 0.02)],
    )
}

/// Transport uniform particles on S^2 by the full single-token field and
/// compare the terminal cosine law to the radial density column, plus
/// azimuthal uniformity and norm preservation.
pub fn check_sphere_continuity(
    n_particles: usize,
    n_steps: usize,
    kappa_max: f64,
    psi: &VelocityTable,
    cdf: &RadialCdfTable,
    seed: u64,
) -> DiagnosticReport {
    let d = 3usize;
    let w = [0.0, 0.0, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / n_steps as f64;
    let mut cosines = Vec::with_capacity(n_particles);
    let mut azimuths = Vec::with_capacity(n_particles);
    let mut worst_norm = 0.0f64;
    for _ in 0..n_particles {
        let mut x = geometry::sample_uniform_sphere(d, &mut rng).into_coords();
        for i in 0..n_steps {
            let kappa_t = kappa_max * (i as f64 * dt);
            let dk = kappa_max * dt;
            let s = geometry::clamp_cos(geometry::dot(&x, &w));
            let c = dk * psi.lookup(s, kappa_t);
            for (xi, wi) in x.iter_mut().zip(&w) {
                *xi += c * (wi - s * *xi);
            }
            let n = geometry::norm(&x);
            for xi in x.iter_mut() {
                *xi /= n;
            }
        }
        worst_norm = worst_norm.max((geometry::norm(&x) - 1.0).abs());
        cosines.push(geometry::dot(&x, &w));
        azimuths.push(x[1].atan2(x[0]));
    }
    let ks_cos = ks_statistic(&sort(cosines), |s| cdf.cdf_lookup(s, kappa_max));
    let pi = std::f64::consts::PI;
    let ks_az = ks_statistic(&sort(azimuths), |a| (a + pi) / (2.0 * pi));
    DiagnosticReport::new(
        "sphere_continuity",
        serde_json::json!({
            "d": d, "kappa_max": kappa_max,
            "n_particles": n_particles, "n_steps": n_steps, "seed": seed
        }),
        vec![
            MetricCheck::below("terminal_cosine_ks", ks_cos, 0.02),
            MetricCheck::below("azimuth_uniformity_ks", ks_az, 0.02),
            MetricCheck::below("max_norm_deviation", worst_norm, 1e-9),
        ],
    )
}

fn projected_fd_gradient(
    log_density: impl Fn(&[f64]) -> f64,
    x: &[f64],
    spherical: bool,
) -> Vec<f64> {
    let eps = 1e-5;
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += eps;
        xm[i] -= eps;
        grad[i] = (log_density(&xp) - log_density(&xm)) / (2.0 * eps);
    }
    if spherical {
        geometry::project_tangent_in_place(x, &mut grad);
    }
    grad
}

fn relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Conditional scores (vMF / VP / VE) against projected finite differences
/// of their log densities, and the tiny-instance marginal score against a
/// quadrature oracle of the mixture density on S^2.
pub fn check_scores(seed: u64) -> Result<DiagnosticReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut metrics = Vec::new();

    // vMF conditional across dimensions
    let mut worst_vmf = 0.0f64;
    for d in [3usize, 8, 16] {
        for _ in 0..20 {
            let kappa_max = 1.0 + 40.0 * rng.random::<f64>();
            let t: f64 = 0.1 + 0.9 * rng.random::<f64>();
            let kappa = kappa_max * t;
            let w = geometry::sample_uniform_sphere(d, &mut rng);
            let x = geometry::sample_uniform_sphere(d, &mut rng);
            // analytic: kappa P_x(w); density extension exp(kappa <w, y>)
            let s = geometry::dot(w.as_slice(), x.as_slice());
            let analytic: Vec<f64> = w
                .as_slice()
                .iter()
                .zip(x.as_slice())
                .map(|(wi, xi)| kappa * (wi - s * xi))
                .collect();
            let wv = w.as_slice().to_vec();
            let fd = projected_fd_gradient(|y| kappa * geometry::dot(&wv, y), x.as_slice(), true);
            worst_vmf = worst_vmf.max(relative_deviation(&analytic, &fd));
        }
    }
    metrics.push(MetricCheck::below(
        "vmf_conditional_rel_dev",
        worst_vmf,
        1e-3,
    ));

    // kappa = 0 conditional score is exactly zero
    {
        let mut cfg_zero = 0.0f64;
        let w = geometry::sample_uniform_sphere(3, &mut rng);
        let x = geometry::sample_uniform_sphere(3, &mut rng);
        let s = geometry::dot(w.as_slice(), x.as_slice());
        for (wi, xi) in w.as_slice().iter().zip(x.as_slice()) {
            cfg_zero = cfg_zero.max((0.0 * (wi - s * xi)).abs());
        }
        metrics.push(MetricCheck::below("vmf_zero_kappa_score", cfg_zero, 1e-15));
    }

    // VP conditional
    let mut worst_vp = 0.0f64;
    for _ in 0..20 {
        let d = 4;
        let t: f64 = 0.1 + 0.8 * rng.random::<f64>();
        let w = geometry::standard_normal_vec(d, &mut rng);
        let x = geometry::standard_normal_vec(d, &mut rng);
        let analytic: Vec<f64> = w
            .iter()
            .zip(&x)
            .map(|(wi, xi)| (t * wi - xi) / ((1.0 - t) * (1.0 - t)))
            .collect();
        let wv = w.clone();
        let fd = projected_fd_gradient(
            |y| {
                let q: f64 = y
                    .iter()
                    .zip(&wv)
                    .map(|(yi, wi)| (yi - t * wi) * (yi - t * wi))
                    .sum();
                -q / (2.0 * (1.0 - t) * (1.0 - t))
            },
            &x,
            false,
        );
        worst_vp = worst_vp.max(relative_deviation(&analytic, &fd));
    }
    metrics.push(MetricCheck::below("vp_conditional_rel_dev", worst_vp, 1e-3));

    // VE conditional
    let mut worst_ve = 0.0f64;
    for _ in 0..20 {
        let d = 4;
        let sigma_max = 50.0;
        let kind = PathKind::Ve { sigma_max };
        let t: f64 = 0.2 + 0.6 * rng.random::<f64>();
        let sigma = kind.sigma(t);
        let w = geometry::standard_normal_vec(d, &mut rng);
        let x: Vec<f64> = w
            .iter()
            .map(|wi| wi + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let analytic: Vec<f64> = w
            .iter()
            .zip(&x)
            .map(|(wi, xi)| (wi - xi) / (sigma * sigma))
            .collect();
        let wv = w.clone();
        let fd = projected_fd_gradient(
            |y| {
                let q: f64 = y
                    .iter()
                    .zip(&wv)
                    .map(|(yi, wi)| (yi - wi) * (yi - wi))
                    .sum();
                -q / (2.0 * sigma * sigma)
            },
            &x,
            false,
        );
        worst_ve = worst_ve.max(relative_deviation(&analytic, &fd));
    }
    metrics.push(MetricCheck::below("ve_conditional_rel_dev", worst_ve, 1e-3));

    // tiny-instance marginal score vs quadrature of the mixture density:
    // p_t(x) = sum_k pi_k exp(kappa <w_k, x>) / Z_quad(kappa)
    let quad = fibonacci_sphere(10_000);
    let r3 = 3.0f64.sqrt() / 2.0;
    let emb = EmbeddingTable::from_rows(
        vec![vec![1.0, 0.0, 0.0], vec![-0.5, r3, 0.0]],
        crate::paths::NormConvention::Unit,
    )?;
    let priors = [0.6f64, 0.4];
    let mut worst_marginal = 0.0f64;
    for _ in 0..10 {
        let kappa: f64 = 1.0 + 7.0 * rng.random::<f64>();
        let x = geometry::sample_uniform_sphere(3, &mut rng);
        // analytic: kappa sum_k post_k P_x(w_k)
        let s0 = geometry::dot(emb.row(0), x.as_slice());
        let s1 = geometry::dot(emb.row(1), x.as_slice());
        let l0 = priors[0].ln() + kappa * s0;
        let l1 = priors[1].ln() + kappa * s1;
        let m = l0.max(l1);
        let p0 = (l0 - m).exp() / ((l0 - m).exp() + (l1 - m).exp());
        let p1 = 1.0 - p0;
        let mut analytic = vec![0.0; 3];
        for i in 0..3 {
            analytic[i] = kappa
                * (p0 * (emb.row(0)[i] - s0 * x.as_slice()[i])
                    + p1 * (emb.row(1)[i] - s1 * x.as_slice()[i]));
        }
        // quadrature normalization is independent of x, but keep it inside
        // the differentiated function so the oracle is the full density
        let z: f64 = quad
            .iter()
            .map(|p| (kappa * geometry::dot(p, emb.row(0))).exp())
            .sum::<f64>()
            / quad.len() as f64;
        let emb0 = emb.row(0).to_vec();
        let emb1 = emb.row(1).to_vec();
        let fd = projected_fd_gradient(
            |y| {
                let a = priors[0] * (kappa * geometry::dot(&emb0, y)).exp() / z;
                let b = priors[1] * (kappa * geometry::dot(&emb1, y)).exp() / z;
                (a + b).ln()
            },
            x.as_slice(),
            true,
        );
        worst_marginal = worst_marginal.max(relative_deviation(&analytic, &fd));
    }
    metrics.push(MetricCheck::below(
        "vmf_marginal_vs_quadrature_rel_dev",
        worst_marginal,
        1e-3,
    ));

    Ok(DiagnosticReport::new(
        "scores",
        serde_json::json!({"seed": seed, "fd_step": 1e-5, "quadrature_points": 10_000}),
        metrics,
    ))
}

/// Mean-cosine signal curves: the vMF curve must equal `A_d(kappa_t)` within
/// Monte-Carlo error, slerp at large d approaches `sin(pi t / 2)`, and the
/// small-kappa regime behaves like `kappa / d`.
pub fn check_signal_curves(
    cdf_d8: &RadialCdfTable,
    cdf_d10: &RadialCdfTable,
    seed: u64,
) -> Result<DiagnosticReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut metrics = Vec::new();
    let n_samples = 20_000;

    let kappa_max = cdf_d8.config.kappa_max;
    let vel_unused: Option<&VelocityTable> = None;
    let ctx = PathContext {
        kind: PathKind::Vmf { kappa_max },
        velocity_table: vel_unused,
        cdf_table: Some(cdf_d8),
    };
    let grid = [0.25, 0.5, 0.75];
    let curve = expected_cosine_curve(&ctx, 8, &grid, n_samples, &mut rng)?;
    for (&t, &(mean, se)) in grid.iter().zip(&curve) {
        let a = bessel_ratio(8, kappa_max * t, 1e-14)?;
        metrics.push(MetricCheck::below(
            format!("vmf_mean_cosine_dev_t{}", t),
            (mean - a).abs(),
            3.0 * se + 1e-4,
        ));
    }

    let geo = PathContext::tableless(PathKind::Geodesic)?;
    let curve = expected_cosine_curve(&geo, 1000, &grid, n_samples, &mut rng)?;
    for (&t, &(mean, _)) in grid.iter().zip(&curve) {
        let expect = (std::f64::consts::FRAC_PI_2 * t).sin();
        metrics.push(MetricCheck::below(
            format!("slerp_highdim_dev_t{}", t),
            (mean - expect).abs(),
            0.01,
        ));
    }

    // small-kappa linear regime at d = 10: kappa_t = 0.05
    let kmax10 = cdf_d10.config.kappa_max;
    let ctx10 = PathContext {
        kind: PathKind::Vmf { kappa_max: kmax10 },
        velocity_table: None,
        cdf_table: Some(cdf_d10),
    };
    let t_small = 0.05 / kmax10;
    let curve = expected_cosine_curve(&ctx10, 10, &[t_small], n_samples, &mut rng)?;
    metrics.push(MetricCheck::below(
        "vmf_small_kappa_linearity",
        (curve[0].0 - 0.005).abs(),
        3.0 * curve[0].1 + 1e-5,
    ));

    Ok(DiagnosticReport::new(
        "signal_curves",
        serde_json::json!({"seed": seed, "n_samples": n_samples}),
        metrics,
    ))
}

/// One sampler configuration for the TV check.
#[derive(Debug, Clone, Serialize)]
pub struct TvCase {
    pub label: String,
    pub config: SamplerConfig,
    pub algorithm: SamplerAlgorithm,
    pub threshold: f64,
}

/// Decode distribution vs the data pmf in total variation over the joint
/// support, one metric per case.
pub fn check_sampler_tv(
    spec: &OracleSpec,
    emb: &EmbeddingTable,
    ctx: &PathContext,
    cases: &[TvCase],
    n_samples: usize,
) -> Result<DiagnosticReport> {
    let mut metrics = Vec::new();
    for case in cases {
        let tv = sampler_tv(spec, emb, ctx, &case.config, case.algorithm, n_samples)?;
        metrics.push(MetricCheck::below(
            format!("tv_{}", case.label),
            tv,
            case.threshold,
        ));
    }
    Ok(DiagnosticReport::new(
        "sampler_tv",
        serde_json::json!({"n_samples": n_samples, "cases": cases}),
        metrics,
    ))
}

/// Total variation between decoded samples and the data pmf.
pub fn sampler_tv(
    spec: &OracleSpec,
    emb: &EmbeddingTable,
    ctx: &PathContext,
    config: &SamplerConfig,
    algorithm: SamplerAlgorithm,
    n_samples: usize,
) -> Result<f64> {
    let source = OraclePosteriorSource {
        spec,
        kind: ctx.kind,
        emb,
    };
    let warp = WarpSchedule::identity(8);
    let outputs = sample_batch(
        ctx,
        config,
        emb,
        &source,
        &warp,
        spec.seq_len,
        None,
        algorithm,
        n_samples,
    )?;
    Ok(decoded_tv(spec, &outputs))
}

/// TV of decoded outputs against the joint pmf.
pub fn decoded_tv(spec: &OracleSpec, outputs: &[SampleOutput]) -> f64 {
    let size = spec.n_vocab.pow(spec.seq_len as u32);
    let mut counts = vec![0usize; size];
    for out in outputs {
        let mut idx = 0usize;
        for (l, &k) in out.tokens.iter().enumerate() {
            idx += k * spec.n_vocab.pow(l as u32);
        }
        counts[idx] += 1;
    }
    let mut tv = 0.0;
    let mut tokens = vec![0usize; spec.seq_len];
    for (flat, &c) in counts.iter().enumerate() {
        let mut idx = flat;
        for slot in tokens.iter_mut() {
            *slot = idx % spec.n_vocab;
            idx /= spec.n_vocab;
        }
        let emp = c as f64 / outputs.len() as f64;
        tv += (emp - spec.joint_prob(&tokens)).abs();
    }
    tv / 2.0
}

//! von Mises-Fisher special-function machinery.
//!
//! For embedding dimension `d` and concentration `kappa`, the radial density
//! of the cosine `s = <w, x>` under vMF(w, kappa) is
//!
//! ```text
//! f(s; kappa) ∝ (1 - s^2)^{(d-3)/2} exp(kappa s)
//! ```
//!
//! Two tables are precomputed on a uniform `(cosine, concentration)` grid and
//! queried by bilinear interpolation at runtime:
//!
//! - [`VelocityTable`]: the schedule-independent velocity scalar. The full
//!   conditional velocity is `kappa_dot * value * P_x(w)`; the scalar is the
//!   unique bounded solution of
//!   `(1-s^2) v' + (kappa (1-s^2) - (d-1) s) v = A_d(kappa) - s`
//!   and is evaluated through its flux integral representation
//!   `-∫_{-1}^{s} (y - A_d) f(y) dy / (f(s) (1 - s^2))`.
//! - [`RadialCdfTable`]: the normalized CDF of `f`, inverted at runtime for
//!   inverse-CDF sampling of the cosine.
//!
//! The density spans hundreds of orders of magnitude at large `d` or `kappa`;
//! all columns work with the log-shifted density `g = exp(log f - max log f)`
//! (the shift cancels in the velocity ratio and in the normalized CDF). The
//! flux integral is accumulated by a cumulative trapezoid-family rule on a
//! 32x refined axis (Simpson pairs), and a neighborhood of `s = ±1` is served
//! by the endpoint Taylor expansion of the bounded solution, blended smoothly
//! into the interior values. Without the endpoint expansion the uniform grid
//! cannot represent the steep variation of the solution near the poles at
//! large `kappa`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry;
use crate::{Error, Result};

/// Internal refinement factor of the integration axis (must be even).
const MSUB: usize = 32;
/// Endpoint expansion length; coefficients decay geometrically inside the
/// blend zone so this is far more than needed.
const SERIES_TERMS: usize = 200;
/// Continued-fraction start depth and hard cap.
const CF_START_DEPTH: usize = 64;
const CF_MAX_DEPTH: usize = 1 << 20;

/// Grid configuration for both tables.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Embedding dimension (>= 3: the d = 2 radial density is unbounded at
    /// the endpoints and is not representable on this grid).
    pub d: usize,
    /// Terminal concentration; the kappa axis is uniform on [0, kappa_max].
    pub kappa_max: f64,
    /// Grid points along the cosine axis (uniform on [-1, 1]).
    pub n_mu: usize,
    /// Grid points along the concentration axis.
    pub n_kappa: usize,
    /// Continued-fraction convergence tolerance.
    pub cf_tol: f64,
    /// Half-width of the endpoint blend zone in cosine units (shrinks as
    /// 10/kappa at large kappa, where the expansion would lose precision).
    pub blend_width: f64,
}

impl KernelConfig {
    pub fn new(d: usize, kappa_max: f64) -> Self {
        Self {
            d,
            kappa_max,
            n_mu: 512,
            n_kappa: 512,
            cf_tol: 1e-14,
            blend_width: 0.10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 3 {
            return Err(Error::InvalidConfig(format!(
                "kernel tables need d >= 3, got d = {}",
                self.d
            )));
        }
        if self.kappa_max.is_nan() || self.kappa_max <= 0.0 {
            return Err(Error::InvalidConfig("kappa_max must be > 0".into()));
        }
        if self.n_mu < 64 || self.n_kappa < 64 {
            return Err(Error::InvalidConfig(
                "grids need at least 64 points per axis".into(),
            ));
        }
        let blend_ok = self.blend_width > 0.0 && self.blend_width <= 0.25;
        if self.cf_tol.is_nan() || self.cf_tol <= 0.0 || !blend_ok {
            return Err(Error::InvalidConfig(
                "cf_tol must be positive and blend_width in (0, 0.25]".into(),
            ));
        }
        Ok(())
    }

    fn kappa_axis(&self) -> Vec<f64> {
        axis(0.0, self.kappa_max, self.n_kappa)
    }
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Mean resultant length `A_d(kappa)` of vMF on `S^{d-1}`: the ratio of
/// modified Bessel functions of the first kind at orders `d/2` and `d/2 - 1`,
/// evaluated by the backward Gauss continued fraction with depth doubling.
pub fn bessel_ratio(d: usize, kappa: f64, cf_tol: f64) -> Result<f64> {
    assert!(kappa >= 0.0, "concentration must be nonnegative");
    if kappa == 0.0 {
        return Ok(0.0);
    }
    let nu = d as f64 / 2.0 - 1.0;
    let mut prev: Option<f64> = None;
    let mut depth = CF_START_DEPTH;
    while depth <= CF_MAX_DEPTH {
        let mut r = 0.0;
        for k in (1..=depth).rev() {
            r = 1.0 / (2.0 * (nu + k as f64) / kappa + r);
        }
        if let Some(p) = prev {
            if (r - p).abs() < cf_tol {
                return Ok(r);
            }
        }
        prev = Some(r);
        depth *= 2;
    }
    Err(Error::NoConvergence { d, kappa })
}

/// Unnormalized log radial density `(d-3)/2 * log(1 - mu^2) + kappa * mu`.
///
/// Returns `-inf` at `mu = ±1` for `d > 3`; for `d = 3` the power term is
/// identically zero, including at the endpoints.
pub fn log_radial_density(mu: f64, kappa: f64, d: usize) -> f64 {
    debug_assert!((-1.0..=1.0).contains(&mu) && kappa >= 0.0 && d >= 3);
    if d == 3 {
        kappa * mu
    } else {
        0.5 * (d as f64 - 3.0) * (-mu * mu).ln_1p() + kappa * mu
    }
}

/// Endpoint Taylor coefficients of the bounded ODE solution, scaled so that
/// coefficient `n` multiplies `(v / scale)^n` with `v = s - sign`. The
/// scaling keeps the recursion bounded at large kappa.
fn endpoint_series(d: usize, kappa: f64, a0: f64, sign: f64, scale: f64) -> Vec<f64> {
    let df = d as f64;
    let mut b = Vec::with_capacity(SERIES_TERMS);
    b.push(a0);
    let a1 = if sign > 0.0 {
        (1.0 - (2.0 * kappa + df - 1.0) * a0) / (df + 1.0)
    } else {
        (-1.0 - (2.0 * kappa - df + 1.0) * a0) / (df + 1.0)
    };
    b.push(a1 * scale);
    let mut tiny = 0;
    for n in 2..SERIES_TERMS {
        let nf = n as f64;
        let prev = b[n - 1];
        let prev2 = b[n - 2];
        let bn = if sign > 0.0 {
            -((nf - 1.0 + 2.0 * kappa + df - 1.0) * scale * prev + kappa * scale * scale * prev2)
                / (2.0 * nf + df - 1.0)
        } else {
            ((nf - 1.0 - 2.0 * kappa + df - 1.0) * scale * prev + kappa * scale * scale * prev2)
                / (2.0 * nf + df - 1.0)
        };
        b.push(bn);
        if bn.abs() < 1e-18 * a0.abs().max(1e-300) {
            tiny += 1;
            if tiny >= 3 {
                break;
            }
        } else {
            tiny = 0;
        }
    }
    b
}

/// Horner evaluation in the scaled variable `r = (s - sign)/scale`, |r| <= 1.
fn eval_series(b: &[f64], r: f64) -> f64 {
    let mut acc = 0.0;
    for &c in b.iter().rev() {
        acc = acc * r + c;
    }
    acc
}

/// Smoothstep `3t^2 - 2t^3` clamped to [0, 1].
fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Build one velocity-scalar column at fixed `kappa` on the `n_mu` cosine
/// axis. Shared by the table builder and the ODE-residual diagnostic.
pub fn build_psi_column(
    d: usize,
    kappa: f64,
    n_mu: usize,
    blend_width: f64,
    cf_tol: f64,
) -> Result<Vec<f64>> {
    let a = bessel_ratio(d, kappa, cf_tol)?;
    let mu = axis(-1.0, 1.0, n_mu);
    let h = 2.0 / (n_mu - 1) as f64;

    // Refined-axis shifted density and its flux integrand.
    let n_fine = (n_mu - 1) * MSUB + 1;
    let hf = 2.0 / (n_fine - 1) as f64;
    let mut log_f = Vec::with_capacity(n_fine);
    let mut max_lf = f64::NEG_INFINITY;
    for i in 0..n_fine {
        let m = -1.0 + hf * i as f64;
        let lf = log_radial_density(m.clamp(-1.0, 1.0), kappa, d);
        if lf.is_finite() && lf > max_lf {
            max_lf = lf;
        }
        log_f.push(lf);
    }
    let g: Vec<f64> = log_f
        .iter()
        .map(|&lf| {
            if lf.is_finite() {
                (lf - max_lf).exp()
            } else {
                0.0
            }
        })
        .collect();

    // Cumulative flux integral at the base nodes: Simpson over fine-cell
    // pairs (exact monotone prefix for the CDF variant, fourth-order here).
    let mut prefix = vec![0.0; n_mu];
    let mut acc = 0.0;
    let phi = |i: usize| {
        let y = -1.0 + hf * i as f64;
        (y - a) * g[i]
    };
    for base in 1..n_mu {
        let start = (base - 1) * MSUB;
        let mut i = start;
        while i + 2 <= start + MSUB {
            acc += (phi(i) + 4.0 * phi(i + 1) + phi(i + 2)) * hf / 3.0;
            i += 2;
        }
        prefix[base] = acc;
    }

    // Interior ratio. The per-column shift cancels here. Past the bulk of a
    // very sharp density (large d) the flux integral decays below the
    // cancellation noise accumulated through the bulk; such cells carry no
    // information and are marked for the tail fallback below. The noise
    // floor tracks the running prefix magnitude so the accurately-tiny left
    // tail is never flagged.
    let noise_scale = 1e3 * f64::EPSILON * (n_fine as f64).sqrt();
    let mut vals = vec![f64::NAN; n_mu];
    let mut running_max = 0.0f64;
    for i in 0..n_mu {
        running_max = running_max.max(prefix[i].abs());
        let gc = g[i * MSUB];
        let denom = gc * (1.0 - mu[i] * mu[i]);
        if denom > 0.0 && prefix[i].abs() > noise_scale * running_max {
            vals[i] = -prefix[i] / denom;
        }
    }

    // Endpoint expansions, blended over [0.6, 1.0] * u_ser.
    let u_ser = (10.0 / kappa.max(1.0)).min(blend_width).max(6.0 * h);
    let b_hi = (1.0 - a) / (d as f64 - 1.0);
    let b_lo = (1.0 + a) / (d as f64 - 1.0);
    let ser_hi = endpoint_series(d, kappa, b_hi, 1.0, u_ser);
    let ser_lo = endpoint_series(d, kappa, b_lo, -1.0, u_ser);
    for i in 0..n_mu {
        let s = mu[i];
        for (sign, ser) in [(1.0, &ser_hi), (-1.0, &ser_lo)] {
            let u = (s - sign).abs();
            if u <= u_ser {
                let series_val = eval_series(ser, (s - sign) / u_ser);
                let interior = vals[i];
                vals[i] = if u <= 0.6 * u_ser || !interior.is_finite() {
                    series_val
                } else {
                    let w = smoothstep((u - 0.6 * u_ser) / (0.4 * u_ser));
                    w * interior + (1.0 - w) * series_val
                };
            }
        }
    }

    // Tail fallback: cells outside the endpoint zones whose flux integral
    // drowned in roundoff (possible at large d, where the radial density is
    // extremely sharp). There the drift coefficient dominates the derivative
    // term and the bounded solution is the quasi-static ratio
    // (A - s) / (kappa (1-s^2) - (d-1) s) to relative accuracy O(1/(d-1)).
    for i in 0..n_mu {
        if !vals[i].is_finite() {
            let s = mu[i];
            let c = kappa * (1.0 - s * s) - (d as f64 - 1.0) * s;
            if c.abs() > 1.0 {
                vals[i] = (a - s) / c;
            }
        }
    }

    for (i, v) in vals.iter().enumerate() {
        if !v.is_finite() || *v <= 0.0 {
            return Err(Error::TableBuild(format!(
                "velocity scalar non-finite or non-positive at mu={}, kappa={} (value {})",
                mu[i], kappa, v
            )));
        }
    }
    Ok(vals)
}

// ---------------------------------------------------------------------------

/// Tabulated schedule-independent velocity scalar on the
/// `(cosine, concentration)` grid, with the Bessel-ratio column alongside.
/// Values are stored row-major with the cosine as the fast axis.
#[derive(Debug, Clone)]
pub struct VelocityTable {
    pub config: KernelConfig,
    values: Vec<f64>,
    bessel_col: Vec<f64>,
}

/// Radial sampling table: log-shifted density and normalized CDF per
/// concentration column, same layout as [`VelocityTable`].
#[derive(Debug, Clone)]
pub struct RadialCdfTable {
    pub config: KernelConfig,
    log_density: Vec<f64>,
    cdf: Vec<f64>,
}

impl VelocityTable {
    pub fn build(config: &KernelConfig) -> Result<Self> {
        config.validate()?;
        let kappas = config.kappa_axis();
        let mut values = Vec::with_capacity(config.n_mu * config.n_kappa);
        let mut bessel_col = Vec::with_capacity(config.n_kappa);
        for &k in &kappas {
            let col =
                build_psi_column(config.d, k, config.n_mu, config.blend_width, config.cf_tol)?;
            values.extend_from_slice(&col);
            bessel_col.push(bessel_ratio(config.d, k, config.cf_tol)?);
        }
        Ok(Self {
            config: *config,
            values,
            bessel_col,
        })
    }

    /// Stored value at grid node `(i, j)` = (cosine index, kappa index).
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.config.n_mu + i]
    }

    /// `A_d` at kappa node `j`.
    pub fn bessel_at(&self, j: usize) -> f64 {
        self.bessel_col[j]
    }

    pub fn bessel_col(&self) -> &[f64] {
        &self.bessel_col
    }

    /// Bilinear interpolation; arguments are clamped into the grid.
    pub fn lookup(&self, mu: f64, kappa: f64) -> f64 {
        let (i, fx) = locate(mu, -1.0, 1.0, self.config.n_mu);
        let (j, fy) = locate(kappa, 0.0, self.config.kappa_max, self.config.n_kappa);
        let v00 = self.at(i, j);
        let v10 = self.at(i + 1, j);
        let v01 = self.at(i, j + 1);
        let v11 = self.at(i + 1, j + 1);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = TableMeta::of(&self.config, "psi");
        let mut w = BufWriter::new(File::create(path)?);
        meta.write_header(&mut w)?;
        write_f64s(&mut w, &self.values)?;
        write_f64s(&mut w, &self.bessel_col)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, blob) = TableMeta::read(path, "psi")?;
        let config = meta.config();
        let n_grid = config.n_mu * config.n_kappa;
        let expect = n_grid + config.n_kappa;
        if blob.len() != expect {
            return Err(Error::Format(format!(
                "velocity table payload holds {} values, expected {}",
                blob.len(),
                expect
            )));
        }
        let bessel_col = blob[n_grid..].to_vec();
        let mut values = blob;
        values.truncate(n_grid);
        Ok(Self {
            config,
            values,
            bessel_col,
        })
    }
}

impl RadialCdfTable {
    pub fn build(config: &KernelConfig) -> Result<Self> {
        config.validate()?;
        let n_fine = (config.n_mu - 1) * MSUB + 1;
        let hf = 2.0 / (n_fine - 1) as f64;
        let mut log_density = Vec::with_capacity(config.n_mu * config.n_kappa);
        let mut cdf = Vec::with_capacity(config.n_mu * config.n_kappa);
        for &kappa in &config.kappa_axis() {
            let mut lf = Vec::with_capacity(n_fine);
            let mut max_lf = f64::NEG_INFINITY;
            for i in 0..n_fine {
                let m = (-1.0 + hf * i as f64).clamp(-1.0, 1.0);
                let v = log_radial_density(m, kappa, config.d);
                if v.is_finite() && v > max_lf {
                    max_lf = v;
                }
                lf.push(v);
            }
            let g: Vec<f64> = lf
                .iter()
                .map(|&v| {
                    if v.is_finite() {
                        (v - max_lf).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let mut acc = 0.0;
            let mut col = vec![0.0; config.n_mu];
            for base in 1..config.n_mu {
                let start = (base - 1) * MSUB;
                let mut i = start;
                while i + 2 <= start + MSUB {
                    acc += (g[i] + 4.0 * g[i + 1] + g[i + 2]) * hf / 3.0;
                    i += 2;
                }
                col[base] = acc;
            }
            let total = col[config.n_mu - 1];
            if total.is_nan() || total <= 0.0 {
                return Err(Error::TableBuild(format!(
                    "radial density integrates to {} at kappa={}",
                    total, kappa
                )));
            }
            for c in col.iter_mut() {
                *c /= total;
            }
            for w in col.windows(2) {
                if w[1] < w[0] {
                    return Err(Error::TableBuild(format!(
                        "CDF column not monotone at kappa={}",
                        kappa
                    )));
                }
            }
            for i in 0..config.n_mu {
                log_density.push(lf[i * MSUB] - max_lf);
            }
            cdf.extend_from_slice(&col);
        }
        Ok(Self {
            config: *config,
            log_density,
            cdf,
        })
    }

    pub fn cdf_at(&self, i: usize, j: usize) -> f64 {
        self.cdf[j * self.config.n_mu + i]
    }

    pub fn log_density_at(&self, i: usize, j: usize) -> f64 {
        self.log_density[j * self.config.n_mu + i]
    }

    /// Interpolated CDF value at `(mu, kappa)`.
    pub fn cdf_lookup(&self, mu: f64, kappa: f64) -> f64 {
        let (i, fx) = locate(mu, -1.0, 1.0, self.config.n_mu);
        let (j, fy) = locate(kappa, 0.0, self.config.kappa_max, self.config.n_kappa);
        let c0 = (1.0 - fy) * self.cdf_at(i, j) + fy * self.cdf_at(i, j + 1);
        let c1 = (1.0 - fy) * self.cdf_at(i + 1, j) + fy * self.cdf_at(i + 1, j + 1);
        (1.0 - fx) * c0 + fx * c1
    }

    /// Piecewise-linear inverse of the interpolated CDF column at `kappa`.
    /// Deterministic in `(kappa, u)`.
    pub fn sample_cosine(&self, kappa: f64, u: f64) -> f64 {
        let n = self.config.n_mu;
        let (j, fy) = locate(kappa, 0.0, self.config.kappa_max, self.config.n_kappa);
        let col = |i: usize| (1.0 - fy) * self.cdf_at(i, j) + fy * self.cdf_at(i, j + 1);
        let u = u.clamp(0.0, 1.0);
        // first node with cdf > u (node 0 is 0, node n-1 is 1)
        let mut lo = 0usize;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if col(mid) > u {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let c0 = col(lo);
        let c1 = col(hi);
        let mu0 = -1.0 + 2.0 * lo as f64 / (n - 1) as f64;
        let mu1 = -1.0 + 2.0 * hi as f64 / (n - 1) as f64;
        if c1 > c0 {
            mu0 + (u - c0) / (c1 - c0) * (mu1 - mu0)
        } else {
            mu1
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = TableMeta::of(&self.config, "cdf");
        let mut w = BufWriter::new(File::create(path)?);
        meta.write_header(&mut w)?;
        write_f64s(&mut w, &self.log_density)?;
        write_f64s(&mut w, &self.cdf)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, blob) = TableMeta::read(path, "cdf")?;
        let config = meta.config();
        let n_grid = config.n_mu * config.n_kappa;
        if blob.len() != 2 * n_grid {
            return Err(Error::Format(format!(
                "cdf table payload holds {} values, expected {}",
                blob.len(),
                2 * n_grid
            )));
        }
        let cdf = blob[n_grid..].to_vec();
        let mut log_density = blob;
        log_density.truncate(n_grid);
        Ok(Self {
            config,
            log_density,
            cdf,
        })
    }
}

/// Draw from vMF(w, kappa): cosine by inverse CDF, tangent direction from a
/// normalized projected Gaussian, composed as `mu w + sqrt(1 - mu^2) v`.
pub fn sample_vmf(w: &[f64], kappa: f64, table: &RadialCdfTable, rng: &mut impl Rng) -> Vec<f64> {
    let mu = table.sample_cosine(kappa, rng.random());
    let mut v;
    loop {
        v = geometry::standard_normal_vec(w.len(), rng);
        geometry::project_tangent_in_place(w, &mut v);
        if geometry::normalize_in_place(&mut v).is_ok() {
            break;
        }
    }
    let tang = (1.0 - mu * mu).max(0.0).sqrt();
    w.iter()
        .zip(&v)
        .map(|(wi, vi)| mu * wi + tang * vi)
        .collect()
}

/// Grid cell and fraction for a clamped query on a uniform axis.
#[inline]
fn locate(x: f64, lo: f64, hi: f64, n: usize) -> (usize, f64) {
    let pos = ((x - lo) / (hi - lo)).clamp(0.0, 1.0) * (n - 1) as f64;
    let i = (pos as usize).min(n - 2);
    (i, pos - i as f64)
}

// ---------------------------------------------------------------------------
// file format: one JSON metadata line, then raw little-endian f64 grids

#[derive(Serialize, Deserialize)]
struct TableMeta {
    schema_version: u32,
    kind: String,
    d: usize,
    kappa_max: f64,
    n_mu: usize,
    n_kappa: usize,
}

impl TableMeta {
    fn of(config: &KernelConfig, kind: &str) -> Self {
        Self {
            schema_version: 1,
            kind: kind.to_string(),
            d: config.d,
            kappa_max: config.kappa_max,
            n_mu: config.n_mu,
            n_kappa: config.n_kappa,
        }
    }

    fn config(&self) -> KernelConfig {
        let mut c = KernelConfig::new(self.d, self.kappa_max);
        c.n_mu = self.n_mu;
        c.n_kappa = self.n_kappa;
        c
    }

    fn write_header(&self, w: &mut impl Write) -> Result<()> {
        let line = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    }

    fn read(path: &Path, expect_kind: &str) -> Result<(Self, Vec<f64>)> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let meta: TableMeta =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(e.to_string()))?;
        if meta.schema_version != 1 {
            return Err(Error::Format(format!(
                "unsupported schema version {}",
                meta.schema_version
            )));
        }
        if meta.kind != expect_kind {
            return Err(Error::Format(format!(
                "table kind is '{}', expected '{}'",
                meta.kind, expect_kind
            )));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format(
                "payload is not a whole number of f64s".into(),
            ));
        }
        let blob = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((meta, blob))
    }
}

fn write_f64s(w: &mut impl Write, vals: &[f64]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-14;

    #[test]
    fn bessel_ratio_zero_kappa() {
        for d in [3, 4, 8, 16] {
            assert_eq!(bessel_ratio(d, 0.0, TOL).unwrap(), 0.0);
        }
    }

    /// Small-kappa law A_d(kappa) = kappa/d + O(kappa^3).
    #[test]
    fn bessel_ratio_small_kappa() {
        let a = bessel_ratio(10, 0.01, TOL).unwrap();
        assert!((a - 0.001).abs() < 1e-6, "A_10(0.01) = {}", a);
    }

    /// Closed form on S^2: A_3(kappa) = coth(kappa) - 1/kappa.
    #[test]
    fn bessel_ratio_matches_coth_oracle() {
        for kappa in [0.1, 1.0, 10.0, 100.0] {
            let oracle = 1.0 / f64::tanh(kappa) - 1.0 / kappa;
            let a = bessel_ratio(3, kappa, TOL).unwrap();
            assert!(
                (a - oracle).abs() < 1e-10,
                "kappa={}: {} vs {}",
                kappa,
                a,
                oracle
            );
        }
        let a1 = bessel_ratio(3, 1.0, TOL).unwrap();
        assert!((a1 - 0.3130352854993313).abs() < 1e-12);
    }

    #[test]
    fn bessel_ratio_monotone_and_below_one() {
        let mut prev = 0.0;
        for j in 1..=200 {
            let kappa = j as f64 * 1.25;
            let a = bessel_ratio(12, kappa, TOL).unwrap();
            assert!(a > prev && a < 1.0);
            prev = a;
        }
    }

    #[test]
    fn log_density_examples() {
        assert_eq!(log_radial_density(0.0, 0.0, 3), 0.0);
        assert_eq!(log_radial_density(0.5, 2.0, 3), 1.0);
        assert!((log_radial_density(0.6, 0.0, 5) - 0.64f64.ln()).abs() < 1e-12);
        assert!((log_radial_density(0.6, 0.0, 5) + 0.4462871026284195).abs() < 1e-7);
        assert_eq!(log_radial_density(1.0, 0.0, 5), f64::NEG_INFINITY);
        assert_eq!(log_radial_density(-1.0, 4.0, 8), f64::NEG_INFINITY);
        assert_eq!(log_radial_density(1.0, 4.0, 3), 4.0);
    }

    /// kappa = 0 closed form: the antiderivative of `y (1-y^2)^{(d-3)/2}`
    /// makes the column exactly 1/(d-1).
    #[test]
    fn psi_column_kappa_zero_is_constant() {
        for d in [3usize, 8, 12] {
            let col = build_psi_column(d, 0.0, 512, 0.10, TOL).unwrap();
            let expect = 1.0 / (d as f64 - 1.0);
            for v in &col {
                assert!((v - expect).abs() < 1e-9, "d={}: {} vs {}", d, v, expect);
            }
        }
    }

    /// Endpoint values equal the bounded-solution boundary formulas.
    #[test]
    fn psi_column_boundary_values() {
        for d in [3usize, 8, 12] {
            for kappa in [0.5, 5.0, 50.0] {
                let a = bessel_ratio(d, kappa, TOL).unwrap();
                let col = build_psi_column(d, kappa, 512, 0.10, TOL).unwrap();
                assert!((col[511] - (1.0 - a) / (d as f64 - 1.0)).abs() < 1e-8);
                assert!((col[0] - (1.0 + a) / (d as f64 - 1.0)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn psi_column_symmetric_at_kappa_zero() {
        let col = build_psi_column(8, 0.0, 512, 0.10, TOL).unwrap();
        for i in 0..256 {
            assert!((col[i] - col[511 - i]).abs() < 1e-9);
        }
    }

    /// Convergence under refinement: default grid vs a 4x grid at shared
    /// nodes, max-norm over |mu| <= 0.99 and the kappa axis.
    #[test]
    fn table_matches_refined_build() {
        let mut config = KernelConfig::new(8, 50.0);
        config.n_kappa = 65;
        let coarse = VelocityTable::build(&config).unwrap();
        let mut fine_cfg = config;
        fine_cfg.n_mu = 4 * (config.n_mu - 1) + 1;
        fine_cfg.n_kappa = 4 * (config.n_kappa - 1) + 1;
        let fine = VelocityTable::build(&fine_cfg).unwrap();
        let mut worst = 0.0f64;
        for j in 0..config.n_kappa {
            for i in 0..config.n_mu {
                let mu = -1.0 + 2.0 * i as f64 / (config.n_mu - 1) as f64;
                if mu.abs() <= 0.99 {
                    worst = worst.max((coarse.at(i, j) - fine.at(4 * i, 4 * j)).abs());
                }
            }
        }
        assert!(worst < 1e-4, "refinement deviation {}", worst);
    }

    /// Doubling the cosine resolution improves (or ties) the ODE residual.
    #[test]
    fn residual_improves_under_mu_refinement() {
        let residual = |n_mu: usize| -> f64 {
            let col = build_psi_column(8, 50.0, n_mu, 0.10, TOL).unwrap();
            let a = bessel_ratio(8, 50.0, TOL).unwrap();
            let h = 2.0 / (n_mu - 1) as f64;
            let mut worst = 0.0f64;
            for i in 2..n_mu - 2 {
                let s = -1.0 + h * i as f64;
                if s.abs() > 0.99 {
                    continue;
                }
                let dv =
                    (-col[i + 2] + 8.0 * col[i + 1] - 8.0 * col[i - 1] + col[i - 2]) / (12.0 * h);
                let r = (1.0 - s * s) * dv + (50.0 * (1.0 - s * s) - 7.0 * s) * col[i] - (a - s);
                worst = worst.max(r.abs());
            }
            worst
        };
        let coarse = residual(256);
        let fine = residual(512);
        assert!(
            fine <= coarse,
            "residual {} at 512 vs {} at 256",
            fine,
            coarse
        );
    }

    #[test]
    fn lookup_at_nodes_returns_stored_values() {
        let mut config = KernelConfig::new(5, 20.0);
        config.n_kappa = 64;
        let table = VelocityTable::build(&config).unwrap();
        for (i, j) in [(0usize, 0usize), (17, 3), (511, 63), (255, 31)] {
            let mu = -1.0 + 2.0 * i as f64 / 511.0;
            let kappa = 20.0 * j as f64 / 63.0;
            assert!((table.lookup(mu, kappa) - table.at(i, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn lookup_closed_forms() {
        let mut config = KernelConfig::new(3, 10.0);
        config.n_kappa = 64;
        let table = VelocityTable::build(&config).unwrap();
        for mu in [-0.9, -0.4, 0.0, 0.3, 0.77] {
            assert!((table.lookup(mu, 0.0) - 0.5).abs() < 1e-6);
        }
        let a = bessel_ratio(3, 10.0, TOL).unwrap();
        assert!((table.lookup(1.0, 10.0) - (1.0 - a) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn cdf_uniform_case_and_endpoints() {
        let mut config = KernelConfig::new(3, 5.0);
        config.n_kappa = 64;
        let table = RadialCdfTable::build(&config).unwrap();
        for i in 0..config.n_mu {
            let mu = -1.0 + 2.0 * i as f64 / 511.0;
            assert!((table.cdf_at(i, 0) - (mu + 1.0) / 2.0).abs() < 1e-6);
        }
        for j in 0..config.n_kappa {
            assert_eq!(table.cdf_at(0, j), 0.0);
            assert_eq!(table.cdf_at(config.n_mu - 1, j), 1.0);
            for i in 1..config.n_mu {
                assert!(table.cdf_at(i, j) >= table.cdf_at(i - 1, j));
            }
        }
    }

    /// The mean cosine sits in the bulk of the distribution.
    #[test]
    fn cdf_mass_around_mean_cosine() {
        let mut config = KernelConfig::new(8, 20.0);
        config.n_kappa = 64;
        let table = RadialCdfTable::build(&config).unwrap();
        let a = bessel_ratio(8, 20.0, TOL).unwrap();
        let c = table.cdf_lookup(a, 20.0);
        assert!(c > 0.3 && c < 0.7, "cdf(A_8(20)) = {}", c);
    }

    #[test]
    fn sample_cosine_basics() {
        let mut config = KernelConfig::new(3, 5.0);
        config.n_kappa = 64;
        let table = RadialCdfTable::build(&config).unwrap();
        assert_eq!(table.sample_cosine(2.0, 0.0), -1.0);
        assert!(table.sample_cosine(2.0, 1.0 - 1e-12) > 1.0 - 1e-6);
        let q = table.sample_cosine(0.0, 0.75);
        assert!((q - 0.5).abs() < 2.0 / 512.0, "uniform quantile {}", q);
    }

    #[test]
    fn inverse_cdf_roundtrip() {
        let mut config = KernelConfig::new(8, 30.0);
        config.n_kappa = 64;
        let table = RadialCdfTable::build(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let kappa: f64 = rng.random::<f64>() * 30.0;
            let u: f64 = rng.random();
            let mu = table.sample_cosine(kappa, u);
            let back = table.cdf_lookup(mu, kappa);
            assert!(
                (back - u).abs() < 2.0 / 512.0,
                "kappa={} u={} back={}",
                kappa,
                u,
                back
            );
        }
    }

    /// Empirical mean cosine of inverse-CDF samples matches the Bessel ratio.
    #[test]
    fn sample_cosine_mean_matches_bessel_ratio() {
        let mut config = KernelConfig::new(8, 15.0);
        config.n_kappa = 128;
        let table = RadialCdfTable::build(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let s = table.sample_cosine(10.0, rng.random());
            sum += s;
            sumsq += s * s;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let stderr = (var / n as f64).sqrt();
        let a = bessel_ratio(8, 10.0, TOL).unwrap();
        assert!(
            (mean - a).abs() < 3.0 * stderr,
            "{} vs {} (3se {})",
            mean,
            a,
            3.0 * stderr
        );
    }

    #[test]
    fn vmf_samples_are_unit_norm_and_concentrate() {
        let mut config = KernelConfig::new(16, 250.0);
        config.n_kappa = 128;
        let table = RadialCdfTable::build(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = crate::geometry::sample_uniform_sphere(16, &mut rng);
        let n = 20_000;
        let mut high = 0usize;
        for _ in 0..n {
            let x = sample_vmf(w.as_slice(), 250.0, &table, &mut rng);
            let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            let s: f64 = x.iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
            if s > 0.9 {
                high += 1;
            }
        }
        // A_16(250) ~ 1 - 15/500 = 0.97 with spread ~ 1e-2
        assert!(high as f64 / n as f64 >= 0.99, "{} of {}", high, n);
    }

    /// At kappa = 0 the sampler must reproduce the uniform cosine law.
    #[test]
    fn vmf_kappa_zero_is_uniform() {
        let mut config = KernelConfig::new(3, 5.0);
        config.n_kappa = 64;
        let table = RadialCdfTable::build(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = crate::geometry::sample_uniform_sphere(3, &mut rng);
        let n = 100_000;
        let mut cosines: Vec<f64> = (0..n)
            .map(|_| {
                let x = sample_vmf(w.as_slice(), 0.0, &table, &mut rng);
                x.iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
            })
            .collect();
        cosines.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks = 0.0f64;
        for (i, c) in cosines.iter().enumerate() {
            let f = (c + 1.0) / 2.0;
            ks = ks
                .max((f - i as f64 / n as f64).abs())
                .max((f - (i + 1) as f64 / n as f64).abs());
        }
        assert!(ks < 0.01, "KS {}", ks);
    }

    #[test]
    fn table_io_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = KernelConfig::new(5, 12.0);
        config.n_mu = 128;
        config.n_kappa = 64;
        let psi = VelocityTable::build(&config).unwrap();
        let cdf = RadialCdfTable::build(&config).unwrap();
        let p1 = dir.path().join("velocity.tbl");
        let p2 = dir.path().join("radial_cdf.tbl");
        psi.save(&p1).unwrap();
        cdf.save(&p2).unwrap();
        let psi2 = VelocityTable::load(&p1).unwrap();
        let cdf2 = RadialCdfTable::load(&p2).unwrap();
        assert_eq!(psi.values, psi2.values);
        assert_eq!(psi.bessel_col, psi2.bessel_col);
        assert_eq!(cdf.cdf, cdf2.cdf);
        assert_eq!(cdf.log_density, cdf2.log_density);
        // kind/dimension mismatches must be rejected
        assert!(VelocityTable::load(&p2).is_err());
        let truncated = dir.path().join("broken.tbl");
        let bytes = std::fs::read(&p1).unwrap();
        std::fs::write(&truncated, &bytes[..bytes.len() - 16]).unwrap();
        assert!(VelocityTable::load(&truncated).is_err());
    }
}

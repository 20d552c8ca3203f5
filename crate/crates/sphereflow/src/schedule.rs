//! Concentration schedule and the learned piecewise-linear time warp.
//!
//! Training draws `t` from a learned distribution instead of U(0,1): a
//! monotone piecewise-linear `F_raw` with `n_bins` bins is fit by least
//! squares to the per-sample cross-entropy curve, and the normalized
//! `F = F_raw / F_raw(1)` serves as a CDF inverted for sampling. The same
//! warp drives warp-aware inference spacing.

use serde::{Deserialize, Serialize};

/// Linear concentration schedule `kappa_t = kappa_max * t`; strictly
/// increasing, continuously differentiable, `kappa_0 = 0`.
#[derive(Debug, Clone, Copy)]
pub struct ConcentrationSchedule {
    pub kappa_max: f64,
}

impl ConcentrationSchedule {
    pub fn kappa(&self, t: f64) -> f64 {
        self.kappa_max * t
    }

    pub fn kappa_dot(&self, _t: f64) -> f64 {
        self.kappa_max
    }
}

/// Piecewise-linear time warp with learnable input widths and output heights.
///
/// Input bin widths are `softmax(logits_in)`; output heights are
/// `softmax(logits_out)` for the normalized CDF and `exp(logits_out)` for the
/// unnormalized curve. Heights are strictly positive, so the CDF has no flat
/// segments and inversion is exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WarpSchedule {
    pub n_bins: usize,
    pub beta: f64,
    pub logits_in: Vec<f64>,
    pub logits_out: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl WarpSchedule {
    /// Identity warp: all logits at `-log n_bins`.
    pub fn identity(n_bins: usize) -> Self {
        assert!(n_bins >= 2, "warp needs at least two bins");
        let init = -(n_bins as f64).ln();
        Self {
            n_bins,
            beta: 1.0,
            logits_in: vec![init; n_bins],
            logits_out: vec![init; n_bins],
        }
    }

    /// Unnormalized curve value at t = 1: `sum(exp(logits_out))`.
    pub fn raw_total(&self) -> f64 {
        self.logits_out.iter().map(|&l| l.exp()).sum()
    }

    fn widths(&self) -> Vec<f64> {
        softmax(&self.logits_in)
    }

    fn heights(&self) -> Vec<f64> {
        softmax(&self.logits_out)
    }

    /// Bin index holding `t` plus the fraction inside the bin, given widths.
    fn locate(widths: &[f64], t: f64) -> (usize, f64, f64) {
        let mut edge = 0.0;
        for (j, &w) in widths.iter().enumerate() {
            let next = if j + 1 == widths.len() { 1.0 } else { edge + w };
            if t < next || j + 1 == widths.len() {
                let frac = if w > 0.0 {
                    ((t - edge) / w).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                return (j, edge, frac);
            }
            edge = next;
        }
        unreachable!()
    }

    /// Normalized CDF `F(t)`, raised to `beta` when `beta != 1`.
    pub fn cdf(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        if t == 0.0 {
            return 0.0;
        }
        if t == 1.0 {
            return 1.0;
        }
        let widths = self.widths();
        let heights = self.heights();
        let (j, _, frac) = Self::locate(&widths, t);
        let base: f64 = heights[..j].iter().sum();
        let f = base + frac * heights[j];
        if self.beta == 1.0 {
            f
        } else {
            f.powf(self.beta)
        }
    }

    /// Exact piecewise-linear inverse: `cdf(inverse(u)) = u`.
    pub fn inverse(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        if u == 0.0 {
            return 0.0;
        }
        if u == 1.0 {
            return 1.0;
        }
        let u = if self.beta == 1.0 {
            u
        } else {
            u.powf(1.0 / self.beta)
        };
        let widths = self.widths();
        let heights = self.heights();
        let mut base = 0.0;
        let mut edge = 0.0;
        for j in 0..self.n_bins {
            let next = base + heights[j];
            if u < next || j + 1 == self.n_bins {
                return edge + (u - base) / heights[j] * widths[j];
            }
            base = next;
            edge += widths[j];
        }
        unreachable!()
    }

    /// Step placement uniform in the warp coordinate: `t_i = inverse(i/n)`.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        assert!(n >= 1);
        (0..=n).map(|i| self.inverse(i as f64 / n as f64)).collect()
    }

    /// One gradient-descent step on the squared regression loss
    /// `mean((F(t)^beta * F_raw(1) - loss)^2)`.
    ///
    /// `batch` holds `(t, per_sample_loss)` pairs.
    pub fn fit_step(&mut self, batch: &[(f64, f64)], step_size: f64) {
        let (grad_in, grad_out) = self.fit_gradients(batch);
        for (l, g) in self.logits_in.iter_mut().zip(&grad_in) {
            *l -= step_size * g;
        }
        for (l, g) in self.logits_out.iter_mut().zip(&grad_out) {
            *l -= step_size * g;
        }
    }

    /// Analytic gradients of the regression loss with respect to both logit
    /// sets, through the softmaxes and the piecewise-linear interpolation.
    pub fn fit_gradients(&self, batch: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
        if batch.is_empty() {
            return (vec![0.0; self.n_bins], vec![0.0; self.n_bins]);
        }
        let widths = self.widths();
        let heights_exp: Vec<f64> = self.logits_out.iter().map(|&l| l.exp()).collect();
        let total: f64 = heights_exp.iter().sum();
        let inv_n = 1.0 / batch.len() as f64;

        let mut grad_in = vec![0.0; self.n_bins];
        let mut grad_out = vec![0.0; self.n_bins];

        for &(t, target) in batch {
            let t = t.clamp(0.0, 1.0);
            let (j, edge, frac) = Self::locate(&widths, t);
            // raw curve value F_raw(t) and its gradients
            let raw_t: f64 = heights_exp[..j].iter().sum::<f64>() + frac * heights_exp[j];

            // prediction y = F^beta * total with F = raw_t / total
            let f_norm = (raw_t / total).clamp(1e-300, 1.0);
            let y = if self.beta == 1.0 {
                raw_t
            } else {
                f_norm.powf(self.beta) * total
            };
            let err = 2.0 * (y - target) * inv_n;

            // dy/d raw_t and dy/d total
            let (dy_draw, dy_dtotal) = if self.beta == 1.0 {
                (1.0, 0.0)
            } else {
                (
                    self.beta * f_norm.powf(self.beta - 1.0),
                    (1.0 - self.beta) * f_norm.powf(self.beta),
                )
            };

            // output logits: d raw_t/d o_m = e_m [m<j] + delta_mj frac e_j,
            // d total/d o_m = e_m
            for m in 0..self.n_bins {
                let draw = if m < j {
                    heights_exp[m]
                } else if m == j {
                    frac * heights_exp[j]
                } else {
                    0.0
                };
                grad_out[m] += err * (dy_draw * draw + dy_dtotal * heights_exp[m]);
            }

            // input logits act through frac = (t - edge)/w_j with
            // d edge/d l_r = w_r([r<j] - edge) and d w_j/d l_r = w_j(d_jr - w_r)
            let wj = widths[j];
            if wj > 0.0 {
                let dfrac_dedge = -1.0 / wj;
                let dfrac_dwj = -(t - edge) / (wj * wj);
                for r in 0..self.n_bins {
                    let ind = if r < j { 1.0 } else { 0.0 };
                    let dedge = widths[r] * (ind - edge);
                    let dwj = widths[j] * (((r == j) as u8 as f64) - widths[r]);
                    let dfrac = dfrac_dedge * dedge + dfrac_dwj * dwj;
                    grad_in[r] += err * dy_draw * heights_exp[j] * dfrac;
                }
            }
        }
        (grad_in, grad_out)
    }
}

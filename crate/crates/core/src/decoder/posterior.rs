//! Tempered Poisson spike-and-slab posterior over a truncated count support.
//!
//! Prior: `P(0) = (1−α) + α e^{−λ}`, `P(k) = α λᵏ e^{−λ} / k!` for `k ≥ 1`.
//! Likelihood: `R = x + w`, `w ~ N(0, V)`. Weights are
//! `exp([log P(x) − (R−x)²/(2V)] / τ)` normalised over `x ∈ {0..x_max}`.

use std::rc::Rc;

use crate::numkernel::{CustomOp, Tape, Tensor, Var};

/// Mean, variance and activity probability of one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub var: f64,
    pub p_active: f64,
    /// Set when every weight underflowed and a fallback was returned.
    pub underflow: bool,
}

pub const NU_FLOOR: f64 = 1e-8;

/// Unnormalised tempered log-weights `u_x · 1/τ` are built from these.
fn log_prior(x: usize, alpha: f64, lambda: f64, log_fact: &[f64]) -> f64 {
    if x == 0 {
        ((1.0 - alpha) + alpha * (-lambda).exp()).ln()
    } else {
        alpha.ln() + x as f64 * lambda.ln() - lambda - log_fact[x]
    }
}

/// `ln k!` for `k = 0..=x_max`.
pub fn log_factorials(x_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x_max + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=x_max {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Fills `w` with normalised weights; returns false on total underflow.
fn weights(
    r: f64,
    v: f64,
    alpha: f64,
    lambda: f64,
    tau: f64,
    log_fact: &[f64],
    w: &mut [f64],
) -> bool {
    let (la, ll) = (alpha.ln(), lambda.ln());
    let inv_2v = 1.0 / (2.0 * v);
    let inv_tau = 1.0 / tau;
    let mut max = f64::NEG_INFINITY;
    for (x, wx) in w.iter_mut().enumerate() {
        let diff = r - x as f64;
        let prior = if x == 0 {
            log_prior(0, alpha, lambda, log_fact)
        } else {
            la + x as f64 * ll - lambda - log_fact[x]
        };
        let u = (prior - diff * diff * inv_2v) * inv_tau;
        *wx = u;
        if u > max {
            max = u;
        }
    }
    if !max.is_finite() {
        return false;
    }
    let mut z = 0.0;
    for wx in w.iter_mut() {
        *wx = (*wx - max).exp();
        z += *wx;
    }
    if !(z > 0.0) || !z.is_finite() {
        return false;
    }
    let inv_z = 1.0 / z;
    w.iter_mut().for_each(|wx| *wx *= inv_z);
    true
}

fn summarise(w: &[f64]) -> (f64, f64, f64) {
    let mean: f64 = w.iter().enumerate().map(|(x, wx)| wx * x as f64).sum();
    let var: f64 = w
        .iter()
        .enumerate()
        .map(|(x, wx)| wx * (x as f64 - mean).powi(2))
        .sum();
    (mean, var, 1.0 - w[0])
}

/// Posterior moments of one coordinate. `τ = 1` is exact Bayes.
pub fn posterior_moments(r: f64, v: f64, alpha: f64, lambda: f64, tau: f64, x_max: usize) -> Moments {
    assert!(v > 0.0 && tau > 0.0, "posterior needs V > 0 and τ > 0");
    let log_fact = log_factorials(x_max);
    let mut w = vec![0.0; x_max + 1];
    moments_with(r, v, alpha, lambda, tau, &log_fact, &mut w)
}

fn moments_with(
    r: f64,
    v: f64,
    alpha: f64,
    lambda: f64,
    tau: f64,
    log_fact: &[f64],
    w: &mut [f64],
) -> Moments {
    if !weights(r, v, alpha, lambda, tau, log_fact, w) {
        return Moments {
            mean: 0.0,
            var: NU_FLOOR,
            p_active: 0.0,
            underflow: true,
        };
    }
    let (mean, var, p_active) = summarise(w);
    Moments {
        mean,
        var,
        p_active,
        underflow: false,
    }
}

/// Fused tape operation: inputs `(R, V, α, λ, τ)`, output `[3, n]` rows
/// `(mean, var, p_active)`.
struct PosteriorOp {
    x_max: usize,
    log_fact: Vec<f64>,
}

impl CustomOp for PosteriorOp {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let (r, v, alpha, lambda) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data());
        let tau = inputs[4].item();
        let n = r.len();
        let (gm, gv, gp) = (&grad[..n], &grad[n..2 * n], &grad[2 * n..]);
        let mut g_r = vec![0.0; n];
        let mut g_v = vec![0.0; n];
        let mut g_a = vec![0.0; n];
        let mut g_l = vec![0.0; n];
        let mut g_tau = 0.0;
        let mut w = vec![0.0; self.x_max + 1];
        let mut gs = vec![0.0; self.x_max + 1];
        for j in 0..n {
            if gm[j] == 0.0 && gv[j] == 0.0 && gp[j] == 0.0 {
                continue;
            }
            if !weights(r[j], v[j], alpha[j], lambda[j], tau, &self.log_fact, &mut w) {
                continue;
            }
            let (m, var) = (output.at(0, j), output.at(1, j));
            // adjoint of each tempered logit
            for x in 0..=self.x_max {
                let dx = x as f64 - m;
                let dp = -w[0] * (if x == 0 { 1.0 } else { 0.0 } - w[x]);
                gs[x] = gm[j] * w[x] * dx + gv[j] * w[x] * (dx * dx - var) + gp[j] * dp;
            }
            let (rj, vj, aj, lj) = (r[j], v[j], alpha[j], lambda[j]);
            let p0 = (1.0 - aj) + aj * (-lj).exp();
            for (x, &g) in gs.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let diff = rj - x as f64;
                g_r[j] += g * (-diff / (vj * tau));
                g_v[j] += g * (diff * diff / (2.0 * vj * vj * tau));
                let u = log_prior(x, aj, lj, &self.log_fact) - diff * diff / (2.0 * vj);
                if u.is_finite() {
                    g_tau += g * (-u / (tau * tau));
                }
                if x == 0 {
                    g_a[j] += g * ((-lj).exp() - 1.0) / (p0 * tau);
                    g_l[j] += g * (-aj * (-lj).exp()) / (p0 * tau);
                } else if aj > 0.0 {
                    g_a[j] += g / (aj * tau);
                    g_l[j] += g * (x as f64 / lj - 1.0) / tau;
                }
            }
        }
        vec![g_r, g_v, g_a, g_l, vec![g_tau]]
    }
}

/// Records the posterior of every coordinate on the tape. Returns the
/// `[3, n]` node and the number of coordinates that underflowed.
pub fn posterior_on_tape<'t>(
    tape: &'t Tape,
    r: Var<'t>,
    v: Var<'t>,
    alpha: Var<'t>,
    lambda: Var<'t>,
    tau: Var<'t>,
    x_max: usize,
) -> (Var<'t>, usize) {
    let log_fact = log_factorials(x_max);
    let (rv, vv, av, lv) = (r.value(), v.value(), alpha.value(), lambda.value());
    let t = tau.item();
    let n = rv.len();
    let mut out = vec![0.0; 3 * n];
    let mut w = vec![0.0; x_max + 1];
    let mut underflows = 0;
    for j in 0..n {
        let mo = moments_with(
            rv.data()[j],
            vv.data()[j],
            av.data()[j],
            lv.data()[j],
            t,
            &log_fact,
            &mut w,
        );
        underflows += usize::from(mo.underflow);
        out[j] = mo.mean;
        out[n + j] = mo.var;
        out[2 * n + j] = mo.p_active;
    }
    let value = Tensor::matrix(3, n, out).unwrap_or_else(|_| Tensor::filled(&[3, n], f64::NAN));
    let node = tape.custom(
        &[r, v, alpha, lambda, tau],
        value,
        Rc::new(PosteriorOp { x_max, log_fact }),
    );
    (node, underflows)
}

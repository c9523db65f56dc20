//! Unrolled AMP-style activity decoder.
//!
//! Each layer runs an output (measurement-domain) update, an input
//! (codeword-domain) update that combines a tempered Poisson spike-and-slab
//! posterior with a small CNN denoiser, and damped EM refinements of the
//! Poisson rates, activity priors and noise variance. Everything is recorded
//! on a [`Tape`] so the same code path serves inference and end-to-end
//! training.
//!
//! Within a layer the input block uses the measurement variance and residual
//! produced by that layer's output block.

mod params;
mod posterior;
mod project;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::uracode::UraCodebook;

pub use params::{
    maps, Cnn, DecoderParams, LayerParams, LayerScalars, LayerVars, ParamVars, CNN_IN,
    CNN_KERNEL, CNN_WIDTH, TAU_MIN, ZETA_CLOSED_RAW,
};
pub use posterior::{log_factorials, posterior_moments, posterior_on_tape, Moments, NU_FLOOR};
pub use project::project_counts;

pub const LAMBDA_MIN: f64 = 1e-6;
pub const SIGMA2_MIN: f64 = 1e-8;
pub const LOG_RATE_STD_EPS: f64 = 1e-6;
pub const RHO_MIN: f64 = 0.05;
pub const RHO_MAX: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// Trainable scalars and CNN refinement.
    Learned,
    /// Frozen default scalars, CNN gate closed.
    Fixed,
}

impl std::str::FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "fixed" => Ok(Self::Fixed),
            other => Err(Error::InvalidArgument(format!("unknown decoder mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Learned => "learned",
            Self::Fixed => "fixed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Prior mean of the active-device count, used for the initial rates.
    pub prior_ka_mean: f64,
    /// Posterior support truncation; `None` picks `max(32, 3·prior_ka_mean)`.
    #[serde(default)]
    pub x_max: Option<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::new(3.0)
    }
}

impl DecoderConfig {
    pub fn new(prior_ka_mean: f64) -> Self {
        Self {
            prior_ka_mean,
            x_max: None,
        }
    }

    pub fn support(&self) -> usize {
        self.x_max
            .unwrap_or_else(|| 32usize.max((3.0 * self.prior_ka_mean).ceil() as usize))
    }
}

/// Per-slot decoder iterates.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState<'t> {
    pub x_hat: Var<'t>,
    pub nu: Var<'t>,
    pub z: Var<'t>,
    pub v: Var<'t>,
    pub r: Var<'t>,
    pub lambda: Var<'t>,
    pub alpha: Var<'t>,
    /// Scalar noise variance.
    pub sigma2: Var<'t>,
    /// Scalar `Σλ`.
    pub ka_hat: Var<'t>,
}

/// Codeword-domain outputs of an input block.
#[derive(Debug, Clone, Copy)]
pub struct InputOutputs<'t> {
    /// Pseudo-observation `R`.
    pub pseudo_obs: Var<'t>,
    /// Pseudo-channel variance `V_i`.
    pub pseudo_var: Var<'t>,
    pub mean: Var<'t>,
    pub var: Var<'t>,
    pub p_active: Var<'t>,
    /// CNN refinement, absent when the gate is closed in fixed mode.
    pub refined: Option<Var<'t>>,
    pub underflows: usize,
}

/// Batch-averaged (or per-slot) posterior statistics feeding the EM step.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorStats<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
    pub p_active: Var<'t>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub residual_norm: f64,
    pub ka_hat: f64,
    pub sigma2: f64,
    pub rho_lambda: f64,
    pub underflows: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Diagnostics {
    pub initial_ka_hat: f64,
    pub initial_sigma2: f64,
    pub layers: Vec<LayerDiagnostics>,
}

fn ones<'t>(tape: &'t Tape, n: usize) -> Var<'t> {
    tape.constant(Tensor::filled(&[n], 1.0))
}

/// Fresh per-slot state: `x̂=0, ν=1, z=y, v=1`, uniform rates
/// `prior_ka_mean/n`, `α = 1−e^{−λ}`, and
/// `σ² = max(mean(y²) − prior_ka_mean/l, σ²_min)`.
pub fn init_state<'t>(tape: &'t Tape, y: Var<'t>, prior_ka_mean: f64, n: usize) -> DecoderState<'t> {
    let l = y.value().len();
    let rate = prior_ka_mean / n as f64;
    let lambda = tape.constant(Tensor::filled(&[n], rate.max(LAMBDA_MIN)));
    let alpha = lambda.neg().exp().rsub_const(1.0);
    let sigma2 = y
        .square()
        .mean()
        .add_const(-prior_ka_mean / l as f64)
        .floor_at(SIGMA2_MIN);
    DecoderState {
        x_hat: tape.constant(Tensor::zeros(&[n])),
        nu: ones(tape, n),
        z: y,
        v: ones(tape, l),
        r: y.sub(y),
        lambda,
        alpha,
        sigma2,
        ka_hat: lambda.sum(),
    }
}

/// Measurement-domain update. `csyn` is `C_syn` (`n×l`), `csq` its
/// elementwise square.
pub fn output_block<'t>(
    state: &mut DecoderState<'t>,
    csyn: Var<'t>,
    csq: Var<'t>,
    y: Var<'t>,
    gamma: Var<'t>,
    eta: Var<'t>,
) -> Result<()> {
    let z_tmp = csyn.matvec_t(state.x_hat)?;
    let v_new = csq.matvec_t(state.nu)?;
    let d = state.v.shift(state.sigma2);
    let r_old = y.sub(state.z);
    let correction = r_old.mul(v_new.div(d)).scale(gamma);
    let z_tilde = z_tmp.sub(correction);
    let keep = eta;
    let blend = eta.rsub_const(1.0);
    state.z = state.z.scale(keep).add(z_tilde.scale(blend));
    state.v = state.v.scale(keep).add(v_new.scale(blend));
    state.r = y.sub(state.z);
    Ok(())
}

/// `(log λ − mean) / (std + ε)` over codewords.
pub fn standardised_log_rates<'t>(lambda: Var<'t>) -> Var<'t> {
    let tape = lambda.tape();
    let log_l = lambda.log();
    let centred = log_l.shift(log_l.mean().neg());
    let std = centred.square().mean().sqrt();
    let inv = tape.scalar(1.0).div(std.add_const(LOG_RATE_STD_EPS));
    centred.scale(inv)
}

fn cnn_forward<'t>(features: Var<'t>, layer: &LayerVars<'t>) -> Result<Var<'t>> {
    let h1 = features.conv1d(layer.w1, true)?.add_channel_bias(layer.b1)?.relu();
    let h2 = h1.conv1d(layer.w2, true)?.add_channel_bias(layer.b2)?.relu();
    let out = h2.conv1d(layer.w3, true)?.add_channel_bias(layer.b3)?;
    Ok(out.row(0))
}

/// Codeword-domain update: pseudo-channel, posterior moments, CNN
/// refinement and gated blend into `x̂`. Sets `ν` to the floored posterior
/// variance.
#[allow(clippy::too_many_arguments)]
pub fn input_block<'t>(
    state: &mut DecoderState<'t>,
    csyn: Var<'t>,
    csq: Var<'t>,
    layer: &LayerVars<'t>,
    mode: DecoderMode,
    x_max: usize,
) -> Result<InputOutputs<'t>> {
    let tape = csyn.tape();
    let l = state.v.value().len();
    let n = state.x_hat.value().len();
    let d = state.v.shift(state.sigma2);
    let kappa = ones(tape, l).div(d).scale(layer.beta());
    let psi = csq.matvec(kappa)?;
    if psi.value().data().iter().any(|&p| p <= 0.0) {
        return Err(Error::Divergence("non-positive pseudo-channel precision".into()));
    }
    let pseudo_var = ones(tape, n).div(psi);
    let rho = csyn.matvec(kappa.mul(state.r))?;
    let pseudo_obs = state.x_hat.add(rho.div(psi));
    let (post, underflows) = posterior_on_tape(
        tape,
        pseudo_obs,
        pseudo_var,
        state.alpha,
        state.lambda,
        layer.tau(),
        x_max,
    );
    let mean = post.row(0);
    let var = post.row(1);
    let p_active = post.row(2);
    state.nu = var.floor_at(NU_FLOOR);

    let zeta = layer.zeta();
    let refined = match mode {
        DecoderMode::Fixed => None,
        DecoderMode::Learned => {
            let features = tape.stack(&[
                pseudo_obs,
                pseudo_var.sqrt(),
                mean,
                state.nu.sqrt(),
                state.alpha,
                standardised_log_rates(state.lambda),
            ])?;
            Some(cnn_forward(features, layer)?)
        }
    };
    let bayes = mean.scale(zeta.rsub_const(1.0));
    state.x_hat = match refined {
        Some(x_tilde) => bayes.add(x_tilde.scale(zeta)),
        None => bayes,
    };
    Ok(InputOutputs {
        pseudo_obs,
        pseudo_var,
        mean,
        var,
        p_active,
        refined,
        underflows,
    })
}

/// Step size from the posterior confidence `c = mean_j(m̄_j² / v̄_j)`:
/// `clamp(c/(1+c), 0.05, 0.95)`.
pub fn confidence_step<'t>(stats: &PosteriorStats<'t>) -> Var<'t> {
    let c = stats
        .mean
        .square()
        .div(stats.var.floor_at(NU_FLOOR))
        .mean();
    c.div(c.add_const(1.0)).clamp(RHO_MIN, RHO_MAX)
}

/// Damped EM refinement of `λ`, `α` and `σ²` with an explicit step size.
pub fn em_update_with_step<'t>(
    state: &mut DecoderState<'t>,
    stats: &PosteriorStats<'t>,
    rho_lambda: Var<'t>,
    alpha_gate: Var<'t>,
    sigma_gate: Var<'t>,
) {
    let proposal = stats.mean.floor_at(LAMBDA_MIN);
    let log_l = state.lambda.log();
    let log_l = log_l.add(proposal.log().sub(log_l).scale(rho_lambda));
    state.lambda = log_l.exp();
    state.ka_hat = state.lambda.sum();
    let prior_activity = state.lambda.neg().exp().rsub_const(1.0);
    state.alpha = stats
        .p_active
        .scale(alpha_gate)
        .add(prior_activity.scale(alpha_gate.rsub_const(1.0)));

    let sigma2_hat = state
        .r
        .square()
        .sub(state.v)
        .floor_at(SIGMA2_MIN)
        .mean();
    let log_s = state
        .sigma2
        .log()
        .scale(sigma_gate.rsub_const(1.0))
        .add(sigma2_hat.log().scale(sigma_gate));
    state.sigma2 = log_s.exp();
}

/// EM refinement with the confidence-controlled step. Returns the step.
pub fn em_update<'t>(
    state: &mut DecoderState<'t>,
    stats: &PosteriorStats<'t>,
    layer: &LayerVars<'t>,
) -> Var<'t> {
    let rho = confidence_step(stats);
    em_update_with_step(state, stats, rho, layer.alpha_gate(), layer.sigma_gate());
    rho
}

/// Decoder output on the tape.
#[derive(Debug, Clone)]
pub struct Forward<'t> {
    pub x_hat: Var<'t>,
    pub ka_hat: Var<'t>,
    pub diagnostics: Diagnostics,
}

fn debug_check_positive(state: &DecoderState<'_>) {
    if cfg!(debug_assertions) {
        let pos = |v: Var<'_>| v.value().data().iter().all(|&x| x > 0.0);
        debug_assert!(pos(state.nu), "ν must stay positive");
        debug_assert!(pos(state.v), "v must stay positive");
        debug_assert!(pos(state.lambda), "λ must stay positive");
        debug_assert!(pos(state.sigma2), "σ² must stay positive");
    }
}

/// Runs `layers` unrolled layers on the tape.
#[allow(clippy::too_many_arguments)]
pub fn forward<'t>(
    tape: &'t Tape,
    y: Var<'t>,
    csyn: Var<'t>,
    params: &ParamVars<'t>,
    mode: DecoderMode,
    cfg: &DecoderConfig,
    layers: usize,
) -> Result<Forward<'t>> {
    let (n, l) = {
        let c = csyn.value();
        (c.rows(), c.cols())
    };
    if y.value().len() != l {
        return Err(Error::Shape(format!(
            "received signal length {} vs codeword length {l}",
            y.value().len()
        )));
    }
    if layers > params.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "{layers} layers requested, parameters hold {}",
            params.layers.len()
        )));
    }
    let x_max = cfg.support();
    let csq = csyn.square();
    let mut state = init_state(tape, y, cfg.prior_ka_mean, n);
    let mut diagnostics = Diagnostics {
        initial_ka_hat: state.ka_hat.item(),
        initial_sigma2: state.sigma2.item(),
        layers: Vec::with_capacity(layers),
    };
    for (idx, layer) in params.layers.iter().take(layers).enumerate() {
        output_block(&mut state, csyn, csq, y, layer.gamma(), layer.eta())?;
        let outs = input_block(&mut state, csyn, csq, layer, mode, x_max)?;
        let stats = PosteriorStats {
            mean: outs.mean,
            var: outs.var,
            p_active: outs.p_active,
        };
        let rho = em_update(&mut state, &stats, layer);
        debug_check_positive(&state);
        diagnostics.layers.push(LayerDiagnostics {
            layer: idx,
            residual_norm: state.r.value().sq_norm().sqrt(),
            ka_hat: state.ka_hat.item(),
            sigma2: state.sigma2.item(),
            rho_lambda: rho.item(),
            underflows: outs.underflows,
        });
        if log::log_enabled!(log::Level::Trace) {
            log::trace!(
                "layer {idx}: |r|={:.4e} ka_hat={:.4} sigma2={:.4e}",
                diagnostics.layers[idx].residual_norm,
                diagnostics.layers[idx].ka_hat,
                diagnostics.layers[idx].sigma2
            );
        }
    }
    tape.check()?;
    Ok(Forward {
        x_hat: state.x_hat,
        ka_hat: state.ka_hat,
        diagnostics,
    })
}

/// Result of decoding one fragment slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Real-valued count estimate before projection.
    pub x_real: Vec<f64>,
    /// Continuous active-device estimate `Σλ`.
    pub ka_hat: f64,
    pub diagnostics: Diagnostics,
}

/// Decodes one received slot `y` with the given codebook and parameters.
pub fn decode(
    y: &[f64],
    codebook: &UraCodebook,
    params: &DecoderParams,
    mode: DecoderMode,
    cfg: &DecoderConfig,
    layers: usize,
) -> Result<Decoded> {
    let tape = Tape::new();
    let yv = tape.constant(Tensor::new(vec![y.len()], y.to_vec())?);
    let csyn = tape.constant(codebook.codewords());
    let pv = params.on_tape(&tape, false);
    let out = forward(&tape, yv, csyn, &pv, mode, cfg, layers)?;
    Ok(Decoded {
        x_real: out.x_hat.value().data().to_vec(),
        ka_hat: out.ka_hat.item(),
        diagnostics: out.diagnostics,
    })
}

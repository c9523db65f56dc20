//! Desk-scale federated edge learning loop.
//!
//! Each round the BS trains on its own data and builds the quantisation
//! codebook, the active devices train locally, quantise their
//! (error-feedback corrected) updates and transmit codewords, and the BS
//! decodes, aggregates and applies the global step.

mod task;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_round, AggregationRule};
use crate::channel::{self, ChannelConfig};
use crate::decoder::{decode, project_counts, DecoderConfig, DecoderMode, DecoderParams};
use crate::error::{Error, Result};
use crate::numkernel::RngStream;
use crate::trainer::RoundRecord;
use crate::uracode::{encode_slot, ActivityVector, UraCodebook};
use crate::vq::{build_codebook, fragment_update, CurvatureProxy, ErrorFeedbackState, Ordering, DEFAULT_CURVATURE_EPS};

pub use task::{local_train, make_task, partition_data, Dataset, LocalTraining, Mlp, TaskData, TaskSpec};

/// Error-feedback accumulators larger than this multiple of the update norm
/// trigger a warning.
pub const EF_BLOWUP_FACTOR: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Uplink {
    /// Exact, unquantised average of the device updates.
    Perfect,
    /// Quantised updates aggregated from exact counts (channel bypassed).
    Quantised,
    /// Codewords over the AWGN channel, decoded by the unrolled decoder.
    DigitalOta { mode: DecoderMode, snr_db: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeelConfig {
    pub total_devices: usize,
    /// Inclusive range for the number of active devices per round.
    pub ka_range: [usize; 2],
    pub rounds: usize,
    pub local: LocalTraining,
    pub global_lr: f64,
    pub iid_fraction: f64,
    pub corruption_fraction: f64,
    /// Corrupted updates have norm `corruption_scale` times the running mean
    /// of honest update norms.
    pub corruption_scale: f64,
    pub error_feedback: bool,
    /// Blend the BS's own exact update into the aggregate.
    pub include_bs: bool,
    pub fragment_dim: usize,
    pub codebook_size: usize,
    pub ordering: Ordering,
    pub curvature: bool,
    pub uplink: Uplink,
    pub rule: AggregationRule,
    pub task: TaskSpec,
    pub seed: u64,
}

impl Default for FeelConfig {
    fn default() -> Self {
        Self {
            total_devices: 10,
            ka_range: [2, 4],
            rounds: 40,
            local: LocalTraining::default(),
            global_lr: 1.0,
            iid_fraction: 0.2,
            corruption_fraction: 0.0,
            corruption_scale: 1.0,
            error_feedback: true,
            include_bs: false,
            fragment_dim: 8,
            codebook_size: 32,
            ordering: Ordering::Popularity,
            curvature: false,
            uplink: Uplink::Perfect,
            rule: AggregationRule::Mean,
            task: TaskSpec::default(),
            seed: 0,
        }
    }
}

impl FeelConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.ka_range;
        if lo == 0 || lo > hi || hi > self.total_devices {
            return Err(Error::Config(format!(
                "active range [{lo},{hi}] must lie in [1,{}]",
                self.total_devices
            )));
        }
        for (name, v) in [("iid_fraction", self.iid_fraction), ("corruption_fraction", self.corruption_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0,1]")));
            }
        }
        if self.fragment_dim == 0 || self.codebook_size == 0 {
            return Err(Error::Config("fragment_dim and codebook_size must be positive".into()));
        }
        if !(self.corruption_scale >= 0.0) || !self.global_lr.is_finite() {
            return Err(Error::Config("corruption_scale and global_lr must be finite and ≥ 0".into()));
        }
        if let Uplink::DigitalOta { snr_db, .. } = self.uplink {
            ChannelConfig::new(snr_db, 1).map_err(|e| Error::Config(e.to_string()))?;
        }
        self.task.validate()
    }

    pub fn snr_db(&self) -> Option<f64> {
        match self.uplink {
            Uplink::DigitalOta { snr_db, .. } => Some(snr_db),
            _ => None,
        }
    }

    pub fn mode_label(&self) -> String {
        match self.uplink {
            Uplink::Perfect => "perfect".into(),
            Uplink::Quantised => "quantised".into(),
            Uplink::DigitalOta { mode, .. } => mode.to_string(),
        }
    }
}

/// Pre-trained (or fixed) communication layer used by the digital uplink.
#[derive(Debug, Clone)]
pub struct CommStack {
    pub codebook: UraCodebook,
    pub params: DecoderParams,
    pub decoder: DecoderConfig,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub ka_true: usize,
    /// Round-averaged estimate before rounding.
    pub ka_hat: f64,
    pub recovery_acc: f64,
    pub test_acc: f64,
    pub global_loss: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub weights: Vec<f64>,
    /// Set when the run stopped early on divergence.
    pub halted: Option<String>,
}

impl RunOutput {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.test_acc)
    }
}

/// `1 − ‖x − x̂‖₁ / ‖x‖₁`.
pub fn recovery_accuracy(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::Shape("recovery accuracy inputs differ in length".into()));
    }
    let norm: f64 = x.iter().map(|v| v.abs()).sum();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("recovery accuracy of an all-zero ground truth".into()));
    }
    let err: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b).abs()).sum();
    Ok(1.0 - err / norm)
}

/// Mean absolute error between true and estimated active-device counts.
pub fn mae(k_true: &[f64], k_hat: &[f64]) -> f64 {
    if k_true.is_empty() {
        return 0.0;
    }
    k_true.iter().zip(k_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / k_true.len() as f64
}

/// Number of corrupted devices in a round with `ka` active devices.
pub fn corruption_count(fraction: f64, ka: usize) -> usize {
    ((fraction * ka as f64).round() as usize).min(ka)
}

/// Gaussian noise with IID entries and expected norm `norm`, independent
/// of the honest update it replaces.
pub fn corrupt(w: usize, norm: f64, rng: &mut RngStream) -> Vec<f64> {
    let std = norm / (w.max(1) as f64).sqrt();
    rng.gauss_vec(w).into_iter().map(|v| std * v).collect()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct Setup {
    mlp: Mlp,
    data: TaskData,
    devices: Vec<Dataset>,
    w: Vec<f64>,
}

fn setup(cfg: &FeelConfig) -> Result<Setup> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed, "feel");
    let data = make_task(&cfg.task, &mut root.derive("task"))?;
    let devices = partition_data(&data.train, cfg.total_devices, cfg.iid_fraction, &mut root.derive("partition"))?;
    let mlp = Mlp::new(cfg.task);
    let w = mlp.init(&mut root.derive("init"));
    Ok(Setup { mlp, data, devices, w })
}

/// Runs the configured FEEL loop.
pub fn run(cfg: &FeelConfig, comm: Option<&CommStack>) -> Result<RunOutput> {
    run_with(cfg, comm, None)
}

/// As [`run`], passing every round's raw updates to `recorder`.
pub fn run_with(
    cfg: &FeelConfig,
    comm: Option<&CommStack>,
    mut recorder: Option<&mut dyn FnMut(RoundRecord)>,
) -> Result<RunOutput> {
    let Setup { mlp, data, devices, mut w } = setup(cfg)?;
    if let Uplink::DigitalOta { .. } = cfg.uplink {
        let stack = comm.ok_or_else(|| Error::Config("digital uplink needs a communication stack".into()))?;
        if stack.codebook.n() != cfg.codebook_size {
            return Err(Error::Config(format!(
                "URA codebook has {} codewords, config expects {}",
                stack.codebook.n(),
                cfg.codebook_size
            )));
        }
    }
    let root = RngStream::new(cfg.seed, "feel");
    let wlen = w.len();
    let mut ef: Vec<ErrorFeedbackState> = (0..cfg.total_devices)
        .map(|_| ErrorFeedbackState::new(wlen, cfg.error_feedback))
        .collect();
    let mut honest_norm_sum = 0.0;
    let mut honest_count = 0usize;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut halted = None;

    for round in 0..cfg.rounds {
        let rr = root.derive(format!("round/{round}"));
        let ka = rr.derive("ka").int_inclusive(cfg.ka_range[0], cfg.ka_range[1]);
        let mut active = rr.derive("active").sample_indices(cfg.total_devices, ka);
        active.sort_unstable();

        let bs_update = local_train(&mlp, &w, &data.bs, &cfg.local, &mut rr.derive("bs"))?;
        let updates: Vec<Vec<f64>> = active
            .par_iter()
            .map(|&k| local_train(&mlp, &w, &devices[k], &cfg.local, &mut rr.derive(format!("dev/{k}"))))
            .collect::<Result<_>>()?;

        if let Some(rec) = recorder.as_mut() {
            rec(RoundRecord {
                round_index: round,
                bs_update: bs_update.clone(),
                device_updates: updates.clone(),
                ka,
            });
        }

        let n_corrupt = corruption_count(cfg.corruption_fraction, ka);
        let mut corrupted = vec![false; ka];
        for i in rr.derive("corrupt-set").sample_indices(ka, n_corrupt) {
            corrupted[i] = true;
        }
        for (u, &c) in updates.iter().zip(&corrupted) {
            if !c {
                honest_norm_sum += l2(u);
                honest_count += 1;
            }
        }
        let honest_mean = if honest_count > 0 {
            honest_norm_sum / honest_count as f64
        } else {
            l2(&bs_update)
        };
        let mut crng = rr.derive("corrupt");
        let updates: Vec<Vec<f64>> = updates
            .into_iter()
            .zip(&corrupted)
            .map(|(u, &c)| if c { corrupt(wlen, cfg.corruption_scale * honest_mean, &mut crng) } else { u })
            .collect();

        let (g, ka_hat, recovery_acc) = match cfg.uplink {
            Uplink::Perfect => {
                let mut g = vec![0.0; wlen];
                for u in &updates {
                    for (gi, ui) in g.iter_mut().zip(u) {
                        *gi += ui / ka as f64;
                    }
                }
                (g, ka as f64, 1.0)
            }
            Uplink::Quantised | Uplink::DigitalOta { .. } => {
                let bs_frags = fragment_update(&bs_update, cfg.fragment_dim);
                let proxy = if cfg.curvature {
                    Some(CurvatureProxy::estimate(&bs_frags, DEFAULT_CURVATURE_EPS)?)
                } else {
                    None
                };
                let mut qcb = build_codebook(
                    &bs_frags,
                    cfg.codebook_size,
                    proxy.as_ref(),
                    cfg.ordering,
                    &mut rr.derive("codebook"),
                )?;
                qcb.round_index = round;
                let mut indices = Vec::with_capacity(ka);
                for (&k, u) in active.iter().zip(&updates) {
                    let s = ef[k].apply(u)?;
                    let idx = qcb.quantise_update(&s)?;
                    ef[k].record_residual(&s, &qcb.dequantise(&idx, wlen))?;
                    let (e, un) = (ef[k].norm(), l2(u));
                    if e > EF_BLOWUP_FACTOR * un {
                        log::warn!("round {round}: device {k} error-feedback norm {e:.3e} exceeds {EF_BLOWUP_FACTOR}x update norm {un:.3e}");
                    }
                    indices.push(idx);
                }
                let slots = indices[0].len();
                let truth: Vec<ActivityVector> = (0..slots)
                    .map(|j| encode_slot(&indices.iter().map(|ix| ix[j]).collect::<Vec<_>>(), cfg.codebook_size))
                    .collect::<Result<_>>()?;
                let (recovered, ka_hat) = match (cfg.uplink, comm) {
                    (Uplink::DigitalOta { mode, snr_db }, Some(stack)) => {
                        let chan = ChannelConfig::new(snr_db, ka)?;
                        ota_round(&truth, stack, mode, &chan, &rr)?
                    }
                    _ => (truth.clone(), ka as f64),
                };
                let num: f64 = truth
                    .iter()
                    .zip(&recovered)
                    .map(|(x, xh)| x.counts.iter().zip(&xh.counts).map(|(a, b)| f64::from(a.abs_diff(*b))).sum::<f64>())
                    .sum();
                let den = (ka * slots) as f64;
                let g = aggregate_round(&recovered, &qcb, cfg.rule, ka_hat, wlen)?;
                (g, ka_hat, 1.0 - num / den)
            }
        };

        let g = if cfg.include_bs {
            let k = ka_hat.round().max(0.0);
            g.iter().zip(&bs_update).map(|(gi, bi)| (k * gi + bi) / (k + 1.0)).collect()
        } else {
            g
        };
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi += cfg.global_lr * gi;
        }
        let (global_loss, _) = mlp.evaluate(&w, &data.train);
        let (_, test_acc) = mlp.evaluate(&w, &data.test);
        metrics.push(RoundMetrics {
            round,
            ka_true: ka,
            ka_hat,
            recovery_acc,
            test_acc,
            global_loss,
        });
        log::debug!("round {round}: ka={ka} ka_hat={ka_hat:.3} acc={test_acc:.4} loss={global_loss:.4}");
        if !global_loss.is_finite() || w.iter().any(|v| !v.is_finite()) {
            halted = Some(format!("global loss diverged at round {round}"));
            break;
        }
    }
    Ok(RunOutput {
        metrics,
        weights: w,
        halted,
    })
}

/// Transmits, decodes and projects every slot of a round. Slots are
/// projected onto the rounded round-average `K̂`.
fn ota_round(
    truth: &[ActivityVector],
    stack: &CommStack,
    mode: DecoderMode,
    chan: &ChannelConfig,
    rr: &RngStream,
) -> Result<(Vec<ActivityVector>, f64)> {
    let decoded: Vec<(Vec<f64>, f64)> = truth
        .par_iter()
        .enumerate()
        .map(|(j, x)| {
            let clean = stack.codebook.transmit(x)?;
            let y = channel::apply(&clean, chan, &mut rr.derive(format!("slot/{j}")));
            let out = decode(&y, &stack.codebook, &stack.params, mode, &stack.decoder, stack.layers)?;
            Ok((out.x_real, out.ka_hat))
        })
        .collect::<Result<_>>()?;
    let ka_hat = decoded.iter().map(|d| d.1).sum::<f64>() / decoded.len().max(1) as f64;
    let k = ka_hat.round().max(0.0);
    let recovered = decoded.iter().map(|(x, _)| project_counts(x, k)).collect();
    Ok((recovered, ka_hat))
}

pub const METRICS_HEADER: &str =
    "round,ka_true,ka_hat,mae_running,recovery_acc,test_acc,global_loss,rule,snr_db,mode,seed";

/// Metrics rows (without header) with the running `K̂` MAE.
pub fn metrics_csv_rows(metrics: &[RoundMetrics], cfg: &FeelConfig) -> String {
    let snr = cfg.snr_db().map_or_else(String::new, |s| s.to_string());
    let mode = cfg.mode_label();
    let mut out = String::new();
    let mut abs_sum = 0.0;
    for (i, m) in metrics.iter().enumerate() {
        abs_sum += (m.ka_true as f64 - m.ka_hat).abs();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            m.round,
            m.ka_true,
            m.ka_hat,
            abs_sum / (i + 1) as f64,
            m.recovery_acc,
            m.test_acc,
            m.global_loss,
            cfg.rule,
            snr,
            mode,
            cfg.seed
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_and_mae_examples() {
        assert_eq!(recovery_accuracy(&[1.0, 1.0, 0.0], &[1.0, 0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(recovery_accuracy(&[2.0, 1.0], &[2.0, 1.0]).unwrap(), 1.0);
        assert_eq!(recovery_accuracy(&[2.0, 1.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(recovery_accuracy(&[0.0], &[1.0]).is_err());
        assert!((mae(&[10.0, 8.0], &[10.4, 7.9]) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = FeelConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.ka_range = [3, 11];
        assert!(cfg.validate().is_err());
        cfg.ka_range = [2, 4];
        cfg.iid_fraction = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn digital_uplink_requires_stack() {
        let cfg = FeelConfig {
            uplink: Uplink::DigitalOta {
                mode: DecoderMode::Fixed,
                snr_db: 10.0,
            },
            rounds: 1,
            ..FeelConfig::default()
        };
        assert!(matches!(run(&cfg, None), Err(Error::Config(_))));
    }
}

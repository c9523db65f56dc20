//! Real AWGN multiple-access channel.
//!
//! SNR is total received signal power over noise power. With unit-norm
//! codewords spread over `l` channel uses, `Kₐ` superposed devices deliver
//! `Kₐ/l` power per use (codeword cross terms neglected), so
//! `σ² = Kₐ / (l · 10^(snr_db/10))` and the noise grows with the number of
//! active devices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::RngStream;

/// Human-readable statement of the SNR convention, echoed into run configs.
pub const SNR_CONVENTION: &str =
    "sigma2 = ka / (l * 10^(snr_db/10)); unit-norm codewords, cross-correlation energy neglected";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub snr_db: f64,
    pub ka_for_power: usize,
}

impl ChannelConfig {
    pub fn new(snr_db: f64, ka_for_power: usize) -> Result<Self> {
        if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
            return Err(Error::InvalidArgument(format!("invalid SNR {snr_db} dB")));
        }
        Ok(Self {
            snr_db,
            ka_for_power,
        })
    }
}

pub fn noise_variance(cfg: &ChannelConfig, l: usize) -> f64 {
    assert!(l >= 1, "codeword length must be positive");
    if cfg.ka_for_power == 0 || cfg.snr_db == f64::INFINITY {
        return 0.0;
    }
    cfg.ka_for_power as f64 / (l as f64 * 10f64.powf(cfg.snr_db / 10.0))
}

/// `y = signal + n`, `n ~ N(0, σ² I)`.
pub fn apply(signal: &[f64], cfg: &ChannelConfig, rng: &mut RngStream) -> Vec<f64> {
    let sigma = noise_variance(cfg, signal.len().max(1)).sqrt();
    if sigma == 0.0 {
        return signal.to_vec();
    }
    signal.iter().map(|s| s + sigma * rng.normal()).collect()
}

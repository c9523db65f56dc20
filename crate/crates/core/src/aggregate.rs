//! De-quantisation of recovered counts and symmetric aggregation rules.
//!
//! Every rule sees only the activity vector of a slot, so the output is
//! invariant to the order in which devices transmitted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uracode::ActivityVector;
use crate::vq::{join_fragments, Fragment, QuantCodebook};

/// Slack subtracted before `ceil` so `τ·K̂` landing on an integer up to
/// rounding error does not gain a unit of mass.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AggregationRule {
    Mean,
    /// Keeps the most common codewords up to a fraction `tau` of the mass.
    TrimmedMean { tau: f64 },
    Majority,
}

impl AggregationRule {
    pub fn trimmed(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::InvalidArgument(format!("trim fraction {tau} outside (0,1]")));
        }
        Ok(Self::TrimmedMean { tau })
    }
}

impl FromStr for AggregationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "majority" => Ok(Self::Majority),
            _ => {
                let tau = s
                    .strip_prefix("trimmed_mean:")
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown aggregation rule '{s}'")))?;
                let tau: f64 = tau
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad trim fraction '{tau}'")))?;
                Self::trimmed(tau)
            }
        }
    }
}

impl fmt::Display for AggregationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mean => f.write_str("mean"),
            Self::TrimmedMean { tau } => write!(f, "trimmed_mean:{tau}"),
            Self::Majority => f.write_str("majority"),
        }
    }
}

impl TryFrom<String> for AggregationRule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AggregationRule> for String {
    fn from(r: AggregationRule) -> Self {
        r.to_string()
    }
}

fn check_len(x: &ActivityVector, cb: &QuantCodebook) -> Result<()> {
    if x.len() != cb.size() {
        return Err(Error::Shape(format!(
            "activity vector length {} vs codebook size {}",
            x.len(),
            cb.size()
        )));
    }
    Ok(())
}

/// `Σ_j w_j q_j / denom`, skipping zero weights.
fn weighted(cb: &QuantCodebook, weights: &[f64], denom: f64) -> Fragment {
    let mut out = vec![0.0; cb.dim()];
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (o, q) in out.iter_mut().zip(cb.centroid(j)) {
            *o += w * q;
        }
    }
    out.iter_mut().for_each(|o| *o /= denom);
    Fragment(out)
}

/// `(1/K̂) Σ_j x_j q_j`. A non-positive `K̂` yields the zero fragment.
pub fn mean_fragment(x: &ActivityVector, cb: &QuantCodebook, k_hat: f64) -> Result<Fragment> {
    check_len(x, cb)?;
    if !(k_hat > 0.0) {
        log::debug!("mean rule with K̂ = {k_hat}; emitting zero fragment");
        return Ok(Fragment(vec![0.0; cb.dim()]));
    }
    Ok(weighted(cb, &x.as_f64(), k_hat))
}

/// Centroid with the largest count; tied maxima are averaged.
pub fn majority_fragment(x: &ActivityVector, cb: &QuantCodebook) -> Result<Fragment> {
    check_len(x, cb)?;
    let top = x.counts.iter().copied().max().unwrap_or(0);
    if top == 0 {
        return Err(Error::InvalidArgument("majority vote over an empty slot".into()));
    }
    let weights: Vec<f64> = x
        .counts
        .iter()
        .map(|&c| if c == top { 1.0 } else { 0.0 })
        .collect();
    let ties: f64 = weights.iter().sum();
    Ok(weighted(cb, &weights, ties))
}

/// Retained mass `M = ceil(τ·K̂)`.
pub fn trim_mass(k_hat: f64, tau: f64) -> f64 {
    (tau * k_hat - CEIL_SLACK).ceil().max(0.0)
}

/// Per-codeword weights retaining mass `m` from the most common codewords.
///
/// Codewords are visited in descending count order. A group of equal counts
/// that would overshoot `m` shares the remaining mass evenly. When the slot
/// holds less than `m` in total every count is kept as is and the weights
/// sum to `Σx` instead.
pub fn trimmed_weights(counts: &[u32], m: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] > 0).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut weights = vec![0.0; counts.len()];
    let mut remaining = m;
    let mut i = 0;
    while i < order.len() && remaining > 0.0 {
        let c = counts[order[i]];
        let mut end = i;
        while end < order.len() && counts[order[end]] == c {
            end += 1;
        }
        let group = &order[i..end];
        let group_mass = f64::from(c) * group.len() as f64;
        if group_mass <= remaining {
            for &j in group {
                weights[j] = f64::from(c);
            }
            remaining -= group_mass;
        } else {
            let share = remaining / group.len() as f64;
            for &j in group {
                weights[j] = share;
            }
            remaining = 0.0;
        }
        i = end;
    }
    weights
}

/// Trimmed mean `Σ_j w_j q_j / M` with `M = ceil(τ·K̂)`.
pub fn trimmed_fragment(x: &ActivityVector, cb: &QuantCodebook, k_hat: f64, tau: f64) -> Result<Fragment> {
    check_len(x, cb)?;
    if x.ka() == 0 {
        return Err(Error::InvalidArgument("trimmed mean over an empty slot".into()));
    }
    let m = trim_mass(k_hat, tau);
    if m <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "trimmed mean with zero retained mass (K̂={k_hat}, τ={tau})"
        )));
    }
    Ok(weighted(cb, &trimmed_weights(&x.counts, m), m))
}

pub fn aggregate_fragment(
    x: &ActivityVector,
    cb: &QuantCodebook,
    rule: AggregationRule,
    k_hat: f64,
) -> Result<Fragment> {
    if x.ka() == 0 && rule != AggregationRule::Mean {
        log::debug!("empty slot under {rule}; emitting zero fragment");
        check_len(x, cb)?;
        return Ok(Fragment(vec![0.0; cb.dim()]));
    }
    match rule {
        AggregationRule::Mean => mean_fragment(x, cb, k_hat),
        AggregationRule::Majority => majority_fragment(x, cb),
        AggregationRule::TrimmedMean { tau } => {
            if k_hat.round() <= 0.0 {
                return Ok(Fragment(vec![0.0; cb.dim()]));
            }
            trimmed_fragment(x, cb, k_hat.round(), tau)
        }
    }
}

/// Aggregates one round. `K̂` is the round-averaged estimate, rounded once.
pub fn aggregate_round(
    slots: &[ActivityVector],
    cb: &QuantCodebook,
    rule: AggregationRule,
    k_hat_round: f64,
    w: usize,
) -> Result<Vec<f64>> {
    if slots.len() != w.div_ceil(cb.dim()) {
        return Err(Error::Shape(format!(
            "{} slots for a length-{w} update with fragment length {}",
            slots.len(),
            cb.dim()
        )));
    }
    let k = k_hat_round.round().max(0.0);
    let frags = slots
        .iter()
        .map(|x| aggregate_fragment(x, cb, rule, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(join_fragments(&frags, w))
}

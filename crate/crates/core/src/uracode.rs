//! Shared unsourced-random-access codebook.
//!
//! Codewords are the rows of `C_syn = D·W` (`n×l`); the sensing matrix seen
//! by the decoder is its transpose `C` (`l×n`, one codeword per column).
//! Every row of `C_syn` is kept at unit ℓ2 norm so all codewords carry the
//! same power.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{matmul, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookMode {
    /// Gaussian-initialised `D` and identity `W`, both trained.
    Learned,
    FixedGaussian,
    FixedBernoulli,
}

impl CodebookMode {
    pub fn is_trainable(self) -> bool {
        matches!(self, Self::Learned)
    }
}

impl FromStr for CodebookMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "fixed_gaussian" => Ok(Self::FixedGaussian),
            "fixed_bernoulli" => Ok(Self::FixedBernoulli),
            other => Err(Error::InvalidArgument(format!("unknown codebook mode '{other}'"))),
        }
    }
}

impl fmt::Display for CodebookMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Learned => "learned",
            Self::FixedGaussian => "fixed_gaussian",
            Self::FixedBernoulli => "fixed_bernoulli",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UraCodebook {
    /// Base matrix, `n×l`.
    pub d: Tensor,
    /// Transform, `l×l`.
    pub w: Tensor,
    pub mode: CodebookMode,
}

/// Per-codeword transmission counts of one fragment slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityVector {
    pub counts: Vec<u32>,
}

impl ActivityVector {
    pub fn zeros(n: usize) -> Self {
        Self { counts: vec![0; n] }
    }

    pub fn ka(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn support(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| f64::from(c)).collect()
    }
}

/// Counts how many devices picked each codeword.
pub fn encode_slot(indices: &[usize], n: usize) -> Result<ActivityVector> {
    let mut x = ActivityVector::zeros(n);
    for &j in indices {
        if j >= n {
            return Err(Error::InvalidArgument(format!("codeword index {j} ≥ {n}")));
        }
        x.counts[j] += 1;
    }
    Ok(x)
}

impl UraCodebook {
    pub fn init(n: usize, l: usize, mode: CodebookMode, rng: &mut RngStream) -> Result<Self> {
        if n == 0 || l == 0 {
            return Err(Error::InvalidArgument("codebook needs n ≥ 1 and l ≥ 1".into()));
        }
        let d = match mode {
            CodebookMode::Learned | CodebookMode::FixedGaussian => rng.gauss(&[n, l]),
            CodebookMode::FixedBernoulli => Tensor::from_raw(
                vec![n, l],
                (0..n * l)
                    .map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 })
                    .collect(),
            ),
        };
        let mut cb = Self {
            d,
            w: Tensor::identity(l),
            mode,
        };
        cb.renormalise()?;
        Ok(cb)
    }

    pub fn n(&self) -> usize {
        self.d.rows()
    }

    pub fn l(&self) -> usize {
        self.d.cols()
    }

    /// `C_syn = D·W`, one codeword per row.
    pub fn codewords(&self) -> Tensor {
        matmul(&self.d, &self.w).expect("codebook shapes are consistent")
    }

    /// Sensing matrix `C = C_synᵀ` (`l×n`).
    pub fn sensing_matrix(&self) -> Tensor {
        self.codewords().transpose().expect("matrix")
    }

    /// Superposed noiseless signal `C·x`, summed codeword by codeword.
    pub fn transmit(&self, x: &ActivityVector) -> Result<Vec<f64>> {
        if x.len() != self.n() {
            return Err(Error::Shape(format!(
                "activity vector length {} vs codebook size {}",
                x.len(),
                self.n()
            )));
        }
        let cs = self.codewords();
        let l = self.l();
        let mut y = vec![0.0; l];
        for (j, &c) in x.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let k = f64::from(c);
            for (yi, ci) in y.iter_mut().zip(cs.row(j)) {
                *yi += k * ci;
            }
        }
        Ok(y)
    }

    /// Rescales each row of `D` so the matching row of `D·W` has unit norm.
    pub fn renormalise(&mut self) -> Result<()> {
        let cs = self.codewords();
        let l = self.l();
        for j in 0..self.n() {
            let norm = cs.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::InvalidArgument(format!("codeword {j} has zero norm")));
            }
            for v in &mut self.d.data_mut()[j * l..(j + 1) * l] {
                *v /= norm;
            }
        }
        Ok(())
    }

    /// `‖WᵀW − I‖_F²`.
    pub fn orthogonality_penalty(&self) -> f64 {
        let wtw = matmul(&self.w.transpose().expect("matrix"), &self.w).expect("square");
        let l = self.l();
        let mut acc = 0.0;
        for i in 0..l {
            for j in 0..l {
                let target = if i == j { 1.0 } else { 0.0 };
                let diff = wtw.at(i, j) - target;
                acc += diff * diff;
            }
        }
        acc
    }

    /// Largest deviation of a codeword norm from 1.
    pub fn max_norm_deviation(&self) -> f64 {
        let cs = self.codewords();
        (0..self.n())
            .map(|j| (cs.row(j).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

//! Per-round quantisation codebook and device-side quantisation.
//!
//! The BS seeds `n` centroids from its own update fragments with k-means++
//! (no Lloyd refinement), counts how often each centroid wins for its own
//! fragments and sorts the centroids from most to least popular. Devices
//! quantise each length-`d` fragment to the nearest centroid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{RngStream, Tensor};

pub const DEFAULT_CURVATURE_EPS: f64 = 1e-8;

/// A length-`d` slice of a model update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fragment(pub Vec<f64>);

impl Fragment {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Splits an update into `ceil(W/d)` fragments, zero-padding the tail.
pub fn fragment_update(update: &[f64], d: usize) -> Vec<Fragment> {
    assert!(d > 0, "fragment length must be positive");
    update
        .chunks(d)
        .map(|c| {
            let mut v = c.to_vec();
            v.resize(d, 0.0);
            Fragment(v)
        })
        .collect()
}

pub fn fragment_count(w: usize, d: usize) -> usize {
    w.div_ceil(d)
}

/// Concatenates fragments and strips padding beyond `w` entries.
pub fn join_fragments(fragments: &[Fragment], w: usize) -> Vec<f64> {
    let mut out: Vec<f64> = fragments.iter().flat_map(|f| f.0.iter().copied()).collect();
    out.truncate(w);
    out
}

/// Whether centroids are sorted by BS popularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    Popularity,
    None,
}

/// Diagonal variance-based curvature proxy over the BS fragment population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureProxy {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub epsilon: f64,
}

impl CurvatureProxy {
    /// Per-dimension mean and `1/sqrt(var + eps)` using the population
    /// variance.
    pub fn estimate(fragments: &[Fragment], epsilon: f64) -> Result<Self> {
        let d = check_fragments(fragments)?;
        if epsilon < 0.0 {
            return Err(Error::InvalidArgument("curvature epsilon must be ≥ 0".into()));
        }
        let count = fragments.len() as f64;
        let mut mean = vec![0.0; d];
        for f in fragments {
            for (m, v) in mean.iter_mut().zip(&f.0) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for f in fragments {
            for ((s, v), m) in var.iter_mut().zip(&f.0).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut scale = Vec::with_capacity(d);
        for s in var {
            let w = 1.0 / (s / count + epsilon).sqrt();
            if !w.is_finite() {
                return Err(Error::InvalidArgument(
                    "zero variance dimension with epsilon 0".into(),
                ));
            }
            scale.push(w);
        }
        Ok(Self {
            mean,
            scale,
            epsilon,
        })
    }

    pub fn whiten(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), w)| w * (v - m))
            .collect()
    }

    pub fn unwhiten(&self, q: &[f64]) -> Vec<f64> {
        q.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), w)| v / w + m)
            .collect()
    }
}

/// Quantisation codebook: `n` centroids of dimension `d` plus the BS
/// popularity distribution, stored in broadcast column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantCodebook {
    /// Row `j` is centroid `q_j` (the transpose of the `d×n` matrix `Q`).
    centroids: Tensor,
    popularity: Vec<f64>,
    pub round_index: usize,
}

fn check_fragments(fragments: &[Fragment]) -> Result<usize> {
    let first = fragments
        .first()
        .ok_or_else(|| Error::InvalidArgument("no fragments".into()))?;
    let d = first.dim();
    if d == 0 || fragments.iter().any(|f| f.dim() != d) {
        return Err(Error::Shape("fragments must share a positive length".into()));
    }
    if fragments.iter().any(|f| f.0.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("fragment".into()));
    }
    Ok(d)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding. Once every point coincides with a chosen centroid the
/// remaining centroids are drawn uniformly from the points.
pub fn kmeans_pp(points: &[Vec<f64>], n: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("k-means++ on an empty set".into()));
    }
    let mut chosen = Vec::with_capacity(n);
    chosen.push(points[rng.below(points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &chosen[0])).collect();
    while chosen.len() < n {
        let next = if d2.iter().all(|&v| v == 0.0) {
            rng.below(points.len())
        } else {
            rng.categorical(&d2)?
        };
        let c = points[next].clone();
        for (dist, p) in d2.iter_mut().zip(points) {
            *dist = dist.min(sq_dist(p, &c));
        }
        chosen.push(c);
    }
    Ok(chosen)
}

/// Builds the round's quantisation codebook from the BS update fragments.
pub fn build_codebook(
    bs_fragments: &[Fragment],
    n: usize,
    curvature: Option<&CurvatureProxy>,
    ordering: Ordering,
    rng: &mut RngStream,
) -> Result<QuantCodebook> {
    let d = check_fragments(bs_fragments)?;
    if n == 0 {
        return Err(Error::InvalidArgument("codebook size must be ≥ 1".into()));
    }
    let centroids: Vec<Vec<f64>> = match curvature {
        Some(proxy) => {
            if proxy.mean.len() != d {
                return Err(Error::Shape("curvature proxy dimension".into()));
            }
            let points: Vec<Vec<f64>> = bs_fragments.iter().map(|f| proxy.whiten(&f.0)).collect();
            kmeans_pp(&points, n, rng)?
                .iter()
                .map(|q| proxy.unwhiten(q))
                .collect()
        }
        None => {
            let points: Vec<Vec<f64>> = bs_fragments.iter().map(|f| f.0.clone()).collect();
            kmeans_pp(&points, n, rng)?
        }
    };
    let raw = QuantCodebook {
        centroids: Tensor::from_raw(vec![n, d], centroids.concat()),
        popularity: vec![1.0 / n as f64; n],
        round_index: 0,
    };
    let mut counts = vec![0usize; n];
    for f in bs_fragments {
        counts[raw.quantise(f)?] += 1;
    }
    Ok(raw.with_counts(&counts, ordering))
}

impl QuantCodebook {
    /// Codebook from explicit centroids (rows) with uniform popularity.
    pub fn from_centroids(centroids: Vec<Vec<f64>>) -> Result<Self> {
        let n = centroids.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty codebook".into()));
        }
        let d = centroids[0].len();
        if centroids.iter().any(|c| c.len() != d) {
            return Err(Error::Shape("centroids must share a dimension".into()));
        }
        Ok(Self {
            centroids: Tensor::new(vec![n, d], centroids.concat())?,
            popularity: vec![1.0 / n as f64; n],
            round_index: 0,
        })
    }

    /// Sets popularity from assignment counts; with popularity ordering the
    /// columns are stably sorted by descending count.
    pub fn with_counts(self, counts: &[usize], ordering: Ordering) -> Self {
        let n = self.size();
        assert_eq!(counts.len(), n);
        let total: usize = counts.iter().sum();
        let pop: Vec<f64> = if total == 0 {
            vec![1.0 / n as f64; n]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        let order = match ordering {
            Ordering::Popularity => popularity_order(counts),
            Ordering::None => (0..n).collect(),
        };
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for &j in &order {
            data.extend_from_slice(self.centroid(j));
        }
        Self {
            centroids: Tensor::from_raw(vec![n, d], data),
            popularity: order.iter().map(|&j| pop[j]).collect(),
            round_index: self.round_index,
        }
    }

    pub fn size(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        self.centroids.row(j)
    }

    pub fn popularity(&self) -> &[f64] {
        &self.popularity
    }

    /// The `d×n` matrix with centroids as columns.
    pub fn matrix(&self) -> Tensor {
        self.centroids.transpose().expect("matrix")
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn quantise(&self, u: &Fragment) -> Result<usize> {
        if u.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "fragment length {} vs codebook dimension {}",
                u.dim(),
                self.dim()
            )));
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..self.size() {
            let dj = sq_dist(&u.0, self.centroid(j));
            if dj < best_d {
                best_d = dj;
                best = j;
            }
        }
        Ok(best)
    }

    /// Quantises a whole update vector; returns one index per fragment.
    pub fn quantise_update(&self, update: &[f64]) -> Result<Vec<usize>> {
        fragment_update(update, self.dim())
            .iter()
            .map(|f| self.quantise(f))
            .collect()
    }

    /// Rebuilds an update of length `w` from per-fragment indices.
    pub fn dequantise(&self, indices: &[usize], w: usize) -> Vec<f64> {
        let frags: Vec<Fragment> = indices
            .iter()
            .map(|&j| Fragment(self.centroid(j).to_vec()))
            .collect();
        join_fragments(&frags, w)
    }
}

/// Column permutation sorting counts in descending order, ties by index.
pub fn popularity_order(counts: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]));
    order
}

/// Device-side error-feedback accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorFeedbackState {
    accumulator: Vec<f64>,
    enabled: bool,
}

impl ErrorFeedbackState {
    pub fn new(w: usize, enabled: bool) -> Self {
        Self {
            accumulator: vec![0.0; w],
            enabled,
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn accumulator(&self) -> &[f64] {
        &self.accumulator
    }

    pub fn norm(&self) -> f64 {
        self.accumulator.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `s = update + e`.
    pub fn apply(&self, update: &[f64]) -> Result<Vec<f64>> {
        if update.len() != self.accumulator.len() {
            return Err(Error::Shape("update length vs accumulator".into()));
        }
        if !self.enabled {
            return Ok(update.to_vec());
        }
        Ok(update
            .iter()
            .zip(&self.accumulator)
            .map(|(u, e)| u + e)
            .collect())
    }

    /// `e ← s − Q(s)`; a no-op when disabled.
    pub fn record_residual(&mut self, s: &[f64], quantised: &[f64]) -> Result<()> {
        if s.len() != self.accumulator.len() || quantised.len() != s.len() {
            return Err(Error::Shape("residual length".into()));
        }
        if self.enabled {
            for ((e, a), b) in self.accumulator.iter_mut().zip(s).zip(quantised) {
                *e = a - b;
            }
        }
        Ok(())
    }
}

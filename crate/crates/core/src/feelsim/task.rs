//! Synthetic Gaussian-mixture classification task and a small MLP trained
//! with hand-written backpropagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub input_dim: usize,
    /// Hidden width; 0 gives a linear softmax classifier.
    pub hidden: usize,
    pub classes: usize,
    /// Spread of the class means relative to the unit within-class noise.
    pub separation: f64,
    /// Gaussian modes per class.
    pub modes_per_class: usize,
    pub train_samples: usize,
    pub bs_samples: usize,
    pub test_samples: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: 128,
            classes: 8,
            separation: 2.0,
            modes_per_class: 2,
            train_samples: 4000,
            bs_samples: 400,
            test_samples: 2000,
        }
    }
}

impl TaskSpec {
    /// Parameter count `W` of the model.
    pub fn param_count(&self) -> usize {
        if self.hidden == 0 {
            self.classes * self.input_dim + self.classes
        } else {
            self.hidden * self.input_dim + self.hidden + self.classes * self.hidden + self.classes
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 || self.modes_per_class == 0 {
            return Err(Error::Config("task needs input_dim ≥ 1, classes ≥ 2, modes ≥ 1".into()));
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return Err(Error::Config("task needs train and test samples".into()));
        }
        if !(self.separation > 0.0) {
            return Err(Error::Config("separation must be positive".into()));
        }
        Ok(())
    }
}

/// Row-major features with integer labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, x: &[f64], y: usize) {
        self.features.extend_from_slice(x);
        self.labels.push(y);
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut out = Self::empty(self.dim);
        for &i in idx {
            out.push(self.sample(i), self.labels[i]);
        }
        out
    }

    pub fn concat(parts: &[&Dataset]) -> Self {
        let dim = parts.first().map_or(0, |p| p.dim);
        let mut out = Self::empty(dim);
        for p in parts {
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
        }
        out
    }
}

/// Train, BS and test splits drawn from one mixture.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub bs: Dataset,
    pub test: Dataset,
}

pub fn make_task(spec: &TaskSpec, rng: &mut RngStream) -> Result<TaskData> {
    spec.validate()?;
    let modes = spec.classes * spec.modes_per_class;
    let scale = spec.separation * (spec.input_dim as f64).sqrt() / 2.0;
    let centres: Vec<Vec<f64>> = (0..modes)
        .map(|_| {
            let mut c = rng.gauss_vec(spec.input_dim);
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            c.iter_mut().for_each(|v| *v *= scale / norm);
            c
        })
        .collect();
    let draw = |count: usize, rng: &mut RngStream| {
        let mut ds = Dataset::empty(spec.input_dim);
        for _ in 0..count {
            let y = rng.below(spec.classes);
            let m = y * spec.modes_per_class + rng.below(spec.modes_per_class);
            let x: Vec<f64> = centres[m].iter().map(|c| c + rng.normal()).collect();
            ds.push(&x, y);
        }
        ds
    };
    let train = draw(spec.train_samples, &mut rng.derive("train"));
    let bs = draw(spec.bs_samples, &mut rng.derive("bs"));
    let test = draw(spec.test_samples, &mut rng.derive("test"));
    Ok(TaskData { train, bs, test })
}

/// Parameter vector layout `[W1 (h×in), b1, W2 (c×h), b2]`, or
/// `[W (c×in), b]` for the linear model.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub spec: TaskSpec,
}

impl Mlp {
    pub fn new(spec: TaskSpec) -> Self {
        Self { spec }
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn init(&self, rng: &mut RngStream) -> Vec<f64> {
        let s = &self.spec;
        let mut w = vec![0.0; self.param_count()];
        if s.hidden == 0 {
            let std = (1.0 / s.input_dim as f64).sqrt();
            for v in &mut w[..s.classes * s.input_dim] {
                *v = std * rng.normal();
            }
            return w;
        }
        let (h, d, c) = (s.hidden, s.input_dim, s.classes);
        let std1 = (2.0 / d as f64).sqrt();
        for v in &mut w[..h * d] {
            *v = std1 * rng.normal();
        }
        let off = h * d + h;
        let std2 = (1.0 / h as f64).sqrt();
        for v in &mut w[off..off + c * h] {
            *v = std2 * rng.normal();
        }
        w
    }

    /// Logits of one sample; `hidden` receives the post-ReLU activations.
    fn logits(&self, w: &[f64], x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        let s = &self.spec;
        let (d, c) = (s.input_dim, s.classes);
        if s.hidden == 0 {
            let (wm, b) = w.split_at(c * d);
            for k in 0..c {
                out[k] = b[k] + dot(&wm[k * d..(k + 1) * d], x);
            }
            return;
        }
        let h = s.hidden;
        let (w1, rest) = w.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(c * h);
        for i in 0..h {
            hidden[i] = (b1[i] + dot(&w1[i * d..(i + 1) * d], x)).max(0.0);
        }
        for k in 0..c {
            out[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], hidden);
        }
    }

    /// Mean cross-entropy and accuracy over a dataset.
    pub fn evaluate(&self, w: &[f64], data: &Dataset) -> (f64, f64) {
        if data.is_empty() {
            return (0.0, 0.0);
        }
        let mut hidden = vec![0.0; self.spec.hidden];
        let mut logits = vec![0.0; self.spec.classes];
        let mut loss = 0.0;
        let mut correct = 0usize;
        for i in 0..data.len() {
            self.logits(w, data.sample(i), &mut hidden, &mut logits);
            let (lse, arg) = log_sum_exp_argmax(&logits);
            loss += lse - logits[data.labels[i]];
            correct += usize::from(arg == data.labels[i]);
        }
        let n = data.len() as f64;
        (loss / n, correct as f64 / n)
    }

    /// Adds the gradient of the summed cross-entropy over `batch` to `grad`;
    /// returns the summed loss.
    pub fn accumulate_gradient(&self, w: &[f64], data: &Dataset, batch: &[usize], grad: &mut [f64]) -> f64 {
        let s = &self.spec;
        let (d, c, h) = (s.input_dim, s.classes, s.hidden);
        let mut hidden = vec![0.0; h];
        let mut logits = vec![0.0; c];
        let mut delta_h = vec![0.0; h];
        let mut loss = 0.0;
        for &i in batch {
            let x = data.sample(i);
            let y = data.labels[i];
            self.logits(w, x, &mut hidden, &mut logits);
            let (lse, _) = log_sum_exp_argmax(&logits);
            loss += lse - logits[y];
            for k in 0..c {
                logits[k] = (logits[k] - lse).exp() - f64::from(u8::from(k == y));
            }
            if h == 0 {
                let (gw, gb) = grad.split_at_mut(c * d);
                for k in 0..c {
                    axpy(logits[k], x, &mut gw[k * d..(k + 1) * d]);
                    gb[k] += logits[k];
                }
                continue;
            }
            let w2 = &w[h * d + h..h * d + h + c * h];
            delta_h.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..c {
                axpy(logits[k], &w2[k * h..(k + 1) * h], &mut delta_h);
            }
            let (gw1, rest) = grad.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            for k in 0..c {
                axpy(logits[k], &hidden, &mut gw2[k * h..(k + 1) * h]);
                gb2[k] += logits[k];
            }
            for i in 0..h {
                if hidden[i] <= 0.0 {
                    continue;
                }
                axpy(delta_h[i], x, &mut gw1[i * d..(i + 1) * d]);
                gb1[i] += delta_h[i];
            }
        }
        loss
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn log_sum_exp_argmax(v: &[f64]) -> (f64, usize) {
    let mut arg = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[arg] {
            arg = i;
        }
    }
    let m = v[arg];
    (m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln(), arg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for LocalTraining {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.05,
            batch_size: 32,
        }
    }
}

/// `E` epochs of minibatch SGD from `w`; returns `w_k − w`.
pub fn local_train(
    mlp: &Mlp,
    w: &[f64],
    data: &Dataset,
    cfg: &LocalTraining,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("local training needs E ≥ 1 and batch ≥ 1".into()));
    }
    let mut wk = w.to_vec();
    let mut grad = vec![0.0; w.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = mlp.accumulate_gradient(&wk, data, batch, &mut grad);
            if !loss.is_finite() {
                return Err(Error::Divergence("local training loss is not finite".into()));
            }
            let step = cfg.lr / batch.len() as f64;
            for (p, g) in wk.iter_mut().zip(&grad) {
                *p -= step * g;
            }
        }
    }
    Ok(wk.iter().zip(w).map(|(a, b)| a - b).collect())
}

/// Splits `data` over `devices`: an `iid_fraction` share is dealt uniformly
/// at random, the rest is label-sorted and cut into one contiguous shard per
/// device, dealt in order. Device sizes differ by at most one sample.
pub fn partition_data(
    data: &Dataset,
    devices: usize,
    iid_fraction: f64,
    rng: &mut RngStream,
) -> Result<Vec<Dataset>> {
    if devices == 0 || data.len() < devices {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} samples over {devices} devices",
            data.len()
        )));
    }
    if !(0.0..=1.0).contains(&iid_fraction) {
        return Err(Error::InvalidArgument(format!("iid fraction {iid_fraction} outside [0,1]")));
    }
    let total = data.len();
    let mut idx: Vec<usize> = (0..total).collect();
    rng.shuffle(&mut idx);
    let iid_count = (iid_fraction * total as f64).round() as usize;
    let (iid, rest) = idx.split_at(iid_count);

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); devices];
    for (i, &s) in iid.iter().enumerate() {
        assigned[i % devices].push(s);
    }
    let mut sorted = rest.to_vec();
    sorted.sort_by_key(|&i| (data.labels[i], i));

    let base = total / devices;
    let extra = total % devices;
    let mut cursor = 0;
    for (k, dev) in assigned.iter_mut().enumerate() {
        let target = base + usize::from(k < extra);
        let take = target.saturating_sub(dev.len()).min(sorted.len() - cursor);
        dev.extend_from_slice(&sorted[cursor..cursor + take]);
        cursor += take;
    }
    // Leftovers can only appear if round-robin overfilled a device; deal them
    // to the smallest devices.
    while cursor < sorted.len() {
        let k = (0..devices).min_by_key(|&k| assigned[k].len()).unwrap_or(0);
        assigned[k].push(sorted[cursor]);
        cursor += 1;
    }
    Ok(assigned.iter().map(|ix| data.subset(ix)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counts() {
        let spec = TaskSpec::default();
        assert_eq!(spec.param_count(), 3208);
        let lin = TaskSpec { hidden: 0, ..spec };
        assert_eq!(lin.param_count(), 8 * 16 + 8);
    }

    #[test]
    fn zero_lr_is_frozen() {
        let spec = TaskSpec {
            train_samples: 50,
            test_samples: 10,
            ..TaskSpec::default()
        };
        let mut rng = RngStream::new(0, "t");
        let data = make_task(&spec, &mut rng).unwrap();
        let mlp = Mlp::new(spec);
        let w = mlp.init(&mut rng);
        let cfg = LocalTraining { lr: 0.0, ..LocalTraining::default() };
        let dw = local_train(&mlp, &w, &data.train, &cfg, &mut rng).unwrap();
        assert!(dw.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_split_sizes() {
        let spec = TaskSpec {
            train_samples: 103,
            test_samples: 1,
            ..TaskSpec::default()
        };
        let data = make_task(&spec, &mut RngStream::new(1, "t")).unwrap().train;
        for frac in [0.0, 0.2, 1.0] {
            let parts = partition_data(&data, 10, frac, &mut RngStream::new(2, "p")).unwrap();
            let sizes: Vec<usize> = parts.iter().map(Dataset::len).collect();
            assert_eq!(sizes.iter().sum::<usize>(), 103);
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "{sizes:?}");
        }
        assert!(partition_data(&data, 200, 0.5, &mut RngStream::new(2, "p")).is_err());
    }
}

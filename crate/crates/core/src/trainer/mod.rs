//! Offline end-to-end training of the decoder and URA codebook on rounds
//! recorded from a perfect-aggregation FEEL run.

mod checkpoint;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelConfig};
use crate::decoder::{forward, project_counts, DecoderConfig, DecoderMode, DecoderParams};
use crate::error::{Error, Result};
use crate::feelsim::{self, recovery_accuracy, CommStack, FeelConfig, Uplink};
use crate::numkernel::{matmul, RngStream, Tape, Tensor, Var};
use crate::uracode::{encode_slot, ActivityVector, CodebookMode, UraCodebook};
use crate::vq::{build_codebook, fragment_update, CurvatureProxy, Ordering, DEFAULT_CURVATURE_EPS};

pub use checkpoint::{
    load_checkpoint, load_dataset, read_checkpoint, read_dataset, save_checkpoint, save_dataset,
    write_checkpoint, write_dataset, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, DATASET_MAGIC,
    DATASET_VERSION,
};

/// Guards the normalisers of the sparsity and quantisation terms.
pub const LOSS_EPS: f64 = 1e-8;

/// One FEEL round of raw updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub bs_update: Vec<f64>,
    pub device_updates: Vec<Vec<f64>>,
    pub ka: usize,
}

/// Runs the perfect-aggregation loop of `cfg` and records every round.
pub fn collect_dataset(cfg: &FeelConfig) -> Result<Vec<RoundRecord>> {
    let pa = FeelConfig {
        uplink: Uplink::Perfect,
        ..cfg.clone()
    };
    let mut records = Vec::with_capacity(pa.rounds);
    let mut push = |r: RoundRecord| records.push(r);
    let out = feelsim::run_with(&pa, None, Some(&mut push))?;
    if let Some(msg) = out.halted {
        return Err(Error::Divergence(format!("perfect-aggregation collection run: {msg}")));
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l1: f64,
    pub orth: f64,
    pub ka: f64,
    /// Quantisation-residual weight; `None` disables the term.
    #[serde(default)]
    pub quant: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 0.01,
            orth: 0.001,
            ka: 0.01,
            quant: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub tolerance: f64,
    pub lr: f64,
    /// Epochs without improvement before the learning rate is halved.
    pub halving_patience: usize,
    pub loss: LossWeights,
    pub snr_db_range: [f64; 2],
    pub layers: usize,
    pub codebook_size: usize,
    pub codeword_len: usize,
    pub fragment_dim: usize,
    pub ordering: Ordering,
    pub curvature: bool,
    pub codebook_mode: CodebookMode,
    pub decoder_mode: DecoderMode,
    pub decoder: DecoderConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_samples: 64_000,
            val_samples: 8_000,
            test_samples: 10_000,
            batch_size: 64,
            max_epochs: 500,
            patience: 20,
            tolerance: 1e-6,
            lr: 1e-4,
            halving_patience: 10,
            loss: LossWeights::default(),
            snr_db_range: [0.0, 20.0],
            layers: 10,
            codebook_size: 32,
            codeword_len: 24,
            fragment_dim: 8,
            ordering: Ordering::Popularity,
            curvature: false,
            codebook_mode: CodebookMode::Learned,
            decoder_mode: DecoderMode::Learned,
            decoder: DecoderConfig::new(3.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("layers", self.layers),
            ("codebook_size", self.codebook_size),
            ("codeword_len", self.codeword_len),
            ("fragment_dim", self.fragment_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let w = &self.loss;
        if [w.l1, w.orth, w.ka, w.quant.unwrap_or(0.0)].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be ≥ 0".into()));
        }
        if !(self.lr > 0.0) || !(self.tolerance >= 0.0) {
            return Err(Error::Config("lr must be positive and tolerance ≥ 0".into()));
        }
        let [lo, hi] = self.snr_db_range;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("bad SNR range [{lo},{hi}]")));
        }
        if !(self.decoder.prior_ka_mean > 0.0) {
            return Err(Error::Config("prior_ka_mean must be positive".into()));
        }
        Ok(())
    }
}

/// One fragment slot with its ground-truth activity.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSample {
    pub x: ActivityVector,
    pub ka: usize,
    /// `Σ_devices ‖s − Q(s)‖² / (‖s‖² + ε)` over the slot's fragments.
    pub quant_residual: f64,
    pub record: usize,
    pub slot: usize,
}

/// Quantises every record against its own BS codebook and expands it into
/// fragment slots, in record order.
pub fn build_samples(
    records: &[RoundRecord],
    n: usize,
    d: usize,
    ordering: Ordering,
    curvature: bool,
    seed: u64,
) -> Result<Vec<SlotSample>> {
    let root = RngStream::new(seed, "samples");
    let per_record: Vec<Vec<SlotSample>> = records
        .par_iter()
        .enumerate()
        .map(|(r, rec)| {
            if rec.device_updates.len() != rec.ka || rec.ka == 0 {
                return Err(Error::Corrupt(format!("record {r}: ka does not match device updates")));
            }
            let bs = fragment_update(&rec.bs_update, d);
            let proxy = if curvature {
                Some(CurvatureProxy::estimate(&bs, DEFAULT_CURVATURE_EPS)?)
            } else {
                None
            };
            let cb = build_codebook(&bs, n, proxy.as_ref(), ordering, &mut root.derive(format!("record/{r}")))?;
            let frags: Vec<_> = rec.device_updates.iter().map(|u| fragment_update(u, d)).collect();
            let slots = frags[0].len();
            let mut out = Vec::with_capacity(slots);
            for j in 0..slots {
                let mut idx = Vec::with_capacity(rec.ka);
                let mut resid = 0.0;
                for f in &frags {
                    let s = &f[j];
                    let q = cb.quantise(s)?;
                    let err: f64 = s.0.iter().zip(cb.centroid(q)).map(|(a, b)| (a - b) * (a - b)).sum();
                    let norm: f64 = s.0.iter().map(|a| a * a).sum();
                    resid += err / (norm + LOSS_EPS);
                    idx.push(q);
                }
                out.push(SlotSample {
                    x: encode_slot(&idx, n)?,
                    ka: rec.ka,
                    quant_residual: resid,
                    record: r,
                    slot: j,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_record.into_iter().flatten().collect())
}

/// Train/validation/test slot sets.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<SlotSample>,
    pub val: Vec<SlotSample>,
    pub test: Vec<SlotSample>,
}

/// Shuffles the record order, expands into slots and takes the configured
/// numbers of train, validation and test slots in that order.
pub fn split_samples(records: &[RoundRecord], cfg: &TrainConfig) -> Result<Splits> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    RngStream::new(cfg.seed, "record-order").shuffle(&mut order);
    let shuffled: Vec<RoundRecord> = order.iter().map(|&i| records[i].clone()).collect();
    let all = build_samples(
        &shuffled,
        cfg.codebook_size,
        cfg.fragment_dim,
        cfg.ordering,
        cfg.curvature,
        cfg.seed,
    )?;
    let need = cfg.train_samples + cfg.val_samples + cfg.test_samples;
    if all.len() < need {
        return Err(Error::Config(format!(
            "dataset holds {} slots, configuration needs {need}",
            all.len()
        )));
    }
    let mut it = all.into_iter();
    let train = it.by_ref().take(cfg.train_samples).collect();
    let val = it.by_ref().take(cfg.val_samples).collect();
    let test = it.take(cfg.test_samples).collect();
    Ok(Splits { train, val, test })
}

/// Plain-value loss for one slot plus the block-level orthogonality term.
#[allow(clippy::too_many_arguments)]
pub fn compose_loss(
    x_real: &[f64],
    x: &[f64],
    ka_hat: f64,
    ka: f64,
    cb: &UraCodebook,
    quant_residual: Option<f64>,
    w: &LossWeights,
) -> f64 {
    let mse: f64 = x_real.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
    let l1_hat: f64 = x_real.iter().map(|v| v.abs()).sum();
    let l1_true: f64 = x.iter().map(|v| v.abs()).sum();
    let mut loss = mse + w.l1 * l1_hat / (l1_true + LOSS_EPS) + w.orth * cb.orthogonality_penalty();
    loss += w.ka * (ka_hat - ka).powi(2);
    if let (Some(lq), Some(r)) = (w.quant, quant_residual) {
        loss += lq * r;
    }
    loss
}

/// Per-slot loss terms on the tape (everything except the orthogonality
/// penalty, which does not depend on the slot).
pub fn slot_loss_on_tape<'t>(
    x_hat: Var<'t>,
    ka_hat: Var<'t>,
    sample: &SlotSample,
    w: &LossWeights,
) -> Var<'t> {
    let tape = x_hat.tape();
    let x = sample.x.as_f64();
    let l1_true: f64 = x.iter().sum();
    let target = tape.constant(Tensor::vector(x));
    let mut loss = x_hat.sub(target).square().sum();
    loss = loss.add(x_hat.abs().sum().mul_const(w.l1 / (l1_true + LOSS_EPS)));
    loss = loss.add(ka_hat.add_const(-(sample.ka as f64)).square().mul_const(w.ka));
    if let Some(lq) = w.quant {
        loss = loss.add_const(lq * sample.quant_residual);
    }
    loss
}

/// Gradient of `‖WᵀW − I‖²_F`: `4 W (WᵀW − I)`.
fn orthogonality_gradient(cb: &UraCodebook) -> Tensor {
    let l = cb.l();
    let wt = cb.w.transpose().expect("matrix");
    let mut m = matmul(&wt, &cb.w).expect("square");
    for i in 0..l {
        m.data_mut()[i * l + i] -= 1.0;
    }
    matmul(&cb.w, &m).expect("square").map(|v| 4.0 * v)
}

/// The trainable communication layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: DecoderParams,
    pub codebook: UraCodebook,
}

impl Model {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let root = RngStream::new(cfg.seed, "model");
        let codebook = UraCodebook::init(
            cfg.codebook_size,
            cfg.codeword_len,
            cfg.codebook_mode,
            &mut root.derive("codebook"),
        )?;
        let params = match cfg.decoder_mode {
            DecoderMode::Learned => DecoderParams::init(cfg.layers, &mut root.derive("decoder"))?,
            DecoderMode::Fixed => DecoderParams::fixed(cfg.layers),
        };
        Ok(Self { params, codebook })
    }

    pub fn comm_stack(&self, cfg: &TrainConfig) -> CommStack {
        CommStack {
            codebook: self.codebook.clone(),
            params: self.params.clone(),
            decoder: cfg.decoder,
            layers: cfg.layers,
        }
    }
}

/// Which parts of the model receive gradient steps.
#[derive(Debug, Clone, Copy)]
struct Trainable {
    decoder: bool,
    codebook: bool,
}

impl Trainable {
    fn of(cfg: &TrainConfig) -> Self {
        Self {
            decoder: cfg.decoder_mode == DecoderMode::Learned,
            codebook: cfg.codebook_mode.is_trainable(),
        }
    }
}

/// Received signal of a sample for a given noise stream.
fn received(sample: &SlotSample, cb: &UraCodebook, snr_range: [f64; 2], rng: &mut RngStream) -> Result<Vec<f64>> {
    let snr = if snr_range[0] == snr_range[1] {
        snr_range[0]
    } else {
        rng.uniform_range(snr_range[0], snr_range[1])
    };
    let clean = cb.transmit(&sample.x)?;
    Ok(channel::apply(&clean, &ChannelConfig::new(snr, sample.ka)?, rng))
}

/// Loss and gradients (in [`Model`] tensor order) of one slot.
fn slot_step(
    model: &Model,
    cfg: &TrainConfig,
    trainable: Trainable,
    sample: &SlotSample,
    y: &[f64],
    want_grad: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let tape = Tape::new();
    let yv = tape.constant(Tensor::vector(y.to_vec()));
    let (d, w) = if trainable.codebook && want_grad {
        (tape.param(model.codebook.d.clone()), tape.param(model.codebook.w.clone()))
    } else {
        (tape.constant(model.codebook.d.clone()), tape.constant(model.codebook.w.clone()))
    };
    let csyn = d.matmul(w)?;
    let pv = model.params.on_tape(&tape, trainable.decoder && want_grad);
    let out = forward(&tape, yv, csyn, &pv, cfg.decoder_mode, &cfg.decoder, cfg.layers)?;
    let loss = slot_loss_on_tape(out.x_hat, out.ka_hat, sample, &cfg.loss);
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFinite("slot loss".into()));
    }
    if !want_grad {
        return Ok((value, None));
    }
    let grads = tape.backward(loss)?;
    let mut out_g = Vec::new();
    if trainable.decoder {
        out_g.extend(pv.gradients(&grads));
    }
    if trainable.codebook {
        for v in [d, w] {
            out_g.push(grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())));
        }
    }
    Ok((value, Some(out_g)))
}

fn trainable_tensors(model: &mut Model, t: Trainable) -> Vec<&mut Tensor> {
    let mut out: Vec<&mut Tensor> = Vec::new();
    if t.decoder {
        out.extend(model.params.tensors_mut());
    }
    if t.codebook {
        out.push(&mut model.codebook.d);
        out.push(&mut model.codebook.w);
    }
    out
}

/// Mean loss and mean gradient over a block of slots with given received
/// signals. The orthogonality term is added once.
pub fn block_loss_and_gradients(
    model: &Model,
    cfg: &TrainConfig,
    samples: &[SlotSample],
    ys: &[Vec<f64>],
) -> Result<(f64, Vec<Tensor>)> {
    let t = Trainable::of(cfg);
    let per: Vec<(f64, Option<Vec<Tensor>>)> = samples
        .par_iter()
        .zip(ys)
        .map(|(s, y)| slot_step(model, cfg, t, s, y, true))
        .collect::<Result<_>>()?;
    let count = samples.len().max(1) as f64;
    let mut loss = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for (l, g) in per {
        loss += l;
        let g = g.expect("gradients requested");
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => {
                for (ai, gi) in a.iter_mut().zip(&g) {
                    for (x, y) in ai.data_mut().iter_mut().zip(gi.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut grads = acc.unwrap_or_default();
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v /= count);
    }
    loss = loss / count + cfg.loss.orth * model.codebook.orthogonality_penalty();
    if t.codebook && cfg.loss.orth > 0.0 {
        let og = orthogonality_gradient(&model.codebook);
        if let Some(gw) = grads.last_mut() {
            for (x, y) in gw.data_mut().iter_mut().zip(og.data()) {
                *x += cfg.loss.orth * y;
            }
        }
    }
    Ok((loss, grads))
}

/// Block loss without gradients.
pub fn block_loss(model: &Model, cfg: &TrainConfig, samples: &[SlotSample], ys: &[Vec<f64>]) -> Result<f64> {
    let t = Trainable::of(cfg);
    let per: Vec<f64> = samples
        .par_iter()
        .zip(ys)
        .map(|(s, y)| slot_step(model, cfg, t, s, y, false).map(|r| r.0))
        .collect::<Result<_>>()?;
    let count = samples.len().max(1) as f64;
    Ok(per.iter().sum::<f64>() / count + cfg.loss.orth * model.codebook.orthogonality_penalty())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (pk, gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                *pk -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// Largest codeword-norm deviation from 1 after the epoch.
    pub norm_deviation: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,val_loss,lr";

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for e in log {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.lr));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation checkpoint.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

fn noise_for(samples: &[SlotSample], cb: &UraCodebook, snr: [f64; 2], base: &RngStream) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| received(s, cb, snr, &mut base.derive(i)))
        .collect()
}

fn validation_loss(model: &Model, cfg: &TrainConfig, val: &[SlotSample]) -> Result<f64> {
    let ys = noise_for(val, &model.codebook, cfg.snr_db_range, &RngStream::new(cfg.seed, "val-noise"))?;
    block_loss(model, cfg, val, &ys)
}

/// Blocks of slots from the same record, at most `batch` long.
fn blocks(samples: &[SlotSample], batch: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < samples.len() {
        let rec = samples[start].record;
        let mut end = start;
        while end < samples.len() && samples[end].record == rec && end - start < batch {
            end += 1;
        }
        out.push(start..end);
        start = end;
    }
    out
}

/// Trains from scratch or resumes from `resume`, continuing its epoch count.
pub fn train(splits: &Splits, cfg: &TrainConfig, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if splits.val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let t = Trainable::of(cfg);
    let (mut model, first_epoch) = match resume {
        Some(ck) => (
            Model {
                params: ck.params,
                codebook: ck.codebook,
            },
            ck.epoch + 1,
        ),
        None => (Model::init(cfg)?, 1),
    };
    let mut best_val = validation_loss(&model, cfg, &splits.val)?;
    let mut best = Checkpoint::new(&model, cfg, first_epoch - 1, best_val);
    let mut log = vec![EpochLog {
        epoch: first_epoch - 1,
        train_loss: f64::NAN,
        val_loss: best_val,
        lr: cfg.lr,
        norm_deviation: model.codebook.max_norm_deviation(),
    }];
    log::info!("epoch {}: val_loss={best_val:.6}", first_epoch - 1);
    let mut adam = Adam::new(cfg.lr);
    let mut stall = 0;
    let mut since_halving = 0;
    let block_ranges = blocks(&splits.train, cfg.batch_size);
    let noise_root = RngStream::new(cfg.seed, "train-noise");

    for epoch in first_epoch..first_epoch + cfg.max_epochs {
        let mut order: Vec<usize> = (0..block_ranges.len()).collect();
        noise_root.derive(format!("order/{epoch}")).shuffle(&mut order);
        let epoch_noise = noise_root.derive(format!("epoch/{epoch}"));
        let mut total = 0.0;
        let mut count = 0usize;
        for &b in &order {
            let range = block_ranges[b].clone();
            let samples = &splits.train[range.clone()];
            let ys = samples
                .iter()
                .zip(range.clone())
                .map(|(s, i)| received(s, &model.codebook, cfg.snr_db_range, &mut epoch_noise.derive(i)))
                .collect::<Result<Vec<_>>>()?;
            let step = block_loss_and_gradients(&model, cfg, samples, &ys);
            let (loss, grads) = match step {
                Ok(r) if r.0.is_finite() && r.1.iter().all(Tensor::is_finite) => r,
                Ok(_) | Err(Error::NonFinite(_)) | Err(Error::Divergence(_)) => {
                    let msg = format!("non-finite loss or gradient in epoch {epoch}");
                    log::error!("{msg}; returning the best checkpoint");
                    return Ok(TrainOutcome {
                        checkpoint: best,
                        log,
                        aborted: Some(msg),
                    });
                }
                Err(e) => return Err(e),
            };
            total += loss * samples.len() as f64;
            count += samples.len();
            adam.update(trainable_tensors(&mut model, t), &grads);
            if t.codebook {
                model.codebook.renormalise()?;
            }
        }
        let train_loss = total / count.max(1) as f64;
        let val_loss = validation_loss(&model, cfg, &splits.val)?;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: adam.lr,
            norm_deviation: model.codebook.max_norm_deviation(),
        });
        log::info!("epoch {epoch}: train_loss={train_loss:.6} val_loss={val_loss:.6} lr={:.2e}", adam.lr);
        if val_loss < best_val - cfg.tolerance {
            best_val = val_loss;
            best = Checkpoint::new(&model, cfg, epoch, val_loss);
            stall = 0;
            since_halving = 0;
        } else {
            stall += 1;
            since_halving += 1;
        }
        if since_halving >= cfg.halving_patience {
            adam.lr *= 0.5;
            since_halving = 0;
        }
        if stall >= cfg.patience {
            log::info!("early stop after {stall} epochs without improvement");
            break;
        }
    }
    Ok(TrainOutcome {
        checkpoint: best,
        log,
        aborted: None,
    })
}

/// Decoding outcome of one evaluation slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlotResult {
    pub accuracy: f64,
    pub ka_hat: f64,
    pub ka: usize,
}

/// Decodes every sample at a fixed SNR; slot `i` uses noise stream
/// `(seed, "eval/i")`. Estimates are projected onto the slot's own `K̂`.
pub fn evaluate_slots(
    samples: &[SlotSample],
    stack: &CommStack,
    mode: DecoderMode,
    snr_db: f64,
    seed: u64,
) -> Result<Vec<SlotResult>> {
    let root = RngStream::new(seed, "eval");
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let y = received(s, &stack.codebook, [snr_db, snr_db], &mut root.derive(i))?;
            let out = crate::decoder::decode(&y, &stack.codebook, &stack.params, mode, &stack.decoder, stack.layers)?;
            let x_hat = project_counts(&out.x_real, out.ka_hat);
            Ok(SlotResult {
                accuracy: recovery_accuracy(&s.x.as_f64(), &x_hat.as_f64())?,
                ka_hat: out.ka_hat,
                ka: s.ka,
            })
        })
        .collect()
}

#![allow(dead_code, clippy::needless_range_loop)]

use airsum::numkernel::{Tape, Tensor, Var};

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Central finite-difference gradient of `f` with respect to each tensor in
/// `params`.
pub fn finite_diff<F>(params: &[Tensor], step: f64, f: F) -> Vec<Vec<f64>>
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let mut plus = params.to_vec();
            plus[p].data_mut()[i] += step;
            let mut minus = params.to_vec();
            minus[p].data_mut()[i] -= step;
            grad[i] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

/// Analytic gradient from the tape versus central differences; returns the
/// worst per-parameter relative error.
pub fn gradient_check<F>(params: &[Tensor], step: f64, build: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&tape, &vars);
    let grads = tape.backward(loss).expect("backward");
    let numeric = finite_diff(params, step, |ps| {
        let tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        build(&tape, &vars).item()
    });
    vars.iter()
        .zip(&numeric)
        .map(|(v, num)| rel_err(grads.get(*v).unwrap().data(), num, 1e-12))
        .fold(0.0, f64::max)
}

use airsum::channel::{self, ChannelConfig};
use airsum::decoder::DecoderConfig;
use airsum::numkernel::RngStream;
use airsum::trainer::{block_loss, block_loss_and_gradients, Model, SlotSample, TrainConfig};
use airsum::uracode::encode_slot;

/// Worst norm-wise relative gradient error per parameter group.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub scalars: f64,
    pub cnn: f64,
    pub d: f64,
    pub w: f64,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.scalars.max(self.cnn).max(self.d).max(self.w)
    }
}

pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        codebook_size: 16,
        codeword_len: 8,
        layers: 2,
        decoder: DecoderConfig::new(2.5),
        seed,
        ..TrainConfig::default()
    }
}

/// Random slots with 2–3 devices over `n` codewords and their noisy signals.
pub fn random_slots(model: &Model, count: usize, snr_db: f64, seed: u64) -> (Vec<SlotSample>, Vec<Vec<f64>>) {
    let n = model.codebook.n();
    let mut rng = RngStream::new(seed, "slots");
    let mut samples = Vec::new();
    let mut ys = Vec::new();
    for i in 0..count {
        let ka = rng.int_inclusive(2, 3);
        let idx: Vec<usize> = (0..ka).map(|_| rng.below(n)).collect();
        let x = encode_slot(&idx, n).unwrap();
        let clean = model.codebook.transmit(&x).unwrap();
        ys.push(channel::apply(&clean, &ChannelConfig::new(snr_db, ka).unwrap(), &mut rng));
        samples.push(SlotSample {
            x,
            ka,
            quant_residual: 0.0,
            record: 0,
            slot: i,
        });
    }
    (samples, ys)
}

fn tensor_mut(model: &mut Model, t: usize) -> &mut Tensor {
    let decoder = model.params.tensors_mut().len();
    if t < decoder {
        model.params.tensors_mut().into_iter().nth(t).unwrap()
    } else if t == decoder {
        &mut model.codebook.d
    } else {
        &mut model.codebook.w
    }
}

/// End-to-end check of decoder and codebook gradients on the tiny config.
pub fn end_to_end_gradient_check(seed: u64) -> GradReport {
    let cfg = tiny_config(seed);
    let mut model = Model::init(&cfg).unwrap();
    let mut rng = RngStream::new(seed, "w-offset");
    for v in model.codebook.w.data_mut() {
        *v += 0.05 * rng.normal();
    }
    let (samples, ys) = random_slots(&model, 4, 10.0, seed);
    let (_, grads) = block_loss_and_gradients(&model, &cfg, &samples, &ys).unwrap();
    let per_layer = 13;
    let decoder = model.params.tensors().len();
    let mut report = GradReport {
        scalars: 0.0,
        cnn: 0.0,
        d: 0.0,
        w: 0.0,
    };
    for (t, g) in grads.iter().enumerate() {
        let len = g.len();
        // Scalar gates can carry gradients near 1e-6, where round-off of a
        // smaller step dominates; larger steps on CNN weights cross ReLU kinks.
        let h = if len == 1 { 1e-5 } else { 1e-6 };
        let mut numeric = vec![0.0; len];
        for i in 0..len {
            let mut plus = model.clone();
            tensor_mut(&mut plus, t).data_mut()[i] += h;
            let mut minus = model.clone();
            tensor_mut(&mut minus, t).data_mut()[i] -= h;
            let lp = block_loss(&plus, &cfg, &samples, &ys).unwrap();
            let lm = block_loss(&minus, &cfg, &samples, &ys).unwrap();
            numeric[i] = (lp - lm) / (2.0 * h);
        }
        let err = rel_err(g.data(), &numeric, 1e-9);
        let slot = if t == decoder {
            &mut report.d
        } else if t == decoder + 1 {
            &mut report.w
        } else if t % per_layer < 7 {
            &mut report.scalars
        } else {
            &mut report.cnn
        };
        *slot = slot.max(err);
    }
    report
}

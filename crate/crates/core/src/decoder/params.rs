use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{sigmoid, softplus, Gradients, RngStream, Tape, Tensor, Var};

pub const CNN_IN: usize = 6;
pub const CNN_WIDTH: usize = 32;
pub const CNN_KERNEL: usize = 3;

/// Smallest temperature the softplus map may produce.
pub const TAU_MIN: f64 = 1e-6;
/// Stretch of the mixing gate so that the closed interval [0, 1] is reachable.
pub const ZETA_STRETCH: f64 = 0.01;

/// Raw per-layer scalar → constrained value maps.
pub mod maps {
    use super::*;

    pub fn gamma(raw: f64) -> f64 {
        0.3 + 0.85 * (1.0 + raw.tanh())
    }

    pub fn eta(raw: f64) -> f64 {
        sigmoid(raw)
    }

    pub fn beta(raw: f64) -> f64 {
        0.5 + 0.75 * (1.0 + raw.tanh())
    }

    pub fn tau(raw: f64) -> f64 {
        softplus(raw).max(TAU_MIN)
    }

    pub fn zeta(raw: f64) -> f64 {
        ((1.0 + 2.0 * ZETA_STRETCH) * sigmoid(raw) - ZETA_STRETCH).clamp(0.0, 1.0)
    }

    pub fn gate(raw: f64) -> f64 {
        sigmoid(raw)
    }

    pub fn gamma_inv(v: f64) -> f64 {
        ((v - 0.3) / 0.85 - 1.0).atanh()
    }

    pub fn eta_inv(v: f64) -> f64 {
        (v / (1.0 - v)).ln()
    }

    pub fn beta_inv(v: f64) -> f64 {
        ((v - 0.5) / 0.75 - 1.0).atanh()
    }

    pub fn tau_inv(v: f64) -> f64 {
        v.exp_m1().ln()
    }

    pub fn zeta_inv(v: f64) -> f64 {
        let s = (v + ZETA_STRETCH) / (1.0 + 2.0 * ZETA_STRETCH);
        (s / (1.0 - s)).ln()
    }
}

/// Raw value for ζ that maps to exactly 0 (gate closed).
pub const ZETA_CLOSED_RAW: f64 = -10.0;

/// Per-layer scalar values after range mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerScalars {
    pub gamma: f64,
    pub eta: f64,
    pub beta: f64,
    pub tau: f64,
    pub zeta: f64,
    pub alpha_gate: f64,
    pub sigma_gate: f64,
}

/// Three-stage 1-D CNN: 6→32→32→1 channels, kernel 3, same padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cnn {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl Cnn {
    pub fn zeros() -> Self {
        Self {
            w1: Tensor::zeros(&[CNN_WIDTH, CNN_IN, CNN_KERNEL]),
            b1: Tensor::zeros(&[CNN_WIDTH]),
            w2: Tensor::zeros(&[CNN_WIDTH, CNN_WIDTH, CNN_KERNEL]),
            b2: Tensor::zeros(&[CNN_WIDTH]),
            w3: Tensor::zeros(&[1, CNN_WIDTH, CNN_KERNEL]),
            b3: Tensor::zeros(&[1]),
        }
    }

    /// He-style initialisation; biases start at zero.
    pub fn init(rng: &mut RngStream) -> Self {
        let he = |rng: &mut RngStream, shape: &[usize]| {
            let fan_in = (shape[1] * shape[2]) as f64;
            rng.gauss(shape).map(|v| v * (2.0 / fan_in).sqrt())
        };
        Self {
            w1: he(rng, &[CNN_WIDTH, CNN_IN, CNN_KERNEL]),
            b1: Tensor::zeros(&[CNN_WIDTH]),
            w2: he(rng, &[CNN_WIDTH, CNN_WIDTH, CNN_KERNEL]),
            b2: Tensor::zeros(&[CNN_WIDTH]),
            w3: he(rng, &[1, CNN_WIDTH, CNN_KERNEL]).map(|v| 0.1 * v),
            b3: Tensor::zeros(&[1]),
        }
    }
}

/// Learnable parameters of one unrolled layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub gamma: Tensor,
    pub eta: Tensor,
    pub beta: Tensor,
    pub tau: Tensor,
    pub zeta: Tensor,
    pub alpha_gate: Tensor,
    pub sigma_gate: Tensor,
    pub cnn: Cnn,
}

pub(crate) const LAYER_TENSOR_NAMES: [&str; 13] = [
    "gamma", "eta", "beta", "tau", "zeta", "alpha_gate", "sigma_gate", "cnn.w1", "cnn.b1",
    "cnn.w2", "cnn.b2", "cnn.w3", "cnn.b3",
];

impl LayerParams {
    /// Raw values whose maps give γ≈1, η=½, β≈1, τ≈1, g_α=s_σ=½ and the
    /// requested mixing gate.
    pub fn defaults(zeta: f64, cnn: Cnn) -> Self {
        Self {
            gamma: Tensor::scalar(maps::gamma_inv(1.0)),
            eta: Tensor::scalar(0.0),
            beta: Tensor::scalar(maps::beta_inv(1.0)),
            tau: Tensor::scalar(maps::tau_inv(1.0)),
            zeta: Tensor::scalar(if zeta <= 0.0 {
                ZETA_CLOSED_RAW
            } else {
                maps::zeta_inv(zeta)
            }),
            alpha_gate: Tensor::scalar(0.0),
            sigma_gate: Tensor::scalar(0.0),
            cnn,
        }
    }

    pub fn scalars(&self) -> LayerScalars {
        LayerScalars {
            gamma: maps::gamma(self.gamma.item()),
            eta: maps::eta(self.eta.item()),
            beta: maps::beta(self.beta.item()),
            tau: maps::tau(self.tau.item()),
            zeta: maps::zeta(self.zeta.item()),
            alpha_gate: maps::gate(self.alpha_gate.item()),
            sigma_gate: maps::gate(self.sigma_gate.item()),
        }
    }

    fn tensors(&self) -> [&Tensor; 13] {
        let c = &self.cnn;
        [
            &self.gamma,
            &self.eta,
            &self.beta,
            &self.tau,
            &self.zeta,
            &self.alpha_gate,
            &self.sigma_gate,
            &c.w1,
            &c.b1,
            &c.w2,
            &c.b2,
            &c.w3,
            &c.b3,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 13] {
        let c = &mut self.cnn;
        [
            &mut self.gamma,
            &mut self.eta,
            &mut self.beta,
            &mut self.tau,
            &mut self.zeta,
            &mut self.alpha_gate,
            &mut self.sigma_gate,
            &mut c.w1,
            &mut c.b1,
            &mut c.w2,
            &mut c.b2,
            &mut c.w3,
            &mut c.b3,
        ]
    }
}

/// Parameters of the whole unrolled decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub layers: Vec<LayerParams>,
}

impl DecoderParams {
    /// Trainable initialisation: default scalars, mixing gate 0.85, random
    /// CNN weights.
    pub fn init(layers: usize, rng: &mut RngStream) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidArgument("decoder needs at least one layer".into()));
        }
        Ok(Self {
            layers: (0..layers)
                .map(|l| LayerParams::defaults(0.85, Cnn::init(&mut rng.derive(format!("cnn{l}")))))
                .collect(),
        })
    }

    /// Frozen classical baseline: default scalars, CNN gate closed.
    pub fn fixed(layers: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|_| LayerParams::defaults(0.0, Cnn::zeros()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.tensors()
                    .into_iter()
                    .zip(LAYER_TENSOR_NAMES)
                    .map(move |(t, name)| (format!("layer{i}.{name}"), t))
            })
            .collect()
    }

    /// Rebuilds parameters from tensors in `tensors()` order.
    pub fn from_tensors(layers: usize, tensors: Vec<Tensor>) -> Result<Self> {
        let mut out = Self::fixed(layers);
        let slots = out.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Corrupt(format!(
                "expected {} decoder tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Corrupt(format!(
                    "decoder tensor shape {:?} vs expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(out)
    }

    /// Registers every tensor as a leaf; trainable when `trainable`.
    pub fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> ParamVars<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let [g, e, b, ta, z, ag, sg, w1, b1, w2, b2, w3, b3] = l.tensors().map(leaf);
                    LayerVars {
                        gamma: g,
                        eta: e,
                        beta: b,
                        tau: ta,
                        zeta: z,
                        alpha_gate: ag,
                        sigma_gate: sg,
                        w1,
                        b1,
                        w2,
                        b2,
                        w3,
                        b3,
                    }
                })
                .collect(),
        }
    }
}

/// Tape leaves mirroring one [`LayerParams`].
#[derive(Debug, Clone, Copy)]
pub struct LayerVars<'t> {
    pub gamma: Var<'t>,
    pub eta: Var<'t>,
    pub beta: Var<'t>,
    pub tau: Var<'t>,
    pub zeta: Var<'t>,
    pub alpha_gate: Var<'t>,
    pub sigma_gate: Var<'t>,
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
    pub w3: Var<'t>,
    pub b3: Var<'t>,
}

impl<'t> LayerVars<'t> {
    fn all(&self) -> [Var<'t>; 13] {
        [
            self.gamma,
            self.eta,
            self.beta,
            self.tau,
            self.zeta,
            self.alpha_gate,
            self.sigma_gate,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.w3,
            self.b3,
        ]
    }

    pub fn gamma(&self) -> Var<'t> {
        self.gamma.tanh().add_const(1.0).mul_const(0.85).add_const(0.3)
    }

    pub fn eta(&self) -> Var<'t> {
        self.eta.sigmoid()
    }

    pub fn beta(&self) -> Var<'t> {
        self.beta.tanh().add_const(1.0).mul_const(0.75).add_const(0.5)
    }

    pub fn tau(&self) -> Var<'t> {
        self.tau.softplus().floor_at(TAU_MIN)
    }

    pub fn zeta(&self) -> Var<'t> {
        self.zeta
            .sigmoid()
            .mul_const(1.0 + 2.0 * ZETA_STRETCH)
            .add_const(-ZETA_STRETCH)
            .clamp(0.0, 1.0)
    }

    pub fn alpha_gate(&self) -> Var<'t> {
        self.alpha_gate.sigmoid()
    }

    pub fn sigma_gate(&self) -> Var<'t> {
        self.sigma_gate.sigmoid()
    }
}

#[derive(Debug, Clone)]
pub struct ParamVars<'t> {
    pub layers: Vec<LayerVars<'t>>,
}

impl ParamVars<'_> {
    /// Gradients in `DecoderParams::tensors()` order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.all())
            .map(|v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&v.shape()))
            })
            .collect()
    }
}

use airsum::decoder::{
    decode, init_state, input_block, maps, posterior_moments, project_counts, standardised_log_rates, Cnn,
    DecoderConfig, DecoderMode, DecoderParams, LayerParams,
};
use airsum::numkernel::{RngStream, Tape, Tensor};
use airsum::uracode::{encode_slot, CodebookMode, UraCodebook};
use proptest::prelude::*;
use statrs::function::gamma::ln_gamma;

/// Neumaier-compensated sum.
fn nsum(it: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in it {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    s + c
}

/// Brute-force tempered posterior: log-weights from `ln Γ`, compensated sums.
fn oracle(r: f64, v: f64, alpha: f64, lambda: f64, tau: f64, x_max: usize) -> (f64, f64, f64) {
    let logw: Vec<f64> = (0..=x_max)
        .map(|x| {
            let prior = if x == 0 {
                ((1.0 - alpha) + alpha * (-lambda).exp()).ln()
            } else {
                alpha.ln() + x as f64 * lambda.ln() - lambda - ln_gamma(x as f64 + 1.0)
            };
            (prior - (r - x as f64).powi(2) / (2.0 * v)) / tau
        })
        .collect();
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let un: Vec<f64> = logw.iter().map(|u| (u - top).exp()).collect();
    let z = nsum(un.iter().copied());
    let w: Vec<f64> = un.iter().map(|u| u / z).collect();
    let mean = nsum(w.iter().enumerate().map(|(x, p)| p * x as f64));
    let var = nsum(w.iter().enumerate().map(|(x, p)| p * (x as f64 - mean).powi(2)));
    let active = nsum(w.iter().skip(1).copied());
    (mean, var, active)
}

#[test]
fn posterior_matches_enumeration_oracle() {
    let mut rng = RngStream::new(11, "posterior-oracle");
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let r = rng.uniform_range(-2.0, 12.0);
        let v = 10f64.powf(rng.uniform_range(-2.0, 1.0));
        let alpha = rng.uniform_range(0.01, 0.99);
        let lambda = 10f64.powf(rng.uniform_range(-2.0, 1.0));
        let tau = rng.uniform_range(0.3, 1.5);
        let m = posterior_moments(r, v, alpha, lambda, tau, 40);
        let (mean, var, active) = oracle(r, v, alpha, lambda, tau, 40);
        assert!(!m.underflow);
        for (a, b) in [(m.mean, mean), (m.var, var), (m.p_active, active)] {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-10, "worst absolute error {worst:e}");
}

/// Exhaustive ℓ2-nearest non-negative integer vector with the given sum.
fn exhaustive_projection(x: &[f64], k: u32) -> (Vec<u32>, f64) {
    fn rec(x: &[f64], left: u32, cur: &mut Vec<u32>, best: &mut (Vec<u32>, f64)) {
        if cur.len() == x.len() - 1 {
            cur.push(left);
            let cost: f64 = cur.iter().zip(x).map(|(&c, &v)| (c as f64 - v).powi(2)).sum();
            if cost < best.1 {
                *best = (cur.clone(), cost);
            }
            cur.pop();
            return;
        }
        for c in 0..=left {
            cur.push(c);
            rec(x, left - c, cur, best);
            cur.pop();
        }
    }
    let mut best = (vec![], f64::INFINITY);
    rec(x, k, &mut Vec::new(), &mut best);
    best
}

#[test]
fn projection_matches_exhaustive_oracle() {
    let mut rng = RngStream::new(12, "projection-oracle");
    for case in 0..1000 {
        let n = rng.int_inclusive(1, 8);
        let k = rng.int_inclusive(0, 4) as u32;
        let x: Vec<f64> = (0..n).map(|_| rng.uniform_range(-0.5, 2.5)).collect();
        let got = project_counts(&x, k as f64);
        let cost: f64 = got.counts.iter().zip(&x).map(|(&c, &v)| (c as f64 - v).powi(2)).sum();
        let (_, best) = exhaustive_projection(&x, k);
        assert_eq!(got.ka(), k, "case {case}");
        assert!((cost - best).abs() < 1e-12, "case {case}: {x:?} K={k} got {:?}", got.counts);
    }
}

#[test]
fn projection_hand_cases() {
    assert_eq!(project_counts(&[1.4, 0.9, -0.2], 2.0).counts, vec![1, 1, 0]);
    assert_eq!(project_counts(&[2.6, 0.2], 3.0).counts, vec![3, 0]);
    assert_eq!(project_counts(&[0.0, 2.0, 1.0], 3.0).counts, vec![0, 2, 1]);
}

proptest! {
    #[test]
    fn range_maps_stay_in_range(raw in -50.0f64..50.0) {
        let g = maps::gamma(raw);
        prop_assert!((0.3..=2.0).contains(&g));
        let e = maps::eta(raw);
        prop_assert!((0.0..=1.0).contains(&e));
        let b = maps::beta(raw);
        prop_assert!((0.5..=2.0).contains(&b));
        prop_assert!(maps::tau(raw) > 0.0);
        let z = maps::zeta(raw);
        prop_assert!((0.0..=1.0).contains(&z));
        let s = maps::gate(raw);
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn projection_is_a_count_vector(x in prop::collection::vec(-3.0f64..6.0, 1..12), k in 0u32..10) {
        let p = project_counts(&x, k as f64);
        prop_assert_eq!(p.len(), x.len());
        prop_assert_eq!(p.ka(), k);
    }
}

#[test]
fn input_block_hand_example() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::vector(vec![1.0]));
    let mut state = init_state(&tape, y, 1.0, 1);
    state.v = tape.constant(Tensor::vector(vec![1.0]));
    state.sigma2 = tape.scalar(1.0);
    state.r = tape.constant(Tensor::vector(vec![1.0]));
    state.x_hat = tape.constant(Tensor::vector(vec![0.0]));
    let c = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
    let params = DecoderParams {
        layers: vec![LayerParams::defaults(0.0, Cnn::zeros())],
    };
    let pv = params.on_tape(&tape, false);
    let beta = maps::beta(params.layers[0].beta.item());
    let out = input_block(&mut state, c, c.square(), &pv.layers[0], DecoderMode::Fixed, 32).unwrap();
    let kappa = beta / 2.0;
    assert!((kappa - 0.5).abs() < 1e-12);
    assert!((out.pseudo_var.item() - 1.0 / kappa).abs() < 1e-12);
    assert!((out.pseudo_obs.item() - 1.0).abs() < 1e-12);
    assert_eq!(state.x_hat.item(), out.mean.item());
}

#[test]
fn constant_rates_standardise_to_zero() {
    let tape = Tape::new();
    let l = tape.constant(Tensor::filled(&[7], 0.3));
    let s = standardised_log_rates(l);
    assert!(s.value().data().iter().all(|&v| v == 0.0));
}

fn gaussian_codebook(n: usize, l: usize, seed: u64) -> UraCodebook {
    UraCodebook::init(n, l, CodebookMode::FixedGaussian, &mut RngStream::new(seed, "codebook")).unwrap()
}

fn gate_closed_learned(layers: usize) -> DecoderParams {
    let rng = RngStream::new(3, "cnn");
    DecoderParams {
        layers: (0..layers)
            .map(|i| LayerParams::defaults(0.0, Cnn::init(&mut rng.derive(i))))
            .collect(),
    }
}

#[test]
fn closed_gate_learned_equals_fixed_bitwise() {
    let cb = gaussian_codebook(32, 24, 5);
    let cfg = DecoderConfig::new(3.0);
    let mut rng = RngStream::new(6, "signal");
    for _ in 0..20 {
        let idx: Vec<usize> = (0..3).map(|_| rng.below(32)).collect();
        let x = encode_slot(&idx, 32).unwrap();
        let y: Vec<f64> = cb.transmit(&x).unwrap().iter().map(|v| v + 0.1 * rng.normal()).collect();
        let a = decode(&y, &cb, &DecoderParams::fixed(10), DecoderMode::Fixed, &cfg, 10).unwrap();
        let b = decode(&y, &cb, &gate_closed_learned(10), DecoderMode::Learned, &cfg, 10).unwrap();
        assert_eq!(a.x_real, b.x_real);
        assert_eq!(a.ka_hat.to_bits(), b.ka_hat.to_bits());
    }
}

#[test]
fn noiseless_single_codeword_is_recovered() {
    let cb = gaussian_codebook(32, 24, 7);
    let cfg = DecoderConfig::new(3.0);
    for (mode, params) in [
        (DecoderMode::Fixed, DecoderParams::fixed(10)),
        (DecoderMode::Learned, gate_closed_learned(10)),
    ] {
        for j in 0..32 {
            let y = cb.transmit(&encode_slot(&[j], 32).unwrap()).unwrap();
            let d = decode(&y, &cb, &params, mode, &cfg, 10).unwrap();
            let arg = (0..32).max_by(|&a, &b| d.x_real[a].total_cmp(&d.x_real[b])).unwrap();
            assert_eq!(arg, j, "{mode} codeword {j}");
        }
    }
}

#[test]
fn decoding_is_deterministic() {
    let cb = gaussian_codebook(32, 24, 8);
    let params = DecoderParams::init(4, &mut RngStream::new(9, "params")).unwrap();
    let y: Vec<f64> = RngStream::new(10, "y").gauss_vec(24);
    let cfg = DecoderConfig::new(3.0);
    let a = decode(&y, &cb, &params, DecoderMode::Learned, &cfg, 4).unwrap();
    let b = decode(&y, &cb, &params, DecoderMode::Learned, &cfg, 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn shape_mismatch_is_rejected() {
    let cb = gaussian_codebook(16, 8, 1);
    let cfg = DecoderConfig::new(2.0);
    assert!(decode(&[0.0; 7], &cb, &DecoderParams::fixed(2), DecoderMode::Fixed, &cfg, 2).is_err());
    assert!(decode(&[0.0; 8], &cb, &DecoderParams::fixed(2), DecoderMode::Fixed, &cfg, 3).is_err());
}

//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! fails on any criterion not listed in `KNOWN_RED`.

mod common;

use std::time::Instant;

use airsum::aggregate::{aggregate_fragment, majority_fragment, mean_fragment, trim_mass, trimmed_weights, AggregationRule};
use airsum::decoder::{posterior_moments, project_counts, DecoderMode};
use airsum::feelsim::{self, CommStack, FeelConfig, Uplink};
use airsum::numkernel::RngStream;
use airsum::trainer::{collect_dataset, evaluate_slots, split_samples, train, Model, SlotResult, Splits, TrainConfig, TrainOutcome};
use airsum::uracode::{encode_slot, CodebookMode};
use airsum::vq::{ErrorFeedbackState, Ordering, QuantCodebook};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::ln_gamma;

/// Criteria that fail at desk scale for documented reasons.
const KNOWN_RED: &[usize] = &[7];

const SNRS: [f64; 4] = [0.0, 5.0, 10.0, 20.0];
const SEEDS: u64 = 5;

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
    secs: f64,
}

fn check(id: usize, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let t = Instant::now();
    let (pass, detail) = f();
    let v = Verdict {
        id,
        pass,
        detail,
        secs: t.elapsed().as_secs_f64(),
    };
    println!(
        "criterion {} {} ({:.1} s): {}",
        v.id,
        if v.pass { "PASS" } else { "FAIL" },
        v.secs,
        v.detail
    );
    v
}

/// Enumeration with log-gamma weights and compensated sums.
fn brute_posterior(r: f64, v: f64, alpha: f64, lambda: f64, tau: f64, x_max: usize) -> [f64; 3] {
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
    let z = neumaier(un.iter().copied());
    let w: Vec<f64> = un.iter().map(|u| u / z).collect();
    let mean = neumaier(w.iter().enumerate().map(|(x, p)| p * x as f64));
    let var = neumaier(w.iter().enumerate().map(|(x, p)| p * (x as f64 - mean).powi(2)));
    [mean, var, neumaier(w.iter().skip(1).copied())]
}

fn neumaier(it: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in it {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    s + c
}

fn posterior_oracle() -> (bool, String) {
    let mut rng = RngStream::new(101, "acceptance/posterior");
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let r = rng.uniform_range(-2.0, 12.0);
        let v = 10f64.powf(rng.uniform_range(-2.0, 1.0));
        let alpha = rng.uniform_range(0.01, 0.99);
        let lambda = 10f64.powf(rng.uniform_range(-2.0, 1.0));
        let tau = rng.uniform_range(0.3, 1.5);
        let m = posterior_moments(r, v, alpha, lambda, tau, 40);
        let want = brute_posterior(r, v, alpha, lambda, tau, 40);
        for (a, b) in [m.mean, m.var, m.p_active].iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    (worst < 1e-10, format!("worst absolute error {worst:.2e} over 10^4 inputs"))
}

fn exhaustive_cost(x: &[f64], k: u32) -> f64 {
    fn rec(x: &[f64], left: u32, acc: f64) -> f64 {
        if x.len() == 1 {
            return acc + (left as f64 - x[0]).powi(2);
        }
        (0..=left)
            .map(|c| rec(&x[1..], left - c, acc + (c as f64 - x[0]).powi(2)))
            .fold(f64::INFINITY, f64::min)
    }
    rec(x, k, 0.0)
}

fn projection_oracle() -> (bool, String) {
    let mut rng = RngStream::new(102, "acceptance/projection");
    let mut misses = 0;
    for _ in 0..1000 {
        let n = rng.int_inclusive(1, 8);
        let k = rng.int_inclusive(0, 4) as u32;
        let x: Vec<f64> = (0..n).map(|_| rng.uniform_range(-0.5, 2.5)).collect();
        let got = project_counts(&x, k as f64);
        let cost: f64 = got.counts.iter().zip(&x).map(|(&c, &v)| (c as f64 - v).powi(2)).sum();
        if got.ka() != k || (cost - exhaustive_cost(&x, k)).abs() > 1e-12 {
            misses += 1;
        }
    }
    (misses == 0, format!("{misses} of 1000 instances off the optimum"))
}

fn gradients() -> (bool, String) {
    let r = common::end_to_end_gradient_check(3);
    (
        r.worst() < 1e-4,
        format!(
            "relative error scalars {:.1e}, cnn {:.1e}, D {:.1e}, W {:.1e}",
            r.scalars, r.cnn, r.d, r.w
        ),
    )
}

fn desk_config(ordering: Ordering) -> TrainConfig {
    TrainConfig {
        train_samples: 6000,
        val_samples: 1000,
        test_samples: 1000,
        max_epochs: 8,
        lr: 1e-3,
        ordering,
        ..TrainConfig::default()
    }
}

struct Trained {
    cfg: TrainConfig,
    splits: Splits,
    outcome: TrainOutcome,
}

impl Trained {
    fn stack(&self) -> CommStack {
        self.outcome.checkpoint.model().comm_stack(&self.cfg)
    }
}

fn train_desk(ordering: Ordering) -> Trained {
    let records = collect_dataset(&FeelConfig::default()).unwrap();
    let cfg = desk_config(ordering);
    let splits = split_samples(&records, &cfg).unwrap();
    let outcome = train(&splits, &cfg, None).unwrap();
    assert!(outcome.aborted.is_none());
    Trained { cfg, splits, outcome }
}

fn fixed_stack() -> CommStack {
    let cfg = TrainConfig {
        codebook_mode: CodebookMode::FixedGaussian,
        decoder_mode: DecoderMode::Fixed,
        ..desk_config(Ordering::Popularity)
    };
    Model::init(&cfg).unwrap().comm_stack(&cfg)
}

fn mean_accuracy(results: &[SlotResult]) -> f64 {
    results.iter().map(|r| r.accuracy).sum::<f64>() / results.len() as f64
}

fn slot_accuracy(splits: &Splits, stack: &CommStack, mode: DecoderMode, snr: f64) -> f64 {
    (0..3)
        .map(|seed| mean_accuracy(&evaluate_slots(&splits.test, stack, mode, snr, seed).unwrap()))
        .sum::<f64>()
        / 3.0
}

fn learned_vs_fixed(ordered: &Trained, unordered: &Trained, fixed: &CommStack) -> (bool, String) {
    let stack = ordered.stack();
    let mut pass = true;
    let mut parts = Vec::new();
    for snr in SNRS {
        let l = slot_accuracy(&ordered.splits, &stack, DecoderMode::Learned, snr);
        let f = slot_accuracy(&ordered.splits, fixed, DecoderMode::Fixed, snr);
        pass &= l > f;
        parts.push(format!("{snr} dB learned {l:.3} fixed {f:.3}"));
    }
    let o = slot_accuracy(&ordered.splits, &stack, DecoderMode::Learned, 5.0);
    let u = slot_accuracy(&unordered.splits, &unordered.stack(), DecoderMode::Learned, 5.0);
    let f = slot_accuracy(&ordered.splits, fixed, DecoderMode::Fixed, 5.0);
    pass &= o > u && u > f;
    parts.push(format!("5 dB ordered {o:.3} > unordered {u:.3} > fixed {f:.3}"));
    (pass, parts.join("; "))
}

fn ka_mae(stack: &CommStack, mode: DecoderMode, snr: f64) -> f64 {
    let cfg = FeelConfig {
        rounds: 200,
        uplink: Uplink::DigitalOta { mode, snr_db: snr },
        ..FeelConfig::default()
    };
    let out = feelsim::run(&cfg, Some(stack)).unwrap();
    out.metrics.iter().map(|m| (m.ka_true as f64 - m.ka_hat).abs()).sum::<f64>() / out.metrics.len() as f64
}

fn ka_estimation(learned: &CommStack, fixed: &CommStack) -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for snr in SNRS {
        let l = ka_mae(learned, DecoderMode::Learned, snr);
        let f = ka_mae(fixed, DecoderMode::Fixed, snr);
        pass &= l <= f && (snr < 10.0 || l < 0.5);
        parts.push(format!("{snr} dB MAE learned {l:.3} fixed {f:.3}"));
    }
    (pass, parts.join("; "))
}

fn final_accuracies(base: &FeelConfig, stack: Option<&CommStack>) -> Vec<f64> {
    (0..SEEDS)
        .map(|seed| {
            let cfg = FeelConfig { seed, ..base.clone() };
            feelsim::run(&cfg, stack).unwrap().final_accuracy()
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn feel_sanity(learned: &CommStack) -> (bool, String) {
    let pa = mean(&final_accuracies(&FeelConfig::default(), None));
    let ota = |snr| {
        let cfg = FeelConfig {
            uplink: Uplink::DigitalOta {
                mode: DecoderMode::Learned,
                snr_db: snr,
            },
            ..FeelConfig::default()
        };
        mean(&final_accuracies(&cfg, Some(learned)))
    };
    let (high, low) = (ota(20.0), ota(0.0));
    (
        pa - high <= 0.03 && pa - low <= 0.10,
        format!("PA {pa:.3}, learned 20 dB {high:.3}, learned 0 dB {low:.3} (means over {SEEDS} seeds)"),
    )
}

/// One-sided paired t-test p-value for `mean(a − b) > 0`.
fn paired_p_value(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    let var = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
    if var == 0.0 {
        return if m > 0.0 { 0.0 } else { 1.0 };
    }
    let t = m / (var / d.len() as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (d.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(t)
}

fn corruption_robustness(learned: &CommStack) -> (bool, String) {
    let run_rule = |rule| {
        let cfg = FeelConfig {
            ka_range: [10, 10],
            corruption_fraction: 0.2,
            error_feedback: false,
            rule,
            uplink: Uplink::DigitalOta {
                mode: DecoderMode::Learned,
                snr_db: 10.0,
            },
            ..FeelConfig::default()
        };
        final_accuracies(&cfg, Some(learned))
    };
    let base = run_rule(AggregationRule::Mean);
    let mut pass = true;
    let mut parts = vec![format!("mean {:.3}", mean(&base))];
    for rule in [AggregationRule::TrimmedMean { tau: 0.8 }, AggregationRule::Majority] {
        let acc = run_rule(rule);
        let p = paired_p_value(&acc, &base);
        pass &= p < 0.05;
        parts.push(format!("{rule} {:.3} (p = {p:.3})", mean(&acc)));
    }
    (pass, parts.join(", "))
}

fn random_codebook(rng: &mut RngStream, n: usize, d: usize) -> QuantCodebook {
    QuantCodebook::from_centroids((0..n).map(|_| rng.gauss_vec(d)).collect()).unwrap()
}

fn identities(trained: &[&Trained]) -> (bool, String) {
    let mut rng = RngStream::new(108, "acceptance/identities");
    let cb = random_codebook(&mut rng, 8, 3);
    let rules = [
        AggregationRule::Mean,
        AggregationRule::TrimmedMean { tau: 0.8 },
        AggregationRule::TrimmedMean { tau: 0.5 },
        AggregationRule::Majority,
    ];
    let (mut trim, mut tie, mut perm, mut mass) = (0.0f64, 0.0f64, true, 0.0f64);
    for _ in 0..1000 {
        let mut devices: Vec<usize> = (0..rng.int_inclusive(1, 12)).map(|_| rng.below(8)).collect();
        let k = devices.len() as f64;
        let x = encode_slot(&devices, 8).unwrap();
        let t = aggregate_fragment(&x, &cb, AggregationRule::TrimmedMean { tau: 1.0 }, k).unwrap();
        let m = mean_fragment(&x, &cb, k).unwrap();
        trim = trim.max(t.0.iter().zip(&m.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        let top = *x.counts.iter().max().unwrap();
        let tied: Vec<usize> = (0..8).filter(|&j| x.counts[j] == top).collect();
        let maj = majority_fragment(&x, &cb).unwrap();
        for i in 0..3 {
            let want = tied.iter().map(|&j| cb.centroid(j)[i]).sum::<f64>() / tied.len() as f64;
            tie = tie.max((maj.0[i] - want).abs());
        }

        let w = trimmed_weights(&x.counts, trim_mass(k, 0.8));
        mass = mass.max((w.iter().sum::<f64>() - trim_mass(k, 0.8).min(k)).abs());

        rng.shuffle(&mut devices);
        let shuffled = encode_slot(&devices, 8).unwrap();
        for rule in rules {
            perm &= aggregate_fragment(&x, &cb, rule, k).unwrap() == aggregate_fragment(&shuffled, &cb, rule, k).unwrap();
        }
    }

    let mut on = ErrorFeedbackState::new(6, true);
    let mut off = ErrorFeedbackState::new(6, false);
    let mut ef = true;
    for _ in 0..50 {
        let u = rng.gauss_vec(6);
        let (a, b) = (on.apply(&u).unwrap(), off.apply(&u).unwrap());
        ef &= a == b;
        on.record_residual(&a, &a).unwrap();
        off.record_residual(&b, &b).unwrap();
    }

    let norms = trained
        .iter()
        .flat_map(|t| t.outcome.log.iter().map(|e| e.norm_deviation))
        .fold(0.0, f64::max);
    let epochs: usize = trained.iter().map(|t| t.outcome.log.len()).sum();
    let pass = trim < 1e-12 && tie < 1e-12 && mass < 1e-9 && perm && ef && norms < 1e-9;
    (
        pass,
        format!(
            "trim(1)-mean {trim:.1e}, tie {tie:.1e}, trimmed mass {mass:.1e}, permutation {perm}, \
             perfect EF {ef}, row-norm deviation {norms:.1e} over {epochs} epoch logs"
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = vec![
        check(1, posterior_oracle),
        check(2, projection_oracle),
        check(3, gradients),
    ];

    let t = Instant::now();
    let ordered = train_desk(Ordering::Popularity);
    let unordered = train_desk(Ordering::None);
    println!("desk training: {:.1} s", t.elapsed().as_secs_f64());
    let fixed = fixed_stack();
    let learned = ordered.stack();

    verdicts.push(check(4, || learned_vs_fixed(&ordered, &unordered, &fixed)));
    verdicts.push(check(5, || ka_estimation(&learned, &fixed)));
    verdicts.push(check(6, || feel_sanity(&learned)));
    verdicts.push(check(7, || corruption_robustness(&learned)));
    verdicts.push(check(8, || identities(&[&ordered, &unordered])));

    let unexpected: Vec<usize> = verdicts
        .iter()
        .filter(|v| !v.pass && !KNOWN_RED.contains(&v.id))
        .map(|v| v.id)
        .collect();
    assert!(unexpected.is_empty(), "failing criteria: {unexpected:?}");
}

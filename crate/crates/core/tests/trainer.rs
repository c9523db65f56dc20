mod common;

use std::time::Instant;

use airsum::decoder::decode;
use airsum::feelsim::FeelConfig;
use airsum::numkernel::RngStream;
use airsum::trainer::{
    build_samples, collect_dataset, compose_loss, read_checkpoint, read_dataset, split_samples, train,
    write_checkpoint, write_dataset, Checkpoint, LossWeights, Model, TrainConfig, CHECKPOINT_VERSION,
};
use airsum::uracode::{CodebookMode, UraCodebook};
use airsum::vq::{fragment_count, Ordering};
use airsum::Error;
use common::{end_to_end_gradient_check, random_slots, tiny_config};

fn short_feel() -> FeelConfig {
    FeelConfig {
        rounds: 10,
        ..FeelConfig::default()
    }
}

#[test]
fn collection_counts_and_determinism() {
    let cfg = short_feel();
    let a = collect_dataset(&cfg).unwrap();
    assert_eq!(a.len(), 10);
    let w = cfg.task.param_count();
    for r in &a {
        assert!((2..=4).contains(&r.ka));
        assert_eq!(r.device_updates.len(), r.ka);
        assert!(r.device_updates.iter().all(|u| u.len() == w));
    }
    assert_eq!(a, collect_dataset(&cfg).unwrap());
    let samples = build_samples(&a[..1], 32, 8, Ordering::Popularity, false, 0).unwrap();
    assert_eq!(samples.len(), fragment_count(w, 8));
    assert_eq!(samples.len(), w.div_ceil(8));
}

#[test]
fn loss_terms() {
    let mut rng = RngStream::new(1, "cb");
    let cb = UraCodebook::init(4, 3, CodebookMode::Learned, &mut rng).unwrap();
    let x = [1.0, 0.0, 2.0, 0.0];
    let zero_l1 = LossWeights {
        l1: 0.0,
        ..LossWeights::default()
    };
    assert_eq!(compose_loss(&x, &x, 3.0, 3.0, &cb, None, &zero_l1), 0.0);
    let only_ka = LossWeights {
        l1: 0.0,
        orth: 0.0,
        ka: 0.3,
        quant: None,
    };
    assert!((compose_loss(&x, &x, 5.0, 3.0, &cb, None, &only_ka) - 1.2).abs() < 1e-15);

    let mut cb2 = cb.clone();
    cb2.w = rng.gauss(&[3, 3]);
    let x_hat: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
    let w = LossWeights {
        l1: 0.02,
        orth: 0.003,
        ka: 0.05,
        quant: Some(0.7),
    };
    let mse: f64 = x_hat.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
    let l1 = x_hat.iter().map(|v| v.abs()).sum::<f64>() / (3.0 + 1e-8);
    let mut orth = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| cb2.w.at(k, i) * cb2.w.at(k, j)).sum();
            orth += (dot - if i == j { 1.0 } else { 0.0 }).powi(2);
        }
    }
    let want = mse + 0.02 * l1 + 0.003 * orth + 0.05 * 0.25 + 0.7 * 0.4;
    let got = compose_loss(&x_hat, &x, 3.5, 3.0, &cb2, Some(0.4), &w);
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let t = Instant::now();
    let report = end_to_end_gradient_check(3);
    println!("gradient check {report:?} in {:?}", t.elapsed());
    assert!(report.worst() < 1e-4, "{report:?}");
}

fn desk_train_config() -> TrainConfig {
    TrainConfig {
        train_samples: 600,
        val_samples: 200,
        test_samples: 100,
        max_epochs: 2,
        lr: 1e-3,
        layers: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_keep_the_initialisation() {
    let records = collect_dataset(&short_feel()).unwrap();
    let cfg = TrainConfig {
        max_epochs: 0,
        ..desk_train_config()
    };
    let splits = split_samples(&records, &cfg).unwrap();
    let out = train(&splits, &cfg, None).unwrap();
    assert_eq!(out.checkpoint.model(), Model::init(&cfg).unwrap());
    assert_eq!(out.checkpoint.epoch, 0);
}

#[test]
fn training_improves_validation_and_resumes() {
    let records = collect_dataset(&short_feel()).unwrap();
    let cfg = desk_train_config();
    let splits = split_samples(&records, &cfg).unwrap();
    let out = train(&splits, &cfg, None).unwrap();
    assert!(out.aborted.is_none());
    let epoch0 = out.log[0].val_loss;
    assert!(out.checkpoint.val_loss <= epoch0);
    assert!(out.checkpoint.codebook.max_norm_deviation() < 1e-9);
    let resumed = train(&splits, &TrainConfig { max_epochs: 1, ..cfg.clone() }, Some(out.checkpoint.clone())).unwrap();
    let last = out.log.last().unwrap().epoch;
    assert!(resumed.log.iter().skip(1).all(|e| e.epoch > last.min(out.checkpoint.epoch)));
}

#[test]
fn quant_weight_zero_matches_disabled() {
    let cfg = tiny_config(4);
    let model = Model::init(&cfg).unwrap();
    let (mut samples, ys) = random_slots(&model, 3, 5.0, 1);
    for s in &mut samples {
        s.quant_residual = 0.9;
    }
    let with = TrainConfig {
        loss: LossWeights {
            quant: Some(0.0),
            ..cfg.loss
        },
        ..cfg.clone()
    };
    let a = airsum::trainer::block_loss(&model, &cfg, &samples, &ys).unwrap();
    let b = airsum::trainer::block_loss(&model, &with, &samples, &ys).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let cfg = tiny_config(5);
    let model = Model::init(&cfg).unwrap();
    let ck = Checkpoint::new(&model, &cfg, 3, 0.125);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &ck).unwrap();
    let back = read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(back, ck);
    let (_, ys) = random_slots(&model, 1, 10.0, 2);
    let a = decode(&ys[0], &ck.codebook, &ck.params, cfg.decoder_mode, &cfg.decoder, cfg.layers).unwrap();
    let b = decode(&ys[0], &back.codebook, &back.params, cfg.decoder_mode, &cfg.decoder, cfg.layers).unwrap();
    assert_eq!(a, b);

    for cut in [0, 5, 12, 40, buf.len() - 1] {
        assert!(matches!(read_checkpoint(&mut &buf[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
    }
    let mut flipped = buf.clone();
    let mid = buf.len() - 20;
    flipped[mid] ^= 0xff;
    assert!(matches!(read_checkpoint(&mut flipped.as_slice()), Err(Error::Corrupt(_))));
    let mut old = buf.clone();
    old[8..12].copy_from_slice(&(CHECKPOINT_VERSION - 1).to_le_bytes());
    assert!(matches!(
        read_checkpoint(&mut old.as_slice()),
        Err(Error::Version { found, .. }) if found == CHECKPOINT_VERSION - 1
    ));
}

#[test]
fn dataset_round_trip() {
    let cfg = FeelConfig {
        rounds: 3,
        ..FeelConfig::default()
    };
    let records = collect_dataset(&cfg).unwrap();
    let mut buf = Vec::new();
    write_dataset(&mut buf, &records, &cfg).unwrap();
    let (back, back_cfg) = read_dataset(&mut buf.as_slice()).unwrap();
    assert_eq!(back, records);
    assert_eq!(back_cfg, cfg);
    assert!(matches!(read_dataset(&mut &buf[..buf.len() - 3]), Err(Error::Corrupt(_))));
}

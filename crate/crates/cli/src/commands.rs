use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use airsum::decoder::DecoderMode;
use airsum::feelsim::{self, metrics_csv_rows, CommStack, FeelConfig, Uplink, METRICS_HEADER};
use airsum::trainer::{
    self, collect_dataset, evaluate_slots, load_checkpoint, load_dataset, save_checkpoint, save_dataset, split_samples,
    train_log_csv, Model, TrainConfig,
};
use airsum::uracode::CodebookMode;

use crate::config::ExperimentConfig;
use crate::CliError;

pub const BENCH_HEADER: &str = "snr_db,mode,seed,slots,accuracy,ka_mae,ms_per_slot";

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{} not found", path.display())))
    }
}

pub fn collect(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.echo("collect")?;
    let records = collect_dataset(&cfg.feel)?;
    let path = cfg.output.path(&cfg.output.dataset);
    save_dataset(&path, &records, &cfg.feel)?;
    println!("{} rounds -> {}", records.len(), path.display());
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, dataset: Option<PathBuf>, resume: Option<&Path>) -> Result<(), CliError> {
    cfg.echo("train")?;
    let path = dataset.unwrap_or_else(|| cfg.output.path(&cfg.output.dataset));
    require(&path)?;
    let (records, _) = load_dataset(&path)?;
    let splits = split_samples(&records, &cfg.trainer)?;
    let resume = resume.map(load_checkpoint).transpose()?;
    let outcome = trainer::train(&splits, &cfg.trainer, resume)?;
    let ck_path = cfg.output.path(&cfg.output.checkpoint);
    save_checkpoint(&ck_path, &outcome.checkpoint)?;
    write(&cfg.output.path(&cfg.output.train_log), &train_log_csv(&outcome.log))?;
    println!(
        "best epoch {} val_loss {:.6} -> {}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.val_loss,
        ck_path.display()
    );
    match outcome.aborted {
        Some(msg) => Err(CliError::Numeric(msg)),
        None => Ok(()),
    }
}

/// Learned stacks come from the checkpoint; fixed stacks from the config.
fn comm_stack(cfg: &ExperimentConfig, checkpoint: Option<PathBuf>) -> Result<CommStack, CliError> {
    match cfg.decoder.mode {
        DecoderMode::Learned => {
            let path = checkpoint.unwrap_or_else(|| cfg.output.path(&cfg.output.checkpoint));
            require(&path)?;
            let ck = load_checkpoint(&path)?;
            Ok(ck.model().comm_stack(&ck.config))
        }
        DecoderMode::Fixed => {
            let fixed = TrainConfig {
                codebook_mode: CodebookMode::FixedGaussian,
                decoder_mode: DecoderMode::Fixed,
                ..cfg.trainer.clone()
            };
            Ok(Model::init(&fixed)?.comm_stack(&fixed))
        }
    }
}

pub fn eval(cfg: &ExperimentConfig, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    cfg.echo("eval")?;
    let stack = comm_stack(cfg, checkpoint)?;
    let mut csv = format!("{METRICS_HEADER}\n");
    let mut halted = Vec::new();
    for &snr_db in &cfg.channel.snr_db {
        for s in 0..cfg.decoder.seeds {
            let run_cfg = FeelConfig {
                seed: cfg.seed + s,
                uplink: Uplink::DigitalOta {
                    mode: cfg.decoder.mode,
                    snr_db,
                },
                ..cfg.feel.clone()
            };
            let out = feelsim::run(&run_cfg, Some(&stack))?;
            csv.push_str(&metrics_csv_rows(&out.metrics, &run_cfg));
            log::info!("snr {snr_db} dB seed {}: final accuracy {:.4}", run_cfg.seed, out.final_accuracy());
            if let Some(msg) = out.halted {
                halted.push(format!("snr {snr_db} seed {}: {msg}", run_cfg.seed));
            }
        }
    }
    let path = cfg.output.path(&cfg.output.metrics);
    write(&path, &csv)?;
    println!("{} SNR groups -> {}", cfg.channel.snr_db.len(), path.display());
    if halted.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(halted.join("; ")))
    }
}

pub fn bench(cfg: &ExperimentConfig, checkpoint: Option<PathBuf>, dataset: Option<PathBuf>) -> Result<(), CliError> {
    cfg.echo("bench")?;
    let stack = comm_stack(cfg, checkpoint)?;
    let path = dataset.unwrap_or_else(|| cfg.output.path(&cfg.output.dataset));
    require(&path)?;
    let (records, _) = load_dataset(&path)?;
    let splits = split_samples(&records, &cfg.trainer)?;
    let mut csv = format!("{BENCH_HEADER}\n");
    for &snr_db in &cfg.channel.snr_db {
        for s in 0..cfg.decoder.seeds {
            let seed = cfg.seed + s;
            let t = Instant::now();
            let res = evaluate_slots(&splits.test, &stack, cfg.decoder.mode, snr_db, seed)?;
            let ms = t.elapsed().as_secs_f64() * 1e3 / res.len().max(1) as f64;
            let n = res.len().max(1) as f64;
            let acc = res.iter().map(|r| r.accuracy).sum::<f64>() / n;
            let mae = res.iter().map(|r| (r.ka_hat - r.ka as f64).abs()).sum::<f64>() / n;
            let _ = writeln!(csv, "{snr_db},{},{seed},{},{acc},{mae},{ms}", cfg.decoder.mode, res.len());
        }
    }
    let out = cfg.output.path(&cfg.output.bench);
    write(&out, &csv)?;
    println!("{} SNR points -> {}", cfg.channel.snr_db.len(), out.display());
    Ok(())
}

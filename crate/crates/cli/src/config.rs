use std::fs;
use std::path::{Path, PathBuf};

use airsum::aggregate::AggregationRule;
use airsum::channel::ChannelConfig;
use airsum::decoder::DecoderMode;
use airsum::feelsim::FeelConfig;
use airsum::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    /// SNR sweep used by `eval` and `bench`.
    pub snr_db: Vec<f64>,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            snr_db: vec![0.0, 5.0, 10.0, 20.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSection {
    pub mode: DecoderMode,
    /// Independent seeds per SNR in `eval` and `bench`.
    pub seeds: u64,
}

impl Default for DecoderSection {
    fn default() -> Self {
        Self {
            mode: DecoderMode::Learned,
            seeds: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregateSection {
    pub rule: AggregationRule,
}

impl Default for AggregateSection {
    fn default() -> Self {
        Self {
            rule: AggregationRule::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Directory receiving every artifact; must already exist.
    pub dir: PathBuf,
    pub dataset: String,
    pub checkpoint: String,
    pub train_log: String,
    pub metrics: String,
    pub bench: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            dataset: "dataset.bin".into(),
            checkpoint: "decoder.ckpt".into(),
            train_log: "train_log.csv".into(),
            metrics: "metrics.csv".into(),
            bench: "bench.csv".into(),
        }
    }
}

impl OutputSection {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// Everything one invocation needs. `seed` overrides the section seeds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub feel: FeelConfig,
    pub channel: ChannelSection,
    pub decoder: DecoderSection,
    pub trainer: TrainConfig,
    pub aggregate: AggregateSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the top-level seed and checks cross-section consistency.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.feel.seed = self.seed;
        self.trainer.seed = self.seed;
        self.feel.rule = self.aggregate.rule;
        self.feel.validate().map_err(config_err)?;
        self.trainer.validate().map_err(config_err)?;
        for &snr in &self.channel.snr_db {
            ChannelConfig::new(snr, 1).map_err(config_err)?;
        }
        if self.decoder.seeds == 0 {
            return Err(CliError::Config("decoder.seeds must be at least 1".into()));
        }
        if self.feel.codebook_size != self.trainer.codebook_size || self.feel.fragment_dim != self.trainer.fragment_dim {
            return Err(CliError::Config(
                "feel and trainer disagree on codebook_size or fragment_dim".into(),
            ));
        }
        if !self.output.dir.is_dir() {
            return Err(CliError::Io(format!(
                "output directory {} does not exist",
                self.output.dir.display()
            )));
        }
        Ok(self)
    }

    /// Writes the fully materialised config next to the outputs.
    pub fn echo(&self, command: &str) -> Result<PathBuf, CliError> {
        let path = self.output.path(&format!("{command}.config.json"));
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

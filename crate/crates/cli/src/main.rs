mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use airsum::aggregate::AggregationRule;
use airsum::decoder::DecoderMode;
use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "airsum", version, about = "Learned digital over-the-air aggregation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (falls back to AIRSUM_THREADS, then all cores).
    #[arg(long, global = true, env = "AIRSUM_THREADS")]
    threads: Option<usize>,
    /// Repeat for more detail.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run FEEL rounds and record raw device updates for decoder training.
    Collect {
        #[command(flatten)]
        common: Common,
    },
    /// Train the decoder and URA codebook on a collected dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file (default: output dir / output.dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sweep SNRs with FEEL over the digital uplink.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sweep: Sweep,
    },
    /// Decoder-only slot accuracy and timing over the SNR sweep.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sweep: Sweep,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Sweep {
    /// Trained checkpoint (default: output dir / output.checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated SNR list in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<f64>>,
    /// mean, majority or trimmed_mean:<tau>.
    #[arg(long)]
    rule: Option<AggregationRule>,
    /// learned or fixed.
    #[arg(long)]
    mode: Option<DecoderMode>,
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Numeric(_) => 3,
            Self::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Numeric(m) => write!(f, "numeric abort: {m}"),
            Self::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl From<airsum::Error> for CliError {
    fn from(e: airsum::Error) -> Self {
        use airsum::Error as E;
        match e {
            E::Config(_) | E::InvalidArgument(_) | E::Shape(_) => Self::Config(e.to_string()),
            E::NonFinite(_) | E::Divergence(_) | E::ForeignNode => Self::Numeric(e.to_string()),
            E::Io(_) | E::Corrupt(_) | E::Version { .. } => Self::Io(e.to_string()),
        }
    }
}

fn setup(common: &Common) -> Result<ExperimentConfig, CliError> {
    let level = match common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn apply_sweep(cfg: &mut ExperimentConfig, sweep: &Sweep) {
    if let Some(snr) = &sweep.snr {
        cfg.channel.snr_db = snr.clone();
    }
    if let Some(rule) = sweep.rule {
        cfg.aggregate.rule = rule;
    }
    if let Some(mode) = sweep.mode {
        cfg.decoder.mode = mode;
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Collect { common } => {
            let cfg = setup(&common)?.resolve()?;
            commands::collect(&cfg)
        }
        Command::Train { common, dataset, resume } => {
            let cfg = setup(&common)?.resolve()?;
            commands::train(&cfg, dataset, resume.as_deref())
        }
        Command::Eval { common, sweep } => {
            let mut cfg = setup(&common)?;
            apply_sweep(&mut cfg, &sweep);
            commands::eval(&cfg.resolve()?, sweep.checkpoint)
        }
        Command::Bench { common, sweep, dataset } => {
            let mut cfg = setup(&common)?;
            apply_sweep(&mut cfg, &sweep);
            commands::bench(&cfg.resolve()?, sweep.checkpoint, dataset)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("airsum: {e}");
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trimmed_rule_flag_parses() {
        let cli = Cli::try_parse_from(["airsum", "eval", "--rule", "trimmed_mean:0.8", "--snr", "0,-5"]).unwrap();
        let Command::Eval { sweep, .. } = cli.command else {
            panic!("expected eval");
        };
        assert_eq!(sweep.rule, Some(AggregationRule::TrimmedMean { tau: 0.8 }));
        assert_eq!(sweep.snr, Some(vec![0.0, -5.0]));
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes: Vec<u8> = [
            CliError::Config(String::new()),
            CliError::Numeric(String::new()),
            CliError::Io(String::new()),
        ]
        .iter()
        .map(CliError::code)
        .collect();
        assert_eq!(codes, [2, 3, 4]);
        assert_eq!(CliError::from(airsum::Error::NonFinite("x".into())).code(), 3);
    }
}

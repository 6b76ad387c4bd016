use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ttalab::harness::{
    pretrain, run_in_memory, source_model, sweep, write_outputs, ExperimentConfig, SweepAxis, OUT_DIR_ENV,
};
use ttalab::nn::{load_checkpoint, save_checkpoint};
use ttalab::Error;

#[derive(Parser)]
#[command(name = "ttalab", version, about = "Test-time adaptation experiments on synthetic shifted streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds starting at the base seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model on clean data and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt over one test stream, writing records.csv and summary.json.
    Run {
        #[command(flatten)]
        common: Common,
        /// Source checkpoint; pretrains in memory when omitted and the config names none.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// One run per value per seed along a single axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// batch_size, imbalance_ratio, severity or algorithm
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.seeds == 0 {
            return Err(Error::Config("--seeds must be at least 1".into()));
        }
        Ok(cfg)
    }

    fn seed_list(&self, cfg: &ExperimentConfig) -> Vec<u64> {
        (cfg.seed..cfg.seed + self.seeds).collect()
    }
}

fn out_dir(cli: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .or(cli)
        .unwrap_or_else(|| cfg.output.dir.clone())
}

fn with_checkpoint(mut cfg: ExperimentConfig, ckpt: Option<PathBuf>) -> Result<ExperimentConfig, Error> {
    if ckpt.is_some() {
        cfg.output.checkpoint = ckpt;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seed_dir(base: &Path, seed: u64, many: bool) -> PathBuf {
    if many {
        base.join(format!("seed_{seed}"))
    } else {
        base.to_path_buf()
    }
}

/// Exit code for an error: 1 for configuration problems, 3 otherwise.
fn failure(e: &Error) -> ExitCode {
    log::error!("{e}");
    eprintln!("error: {e}");
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Io(_) => ExitCode::from(1),
        _ => ExitCode::from(3),
    }
}

fn execute(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Pretrain { common, out } => {
            let cfg = common.load()?;
            cfg.validate()?;
            let seeds = common.seed_list(&cfg);
            for &seed in &seeds {
                let mut c = cfg.clone();
                c.seed = seed;
                let (model, report) = pretrain(&c)?;
                let path = if seeds.len() > 1 {
                    out.with_file_name(format!(
                        "{}.seed{seed}.{}",
                        out.file_stem().and_then(|s| s.to_str()).unwrap_or("model"),
                        out.extension().and_then(|s| s.to_str()).unwrap_or("ckpt")
                    ))
                } else {
                    out.clone()
                };
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(&path, save_checkpoint(&model))?;
                println!(
                    "{}",
                    serde_json::to_string(&report).map_err(|e| Error::Config(e.to_string()))?
                );
                log::info!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { common, ckpt, out_dir: dir } => {
            let cfg = with_checkpoint(common.load()?, ckpt)?;
            let base = out_dir(dir, &cfg);
            let seeds = common.seed_list(&cfg);
            let loaded = match &cfg.output.checkpoint {
                Some(path) => Some(load_checkpoint(&std::fs::read(path)?)?),
                None => None,
            };
            let mut aborted = false;
            for &seed in &seeds {
                let model = match &loaded {
                    Some(m) => m.clone(),
                    None => source_model(&cfg, seed)?,
                };
                let mut c = cfg.clone();
                c.seed = seed;
                let out = run_in_memory(model, &c, seed)?;
                let dir = seed_dir(&base, seed, seeds.len() > 1);
                write_outputs(&out, &dir)?;
                let s = &out.summary;
                println!(
                    "seed {seed}: {} accuracy {:.4} ece {:.4} recoveries {} -> {}",
                    s.status,
                    s.cumulative_accuracy,
                    s.ece,
                    s.recovery_triggers,
                    dir.display()
                );
                aborted |= s.aborted();
            }
            Ok(if aborted { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Sweep {
            common,
            axis,
            values,
            ckpt,
            out_dir: dir,
        } => {
            let cfg = with_checkpoint(common.load()?, ckpt)?;
            let axis = SweepAxis::parse(&axis)?;
            let base = out_dir(dir, &cfg);
            let csv = sweep(&cfg, axis, &values, &common.seed_list(&cfg), &base)?;
            print!("{csv}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => failure(&e),
    }
}

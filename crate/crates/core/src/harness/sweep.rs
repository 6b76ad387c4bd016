use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::{ExperimentConfig, Ratio};
use super::pretrain::pretrain;
use super::run::{fmt_float, run_in_memory, write_outputs};
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, Model};
use crate::tta::Algorithm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    BatchSize,
    ImbalanceRatio,
    Severity,
    Algorithm,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "batch_size" => Ok(Self::BatchSize),
            "imbalance_ratio" => Ok(Self::ImbalanceRatio),
            "severity" => Ok(Self::Severity),
            "algorithm" => Ok(Self::Algorithm),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (batch_size, imbalance_ratio, severity, algorithm)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::BatchSize => "batch_size",
            Self::ImbalanceRatio => "imbalance_ratio",
            Self::Severity => "severity",
            Self::Algorithm => "algorithm",
        }
    }

    /// Copy of `base` with this axis set to `value`.
    pub fn apply(&self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let bad = || Error::Config(format!("invalid {} value {value:?}", self.name()));
        match self {
            Self::BatchSize => cfg.stream.batch_size = value.parse().map_err(|_| bad())?,
            Self::ImbalanceRatio => cfg.stream.imbalance_ratio = Ratio::parse(value)?,
            Self::Severity => cfg.stream.severity = value.parse().map_err(|_| bad())?,
            Self::Algorithm => cfg.tta.algorithm = Algorithm::parse(value).ok_or_else(bad)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const SWEEP_COLUMNS: [&str; 10] = [
    "axis",
    "value",
    "seed",
    "status",
    "cumulative_accuracy",
    "ece",
    "recovery_triggers",
    "final_majority_fraction",
    "abort_step",
    "error",
];

/// Source model for `seed`: the configured checkpoint, or a fresh pretrain.
pub fn source_model(cfg: &ExperimentConfig, seed: u64) -> Result<Model> {
    match &cfg.output.checkpoint {
        Some(path) => load_checkpoint(&fs::read(path)?),
        None => {
            let mut c = cfg.clone();
            c.seed = seed;
            Ok(pretrain(&c)?.0)
        }
    }
}

/// One run per value per seed. Failures become rows with an error message;
/// the sweep carries on. Returns the consolidated CSV.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String], seeds: &[u64], out_dir: &Path) -> Result<String> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let mut models: BTreeMap<u64, std::result::Result<Model, String>> = BTreeMap::new();
    let mut csv = SWEEP_COLUMNS.join(",");
    csv.push('\n');
    for (value, cfg) in values.iter().zip(&configs) {
        for &seed in seeds {
            let model = models
                .entry(seed)
                .or_insert_with(|| source_model(base, seed).map_err(|e| e.to_string()))
                .clone();
            let result = model.map_err(Error::Config).and_then(|m| {
                let out = run_in_memory(m, cfg, seed)?;
                write_outputs(&out, &out_dir.join(format!("{}={value}", axis.name())).join(format!("seed_{seed}")))?;
                Ok(out.summary)
            });
            let row = match result {
                Ok(s) => [
                    axis.name().to_string(),
                    value.clone(),
                    seed.to_string(),
                    s.status.clone(),
                    fmt_float(s.cumulative_accuracy),
                    fmt_float(s.ece),
                    s.recovery_triggers.to_string(),
                    fmt_float(s.final_majority_fraction),
                    s.abort_step.map(|v| v.to_string()).unwrap_or_default(),
                    String::new(),
                ],
                Err(e) => {
                    log::error!("{}={value} seed {seed}: {e}", axis.name());
                    [
                        axis.name().to_string(),
                        value.clone(),
                        seed.to_string(),
                        "failed".into(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        format!("\"{}\"", e.to_string().replace('"', "'")),
                    ]
                }
            };
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(format!("sweep_{}.csv", axis.name())), &csv)?;
    Ok(csv)
}

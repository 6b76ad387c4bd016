use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::config::{ExperimentConfig, Protocol};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::objectives::{ece, DEFAULT_ECE_BINS};
use crate::stream::{
    build_label_shift_stream, build_mixed_stream, derive_seed, make_dataset, read_stream, Corruption,
    DatasetConfig, LabelShiftSchedule, Stream,
};
use crate::tta::{Adapter, BatchRecord};

pub const VERSION: &str = concat!("ttalab-v", env!("CARGO_PKG_VERSION"));

/// Fixed CSV column order.
pub const CSV_COLUMNS: [&str; 10] = [
    "step",
    "batch_size",
    "batch_accuracy",
    "mean_entropy",
    "selected_count",
    "grad_norm",
    "redundancy",
    "inequity",
    "recovery_fired",
    "cumulative_accuracy",
];

/// A named contiguous part of the stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Domain {
    pub name: String,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainAccuracy {
    pub name: String,
    pub samples: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub status: String,
    pub abort_step: Option<usize>,
    pub abort_reason: Option<String>,
    pub algorithm: String,
    pub seed: u64,
    pub samples: usize,
    pub batches: usize,
    pub cumulative_accuracy: f64,
    pub ece: f64,
    pub recovery_triggers: usize,
    /// Share of the most frequent prediction over the last 20% of samples.
    pub final_majority_fraction: f64,
    pub forward_passes: usize,
    pub backward_passes: usize,
    pub updated_batches: usize,
    pub effective_lr: f64,
    pub domain_accuracies: Vec<DomainAccuracy>,
    pub version: String,
    pub config: ExperimentConfig,
}

impl RunSummary {
    pub fn aborted(&self) -> bool {
        self.abort_step.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub records: Vec<BatchRecord>,
    pub model: Model,
    pub wall_clock_seconds: f64,
}

/// Builds the test stream described by `cfg.stream` for `seed`.
pub fn build_stream(cfg: &ExperimentConfig, seed: u64) -> Result<(Stream, Vec<Domain>)> {
    let s = &cfg.stream;
    if let Some(path) = &s.file {
        let stream = read_stream(fs::File::open(path)?)?;
        if stream.dim() != cfg.model.input_dim {
            return Err(Error::Config(format!(
                "stream file has dimension {}, model expects {}",
                stream.dim(),
                cfg.model.input_dim
            )));
        }
        let n = stream.len();
        return Ok((stream, vec![Domain { name: "file".into(), samples: n }]));
    }
    let pool_cfg = DatasetConfig {
        per_class: s.test_per_class,
        ..cfg.dataset.clone()
    };
    let pool = make_dataset(&pool_cfg, 2 + seed)?;
    let single = Corruption {
        kind: s.corruption,
        severity: s.severity,
    };
    let schedule = || LabelShiftSchedule::new(cfg.model.classes, s.imbalance_ratio.0, s.samples_per_step, seed);
    let stream = match s.protocol {
        Protocol::Iid => Stream::shuffled(&pool, Some(single), seed)?,
        Protocol::LabelShift => build_label_shift_stream(&pool, Some(single), &schedule()?, seed)?,
        Protocol::Mixed => build_mixed_stream(&pool, &s.corruptions, s.severity, seed)?,
        Protocol::Continuous => {
            let sched = schedule()?;
            let mut out: Option<Stream> = None;
            let mut domains = Vec::new();
            for (k, &kind) in s.corruptions.iter().enumerate() {
                let c = Corruption {
                    kind,
                    severity: s.severity,
                };
                let part = build_label_shift_stream(&pool, Some(c), &sched, derive_seed(seed, k as u64))?;
                domains.push(Domain {
                    name: kind.name().into(),
                    samples: part.len(),
                });
                out = Some(match out {
                    None => part,
                    Some(prev) => prev.chain(&part)?,
                });
            }
            return Ok((out.expect("non-empty corruption list"), domains));
        }
    };
    let name = match s.protocol {
        Protocol::Mixed => "mixed".to_string(),
        _ => s.corruption.name().to_string(),
    };
    let n = stream.len();
    Ok((stream, vec![Domain { name, samples: n }]))
}

/// Runs the configured adapter over the stream. A non-finite loss ends the
/// run early with an aborted summary; other errors propagate.
pub fn run_in_memory(model: Model, cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    let start = Instant::now();
    for field in cfg.ignored_fields() {
        log::info!("{field} has no effect with algorithm {}", cfg.tta.algorithm.name());
    }
    let (stream, domains) = build_stream(cfg, seed)?;
    let batch_size = cfg.stream.batch_size;
    let tta = cfg.effective_tta(batch_size);
    let effective_lr = tta.lr;
    let mut adapter = Adapter::new(model, tta)?;
    let mut records = Vec::new();
    let mut abort = None;
    for (x, labels) in stream.batches(batch_size)? {
        match adapter.step(&x, labels) {
            Ok(r) => records.push(r),
            Err(Error::NonFiniteLoss { step, stage }) => {
                log::error!("non-finite loss at step {step} ({stage}); aborting");
                abort = Some((step, format!("non-finite loss at step {step} ({stage})")));
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let seen: usize = records.iter().map(|r| r.batch_size).sum();
    let predictions: Vec<usize> = records.iter().flat_map(|r| r.predictions.iter().copied()).collect();
    let confidences: Vec<f64> = records.iter().flat_map(|r| r.confidences.iter().copied()).collect();
    let correct: Vec<bool> = predictions.iter().zip(&stream.labels).map(|(p, y)| p == y).collect();
    let hits = correct.iter().filter(|&&c| c).count();

    let mut domain_accuracies = Vec::new();
    let mut offset = 0;
    for d in &domains {
        let end = (offset + d.samples).min(seen);
        if end > offset {
            let h = correct[offset..end].iter().filter(|&&c| c).count();
            domain_accuracies.push(DomainAccuracy {
                name: d.name.clone(),
                samples: end - offset,
                accuracy: h as f64 / (end - offset) as f64,
            });
        }
        offset += d.samples;
    }

    let counters = adapter.counters();
    let summary = RunSummary {
        status: if abort.is_some() { "aborted" } else { "completed" }.into(),
        abort_step: abort.as_ref().map(|a| a.0),
        abort_reason: abort.map(|a| a.1),
        algorithm: cfg.tta.algorithm.name().into(),
        seed,
        samples: seen,
        batches: records.len(),
        cumulative_accuracy: if seen == 0 { 0.0 } else { hits as f64 / seen as f64 },
        ece: ece(&confidences, &correct, DEFAULT_ECE_BINS)?,
        recovery_triggers: adapter.recovery().trigger_count,
        final_majority_fraction: majority_fraction(&predictions[predictions.len() - predictions.len() / 5..], cfg.model.classes),
        forward_passes: counters.forward,
        backward_passes: counters.backward,
        updated_batches: counters.updated_batches,
        effective_lr,
        domain_accuracies,
        version: VERSION.into(),
        config: cfg.clone(),
    };
    Ok(RunOutput {
        summary,
        records,
        model: adapter.into_model(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Share of the most frequent value in `predictions`.
pub fn majority_fraction(predictions: &[usize], classes: usize) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; classes];
    predictions.iter().for_each(|&p| counts[p] += 1);
    *counts.iter().max().unwrap() as f64 / predictions.len() as f64
}

/// Formats with 9 significant digits.
pub fn fmt_float(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        let s = format!("{v:.8e}");
        let (mantissa, exp) = s.split_once('e').expect("exponent");
        let exp: i32 = exp.parse().expect("integer exponent");
        if (-5..9).contains(&exp) {
            let decimals = (8 - exp).max(0) as usize;
            let fixed = format!("{v:.decimals$}");
            if fixed.contains('.') {
                fixed.trim_end_matches('0').trim_end_matches('.').to_string()
            } else {
                fixed
            }
        } else {
            let m = mantissa.trim_end_matches('0').trim_end_matches('.');
            format!("{m}e{exp}")
        }
    }
}

pub fn records_csv(records: &[BatchRecord]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let row = [
            r.step.to_string(),
            r.batch_size.to_string(),
            fmt_float(r.batch_accuracy),
            fmt_float(r.mean_entropy),
            r.selected_count.to_string(),
            fmt_float(r.grad_norm),
            fmt_float(r.redundancy),
            fmt_float(r.inequity),
            (r.recovery_fired as u8).to_string(),
            fmt_float(r.cumulative_accuracy),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes `records.csv`, `summary.json` and `timing.json` into `dir`. The
/// first two are byte-identical across repeated runs; wall-clock time lives
/// in the third.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("records.csv"), records_csv(&out.records))?;
    let mut summary = serde_json::to_string_pretty(&out.summary).map_err(|e| Error::Config(e.to_string()))?;
    summary.push('\n');
    fs::write(dir.join("summary.json"), summary)?;
    let mut f = fs::File::create(dir.join("timing.json"))?;
    writeln!(f, "{{\"wall_clock_seconds\": {:.3}}}", out.wall_clock_seconds)?;
    Ok(())
}

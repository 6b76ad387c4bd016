//! Prints no-adapt accuracy per corruption kind and severity for freshly
//! pretrained models. Used to tune the severity tables.
//!
//! cargo run --release --example calibrate -- [norm] [seeds]

use ttalab::harness::{pretrain, ExperimentConfig};
use ttalab::nn::{argmax, NormKind, StatsMode};
use ttalab::stream::{corrupt, make_dataset, Corruption, CorruptionKind, DatasetConfig};

fn main() -> ttalab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = ExperimentConfig::default();
    cfg.model.norm = match args.get(1).map(String::as_str) {
        Some("batch") => NormKind::Batch,
        Some("layer") => NormKind::Layer,
        _ => cfg.model.norm,
    };
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let pool = make_dataset(
        &DatasetConfig {
            per_class: 300,
            ..cfg.dataset.clone()
        },
        2,
    )?;
    let models = (0..seeds)
        .map(|s| {
            let mut c = cfg.clone();
            c.seed = s;
            pretrain(&c).map(|(m, _)| m)
        })
        .collect::<ttalab::Result<Vec<_>>>()?;
    println!("{:<16} severity 0..5 (mean no-adapt accuracy)", "kind");
    for kind in CorruptionKind::ALL {
        let mut row = format!("{:<16}", kind.name());
        for severity in 0..=5 {
            let mut acc = 0.0;
            for (s, m) in models.iter().enumerate() {
                let x = corrupt(&pool.samples, Corruption { kind, severity }, s as u64)?;
                let logits = m.predict_logits(&x, StatsMode::Running)?;
                let hits = logits
                    .data()
                    .chunks(pool.classes)
                    .zip(&pool.labels)
                    .filter(|(row, &y)| argmax(row) == y)
                    .count();
                acc += hits as f64 / pool.labels.len() as f64;
            }
            row += &format!(" {:.3}", acc / models.len() as f64);
        }
        println!("{row}");
    }
    Ok(())
}

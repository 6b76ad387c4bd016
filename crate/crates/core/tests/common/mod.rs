#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::{Mutex, MutexGuard, OnceLock};

use ttalab::harness::{pretrain, ExperimentConfig};
use ttalab::nn::{Model, NormKind};

/// Pretrained source models shared across tests in one binary.
pub fn source_model(norm: NormKind, seed: u64) -> Model {
    static CACHE: OnceLock<Mutex<HashMap<(String, u64), Model>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (format!("{norm:?}"), seed);
    if let Some(m) = cache.lock().unwrap().get(&key) {
        return m.clone();
    }
    let mut cfg = ExperimentConfig::default();
    cfg.model.norm = norm;
    cfg.seed = seed;
    let (model, _) = pretrain(&cfg).expect("pretrain");
    cache.lock().unwrap().entry(key).or_insert(model).clone()
}

/// Serializes timed tests so that runtimes are not inflated by neighbours
/// competing for the same cores.
pub fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn config(norm: NormKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.norm = norm;
    cfg
}

pub fn report(id: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {id:>2} [{name}]: {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::stream::{CorruptionKind, DatasetConfig};
use crate::tta::{Algorithm, TtaConfig};

/// Reference batch size of the learning-rate rescaling rule.
pub const LR_REFERENCE_BATCH: usize = 32;

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "TTALAB_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub pretrain: PretrainConfig,
    pub stream: StreamSpec,
    pub tta: TtaConfig,
    /// Scale the learning rate by `min(B, 32) / 32`.
    pub lr_rescale: bool,
    pub output: OutputConfig,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Clean test accuracy below this fails the run.
    pub min_accuracy: f64,
    /// Clean test accuracy below this logs a warning.
    pub target_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            min_accuracy: 0.90,
            target_accuracy: 0.95,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Shuffled i.i.d. order, one corruption.
    Iid,
    /// Online imbalanced label shift, one corruption.
    LabelShift,
    /// Every sample corrupted by a random kind from `corruptions`.
    Mixed,
    /// One label-shift stream per entry of `corruptions`, chained.
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub protocol: Protocol,
    pub corruption: CorruptionKind,
    pub severity: u8,
    pub imbalance_ratio: Ratio,
    /// Samples per label-shift step.
    pub samples_per_step: usize,
    pub batch_size: usize,
    pub corruptions: Vec<CorruptionKind>,
    /// Per-class size of the held-out pool streams are drawn from.
    pub test_per_class: usize,
    /// Read the stream from a binary stream file instead of building it.
    pub file: Option<PathBuf>,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            protocol: Protocol::LabelShift,
            corruption: CorruptionKind::AffineShift,
            severity: 5,
            imbalance_ratio: Ratio(f64::INFINITY),
            samples_per_step: 500,
            batch_size: 64,
            corruptions: CorruptionKind::ALL.to_vec(),
            test_per_class: 1000,
            file: None,
        }
    }
}

/// Imbalance ratio; accepts a number, `inf`, or the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratio(pub f64);

impl Ratio {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(Ratio(f64::INFINITY)),
            v => v
                .parse()
                .map(Ratio)
                .map_err(|_| Error::Config(format!("invalid imbalance ratio {v:?}"))),
        }
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_infinite() {
            write!(f, "inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Ratio(v)),
            Raw::Int(v) => Ok(Ratio(v as f64)),
            Raw::Text(t) => Ratio::parse(&t).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Source checkpoint; when absent, runs pretrain in memory.
    pub checkpoint: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.model.validate().map_err(cfg_err)?;
        self.dataset.validate().map_err(cfg_err)?;
        if self.model.input_dim != self.dataset.input_dim || self.model.classes != self.dataset.classes {
            return Err(Error::Config(
                "model and dataset disagree on input_dim or classes".into(),
            ));
        }
        self.tta.validate(self.model.classes)?;
        let s = &self.stream;
        if s.batch_size == 0 || s.samples_per_step == 0 || s.test_per_class == 0 {
            return Err(Error::Config("stream sizes must be positive".into()));
        }
        if s.severity > 5 {
            return Err(Error::Config(format!("severity {} outside 0..=5", s.severity)));
        }
        if !(s.imbalance_ratio.0 >= 1.0) {
            return Err(Error::Config("imbalance_ratio must be ≥ 1".into()));
        }
        if matches!(s.protocol, Protocol::Mixed | Protocol::Continuous) && s.corruptions.is_empty() {
            return Err(Error::Config("mixed and continuous streams need corruptions".into()));
        }
        if let Some(f) = &s.file {
            if !f.exists() {
                return Err(Error::Config(format!("stream file {} does not exist", f.display())));
            }
        }
        if let Some(c) = &self.output.checkpoint {
            if !c.exists() {
                return Err(Error::Config(format!("checkpoint {} does not exist", c.display())));
            }
        }
        let p = &self.pretrain;
        if p.epochs == 0 || p.batch_size == 0 || !(p.lr > 0.0) {
            return Err(Error::Config("pretrain epochs, batch size and lr must be positive".into()));
        }
        Ok(())
    }

    /// Adaptation hyperparameters with the learning rate for `batch_size`.
    pub fn effective_tta(&self, batch_size: usize) -> TtaConfig {
        let mut t = self.tta.clone();
        if self.lr_rescale {
            t.lr *= batch_size.min(LR_REFERENCE_BATCH) as f64 / LR_REFERENCE_BATCH as f64;
        }
        t
    }

    /// Settings that have no effect under the chosen algorithm.
    pub fn ignored_fields(&self) -> Vec<&'static str> {
        let t = &self.tta;
        let d = TtaConfig::default();
        let mut ignored = Vec::new();
        let sharp = matches!(t.algorithm, Algorithm::Sar | Algorithm::Sar2 | Algorithm::Sar2Selective);
        let sar2 = matches!(t.algorithm, Algorithm::Sar2 | Algorithm::Sar2Selective);
        let mut check = |used: bool, changed: bool, name| {
            if !used && changed {
                ignored.push(name);
            }
        };
        check(sharp, t.rho != d.rho, "rho");
        check(sharp, t.entropy_factor != d.entropy_factor, "entropy_factor");
        check(sharp, t.reset_e0 != d.reset_e0, "reset_e0");
        check(sar2 || t.algorithm == Algorithm::RedundancyOnly, t.alpha != d.alpha, "alpha");
        check(sar2, t.beta != d.beta, "beta");
        check(sar2, t.lambda != d.lambda, "lambda");
        check(sar2, t.zeta != d.zeta, "zeta");
        check(
            matches!(t.algorithm, Algorithm::TentClipValue | Algorithm::TentClipNorm),
            t.clip_delta != d.clip_delta,
            "clip_delta",
        );
        ignored
    }
}

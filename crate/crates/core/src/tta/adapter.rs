use serde::{Deserialize, Serialize};

use super::primitives::*;
use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{adaptable_params, argmax, ForwardPass, Head, Model, NormKind, ParamPartition, SgdState, StatsMode};
use crate::objectives::{self, grad_norm_of, RedundancyMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[serde(rename = "noadapt")]
    NoAdapt,
    Tent,
    TentClipValue,
    TentClipNorm,
    Sar,
    Sar2,
    /// SAR² whose centroids are built from filtered samples only.
    Sar2Selective,
    RedundancyOnly,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::NoAdapt,
        Algorithm::Tent,
        Algorithm::TentClipValue,
        Algorithm::TentClipNorm,
        Algorithm::Sar,
        Algorithm::Sar2,
        Algorithm::Sar2Selective,
        Algorithm::RedundancyOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::NoAdapt => "noadapt",
            Algorithm::Tent => "tent",
            Algorithm::TentClipValue => "tent_clip_value",
            Algorithm::TentClipNorm => "tent_clip_norm",
            Algorithm::Sar => "sar",
            Algorithm::Sar2 => "sar2",
            Algorithm::Sar2Selective => "sar2_selective",
            Algorithm::RedundancyOnly => "redundancy_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// Hyperparameters of an adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub algorithm: Algorithm,
    /// Learning rate actually used by the optimizer.
    pub lr: f64,
    pub momentum: f64,
    /// `E0 = entropy_factor · ln C`.
    pub entropy_factor: f64,
    pub rho: f64,
    /// Redundancy weight; `None` means `1000 / D`.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub lambda: f64,
    /// Warm-up row count; `None` means `C / 10`.
    pub zeta: Option<usize>,
    pub reset_e0: f64,
    pub recovery: bool,
    pub freeze_top_k: usize,
    /// Threshold δ of the clipping baselines.
    pub clip_delta: f64,
    /// Unset picks feature centering for group norm and batch
    /// standardization otherwise.
    pub redundancy_mode: Option<RedundancyMode>,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Sar2,
            lr: 0.001,
            momentum: 0.9,
            entropy_factor: FilterConfig::DEFAULT_FACTOR,
            rho: SamConfig::default().rho,
            alpha: None,
            beta: 50.0,
            lambda: FeatureBank::DEFAULT_LAMBDA,
            zeta: None,
            reset_e0: RecoveryMonitor::DEFAULT_E0,
            recovery: true,
            freeze_top_k: 1,
            clip_delta: 0.001,
            redundancy_mode: None,
        }
    }
}

impl TtaConfig {
    pub fn alpha_for(&self, feature_dim: usize) -> f64 {
        self.alpha.unwrap_or(1000.0 / feature_dim as f64)
    }

    pub fn redundancy_mode_for(&self, norm: NormKind) -> RedundancyMode {
        self.redundancy_mode.unwrap_or(match norm {
            NormKind::Group(_) => RedundancyMode::FeatureCenter,
            _ => RedundancyMode::BatchStandardize,
        })
    }

    pub fn zeta_for(&self, classes: usize) -> usize {
        self.zeta.unwrap_or(classes / 10)
    }

    pub fn clip(&self) -> Clip {
        match self.algorithm {
            Algorithm::TentClipValue => Clip::Value(self.clip_delta),
            Algorithm::TentClipNorm => Clip::Norm(self.clip_delta),
            _ => Clip::None,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("rho", self.rho)?;
        positive("reset_e0", self.reset_e0)?;
        if matches!(self.algorithm, Algorithm::TentClipValue | Algorithm::TentClipNorm) {
            positive("clip_delta", self.clip_delta)?;
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1], got {}", self.lambda)));
        }
        if self.alpha.is_some_and(|a| a < 0.0) || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        self.filter(classes)
            .validate(classes)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn filter(&self, classes: usize) -> FilterConfig {
        FilterConfig {
            e0: self.entropy_factor * (classes as f64).ln(),
        }
    }
}

/// Forward and backward passes spent by an adapter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PassCounters {
    pub forward: usize,
    pub backward: usize,
    /// Batches on which at least one backward pass ran.
    pub updated_batches: usize,
    /// Sharpness evaluations skipped because the gradient was flat.
    pub flat_skips: usize,
}

/// One online adaptation session: a model plus the state of the chosen
/// algorithm, consuming batches in stream order.
#[derive(Clone, Debug)]
pub struct Adapter {
    model: Model,
    cfg: TtaConfig,
    partition: ParamPartition,
    sgd: SgdState,
    filter: FilterConfig,
    alpha: f64,
    zeta: usize,
    redundancy_mode: RedundancyMode,
    recovery: RecoveryMonitor,
    bank: FeatureBank,
    counters: PassCounters,
    step: usize,
    correct: usize,
    seen: usize,
}

type Term<'a> = Box<dyn Fn(&mut Tape, &ForwardPass) -> Result<Var> + 'a>;

impl Adapter {
    pub fn new(model: Model, cfg: TtaConfig) -> Result<Self> {
        let classes = model.classes();
        cfg.validate(classes)?;
        let partition = adaptable_params(&model, cfg.freeze_top_k)?;
        let sgd = SgdState::new(cfg.lr, cfg.momentum, &model, &partition.adaptable);
        let filter = cfg.filter(classes);
        let recovery = RecoveryMonitor::new(filter.e0, cfg.reset_e0, model.snapshot(&partition.adaptable));
        Ok(Self {
            alpha: cfg.alpha_for(model.feature_dim()),
            zeta: cfg.zeta_for(classes),
            redundancy_mode: cfg.redundancy_mode_for(model.norm_kind()),
            bank: FeatureBank::new(classes, cfg.lambda),
            model,
            partition,
            sgd,
            filter,
            recovery,
            cfg,
            counters: PassCounters::default(),
            step: 0,
            correct: 0,
            seen: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TtaConfig {
        &self.cfg
    }

    pub fn partition(&self) -> &ParamPartition {
        &self.partition
    }

    pub fn counters(&self) -> PassCounters {
        self.counters
    }

    pub fn recovery(&self) -> &RecoveryMonitor {
        &self.recovery
    }

    pub fn bank(&self) -> &FeatureBank {
        &self.bank
    }

    pub fn filter(&self) -> FilterConfig {
        self.filter
    }

    pub fn sgd(&self) -> &SgdState {
        &self.sgd
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn redundancy_mode(&self) -> RedundancyMode {
        self.redundancy_mode
    }

    pub fn zeta(&self) -> usize {
        self.zeta
    }

    pub fn cumulative_accuracy(&self) -> f64 {
        if self.seen == 0 {
            0.0
        } else {
            self.correct as f64 / self.seen as f64
        }
    }

    fn stats_mode(&self) -> StatsMode {
        match self.cfg.algorithm {
            Algorithm::NoAdapt => StatsMode::Running,
            _ => StatsMode::Batch,
        }
    }

    /// Adapts on one batch. `labels` only feed the accuracy telemetry.
    pub fn step(&mut self, x: &Tensor, labels: &[usize]) -> Result<BatchRecord> {
        if x.ndim() != 2 || x.rows() != labels.len() {
            return Err(Error::shape("adapter step", x.shape(), &[labels.len()]));
        }
        let step = self.step;
        let mut tape = Tape::new();
        let track = if self.cfg.algorithm == Algorithm::NoAdapt {
            Vec::new()
        } else {
            self.partition.adaptable.clone()
        };
        let pass = self.forward(&mut tape, x, &track)?;
        let entropy = nonfinite(step, "forward", objectives::entropy(&mut tape, pass.logits))?;
        let entropies = tape.value(entropy).data().to_vec();
        let mut record = self.diagnostics(&tape, &pass, &entropies, labels)?;

        let outcome = match self.cfg.algorithm {
            Algorithm::NoAdapt => Outcome::default(),
            Algorithm::Tent | Algorithm::TentClipValue | Algorithm::TentClipNorm => {
                self.tent(&mut tape, &pass, entropy)?
            }
            Algorithm::Sar => self.sar(&mut tape, &pass, x, &entropies)?,
            Algorithm::Sar2 | Algorithm::Sar2Selective => self.sar2(&mut tape, &pass, x, &entropies)?,
            Algorithm::RedundancyOnly => self.redundancy_only(&mut tape, &pass)?,
        };
        record.selected_count = outcome.selected;
        record.grad_norm = outcome.grad_norm;
        record.recovery_fired = outcome.recovery_fired;
        self.step += 1;
        Ok(record)
    }

    fn forward(&mut self, tape: &mut Tape, x: &Tensor, track: &[crate::nn::ParamId]) -> Result<ForwardPass> {
        self.counters.forward += 1;
        let mode = self.stats_mode();
        nonfinite(self.step, "forward", self.model.forward(tape, x, mode, track))
    }

    fn diagnostics(
        &mut self,
        tape: &Tape,
        pass: &ForwardPass,
        entropies: &[f64],
        labels: &[usize],
    ) -> Result<BatchRecord> {
        let logits = tape.value(pass.logits);
        let conf = objectives::confidences(logits)?;
        let predictions: Vec<usize> = conf.iter().map(|c| c.1).collect();
        let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
        self.correct += hits;
        self.seen += labels.len();

        let features = tape.value(pass.features);
        let redundancy = match self.redundancy_mode {
            RedundancyMode::BatchStandardize if features.rows() < 2 => f64::NAN,
            mode => objectives::redundancy_value(features, mode)?,
        };
        let mut diag = Tape::new();
        let (hw, hb) = self.model.head_ids();
        let head = Head {
            weight: diag.constant(self.model.param(hw).clone()),
            bias: diag.constant(self.model.param(hb).clone()),
        };
        let z = diag.constant(features.clone());
        let ineq = objectives::inequity(&mut diag, z, &head)?;

        Ok(BatchRecord {
            step: self.step,
            batch_size: labels.len(),
            batch_accuracy: hits as f64 / labels.len().max(1) as f64,
            mean_entropy: entropies.iter().sum::<f64>() / entropies.len().max(1) as f64,
            selected_count: 0,
            grad_norm: 0.0,
            redundancy,
            inequity: diag.value(ineq).item()?,
            recovery_fired: false,
            cumulative_accuracy: self.cumulative_accuracy(),
            confidences: conf.iter().map(|c| c.0).collect(),
            predictions,
        })
    }

    fn grads(&self, tape: &Tape, pass: &ForwardPass) -> Vec<Tensor> {
        self.partition
            .adaptable
            .iter()
            .map(|&id| tape.grad_or_zeros(pass.param(id)))
            .collect()
    }

    fn backward(&mut self, tape: &mut Tape, pass: &ForwardPass, loss: Var, stage: &'static str) -> Result<Vec<Tensor>> {
        if !tape.value(loss).is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, stage });
        }
        tape.zero_grad();
        self.counters.backward += 1;
        nonfinite(self.step, stage, tape.backward(loss))?;
        let grads = self.grads(tape, pass);
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step: self.step, stage });
        }
        Ok(grads)
    }

    fn apply(&mut self, grads: &[Tensor]) -> Result<()> {
        self.sgd.step(&mut self.model, &self.partition.adaptable, grads)
    }

    /// Gradient of `term` at `Θ + ρ·g/‖g‖`, where `g` is the gradient at `Θ`.
    /// Parameters are copied back afterwards, so they end bit-identical.
    fn sharpness_grad(&mut self, base: Vec<Tensor>, x: &Tensor, term: &Term<'_>, stage: &'static str) -> Result<Vec<Tensor>> {
        let Some(eps) = sam_perturbation(&base, self.cfg.rho) else {
            self.counters.flat_skips += 1;
            return Ok(base);
        };
        let ids = self.partition.adaptable.clone();
        let saved = self.model.snapshot(&ids);
        for (&id, e) in ids.iter().zip(&eps) {
            let p = self.model.param_mut(id);
            p.data_mut().iter_mut().zip(e.data()).for_each(|(v, d)| *v += d);
        }
        let result = (|| {
            let mut tape = Tape::new();
            let pass = self.forward(&mut tape, x, &ids)?;
            let loss = nonfinite(self.step, stage, term(&mut tape, &pass))?;
            self.backward(&mut tape, &pass, loss, stage)
        })();
        self.model.restore(&ids, &saved);
        result
    }

    fn maybe_recover(&mut self, selected_entropy: f64) -> bool {
        if !self.cfg.recovery || !self.recovery.observe(selected_entropy) {
            return false;
        }
        let ids = self.partition.adaptable.clone();
        let snapshot = self.recovery.snapshot.clone();
        self.model.restore(&ids, &snapshot);
        self.sgd.reset_velocity();
        self.recovery.reset();
        log::debug!("step {}: model recovery reset", self.step);
        true
    }

    fn tent(&mut self, tape: &mut Tape, pass: &ForwardPass, entropy: Var) -> Result<Outcome> {
        let loss = nonfinite(self.step, "loss", tape.mean(entropy, 0))?;
        let mut grads = self.backward(tape, pass, loss, "backward")?;
        self.counters.updated_batches += 1;
        let grad_norm = grad_norm_of(&grads);
        clip_grads(&mut grads, self.cfg.clip());
        self.apply(&grads)?;
        Ok(Outcome {
            selected: tape.shape(entropy)[0],
            grad_norm,
            recovery_fired: false,
        })
    }

    fn sar(&mut self, tape: &mut Tape, pass: &ForwardPass, x: &Tensor, entropies: &[f64]) -> Result<Outcome> {
        let mask = filter_reliable(entropies, self.filter);
        let selected = mask.iter().filter(|&&m| m).count();
        if selected == 0 {
            return Ok(Outcome::default());
        }
        let term: Term<'_> = Box::new(|tape, pass| selected_entropy(tape, pass, &mask));
        let loss = nonfinite(self.step, "loss", term(tape, pass))?;
        let mean_selected = tape.value(loss).item()?;
        let base = self.backward(tape, pass, loss, "backward")?;
        self.counters.updated_batches += 1;
        let grad_norm = grad_norm_of(&base);
        let grads = self.sharpness_grad(base, x, &term, "sharpness backward")?;
        self.apply(&grads)?;
        Ok(Outcome {
            selected,
            grad_norm,
            recovery_fired: self.maybe_recover(mean_selected),
        })
    }

    fn sar2(&mut self, tape: &mut Tape, pass: &ForwardPass, x: &Tensor, entropies: &[f64]) -> Result<Outcome> {
        let mask = filter_reliable(entropies, self.filter);
        let selected = mask.iter().filter(|&&m| m).count();
        let logits = tape.value(pass.logits);
        let pseudo: Vec<usize> = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
        let features = tape.value(pass.features).clone();
        let include = if self.cfg.algorithm == Algorithm::Sar2Selective {
            mask.clone()
        } else {
            vec![true; mask.len()]
        };

        let (alpha, beta) = (self.alpha, self.cfg.beta);
        let regularized = alpha != 0.0 || beta != 0.0;
        let min_rows = if alpha != 0.0 && self.redundancy_mode == RedundancyMode::BatchStandardize {
            self.zeta.max(2)
        } else {
            self.zeta.max(1)
        };
        let plan = if regularized {
            CentroidPlan::masked(&self.bank, &pseudo, &include, min_rows)
        } else {
            None
        };

        let mut outcome = Outcome::default();
        if !regularized || plan.is_some() {
            let mode = self.redundancy_mode;
            let mut terms: Vec<(Term<'_>, &'static str)> = Vec::new();
            if selected > 0 {
                terms.push((Box::new(|tape, pass| selected_entropy(tape, pass, &mask)), "entropy"));
            }
            if let Some(plan) = &plan {
                if alpha != 0.0 {
                    terms.push((
                        Box::new(move |tape: &mut Tape, pass: &ForwardPass| {
                            let c = plan.build(tape, pass.features)?;
                            let r = objectives::redundancy(tape, c, mode)?;
                            tape.scale(r, alpha)
                        }),
                        "redundancy",
                    ));
                }
                if beta != 0.0 {
                    terms.push((
                        Box::new(move |tape: &mut Tape, pass: &ForwardPass| {
                            let c = plan.build(tape, pass.features)?;
                            let i = objectives::inequity(tape, c, &pass.head())?;
                            tape.scale(i, beta)
                        }),
                        "inequity",
                    ));
                }
            }

            if !terms.is_empty() {
                let mut bases = Vec::with_capacity(terms.len());
                let mut mean_selected = None;
                for (term, stage) in &terms {
                    let loss = nonfinite(self.step, stage, term(tape, pass))?;
                    if *stage == "entropy" {
                        mean_selected = Some(tape.value(loss).item()?);
                    }
                    bases.push(self.backward(tape, pass, loss, stage)?);
                }
                self.counters.updated_batches += 1;
                let mut total: Vec<Tensor> = self
                    .partition
                    .adaptable
                    .iter()
                    .map(|&id| Tensor::zeros(self.model.param(id).shape()))
                    .collect();
                let mut base_sum = total.clone();
                for ((term, stage), base) in terms.iter().zip(bases) {
                    add_into(&mut base_sum, &base);
                    let g = self.sharpness_grad(base, x, term, stage)?;
                    add_into(&mut total, &g);
                }
                self.apply(&total)?;
                outcome.grad_norm = grad_norm_of(&base_sum);
                if let Some(e) = mean_selected {
                    outcome.recovery_fired = self.maybe_recover(e);
                }
            }
        }
        outcome.selected = selected;

        // refresh from the pre-update features regardless of warm-up
        let (bank_features, bank_labels) = if include.iter().all(|&k| k) {
            (features, pseudo)
        } else {
            let rows: Vec<Vec<f64>> = (0..features.rows())
                .filter(|&i| include[i])
                .map(|i| features.row(i).to_vec())
                .collect();
            let labels = pseudo.iter().zip(&include).filter(|(_, &k)| k).map(|(&y, _)| y).collect();
            if rows.is_empty() {
                return Ok(outcome);
            }
            (Tensor::from_rows(&rows)?, labels)
        };
        self.bank.update(&bank_features, &bank_labels)?;
        Ok(outcome)
    }

    fn redundancy_only(&mut self, tape: &mut Tape, pass: &ForwardPass) -> Result<Outcome> {
        let mode = self.redundancy_mode;
        if mode == RedundancyMode::BatchStandardize && tape.shape(pass.features)[0] < 2 {
            return Ok(Outcome::default());
        }
        let r = nonfinite(self.step, "loss", objectives::redundancy(tape, pass.features, mode))?;
        let loss = nonfinite(self.step, "loss", tape.scale(r, self.alpha))?;
        let grads = self.backward(tape, pass, loss, "backward")?;
        self.counters.updated_batches += 1;
        self.apply(&grads)?;
        Ok(Outcome {
            selected: tape.shape(pass.features)[0],
            grad_norm: grad_norm_of(&grads),
            recovery_fired: false,
        })
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Outcome {
    selected: usize,
    grad_norm: f64,
    recovery_fired: bool,
}

fn selected_entropy(tape: &mut Tape, pass: &ForwardPass, mask: &[bool]) -> Result<Var> {
    let h = objectives::entropy(tape, pass.logits)?;
    let h = tape.select_rows(h, mask)?;
    tape.mean(h, 0)
}

fn add_into(acc: &mut [Tensor], g: &[Tensor]) {
    for (a, b) in acc.iter_mut().zip(g) {
        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
    }
}

/// Turns a non-finite intermediate into an abort carrying the step index.
fn nonfinite<T>(step: usize, stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Domain { .. } => Error::NonFiniteLoss { step, stage },
        other => other,
    })
}

/// Whether batch-statistics normalization makes this model unusable at
/// batch size 1 for adapting algorithms.
pub fn needs_batch_of_two(model: &Model, algorithm: Algorithm) -> bool {
    model.norm_kind() == NormKind::Batch && algorithm != Algorithm::NoAdapt && !model.allow_singleton_batch_stats
}

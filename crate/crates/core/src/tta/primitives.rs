use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::objectives::grad_norm_of;

/// Gradients below this norm are treated as a flat point: no perturbation.
pub const FLAT_GRAD_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterConfig {
    /// Entropy threshold `E0`; samples with entropy at or above it are dropped.
    pub e0: f64,
}

impl FilterConfig {
    pub const DEFAULT_FACTOR: f64 = 0.4;

    /// `E0 = 0.4 · ln C`.
    pub fn for_classes(classes: usize) -> Self {
        Self {
            e0: Self::DEFAULT_FACTOR * (classes as f64).ln(),
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.e0 > 0.0 && self.e0 < (classes as f64).ln()) {
            return Err(Error::contract(format!(
                "entropy threshold {} must lie in (0, ln {classes})",
                self.e0
            )));
        }
        Ok(())
    }
}

/// `mask_i = E_i < E0`.
pub fn filter_reliable(entropies: &[f64], cfg: FilterConfig) -> Vec<bool> {
    entropies.iter().map(|&e| e < cfg.e0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamConfig {
    pub rho: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self { rho: 0.05 }
    }
}

/// Worst-case first-order perturbation `ρ·g/‖g‖₂` over the concatenation of
/// `grads`. `None` when `‖g‖₂` is below [`FLAT_GRAD_NORM`].
pub fn sam_perturbation(grads: &[Tensor], rho: f64) -> Option<Vec<Tensor>> {
    let norm = grad_norm_of(grads);
    if norm < FLAT_GRAD_NORM {
        return None;
    }
    let scale = rho / norm;
    Some(
        grads
            .iter()
            .map(|g| Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| v * scale).collect()).expect("same shape"))
            .collect(),
    )
}

/// Gradient clipping applied to the full adaptable gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Clip {
    #[default]
    None,
    /// Clamp every coordinate into `[−δ, δ]`.
    Value(f64),
    /// Rescale the concatenated gradient to norm at most `δ`.
    Norm(f64),
}

pub fn clip_grads(grads: &mut [Tensor], clip: Clip) {
    match clip {
        Clip::None => {}
        Clip::Value(d) => grads
            .iter_mut()
            .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v = v.clamp(-d, d))),
        Clip::Norm(d) => {
            let norm = grad_norm_of(grads);
            if norm > d {
                let s = d / norm;
                grads
                    .iter_mut()
                    .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
    }
}

/// Per-class EMA centroids of test features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    centroids: Vec<Option<Vec<f64>>>,
    /// Weight of the new batch centroid in the moving average.
    pub lambda: f64,
}

impl FeatureBank {
    pub const DEFAULT_LAMBDA: f64 = 0.9;

    pub fn new(classes: usize, lambda: f64) -> Self {
        Self {
            centroids: vec![None; classes],
            lambda,
        }
    }

    pub fn classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.centroids[class].as_deref()
    }

    pub fn occupied_count(&self) -> usize {
        self.centroids.iter().filter(|c| c.is_some()).count()
    }

    /// `c̃′ = (1−λ)c̃ + λc` for every class present in `pseudo_labels`; empty
    /// slots take the batch centroid. Returns the classes written, ascending.
    pub fn update(&mut self, features: &Tensor, pseudo_labels: &[usize]) -> Result<Vec<usize>> {
        let centroids = batch_centroids(features, pseudo_labels, self.classes())?;
        let mut written = Vec::new();
        for (class, c) in centroids.into_iter().enumerate() {
            let Some(c) = c else { continue };
            let lambda = self.lambda;
            match &mut self.centroids[class] {
                Some(slot) => slot
                    .iter_mut()
                    .zip(&c)
                    .for_each(|(s, v)| *s = (1.0 - lambda) * *s + lambda * v),
                empty => *empty = Some(c),
            }
            written.push(class);
        }
        Ok(written)
    }
}

/// Mean feature of every pseudo-class present, `None` for absent classes.
pub fn batch_centroids(
    features: &Tensor,
    pseudo_labels: &[usize],
    classes: usize,
) -> Result<Vec<Option<Vec<f64>>>> {
    if features.ndim() != 2 || features.rows() != pseudo_labels.len() {
        return Err(Error::shape("batch_centroids", features.shape(), &[pseudo_labels.len()]));
    }
    if let Some(&bad) = pseudo_labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(format!("pseudo-label {bad} out of range for {classes} classes")));
    }
    let d = features.cols();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (i, &y) in pseudo_labels.iter().enumerate() {
        counts[y] += 1;
        sums[y].iter_mut().zip(features.row(i)).for_each(|(s, v)| *s += v);
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

/// Where each row of the centroid matrix comes from, in class order.
#[derive(Clone, Debug, PartialEq)]
pub enum CentroidSource {
    /// Mean of these batch rows.
    Batch(Vec<usize>),
    /// Bank slot, treated as a constant.
    Bank(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CentroidPlan {
    pub rows: Vec<(usize, CentroidSource)>,
}

impl CentroidPlan {
    /// Batch centroids for present classes, bank slots for the rest; classes
    /// with neither are omitted. `None` when fewer than `zeta` rows exist.
    pub fn new(bank: &FeatureBank, pseudo_labels: &[usize], zeta: usize) -> Option<Self> {
        Self::masked(bank, pseudo_labels, &vec![true; pseudo_labels.len()], zeta)
    }

    /// Like [`Self::new`] but batch centroids use only rows where `include` is set.
    pub fn masked(bank: &FeatureBank, pseudo_labels: &[usize], include: &[bool], zeta: usize) -> Option<Self> {
        let mut members = vec![Vec::new(); bank.classes()];
        for (i, (&y, &keep)) in pseudo_labels.iter().zip(include).enumerate() {
            if keep {
                members[y].push(i);
            }
        }
        let rows: Vec<(usize, CentroidSource)> = members
            .into_iter()
            .enumerate()
            .filter_map(|(class, m)| {
                if !m.is_empty() {
                    Some((class, CentroidSource::Batch(m)))
                } else {
                    bank.get(class).map(|c| (class, CentroidSource::Bank(c.to_vec())))
                }
            })
            .collect();
        (rows.len() >= zeta && !rows.is_empty()).then_some(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Builds `C^t` on the tape from `features: [B, D]`.
    pub fn build(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let d = tape.shape(features)[1];
        let mut parts = Vec::with_capacity(self.rows.len());
        for (_, src) in &self.rows {
            let row = match src {
                CentroidSource::Batch(members) => {
                    let g = tape.gather_rows(features, members.clone())?;
                    let m = tape.mean(g, 0)?;
                    tape.reshape(m, &[1, d])?
                }
                CentroidSource::Bank(c) => tape.constant(Tensor::new(vec![1, d], c.clone())?),
            };
            parts.push(row);
        }
        tape.concat_rows(&parts)
    }
}

/// Centroid matrix `C^t` as a plain tensor, or `None` if fewer than `zeta`
/// rows are available.
pub fn assemble_centroid_matrix(
    bank: &FeatureBank,
    features: &Tensor,
    pseudo_labels: &[usize],
    zeta: usize,
) -> Result<Option<Tensor>> {
    if features.ndim() != 2 || features.rows() != pseudo_labels.len() {
        return Err(Error::shape("assemble_centroid_matrix", features.shape(), &[pseudo_labels.len()]));
    }
    let Some(plan) = CentroidPlan::new(bank, pseudo_labels, zeta) else {
        return Ok(None);
    };
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let c = plan.build(&mut tape, f)?;
    Ok(Some(tape.value(c).clone()))
}

/// Moving average of the selected-sample entropy with a reset trigger.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryMonitor {
    pub e_m: f64,
    pub initial: f64,
    pub e0: f64,
    pub factor: f64,
    pub snapshot: Vec<Tensor>,
    pub trigger_count: usize,
}

impl RecoveryMonitor {
    pub const DEFAULT_E0: f64 = 0.2;
    pub const DEFAULT_FACTOR: f64 = 0.9;

    pub fn new(initial: f64, e0: f64, snapshot: Vec<Tensor>) -> Self {
        Self {
            e_m: initial,
            initial,
            e0,
            factor: Self::DEFAULT_FACTOR,
            snapshot,
            trigger_count: 0,
        }
    }

    /// Folds in one batch's mean selected entropy; true when a reset is due.
    /// The caller restores the snapshot and then calls [`Self::reset`].
    pub fn observe(&mut self, entropy: f64) -> bool {
        self.e_m = self.factor * self.e_m + (1.0 - self.factor) * entropy;
        self.e_m < self.e0
    }

    pub fn reset(&mut self) {
        self.e_m = self.initial;
        self.trigger_count += 1;
    }
}

/// Per-batch telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub step: usize,
    pub batch_size: usize,
    pub batch_accuracy: f64,
    pub mean_entropy: f64,
    pub selected_count: usize,
    pub grad_norm: f64,
    pub redundancy: f64,
    pub inequity: f64,
    pub recovery_fired: bool,
    pub cumulative_accuracy: f64,
    /// Pre-update argmax per sample.
    #[serde(skip)]
    pub predictions: Vec<usize>,
    /// Pre-update max softmax probability per sample.
    #[serde(skip)]
    pub confidences: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn filter_example() {
        let cfg = FilterConfig::for_classes(1000);
        assert!((cfg.e0 - 2.7631).abs() < 1e-4);
        assert_eq!(filter_reliable(&[1.0, 3.0, 2.7], cfg), vec![true, false, true]);
        assert!(filter_reliable(&[3.0, 2.77], cfg).iter().all(|m| !m));
        assert!(FilterConfig { e0: 7.0 }.validate(1000).is_err());
    }

    #[test]
    fn sam_example() {
        let eps = sam_perturbation(&[Tensor::vector(vec![3.0, 4.0])], 0.05).unwrap();
        assert!((eps[0].data()[0] - 0.03).abs() < 1e-15);
        assert!((eps[0].data()[1] - 0.04).abs() < 1e-15);
        assert!(sam_perturbation(&[Tensor::zeros(&[3])], 0.05).is_none());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![Tensor::vector(vec![0.005, -0.0005])];
        clip_grads(&mut g, Clip::Value(0.001));
        assert_eq!(g[0].data(), &[0.001, -0.0005]);
        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        clip_grads(&mut g, Clip::Norm(0.1));
        assert!((grad_norm_of(&g) - 0.1).abs() < 1e-15);
        let mut g = vec![Tensor::vector(vec![0.03, 0.04])];
        let before = g.clone();
        clip_grads(&mut g, Clip::Norm(0.1));
        assert_eq!(g, before);
    }

    #[test]
    fn bank_ema_and_insert() {
        let mut bank = FeatureBank::new(4, 0.9);
        bank.update(&Tensor::from_rows(&[vec![0.0]]).unwrap(), &[0]).unwrap();
        bank.update(&Tensor::from_rows(&[vec![1.0]]).unwrap(), &[0]).unwrap();
        assert!((bank.get(0).unwrap()[0] - 0.9).abs() < 1e-15);
        assert_eq!(bank.occupied_count(), 1);

        let written = bank
            .update(&Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap(), &[3, 3])
            .unwrap();
        assert_eq!(written, vec![3]);
        assert_eq!(bank.get(3).unwrap(), &[3.0]);
        assert_eq!(bank.occupied_count(), 2);
        assert!(bank.get(1).is_none());
    }

    #[test]
    fn centroid_matrix_examples() {
        let classes = 4;
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![0.0, 5.0], vec![9.0, 9.0]]).unwrap();
        let all = [0, 0, 1, 2];
        let mut bank = FeatureBank::new(classes, 0.9);
        // three distinct classes but ζ = 5: not enough rows
        assert!(assemble_centroid_matrix(&bank, &f, &all, 5).unwrap().is_none());
        let c = assemble_centroid_matrix(&bank, &f, &all, 3).unwrap().unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.row(0), &[2.0, 1.0]);

        let full = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0], vec![4.0, 4.0]]).unwrap();
        bank.update(&full, &[0, 1, 2, 3]).unwrap();
        let one = Tensor::from_rows(&[vec![7.0, 8.0]]).unwrap();
        let c = assemble_centroid_matrix(&bank, &one, &[2], classes).unwrap().unwrap();
        assert_eq!(c.shape(), &[4, 2]);
        assert_eq!(c.row(2), &[7.0, 8.0]);
        assert_eq!(c.row(3), &[4.0, 4.0]);
    }

    #[test]
    fn recovery_recurrence() {
        let mut m = RecoveryMonitor::new(1.0, 0.2, vec![]);
        let mut steps = 0;
        while !m.observe(0.01) {
            steps += 1;
        }
        // e_m(n) = 0.01 + 0.99·0.9^n < 0.2  ⇔  n > ln(0.19/0.99)/ln 0.9
        let predicted = ((0.19f64 / 0.99).ln() / 0.9f64.ln()).floor() as usize + 1;
        assert_eq!(steps + 1, predicted);
        m.reset();
        assert_eq!(m.e_m, 1.0);
        assert_eq!(m.trigger_count, 1);
    }

    proptest! {
        #[test]
        fn perturbation_has_radius_rho(g in proptest::collection::vec(-10.0f64..10.0, 1..20), scale in 0.01f64..100.0) {
            prop_assume!(g.iter().any(|v| v.abs() > 1e-6));
            let t = vec![Tensor::vector(g.clone())];
            let eps = sam_perturbation(&t, 0.05).unwrap();
            prop_assert!((grad_norm_of(&eps) - 0.05).abs() < 1e-10);
            let scaled = vec![Tensor::vector(g.iter().map(|v| v * scale).collect())];
            let eps2 = sam_perturbation(&scaled, 0.05).unwrap();
            for (a, b) in eps[0].data().iter().zip(eps2[0].data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Epsilon added to every variance before the square root.
pub const NORM_EPS: f64 = 1e-5;

/// Momentum of the running-statistics update used during source training.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Group(usize),
    Layer,
}

impl NormKind {
    pub fn validate(&self, width: usize) -> Result<()> {
        match *self {
            NormKind::Group(0) => Err(Error::contract("group norm needs at least one group")),
            NormKind::Group(g) if !width.is_multiple_of(g) => Err(Error::contract(format!(
                "group norm: width {width} not divisible by {g} groups"
            ))),
            _ => Ok(()),
        }
    }

    /// Output of a sample is independent of its batch companions.
    pub fn is_batch_agnostic(&self) -> bool {
        !matches!(self, NormKind::Batch)
    }
}

/// Which statistics batch norm uses. Group and layer norm ignore this.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMode {
    /// Current-batch statistics.
    Batch,
    /// Running statistics accumulated during source training.
    Running,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    /// Folds one batch into the running estimate; `var` is the biased batch
    /// variance over `n` rows and is stored unbiased.
    pub fn update(&mut self, mean: &[f64], var: &[f64], n: usize) {
        let correction = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        for (r, m) in self.mean.iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.var.iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
        }
    }
}

/// Standardizes each row of a `[rows, width]` tensor across its columns.
pub fn standardize_rows(tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
    let xt = tape.transpose(x)?;
    let mean = tape.mean(xt, 0)?;
    let centered = tape.sub(xt, mean)?;
    let sq = tape.square(centered)?;
    let var = tape.mean(sq, 0)?;
    let var = tape.add_scalar(var, eps)?;
    let std = tape.sqrt(var)?;
    let normed = tape.div(centered, std)?;
    tape.transpose(normed)
}

/// Standardizes each column over the rows. Returns the normalized tensor and
/// the batch mean and biased variance per column.
pub fn standardize_columns(tape: &mut Tape, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
    let mean = tape.mean(x, 0)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered)?;
    let var = tape.mean(sq, 0)?;
    let stats = (tape.value(mean).data().to_vec(), tape.value(var).data().to_vec());
    let var = tape.add_scalar(var, eps)?;
    let std = tape.sqrt(var)?;
    let normed = tape.div(centered, std)?;
    Ok((normed, stats.0, stats.1))
}

pub(crate) struct NormOutput {
    pub value: Var,
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// Normalizes `x: [B, width]` and applies the affine `gamma`, `beta`.
pub(crate) fn apply_norm(
    tape: &mut Tape,
    kind: NormKind,
    x: Var,
    gamma: Var,
    beta: Var,
    mode: StatsMode,
    running: &RunningStats,
    allow_singleton: bool,
) -> Result<NormOutput> {
    let (rows, width) = {
        let s = tape.shape(x);
        (s[0], s[1])
    };
    let mut batch_stats = None;
    let normed = match kind {
        NormKind::Layer => standardize_rows(tape, x, NORM_EPS)?,
        NormKind::Group(groups) => {
            let grouped = tape.reshape(x, &[rows * groups, width / groups])?;
            let normed = standardize_rows(tape, grouped, NORM_EPS)?;
            tape.reshape(normed, &[rows, width])?
        }
        NormKind::Batch => match mode {
            StatsMode::Batch => {
                if rows < 2 && !allow_singleton {
                    return Err(Error::contract(
                        "batch norm with batch statistics needs at least 2 samples \
                         (degenerate variance at batch size 1)",
                    ));
                }
                let (normed, mean, var) = standardize_columns(tape, x, NORM_EPS)?;
                batch_stats = Some((mean, var));
                normed
            }
            StatsMode::Running => {
                let mean = tape.constant(Tensor::vector(running.mean.clone()));
                let std = Tensor::vector(running.var.iter().map(|v| (v + NORM_EPS).sqrt()).collect());
                let std = tape.constant(std);
                let centered = tape.sub(x, mean)?;
                tape.div(centered, std)?
            }
        },
    };
    let scaled = tape.mul(normed, gamma)?;
    let value = tape.add(scaled, beta)?;
    Ok(NormOutput { value, batch_stats })
}

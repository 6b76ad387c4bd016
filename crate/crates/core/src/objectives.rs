//! Adaptation objectives and diagnostics. Every differentiable objective has a
//! tape form (for gradients) and a plain value form (for telemetry).

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{argmax, Head};

/// Added inside the logarithm of every entropy.
pub const LOG_EPS: f64 = 1e-12;

/// Added to every variance before the square root in redundancy.
pub const STD_EPS: f64 = 1e-8;

pub const DEFAULT_ECE_BINS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedundancyMode {
    /// Center and scale every dimension over the rows.
    #[default]
    BatchStandardize,
    /// Center and scale every row along the feature dimension. Dimensions that
    /// are near zero for the whole batch then cannot blow up the estimate.
    FeatureCenter,
}

/// Per-row entropy of `softmax(logits)` for `logits: [B, C]`, shape `[B]`.
pub fn entropy(tape: &mut Tape, logits: Var) -> Result<Var> {
    let classes = logits_width(tape, logits, "entropy")?;
    let p = tape.softmax(logits)?;
    let h = neg_plogp(tape, p, 1)?;
    tape.clamp(h, 0.0, (classes as f64).ln())
}

/// Per-row entropies of plain logits.
pub fn entropy_values(logits: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let h = entropy(&mut tape, l)?;
    Ok(tape.value(h).data().to_vec())
}

fn neg_plogp(tape: &mut Tape, p: Var, axis: usize) -> Result<Var> {
    let logp = tape.log(p, LOG_EPS)?;
    let plogp = tape.mul(p, logp)?;
    let s = tape.sum(plogp, axis)?;
    tape.neg(s)
}

fn logits_width(tape: &Tape, logits: Var, op: &'static str) -> Result<usize> {
    match *tape.shape(logits) {
        [rows, c] if rows > 0 && c > 0 => Ok(c),
        ref s => Err(Error::shape(op, s, &[0, 0])),
    }
}

/// `R(Z) = (1/(D−1)) Σ_{i≠j} C_ij²` over ordered pairs, with `C` the
/// covariance of the normalized features.
pub fn redundancy(tape: &mut Tape, z: Var, mode: RedundancyMode) -> Result<Var> {
    let (rows, dims) = match *tape.shape(z) {
        [r, d] => (r, d),
        ref s => return Err(Error::shape("redundancy", s, &[0, 0])),
    };
    if dims < 2 {
        return Err(Error::contract("redundancy needs at least 2 feature dimensions"));
    }
    let normed = match mode {
        RedundancyMode::BatchStandardize => {
            if rows < 2 {
                return Err(Error::contract(format!(
                    "redundancy with batch standardization needs at least 2 rows, got {rows}; \
                     use the centroid-augmented feature matrix for small batches"
                )));
            }
            let mean = tape.mean(z, 0)?;
            let centered = tape.sub(z, mean)?;
            let sq = tape.square(centered)?;
            let var = tape.mean(sq, 0)?;
            let var = tape.add_scalar(var, STD_EPS)?;
            let std = tape.sqrt(var)?;
            tape.div(centered, std)?
        }
        RedundancyMode::FeatureCenter => {
            if rows < 1 {
                return Err(Error::contract("redundancy of an empty feature matrix"));
            }
            crate::nn::standardize_rows(tape, z, STD_EPS)?
        }
    };
    let nt = tape.transpose(normed)?;
    let gram = tape.matmul(nt, normed)?;
    let cov = tape.scale(gram, 1.0 / rows as f64)?;
    let cov_sq = tape.square(cov)?;
    let total = tape.sum_all(cov_sq)?;
    // diagonal entries C_ii are the per-dimension means of the squared normalized values
    let sq = tape.square(normed)?;
    let diag = tape.mean(sq, 0)?;
    let diag_sq = tape.square(diag)?;
    let diag_total = tape.sum_all(diag_sq)?;
    let off = tape.sub(total, diag_total)?;
    let off = tape.clamp(off, 0.0, f64::INFINITY)?;
    tape.scale(off, 1.0 / (dims as f64 - 1.0))
}

pub fn redundancy_value(z: &Tensor, mode: RedundancyMode) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let r = redundancy(&mut tape, v, mode)?;
    tape.value(r).item()
}

/// `I(Z) = ln C − H(softmax(h(μ_B)))` where `μ_B` is the row mean of `z`.
pub fn inequity(tape: &mut Tape, z: Var, head: &Head) -> Result<Var> {
    let dims = match *tape.shape(z) {
        [r, d] if r > 0 => d,
        ref s => return Err(Error::shape("inequity", s, &[0, 0])),
    };
    let mu = tape.mean(z, 0)?;
    let mu = tape.reshape(mu, &[1, dims])?;
    let logits = head.apply(tape, mu)?;
    let classes = logits_width(tape, logits, "inequity")?;
    let h = entropy(tape, logits)?;
    let h = tape.sum_all(h)?;
    let neg = tape.neg(h)?;
    tape.add_scalar(neg, (classes as f64).ln())
}

/// Diversity term of information maximization, shifted so that a uniform
/// mean prediction scores 0: `ln C − H(mean_b softmax(logits_b))`.
pub fn infomax_diversity(tape: &mut Tape, logits: Var) -> Result<Var> {
    let classes = logits_width(tape, logits, "infomax_diversity")?;
    let p = tape.softmax(logits)?;
    let pbar = tape.mean(p, 0)?;
    let h = neg_plogp(tape, pbar, 0)?;
    let ln_c = (classes as f64).ln();
    let h = tape.clamp(h, 0.0, ln_c)?;
    let neg = tape.neg(h)?;
    tape.add_scalar(neg, ln_c)
}

pub fn infomax_diversity_value(logits: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let d = infomax_diversity(&mut tape, l)?;
    tape.value(d).item()
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::contract(format!(
            "ece: {} confidences but {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    if bins == 0 {
        return Err(Error::contract("ece needs at least one bin"));
    }
    if confidences.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::contract(format!("ece: confidence {c} outside [0, 1]")));
        }
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    let total = (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hits[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum();
    Ok(total)
}

/// Max softmax probability and argmax prediction of every row.
pub fn confidences(logits: &Tensor) -> Result<Vec<(f64, usize)>> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    logits_width(&tape, l, "confidences")?;
    let p = tape.softmax(l)?;
    let probs = tape.value(p);
    Ok((0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let k = argmax(row);
            (row[k], k)
        })
        .collect())
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.ndim() != 2 || logits.rows() != labels.len() {
        return Err(Error::shape("accuracy", logits.shape(), &[labels.len()]));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = (0..logits.rows())
        .filter(|&i| argmax(logits.row(i)) == labels[i])
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// ℓ2 norm of the concatenation of the gradients of `params`.
pub fn grad_norm(tape: &Tape, params: &[Var]) -> Result<f64> {
    let grads = params
        .iter()
        .map(|&p| {
            tape.grad(p)
                .cloned()
                .ok_or_else(|| Error::contract("grad_norm: parameter has no gradient"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(grad_norm_of(&grads))
}

pub fn grad_norm_of(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

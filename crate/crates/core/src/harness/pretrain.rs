use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ExperimentConfig;
use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Model, ParamPartition, SgdState, StatsMode};
use crate::objectives::accuracy;
use crate::stream::{derive_seed, make_dataset, SyntheticDataset};

/// Split index of the clean held-out set used to score pretraining.
pub const CLEAN_TEST_SPLIT: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainReport {
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Mean cross-entropy of `logits` against `labels`.
fn cross_entropy(tape: &mut Tape, logits: crate::autograd::Var, labels: &[usize], classes: usize) -> Result<crate::autograd::Var> {
    let mut onehot = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * classes + y] = 1.0;
    }
    let p = tape.softmax(logits)?;
    let logp = tape.log(p, 1e-12)?;
    let t = tape.constant(onehot);
    let picked = tape.mul(logp, t)?;
    let per_row = tape.sum(picked, 1)?;
    let mean = tape.mean(per_row, 0)?;
    tape.neg(mean)
}

pub fn evaluate(model: &Model, data: &SyntheticDataset) -> Result<f64> {
    let logits = model.predict_logits(&data.samples, StatsMode::Running)?;
    accuracy(&logits, &data.labels)
}

/// Trains every parameter with cross-entropy on the clean training split
/// (SGD with momentum, cosine-decayed learning rate). Parameters and running
/// statistics are rounded to `f32` at the end so a saved checkpoint
/// reproduces the reported accuracy exactly.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<(Model, PretrainReport)> {
    let p = &cfg.pretrain;
    let train = make_dataset(&cfg.dataset, 0)?;
    let test = make_dataset(&cfg.dataset, CLEAN_TEST_SPLIT)?;
    let mut model = Model::new(cfg.model.clone(), derive_seed(cfg.seed, 0x696e6974))?;
    let all = ParamPartition::all(&model);
    let mut sgd = SgdState::new(p.lr, p.momentum, &model, &all.adaptable);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7472616e));
    let n = train.labels.len();
    let d = train.samples.cols();
    let classes = cfg.model.classes;
    let steps_per_epoch = n.div_ceil(p.batch_size);
    let total_steps = p.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut final_loss = f64::NAN;
    let mut step = 0;

    for epoch in 0..p.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(p.batch_size) {
            // a trailing batch of one cannot feed batch statistics
            if chunk.len() < 2 {
                continue;
            }
            sgd.lr = p.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
            let mut data = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                data.extend_from_slice(train.samples.row(i));
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let x = Tensor::new(vec![chunk.len(), d], data)?;

            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &x, StatsMode::Batch, &all.adaptable)?;
            let loss = cross_entropy(&mut tape, pass.logits, &labels, classes)?;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = all.adaptable.iter().map(|&id| tape.grad_or_zeros(pass.param(id))).collect();
            sgd.step(&mut model, &all.adaptable, &grads)?;
            for (rs, stats) in model.running_stats_mut().iter_mut().zip(&pass.batch_stats) {
                if let Some((mean, var)) = stats {
                    rs.update(mean, var, chunk.len());
                }
            }
            epoch_loss += tape.value(loss).item()? * chunk.len() as f64;
            step += 1;
        }
        final_loss = epoch_loss / n as f64;
        log::debug!("epoch {epoch}: loss {final_loss:.5}");
    }

    model.round_to_f32();
    let report = PretrainReport {
        seed: cfg.seed,
        epochs: p.epochs,
        final_loss,
        train_accuracy: evaluate(&model, &train)?,
        test_accuracy: evaluate(&model, &test)?,
    };
    log::info!(
        "pretrain seed {}: loss {:.4}, train accuracy {:.4}, clean test accuracy {:.4}",
        cfg.seed,
        report.final_loss,
        report.train_accuracy,
        report.test_accuracy
    );
    if report.test_accuracy < p.min_accuracy {
        return Err(Error::Contract(format!(
            "pretraining reached only {:.2}% clean accuracy (minimum {:.0}%); final loss {:.4}, train accuracy {:.2}%",
            100.0 * report.test_accuracy,
            100.0 * p.min_accuracy,
            report.final_loss,
            100.0 * report.train_accuracy
        )));
    }
    if report.test_accuracy < p.target_accuracy {
        log::warn!(
            "clean accuracy {:.2}% is below the {:.0}% target",
            100.0 * report.test_accuracy,
            100.0 * p.target_accuracy
        );
    }
    Ok((model, report))
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::norm::{apply_norm, NormKind, RunningStats, StatsMode};
use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`Model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Widths of the hidden blocks that precede the feature block.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
    pub norm: NormKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: vec![64, 64],
            feature_dim: 64,
            classes: 10,
            norm: NormKind::Group(8),
        }
    }
}

impl ModelConfig {
    /// Output widths of every Linear → Norm → ReLU block, feature block last.
    pub fn block_widths(&self) -> Vec<usize> {
        let mut w = self.hidden.clone();
        w.push(self.feature_dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::contract("model widths must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::contract("a classifier needs at least two classes"));
        }
        self.block_widths()
            .iter()
            .try_for_each(|&w| self.norm.validate(w))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct BlockIds {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Classifier `h(g(x))`: a stack of Linear → Norm → ReLU blocks forming the
/// feature extractor `g`, followed by a linear head `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    blocks: Vec<BlockIds>,
    head: (ParamId, ParamId),
    running: Vec<RunningStats>,
    /// Lets batch norm run on batch statistics with a single sample; the
    /// output then collapses to the shift parameter.
    pub allow_singleton_batch_stats: bool,
}

/// Tape handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub features: Var,
    pub logits: Var,
    /// One leaf per parameter, indexed by [`ParamId`].
    pub params: Vec<Var>,
    /// Batch mean and biased variance per norm layer (batch norm, batch mode).
    pub batch_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    head: (ParamId, ParamId),
}

impl ForwardPass {
    pub fn head(&self) -> Head {
        Head {
            weight: self.params[self.head.0 .0],
            bias: self.params[self.head.1 .0],
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }
}

/// Classifier head `h(·)` as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub weight: Var,
    pub bias: Var,
}

impl Head {
    /// Maps `z: [rows, D]` to logits `[rows, C]`.
    pub fn apply(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let out = tape.matmul(z, self.weight)?;
        tape.add(out, self.bias)
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut push = |name: String, value: Tensor| {
            params.push(Param { name, value });
            ParamId(params.len() - 1)
        };

        let mut blocks = Vec::new();
        let mut running = Vec::new();
        let mut width_in = config.input_dim;
        for (i, width) in config.block_widths().into_iter().enumerate() {
            let bound = 1.0 / (width_in as f64).sqrt();
            let weight = uniform(&mut rng, &[width_in, width], bound);
            let bias = uniform(&mut rng, &[width], bound);
            blocks.push(BlockIds {
                weight: push(format!("block{i}.linear.weight"), weight),
                bias: push(format!("block{i}.linear.bias"), bias),
                gamma: push(format!("block{i}.norm.weight"), Tensor::full(&[width], 1.0)),
                beta: push(format!("block{i}.norm.bias"), Tensor::zeros(&[width])),
            });
            running.push(RunningStats::new(width));
            width_in = width;
        }
        let bound = 1.0 / (width_in as f64).sqrt();
        let hw = uniform(&mut rng, &[width_in, config.classes], bound);
        let hb = uniform(&mut rng, &[config.classes], bound);
        let head = (push("head.weight".into(), hw), push("head.bias".into(), hb));

        Ok(Self {
            config,
            params,
            blocks,
            head,
            running,
            allow_singleton_batch_stats: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn norm_kind(&self) -> NormKind {
        self.config.norm
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn norm_layer_count(&self) -> usize {
        self.blocks.len()
    }

    /// `(gamma, beta)` of norm layer `i`, counted from the input side.
    pub fn norm_affine(&self, i: usize) -> (ParamId, ParamId) {
        (self.blocks[i].gamma, self.blocks[i].beta)
    }

    /// `(weight, bias)` of the classifier head.
    pub fn head_ids(&self) -> (ParamId, ParamId) {
        self.head
    }

    pub fn linear_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(|b| [b.weight, b.bias]).collect();
        ids.extend([self.head.0, self.head.1]);
        ids
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub(crate) fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: Vec<Param>,
        running: Vec<RunningStats>,
    ) -> Result<Self> {
        config.validate()?;
        let nblocks = config.block_widths().len();
        if params.len() != nblocks * 4 + 2 || running.len() != nblocks {
            return Err(Error::contract("parameter list does not match architecture"));
        }
        let blocks = (0..nblocks)
            .map(|i| BlockIds {
                weight: ParamId(4 * i),
                bias: ParamId(4 * i + 1),
                gamma: ParamId(4 * i + 2),
                beta: ParamId(4 * i + 3),
            })
            .collect();
        let head = (ParamId(4 * nblocks), ParamId(4 * nblocks + 1));
        Ok(Self {
            config,
            params,
            blocks,
            head,
            running,
            allow_singleton_batch_stats: false,
        })
    }

    /// Runs `x: [B, input_dim]` through the model. Parameters listed in
    /// `track` become gradient-tracking leaves; the rest are constants.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: StatsMode,
        track: &[ParamId],
    ) -> Result<ForwardPass> {
        if x.ndim() != 2 || x.shape()[1] != self.config.input_dim || x.shape()[0] == 0 {
            return Err(Error::shape("forward", x.shape(), &[0, self.config.input_dim]));
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.leaf(p.value.clone(), track.contains(&ParamId(i))))
            .collect();
        self.forward_from(tape, x, mode, params)
    }

    /// Like [`Model::forward`], but the listed parameters are read from
    /// existing tape nodes instead of the stored values. Every other
    /// parameter enters as a constant.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: StatsMode,
        substitutes: &[(ParamId, Var)],
    ) -> Result<ForwardPass> {
        let mut params = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let node = match substitutes.iter().find(|(id, _)| id.0 == i) {
                Some(&(_, v)) => {
                    if tape.shape(v) != p.value.shape() {
                        return Err(Error::shape("forward_with", tape.shape(v), p.value.shape()));
                    }
                    v
                }
                None => tape.constant(p.value.clone()),
            };
            params.push(node);
        }
        self.forward_from(tape, x, mode, params)
    }

    fn forward_from(&self, tape: &mut Tape, x: &Tensor, mode: StatsMode, params: Vec<Var>) -> Result<ForwardPass> {
        if x.ndim() != 2 || x.shape()[1] != self.config.input_dim || x.shape()[0] == 0 {
            return Err(Error::shape("forward", x.shape(), &[0, self.config.input_dim]));
        }
        let mut h = tape.constant(x.clone());
        let mut batch_stats = Vec::with_capacity(self.blocks.len());
        for (block, running) in self.blocks.iter().zip(&self.running) {
            let lin = tape.matmul(h, params[block.weight.0])?;
            let lin = tape.add(lin, params[block.bias.0])?;
            let out = apply_norm(
                tape,
                self.config.norm,
                lin,
                params[block.gamma.0],
                params[block.beta.0],
                mode,
                running,
                self.allow_singleton_batch_stats,
            )?;
            batch_stats.push(out.batch_stats);
            h = tape.relu(out.value)?;
        }
        let features = h;
        let logits = tape.matmul(features, params[self.head.0 .0])?;
        let logits = tape.add(logits, params[self.head.1 .0])?;
        Ok(ForwardPass {
            features,
            logits,
            params,
            batch_stats,
            head: self.head,
        })
    }

    /// Logits without recording gradients.
    pub fn predict_logits(&self, x: &Tensor, mode: StatsMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, x, mode, &[])?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Rounds parameters and running statistics to the nearest `f32`, the
    /// precision of the checkpoint format.
    pub fn round_to_f32(&mut self) {
        let round = |v: &mut f64| *v = *v as f32 as f64;
        for p in &mut self.params {
            p.value.data_mut().iter_mut().for_each(round);
        }
        for rs in &mut self.running {
            rs.mean.iter_mut().chain(rs.var.iter_mut()).for_each(round);
        }
    }

    /// Copies of the given parameters.
    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<Tensor> {
        ids.iter().map(|&id| self.param(id).clone()).collect()
    }

    pub fn restore(&mut self, ids: &[ParamId], values: &[Tensor]) {
        for (&id, v) in ids.iter().zip(values) {
            *self.param_mut(id) = v.clone();
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Index of the largest value in `row`; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

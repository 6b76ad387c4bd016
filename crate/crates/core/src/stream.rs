//! Synthetic source data and wild test streams: corruptions with severity
//! levels, online imbalanced label shift, mixed shifts and batching.
//!
//! Stream features are rounded to `f32` when built so that the binary export
//! round-trips exactly.

use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Mixes `tag` into `seed` (splitmix64 finalizer) to derive independent streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: usize,
    pub input_dim: usize,
    /// Norm of every class mean.
    pub separation: f64,
    /// Within-class standard deviation per coordinate.
    pub std: f64,
    pub per_class: usize,
    /// Fixes the class means; splits draw their samples from derived seeds.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            input_dim: 32,
            separation: 4.0,
            std: 1.0,
            per_class: 500,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.separation > 0.0 && self.std > 0.0) {
            return Err(Error::contract("separation and std must be positive"));
        }
        if self.classes < 2 || self.input_dim == 0 || self.per_class == 0 {
            return Err(Error::contract("dataset needs ≥2 classes, a positive dimension and samples"));
        }
        Ok(())
    }

    /// Class means: independent Gaussian directions scaled to `separation`.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut r = rng(self.seed, 0x6d65616e);
        (0..self.classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.input_dim).map(|_| r.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x * self.separation / n).collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Split 0 is the source training set; other splits are held-out draws from
/// the same class-conditional distributions.
pub fn make_dataset(cfg: &DatasetConfig, split: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let means = cfg.class_means();
    let mut r = rng(cfg.seed, 0x73706c6974 ^ split.wrapping_mul(31).wrapping_add(1));
    let noise = Normal::new(0.0, cfg.std).map_err(|e| Error::contract(e.to_string()))?;
    let n = cfg.classes * cfg.per_class;
    let mut data = Vec::with_capacity(n * cfg.input_dim);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..cfg.per_class {
            data.extend(mean.iter().map(|m| (m + noise.sample(&mut r)) as f32 as f64));
            labels.push(class);
        }
    }
    Ok(SyntheticDataset {
        samples: Tensor::new(vec![n, cfg.input_dim], data)?,
        labels,
        classes: cfg.classes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    UniformNoise,
    SaltPepper,
    FeatureDropout,
    AffineShift,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::UniformNoise,
        CorruptionKind::SaltPepper,
        CorruptionKind::FeatureDropout,
        CorruptionKind::AffineShift,
    ];

    /// Intensity per severity 1..=5:
    ///
    /// | kind            | intensity                          | 1    | 2    | 3    | 4    | 5    |
    /// |-----------------|------------------------------------|------|------|------|------|------|
    /// | gaussian_noise  | noise std                          | 0.5  | 1.0  | 1.5  | 2.5  | 4.0  |
    /// | uniform_noise   | half-width (same variance as above)| 0.87 | 1.73 | 2.60 | 4.33 | 6.93 |
    /// | salt_pepper     | fraction of coordinates set to ±6  | 0.05 | 0.10 | 0.20 | 0.35 | 0.50 |
    /// | feature_dropout | fraction of coordinates zeroed     | 0.10 | 0.20 | 0.30 | 0.40 | 0.50 |
    /// | affine_shift    | norm of the shared offset          | 2    | 4    | 6    | 8    | 10   |
    pub fn intensity(&self, severity: u8) -> f64 {
        let table: [f64; 5] = match self {
            CorruptionKind::GaussianNoise => [0.5, 1.0, 1.5, 2.5, 4.0],
            CorruptionKind::UniformNoise => [0.5, 1.0, 1.5, 2.5, 4.0].map(|s: f64| s * 3f64.sqrt()),
            CorruptionKind::SaltPepper => [0.02, 0.05, 0.10, 0.18, 0.28],
            CorruptionKind::FeatureDropout => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::AffineShift => [6.0, 12.0, 18.0, 24.0, 30.0],
        };
        if severity == 0 {
            0.0
        } else {
            table[(severity as usize).min(5) - 1]
        }
    }

    pub fn code(&self) -> u8 {
        *self as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get((code as usize).checked_sub(1)?).copied()
    }

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::UniformNoise => "uniform_noise",
            CorruptionKind::SaltPepper => "salt_pepper",
            CorruptionKind::FeatureDropout => "feature_dropout",
            CorruptionKind::AffineShift => "affine_shift",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown corruption kind {s:?}")))
    }
}

/// Magnitude of the salt-and-pepper values.
pub const SALT_PEPPER_VALUE: f64 = 6.0;

/// Fraction of the affine-shift offset norm added as a multiplicative scale.
const AFFINE_SCALE_PER_UNIT: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    /// 0 (identity) to 5.
    pub severity: u8,
}

/// Applies `c` to every row of `x`. Severity 0 returns `x` unchanged. Random
/// draws depend only on `seed`; the affine offset direction is shared by all
/// rows of one call.
pub fn corrupt(x: &Tensor, c: Corruption, seed: u64) -> Result<Tensor> {
    if c.severity > 5 {
        return Err(Error::contract(format!("severity {} outside 0..=5", c.severity)));
    }
    if x.ndim() != 2 {
        return Err(Error::shape("corrupt", x.shape(), &[0, 0]));
    }
    if c.severity == 0 {
        return Ok(x.clone());
    }
    let level = c.kind.intensity(c.severity);
    let d = x.cols();
    let mut r = rng(seed, 0x636f7272 + c.kind.code() as u64);
    let mut out = x.clone();
    match c.kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0, level).map_err(|e| Error::contract(e.to_string()))?;
            out.data_mut().iter_mut().for_each(|v| *v += n.sample(&mut r));
        }
        CorruptionKind::UniformNoise => {
            out.data_mut().iter_mut().for_each(|v| *v += r.random_range(-level..level));
        }
        CorruptionKind::SaltPepper | CorruptionKind::FeatureDropout => {
            let k = (level * d as f64).round() as usize;
            let mut idx: Vec<usize> = (0..d).collect();
            for row in out.data_mut().chunks_mut(d) {
                let (chosen, _) = idx.partial_shuffle(&mut r, k);
                for &j in chosen.iter() {
                    row[j] = match c.kind {
                        CorruptionKind::FeatureDropout => 0.0,
                        _ if r.random_bool(0.5) => SALT_PEPPER_VALUE,
                        _ => -SALT_PEPPER_VALUE,
                    };
                }
            }
        }
        CorruptionKind::AffineShift => {
            let dir: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let offset: Vec<f64> = dir.iter().map(|v| v * level / n).collect();
            let scale = 1.0 + AFFINE_SCALE_PER_UNIT * level;
            for row in out.data_mut().chunks_mut(d) {
                row.iter_mut().zip(&offset).for_each(|(v, o)| *v = *v * scale + o);
            }
        }
    }
    out.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    Ok(out)
}

/// Ordered test stream. `kinds[i]` is `None` for clean samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub kinds: Vec<Option<CorruptionKind>>,
    pub severities: Vec<u8>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Consecutive non-overlapping batches in stream order; the last one may
    /// be short.
    pub fn batches(&self, batch_size: usize) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        Ok(Batches {
            stream: self,
            batch_size,
            pos: 0,
        })
    }

    /// Appends `other` after `self`.
    pub fn chain(mut self, other: &Stream) -> Result<Stream> {
        if self.is_empty() {
            return Ok(other.clone());
        }
        if other.dim() != self.dim() {
            return Err(Error::shape("chain", self.samples.shape(), other.samples.shape()));
        }
        let n = self.len() + other.len();
        let mut data = self.samples.into_data();
        data.extend_from_slice(other.samples.data());
        self.samples = Tensor::new(vec![n, other.dim()], data)?;
        self.labels.extend_from_slice(&other.labels);
        self.kinds.extend_from_slice(&other.kinds);
        self.severities.extend_from_slice(&other.severities);
        Ok(self)
    }

    fn from_rows(rows: &[usize], pool: &SyntheticDataset, c: Option<Corruption>, seed: u64) -> Result<Stream> {
        let d = pool.samples.cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend_from_slice(pool.samples.row(i));
        }
        let clean = Tensor::new(vec![rows.len(), d], data)?;
        let samples = match c {
            Some(c) => corrupt(&clean, c, seed)?,
            None => clean,
        };
        Ok(Stream {
            samples,
            labels: rows.iter().map(|&i| pool.labels[i]).collect(),
            kinds: vec![c.filter(|c| c.severity > 0).map(|c| c.kind); rows.len()],
            severities: vec![c.map_or(0, |c| c.severity); rows.len()],
        })
    }

    /// Every sample of `pool` in a seeded random order.
    pub fn shuffled(pool: &SyntheticDataset, c: Option<Corruption>, seed: u64) -> Result<Stream> {
        let mut order: Vec<usize> = (0..pool.labels.len()).collect();
        order.shuffle(&mut rng(seed, 0x73687566));
        Self::from_rows(&order, pool, c, seed)
    }
}

pub struct Batches<'a> {
    stream: &'a Stream,
    batch_size: usize,
    pos: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = (Tensor, &'a [usize]);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.stream.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.stream.len());
        let d = self.stream.dim();
        let data = self.stream.samples.data()[self.pos * d..end * d].to_vec();
        let x = Tensor::new(vec![end - self.pos, d], data).expect("contiguous rows");
        let labels = &self.stream.labels[self.pos..end];
        self.pos = end;
        Some((x, labels))
    }
}

/// Online imbalanced label shift: at step `t` the class `class_order[t]` has
/// probability `q_max` and every other class `(1 − q_max)/(C − 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelShiftSchedule {
    pub classes: usize,
    pub q_max: f64,
    /// Samples per step.
    pub m: usize,
    pub class_order: Vec<usize>,
}

impl LabelShiftSchedule {
    /// `ratio = q_max / q_min`; `f64::INFINITY` puts all mass on one class.
    pub fn new(classes: usize, ratio: f64, m: usize, seed: u64) -> Result<Self> {
        if classes < 2 || m == 0 {
            return Err(Error::contract("label shift needs ≥2 classes and ≥1 sample per step"));
        }
        if !(ratio >= 1.0) {
            return Err(Error::contract(format!("imbalance ratio must be ≥ 1, got {ratio}")));
        }
        let q_max = if ratio.is_infinite() {
            1.0
        } else {
            ratio / (classes as f64 - 1.0 + ratio)
        };
        let mut class_order: Vec<usize> = (0..classes).collect();
        class_order.shuffle(&mut rng(seed, 0x6f72646572));
        Ok(Self {
            classes,
            q_max,
            m,
            class_order,
        })
    }

    pub fn steps(&self) -> usize {
        self.classes
    }

    pub fn q_min(&self) -> f64 {
        (1.0 - self.q_max) / (self.classes as f64 - 1.0)
    }

    /// `Q_t` indexed by class id.
    pub fn probabilities(&self, t: usize) -> Vec<f64> {
        let mut q = vec![self.q_min(); self.classes];
        q[self.class_order[t % self.classes]] = self.q_max;
        q
    }
}

/// `T·M` samples; step `t` draws its labels from `Q_t` and takes samples of
/// that class from `pool` without replacement, reusing samples once a class
/// runs out.
pub fn build_label_shift_stream(
    pool: &SyntheticDataset,
    corruption: Option<Corruption>,
    schedule: &LabelShiftSchedule,
    seed: u64,
) -> Result<Stream> {
    if pool.classes != schedule.classes {
        return Err(Error::contract("schedule and dataset disagree on the class count"));
    }
    let mut r = rng(seed, 0x6c61626c);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); pool.classes];
    for (i, &y) in pool.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut r);
    }
    let mut cursor = vec![0usize; pool.classes];
    let mut warned = false;
    let mut rows = Vec::with_capacity(schedule.steps() * schedule.m);
    for t in 0..schedule.steps() {
        let dist = WeightedIndex::new(schedule.probabilities(t)).map_err(|e| Error::contract(e.to_string()))?;
        for _ in 0..schedule.m {
            let y = dist.sample(&mut r);
            let members = &by_class[y];
            if members.is_empty() {
                return Err(Error::contract(format!("class {y} has no samples in the pool")));
            }
            if cursor[y] >= members.len() && !warned {
                log::warn!("class {y} exhausted; sampling with replacement");
                warned = true;
            }
            rows.push(members[cursor[y] % members.len()]);
            cursor[y] += 1;
        }
    }
    Stream::from_rows(&rows, pool, corruption, seed)
}

/// Every sample of `pool` gets a corruption kind drawn uniformly from `kinds`
/// (all at `severity`), and the stream order is shuffled.
pub fn build_mixed_stream(
    pool: &SyntheticDataset,
    kinds: &[CorruptionKind],
    severity: u8,
    seed: u64,
) -> Result<Stream> {
    if kinds.is_empty() {
        return Err(Error::contract("mixed stream needs at least one corruption kind"));
    }
    let mut r = rng(seed, 0x6d6978);
    let n = pool.labels.len();
    let assigned: Vec<usize> = (0..n).map(|_| r.random_range(0..kinds.len())).collect();
    let d = pool.samples.cols();
    let mut corrupted = pool.samples.clone();
    for (k, &kind) in kinds.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&i| assigned[i] == k).collect();
        if rows.is_empty() {
            continue;
        }
        let sub = Stream::from_rows(
            &rows,
            pool,
            Some(Corruption { kind, severity }),
            derive_seed(seed, k as u64),
        )?;
        for (j, &i) in rows.iter().enumerate() {
            corrupted.data_mut()[i * d..(i + 1) * d].copy_from_slice(sub.samples.row(j));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let mut data = Vec::with_capacity(n * d);
    for &i in &order {
        data.extend_from_slice(corrupted.row(i));
    }
    Ok(Stream {
        samples: Tensor::new(vec![n, d], data)?,
        labels: order.iter().map(|&i| pool.labels[i]).collect(),
        kinds: order
            .iter()
            .map(|&i| (severity > 0).then_some(kinds[assigned[i]]))
            .collect(),
        severities: vec![severity; n],
    })
}

pub const STREAM_MAGIC: &[u8; 4] = b"TTAS";
pub const STREAM_VERSION: u32 = 1;

/// Header `"TTAS" | version u32 | count u32 | dim u32`, then per sample
/// `f32 × dim | label u16 | kind u8 (0 = clean) | severity u8`, little-endian.
pub fn write_stream(stream: &Stream, mut w: impl Write) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + stream.len() * (stream.dim() * 4 + 4));
    buf.extend_from_slice(STREAM_MAGIC);
    buf.extend_from_slice(&STREAM_VERSION.to_le_bytes());
    buf.extend_from_slice(&(stream.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(stream.dim() as u32).to_le_bytes());
    for i in 0..stream.len() {
        for &v in stream.samples.row(i) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let label = u16::try_from(stream.labels[i]).map_err(|_| Error::contract("label exceeds u16"))?;
        buf.extend_from_slice(&label.to_le_bytes());
        buf.push(stream.kinds[i].map_or(0, |k| k.code()));
        buf.push(stream.severities[i]);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_stream(mut r: impl Read) -> Result<Stream> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let parse = |offset: usize, detail: &str| Error::Parse {
        offset,
        detail: detail.to_string(),
    };
    let u32_at = |o: usize| -> Result<u32> {
        bytes
            .get(o..o + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| parse(o, "truncated header"))
    };
    if bytes.get(..4) != Some(STREAM_MAGIC) {
        return Err(parse(0, "bad magic"));
    }
    if u32_at(4)? != STREAM_VERSION {
        return Err(parse(4, "unsupported version"));
    }
    let n = u32_at(8)? as usize;
    let d = u32_at(12)? as usize;
    let record = d * 4 + 4;
    let expected = 16 + n * record;
    if bytes.len() != expected {
        return Err(parse(bytes.len().min(expected), "length does not match header"));
    }
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut kinds = Vec::with_capacity(n);
    let mut severities = Vec::with_capacity(n);
    for i in 0..n {
        let base = 16 + i * record;
        for j in 0..d {
            let o = base + 4 * j;
            data.push(f64::from(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap())));
        }
        let o = base + 4 * d;
        labels.push(u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize);
        let code = bytes[o + 2];
        kinds.push(match code {
            0 => None,
            c => Some(CorruptionKind::from_code(c).ok_or_else(|| parse(o + 2, "unknown corruption kind"))?),
        });
        if bytes[o + 3] > 5 {
            return Err(parse(o + 3, "severity outside 0..=5"));
        }
        severities.push(bytes[o + 3]);
    }
    Ok(Stream {
        samples: Tensor::new(vec![n, d], data)?,
        labels,
        kinds,
        severities,
    })
}

//! Byte-level corpus handling, sequence packing and the uptraining loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{is_norm_or_bias, Model, Params};
use crate::numerics::{Scalar, Tensor2};

/// 256 byte values plus BOS and EOS.
pub const BYTE_VOCAB: usize = 258;
pub const BOS: usize = 256;
pub const EOS: usize = 257;

pub fn encode_bytes(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Inverse of [`encode_bytes`]; special tokens are skipped.
pub fn decode_bytes(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    /// One document per non-empty line.
    Lines,
    /// One JSON object per line with a `"text"` string field.
    Jsonl,
}

pub fn parse_corpus(text: &str, format: CorpusFormat) -> Result<Vec<String>> {
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match format {
            CorpusFormat::Lines => docs.push(line.to_string()),
            CorpusFormat::Jsonl => {
                let value: serde_json::Value = serde_json::from_str(line)?;
                let doc = value.get("text").and_then(|t| t.as_str()).ok_or_else(|| {
                    Error::Format(format!(
                        "corpus line {} has no string field \"text\"",
                        i + 1
                    ))
                })?;
                docs.push(doc.to_string());
            }
        }
    }
    Ok(docs)
}

pub fn read_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<String>> {
    parse_corpus(&std::fs::read_to_string(path)?, format)
}

/// Where a packed token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenOrigin {
    Doc { doc: usize, pos: usize },
    Eos { doc: usize },
}

/// Token accounting for one packing run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PackStats {
    pub documents: usize,
    pub input_tokens: usize,
    pub packed_tokens: usize,
    /// Document tokens cut off when a row was completed with a prefix.
    pub truncated: usize,
    /// Document tokens left in the final, incomplete row.
    pub discarded: usize,
}

/// Training rows, each exactly `max_seq` tokens long.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedDataset {
    pub rows: Vec<Vec<usize>>,
    pub max_seq: usize,
    pub seed: u64,
    pub stats: PackStats,
}

impl PackedDataset {
    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    /// `ceil(fraction · rows)` rows drawn without replacement under `seed`.
    pub fn subset(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::config(
                "fraction",
                format!("must lie in (0, 1], got {fraction}"),
            ));
        }
        let keep =
            ((self.rows.len() as f64 * fraction).ceil() as usize).clamp(1, self.rows.len().max(1));
        let mut order: Vec<usize> = (0..self.rows.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(keep);
        order.sort_unstable();
        Ok(Self {
            rows: order.iter().map(|&i| self.rows[i].clone()).collect(),
            max_seq: self.max_seq,
            seed,
            stats: self.stats,
        })
    }

    pub fn max_token(&self) -> Option<usize> {
        self.rows.iter().flatten().copied().max()
    }
}

/// Packs documents into rows of exactly `max_seq` tokens.
///
/// Documents of at least `max_seq` tokens are cut into full rows; the
/// remaining tail, followed by `eos`, joins the pool of short documents in
/// the original document's position. Pool units (`doc ++ [eos]`) fill rows
/// first-fit in order. When no remaining unit fits, the row is completed
/// with a prefix of the next unit and the rest of that unit is dropped. An
/// incomplete final row is discarded.
pub fn pack_documents(docs: &[Vec<usize>], max_seq: usize, eos: usize) -> Result<PackedDataset> {
    pack_traced(docs, max_seq, eos).map(|(data, _)| data)
}

/// [`pack_documents`] that also reports the origin of every token.
pub fn pack_traced(
    docs: &[Vec<usize>],
    max_seq: usize,
    eos: usize,
) -> Result<(PackedDataset, Vec<Vec<TokenOrigin>>)> {
    if max_seq < 2 {
        return Err(Error::config(
            "max_seq",
            "packing needs rows of at least 2 tokens",
        ));
    }
    if docs.iter().all(|d| d.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut pool: Vec<Vec<(usize, TokenOrigin)>> = Vec::new();
    for (doc, tokens) in docs.iter().enumerate() {
        let tagged = |pos: usize| (tokens[pos], TokenOrigin::Doc { doc, pos });
        let full = tokens.len() / max_seq;
        for r in 0..full {
            let row: Vec<_> = (r * max_seq..(r + 1) * max_seq).map(tagged).collect();
            rows.push(row.iter().map(|t| t.0).collect());
            traces.push(row.into_iter().map(|t| t.1).collect());
        }
        let tail = full * max_seq;
        if tail < tokens.len() || full == 0 {
            let mut unit: Vec<_> = (tail..tokens.len()).map(tagged).collect();
            unit.push((eos, TokenOrigin::Eos { doc }));
            pool.push(unit);
        }
    }

    let mut stats = PackStats {
        documents: docs.len(),
        input_tokens: docs.iter().map(Vec::len).sum(),
        ..PackStats::default()
    };
    let mut current: Vec<(usize, TokenOrigin)> = Vec::with_capacity(max_seq);
    let mut next = 0;
    let mut used = vec![false; pool.len()];
    loop {
        while next < pool.len() && used[next] {
            next += 1;
        }
        if next == pool.len() {
            break;
        }
        let space = max_seq - current.len();
        match (next..pool.len()).find(|&i| !used[i] && pool[i].len() <= space) {
            Some(i) => {
                used[i] = true;
                current.extend_from_slice(&pool[i]);
            }
            None => {
                used[next] = true;
                let unit = &pool[next];
                current.extend_from_slice(&unit[..space]);
                stats.truncated += unit[space..]
                    .iter()
                    .filter(|t| matches!(t.1, TokenOrigin::Doc { .. }))
                    .count();
            }
        }
        if current.len() == max_seq {
            rows.push(current.iter().map(|t| t.0).collect());
            traces.push(current.iter().map(|t| t.1).collect());
            current.clear();
        }
    }
    stats.discarded = current
        .iter()
        .filter(|t| matches!(t.1, TokenOrigin::Doc { .. }))
        .count();
    stats.packed_tokens = traces
        .iter()
        .flatten()
        .filter(|t| matches!(t, &&TokenOrigin::Doc { .. }))
        .count();
    Ok((
        PackedDataset {
            rows,
            max_seq,
            seed: 0,
            stats,
        },
        traces,
    ))
}

/// Optimizer and schedule settings.
///
/// The learning rate ramps linearly from 0 to `base_lr` over the first
/// `warmup_ratio · total_steps` steps, then follows a cosine down to
/// `0.1 · base_lr` at `total_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Reshuffle rows every epoch; otherwise rows are read in order.
    pub shuffle: bool,
}

/// Ratio of the final learning rate to `base_lr`.
pub const LR_FLOOR: f64 = 0.1;

impl TrainPlan {
    pub fn new(batch: usize, total_steps: usize, seed: u64) -> Self {
        Self {
            base_lr: 6e-4,
            warmup_ratio: 0.2,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.01,
            batch,
            total_steps,
            seed,
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::config("warmup_ratio", "must lie in (0, 1)"));
        }
        for (field, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(field, "must lie in (0, 1)"));
            }
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config(
                "eps",
                "eps must be positive and weight_decay non-negative",
            ));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate after `step` of `plan.total_steps` steps.
pub fn lr_at(step: usize, plan: &TrainPlan) -> Result<f64> {
    if step > plan.total_steps {
        return Err(Error::Index {
            what: "schedule step",
            index: step,
            bound: plan.total_steps + 1,
        });
    }
    let total = plan.total_steps as f64;
    let warmup = plan.warmup_ratio * total;
    let t = step as f64;
    if t < warmup {
        return Ok(plan.base_lr * t / warmup);
    }
    let progress = (t - warmup) / (total - warmup);
    let floor = LR_FLOOR * plan.base_lr;
    Ok(floor + (plan.base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// AdamW with decoupled weight decay; norm parameters and biases are
/// never decayed.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    first: Params<Tensor2<T>>,
    second: Params<Tensor2<T>>,
    decay: Vec<bool>,
    steps: i32,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &Params<Tensor2<T>>, plan: &TrainPlan) -> Self {
        let zeros = params.map(|_, t| Tensor2::zeros(t.rows(), t.cols()));
        Self {
            first: zeros.clone(),
            second: zeros,
            decay: params
                .named()
                .iter()
                .map(|(n, _)| !is_norm_or_bias(n))
                .collect(),
            steps: 0,
            betas: plan.betas,
            eps: plan.eps,
            weight_decay: plan.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut Params<Tensor2<T>>, grads: &Params<Tensor2<T>>, lr: f64) {
        self.steps += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let shrink = T::of(1.0 - lr * self.weight_decay);
        let (lr_t, eps) = (T::of(lr), T::of(self.eps));
        let (c1, c2) = (T::of(c1), T::of(c2));
        let grads = grads.named();
        let moments = self
            .first
            .iter_mut()
            .into_iter()
            .zip(self.second.iter_mut());
        for (((p, (_, g)), (m, v)), &decay) in params
            .iter_mut()
            .into_iter()
            .zip(grads)
            .zip(moments)
            .zip(&self.decay)
        {
            let moments = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
            for ((x, &gi), (mi, vi)) in p.data_mut().iter_mut().zip(g.data()).zip(moments) {
                *mi = b1t * *mi + ob1 * gi;
                *vi = b2t * *vi + ob2 * gi * gi;
                if decay {
                    *x *= shrink;
                }
                *x -= lr_t * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    /// Loss of the batch before this step's update.
    pub loss: f64,
}

/// Stateful training loop over a packed dataset.
pub struct Trainer<'a, T> {
    model: &'a mut Model<T>,
    data: &'a PackedDataset,
    plan: TrainPlan,
    optimizer: AdamW<T>,
    order: Vec<usize>,
    epoch: Option<usize>,
    step: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(model: &'a mut Model<T>, data: &'a PackedDataset, plan: TrainPlan) -> Result<Self> {
        plan.validate()?;
        check_data(model, data)?;
        let optimizer = AdamW::new(model.params(), &plan);
        Ok(Self {
            model,
            data,
            plan,
            optimizer,
            order: Vec::new(),
            epoch: None,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model<T> {
        self.model
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Row indices of the next batch.
    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.data.rows.len();
        (0..self.plan.batch)
            .map(|i| {
                let global = self.step * self.plan.batch + i;
                let epoch = global / n;
                if self.epoch != Some(epoch) {
                    self.order = (0..n).collect();
                    if self.plan.shuffle {
                        let seed = self
                            .plan
                            .seed
                            .wrapping_add((epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                        self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                    }
                    self.epoch = Some(epoch);
                }
                self.order[global % n]
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<StepLog> {
        if self.step >= self.plan.total_steps {
            return Err(Error::config(
                "total_steps",
                "training plan already finished",
            ));
        }
        let rows: Vec<Vec<usize>> = self
            .next_batch()
            .into_iter()
            .map(|i| self.data.rows[i].clone())
            .collect();
        let step = self.step;
        let (loss, grads) = match self.model.loss_and_grad(&rows) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
            Err(e) => return Err(e),
        };
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let lr = lr_at(step + 1, &self.plan)?;
        self.optimizer.step(self.model.params_mut(), &grads, lr);
        if !self
            .model
            .params()
            .named()
            .iter()
            .all(|(_, t)| t.is_finite())
        {
            return Err(Error::Diverged { step });
        }
        self.step += 1;
        Ok(StepLog { step, lr, loss })
    }
}

fn check_data<T: Scalar>(model: &Model<T>, data: &PackedDataset) -> Result<()> {
    if data.rows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(max) = data.max_token() {
        if max >= model.config().vocab {
            return Err(Error::Index {
                what: "dataset token id",
                index: max,
                bound: model.config().vocab,
            });
        }
    }
    if data.max_seq > model.config().max_seq + 1 {
        return Err(Error::SequenceTooLong {
            length: data.max_seq - 1,
            max_seq: model.config().max_seq,
        });
    }
    Ok(())
}

/// Runs `plan.total_steps` AdamW steps on `model` in place and returns the
/// per-step loss history.
pub fn uptrain<T: Scalar>(
    model: &mut Model<T>,
    data: &PackedDataset,
    plan: &TrainPlan,
) -> Result<Vec<StepLog>> {
    let mut trainer = Trainer::new(model, data, plan.clone())?;
    (0..plan.total_steps).map(|_| trainer.step()).collect()
}

/// Rows evaluated per forward pass in [`eval_loss`].
const EVAL_CHUNK: usize = 8;

/// Mean next-token cross-entropy over every row of `data`.
pub fn eval_loss<T: Scalar>(model: &Model<T>, data: &PackedDataset) -> Result<f64> {
    check_data(model, data)?;
    let mut total = 0.0;
    for chunk in data.rows.chunks(EVAL_CHUNK) {
        total += model.loss(chunk)?.as_f64() * chunk.len() as f64;
    }
    Ok(total / data.rows.len() as f64)
}

pub fn write_loss_csv(mut out: impl Write, history: &[StepLog]) -> Result<()> {
    writeln!(out, "step,lr,loss")?;
    for s in history {
        writeln!(out, "{},{:e},{}", s.step, s.lr, s.loss)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;

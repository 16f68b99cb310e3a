//! Decoder-only transformer assembled from the shared-KV attention layer.
//!
//! Each layer computes `x + MLP(norm2(x + attn(norm1(x))))`: the attention
//! output feeds the MLP input, while the outer residual carries `x` alone.
//! Logits are `unembed(final_norm(x))` with untied embedding matrices.

mod compensate;
mod config;
mod params;

pub use compensate::{compensate_mlp, compensate_mlp_with, Compensation, COMPENSATION_TOLERANCE};
pub use config::ModelConfig;
pub use params::{is_norm_or_bias, LayerParams, Mlp, Norm, Params, Shape};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{attention_forward, AttentionParams};
use crate::error::{Error, Result};
use crate::kvcache::KvCache;
use crate::numerics::tape::AttentionGeometry;
use crate::numerics::{
    add_row_bias, gelu, layer_norm_rows, linear, matmul, Scalar, Tape, Tensor2, Var, LAYER_NORM_EPS,
};

/// Standard deviation of the initial weight distribution.
pub const INIT_STD: f64 = 0.02;

/// Exact parameter count of `cfg`, biases and norms included.
pub fn param_count(cfg: &ModelConfig) -> u64 {
    let d = cfg.d_model as u64;
    let share = &cfg.share;
    let dk = share.head_dim() as u64;
    let heads = share.heads() as u64;
    let q = heads * dk;
    let embeddings = 2 * cfg.vocab as u64 * d;
    let norms = 2 * d * (2 * share.layers() as u64 + 1);
    let query_out = share.layers() as u64 * ((d * q + q) + (q * d + d));
    let kv_head = d * dk + dk;
    let kv = 2 * kv_head * share.total_kv_heads() as u64;
    let mlp: u64 = cfg
        .d_ff
        .iter()
        .map(|&w| (d * w as u64 + w as u64) + (w as u64 * d + d))
        .sum();
    embeddings + norms + query_out + kv + mlp
}

/// Token matrix shape `(batch, seq)`; every row must have the same length.
fn batch_shape(tokens: &[Vec<usize>]) -> Result<(usize, usize)> {
    let b = tokens.len();
    if b == 0 {
        return Err(Error::config("tokens", "empty batch"));
    }
    let s = tokens[0].len();
    if let Some(row) = tokens.iter().find(|r| r.len() != s) {
        return Err(Error::Length {
            op: "token batch rows",
            expected: s,
            actual: row.len(),
        });
    }
    if s == 0 {
        return Err(Error::config("tokens", "empty sequence"));
    }
    Ok((b, s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: Params<Tensor2<T>>,
}

impl<T: Scalar> Model<T> {
    /// Random initialization: weights `N(0, 0.02²)` (output projections
    /// scaled by `1/√(2l)`), zero biases, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = INIT_STD;
        let out_std = std / (2.0 * config.layers() as f64).sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let params = Params::shapes(&config).map(|name, &(r, c)| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            if name.contains("norm") && leaf == "g" {
                Tensor2::from_fn(r, c, |_, _| T::one())
            } else if crate::model::is_norm_or_bias(name) {
                Tensor2::zeros(r, c)
            } else {
                let s = if leaf == "wo" || leaf == "w_out" {
                    out_std
                } else {
                    std
                };
                Tensor2::from_fn(r, c, |_, _| T::of(normal.sample(&mut rng) * s))
            }
        });
        Ok(Self { config, params })
    }

    /// Builds a model from explicit tensors, checking every shape.
    pub fn from_params(config: ModelConfig, params: Params<Tensor2<T>>) -> Result<Self> {
        config.validate()?;
        let expected = Params::shapes(&config);
        let want = expected.named();
        let got = params.named();
        if want.len() != got.len() {
            return Err(Error::Format(format!(
                "expected {} tensors for {}, got {}",
                want.len(),
                config.share,
                got.len()
            )));
        }
        for ((wn, &ws), (gn, gt)) in want.iter().zip(&got) {
            if wn != gn || ws != gt.shape() {
                return Err(Error::Format(format!(
                    "tensor `{gn}` has shape {:?}, expected `{wn}` {ws:?}",
                    gt.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<Tensor2<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<Tensor2<T>> {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, Params<Tensor2<T>>) {
        (self.config, self.params)
    }

    /// Total number of stored parameter values.
    pub fn weight_elements(&self) -> u64 {
        self.params
            .named()
            .iter()
            .map(|(_, t)| t.len() as u64)
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.map(|_, t| t.cast()),
        }
    }

    /// An empty cache sized for this model.
    pub fn new_cache(&self, batch: usize, capacity: usize) -> Result<KvCache<T>> {
        KvCache::new(&self.config.share, batch, capacity)
    }

    /// Logits for every position, rows ordered `(batch, seq)`.
    pub fn forward(&self, tokens: &[Vec<usize>]) -> Result<Tensor2<T>> {
        let (b, s) = batch_shape(tokens)?;
        if s > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                length: s,
                max_seq: self.config.max_seq,
            });
        }
        let mut cache = self.new_cache(b, s)?;
        self.decode_step(tokens, &mut cache)
    }

    /// Processes `tokens` as the next positions after those already in
    /// `cache`, returning their logits and advancing the cache.
    pub fn decode_step(&self, tokens: &[Vec<usize>], cache: &mut KvCache<T>) -> Result<Tensor2<T>> {
        let (b, s_new) = batch_shape(tokens)?;
        if b != cache.batch() {
            return Err(Error::Length {
                op: "decode_step batch",
                expected: cache.batch(),
                actual: b,
            });
        }
        let start = cache.len();
        if start + s_new > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                length: start + s_new,
                max_seq: self.config.max_seq,
            });
        }
        if start + s_new > cache.capacity() {
            return Err(Error::Capacity {
                group: 0,
                length: start,
                requested: s_new,
                capacity: cache.capacity(),
            });
        }
        let d = self.config.d_model;
        let eps = T::of(LAYER_NORM_EPS);
        let mut x = Tensor2::zeros(b * s_new, d);
        for (r, &tok) in tokens.iter().flatten().enumerate() {
            if tok >= self.config.vocab {
                return Err(Error::Index {
                    what: "token id",
                    index: tok,
                    bound: self.config.vocab,
                });
            }
            x.row_slice_mut(r)
                .copy_from_slice(self.params.embed.row_slice(tok));
        }
        for (n, layer) in self.params.layers.iter().enumerate() {
            let h = layer_norm_rows(&x, layer.norm1.gain.data(), layer.norm1.bias.data(), eps)?;
            let attn = attention_forward(&h, &layer.attn, cache, n, &self.config.share, start)?;
            let mut mlp_in = x.clone();
            add_in_place(&mut mlp_in, &attn);
            let h2 = layer_norm_rows(
                &mlp_in,
                layer.norm2.gain.data(),
                layer.norm2.bias.data(),
                eps,
            )?;
            let mut hidden = linear(&h2, &layer.mlp.w_in, &layer.mlp.b_in)?;
            hidden.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
            let mut out = matmul(&hidden, &layer.mlp.w_out)?;
            add_row_bias(&mut out, layer.mlp.b_out.data());
            add_in_place(&mut x, &out);
            x.ensure_finite(&format!("layer.{n} output"))?;
        }
        let h = layer_norm_rows(
            &x,
            self.params.final_norm.gain.data(),
            self.params.final_norm.bias.data(),
            eps,
        )?;
        let logits = matmul(&h, &self.params.unembed)?;
        logits.ensure_finite("logits")?;
        Ok(logits)
    }

    /// Records the full-sequence forward pass on `tape` using `vars` (the
    /// model's parameters as tape leaves) and returns the logits node.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<T>,
        vars: &Params<Var>,
        tokens: &[Vec<usize>],
    ) -> Result<Var> {
        forward_graph(&self.config, tape, vars, tokens)
    }

    /// Mean next-token cross-entropy of `rows`: inputs are `row[..s-1]`,
    /// targets `row[1..]`.
    pub fn loss(&self, rows: &[Vec<usize>]) -> Result<T> {
        let (inputs, targets) = shift_rows(rows)?;
        let logits = self.forward(&inputs)?;
        crate::numerics::cross_entropy(&logits, &targets)
    }

    /// Loss and gradient (canonical tensor order) of the next-token
    /// cross-entropy on `rows`.
    pub fn loss_and_grad(&self, rows: &[Vec<usize>]) -> Result<(T, Params<Tensor2<T>>)> {
        let (inputs, targets) = shift_rows(rows)?;
        let mut tape = Tape::new();
        let vars = self.params.try_map(|name, t| tape.leaf(name, t.clone()))?;
        let logits = forward_graph(&self.config, &mut tape, &vars, &inputs)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let out = vars.try_map(|_, v| -> Result<Tensor2<T>> {
            let shape = tape.value(*v).shape();
            Ok(grads[v.index()]
                .take()
                .unwrap_or_else(|| Tensor2::zeros(shape.0, shape.1)))
        })?;
        Ok((value, out))
    }
}

fn add_in_place<T: Scalar>(x: &mut Tensor2<T>, y: &Tensor2<T>) {
    for (a, &b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

/// Splits rows into next-token inputs and flattened targets.
pub fn shift_rows(rows: &[Vec<usize>]) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let (_, s) = batch_shape(rows)?;
    if s < 2 {
        return Err(Error::config(
            "tokens",
            "rows need at least 2 tokens for next-token loss",
        ));
    }
    let inputs = rows.iter().map(|r| r[..s - 1].to_vec()).collect();
    let targets = rows.iter().flat_map(|r| r[1..].iter().copied()).collect();
    Ok((inputs, targets))
}

/// Full-sequence forward on a tape. Keys and values are produced once per
/// KV-layer group (at its owning layer) and reused by the rest of the group.
pub fn forward_graph<T: Scalar>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    vars: &Params<Var>,
    tokens: &[Vec<usize>],
) -> Result<Var> {
    let (b, s) = batch_shape(tokens)?;
    if s > cfg.max_seq {
        return Err(Error::SequenceTooLong {
            length: s,
            max_seq: cfg.max_seq,
        });
    }
    let share = &cfg.share;
    let eps = T::of(LAYER_NORM_EPS);
    let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
    if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Index {
            what: "token id",
            index: bad,
            bound: cfg.vocab,
        });
    }
    let positions: Vec<usize> = (0..b * s).map(|r| r % s).collect();
    let geom = AttentionGeometry {
        batch: b,
        seq: s,
        heads: share.heads(),
        groups: share.kv_groups(),
        head_dim: share.head_dim(),
    };
    let mut x = tape.embedding(vars.embed, &ids)?;
    let mut shared_kv: Vec<Option<(Var, Var)>> = vec![None; share.kv_layers()];
    for (n, layer) in vars.layers.iter().enumerate() {
        let h = tape.layer_norm(x, layer.norm1.gain, layer.norm1.bias, eps)?;
        let AttentionParams { wq, bq, kv, wo, bo } = &layer.attn;
        let group = share.layer_to_kv_group(n);
        if let Some(kv) = kv {
            let k = tape.linear(h, kv.wk, kv.bk)?;
            let k = tape.rotary(k, share.head_dim(), positions.clone())?;
            let v = tape.linear(h, kv.wv, kv.bv)?;
            shared_kv[group] = Some((k, v));
        }
        let (k, v) = shared_kv[group].ok_or_else(|| {
            Error::CacheState(format!(
                "layer {n} reads KV group {group} before its owner produced it"
            ))
        })?;
        let q = tape.linear(h, *wq, *bq)?;
        let q = tape.rotary(q, share.head_dim(), positions.clone())?;
        let heads = tape.causal_attention(q, k, v, geom)?;
        let attn = tape.linear(heads, *wo, *bo)?;
        let mlp_in = tape.add(x, attn)?;
        let h2 = tape.layer_norm(mlp_in, layer.norm2.gain, layer.norm2.bias, eps)?;
        let hidden = tape.linear(h2, layer.mlp.w_in, layer.mlp.b_in)?;
        let hidden = tape.gelu(hidden)?;
        let out = tape.linear(hidden, layer.mlp.w_out, layer.mlp.b_out)?;
        x = tape.add(x, out)?;
    }
    let h = tape.layer_norm(x, vars.final_norm.gain, vars.final_norm.bias, eps)?;
    tape.matmul(h, vars.unembed)
}

//! Unified key/value sharing scheme and the per-layer attention pass.
//!
//! A [`ShareConfig`] describes `l` layers of `h` query heads, where only `m`
//! layers own key/value projections and each owning layer carries `g` KV
//! heads. Query head `i` reads KV head `i / (h/g)`; layer `n` reads the KV
//! heads of the layer group `n / (l/m)`, which are produced by the first
//! layer of that group and cached. MHA, GQA, MQA and MLKV are all points
//! in this space:
//!
//! | scheme | m   | g       |
//! |--------|-----|---------|
//! | MHA    | l   | h       |
//! | GQA    | l   | 1<g<h   |
//! | MQA    | l   | 1       |
//! | MLKV   | < l | any     |
//!
//! All indices in this module are zero-based.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::KvCache;
use crate::numerics::{dot, linear, rotary_rows, softmax_in_place, Scalar, Tensor2};

/// The `(l, h, m, g, d_k)` sharing scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawShare", into = "RawShare")]
pub struct ShareConfig {
    layers: usize,
    heads: usize,
    kv_layers: usize,
    kv_groups: usize,
    head_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct RawShare {
    l: usize,
    h: usize,
    m: usize,
    g: usize,
    d_k: usize,
}

impl TryFrom<RawShare> for ShareConfig {
    type Error = Error;

    fn try_from(r: RawShare) -> Result<Self> {
        ShareConfig::new(r.l, r.h, r.m, r.g, r.d_k)
    }
}

impl From<ShareConfig> for RawShare {
    fn from(s: ShareConfig) -> Self {
        RawShare {
            l: s.layers,
            h: s.heads,
            m: s.kv_layers,
            g: s.kv_groups,
            d_k: s.head_dim,
        }
    }
}

impl ShareConfig {
    pub fn new(
        layers: usize,
        heads: usize,
        kv_layers: usize,
        kv_groups: usize,
        head_dim: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::config("l", "must be at least 1"));
        }
        if heads == 0 {
            return Err(Error::config("h", "must be at least 1"));
        }
        if kv_layers == 0 || kv_layers > layers || !layers.is_multiple_of(kv_layers) {
            return Err(Error::config(
                "m",
                format!("must divide l = {layers} (got {kv_layers})"),
            ));
        }
        if kv_groups == 0 || kv_groups > heads || !heads.is_multiple_of(kv_groups) {
            return Err(Error::config(
                "g",
                format!("must divide h = {heads} (got {kv_groups})"),
            ));
        }
        if head_dim < 2 || !head_dim.is_multiple_of(2) {
            return Err(Error::config(
                "d_k",
                format!("must be even and at least 2 (got {head_dim})"),
            ));
        }
        Ok(Self {
            layers,
            heads,
            kv_layers,
            kv_groups,
            head_dim,
        })
    }

    /// Multi-head attention: every query head has its own KV head.
    pub fn mha(layers: usize, heads: usize, head_dim: usize) -> Result<Self> {
        Self::new(layers, heads, layers, heads, head_dim)
    }

    /// Multi-query attention: one KV head per layer.
    pub fn mqa(layers: usize, heads: usize, head_dim: usize) -> Result<Self> {
        Self::new(layers, heads, layers, 1, head_dim)
    }

    /// Grouped-query attention with `groups` KV heads per layer.
    pub fn gqa(layers: usize, heads: usize, groups: usize, head_dim: usize) -> Result<Self> {
        Self::new(layers, heads, layers, groups, head_dim)
    }

    /// Same `l`, `h`, `d_k` with a different `(m, g)`.
    pub fn with_sharing(&self, kv_layers: usize, kv_groups: usize) -> Result<Self> {
        Self::new(self.layers, self.heads, kv_layers, kv_groups, self.head_dim)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `m`: layers that own KV heads.
    pub fn kv_layers(&self) -> usize {
        self.kv_layers
    }

    /// `g`: KV heads per owning layer.
    pub fn kv_groups(&self) -> usize {
        self.kv_groups
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// `m·g`.
    pub fn total_kv_heads(&self) -> usize {
        self.kv_layers * self.kv_groups
    }

    /// Query heads sharing one KV head (`h/g`).
    pub fn heads_per_group(&self) -> usize {
        self.heads / self.kv_groups
    }

    /// Layers sharing one set of KV heads (`l/m`).
    pub fn layers_per_group(&self) -> usize {
        self.layers / self.kv_layers
    }

    pub fn query_to_group(&self, head: usize) -> usize {
        head / self.heads_per_group()
    }

    pub fn layer_to_kv_group(&self, layer: usize) -> usize {
        layer / self.layers_per_group()
    }

    pub fn owns_kv(&self, layer: usize) -> bool {
        layer.is_multiple_of(self.layers_per_group())
    }
}

impl fmt::Display for ShareConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "l={} h={} m={} g={} d_k={}",
            self.layers, self.heads, self.kv_layers, self.kv_groups, self.head_dim
        )
    }
}

fn check_divides(what: &'static str, index: usize, count: usize, groups: usize) -> Result<usize> {
    if groups == 0 || !count.is_multiple_of(groups) {
        return Err(Error::config(
            if what == "query head" { "g" } else { "m" },
            format!("{groups} does not divide {count}"),
        ));
    }
    if index >= count {
        return Err(Error::Index {
            what,
            index,
            bound: count,
        });
    }
    Ok(count / groups)
}

/// KV head read by query head `head` (of `heads`) when `heads` are split
/// into `groups` consecutive blocks.
pub fn query_to_group(head: usize, heads: usize, groups: usize) -> Result<usize> {
    let block = check_divides("query head", head, heads, groups)?;
    Ok(head / block)
}

/// KV-layer group read by `layer` (of `layers`) when layers are split into
/// `kv_layers` consecutive blocks.
pub fn layer_to_kv_group(layer: usize, layers: usize, kv_layers: usize) -> Result<usize> {
    let block = check_divides("layer", layer, layers, kv_layers)?;
    Ok(layer / block)
}

/// Whether `layer` is the first of its KV-layer group and therefore holds
/// the group's key/value projections.
pub fn owns_kv(layer: usize, layers: usize, kv_layers: usize) -> Result<bool> {
    let block = check_divides("layer", layer, layers, kv_layers)?;
    Ok(layer.is_multiple_of(block))
}

/// Key/value projections of an owning layer: `g` heads, laid out as
/// consecutive `d_k`-wide column blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct KvParams<P> {
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
}

/// Attention parameters of one layer. `kv` is present exactly on owning
/// layers. Weight matrices are `(in × out)`; query head `i` occupies
/// columns `i·d_k..(i+1)·d_k` of `wq`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P> {
    pub wq: P,
    pub bq: P,
    pub kv: Option<KvParams<P>>,
    pub wo: P,
    pub bo: P,
}

pub type LayerAttentionWeights<T> = AttentionParams<Tensor2<T>>;

/// Attention probabilities recorded by [`attention_forward_traced`]:
/// row `(b·h + i)·s_new + t`, column = key position; masked entries are 0.
pub type AttentionTrace<T> = Tensor2<T>;

/// Runs one layer's attention over `x`, rows ordered `(batch, s_new)`,
/// whose first position is `start_position`.
///
/// An owning layer projects its group's keys and values from `x`, rotates
/// the keys and appends both to the cache. Every layer then reads its
/// group's cached keys/values for positions `0..=start_position + t`.
pub fn attention_forward<T: Scalar>(
    x: &Tensor2<T>,
    weights: &LayerAttentionWeights<T>,
    cache: &mut KvCache<T>,
    layer: usize,
    cfg: &ShareConfig,
    start_position: usize,
) -> Result<Tensor2<T>> {
    attention_impl(x, weights, cache, layer, cfg, start_position, None)
}

/// [`attention_forward`] that also returns the attention probabilities.
pub fn attention_forward_traced<T: Scalar>(
    x: &Tensor2<T>,
    weights: &LayerAttentionWeights<T>,
    cache: &mut KvCache<T>,
    layer: usize,
    cfg: &ShareConfig,
    start_position: usize,
) -> Result<(Tensor2<T>, AttentionTrace<T>)> {
    let mut trace = Vec::new();
    let out = attention_impl(
        x,
        weights,
        cache,
        layer,
        cfg,
        start_position,
        Some(&mut trace),
    )?;
    let rows = cache.batch() * cfg.heads() * (x.rows() / cache.batch());
    let cols = start_position + x.rows() / cache.batch();
    Ok((out, Tensor2::from_vec(rows, cols, trace)?))
}

fn attention_impl<T: Scalar>(
    x: &Tensor2<T>,
    weights: &LayerAttentionWeights<T>,
    cache: &mut KvCache<T>,
    layer: usize,
    cfg: &ShareConfig,
    start_position: usize,
    mut trace: Option<&mut Vec<T>>,
) -> Result<Tensor2<T>> {
    let batch = cache.batch();
    if !x.rows().is_multiple_of(batch) {
        return Err(Error::Length {
            op: "attention_forward rows (must be batch × s_new)",
            expected: batch * (x.rows() / batch + 1),
            actual: x.rows(),
        });
    }
    if cache.kv_layers() != cfg.kv_layers()
        || cache.kv_groups() != cfg.kv_groups()
        || cache.head_dim() != cfg.head_dim()
    {
        return Err(Error::CacheState(format!(
            "cache shaped for m={} g={} d_k={} but layer uses {cfg}",
            cache.kv_layers(),
            cache.kv_groups(),
            cache.head_dim()
        )));
    }
    let s_new = x.rows() / batch;
    let dk = cfg.head_dim();
    let group = layer_to_kv_group(layer, cfg.layers(), cfg.kv_layers())?;
    let owner = cfg.owns_kv(layer);
    let cached = cache.group_len(group)?;
    let positions: Vec<usize> = (0..x.rows()).map(|r| start_position + r % s_new).collect();

    match (&weights.kv, owner) {
        (Some(kv), true) => {
            if cached != start_position {
                return Err(Error::CacheState(format!(
                    "owner layer {layer} expects group {group} at length {start_position}, found {cached}"
                )));
            }
            let mut keys = linear(x, &kv.wk, &kv.bk)?;
            let values = linear(x, &kv.wv, &kv.bv)?;
            rotary_rows(&mut keys, dk, &positions, false);
            cache.append(group, keys.data(), values.data(), s_new)?;
        }
        (None, false) => {
            if cached < start_position + s_new {
                return Err(Error::CacheState(format!(
                    "layer {layer} reads group {group} up to position {} but only {cached} are cached",
                    start_position + s_new
                )));
            }
        }
        (Some(_), false) => {
            return Err(Error::CacheState(format!(
                "layer {layer} does not own KV heads but carries KV weights"
            )));
        }
        (None, true) => {
            return Err(Error::CacheState(format!(
                "owner layer {layer} is missing KV weights"
            )));
        }
    }

    let mut queries = linear(x, &weights.wq, &weights.bq)?;
    if queries.cols() != cfg.heads() * dk {
        return Err(Error::Dimension {
            op: "attention_forward query projection",
            left: queries.shape(),
            right: (x.rows(), cfg.heads() * dk),
        });
    }
    rotary_rows(&mut queries, dk, &positions, false);

    let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
    let total = start_position + s_new;
    let mut heads_out = Tensor2::zeros(x.rows(), cfg.heads() * dk);
    let mut scores = vec![T::zero(); total];
    if let Some(t) = trace.as_deref_mut() {
        t.clear();
        t.resize(batch * cfg.heads() * s_new * total, T::zero());
    }
    for b in 0..batch {
        for i in 0..cfg.heads() {
            let j = cfg.query_to_group(i);
            for t in 0..s_new {
                let row = b * s_new + t;
                let visible = start_position + t + 1;
                let q = &queries.row_slice(row)[i * dk..(i + 1) * dk];
                for (u, sc) in scores[..visible].iter_mut().enumerate() {
                    *sc = dot(q, cache.key(group, b, u, j)) * scale;
                }
                softmax_in_place(&mut scores[..visible]);
                if let Some(tr) = trace.as_deref_mut() {
                    let base = ((b * cfg.heads() + i) * s_new + t) * total;
                    tr[base..base + visible].copy_from_slice(&scores[..visible]);
                }
                let out = &mut heads_out.row_slice_mut(row)[i * dk..(i + 1) * dk];
                for (u, &p) in scores[..visible].iter().enumerate() {
                    for (o, &v) in out.iter_mut().zip(cache.value(group, b, u, j)) {
                        *o += p * v;
                    }
                }
            }
        }
    }
    linear(&heads_out, &weights.wo, &weights.bo)
}

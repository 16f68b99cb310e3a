//! Checkpoint storage and KV-head merging.
//!
//! A checkpoint file is the magic `MLKVCKPT`, a little-endian `u32`
//! manifest length, a JSON manifest `{config, tensors: [{name, shape,
//! offset}]}` and a blob of little-endian `f32` values. Offsets are in bytes
//! from the start of the blob.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::ShareConfig;
use crate::error::{Error, Result};
use crate::model::{compensate_mlp_with, Model, ModelConfig, Params, Shape, INIT_STD};
use crate::numerics::{Scalar, Tensor2};

pub const MAGIC: &[u8; 8] = b"MLKVCKPT";

/// Seed for the input weights of MLP units added by compensation.
pub const WIDEN_SEED: u64 = 0x6d6c_6b76;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Named `f32` tensors plus the config that describes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    blob: Vec<f32>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    /// Packs tensors given in canonical order for `config`.
    fn assemble(config: ModelConfig, named: Vec<(String, Tensor2<f32>)>) -> Result<Self> {
        let mut tensors = Vec::with_capacity(named.len());
        let mut blob = Vec::new();
        for (name, t) in named {
            tensors.push(TensorEntry {
                name,
                shape: [t.rows(), t.cols()],
                offset: blob.len() * 4,
            });
            blob.extend_from_slice(t.data());
        }
        Self::from_parts(config, tensors, blob)
    }

    /// Validates a manifest against its blob and config.
    pub fn from_parts(
        config: ModelConfig,
        tensors: Vec<TensorEntry>,
        blob: Vec<f32>,
    ) -> Result<Self> {
        config.validate()?;
        let expected: HashMap<String, Shape> = Params::shapes(&config)
            .named()
            .into_iter()
            .map(|(n, &s)| (n, s))
            .collect();
        let mut index = HashMap::new();
        let mut spans = Vec::with_capacity(tensors.len());
        for (i, e) in tensors.iter().enumerate() {
            let Some(&(r, c)) = expected.get(&e.name) else {
                return Err(Error::Format(format!("unexpected tensor `{}`", e.name)));
            };
            if [r, c] != e.shape {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {:?}, config requires [{r}, {c}]",
                    e.name, e.shape
                )));
            }
            if index.insert(e.name.clone(), i).is_some() {
                return Err(Error::Format(format!("tensor `{}` appears twice", e.name)));
            }
            if e.offset % 4 != 0 {
                return Err(Error::Format(format!(
                    "tensor `{}` offset {} is not 4-byte aligned",
                    e.name, e.offset
                )));
            }
            spans.push((e.offset / 4, e.offset / 4 + e.len(), i));
        }
        if let Some(missing) = expected.keys().find(|n| !index.contains_key(*n)) {
            return Err(Error::Format(format!("missing tensor `{missing}`")));
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[0].1 > pair[1].0 {
                return Err(Error::Format(format!(
                    "tensors `{}` and `{}` overlap",
                    tensors[pair[0].2].name, tensors[pair[1].2].name
                )));
            }
        }
        let total: usize = tensors.iter().map(TensorEntry::len).sum();
        if blob.len() != total || spans.last().is_some_and(|s| s.1 > blob.len()) {
            return Err(Error::Format(format!(
                "blob holds {} bytes, tensors need {}",
                blob.len() * 4,
                total * 4
            )));
        }
        Ok(Self {
            config,
            tensors,
            blob,
            index,
        })
    }

    pub fn from_model<T: Scalar>(model: &Model<T>) -> Self {
        let named = model
            .params()
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<f32>()))
            .collect();
        Self::assemble(model.config().clone(), named).expect("model tensors match their config")
    }

    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let params = Params::shapes(&self.config)
            .try_map(|name, _| -> Result<Tensor2<T>> { Ok(self.tensor(name)?.cast()) })?;
        Model::from_params(self.config.clone(), params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.tensors
    }

    pub fn blob(&self) -> &[f32] {
        &self.blob
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Raw values of a tensor.
    pub fn values(&self, name: &str) -> Result<&[f32]> {
        let e = self
            .index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Format(format!("no tensor `{name}`")))?;
        Ok(&self.blob[e.offset / 4..e.offset / 4 + e.len()])
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor2<f32>> {
        let e = &self.tensors[*self
            .index
            .get(name)
            .ok_or_else(|| Error::Format(format!("no tensor `{name}`")))?];
        Tensor2::from_vec(e.shape[0], e.shape[1], self.values(name)?.to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&Manifest {
            config: self.config.clone(),
            tensors: self.tensors.clone(),
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(12 + manifest.len() + self.blob.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for v in &self.blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing MLKVCKPT magic".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < len {
            return Err(Error::Format(format!(
                "manifest length {len} exceeds file size"
            )));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..len])?;
        let raw = &body[len..];
        if !raw.len().is_multiple_of(4) {
            return Err(Error::Format(format!(
                "blob length {} is not a multiple of 4",
                raw.len()
            )));
        }
        let blob = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::from_parts(manifest.config, manifest.tensors, blob)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Whether `from` can be coarsened into `to`.
pub fn refinable(from: &ShareConfig, to: &ShareConfig) -> bool {
    from.layers() == to.layers()
        && from.heads() == to.heads()
        && from.head_dim() == to.head_dim()
        && from.kv_layers().is_multiple_of(to.kv_layers())
        && from.kv_groups().is_multiple_of(to.kv_groups())
}

/// Converts `src` to the `target` sharing scheme.
///
/// Each target KV head is the element-wise mean of the source KV heads it
/// absorbs: all heads of its in-layer group, across every layer of its
/// KV-layer group. Means accumulate in `f64` in layer-major, head-minor
/// order and are rounded once. Every other tensor is copied unchanged,
/// except that MLP widths are recomputed by compensation; added units get
/// random input weights and zero output weights, so the function computed
/// by the MLP is unchanged.
pub fn merge_kv(src: &Checkpoint, target: ShareConfig) -> Result<Checkpoint> {
    let from = src.config.share;
    if !refinable(&from, &target) {
        return Err(Error::NotRefinable {
            from: from.to_string(),
            to: target.to_string(),
        });
    }
    let config = if from == target {
        src.config.clone()
    } else {
        compensate_mlp_with(&src.config, target, src.config.d_model, None)?.config
    };
    let layer_block = from.kv_layers() / target.kv_layers();
    let head_block = from.kv_groups() / target.kv_groups();
    let dk = from.head_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(WIDEN_SEED);
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");

    let shapes = Params::shapes(&config);
    let mut named = Vec::with_capacity(shapes.count());
    for (name, &(rows, cols)) in shapes.named() {
        let (layer, leaf) = parse_name(&name);
        let tensor = match (layer, leaf) {
            (Some(n), "wk" | "bk" | "wv" | "bv") => {
                let k = target.layer_to_kv_group(n);
                let src_layers: Vec<usize> = (0..from.layers())
                    .filter(|&s| from.owns_kv(s) && from.layer_to_kv_group(s) / layer_block == k)
                    .collect();
                merge_heads(
                    src,
                    &src_layers,
                    leaf,
                    rows,
                    target.kv_groups(),
                    head_block,
                    dk,
                )?
            }
            (Some(_), "w_in" | "b_in" | "w_out") => {
                let old = src.tensor(&name)?;
                if old.shape() == (rows, cols) {
                    old
                } else {
                    resize_mlp(&old, leaf, rows, cols, &mut rng, &normal)
                }
            }
            _ => src.tensor(&name)?,
        };
        named.push((name, tensor));
    }
    Checkpoint::assemble(config, named)
}

/// Merges the KV tensor `leaf` of `layers` into `groups` heads of `dk`
/// columns each, averaging blocks of `head_block` adjacent source heads.
fn merge_heads(
    src: &Checkpoint,
    layers: &[usize],
    leaf: &str,
    rows: usize,
    groups: usize,
    head_block: usize,
    dk: usize,
) -> Result<Tensor2<f32>> {
    let sources: Vec<Tensor2<f32>> = layers
        .iter()
        .map(|n| src.tensor(&format!("layer.{n}.attn.{leaf}")))
        .collect::<Result<_>>()?;
    let count = (layers.len() * head_block) as f64;
    let mut out = Tensor2::zeros(rows, groups * dk);
    for r in 0..rows {
        for j in 0..groups {
            for c in 0..dk {
                let mut acc = 0.0f64;
                for t in &sources {
                    for i in j * head_block..(j + 1) * head_block {
                        acc += t.get(r, i * dk + c) as f64;
                    }
                }
                out.set(r, j * dk + c, (acc / count) as f32);
            }
        }
    }
    Ok(out)
}

fn resize_mlp(
    old: &Tensor2<f32>,
    leaf: &str,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
    normal: &Normal<f64>,
) -> Tensor2<f32> {
    let mut out = Tensor2::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let v = if r < old.rows() && c < old.cols() {
                old.get(r, c)
            } else if leaf == "w_in" {
                normal.sample(rng) as f32
            } else {
                0.0
            };
            out.set(r, c, v);
        }
    }
    out
}

fn parse_name(name: &str) -> (Option<usize>, &str) {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let layer = name
        .strip_prefix("layer.")
        .and_then(|rest| rest.split('.').next())
        .and_then(|n| n.parse().ok());
    (layer, leaf)
}

/// Runs `merge_kv` onto the source's own scheme and checks that the result
/// is bit-identical to the input.
pub fn convert_identity_check(src: &Checkpoint) -> Result<Checkpoint> {
    let out = merge_kv(src, src.config.share)?;
    if out.config != src.config || out.tensors != src.tensors {
        return Err(Error::Format(
            "identity conversion changed the manifest".into(),
        ));
    }
    if let Some(i) = out
        .blob
        .iter()
        .zip(&src.blob)
        .position(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err(Error::Format(format!(
            "identity conversion changed blob element {i}"
        )));
    }
    Ok(out)
}

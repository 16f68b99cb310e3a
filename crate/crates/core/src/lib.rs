//! Decoder-only transformer engine with unified key/value sharing.
//!
//! Attention is parameterized by `(l, h, m, g, d_k)`: `l` layers of `h`
//! query heads, of which `m` layers own `g` key/value heads each. Multi-head,
//! grouped-query, multi-query and multi-layer KV sharing are all instances
//! of the same code path. The crate also provides checkpoint conversion by
//! KV-head averaging, small-scale uptraining, cached autoregressive decoding
//! and a memory/throughput benchmark harness.

pub mod attention;
pub mod bench;
pub mod convert;
pub mod error;
pub mod kvcache;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use attention::{
    attention_forward, layer_to_kv_group, owns_kv, query_to_group, LayerAttentionWeights,
    ShareConfig,
};
pub use bench::{
    bench_generate, memory_model, sweep, BenchReport, BenchRow, GenerateReport, MemoryFootprint,
    SweepOptions, Timing,
};
pub use convert::{convert_identity_check, merge_kv, Checkpoint};
pub use error::{Error, Result};
pub use kvcache::{cache_bytes, cache_elements, reduction_ratio, KvCache, Ratio};
pub use model::{compensate_mlp, param_count, Model, ModelConfig};
pub use numerics::{Scalar, Tensor2};
pub use trainer::{eval_loss, lr_at, pack_documents, uptrain, PackedDataset, StepLog, TrainPlan};

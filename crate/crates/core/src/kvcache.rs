//! Shared key/value cache with exact element accounting.
//!
//! One buffer pair exists per KV-layer group (`m` of them), each holding
//! `g` key/value heads per position. The cache therefore stores
//! `2·b·s·m·g·d_k` elements, which specializes to the per-layer schemes when
//! `m = l`.

use std::fmt;

use crate::attention::ShareConfig;
use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Number of cached elements: `2·b·s·m·g·d_k`.
pub fn cache_elements(batch: u64, seq: u64, kv_layers: u64, kv_groups: u64, head_dim: u64) -> u64 {
    2 * batch * seq * kv_layers * kv_groups * head_dim
}

/// Byte size of `elements` values at the given width (2, 4 or 8 bytes).
pub fn cache_bytes(elements: u64, bytes_per_element: u64) -> Result<u64> {
    match bytes_per_element {
        2 | 4 | 8 => Ok(elements * bytes_per_element),
        other => Err(Error::config(
            "bytes_per_element",
            format!("unsupported element width {other}; expected 2, 4 or 8"),
        )),
    }
}

/// Exact non-negative rational in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ratio {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Ratio {
    /// Panics if `den` is zero.
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den != 0, "zero denominator");
        let g = gcd(num, den).max(1);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    pub fn numer(&self) -> u64 {
        self.num
    }

    pub fn denom(&self) -> u64 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::ops::Mul for Ratio {
    type Output = Ratio;

    fn mul(self, rhs: Ratio) -> Ratio {
        Ratio::new(self.num * rhs.num, self.den * rhs.den)
    }
}

impl std::ops::Div for Ratio {
    type Output = Ratio;

    fn div(self, rhs: Ratio) -> Ratio {
        Ratio::new(self.num * rhs.den, self.den * rhs.num)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Cache size of `cfg` relative to full multi-head attention with the same
/// `l`, `h`: `(m·g)/(l·h)`.
pub fn reduction_ratio(cfg: &ShareConfig) -> Ratio {
    Ratio::new(
        cfg.total_kv_heads() as u64,
        (cfg.layers() * cfg.heads()) as u64,
    )
}

#[derive(Clone, Debug)]
struct GroupBuffer<T> {
    keys: Vec<T>,
    values: Vec<T>,
    len: usize,
}

/// Preallocated key/value store, one buffer pair per KV-layer group.
///
/// Layout of each buffer is `(batch, capacity, g, d_k)`. Keys are stored
/// after rotary has been applied.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    batch: usize,
    capacity: usize,
    kv_groups: usize,
    head_dim: usize,
    groups: Vec<GroupBuffer<T>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(cfg: &ShareConfig, batch: usize, capacity: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if capacity == 0 {
            return Err(Error::config("capacity", "must be at least 1"));
        }
        let per_buffer = batch * capacity * cfg.kv_groups() * cfg.head_dim();
        let groups = (0..cfg.kv_layers())
            .map(|_| GroupBuffer {
                keys: vec![T::zero(); per_buffer],
                values: vec![T::zero(); per_buffer],
                len: 0,
            })
            .collect();
        Ok(Self {
            batch,
            capacity,
            kv_groups: cfg.kv_groups(),
            head_dim: cfg.head_dim(),
            groups,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn kv_groups(&self) -> usize {
        self.kv_groups
    }

    /// Number of KV-layer groups (`m`).
    pub fn kv_layers(&self) -> usize {
        self.groups.len()
    }

    /// Positions cached in the first group. All groups agree between
    /// complete forward steps.
    pub fn len(&self) -> usize {
        self.groups[0].len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group_len(&self, group: usize) -> Result<usize> {
        self.group(group).map(|g| g.len)
    }

    fn group(&self, group: usize) -> Result<&GroupBuffer<T>> {
        self.groups.get(group).ok_or(Error::Index {
            what: "KV group",
            index: group,
            bound: self.groups.len(),
        })
    }

    /// Elements currently holding cached activations.
    pub fn stored_elements(&self) -> u64 {
        let per_position = (2 * self.batch * self.kv_groups * self.head_dim) as u64;
        self.groups
            .iter()
            .map(|g| g.len as u64 * per_position)
            .sum()
    }

    /// Elements reserved by the preallocated buffers.
    pub fn allocated_elements(&self) -> u64 {
        self.groups
            .iter()
            .map(|g| (g.keys.len() + g.values.len()) as u64)
            .sum()
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.allocated_elements() * T::BYTES as u64
    }

    /// Appends `new_positions` positions to `group`. `keys` and `values`
    /// are laid out `(batch, new_positions, g, d_k)`.
    pub fn append(
        &mut self,
        group: usize,
        keys: &[T],
        values: &[T],
        new_positions: usize,
    ) -> Result<()> {
        let expected = self.batch * new_positions * self.kv_groups * self.head_dim;
        for (len, what) in [(keys.len(), "keys"), (values.len(), "values")] {
            if len != expected {
                return Err(Error::Length {
                    op: if what == "keys" {
                        "KvCache::append keys"
                    } else {
                        "KvCache::append values"
                    },
                    expected,
                    actual: len,
                });
            }
        }
        let (capacity, batch) = (self.capacity, self.batch);
        let row = self.kv_groups * self.head_dim;
        let num_groups = self.groups.len();
        let buf = self.groups.get_mut(group).ok_or(Error::Index {
            what: "KV group",
            index: group,
            bound: num_groups,
        })?;
        if buf.len + new_positions > capacity {
            return Err(Error::Capacity {
                group,
                length: buf.len,
                requested: new_positions,
                capacity,
            });
        }
        let chunk = new_positions * row;
        for b in 0..batch {
            let dst = (b * capacity + buf.len) * row;
            buf.keys[dst..dst + chunk].copy_from_slice(&keys[b * chunk..(b + 1) * chunk]);
            buf.values[dst..dst + chunk].copy_from_slice(&values[b * chunk..(b + 1) * chunk]);
        }
        buf.len += new_positions;
        Ok(())
    }

    /// Key head `kv_head` of sequence `batch` at `position`.
    pub fn key(&self, group: usize, batch: usize, position: usize, kv_head: usize) -> &[T] {
        let off = self.offset(batch, position, kv_head);
        &self.groups[group].keys[off..off + self.head_dim]
    }

    pub fn value(&self, group: usize, batch: usize, position: usize, kv_head: usize) -> &[T] {
        let off = self.offset(batch, position, kv_head);
        &self.groups[group].values[off..off + self.head_dim]
    }

    fn offset(&self, batch: usize, position: usize, kv_head: usize) -> usize {
        ((batch * self.capacity + position) * self.kv_groups + kv_head) * self.head_dim
    }

    /// Forgets all cached positions without releasing the buffers.
    pub fn clear(&mut self) {
        for g in &mut self.groups {
            g.len = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn share(l: usize, h: usize, m: usize, g: usize, dk: usize) -> ShareConfig {
        ShareConfig::new(l, h, m, g, dk).unwrap()
    }

    #[test]
    fn new_cache_is_empty() {
        let c = KvCache::<f32>::new(&share(4, 4, 2, 2, 8), 3, 10).unwrap();
        assert_eq!(c.len(), 0);
        assert_eq!(c.stored_elements(), 0);
        assert!(c.is_empty());
    }

    #[test]
    fn allocation_matches_formula() {
        let cfg = share(4, 4, 4, 1, 8);
        let c = KvCache::<f32>::new(&cfg, 2, 16).unwrap();
        assert_eq!(c.allocated_elements(), 2048);
        assert_eq!(c.allocated_bytes(), 2048 * 4);
    }

    #[test]
    fn allocation_matches_per_group_enumeration() {
        for (l, h, m, g, dk, b, cap) in [
            (6, 6, 3, 2, 4, 2, 7),
            (12, 12, 1, 1, 64, 5, 9),
            (4, 8, 2, 8, 2, 1, 1),
        ] {
            let cfg = share(l, h, m, g, dk);
            let c = KvCache::<f32>::new(&cfg, b, cap).unwrap();
            let oracle: u64 = (0..m).map(|_| (2 * b * cap * g * dk) as u64).sum();
            assert_eq!(c.allocated_elements(), oracle);
        }
    }

    #[test]
    fn zero_batch_or_capacity_rejected() {
        let cfg = share(2, 2, 1, 1, 2);
        assert!(KvCache::<f32>::new(&cfg, 0, 4).is_err());
        assert!(KvCache::<f32>::new(&cfg, 1, 0).is_err());
    }

    #[test]
    fn append_grows_and_preserves_prefix() {
        let cfg = share(2, 2, 1, 1, 2);
        let mut c = KvCache::<f32>::new(&cfg, 1, 10).unwrap();
        let first: Vec<f32> = (0..6).map(|v| v as f32).collect();
        c.append(0, &first, &first, 3).unwrap();
        assert_eq!(c.len(), 3);
        let second: Vec<f32> = (0..10).map(|v| 100.0 + v as f32).collect();
        c.append(0, &second, &second, 5).unwrap();
        assert_eq!(c.len(), 8);
        for p in 0..3 {
            assert_eq!(c.key(0, 0, p, 0), &first[p * 2..p * 2 + 2]);
        }
        assert_eq!(c.value(0, 0, 3, 0), &[100.0, 101.0]);
    }

    #[test]
    fn append_single_position() {
        let cfg = share(1, 1, 1, 1, 2);
        let mut c = KvCache::<f32>::new(&cfg, 1, 4).unwrap();
        c.append(0, &[1.0, 2.0], &[3.0, 4.0], 1).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn overflow_is_capacity_error() {
        let cfg = share(1, 1, 1, 1, 2);
        let mut c = KvCache::<f32>::new(&cfg, 1, 2).unwrap();
        c.append(0, &[0.0; 4], &[0.0; 4], 2).unwrap();
        let err = c.append(0, &[0.0; 2], &[0.0; 2], 1).unwrap_err();
        assert!(matches!(
            err,
            Error::Capacity {
                capacity: 2,
                length: 2,
                ..
            }
        ));
    }

    #[test]
    fn cache_elements_examples() {
        assert_eq!(cache_elements(1, 4, 2, 1, 8), 128);
        // MQA vs MHA on h = 96.
        let mha = cache_elements(8, 1024, 96, 96, 128);
        let mqa = cache_elements(8, 1024, 96, 1, 128);
        assert_eq!(Ratio::new(mqa, mha), Ratio::new(1, 96));
        let mlkv = cache_elements(8, 1024, 24, 1, 128);
        assert_eq!(Ratio::new(mlkv, mqa), Ratio::new(24, 96));
    }

    #[test]
    fn cache_bytes_widths() {
        assert_eq!(cache_bytes(128, 4).unwrap(), 512);
        assert_eq!(cache_bytes(0, 2).unwrap(), 0);
        assert!(cache_bytes(10, 3).is_err());
    }

    #[test]
    fn reduction_ratio_examples() {
        assert_eq!(
            reduction_ratio(&share(12, 12, 12, 12, 64)),
            Ratio::new(1, 1)
        );
        assert_eq!(
            reduction_ratio(&share(12, 12, 12, 1, 64)),
            Ratio::new(1, 12)
        );
        let mlkv2 = reduction_ratio(&share(12, 12, 2, 1, 64));
        assert_eq!(mlkv2, Ratio::new(1, 72));
        let mqa = reduction_ratio(&share(12, 12, 12, 1, 64));
        assert_eq!(mqa / mlkv2, Ratio::new(6, 1));
    }

    proptest! {
        #[test]
        fn stored_elements_track_appends(
            m in 1usize..4, g in 1usize..3, b in 1usize..3,
            steps in proptest::collection::vec(1usize..4, 0..6),
        ) {
            let dk = 2;
            let cfg = share(m * 2, g * 2, m, g, dk);
            let mut c = KvCache::<f32>::new(&cfg, b, 32).unwrap();
            let mut len = 0;
            for s in steps {
                let data = vec![1.0f32; b * s * g * dk];
                for k in 0..m {
                    c.append(k, &data, &data, s).unwrap();
                }
                len += s;
                prop_assert_eq!(c.stored_elements(), cache_elements(b as u64, len as u64, m as u64, g as u64, dk as u64));
            }
        }

        #[test]
        fn append_never_mutates_prefix(
            first in proptest::collection::vec(-1e3f32..1e3, 8),
            second in proptest::collection::vec(-1e3f32..1e3, 8),
        ) {
            let cfg = share(1, 2, 1, 2, 2);
            let mut c = KvCache::<f32>::new(&cfg, 1, 8).unwrap();
            c.append(0, &first, &first, 2).unwrap();
            let snapshot = |c: &KvCache<f32>| -> Vec<u32> {
                (0..2)
                    .flat_map(|p| (0..2).map(move |j| (p, j)))
                    .flat_map(|(p, j)| {
                        let mut bits: Vec<u32> = c.key(0, 0, p, j).iter().map(|v| v.to_bits()).collect();
                        bits.extend(c.value(0, 0, p, j).iter().map(|v| v.to_bits()));
                        bits
                    })
                    .collect()
            };
            let before = snapshot(&c);
            c.append(0, &second, &second, 2).unwrap();
            let after = snapshot(&c);
            prop_assert_eq!(before, after);
        }

        #[test]
        fn cache_elements_linear_in_each_argument(
            b in 1u64..50, s in 1u64..50, m in 1u64..10, g in 1u64..10, dk in 1u64..20, k in 1u64..5,
        ) {
            let base = cache_elements(b, s, m, g, dk);
            prop_assert_eq!(cache_elements(k * b, s, m, g, dk), k * base);
            prop_assert_eq!(cache_elements(b, k * s, m, g, dk), k * base);
            prop_assert_eq!(cache_elements(b, s, k * m, g, dk), k * base);
            prop_assert_eq!(cache_elements(b, s, m, k * g, dk), k * base);
            prop_assert_eq!(cache_elements(b, s, m, g, k * dk), k * base);
            prop_assert!(cache_elements(b + 1, s, m, g, dk) > base);
        }
    }
}

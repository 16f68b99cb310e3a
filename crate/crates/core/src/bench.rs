//! Inference memory model and decode throughput measurement.
//!
//! Memory is analytic: weights plus a KV cache sized for the full
//! sequence. Activation scratch is not counted.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kvcache::{cache_bytes, cache_elements};
use crate::model::{param_count, Model, ModelConfig};
use crate::numerics::Scalar;

pub const DEFAULT_PREFILL: usize = 2000;
pub const DEFAULT_GEN: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryFootprint {
    pub weights: u64,
    pub cache: u64,
    pub total: u64,
}

/// Weights and cache bytes for batch `batch` at sequence length `seq`.
pub fn memory_model(
    cfg: &ModelConfig,
    batch: u64,
    seq: u64,
    bytes_per_element: u64,
) -> Result<MemoryFootprint> {
    let share = &cfg.share;
    let weights = param_count(cfg) * bytes_per_element;
    let elements = cache_elements(
        batch,
        seq,
        share.kv_layers() as u64,
        share.kv_groups() as u64,
        share.head_dim() as u64,
    );
    let cache = cache_bytes(elements, bytes_per_element)?;
    Ok(MemoryFootprint {
        weights,
        cache,
        total: weights + cache,
    })
}

/// Result of one timed generation run.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerateReport {
    pub batch: usize,
    /// Decode steps inside the timed region.
    pub timed_steps: usize,
    pub final_length: usize,
    pub elapsed: Duration,
    pub tokens_per_sec: f64,
    pub peak_cache_bytes: u64,
    /// Bytes actually held by the cache buffers.
    pub allocated_cache_bytes: u64,
    /// Greedy tokens generated for each sequence.
    pub tokens: Vec<Vec<usize>>,
}

/// Fills a cache with `prefill` positions of random keys and values, then
/// times `gen` greedy decode steps. The clock starts after the prefill.
pub fn bench_generate<T: Scalar>(
    model: &Model<T>,
    batch: usize,
    prefill: usize,
    gen: usize,
    seed: u64,
) -> Result<GenerateReport> {
    let cfg = model.config();
    let length = prefill + gen;
    if length > cfg.max_seq {
        return Err(Error::SequenceTooLong {
            length,
            max_seq: cfg.max_seq,
        });
    }
    if gen == 0 {
        return Err(Error::config("gen", "must be at least 1"));
    }
    let share = &cfg.share;
    let mut cache = model.new_cache(batch, length)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = batch * prefill * share.kv_groups() * share.head_dim();
    for group in 0..share.kv_layers() {
        let keys: Vec<T> = (0..span)
            .map(|_| T::of(rng.random_range(-1.0..1.0)))
            .collect();
        let values: Vec<T> = (0..span)
            .map(|_| T::of(rng.random_range(-1.0..1.0)))
            .collect();
        cache.append(group, &keys, &values, prefill)?;
    }

    let mut current: Vec<Vec<usize>> = (0..batch).map(|_| vec![0]).collect();
    let mut tokens = vec![Vec::with_capacity(gen); batch];
    let mut timed_steps = 0;
    let start = Instant::now();
    for _ in 0..gen {
        let logits = model.decode_step(&current, &mut cache)?;
        timed_steps += 1;
        for (b, next) in current.iter_mut().enumerate() {
            let row = logits.row_slice(b);
            let best = (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best });
            next[0] = best;
            tokens[b].push(best);
        }
    }
    let elapsed = start.elapsed();
    let peak = cache_bytes(
        cache_elements(
            batch as u64,
            length as u64,
            share.kv_layers() as u64,
            share.kv_groups() as u64,
            share.head_dim() as u64,
        ),
        T::BYTES as u64,
    )?;
    Ok(GenerateReport {
        batch,
        timed_steps,
        final_length: cache.len(),
        elapsed,
        tokens_per_sec: (timed_steps * batch) as f64 / elapsed.as_secs_f64().max(f64::MIN_POSITIVE),
        peak_cache_bytes: peak,
        allocated_cache_bytes: cache.allocated_bytes(),
        tokens,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub batch: usize,
    pub weights_bytes: u64,
    pub cache_bytes: u64,
    pub total_bytes: u64,
    /// Present only for timed rows that fit the budget.
    pub tokens_per_sec: Option<f64>,
    pub fits_budget: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub config_id: String,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Largest batch whose footprint fits the budget.
    pub fn max_fitting_batch(&self) -> Option<usize> {
        self.rows
            .iter()
            .filter(|r| r.fits_budget)
            .map(|r| r.batch)
            .max()
    }
}

/// Whether [`sweep`] runs decode timing on rows that fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Timing {
    MemoryOnly,
    Measure {
        prefill: usize,
        gen: usize,
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepOptions {
    pub seq: usize,
    pub bytes_per_element: u64,
    pub timing: Timing,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            seq: DEFAULT_PREFILL + DEFAULT_GEN,
            bytes_per_element: 4,
            timing: Timing::Measure {
                prefill: DEFAULT_PREFILL,
                gen: DEFAULT_GEN,
                seed: 0,
            },
        }
    }
}

/// Memory footprint of every `(config, batch)` cell against `budget_bytes`;
/// fitting cells are timed when `options.timing` asks for it.
pub fn sweep(
    configs: &[(String, ModelConfig)],
    batches: &[usize],
    budget_bytes: u64,
    options: SweepOptions,
) -> Result<Vec<BenchReport>> {
    if configs.is_empty() || batches.is_empty() {
        return Err(Error::config(
            "sweep",
            "needs at least one config and one batch",
        ));
    }
    let mut reports = Vec::with_capacity(configs.len());
    for (id, cfg) in configs {
        let model = match options.timing {
            Timing::Measure { seed, .. } => Some(Model::<f32>::init(cfg.clone(), seed)?),
            Timing::MemoryOnly => None,
        };
        let mut rows = Vec::with_capacity(batches.len());
        for &batch in batches {
            let mem = memory_model(
                cfg,
                batch as u64,
                options.seq as u64,
                options.bytes_per_element,
            )?;
            let fits = mem.total <= budget_bytes;
            let tokens_per_sec = match (&model, options.timing, fits) {
                (Some(model), Timing::Measure { prefill, gen, seed }, true) => {
                    Some(bench_generate(model, batch, prefill, gen, seed)?.tokens_per_sec)
                }
                _ => None,
            };
            rows.push(BenchRow {
                batch,
                weights_bytes: mem.weights,
                cache_bytes: mem.cache,
                total_bytes: mem.total,
                tokens_per_sec,
                fits_budget: fits,
            });
        }
        reports.push(BenchReport {
            config_id: id.clone(),
            rows,
        });
    }
    Ok(reports)
}

pub const CSV_HEADER: &str =
    "config,batch,weights_bytes,cache_bytes,total_bytes,tokens_per_sec,fits_budget";

pub fn write_csv(mut out: impl Write, reports: &[BenchReport]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for report in reports {
        for r in &report.rows {
            let tps = r
                .tokens_per_sec
                .map(|t| format!("{t:.3}"))
                .unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                report.config_id,
                r.batch,
                r.weights_bytes,
                r.cache_bytes,
                r.total_bytes,
                tps,
                r.fits_budget
            )?;
        }
    }
    Ok(())
}

/// Gnuplot data: one indexed block per config with columns
/// `batch total_bytes cache_bytes fits`.
pub fn write_dat(mut out: impl Write, reports: &[BenchReport]) -> Result<()> {
    for (i, report) in reports.iter().enumerate() {
        if i > 0 {
            writeln!(out, "\n")?;
        }
        writeln!(out, "# {}", report.config_id)?;
        for r in &report.rows {
            writeln!(
                out,
                "{} {} {} {}",
                r.batch,
                r.total_bytes,
                r.cache_bytes,
                u8::from(r.fits_budget)
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ShareConfig;
    use crate::model::compensate_mlp_with;

    fn tiny(m: usize, g: usize, max_seq: usize) -> ModelConfig {
        let share = ShareConfig::new(2, 2, m, g, 4).unwrap();
        ModelConfig::uniform(17, max_seq, share, 16).unwrap()
    }

    #[test]
    fn cache_term_is_linear_in_batch() {
        let cfg = ModelConfig::pythia_160m()
            .with_share(ShareConfig::new(12, 12, 6, 1, 64).unwrap())
            .unwrap();
        let slope = 2 * 2048 * 6 * 64 * 4;
        let base = memory_model(&cfg, 0, 2048, 4).unwrap();
        assert_eq!(base.cache, 0);
        for b in [1u64, 2, 7, 100, 1000] {
            let mem = memory_model(&cfg, b, 2048, 4).unwrap();
            assert_eq!(mem.total - base.total, b * slope);
            assert_eq!(mem.weights, param_count(&cfg) * 4);
        }
    }

    #[test]
    fn slope_ratio_follows_kv_heads() {
        let base = ModelConfig::pythia_160m();
        let mlkv6 = base
            .with_share(ShareConfig::new(12, 12, 6, 1, 64).unwrap())
            .unwrap();
        let mqa = base
            .with_share(ShareConfig::mqa(12, 12, 64).unwrap())
            .unwrap();
        let a = memory_model(&mlkv6, 1, 2048, 2).unwrap().cache;
        let b = memory_model(&mqa, 1, 2048, 2).unwrap().cache;
        assert_eq!(2 * a, b);
    }

    #[test]
    fn batch_and_sequence_axes_are_interchangeable() {
        let cfg = tiny(1, 2, 64);
        for (b, s) in [(1u64, 64u64), (2, 32), (4, 16), (8, 8)] {
            assert_eq!(
                memory_model(&cfg, b, s, 4).unwrap().cache,
                memory_model(&cfg, s, b, 4).unwrap().cache
            );
        }
        assert!(memory_model(&cfg, 1, 1, 3).is_err());
    }

    #[test]
    fn generate_runs_exact_step_count() {
        let model = Model::<f32>::init(tiny(1, 1, 2048), 1).unwrap();
        let report = bench_generate(&model, 2, 2000, 48, 2).unwrap();
        assert_eq!(report.timed_steps, 48);
        assert_eq!(report.final_length, 2048);
        assert_eq!(
            report.tokens.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![48, 48]
        );
        assert_eq!(
            report.peak_cache_bytes,
            cache_bytes(cache_elements(2, 2048, 1, 1, 4), 4).unwrap()
        );
        assert_eq!(report.peak_cache_bytes, report.allocated_cache_bytes);
        assert!(report.tokens_per_sec > 0.0);

        let double = bench_generate(&model, 4, 2000, 48, 2).unwrap();
        assert_eq!(double.peak_cache_bytes, 2 * report.peak_cache_bytes);
    }

    #[test]
    fn generate_rejects_overlong_runs() {
        let model = Model::<f32>::init(tiny(2, 2, 16), 1).unwrap();
        assert!(matches!(
            bench_generate(&model, 1, 10, 7, 0),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn allocation_audit_matches_model() {
        for (m, g) in [(2, 2), (2, 1), (1, 2), (1, 1)] {
            let cfg = tiny(m, g, 40);
            let model = Model::<f32>::init(cfg.clone(), 3).unwrap();
            let report = bench_generate(&model, 3, 30, 10, 4).unwrap();
            let mem = memory_model(&cfg, 3, 40, 4).unwrap();
            assert_eq!(report.allocated_cache_bytes, mem.cache);
            assert_eq!(model.weight_elements() * 4, mem.weights);
        }
    }

    #[test]
    fn sweep_max_batch_matches_brute_force() {
        let configs: Vec<(String, ModelConfig)> = [(2, 2), (2, 1), (1, 1)]
            .iter()
            .map(|&(m, g)| (format!("m{m}g{g}"), tiny(m, g, 64)))
            .collect();
        let batches: Vec<usize> = (1..=300).collect();
        let options = SweepOptions {
            seq: 64,
            bytes_per_element: 4,
            timing: Timing::MemoryOnly,
        };
        let budget = 300_000;
        let reports = sweep(&configs, &batches, budget, options).unwrap();
        for ((_, cfg), report) in configs.iter().zip(&reports) {
            let brute = batches
                .iter()
                .copied()
                .filter(|&b| memory_model(cfg, b as u64, 64, 4).unwrap().total <= budget)
                .max();
            assert_eq!(report.max_fitting_batch(), brute);
            assert!(report
                .rows
                .windows(2)
                .all(|w| w[0].cache_bytes < w[1].cache_bytes));
        }

        let starved = sweep(&configs, &batches, 1000, options).unwrap();
        assert!(starved.iter().all(|r| r.max_fitting_batch().is_none()));
    }

    #[test]
    fn sweep_times_only_fitting_rows() {
        let configs = vec![("tiny".to_string(), tiny(1, 1, 24))];
        let options = SweepOptions {
            seq: 24,
            bytes_per_element: 4,
            timing: Timing::Measure {
                prefill: 20,
                gen: 4,
                seed: 0,
            },
        };
        let weights = memory_model(&configs[0].1, 0, 24, 4).unwrap().weights;
        let per_batch = memory_model(&configs[0].1, 1, 24, 4).unwrap().cache;
        let reports = sweep(&configs, &[1, 2, 3], weights + 2 * per_batch, options).unwrap();
        let rows = &reports[0].rows;
        assert!(rows[0].tokens_per_sec.unwrap() > 0.0);
        assert!(rows[1].tokens_per_sec.unwrap() > 0.0);
        assert!(!rows[2].fits_budget && rows[2].tokens_per_sec.is_none());
    }

    #[test]
    fn pythia_scheme_ordering() {
        let base = ModelConfig::pythia_160m();
        let schemes = [
            (12, 12),
            (12, 4),
            (4, 12),
            (12, 1),
            (4, 3),
            (6, 1),
            (4, 1),
            (2, 1),
            (1, 1),
        ];
        let configs: Vec<(String, ModelConfig)> = schemes
            .iter()
            .map(|&(m, g)| {
                let share = ShareConfig::new(12, 12, m, g, 64).unwrap();
                (
                    format!("{m}x{g}"),
                    compensate_mlp_with(&base, share, 768, None).unwrap().config,
                )
            })
            .collect();
        let batches: Vec<usize> = (1..=16384).collect();
        let options = SweepOptions {
            seq: 2048,
            bytes_per_element: 4,
            timing: Timing::MemoryOnly,
        };
        let reports = sweep(&configs, &batches, 12_000_000_000, options).unwrap();
        let maxes: Vec<usize> = reports
            .iter()
            .map(|r| r.max_fitting_batch().unwrap())
            .collect();
        for (i, &(mi, gi)) in schemes.iter().enumerate() {
            for (j, &(mj, gj)) in schemes.iter().enumerate() {
                if mi * gi < mj * gj {
                    assert!(
                        maxes[i] > maxes[j],
                        "{:?} vs {:?}: {maxes:?}",
                        schemes[i],
                        schemes[j]
                    );
                }
            }
        }
    }

    #[test]
    fn csv_and_dat_output() {
        let reports = vec![BenchReport {
            config_id: "a".into(),
            rows: vec![BenchRow {
                batch: 1,
                weights_bytes: 10,
                cache_bytes: 2,
                total_bytes: 12,
                tokens_per_sec: Some(3.5),
                fits_budget: true,
            }],
        }];
        let mut csv = Vec::new();
        write_csv(&mut csv, &reports).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(csv, format!("{CSV_HEADER}\na,1,10,2,12,3.500,true\n"));
        let mut dat = Vec::new();
        write_dat(&mut dat, &[reports[0].clone(), reports[0].clone()]).unwrap();
        let dat = String::from_utf8(dat).unwrap();
        assert_eq!(dat.matches("# a").count(), 2);
        assert!(dat.contains("\n\n\n# a"));
    }
}

//! MLP-width compensation: after removing KV heads, widen MLP intermediate
//! layers so a converted model keeps the baseline parameter count.

use crate::attention::ShareConfig;
use crate::error::{Error, Result};

use super::{param_count, ModelConfig};

/// Maximum relative parameter gap accepted by [`compensate_mlp`].
pub const COMPENSATION_TOLERANCE: f64 = 1e-4;

/// Outcome of a compensation search.
#[derive(Clone, Debug, PartialEq)]
pub struct Compensation {
    pub config: ModelConfig,
    /// Signed number of width increments applied (each `step` units wide).
    pub increments: i64,
    pub params: u64,
    pub baseline_params: u64,
    /// `|params − baseline| / baseline`.
    pub relative_gap: f64,
}

/// Replaces `base`'s sharing scheme with `target` and widens MLPs in
/// multiples of `d`, round-robin from the first layer, picking the
/// increment count nearest the baseline parameter count. Fails with
/// [`Error::Infeasible`] when the best count is more than
/// [`COMPENSATION_TOLERANCE`] away (relative).
pub fn compensate_mlp(base: &ModelConfig, target: ShareConfig) -> Result<ModelConfig> {
    compensate_mlp_with(base, target, base.d_model, Some(COMPENSATION_TOLERANCE)).map(|c| c.config)
}

/// Generalized compensation: increments of `step` MLP units, optional
/// tolerance. With `tolerance = None` the nearest achievable count is
/// always returned.
pub fn compensate_mlp_with(
    base: &ModelConfig,
    target: ShareConfig,
    step: usize,
    tolerance: Option<f64>,
) -> Result<Compensation> {
    base.validate()?;
    if step == 0 {
        return Err(Error::config("step", "must be at least 1"));
    }
    let shared = base.with_share(target)?;
    let baseline = param_count(base);
    let deficit = baseline as i128 - param_count(&shared) as i128;
    let d = base.d_model as i128;
    // Widening one layer's MLP by one unit adds a row of w_in, a column of
    // w_out and one bias entry.
    let unit = step as i128 * (2 * d + 1);
    let lower = deficit.div_euclid(unit);
    let mut best: Option<(i128, ModelConfig, i128)> = None;
    for k in [lower, lower + 1] {
        let Some(cfg) = widen(&shared, k, step) else {
            continue;
        };
        let gap = (param_count(&cfg) as i128 - baseline as i128).abs();
        if best.as_ref().is_none_or(|(best_gap, _, _)| gap < *best_gap) {
            best = Some((gap, cfg, k));
        }
    }
    let (gap, config, increments) = best.ok_or_else(|| Error::Infeasible {
        gap: f64::INFINITY,
        tolerance: tolerance.unwrap_or(f64::INFINITY),
    })?;
    let relative_gap = gap as f64 / baseline as f64;
    if let Some(tol) = tolerance {
        if relative_gap > tol {
            return Err(Error::Infeasible {
                gap: relative_gap,
                tolerance: tol,
            });
        }
    }
    let params = param_count(&config);
    Ok(Compensation {
        config,
        increments: increments as i64,
        params,
        baseline_params: baseline,
        relative_gap,
    })
}

/// Applies `k` increments (negative: decrements) of `step` units,
/// round-robin from layer 0. `None` if a width would fall below `d`.
fn widen(cfg: &ModelConfig, k: i128, step: usize) -> Option<ModelConfig> {
    let l = cfg.layers() as i128;
    let mut out = cfg.clone();
    let (per_layer, extra) = (k.abs() / l, k.abs() % l);
    for (n, w) in out.d_ff.iter_mut().enumerate() {
        let units = per_layer + i128::from((n as i128) < extra);
        let delta = units * step as i128 * k.signum();
        let width = *w as i128 + delta;
        if width < cfg.d_model as i128 {
            return None;
        }
        *w = width as usize;
    }
    Some(out)
}

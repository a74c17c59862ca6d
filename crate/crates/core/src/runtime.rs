//! Expected time per iteration of each protocol, the sync-versus-async
//! speedups, and Monte-Carlo estimates to check them against.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delay::{harmonic, harmonic_diff, AgingClass, DelayDistribution, DelayError};
use crate::sim::{self, Horizon, RunSetup, SimError};
use crate::stats::{batch_means, DEFAULT_BATCHES};
use crate::variant::{ConfigError, Variant, VariantConfig};

/// Fraction of iterations dropped before averaging simulated runtimes.
pub const WARMUP_FRACTION: f64 = 0.1;
pub const MIN_MC_ITERATIONS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeKind {
    Exact,
    UpperBound,
}

impl fmt::Display for RuntimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuntimeKind::Exact => "exact",
            RuntimeKind::UpperBound => "upper_bound",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeResult {
    /// Expected seconds per iteration.
    pub value: f64,
    pub kind: RuntimeKind,
    pub assumptions: String,
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("no runtime bound for {variant} under {class:?} delays (requires new-longer-than-used or memoryless)")]
    BoundInapplicable { variant: Variant, class: AgingClass },
    #[error("rank K={k} invalid for P={p}")]
    InvalidRank { k: usize, p: usize },
    #[error("K={k} does not divide P={p} into at least two groups")]
    NotDivisible { k: usize, p: usize },
    #[error("Monte-Carlo runtime needs at least {MIN_MC_ITERATIONS} iterations, got {0}")]
    TooFewIterations(u64),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Delay(#[from] DelayError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn result(value: f64, kind: RuntimeKind, assumptions: &str) -> RuntimeResult {
    RuntimeResult { value, kind, assumptions: assumptions.to_string() }
}

/// Expected wall-clock time per parameter update.
pub fn expected_runtime(cfg: &VariantConfig, dist: &DelayDistribution) -> Result<RuntimeResult, RuntimeError> {
    cfg.validate()?;
    let (k, p) = (cfg.k, cfg.p);
    let class = dist.aging_class();
    let inapplicable = || RuntimeError::BoundInapplicable { variant: cfg.variant, class };
    Ok(match cfg.variant {
        Variant::KSync => result(dist.order_stat(k, p)?, RuntimeKind::Exact, "i.i.d. delays"),
        Variant::KBatchSync => {
            let value = k as f64 * dist.order_stat(1, p)?;
            match class {
                AgingClass::Memoryless => result(value, RuntimeKind::Exact, "memoryless delays"),
                AgingClass::NewLongerThanUsed => {
                    result(value, RuntimeKind::UpperBound, "new-longer-than-used required")
                }
                AgingClass::NewShorterThanUsed => return Err(inapplicable()),
            }
        }
        Variant::KAsync => {
            let value = dist.order_stat(k, p)?;
            match class {
                AgingClass::Memoryless => result(value, RuntimeKind::Exact, "memoryless delays"),
                AgingClass::NewLongerThanUsed => {
                    result(value, RuntimeKind::UpperBound, "new-longer-than-used required")
                }
                AgingClass::NewShorterThanUsed => return Err(inapplicable()),
            }
        }
        Variant::KBatchAsync => result(
            k as f64 * dist.mean() / p as f64,
            RuntimeKind::Exact,
            "asymptotic in the number of iterations",
        ),
    })
}

/// `P·E[X_{P:P}] / E[X]`: how much longer fully synchronous SGD takes per
/// iteration than fully asynchronous SGD, normalized per gradient.
pub fn speedup_sync_over_async(dist: &DelayDistribution, p: usize) -> Result<f64, RuntimeError> {
    if p == 0 {
        return Err(RuntimeError::InvalidRank { k: 0, p });
    }
    Ok(p as f64 * dist.order_stat(p, p)? / dist.mean())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticSpeedup {
    /// `P·H_P`.
    pub exact: f64,
    /// `P·ln P`, for display.
    pub approx: f64,
}

/// Exponential-delay speedup of async over sync SGD and its growth rate.
pub fn speedup_exponential_asymptotic(p: usize) -> Result<AsymptoticSpeedup, RuntimeError> {
    if p < 2 {
        return Err(RuntimeError::InvalidRank { k: p, p });
    }
    let pf = p as f64;
    Ok(AsymptoticSpeedup { exact: pf * harmonic(p), approx: pf * pf.ln() })
}

/// `P·E[X_{K:P}] / (K·E[X])`: per-iteration runtime of K-async over
/// K-batch-async.
pub fn kasync_over_kbatchasync_ratio(dist: &DelayDistribution, k: usize, p: usize) -> Result<f64, RuntimeError> {
    if k == 0 || k > p {
        return Err(RuntimeError::InvalidRank { k, p });
    }
    Ok(p as f64 * dist.order_stat(k, p)? / (k as f64 * dist.mean()))
}

/// `(P/K)·ln(P/(P−K))`, the log form of the exponential ratio; infinite at
/// `K = P`.
pub fn kasync_over_kbatchasync_log_approx(k: usize, p: usize) -> f64 {
    let (kf, pf) = (k as f64, p as f64);
    pf / kf * (pf / (pf - kf)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsecutiveBound {
    /// Bound on the expected time of `P/K` consecutive K-async iterations.
    pub total: f64,
    /// `KΔ/P + K·ln P/(Pμ)`.
    pub per_iteration_approx: f64,
}

/// Runtime bound for `n = P/K` consecutive K-async iterations under
/// shifted-exponential delays: `Δ + Σ_{i<n} E[X̃_{K:(P−iK)}]`, with `X̃` the
/// unshifted exponential.
pub fn shifted_exp_consecutive_bound(shift: f64, rate: f64, k: usize, p: usize) -> Result<ConsecutiveBound, RuntimeError> {
    DelayDistribution::shifted_exponential(shift, rate)?;
    if k == 0 || !p.is_multiple_of(k) || p / k < 2 {
        return Err(RuntimeError::NotDivisible { k, p });
    }
    let n = p / k;
    let total = shift + (0..n).map(|i| harmonic_diff(p - i * k, p - (i + 1) * k) / rate).sum::<f64>();
    let (kf, pf) = (k as f64, p as f64);
    let per_iteration_approx = kf * shift / pf + kf * pf.ln() / (pf * rate);
    Ok(ConsecutiveBound { total, per_iteration_approx })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloRuntime {
    pub mean: f64,
    /// Half-width of the 95% confidence interval.
    pub ci95: f64,
    pub std_err: f64,
    /// Iterations averaged after the warm-up was dropped.
    pub iterations_used: usize,
}

/// Simulated mean time per iteration (timing model only), with a batch-means
/// confidence interval after dropping the first tenth of iterations.
pub fn monte_carlo_runtime(
    cfg: &VariantConfig,
    dist: &DelayDistribution,
    iterations: u64,
    seed: u64,
) -> Result<MonteCarloRuntime, RuntimeError> {
    if iterations < MIN_MC_ITERATIONS {
        return Err(RuntimeError::TooFewIterations(iterations));
    }
    let trace = sim::run(&RunSetup::timing(*cfg, dist, Horizon::Iterations(iterations), seed))?;
    let times = trace.iteration_times();
    let skip = (times.len() as f64 * WARMUP_FRACTION) as usize;
    let kept = &times[skip..];
    let est = batch_means(kept, DEFAULT_BATCHES);
    Ok(MonteCarloRuntime { mean: est.mean, ci95: est.ci95, std_err: est.std_err, iterations_used: kept.len() })
}

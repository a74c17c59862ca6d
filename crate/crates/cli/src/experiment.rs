//! Replicated runs and the loss-curve summaries used by sweeps and the
//! acceptance suite.

use rayon::prelude::*;
use staleracer_core::rng::derive_seed;
use staleracer_core::sim::{Seeds, Trace};
use staleracer_core::stats::median;

/// Independent delay and data seeds for replication `r`.
pub fn replication_seeds(base: u64, r: usize) -> Seeds {
    Seeds::new(derive_seed(base, 2 * r as u64), derive_seed(base, 2 * r as u64 + 1))
}

/// Runs `f` once per replication, in parallel, returning results in
/// replication order.
pub fn replicate<T, F>(replications: usize, base_seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, Seeds) -> T + Sync,
{
    (0..replications).into_par_iter().map(|r| f(r, replication_seeds(base_seed, r))).collect()
}

/// `(wallclock, F(w_{j+1}) − F*)` for every update with a recorded loss.
pub fn excess_curve(trace: &Trace, f_star: f64) -> Vec<(f64, f64)> {
    trace.records.iter().filter_map(|r| r.loss.map(|l| (r.wallclock, l - f_star))).collect()
}

/// Mean excess loss over the trailing `fraction` of recorded updates.
pub fn trailing_floor(trace: &Trace, f_star: f64, fraction: f64) -> Option<f64> {
    let curve = excess_curve(trace, f_star);
    if curve.is_empty() {
        return None;
    }
    let n = ((curve.len() as f64 * fraction).ceil() as usize).clamp(1, curve.len());
    let tail = &curve[curve.len() - n..];
    Some(tail.iter().map(|(_, e)| e).sum::<f64>() / n as f64)
}

/// Simulated time at which the excess loss first drops to `target`.
pub fn time_to_target(trace: &Trace, f_star: f64, target: f64) -> Option<f64> {
    excess_curve(trace, f_star).into_iter().find(|&(_, e)| e <= target).map(|(t, _)| t)
}

/// Median with unreached targets counted as infinite.
pub fn median_time(times: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = times.iter().map(|t| t.unwrap_or(f64::INFINITY)).collect();
    median(&v)
}

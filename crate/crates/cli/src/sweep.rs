//! Error-versus-runtime sweeps over protocols and K, and speedup curves.

use rayon::prelude::*;
use serde::Serialize;
use staleracer_core::delay::{harmonic, DelayDistribution};
use staleracer_core::runtime::{monte_carlo_runtime, speedup_sync_over_async, RuntimeError};
use staleracer_core::sim::{self, RunSetup, SimError, SimOptions};
use staleracer_core::stats::{iqr, median};
use staleracer_core::{Variant, VariantConfig};

use crate::config::{Built, SweepSection};
use crate::experiment::{excess_curve, median_time, replicate, trailing_floor};

/// One (protocol, K) cell of the trade-off sweep, summarized over
/// replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrontierPoint {
    pub variant: Variant,
    pub k: usize,
    pub p: usize,
    pub floor_median: f64,
    pub floor_iqr: f64,
    pub target: f64,
    pub time_to_target_median: f64,
    pub mean_iteration_time: f64,
    pub diverged: usize,
}

pub const FRONTIER_HEADER: [&str; 9] = [
    "variant",
    "K",
    "P",
    "floor_median",
    "floor_iqr",
    "target",
    "time_to_target_median",
    "mean_iteration_time",
    "diverged",
];

struct Cell {
    variant: Variant,
    k: usize,
    floors: Vec<f64>,
    curves: Vec<Vec<(f64, f64)>>,
    iteration_times: Vec<f64>,
    diverged: usize,
}

/// Runs every (variant, K) cell of `sweep` with the experiment's objective,
/// delays and horizon. Returns one point per (K, variant, target), sorted by
/// K, and the targets used.
pub fn sweep_tradeoff(built: &Built, sweep: &SweepSection, base_seed: u64) -> Result<(Vec<FrontierPoint>, Vec<f64>), SimError> {
    let mut cells = Vec::new();
    for &variant in &sweep.variants {
        for &k in &sweep.k_values {
            cells.push((variant, k));
        }
    }
    let results: Vec<Result<Cell, SimError>> = cells
        .par_iter()
        .map(|&(variant, k)| {
            let config = VariantConfig { variant, k, ..built.variant };
            let runs = replicate(sweep.replications, base_seed, |_, seeds| {
                sim::run(&RunSetup {
                    config,
                    delays: &built.delays,
                    oracle: Some(&built.oracle),
                    w0: &built.w0,
                    horizon: built.horizon,
                    seeds,
                    options: SimOptions { loss_cadence: 1, record_params: false, record_tasks: false },
                })
            });
            let mut cell =
                Cell { variant, k, floors: vec![], curves: vec![], iteration_times: vec![], diverged: 0 };
            for run in runs {
                match run {
                    Ok(trace) => {
                        cell.floors.push(trailing_floor(&trace, built.f_star, sweep.trailing_fraction).unwrap_or(f64::NAN));
                        cell.iteration_times.push(trace.records.last().map_or(f64::NAN, |r| r.wallclock) / trace.records.len() as f64);
                        cell.curves.push(excess_curve(&trace, built.f_star));
                    }
                    Err(SimError::NonFiniteLoss { .. }) => {
                        cell.diverged += 1;
                        cell.floors.push(f64::INFINITY);
                        cell.curves.push(vec![]);
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(cell)
        })
        .collect();
    let cells: Vec<Cell> = results.into_iter().collect::<Result<_, _>>()?;

    let targets = if sweep.targets.is_empty() {
        vec![2.0 * cells.iter().map(|c| median(&c.floors)).filter(|f| f.is_finite()).fold(f64::INFINITY, f64::min)]
    } else {
        sweep.targets.clone()
    };
    let mut points = Vec::new();
    for c in &cells {
        let iteration_times: Vec<f64> = c.iteration_times.iter().copied().filter(|t| t.is_finite()).collect();
        for &target in &targets {
            let times: Vec<Option<f64>> =
                c.curves.iter().map(|curve| curve.iter().find(|&&(_, e)| e <= target).map(|&(t, _)| t)).collect();
            points.push(FrontierPoint {
                variant: c.variant,
                k: c.k,
                p: built.variant.p,
                floor_median: median(&c.floors),
                floor_iqr: if c.diverged > 0 { f64::NAN } else { iqr(&c.floors) },
                target,
                time_to_target_median: median_time(&times),
                mean_iteration_time: if iteration_times.is_empty() { f64::NAN } else { median(&iteration_times) },
                diverged: c.diverged,
            });
        }
    }
    points.sort_by_key(|pt| pt.k);
    Ok((points, targets))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupPoint {
    pub dist: String,
    pub p: usize,
    /// `P·E[X_{P:P}]/E[X]`.
    pub speedup: f64,
    pub log_speedup: f64,
    /// `P·H_P`, for exponential delays.
    pub harmonic_form: Option<f64>,
    pub simulated: Option<f64>,
    pub simulated_ci95: Option<f64>,
}

pub const SPEEDUP_HEADER: [&str; 7] =
    ["dist", "P", "speedup", "log_speedup", "harmonic_form", "simulated", "simulated_ci95"];

/// Speedup of fully asynchronous over fully synchronous SGD for each delay
/// distribution and worker count, optionally checked by simulation.
pub fn speedup_curve(
    dists: &[DelayDistribution],
    p_values: &[usize],
    simulate_iterations: Option<u64>,
    seed: u64,
) -> Result<Vec<SpeedupPoint>, RuntimeError> {
    let mut jobs = Vec::new();
    for d in dists {
        for &p in p_values {
            jobs.push((d, p));
        }
    }
    jobs.par_iter()
        .map(|&(d, p)| {
            let speedup = speedup_sync_over_async(d, p)?;
            let harmonic_form = matches!(d, DelayDistribution::Exponential { .. }).then(|| p as f64 * harmonic(p));
            let (simulated, simulated_ci95) = match simulate_iterations {
                Some(n) => {
                    let (ratio, ci) = simulated_speedup(d, p, n, seed)?;
                    (Some(ratio), Some(ci))
                }
                None => (None, None),
            };
            Ok(SpeedupPoint {
                dist: d.label(),
                p,
                speedup,
                log_speedup: speedup.ln(),
                harmonic_form,
                simulated,
                simulated_ci95,
            })
        })
        .collect()
}

/// Ratio of simulated P-sync to 1-async mean iteration times, with a
/// delta-method 95% half-width.
pub fn simulated_speedup(d: &DelayDistribution, p: usize, iterations: u64, seed: u64) -> Result<(f64, f64), RuntimeError> {
    let sync = monte_carlo_runtime(&VariantConfig::timing(Variant::KSync, p, p)?, d, iterations, seed)?;
    let asynch = monte_carlo_runtime(&VariantConfig::timing(Variant::KAsync, 1, p)?, d, iterations, seed.wrapping_add(1))?;
    let ratio = sync.mean / asynch.mean;
    let ci = ratio * ((sync.ci95 / sync.mean).powi(2) + (asynch.ci95 / asynch.mean).powi(2)).sqrt();
    Ok((ratio, ci))
}

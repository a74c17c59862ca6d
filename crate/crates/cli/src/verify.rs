//! Monte-Carlo runtimes checked against the analytic per-iteration results.

use rayon::prelude::*;
use serde::Serialize;
use staleracer_core::rng::derive_seed;
use staleracer_core::runtime::{expected_runtime, monte_carlo_runtime, RuntimeError, RuntimeKind};
use staleracer_core::{Variant, VariantConfig};

use crate::config::VerifySection;

/// Allowed distance, in 95% half-widths, between simulation and analysis.
pub const CI_MULTIPLIER: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyRow {
    pub variant: Variant,
    pub k: usize,
    pub p: usize,
    pub dist: String,
    pub analytic: f64,
    pub kind: RuntimeKind,
    pub mc_mean: f64,
    pub mc_ci95: f64,
    pub pass: bool,
}

pub const VERIFY_HEADER: [&str; 9] = ["variant", "K", "P", "dist", "analytic", "kind", "mc_mean", "mc_ci95", "pass"];

/// Exact results must agree within the tolerance; upper bounds may only be
/// exceeded by it.
pub fn passes(kind: RuntimeKind, analytic: f64, mean: f64, ci95: f64) -> bool {
    match kind {
        RuntimeKind::Exact => (mean - analytic).abs() <= CI_MULTIPLIER * ci95,
        RuntimeKind::UpperBound => mean <= analytic + CI_MULTIPLIER * ci95,
    }
}

/// Rows for every applicable (distribution, variant, shape) case, in input
/// order. Cases whose bound does not apply to the distribution are skipped
/// and returned as labels.
pub fn run_verify(section: &VerifySection, seed: u64) -> Result<(Vec<VerifyRow>, Vec<String>), RuntimeError> {
    let mut cases = Vec::new();
    for d in &section.distributions {
        for &variant in &section.variants {
            for &(k, p) in &section.shapes {
                cases.push((d, variant, k, p));
            }
        }
    }
    let results: Vec<Result<Option<VerifyRow>, RuntimeError>> = cases
        .par_iter()
        .enumerate()
        .map(|(i, &(d, variant, k, p))| {
            let cfg = VariantConfig::timing(variant, k, p)?;
            let analytic = match expected_runtime(&cfg, d) {
                Ok(r) => r,
                Err(RuntimeError::BoundInapplicable { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let mc = monte_carlo_runtime(&cfg, d, section.iterations, derive_seed(seed, i as u64))?;
            Ok(Some(VerifyRow {
                variant,
                k,
                p,
                dist: d.label(),
                analytic: analytic.value,
                kind: analytic.kind,
                mc_mean: mc.mean,
                mc_ci95: mc.ci95,
                pass: passes(analytic.kind, analytic.value, mc.mean, mc.ci95),
            }))
        })
        .collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (res, (d, variant, k, p)) in results.into_iter().zip(&cases) {
        match res? {
            Some(row) => rows.push(row),
            None => skipped.push(format!("{variant} K={k} P={p} {}", d.label())),
        }
    }
    Ok((rows, skipped))
}

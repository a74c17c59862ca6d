//! Adaptive synchronicity: grow K as the loss falls.
//!
//! Training is split into slots of simulated time. At the end of each slot
//! the full loss `F(w)` is measured and K is recomputed from the ratio
//! `F0 / F(w)`, where `F0` is the loss at the start of training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delay::{DelayDistribution, DelayError};
use crate::sim::{self, RunSetup, SimError, Trace, UpdateRecord};
use crate::variant::{ConfigError, Variant, VariantConfig};

/// Floor applied to measured losses before they enter the update rule.
pub const LOSS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    Ceil,
    #[default]
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaSyncConfig {
    pub variant: Variant,
    pub k0: usize,
    pub p: usize,
    /// Slot length in simulated seconds.
    pub slot_length: f64,
    #[serde(default)]
    pub rounding: Rounding,
    #[serde(default = "yes")]
    pub monotone: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Error)]
pub enum AdaSyncError {
    #[error("K0={k0} must lie in [1, P={p}]")]
    BadK0 { k0: usize, p: usize },
    #[error("slot length must be positive and finite, got {0}")]
    BadSlot(f64),
    #[error("loss must be positive for the K update rule, got {0}")]
    NonPositiveLoss(f64),
    #[error("AdaSync needs a gradient oracle to measure the loss")]
    NoObjective,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Delay(#[from] DelayError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl AdaSyncConfig {
    pub fn validate(&self) -> Result<(), AdaSyncError> {
        if self.k0 == 0 || self.k0 > self.p {
            return Err(AdaSyncError::BadK0 { k0: self.k0, p: self.p });
        }
        if !(self.slot_length.is_finite() && self.slot_length > 0.0) {
            return Err(AdaSyncError::BadSlot(self.slot_length));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Positive root of `K² + βK − βP = 0`, `β = K0²/(P−K0) · F0/F`.
    Quadratic,
    /// `K = K0·√(F0/F)`.
    SquareRoot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleChoice {
    pub rule: UpdateRule,
    /// The rule was derived for a different delay model and is applied anyway.
    pub extrapolated: bool,
}

/// Picks the update rule for a protocol and delay family.
pub fn rule_for(variant: Variant, delays: &DelayDistribution) -> RuleChoice {
    let exp_like = matches!(
        delays,
        DelayDistribution::Exponential { .. } | DelayDistribution::ShiftedExponential { .. }
    );
    match variant {
        Variant::KSync if exp_like => RuleChoice { rule: UpdateRule::Quadratic, extrapolated: false },
        Variant::KSync | Variant::KAsync => RuleChoice { rule: UpdateRule::SquareRoot, extrapolated: !exp_like },
        Variant::KBatchSync => RuleChoice {
            rule: UpdateRule::SquareRoot,
            extrapolated: delays.aging_class() == crate::delay::AgingClass::NewShorterThanUsed,
        },
        Variant::KBatchAsync => RuleChoice { rule: UpdateRule::SquareRoot, extrapolated: false },
    }
}

/// Constants of the error-runtime trade-off other than K and the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffParams {
    /// Slot length.
    pub t: f64,
    pub eta: f64,
    pub gamma_prime: f64,
    pub l: f64,
    pub sigma_sq: f64,
    pub m: usize,
}

/// `2·F·E[T]/(t·η·γ') + L·η·σ²/(K·m·γ')`: the error bound after a slot of
/// length `t`, as a function of K through `E[T]` and the noise term.
pub fn objective_u(k: usize, f_start: f64, expected_t: f64, params: &TradeoffParams) -> f64 {
    let TradeoffParams { t, eta, gamma_prime, l, sigma_sq, m } = *params;
    2.0 * f_start * expected_t / (t * eta * gamma_prime) + l * eta * sigma_sq / ((k * m) as f64 * gamma_prime)
}

/// Unrounded K from the update rule. `K0 = P` pins the quadratic rule at P.
pub fn continuous_k(rule: UpdateRule, k0: usize, p: usize, f0: f64, f_start: f64) -> Result<f64, AdaSyncError> {
    if f_start.is_nan() || f_start <= 0.0 {
        return Err(AdaSyncError::NonPositiveLoss(f_start));
    }
    let ratio = f0 / f_start;
    Ok(match rule {
        UpdateRule::SquareRoot => k0 as f64 * ratio.sqrt(),
        UpdateRule::Quadratic => {
            if k0 >= p {
                return Ok(p as f64);
            }
            let (k0f, pf) = (k0 as f64, p as f64);
            let beta = k0f * k0f / (pf - k0f) * ratio;
            (-beta + (beta * beta + 4.0 * beta * pf).sqrt()) / 2.0
        }
    })
}

/// K for the next slot: the rule, then rounding, clamping to `[1, P]` and
/// the monotone policy. Once K reaches P it stays there.
pub fn next_k(cfg: &AdaSyncConfig, rule: UpdateRule, k_current: usize, f0: f64, f_start: f64) -> Result<usize, AdaSyncError> {
    let raw = continuous_k(rule, cfg.k0, cfg.p, f0, f_start)?;
    if k_current >= cfg.p {
        return Ok(cfg.p);
    }
    let rounded = match cfg.rounding {
        Rounding::Ceil => raw.ceil(),
        Rounding::Nearest => raw.round(),
    };
    let mut k = (rounded.max(1.0) as usize).min(cfg.p);
    if cfg.monotone {
        k = k.max(k_current);
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotDecision {
    pub slot: u64,
    /// Simulated time of the update that closed the slot.
    pub wallclock: f64,
    /// Floored loss the rule saw.
    pub f_start: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaSyncState {
    pub k_current: usize,
    pub f0: f64,
    pub slot_index: u64,
    pub history: Vec<SlotDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaSyncRun {
    pub trace: Trace,
    pub state: AdaSyncState,
    pub rule: RuleChoice,
    /// Slot index of each trace record (aligned with `trace.records`).
    pub slots: Vec<u64>,
}

/// Runs the simulator with K adapted at every slot boundary. The setup's K
/// is replaced by `cfg.k0`.
pub fn run_adasync(cfg: &AdaSyncConfig, setup: &RunSetup<'_>) -> Result<AdaSyncRun, AdaSyncError> {
    cfg.validate()?;
    let oracle = setup.oracle.ok_or(AdaSyncError::NoObjective)?;
    let objective = oracle.objective();
    let config = VariantConfig { variant: cfg.variant, k: cfg.k0, p: cfg.p, ..setup.config };
    config.validate()?;
    let setup = RunSetup { config, ..*setup };
    let rule = rule_for(cfg.variant, setup.delays);
    let f0 = objective.full_loss(setup.w0).map_err(SimError::from)?.max(LOSS_FLOOR);

    let mut state = AdaSyncState { k_current: cfg.k0, f0, slot_index: 0, history: Vec::new() };
    let mut next_boundary = cfg.slot_length;
    let mut failure = None;
    let mut controller = |record: &UpdateRecord, w: &[f64]| -> Option<usize> {
        if record.wallclock < next_boundary || failure.is_some() {
            return None;
        }
        while record.wallclock >= next_boundary {
            state.slot_index += 1;
            next_boundary = cfg.slot_length * (state.slot_index + 1) as f64;
        }
        let f_start = objective.loss_unchecked(w).max(LOSS_FLOOR);
        match next_k(cfg, rule.rule, state.k_current, state.f0, f_start) {
            Ok(k) => {
                state.k_current = k;
                state.history.push(SlotDecision { slot: state.slot_index, wallclock: record.wallclock, f_start, k });
                Some(k)
            }
            Err(e) => {
                failure = Some(e);
                None
            }
        }
    };
    let trace = sim::run_with(&setup, &mut controller)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let slots = trace.records.iter().map(|r| (r.wallclock / cfg.slot_length).floor() as u64).collect();
    Ok(AdaSyncRun { trace, state, rule, slots })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::delay::harmonic_diff;
    use crate::objective::{GradientOracle, NoiseModel, Objective, Quadratic};
    use crate::sim::{Horizon, Seeds, SimOptions};

    fn cfg(variant: Variant, k0: usize, p: usize) -> AdaSyncConfig {
        AdaSyncConfig { variant, k0, p, slot_length: 10.0, rounding: Rounding::Nearest, monotone: true }
    }

    #[test]
    fn unchanged_loss_keeps_k0() {
        for v in Variant::ALL {
            let rule = rule_for(v, &DelayDistribution::exponential(1.0).unwrap()).rule;
            for k0 in 1..8 {
                assert_eq!(next_k(&cfg(v, k0, 8), rule, k0, 3.0, 3.0).unwrap(), k0);
            }
        }
    }

    #[test]
    fn frozen_rule_values() {
        assert_eq!(next_k(&cfg(Variant::KAsync, 1, 8), UpdateRule::SquareRoot, 1, 4.0, 1.0).unwrap(), 2);
        let root = continuous_k(UpdateRule::Quadratic, 1, 8, 4.0, 1.0).unwrap();
        assert!((root - 1.8713812672202144).abs() < 1e-12);
        assert_eq!(next_k(&cfg(Variant::KSync, 1, 8), UpdateRule::Quadratic, 1, 4.0, 1.0).unwrap(), 2);
        assert_eq!(continuous_k(UpdateRule::Quadratic, 8, 8, 4.0, 1.0).unwrap(), 8.0);
    }

    #[test]
    fn errors_and_guards() {
        let c = cfg(Variant::KAsync, 2, 8);
        assert!(matches!(next_k(&c, UpdateRule::SquareRoot, 2, 1.0, 0.0), Err(AdaSyncError::NonPositiveLoss(_))));
        // K = P is absorbing even when the loss jumps back up
        assert_eq!(next_k(&AdaSyncConfig { monotone: false, ..c }, UpdateRule::SquareRoot, 8, 1.0, 100.0).unwrap(), 8);
        // without the monotone flag K may fall
        assert_eq!(next_k(&AdaSyncConfig { monotone: false, ..c }, UpdateRule::SquareRoot, 4, 1.0, 4.0).unwrap(), 1);
        assert_eq!(next_k(&c, UpdateRule::SquareRoot, 4, 1.0, 4.0).unwrap(), 4);
        assert_eq!(next_k(&AdaSyncConfig { rounding: Rounding::Ceil, ..c }, UpdateRule::SquareRoot, 2, 1.0, 0.5).unwrap(), 3);
        assert_eq!(next_k(&c, UpdateRule::SquareRoot, 2, 1e6, 1.0).unwrap(), 8);
        assert!(AdaSyncConfig { k0: 9, ..c }.validate().is_err());
        assert!(AdaSyncConfig { slot_length: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn rule_selection() {
        let exp = DelayDistribution::exponential(1.0).unwrap();
        let pareto = DelayDistribution::pareto(2.0, 1.0).unwrap();
        assert_eq!(rule_for(Variant::KSync, &exp), RuleChoice { rule: UpdateRule::Quadratic, extrapolated: false });
        assert_eq!(rule_for(Variant::KSync, &pareto), RuleChoice { rule: UpdateRule::SquareRoot, extrapolated: true });
        assert!(!rule_for(Variant::KBatchAsync, &pareto).extrapolated);
    }

    #[test]
    fn objective_u_structure() {
        let p = TradeoffParams { t: 10.0, eta: 0.1, gamma_prime: 1.0, l: 2.0, sigma_sq: 1.0, m: 1 };
        let noise = |k| objective_u(k, 0.0, 1.0, &p);
        assert!((noise(2) / noise(4) - 2.0).abs() < 1e-12);
        let scaled = TradeoffParams { gamma_prime: 0.4, ..p };
        for k in 1..8 {
            let ratio = objective_u(k, 3.0, k as f64, &p) / objective_u(k, 3.0, k as f64, &scaled);
            assert!((ratio - 0.4).abs() < 1e-12);
        }
    }

    fn expected_t(rule: UpdateRule, k: f64, p: f64) -> f64 {
        match rule {
            UpdateRule::Quadratic => (p / (p - k)).ln(),
            UpdateRule::SquareRoot => k,
        }
    }

    /// For a runtime model `E[T](K)` and the rule's calibration (K0 optimal at
    /// F0), the integer minimizer of `u` must sit within one step of the rule.
    #[test]
    fn closed_form_matches_brute_force() {
        for rule in [UpdateRule::Quadratic, UpdateRule::SquareRoot] {
            for p in [2usize, 3, 5, 8, 16, 33, 64] {
                for k0 in [1, p / 3, p / 2, p - 1].into_iter().filter(|&k| k >= 1 && k < p) {
                    let (k0f, pf) = (k0 as f64, p as f64);
                    // choose the noise constant so that K0 minimizes u at F0 = 1
                    let noise = match rule {
                        UpdateRule::Quadratic => k0f * k0f / (pf - k0f),
                        UpdateRule::SquareRoot => k0f * k0f,
                    };
                    let params = TradeoffParams { t: 2.0, eta: 1.0, gamma_prime: 0.7, l: 1.0, sigma_sq: noise, m: 1 };
                    for ratio in [1.0, 1.3, 2.0, 4.0, 9.0, 50.0, 1000.0] {
                        let f_start = 1.0 / ratio;
                        let u = |k: usize| objective_u(k, f_start, expected_t(rule, k as f64, pf), &params);
                        let top = if rule == UpdateRule::Quadratic { p - 1 } else { p };
                        let best = (1..=top).min_by(|&a, &b| u(a).total_cmp(&u(b))).unwrap();
                        let c = AdaSyncConfig { monotone: false, ..cfg(Variant::KSync, k0, p) };
                        let chosen = next_k(&c, rule, k0, 1.0, f_start).unwrap().min(top);
                        assert!(
                            chosen.abs_diff(best) <= 1,
                            "{rule:?} P={p} K0={k0} ratio={ratio}: rule {chosen}, scan {best}"
                        );
                    }
                }
            }
        }
    }

    /// Same check against the exact harmonic runtime of K-sync with
    /// exponential delays instead of its log form.
    #[test]
    fn quadratic_rule_tracks_harmonic_runtime() {
        for p in [4usize, 8, 16, 32, 64] {
            let k0 = p / 4;
            let (k0f, pf) = (k0 as f64, p as f64);
            let params = TradeoffParams {
                t: 2.0,
                eta: 1.0,
                gamma_prime: 1.0,
                l: 1.0,
                sigma_sq: k0f * k0f / (pf - k0f),
                m: 1,
            };
            for ratio in [1.0, 2.0, 4.0, 16.0] {
                let u = |k: usize| objective_u(k, 1.0 / ratio, harmonic_diff(p, p - k), &params);
                let best = (1..=p).min_by(|&a, &b| u(a).total_cmp(&u(b))).unwrap();
                let c = AdaSyncConfig { monotone: false, ..cfg(Variant::KSync, k0, p) };
                let chosen = next_k(&c, UpdateRule::Quadratic, k0, 1.0, 1.0 / ratio).unwrap();
                assert!(chosen.abs_diff(best) <= 1, "P={p} ratio={ratio}: {chosen} vs {best}");
            }
        }
    }

    #[test]
    fn scale_invariance_and_root_range() {
        for p in 2..40usize {
            for k0 in 1..p {
                for &(f0, fs) in &[(1.0, 0.5), (3.0, 0.01), (2.0, 2.0), (1.0, 5.0)] {
                    let a = continuous_k(UpdateRule::Quadratic, k0, p, f0, fs).unwrap();
                    let b = continuous_k(UpdateRule::Quadratic, k0, p, 7.5 * f0, 7.5 * fs).unwrap();
                    assert!((a - b).abs() < 1e-9 * a.max(1.0));
                    assert!(a > 0.0 && a < p as f64);
                    let s1 = continuous_k(UpdateRule::SquareRoot, k0, p, f0, fs).unwrap();
                    let s2 = continuous_k(UpdateRule::SquareRoot, k0, p, 0.1 * f0, 0.1 * fs).unwrap();
                    assert!((s1 - s2).abs() < 1e-9 * s1);
                }
            }
        }
    }

    #[test]
    fn second_derivative_positive_at_rule() {
        for rule in [UpdateRule::Quadratic, UpdateRule::SquareRoot] {
            let (p, k0) = (32.0, 4.0);
            let noise = match rule {
                UpdateRule::Quadratic => k0 * k0 / (p - k0),
                UpdateRule::SquareRoot => k0 * k0,
            };
            for ratio in [1.0, 2.0, 5.0, 20.0] {
                let fs = 1.0 / ratio;
                let k = continuous_k(rule, k0 as usize, p as usize, 1.0, fs).unwrap();
                if k >= p - 1.0 {
                    continue;
                }
                let u = |x: f64| fs * expected_t(rule, x, p) + noise / x;
                let h = 1e-3;
                let d1 = (u(k + h) - u(k - h)) / (2.0 * h);
                let d2 = (u(k + h) - 2.0 * u(k) + u(k - h)) / (h * h);
                assert!(d1.abs() < 1e-5, "{rule:?} first derivative {d1}");
                assert!(d2 > 0.0);
            }
        }
    }

    fn run_setup<'a>(
        oracle: &'a GradientOracle,
        delays: &'a DelayDistribution,
        w0: &'a [f64],
        variant: Variant,
        budget: f64,
    ) -> RunSetup<'a> {
        RunSetup {
            config: VariantConfig::new(variant, 1, 8, 1, 0.05).unwrap(),
            delays,
            oracle: Some(oracle),
            w0,
            horizon: Horizon::SimTime(budget),
            seeds: Seeds::new(1, 2),
            options: SimOptions { loss_cadence: 1, ..SimOptions::default() },
        }
    }

    #[test]
    fn run_raises_k_as_loss_falls() {
        let q = Quadratic::log_spaced(0.5, 2.0, 5).unwrap();
        let oracle =
            GradientOracle::new(Arc::new(Objective::Quadratic(q)), NoiseModel::AdditiveGaussian { sigma_sq: 0.01 }, 1)
                .unwrap();
        let delays = DelayDistribution::exponential(1.0).unwrap();
        let w0 = vec![3.0; 5];
        for v in Variant::ALL {
            let c = AdaSyncConfig { slot_length: 5.0, ..cfg(v, 1, 8) };
            let run = run_adasync(&c, &run_setup(&oracle, &delays, &w0, v, 300.0)).unwrap();
            let ks: Vec<usize> = run.trace.records.iter().map(|r| r.k).collect();
            assert!(ks.windows(2).all(|w| w[1] >= w[0]), "{v}");
            assert!(*ks.last().unwrap() > 1, "{v}");
            assert_eq!(run.slots.len(), run.trace.records.len());
            assert!(run.state.history.windows(2).all(|w| w[1].slot > w[0].slot));
            if let Some(first_p) = ks.iter().position(|&k| k == 8) {
                assert!(ks[first_p..].iter().all(|&k| k == 8));
            }
        }
    }

    #[test]
    fn run_needs_objective() {
        let delays = DelayDistribution::exponential(1.0).unwrap();
        let setup = RunSetup::timing(VariantConfig::timing(Variant::KAsync, 1, 4).unwrap(), &delays, Horizon::SimTime(10.0), 1);
        assert!(matches!(run_adasync(&cfg(Variant::KAsync, 1, 4), &setup), Err(AdaSyncError::NoObjective)));
    }
}

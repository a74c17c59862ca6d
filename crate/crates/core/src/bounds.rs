//! Error bounds for K-sync and K-async SGD with a fixed learning rate.
//!
//! Evaluators never fail: when the learning rate violates a bound's
//! admissibility condition the value is still returned, flagged, so sweeps
//! can chart the admissible region.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("bound input {name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("staleness parameter gamma must not exceed 1, got {0}")]
    GammaTooLarge(f64),
    #[error("p0 must lie in [0, 1], got {0}")]
    P0OutOfRange(f64),
    #[error("initial excess loss must be nonnegative, got {0}")]
    NegativeInitialGap(f64),
}

/// Inputs shared by every bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub eta: f64,
    /// Strong-convexity constant.
    pub c: f64,
    /// Smoothness constant.
    pub l: f64,
    pub sigma_sq: f64,
    pub m_g: f64,
    pub k: usize,
    pub m: usize,
    /// Staleness severity `γ`.
    pub gamma: f64,
    /// Lower bound on the probability that a contribution is fresh.
    pub p0: f64,
    /// `F(w0) − F*`.
    pub f0_gap: f64,
}

impl BoundInputs {
    /// `γ' = 1 − γ + p0/2`.
    pub fn gamma_prime(&self) -> f64 {
        1.0 - self.gamma + self.p0 / 2.0
    }

    pub fn validate(&self) -> Result<(), BoundError> {
        for (name, value) in [("eta", self.eta), ("c", self.c), ("L", self.l)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(BoundError::NonPositive { name, value });
            }
        }
        for (name, value) in [("K", self.k as f64), ("m", self.m as f64)] {
            if value < 1.0 {
                return Err(BoundError::NonPositive { name, value });
            }
        }
        if self.gamma > 1.0 {
            return Err(BoundError::GammaTooLarge(self.gamma));
        }
        if !(0.0..=1.0).contains(&self.p0) {
            return Err(BoundError::P0OutOfRange(self.p0));
        }
        if self.f0_gap < 0.0 {
            return Err(BoundError::NegativeInitialGap(self.f0_gap));
        }
        Ok(())
    }

    fn km(&self) -> f64 {
        (self.k * self.m) as f64
    }

    /// Largest admissible `η` for the K-sync bound: `1 / (2L(M_G/(Km) + 1))`.
    pub fn ksync_eta_limit(&self) -> f64 {
        1.0 / (2.0 * self.l * (self.m_g / self.km() + 1.0))
    }

    /// Largest admissible `η` for the K-async bound: `1 / (2L(M_G/(Km) + 1/K))`.
    pub fn kasync_eta_limit(&self) -> f64 {
        1.0 / (2.0 * self.l * (self.m_g / self.km() + 1.0 / self.k as f64))
    }

    /// Steady-state term `ηLσ² / (2cγ'Km)` with the given contraction modifier.
    fn floor_with(&self, modifier: f64) -> f64 {
        self.eta * self.l * self.sigma_sq / (2.0 * self.c * modifier * self.km())
    }

    pub fn ksync_floor(&self) -> f64 {
        self.floor_with(1.0)
    }

    pub fn kasync_floor(&self) -> f64 {
        self.floor_with(self.gamma_prime())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub value: f64,
    pub admissible: bool,
}

fn contraction_bound(j: u64, b: &BoundInputs, modifier: f64) -> f64 {
    let floor = b.floor_with(modifier);
    let rate = 1.0 - b.eta * b.c * modifier;
    floor + rate.powf(j as f64) * (b.f0_gap - floor)
}

/// Bound on `E[F(w_j)] − F*` after `j` iterations of K-sync SGD.
pub fn ksync_error_bound(j: u64, b: &BoundInputs) -> BoundValue {
    BoundValue { value: contraction_bound(j, b, 1.0), admissible: b.eta <= b.ksync_eta_limit() }
}

/// Bound on `E[F(w_j)] − F*` after `j` iterations of K-async (or
/// K-batch-async) SGD, with contraction modifier `γ'`.
pub fn kasync_error_bound(j: u64, b: &BoundInputs) -> BoundValue {
    let admissible = b.eta <= b.kasync_eta_limit() && b.gamma <= 1.0 && b.gamma_prime() > 0.0;
    BoundValue { value: contraction_bound(j, b, b.gamma_prime()), admissible }
}

/// Bound on `(1/J) Σ_{j<J} E‖∇F(w_j)‖²` for K-async SGD on a possibly
/// non-convex objective. `J` must be at least 1.
pub fn nonconvex_ergodic_bound(iterations: u64, b: &BoundInputs) -> f64 {
    let gp = b.gamma_prime();
    2.0 * b.f0_gap / (iterations as f64 * b.eta * gp) + b.l * b.eta * b.sigma_sq / (b.km() * gp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Synchrony {
    Sync,
    Async,
}

/// Largest learning rate the bounds allow, taken verbatim from the
/// closed-form comparison: for sync `max{1/c, 1/(2L(M_G/(Pm)+1))}` with
/// `P = b.k`, for async `max{1/(cγ'), 1/(2L(M_G/m+1))}`.
pub fn max_learning_rate(synchrony: Synchrony, b: &BoundInputs) -> f64 {
    let m = b.m as f64;
    match synchrony {
        Synchrony::Sync => (1.0 / b.c).max(1.0 / (2.0 * b.l * (b.m_g / (b.k as f64 * m) + 1.0))),
        Synchrony::Async => (1.0 / (b.c * b.gamma_prime())).max(1.0 / (2.0 * b.l * (b.m_g / m + 1.0))),
    }
}

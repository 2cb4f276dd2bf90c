//! One-pass query policies.
//!
//! A positive decision grants the label and triggers exactly one rule step;
//! a negative one triggers neither.

use serde::{Deserialize, Serialize};

use crate::numkit::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryDecision {
    pub query: bool,
    pub score: f64,
    pub threshold_used: f64,
}

/// Query iff `score ≥ tau`.
pub fn fixed_threshold_decide(score: f64, tau: f64) -> QueryDecision {
    QueryDecision {
        query: score >= tau,
        score,
        threshold_used: tau,
    }
}

/// Query with probability `rate`. Consumes one uniform draw.
pub fn random_decide(rate: f64, rng: &mut RngStream) -> QueryDecision {
    let u = rng.uniform01();
    QueryDecision {
        query: u < rate,
        score: u,
        threshold_used: rate,
    }
}

/// Budget-driven adaptive threshold on a `K`-predictor vote score.
///
/// State is only the two counters, so saving and restoring them reproduces
/// every later decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetController {
    pub budget: f64,
    pub gamma_budget: f64,
    pub k: usize,
    pub queried_count: u64,
    pub seen_count: u64,
}

impl BudgetController {
    pub fn new(budget: f64, gamma_budget: f64, k: usize) -> Self {
        assert!((0.0..=1.0).contains(&budget), "budget must lie in [0, 1]");
        assert!(gamma_budget > 0.0, "gamma_budget must be positive");
        assert!(k >= 1, "K must be at least 1");
        Self {
            budget,
            gamma_budget,
            k,
            queried_count: 0,
            seen_count: 0,
        }
    }

    /// Realized query rate; 0 before any event.
    pub fn query_rate(&self) -> f64 {
        if self.seen_count == 0 {
            0.0
        } else {
            self.queried_count as f64 / self.seen_count as f64
        }
    }

    /// Rate error `Q_rate − B`, taken as `−B` before the first event.
    pub fn error(&self) -> f64 {
        if self.seen_count == 0 {
            -self.budget
        } else {
            self.query_rate() - self.budget
        }
    }

    /// Unquantized threshold `B + sign(ε)|ε|^γ`.
    pub fn continuous_threshold(&self) -> f64 {
        let e = self.error();
        let mag = e.abs().powf(self.gamma_budget);
        self.budget + if e > 0.0 { mag } else if e < 0.0 { -mag } else { 0.0 }
    }
}

/// Quantized threshold `n/K` with `n = round(K τ_cont)` (half away from
/// zero) clamped to `[0, K]`.
pub fn adaptive_threshold(ctrl: &BudgetController) -> f64 {
    let k = ctrl.k as f64;
    let n = (k * ctrl.continuous_threshold()).round().clamp(0.0, k);
    n / k
}

pub fn update_counts(ctrl: &mut BudgetController, decision: &QueryDecision) {
    ctrl.seen_count += 1;
    if decision.query {
        ctrl.queried_count += 1;
    }
}

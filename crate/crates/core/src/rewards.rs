//! Pool reward functions: the fair proportional scheme and the capped,
//! pledge-sensitive scheme, plus potential profit and the budget check.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RssError};
use crate::game::GameParams;

/// Slack allowed when comparing a pledge against the pool stake it sits in.
const PLEDGE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Fair,
    #[default]
    CapMargin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardScheme {
    pub kind: SchemeKind,
    pub params: GameParams,
}

impl RewardScheme {
    pub fn new(kind: SchemeKind, params: GameParams) -> Self {
        RewardScheme { kind, params }
    }

    pub fn fair(params: GameParams) -> Self {
        Self::new(SchemeKind::Fair, params)
    }

    pub fn cap_margin(params: GameParams) -> Self {
        Self::new(SchemeKind::CapMargin, params)
    }

    /// Reward of a pool with stake `sigma` and leader stake `lambda`.
    #[inline]
    pub fn pool_reward(&self, sigma: f64, lambda: f64) -> f64 {
        match self.kind {
            SchemeKind::Fair => reward_fair(sigma, &self.params),
            SchemeKind::CapMargin => reward_unchecked(sigma, lambda, &self.params),
        }
    }

    pub fn potential_profit(&self, lambda: f64, cost: f64) -> f64 {
        match self.kind {
            SchemeKind::Fair => reward_fair(self.params.beta(), &self.params) - cost,
            SchemeKind::CapMargin => potential_profit(lambda, cost, &self.params),
        }
    }
}

/// Proportional reward `σ·R`.
#[inline]
pub fn reward_fair(sigma: f64, params: &GameParams) -> f64 {
    sigma * params.total_reward
}

/// Capped reward `R/(1+α)·[σ′ + λ′α(σ′ − λ′(1 − σ′/β))/β]` with
/// `σ′ = min(σ, β)` and `λ′ = min(λ, β)`.
pub fn reward(sigma: f64, lambda: f64, params: &GameParams) -> Result<f64> {
    if !(lambda >= 0.0) || !(sigma >= 0.0) {
        return Err(RssError::Argument(format!(
            "pool stake and pledge must be non-negative (sigma={}, lambda={})",
            sigma, lambda
        )));
    }
    if lambda > sigma + PLEDGE_SLACK {
        return Err(RssError::Argument(format!(
            "pledge {} exceeds pool stake {}",
            lambda, sigma
        )));
    }
    Ok(reward_unchecked(sigma, lambda, params))
}

/// [`reward`] without the argument checks.
#[inline]
pub fn reward_unchecked(sigma: f64, lambda: f64, params: &GameParams) -> f64 {
    let beta = params.beta();
    let alpha = params.alpha;
    let s = sigma.min(beta);
    let l = lambda.min(beta);
    params.total_reward / (1.0 + alpha) * (s + l * alpha * (s - l * (1.0 - s / beta)) / beta)
}

/// `P(λ, c) = r(β, λ) − c`; pledges above `β` count as `β`.
#[inline]
pub fn potential_profit(lambda: f64, cost: f64, params: &GameParams) -> f64 {
    let beta = params.beta();
    reward_unchecked(beta, lambda.min(beta), params) - cost
}

/// Total reward paid to a set of `(σ, λ)` pools under the capped scheme.
pub fn budget_check(pools: &[(f64, f64)], params: &GameParams) -> Result<f64> {
    let tol = 1e-12;
    let sigma_sum: f64 = pools.iter().map(|p| p.0).sum();
    let pledge_sum: f64 = pools.iter().map(|p| p.1).sum();
    if sigma_sum > 1.0 + tol {
        return Err(RssError::Argument(format!(
            "pool stakes sum to {} > 1",
            sigma_sum
        )));
    }
    if pledge_sum > 1.0 + tol {
        return Err(RssError::Argument(format!(
            "pledges sum to {} > 1",
            pledge_sum
        )));
    }
    let mut total = 0.0;
    for &(sigma, lambda) in pools {
        total += reward(sigma, lambda, params)?;
    }
    debug_assert!(
        total <= params.total_reward + 1e-12,
        "budget exceeded: {}",
        total
    );
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(k: usize, alpha: f64) -> GameParams {
        GameParams::new(k + 5, k, 1.0, alpha).unwrap()
    }

    #[test]
    fn reference_values() {
        let g = p(10, 0.5);
        assert_eq!(reward(0.0, 0.0, &g).unwrap(), 0.0);
        assert!((reward(0.05, 0.02, &g).unwrap() - 0.036).abs() < 1e-15);
        assert!((reward(0.2, 0.05, &g).unwrap() - 1.0 / 12.0).abs() < 1e-15);
        assert!((reward(0.1, 0.1, &g).unwrap() - 0.1).abs() < 1e-15);
        assert!((potential_profit(0.02, 0.001, &g) - (0.11 / 1.5 - 0.001)).abs() < 1e-15);
        assert!(matches!(reward(0.01, 0.02, &g), Err(RssError::Argument(_))));
        assert_eq!(reward_fair(0.3, &g), 0.3);
    }

    #[test]
    fn break_even_cost_gives_zero_profit() {
        let g = p(10, 0.5);
        let c = reward(0.1, 0.03, &g).unwrap();
        assert_eq!(potential_profit(0.03, c, &g), 0.0);
    }

    #[test]
    fn budget_examples() {
        let g = p(10, 0.5);
        let ten = vec![(0.1, 0.1); 10];
        assert!((budget_check(&ten, &g).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(budget_check(&[], &g).unwrap(), 0.0);
        // σ′ = β and λ′ = β for a single oversized pool
        assert!((budget_check(&[(1.0, 0.1)], &g).unwrap() - 0.1).abs() < 1e-15);
        assert!(budget_check(&[(0.7, 0.1), (0.6, 0.1)], &g).is_err());
    }

    proptest! {
        #[test]
        fn zero_alpha_ignores_pledge(sigma in 0.0f64..1.0, frac in 0.0f64..1.0, k in 1usize..20) {
            let g = p(k, 0.0);
            let lambda = sigma * frac;
            let v = reward(sigma, lambda, &g).unwrap();
            prop_assert!((v - sigma.min(g.beta())).abs() < 1e-15);
        }

        #[test]
        fn cap_is_exact(extra in 0.0f64..1.0, frac in 0.0f64..1.0, alpha in 0.0f64..5.0, k in 1usize..20) {
            let g = p(k, alpha);
            let beta = g.beta();
            let lambda = beta * frac;
            let sigma = beta + extra * (1.0 - beta);
            prop_assert_eq!(reward(sigma, lambda, &g).unwrap(), reward(beta, lambda, &g).unwrap());
        }

        #[test]
        fn saturated_reward_monotone_in_pledge(a in 0.0f64..1.0, b in 0.0f64..1.0, alpha in 0.0f64..5.0, k in 1usize..20) {
            let g = p(k, alpha);
            let beta = g.beta();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(reward(beta, lo * beta, &g).unwrap() <= reward(beta, hi * beta, &g).unwrap() + 1e-15);
        }
    }
}

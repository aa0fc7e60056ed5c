//! Instance generators shared by the integration tests.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rss_lab::game::{cap_and_normalize, GameParams, Population};

/// A random population with `n ≤ n_max` players, `k` drawn from `ks`,
/// Pareto(2) stakes capped at `β` and normalized, costs in
/// `[0.001, 0.02]`, and a positive potential profit at rank `k+1`.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    n_max: usize,
    ks: &[usize],
) -> (Population, GameParams) {
    loop {
        let k = ks[rng.random_range(0..ks.len())];
        let n = rng.random_range(k + 2..=n_max);
        let alpha = rng.random_range(0.0..0.5);
        let params = GameParams::new(n, k, 1.0, alpha).unwrap();
        let raw: Vec<f64> = (0..n)
            .map(|_| (1.0 - rng.random::<f64>()).powf(-0.5))
            .collect();
        let stakes = cap_and_normalize(&raw, params.beta()).unwrap();
        let pairs: Vec<(f64, f64)> = stakes
            .into_iter()
            .map(|s| (s, rng.random_range(0.001..0.02)))
            .collect();
        let mut pop = Population::from_pairs(&pairs);
        pop.perturb_ties(&params);
        let p = pop.potential_profits(&params);
        let order = pop.potential_order(&params);
        if p[order[k]] > 0.0 {
            return (pop, params);
        }
    }
}

/// `P(λ, c) = R(β + αλ)/(1+α) − c` for `λ ≤ β`, written out directly.
pub fn potential_profit(stake: f64, cost: f64, params: &GameParams) -> f64 {
    let beta = 1.0 / params.k as f64;
    params.total_reward * (beta + params.alpha * stake.min(beta)) / (1.0 + params.alpha) - cost
}

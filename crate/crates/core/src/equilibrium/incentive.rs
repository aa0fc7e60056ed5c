//! Gain from misreporting one's cost at the perfect equilibrium.

use serde::Serialize;

use crate::error::{Result, RssError};
use crate::game::{GameParams, Population};
use crate::strategy::{nm_utility, RankMode};

use super::{build_perfect, perfect_utilities};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncentiveOutcome {
    /// `u(ĉ | c) − u(c | c)`.
    pub delta: f64,
    pub truthful_utility: f64,
    pub lying_utility: f64,
    /// 1-based potential-profit rank under the true and declared costs.
    pub rank_truthful: usize,
    pub rank_declared: usize,
    /// The declaration moves the player across the leader boundary `k`.
    pub rank_changed: bool,
}

/// Utility change for `player` declaring `declared_cost` instead of its
/// true cost. The perfect strategy is rebuilt from the declared costs and
/// the true cost is then charged to the player's own pool, if it runs one.
pub fn incentive_compat_delta(
    pop: &Population,
    params: &GameParams,
    player: usize,
    declared_cost: f64,
) -> Result<IncentiveOutcome> {
    if player >= pop.len() {
        return Err(RssError::Argument(format!("no player {}", player)));
    }
    if !(declared_cost >= 0.0) || !declared_cost.is_finite() {
        return Err(RssError::Argument(format!(
            "invalid declared cost {}",
            declared_cost
        )));
    }
    let truthful = perfect_utilities(pop, params)?[player];
    let lied = pop.with_cost(player, declared_cost);
    let perfect = build_perfect(&lied, params)?;
    let mut lying = nm_utility(player, &perfect.joint, &lied, params, RankMode::SingleStage);
    if perfect.joint.is_active(player) {
        lying += declared_cost - pop.cost(player);
    }
    let rank_truthful = pop.potential_ranks(params)[player];
    let rank_declared = lied.potential_ranks(params)[player];
    let k = params.k;
    Ok(IncentiveOutcome {
        delta: lying - truthful,
        truthful_utility: truthful,
        lying_utility: lying,
        rank_truthful,
        rank_declared,
        rank_changed: (rank_truthful <= k) != (rank_declared <= k),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance() -> (Population, GameParams) {
        let pop = Population::from_pairs(&[
            (0.3, 0.010),
            (0.25, 0.012),
            (0.2, 0.030),
            (0.15, 0.045),
            (0.1, 0.080),
        ]);
        (pop, GameParams::new(5, 2, 1.0, 0.3).unwrap())
    }

    #[test]
    fn leader_lie_within_rank_is_neutral() {
        let (pop, g) = instance();
        let order = pop.potential_order(&g);
        let leader = order[0];
        let out = incentive_compat_delta(&pop, &g, leader, pop.cost(leader) + 1e-4).unwrap();
        assert!(!out.rank_changed);
        assert!(out.delta.abs() < 1e-12, "{:?}", out);
    }

    #[test]
    fn deep_member_lie_is_neutral() {
        let (pop, g) = instance();
        let last = *pop.potential_order(&g).last().unwrap();
        let out = incentive_compat_delta(&pop, &g, last, pop.cost(last) * 0.9).unwrap();
        assert_eq!(out.rank_truthful, 5);
        assert!(out.delta.abs() < 1e-12);
    }

    #[test]
    fn leader_dropping_out_does_not_gain() {
        let (pop, g) = instance();
        let leader = pop.potential_order(&g)[0];
        let out = incentive_compat_delta(&pop, &g, leader, 0.2).unwrap();
        assert!(out.rank_changed);
        assert!(out.delta <= 1e-12, "{:?}", out);
    }

    #[test]
    fn first_non_leader_gains_by_understating() {
        let (pop, g) = instance();
        let order = pop.potential_order(&g);
        let pp = pop.potential_profits(&g);
        let j = order[g.k];
        // stay below the k-th leader
        let gap = pp[order[g.k - 1]] - pp[j];
        let c_hat = pop.cost(j) - 0.5 * gap;
        let out = incentive_compat_delta(&pop, &g, j, c_hat).unwrap();
        assert_eq!(out.rank_declared, out.rank_truthful);
        let expected = (pop.cost(j) - c_hat) * pop.stake(j) / g.beta();
        assert!(
            (out.delta - expected).abs() < 1e-12,
            "{:?} vs {}",
            out,
            expected
        );
    }
}

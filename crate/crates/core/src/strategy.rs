//! Strategies, pools, desirability, ranking, non-myopic stake and the two
//! utility notions (myopic and non-myopic) of the stake-pools game.
//!
//! A player's own pool is described by `active`, `margin` and `pledge`;
//! stake placed in other players' pools lives in `delegations`. Pool
//! stakes are cached on the joint strategy and recomputed exactly for the
//! pools touched by each update.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RssError};
use crate::game::{GameParams, Population};
use crate::rewards::{potential_profit, reward_unchecked, RewardScheme};

/// Absolute tolerance under which two desirabilities count as tied.
pub const TIE_EPS: f64 = 1e-12;

/// Slack allowed when a player's allocations are summed against its stake.
pub const ALLOC_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub margin: f64,
    pub pledge: f64,
    pub active: bool,
    pub delegations: BTreeMap<usize, f64>,
}

impl Strategy {
    /// A player that runs no pool and delegates nothing.
    pub fn passive(stake: f64) -> Self {
        Strategy {
            margin: 0.0,
            pledge: stake,
            active: false,
            delegations: BTreeMap::new(),
        }
    }

    /// A pool leader pledging `pledge` with no outside delegations.
    pub fn leader(margin: f64, pledge: f64) -> Self {
        Strategy {
            margin,
            pledge,
            active: true,
            delegations: BTreeMap::new(),
        }
    }

    /// Stake the player has placed anywhere, own pool included.
    pub fn allocated(&self) -> f64 {
        let own = if self.active { self.pledge } else { 0.0 };
        own + self.delegations.values().sum::<f64>()
    }

    /// `a_{i,j}` for this player `i`.
    pub fn allocation_to(&self, me: usize, pool: usize) -> f64 {
        if pool == me {
            if self.active {
                self.pledge
            } else {
                0.0
            }
        } else {
            self.delegations.get(&pool).copied().unwrap_or(0.0)
        }
    }
}

/// One strategy per player plus the cached pool stakes.
#[derive(Debug, Clone, PartialEq)]
pub struct JointStrategy {
    strategies: Vec<Strategy>,
    inflow: Vec<f64>,
}

impl JointStrategy {
    pub fn new(strategies: Vec<Strategy>, pop: &Population) -> Result<Self> {
        if strategies.len() != pop.len() {
            return Err(RssError::Argument(format!(
                "{} strategies for {} players",
                strategies.len(),
                pop.len()
            )));
        }
        for (i, s) in strategies.iter().enumerate() {
            validate_strategy(i, s, pop)?;
        }
        let mut j = JointStrategy {
            inflow: vec![0.0; strategies.len()],
            strategies,
        };
        for p in 0..j.inflow.len() {
            j.inflow[p] = j.sum_inflow(p);
        }
        Ok(j)
    }

    /// Every player passive: no pools and no delegations.
    pub fn inactive(pop: &Population) -> Self {
        let strategies = pop
            .players()
            .iter()
            .map(|p| Strategy::passive(p.stake))
            .collect();
        JointStrategy {
            inflow: vec![0.0; pop.len()],
            strategies,
        }
    }

    pub fn len(&self) -> usize {
        self.strategies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }

    pub fn strategies(&self) -> &[Strategy] {
        &self.strategies
    }

    pub fn strategy(&self, i: usize) -> &Strategy {
        &self.strategies[i]
    }

    pub fn is_active(&self, j: usize) -> bool {
        self.strategies[j].active
    }

    pub fn active_pools(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.is_active(j)).collect()
    }

    /// Stake delegated to pool `j` by players other than `j`, whether or
    /// not the pool is active.
    pub fn inflow(&self, j: usize) -> f64 {
        self.inflow[j]
    }

    /// Pool stake `σ_j`; zero for an inactive pool.
    pub fn sigma(&self, j: usize) -> f64 {
        let s = &self.strategies[j];
        if s.active {
            s.pledge + self.inflow[j]
        } else {
            0.0
        }
    }

    pub fn sigmas(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.sigma(j)).collect()
    }

    pub fn allocation(&self, i: usize, j: usize) -> f64 {
        self.strategies[i].allocation_to(i, j)
    }

    pub fn unallocated(&self, i: usize, pop: &Population) -> f64 {
        (pop.stake(i) - self.strategies[i].allocated()).max(0.0)
    }

    /// Stake of player `i` sitting in inactive pools.
    pub fn stranded(&self, i: usize) -> f64 {
        self.strategies[i]
            .delegations
            .iter()
            .filter(|(j, _)| !self.strategies[**j].active)
            .map(|(_, a)| *a)
            .sum()
    }

    /// Replaces the strategy of player `i` and refreshes the cached pool
    /// stakes it touches.
    pub fn set_strategy(&mut self, i: usize, s: Strategy, pop: &Population) -> Result<()> {
        validate_strategy(i, &s, pop)?;
        self.replace_unchecked(i, s);
        Ok(())
    }

    pub(crate) fn replace_unchecked(&mut self, i: usize, s: Strategy) {
        let old = std::mem::replace(&mut self.strategies[i], s);
        let mut touched: Vec<usize> = old.delegations.keys().copied().collect();
        touched.extend(self.strategies[i].delegations.keys().copied());
        touched.sort_unstable();
        touched.dedup();
        for p in touched {
            self.inflow[p] = self.sum_inflow(p);
        }
    }

    /// Removes every delegation made to an inactive pool.
    pub fn clear_stranded(&mut self) {
        let inactive: Vec<bool> = self.strategies.iter().map(|s| !s.active).collect();
        for s in &mut self.strategies {
            s.delegations.retain(|j, _| !inactive[*j]);
        }
        for p in 0..self.inflow.len() {
            self.inflow[p] = self.sum_inflow(p);
        }
    }

    fn sum_inflow(&self, p: usize) -> f64 {
        self.strategies
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != p)
            .filter_map(|(_, s)| s.delegations.get(&p))
            .sum()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let strategies: Vec<StrategyJson> = self
            .strategies
            .iter()
            .enumerate()
            .map(|(id, s)| {
                let mut alloc = BTreeMap::new();
                if s.active {
                    alloc.insert(id.to_string(), s.pledge);
                }
                for (j, a) in &s.delegations {
                    alloc.insert(j.to_string(), *a);
                }
                StrategyJson {
                    id,
                    margin: s.margin,
                    pledge: s.pledge,
                    alloc,
                }
            })
            .collect();
        serde_json::to_value(JointJson { strategies }).expect("joint strategy serializes")
    }

    pub fn from_json(value: &serde_json::Value, pop: &Population) -> Result<Self> {
        let parsed: JointJson = serde_json::from_value(value.clone())
            .map_err(|e| RssError::Argument(format!("joint strategy json: {}", e)))?;
        let mut strategies = vec![None; pop.len()];
        for sj in parsed.strategies {
            if sj.id >= pop.len() {
                return Err(RssError::Argument(format!("unknown player id {}", sj.id)));
            }
            let mut s = Strategy {
                margin: sj.margin,
                pledge: sj.pledge,
                active: false,
                delegations: BTreeMap::new(),
            };
            for (key, a) in sj.alloc {
                let j: usize = key
                    .parse()
                    .map_err(|_| RssError::Argument(format!("bad pool id {:?}", key)))?;
                if j == sj.id {
                    if a != sj.pledge {
                        return Err(RssError::Argument(format!(
                            "player {} self allocation {} differs from pledge {}",
                            sj.id, a, sj.pledge
                        )));
                    }
                    s.active = true;
                } else {
                    s.delegations.insert(j, a);
                }
            }
            strategies[sj.id] = Some(s);
        }
        let strategies = strategies
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| RssError::Argument(format!("missing player {}", i))))
            .collect::<Result<Vec<_>>>()?;
        JointStrategy::new(strategies, pop)
    }
}

#[derive(Serialize, Deserialize)]
struct StrategyJson {
    id: usize,
    margin: f64,
    pledge: f64,
    alloc: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct JointJson {
    strategies: Vec<StrategyJson>,
}

fn validate_strategy(i: usize, s: &Strategy, pop: &Population) -> Result<()> {
    let stake = pop.stake(i);
    if !(0.0..=1.0).contains(&s.margin) {
        return Err(RssError::Argument(format!(
            "player {} margin {} outside [0,1]",
            i, s.margin
        )));
    }
    if !(s.pledge > 0.0) || s.pledge > stake + ALLOC_SLACK {
        return Err(RssError::Argument(format!(
            "player {} pledge {} outside (0, {}]",
            i, s.pledge, stake
        )));
    }
    for (&j, &a) in &s.delegations {
        if j == i || j >= pop.len() {
            return Err(RssError::Argument(format!(
                "player {} delegates to invalid pool {}",
                i, j
            )));
        }
        if !(a >= 0.0) {
            return Err(RssError::Argument(format!(
                "player {} negative allocation",
                i
            )));
        }
    }
    if s.allocated() > stake + ALLOC_SLACK {
        return Err(RssError::Argument(format!(
            "player {} allocates {} but owns {}",
            i,
            s.allocated(),
            stake
        )));
    }
    Ok(())
}

/// Desirability `(1 − m)·P(λ, c)⁺`; zero for an inactive pool.
pub fn desirability(margin: f64, pledge: f64, cost: f64, params: &GameParams, active: bool) -> f64 {
    if !active {
        return 0.0;
    }
    let p = potential_profit(pledge, cost, params);
    if p < 0.0 {
        0.0
    } else {
        (1.0 - margin) * p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// Higher potential profit first, then lower id.
    #[default]
    PotentialProfit,
    LowestId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMode {
    /// Every player is ranked; players without a pool are ranked through a
    /// hypothetical pool built from their margin, cost and full stake.
    SingleStage,
    /// Only active pools carry desirability; inactive ones rank last.
    TwoStage(TieRule),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingTable {
    pub desirability: Vec<f64>,
    pub potential: Vec<f64>,
    /// 1-based rank of each pool.
    pub rank: Vec<usize>,
    /// Pool ids by rank.
    pub order: Vec<usize>,
    pub sigma_nm: Vec<f64>,
    pub saturated: Vec<bool>,
    /// Rank at most `k` with positive desirability.
    pub top_k: Vec<bool>,
}

/// Orders pools by desirability. Values within [`TIE_EPS`] of the head of
/// their run are tied and ordered by `tie`.
pub fn rank_order(desirability: &[f64], potential: &[f64], tie: TieRule) -> Vec<usize> {
    let n = desirability.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| desirability[b].total_cmp(&desirability[a]).then(a.cmp(&b)));
    let mut start = 0;
    while start < n {
        let head = desirability[order[start]];
        let mut end = start + 1;
        while end < n && head - desirability[order[end]] <= TIE_EPS {
            end += 1;
        }
        if end - start > 1 {
            let group = &mut order[start..end];
            match tie {
                TieRule::PotentialProfit => {
                    group.sort_by(|&a, &b| potential[b].total_cmp(&potential[a]).then(a.cmp(&b)))
                }
                TieRule::LowestId => group.sort_unstable(),
            }
        }
        start = end;
    }
    order
}

/// Ranks the pools of `joint` and derives their non-myopic stakes.
pub fn rank_pools(
    joint: &JointStrategy,
    pop: &Population,
    params: &GameParams,
    mode: RankMode,
) -> RankingTable {
    let n = joint.len();
    let mut d = vec![0.0; n];
    let mut pot = vec![0.0; n];
    for j in 0..n {
        let s = joint.strategy(j);
        let (pledge, counts) = match mode {
            RankMode::SingleStage => (if s.active { s.pledge } else { pop.stake(j) }, true),
            RankMode::TwoStage(_) => (s.pledge, s.active),
        };
        pot[j] = potential_profit(pledge, pop.cost(j), params);
        d[j] = desirability(s.margin, pledge, pop.cost(j), params, counts);
    }
    let tie = match mode {
        RankMode::SingleStage => TieRule::PotentialProfit,
        RankMode::TwoStage(t) => t,
    };
    let order = rank_order(&d, &pot, tie);
    table_from_order(joint, params, d, pot, order)
}

pub(crate) fn table_from_order(
    joint: &JointStrategy,
    params: &GameParams,
    desirability: Vec<f64>,
    potential: Vec<f64>,
    order: Vec<usize>,
) -> RankingTable {
    let n = order.len();
    let beta = params.beta();
    let mut rank = vec![0; n];
    for (pos, &j) in order.iter().enumerate() {
        rank[j] = pos + 1;
    }
    let mut sigma_nm = vec![0.0; n];
    let mut saturated = vec![false; n];
    let mut top_k = vec![false; n];
    for j in 0..n {
        let sigma = joint.sigma(j);
        top_k[j] = rank[j] <= params.k && desirability[j] > 0.0;
        sigma_nm[j] = if top_k[j] {
            sigma.max(beta)
        } else {
            joint.allocation(j, j)
        };
        saturated[j] = sigma >= beta;
    }
    RankingTable {
        desirability,
        potential,
        rank,
        order,
        sigma_nm,
        saturated,
        top_k,
    }
}

/// Non-myopic value to a member placing `a` in active pool `j`, when the
/// pool already holds `others` from everyone else (pledge included).
#[inline]
pub fn member_nm_value(
    j: usize,
    a: f64,
    others: f64,
    joint: &JointStrategy,
    table: &RankingTable,
    pop: &Population,
    params: &GameParams,
) -> f64 {
    if a <= 0.0 || !joint.is_active(j) {
        return 0.0;
    }
    let s = joint.strategy(j);
    if table.top_k[j] {
        table.desirability[j] * a / (others + a).max(params.beta())
    } else {
        let pooled = s.pledge + a;
        let profit = reward_unchecked(pooled, s.pledge, params) - pop.cost(j);
        if profit <= 0.0 {
            0.0
        } else {
            (1.0 - s.margin) * profit * a / pooled
        }
    }
}

/// Non-myopic utility a leader draws from its own pool of stake `sigma`.
#[inline]
pub fn leader_nm_value(
    i: usize,
    sigma: f64,
    joint: &JointStrategy,
    table: &RankingTable,
    pop: &Population,
    params: &GameParams,
) -> f64 {
    let s = joint.strategy(i);
    if !s.active {
        return 0.0;
    }
    let snm = if table.top_k[i] {
        sigma.max(params.beta())
    } else {
        s.pledge
    };
    let profit = reward_unchecked(snm, s.pledge, params) - pop.cost(i);
    if profit < 0.0 {
        profit
    } else {
        profit * (s.margin + (1.0 - s.margin) * s.pledge / snm)
    }
}

/// Non-myopic utility of `player` given a ranking of `joint`.
pub fn nm_utility_with(
    player: usize,
    joint: &JointStrategy,
    table: &RankingTable,
    pop: &Population,
    params: &GameParams,
) -> f64 {
    let s = joint.strategy(player);
    let mut u = leader_nm_value(player, joint.sigma(player), joint, table, pop, params);
    for (&j, &a) in &s.delegations {
        let others = joint.sigma(j) - a;
        u += member_nm_value(j, a, others, joint, table, pop, params);
    }
    u
}

/// Non-myopic utility of `player`.
pub fn nm_utility(
    player: usize,
    joint: &JointStrategy,
    pop: &Population,
    params: &GameParams,
    mode: RankMode,
) -> f64 {
    let table = rank_pools(joint, pop, params, mode);
    nm_utility_with(player, joint, &table, pop, params)
}

pub fn nm_utilities(
    joint: &JointStrategy,
    pop: &Population,
    params: &GameParams,
    mode: RankMode,
) -> Vec<f64> {
    let table = rank_pools(joint, pop, params, mode);
    (0..joint.len())
        .map(|i| nm_utility_with(i, joint, &table, pop, params))
        .collect()
}

/// Myopic value of placing `a` in pool `j` whose total stake is `sigma`.
#[inline]
pub fn member_myopic_value(
    j: usize,
    a: f64,
    sigma: f64,
    joint: &JointStrategy,
    pop: &Population,
    scheme: &RewardScheme,
) -> f64 {
    if a <= 0.0 || !joint.is_active(j) || sigma <= 0.0 {
        return 0.0;
    }
    let s = joint.strategy(j);
    let profit = scheme.pool_reward(sigma, s.pledge) - pop.cost(j);
    if profit <= 0.0 {
        0.0
    } else {
        a / sigma * profit * (1.0 - s.margin)
    }
}

#[inline]
pub fn leader_myopic_value(
    i: usize,
    sigma: f64,
    joint: &JointStrategy,
    pop: &Population,
    scheme: &RewardScheme,
) -> f64 {
    let s = joint.strategy(i);
    if !s.active {
        return 0.0;
    }
    let profit = scheme.pool_reward(sigma, s.pledge) - pop.cost(i);
    if profit <= 0.0 {
        profit
    } else {
        (s.margin + (1.0 - s.margin) * s.pledge / sigma) * profit
    }
}

/// Myopic utility of `player` under `scheme`.
pub fn myopic_utility(
    player: usize,
    joint: &JointStrategy,
    pop: &Population,
    scheme: &RewardScheme,
) -> f64 {
    let s = joint.strategy(player);
    let mut u = leader_myopic_value(player, joint.sigma(player), joint, pop, scheme);
    for (&j, &a) in &s.delegations {
        u += member_myopic_value(j, a, joint.sigma(j), joint, pop, scheme);
    }
    u
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolState {
    pub leader: usize,
    pub sigma: f64,
    pub pledge: f64,
    pub margin: f64,
    pub active: bool,
    /// Stake delegated to the pool while it is inactive.
    pub stranded: f64,
}

pub fn pool_states(joint: &JointStrategy) -> Vec<PoolState> {
    (0..joint.len())
        .map(|j| {
            let s = joint.strategy(j);
            PoolState {
                leader: j,
                sigma: joint.sigma(j),
                pledge: s.pledge,
                margin: s.margin,
                active: s.active,
                stranded: if s.active { 0.0 } else { joint.inflow(j) },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::rewards::SchemeKind;
    use proptest::prelude::*;

    fn params(n: usize, k: usize, alpha: f64) -> GameParams {
        GameParams::new(n, k, 1.0, alpha).unwrap()
    }

    #[test]
    fn desirability_examples() {
        let g = params(20, 10, 0.5);
        // choose a cost giving P = 0.08 for a pledge of 0.02
        let c = potential_profit(0.02, 0.0, &g) - 0.08;
        assert!((desirability(0.25, 0.02, c, &g, true) - 0.06).abs() < 1e-15);
        assert_eq!(desirability(0.25, 0.02, 0.5, &g, true), 0.0);
        assert_eq!(desirability(1.0, 0.02, c, &g, true), 0.0);
        assert_eq!(desirability(0.0, 0.02, c, &g, false), 0.0);
    }

    #[test]
    fn ties_break_by_potential_profit() {
        let order = rank_order(
            &[0.06, 0.06, 0.05],
            &[0.08, 0.09, 0.07],
            TieRule::PotentialProfit,
        );
        assert_eq!(order, vec![1, 0, 2]);
        let order = rank_order(
            &[0.06, 0.06, 0.05],
            &[0.09, 0.08, 0.07],
            TieRule::PotentialProfit,
        );
        assert_eq!(order, vec![0, 1, 2]);
        let order = rank_order(&[0.0, 0.0, 0.0], &[0.01, 0.03, 0.02], TieRule::LowestId);
        assert_eq!(order, vec![0, 1, 2]);
    }

    fn small_pop() -> Population {
        Population::from_pairs(&[(0.05, 0.001), (0.03, 0.002), (0.02, 0.001), (0.9, 0.5)])
    }

    #[test]
    fn pool_stake_and_stranding() {
        let pop = small_pop();
        let mut j = JointStrategy::inactive(&pop);
        assert!(j.sigmas().iter().all(|&s| s == 0.0));
        j.set_strategy(0, Strategy::leader(0.1, 0.05), &pop)
            .unwrap();
        let mut m = Strategy::passive(0.03);
        m.delegations.insert(0, 0.03);
        j.set_strategy(1, m, &pop).unwrap();
        assert!((j.sigma(0) - 0.08).abs() < 1e-15);
        let mut d = Strategy::passive(0.02);
        d.delegations.insert(3, 0.02);
        j.set_strategy(2, d, &pop).unwrap();
        let states = pool_states(&j);
        assert_eq!(states[3].sigma, 0.0);
        assert!(!states[3].active);
        assert_eq!(states[3].stranded, 0.02);
        assert_eq!(j.stranded(2), 0.02);
    }

    #[test]
    fn member_example_value() {
        let g = params(20, 10, 0.5);
        let pop = Population::from_pairs(&[(0.02, 0.001), (0.01, 0.003)]);
        let mut j = JointStrategy::inactive(&pop);
        j.replace_unchecked(0, Strategy::leader(0.0, 0.02));
        let mut m = Strategy::passive(0.01);
        m.delegations.insert(0, 0.01);
        j.replace_unchecked(1, m);
        let t = rank_pools(&j, &pop, &g, RankMode::TwoStage(TieRule::PotentialProfit));
        assert!(t.top_k[0]);
        assert_eq!(t.sigma_nm[0], 0.1);
        let u = nm_utility_with(1, &j, &t, &pop, &g);
        assert!((u - 0.007_233_333_333_333_333).abs() < 1e-15, "{}", u);
    }

    #[test]
    fn leader_loss_branch_ignores_margin() {
        let g = params(20, 10, 0.5);
        let pop = Population::from_pairs(&[(0.02, 0.09), (0.01, 0.003)]);
        let mut j = JointStrategy::inactive(&pop);
        j.replace_unchecked(0, Strategy::leader(0.7, 0.02));
        let t = rank_pools(&j, &pop, &g, RankMode::TwoStage(TieRule::PotentialProfit));
        let u = nm_utility_with(0, &j, &t, &pop, &g);
        let expect = reward_unchecked(0.02, 0.02, &g) - 0.09;
        assert!(u < 0.0);
        assert_eq!(u, expect);
    }

    #[test]
    fn myopic_examples() {
        let g = params(5, 1, 0.0);
        let fair = RewardScheme::new(SchemeKind::Fair, g);
        let pop = Population::from_pairs(&[(0.3, 0.5), (0.2, 0.9), (0.5, 0.9)]);
        let mut j = JointStrategy::inactive(&pop);
        let mut lead = Strategy::leader(0.0, 0.3);
        lead.pledge = 0.3;
        j.replace_unchecked(0, lead);
        let mut m1 = Strategy::passive(0.2);
        m1.delegations.insert(0, 0.2);
        j.replace_unchecked(1, m1);
        let mut m2 = Strategy::passive(0.5);
        m2.delegations.insert(0, 0.5);
        j.replace_unchecked(2, m2);
        assert!((myopic_utility(1, &j, &pop, &fair) - 0.1).abs() < 1e-15);
        let pop2 = Population::from_pairs(&[(0.3, 0.1), (0.7, 0.9)]);
        let mut solo = JointStrategy::inactive(&pop2);
        solo.replace_unchecked(0, Strategy::leader(0.0, 0.3));
        assert!((myopic_utility(0, &solo, &pop2, &fair) - 0.2).abs() < 1e-15);
        let pop3 = Population::from_pairs(&[(0.3, 0.8), (0.7, 0.9)]);
        let mut loss = JointStrategy::inactive(&pop3);
        loss.replace_unchecked(0, Strategy::leader(0.0, 0.3));
        let mut mm = Strategy::passive(0.2);
        mm.delegations.insert(0, 0.2);
        loss.replace_unchecked(1, mm);
        assert_eq!(myopic_utility(1, &loss, &pop3, &fair), 0.0);
    }

    #[test]
    fn json_round_trip() {
        let pop = small_pop();
        let mut j = JointStrategy::inactive(&pop);
        j.replace_unchecked(0, Strategy::leader(0.1, 0.05));
        let mut m = Strategy::passive(0.03);
        m.delegations.insert(0, 0.02);
        j.replace_unchecked(1, m);
        let v = j.to_json();
        assert_eq!(v["strategies"][0]["alloc"]["0"], 0.05);
        let back = JointStrategy::from_json(&v, &pop).unwrap();
        assert_eq!(back, j);
    }

    fn random_joint(pop: &Population, n_pools: usize, seeds: &[f64]) -> JointStrategy {
        let n = pop.len();
        let mut j = JointStrategy::inactive(pop);
        for i in 0..n_pools.min(n) {
            let m = seeds[i % seeds.len()];
            j.replace_unchecked(i, Strategy::leader(m, pop.stake(i) * (0.5 + 0.5 * m)));
        }
        for i in n_pools.min(n)..n {
            let mut s = Strategy::passive(pop.stake(i));
            let mut left = pop.stake(i);
            for (t, &f) in seeds.iter().enumerate().take(3) {
                let target = (i + t) % n_pools.max(1);
                if target == i {
                    continue;
                }
                let a = left * f * 0.9;
                *s.delegations.entry(target).or_insert(0.0) += a;
                left -= a;
            }
            j.replace_unchecked(i, s);
        }
        j
    }

    proptest! {
        #[test]
        fn member_utility_is_bounded_by_saturation_share(
            raw in prop::collection::vec((0.01f64..1.0, 0.0005f64..0.01), 6..12),
            k in 1usize..4, alpha in 0.0f64..1.0, pools in 1usize..5,
            seeds in prop::collection::vec(0.0f64..1.0, 3)
        ) {
            let n = raw.len();
            let total: f64 = raw.iter().map(|r| r.0).sum();
            let pairs: Vec<(f64, f64)> = raw.iter().map(|&(s, c)| (s / total, c)).collect();
            let pop = Population::from_pairs(&pairs);
            let g = GameParams::new(n, k, 1.0, alpha).unwrap();
            let j = random_joint(&pop, pools, &seeds);
            for mode in [RankMode::SingleStage, RankMode::TwoStage(TieRule::PotentialProfit)] {
                let t = rank_pools(&j, &pop, &g, mode);
                let dmax = t.desirability.iter().cloned().fold(0.0, f64::max);
                for i in 0..n {
                    if j.is_active(i) { continue; }
                    let u = nm_utility_with(i, &j, &t, &pop, &g);
                    prop_assert!(u <= dmax * pop.stake(i) / g.beta() + 1e-12);
                }
            }
        }

        #[test]
        fn ranking_ignores_member_stake(
            raw in prop::collection::vec((0.01f64..1.0, 0.0005f64..0.01), 6..12),
            k in 1usize..4, alpha in 0.0f64..1.0, pools in 1usize..5,
            seeds in prop::collection::vec(0.0f64..1.0, 3),
            seeds2 in prop::collection::vec(0.0f64..1.0, 3)
        ) {
            let n = raw.len();
            let total: f64 = raw.iter().map(|r| r.0).sum();
            let pairs: Vec<(f64, f64)> = raw.iter().map(|&(s, c)| (s / total, c)).collect();
            let pop = Population::from_pairs(&pairs);
            let g = GameParams::new(n, k, 1.0, alpha).unwrap();
            let a = random_joint(&pop, pools, &seeds);
            let mut b = a.clone();
            let other = random_joint(&pop, pools, &seeds2);
            for i in pools.min(n)..n {
                b.replace_unchecked(i, other.strategy(i).clone());
            }
            let ta = rank_pools(&a, &pop, &g, RankMode::SingleStage);
            let tb = rank_pools(&b, &pop, &g, RankMode::SingleStage);
            prop_assert_eq!(&ta.rank, &tb.rank);
            prop_assert_eq!(&ta.desirability, &tb.desirability);
            for j in 0..n {
                if ta.rank[j] <= k && ta.desirability[j] > 0.0 {
                    prop_assert!(ta.sigma_nm[j] >= a.sigma(j));
                } else {
                    prop_assert_eq!(ta.sigma_nm[j], a.allocation(j, j));
                }
            }
        }

        #[test]
        fn utilities_agree_at_anticipated_sizes(
            raw in prop::collection::vec((0.05f64..1.0, 0.0005f64..0.005), 8..12),
            alpha in 0.0f64..1.0, margin in 0.0f64..0.9
        ) {
            // Two saturated top pools and passive members: σ = σ^NM everywhere.
            let n = raw.len();
            let k = 2;
            let beta = 0.5;
            let pop_stakes: Vec<f64> = {
                let total: f64 = raw.iter().skip(2).map(|r| r.0).sum();
                let mut v = vec![0.1, 0.1];
                v.extend(raw.iter().skip(2).map(|r| r.0 / total * 0.8));
                v
            };
            let pairs: Vec<(f64, f64)> = pop_stakes.iter().zip(&raw).map(|(&s, r)| (s, r.1)).collect();
            let pop = Population::from_pairs(&pairs);
            let g = GameParams::new(n, k, 1.0, alpha).unwrap();
            let mut j = JointStrategy::inactive(&pop);
            j.replace_unchecked(0, Strategy::leader(margin, 0.1));
            j.replace_unchecked(1, Strategy::leader(margin, 0.1));
            let mut fill = [beta - 0.1, beta - 0.1];
            for i in 2..n {
                let mut s = Strategy::passive(pop.stake(i));
                let mut left = pop.stake(i);
                for (p, room) in fill.iter_mut().enumerate() {
                    let x = left.min(*room);
                    if x > 0.0 {
                        s.delegations.insert(p, x);
                        *room -= x;
                        left -= x;
                    }
                }
                j.replace_unchecked(i, s);
            }
            let scheme = RewardScheme::cap_margin(g);
            let t = rank_pools(&j, &pop, &g, RankMode::TwoStage(TieRule::PotentialProfit));
            prop_assume!(t.top_k[0] && t.top_k[1]);
            prop_assume!((j.sigma(0) - beta).abs() < 1e-12 && (j.sigma(1) - beta).abs() < 1e-12);
            for i in 0..n {
                let a = nm_utility_with(i, &j, &t, &pop, &g);
                let b = myopic_utility(i, &j, &pop, &scheme);
                prop_assert!((a - b).abs() < 1e-12, "player {}: {} vs {}", i, a, b);
            }
        }
    }
}

//! Fast evaluation of one player's unilateral deviations.
//!
//! Desirability depends only on a pool's margin, pledge and cost, so once a
//! deviator fixes its own pool configuration the ranking is fixed too and
//! its utility splits into a leader term plus one independent term per pool
//! it delegates to. A [`DeviationContext`] caches everything that does not
//! depend on the deviator; a [`Frame`] adds the ranking for one own-pool
//! configuration.

use crate::game::{GameParams, Population};
use crate::rewards::{potential_profit, reward_unchecked, RewardScheme};
use crate::strategy::{desirability, rank_order, JointStrategy, RankMode, TieRule};

/// Which utility players maximize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UtilityKind {
    NonMyopic(RankMode),
    Myopic(RewardScheme),
}

/// The deviator's own pool configuration together with the ranking it
/// induces.
#[derive(Debug, Clone)]
pub struct Frame {
    pub active: bool,
    pub margin: f64,
    pub pledge: f64,
    pub desirability: Vec<f64>,
    pub top_k: Vec<bool>,
}

pub struct DeviationContext<'a> {
    pub joint: &'a JointStrategy,
    pub pop: &'a Population,
    pub params: &'a GameParams,
    pub utility: UtilityKind,
    pub player: usize,
    base_d: Vec<f64>,
    base_p: Vec<f64>,
    /// Stake in pool `j` from everyone except the deviator (pledge included).
    others: Vec<f64>,
}

impl<'a> DeviationContext<'a> {
    pub fn new(
        joint: &'a JointStrategy,
        pop: &'a Population,
        params: &'a GameParams,
        utility: UtilityKind,
        player: usize,
    ) -> Self {
        let n = joint.len();
        let mut base_d = vec![0.0; n];
        let mut base_p = vec![0.0; n];
        if let UtilityKind::NonMyopic(mode) = utility {
            for j in 0..n {
                let (d, p) = pool_key(joint, pop, params, mode, j, None);
                base_d[j] = d;
                base_p[j] = p;
            }
        }
        let others = (0..n)
            .map(|j| {
                if j == player || !joint.is_active(j) {
                    0.0
                } else {
                    joint.sigma(j) - joint.allocation(player, j)
                }
            })
            .collect();
        DeviationContext {
            joint,
            pop,
            params,
            utility,
            player,
            base_d,
            base_p,
            others,
        }
    }

    pub fn others(&self, j: usize) -> f64 {
        self.others[j]
    }

    /// Ranking seen when the deviator's own pool is `(active, margin, pledge)`.
    pub fn frame(&self, active: bool, margin: f64, pledge: f64) -> Frame {
        let i = self.player;
        match self.utility {
            UtilityKind::Myopic(_) => Frame {
                active,
                margin,
                pledge,
                desirability: Vec::new(),
                top_k: Vec::new(),
            },
            UtilityKind::NonMyopic(mode) => {
                let mut d = self.base_d.clone();
                let mut p = self.base_p.clone();
                let (di, pi) = pool_key(
                    self.joint,
                    self.pop,
                    self.params,
                    mode,
                    i,
                    Some((active, margin, pledge)),
                );
                d[i] = di;
                p[i] = pi;
                let tie = match mode {
                    RankMode::SingleStage => TieRule::PotentialProfit,
                    RankMode::TwoStage(t) => t,
                };
                let order = rank_order(&d, &p, tie);
                let mut top_k = vec![false; d.len()];
                for &j in order.iter().take(self.params.k) {
                    top_k[j] = d[j] > 0.0;
                }
                Frame {
                    active,
                    margin,
                    pledge,
                    desirability: d,
                    top_k,
                }
            }
        }
    }

    /// Frame of the deviator's current own-pool configuration.
    pub fn current_frame(&self) -> Frame {
        let s = self.joint.strategy(self.player);
        self.frame(s.active, s.margin, s.pledge)
    }

    /// Value of placing `a` in pool `j` (not the deviator's own).
    #[inline]
    pub fn member_value(&self, frame: &Frame, j: usize, a: f64) -> f64 {
        if a <= 0.0 || j == self.player || !self.joint.is_active(j) {
            return 0.0;
        }
        let s = self.joint.strategy(j);
        let cost = self.pop.cost(j);
        match self.utility {
            UtilityKind::NonMyopic(_) => {
                if frame.top_k[j] {
                    frame.desirability[j] * a / (self.others[j] + a).max(self.params.beta())
                } else {
                    let pooled = s.pledge + a;
                    let profit = reward_unchecked(pooled, s.pledge, self.params) - cost;
                    if profit <= 0.0 {
                        0.0
                    } else {
                        (1.0 - s.margin) * profit * a / pooled
                    }
                }
            }
            UtilityKind::Myopic(scheme) => {
                let sigma = self.others[j] + a;
                let profit = scheme.pool_reward(sigma, s.pledge) - cost;
                if profit <= 0.0 {
                    0.0
                } else {
                    a / sigma * profit * (1.0 - s.margin)
                }
            }
        }
    }

    /// Utility the deviator draws from running its own pool.
    #[inline]
    pub fn leader_value(&self, frame: &Frame) -> f64 {
        if !frame.active {
            return 0.0;
        }
        let i = self.player;
        let sigma = frame.pledge + self.joint.inflow(i);
        let cost = self.pop.cost(i);
        let (m, l) = (frame.margin, frame.pledge);
        match self.utility {
            UtilityKind::NonMyopic(_) => {
                let snm = if frame.top_k[i] {
                    sigma.max(self.params.beta())
                } else {
                    l
                };
                let profit = reward_unchecked(snm, l, self.params) - cost;
                if profit < 0.0 {
                    profit
                } else {
                    profit * (m + (1.0 - m) * l / snm)
                }
            }
            UtilityKind::Myopic(scheme) => {
                let profit = scheme.pool_reward(sigma, l) - cost;
                if profit <= 0.0 {
                    profit
                } else {
                    (m + (1.0 - m) * l / sigma) * profit
                }
            }
        }
    }

    /// Total utility of own-pool `frame` plus the listed delegations.
    pub fn evaluate(&self, frame: &Frame, delegations: &[(usize, f64)]) -> f64 {
        let mut u = self.leader_value(frame);
        for &(j, a) in delegations {
            u += self.member_value(frame, j, a);
        }
        u
    }

    /// The deviator's delegations as a vector.
    pub fn current_delegations(&self) -> Vec<(usize, f64)> {
        self.joint
            .strategy(self.player)
            .delegations
            .iter()
            .map(|(&j, &a)| (j, a))
            .collect()
    }

    /// Utility of the deviator's current strategy.
    pub fn current_utility(&self) -> f64 {
        let f = self.current_frame();
        self.evaluate(&f, &self.current_delegations())
    }
}

/// Desirability and tie-break potential of pool `j`, optionally with its
/// own-pool configuration replaced.
fn pool_key(
    joint: &JointStrategy,
    pop: &Population,
    params: &GameParams,
    mode: RankMode,
    j: usize,
    over: Option<(bool, f64, f64)>,
) -> (f64, f64) {
    let s = joint.strategy(j);
    let (active, margin, pledge) = over.unwrap_or((s.active, s.margin, s.pledge));
    let (pledge, counts) = match mode {
        RankMode::SingleStage => (if active { pledge } else { pop.stake(j) }, true),
        RankMode::TwoStage(_) => (pledge, active),
    };
    let cost = pop.cost(j);
    (
        desirability(margin, pledge, cost, params, counts),
        potential_profit(pledge, cost, params),
    )
}

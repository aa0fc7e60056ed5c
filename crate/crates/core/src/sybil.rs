//! Sybil-attack stake bounds and the probability that a single whale can
//! outweigh half of the pools.
//!
//! The bounds compare a Sybil identity's potential profit with the profit of
//! the honest player it must displace. Below saturation the potential
//! profit is affine in the pledge, which gives the closed-form threshold
//! `s ≥ s_ref − (c_ref − c)(1 + 1/α)/R`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Result, RssError};
use crate::game::{
    sample_truncated_pareto, seeded_stream, streams, truncated_pareto_cdf, GameParams, ParetoTail,
};
use crate::rewards::potential_profit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackerKind {
    /// Wants `k/2` pools whatever the cost.
    NonMaximizer,
    /// Shares one server among `t` identities.
    Maximizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SybilScenario {
    pub kind: AttackerKind,
    pub t: usize,
    pub agent_stake: f64,
    pub agent_cost: f64,
    /// `(stake, cost)` of every player not controlled by the agent, in any
    /// order.
    pub rest_profile: Vec<(f64, f64)>,
}

impl SybilScenario {
    pub fn validate(&self, params: &GameParams) -> Result<()> {
        if self.t < 2 {
            return Err(RssError::InvalidParam(
                "a Sybil attack needs t ≥ 2 identities".into(),
            ));
        }
        if self.t > params.k {
            return Err(RssError::InvalidParam(format!(
                "t = {} exceeds k = {}",
                self.t, params.k
            )));
        }
        if self.kind == AttackerKind::NonMaximizer && self.t != params.k / 2 {
            return Err(RssError::InvalidParam(format!(
                "a non-maximizing attacker uses t = k/2 = {} identities",
                params.k / 2
            )));
        }
        if self.rest_profile.len() < params.k {
            return Err(RssError::InvalidParam(format!(
                "rest profile needs at least k = {} players",
                params.k
            )));
        }
        Ok(())
    }
}

/// The rest profile sorted by decreasing potential profit (ties by input
/// position).
pub fn order_rest(rest: &[(f64, f64)], params: &GameParams) -> Vec<(f64, f64)> {
    let mut idx: Vec<usize> = (0..rest.len()).collect();
    let p: Vec<f64> = rest
        .iter()
        .map(|&(s, c)| potential_profit(s, c, params))
        .collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.into_iter().map(|i| rest[i]).collect()
}

/// Stake below which the agent cannot control its target number of
/// saturated pools. A negative value means the parameters give no
/// protection.
pub fn min_stake_bound(scenario: &SybilScenario, params: &GameParams) -> Result<f64> {
    scenario.validate(params)?;
    if params.alpha <= 0.0 {
        return Err(RssError::Unsupported(
            "the Sybil bound diverges at alpha = 0".into(),
        ));
    }
    let ordered = order_rest(&scenario.rest_profile, params);
    let c_max = scenario
        .rest_profile
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let factor = (1.0 + 1.0 / params.alpha) / params.total_reward;
    let t = scenario.t as f64;
    let k = params.k;
    Ok(match scenario.kind {
        AttackerKind::NonMaximizer => {
            let s_ref = ordered[k / 2].0;
            (k / 2) as f64 * (s_ref - c_max * factor)
        }
        AttackerKind::Maximizer => {
            let s_ref = ordered[k - scenario.t].0;
            t * (s_ref - (c_max - scenario.agent_cost / t) * factor)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SybilCheck {
    /// Every identity outranks the honest player `k−t+1`.
    pub success: bool,
    /// Smallest per-identity stake that succeeds at the declared cost.
    pub per_identity_threshold: f64,
    pub total_threshold: f64,
    pub reference: (f64, f64),
}

/// Relative slack under which the two forms of the success test may
/// legitimately disagree through rounding.
const BOUNDARY_SLACK: f64 = 1e-12;

/// Whether `t` identical identities of stake `s` declaring cost `c` all
/// outrank the honest player `k−t+1`. The potential-profit comparison and
/// its affine rearrangement are both evaluated and must agree.
pub fn sybil_success(
    s: f64,
    c: f64,
    t: usize,
    rest_profile: &[(f64, f64)],
    params: &GameParams,
) -> Result<SybilCheck> {
    let k = params.k;
    if t < 1 || t > k {
        return Err(RssError::InvalidParam(format!(
            "t = {} must lie in [1, k]",
            t
        )));
    }
    if rest_profile.len() < k - t + 1 {
        return Err(RssError::InvalidParam("rest profile too short".into()));
    }
    if params.alpha <= 0.0 {
        return Err(RssError::Unsupported(
            "the affine threshold needs alpha > 0".into(),
        ));
    }
    let beta = params.beta();
    let ordered = order_rest(rest_profile, params);
    let (s_ref, c_ref) = ordered[k - t];
    if s > beta || s_ref > beta {
        return Err(RssError::Domain(format!(
            "stakes must not exceed beta = {} (s = {}, s_ref = {})",
            beta, s, s_ref
        )));
    }
    let by_profit = potential_profit(s, c, params) >= potential_profit(s_ref, c_ref, params);
    let threshold = s_ref - (c_ref - c) * (1.0 + 1.0 / params.alpha) / params.total_reward;
    let by_stake = s >= threshold;
    if by_profit != by_stake && (s - threshold).abs() > BOUNDARY_SLACK * threshold.abs().max(1.0) {
        return Err(RssError::Domain(format!(
            "potential-profit test and stake threshold disagree at s = {}, threshold = {}",
            s, threshold
        )));
    }
    Ok(SybilCheck {
        success: by_profit,
        per_identity_threshold: threshold,
        total_threshold: t as f64 * threshold,
        reference: (s_ref, c_ref),
    })
}

/// A whale query: absolute stakes of `ñ = tail.n_agents` agents drawn
/// from `tail`, against `k` pools.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhaleQuery {
    pub tail: ParetoTail,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WhaleBound {
    pub delta: f64,
    pub mu: f64,
    pub bound: f64,
    /// `δ ≤ 0`: the Chernoff step gives nothing and the bound is 1.
    pub vacuous: bool,
}

/// `δ = ((1 − (θ/T)^a)/(1 − (θk/(2T))^a))·(1 − k/(2ñ)) − 1` and
/// `μ = ñ·F_X(2T/k)`.
pub fn whale_delta_mu(q: &WhaleQuery) -> Result<(f64, f64)> {
    let tail = &q.tail;
    let k = q.k as f64;
    let n = tail.n_agents as f64;
    if q.k < 2 || tail.n_agents == 0 {
        return Err(RssError::InvalidParam(
            "need k ≥ 2 and at least one agent".into(),
        ));
    }
    let x = 2.0 * tail.upper / k;
    if x < tail.theta {
        return Err(RssError::Domain(format!(
            "2T/k = {} lies below theta = {}",
            x, tail.theta
        )));
    }
    let a = tail.shape;
    let denom = 1.0 - (tail.theta * k / (2.0 * tail.upper)).powf(a);
    if denom == 0.0 {
        return Err(RssError::Domain("1 − (θk/(2T))^a vanishes".into()));
    }
    let delta = (1.0 - (tail.theta / tail.upper).powf(a)) / denom * (1.0 - k / (2.0 * n)) - 1.0;
    let mu = n * truncated_pareto_cdf(x.min(tail.upper), tail)?;
    Ok((delta, mu))
}

/// `e^{−δ²μ/3}`, or 1 when `δ ≤ 0`.
pub fn whale_tail_bound(q: &WhaleQuery) -> Result<WhaleBound> {
    let (delta, mu) = whale_delta_mu(q)?;
    Ok(chernoff(delta, mu))
}

pub fn chernoff(delta: f64, mu: f64) -> WhaleBound {
    if delta <= 0.0 {
        WhaleBound {
            delta,
            mu,
            bound: 1.0,
            vacuous: true,
        }
    } else {
        WhaleBound {
            delta,
            mu,
            bound: (-delta * delta * mu / 3.0).exp(),
            vacuous: false,
        }
    }
}

/// CDF of the `r`-th smallest of `ñ` iid draws, `Σ_{j≥r} C(ñ,j) F^j (1−F)^{ñ−j}`,
/// evaluated as the regularized incomplete beta `I_F(r, ñ−r+1)`.
pub fn order_stat_cdf(x: f64, r: usize, tail: &ParetoTail) -> Result<f64> {
    let n = tail.n_agents;
    if r < 1 || r > n {
        return Err(RssError::Argument(format!(
            "order {} outside [1, {}]",
            r, n
        )));
    }
    let f = truncated_pareto_cdf(x, tail)?;
    Ok(binomial_upper_tail(n, r, f))
}

/// `Pr(Bin(n, p) ≥ r)` for `1 ≤ r ≤ n`.
pub fn binomial_upper_tail(n: usize, r: usize, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    if r == 1 {
        return -(n as f64 * (-p).ln_1p()).exp_m1();
    }
    if r == n {
        return (n as f64 * p.ln()).exp();
    }
    beta_reg(r as f64, (n - r + 1) as f64, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub probability: f64,
    pub stderr: f64,
    pub trials: usize,
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ (trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fraction of sampled populations whose largest stake exceeds `k/2`
/// times the `(k/2+1)`-th largest.
pub fn mc_domination_probability(
    tail: &ParetoTail,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<McEstimate> {
    if trials < 100 {
        return Err(RssError::Argument(format!(
            "need at least 100 trials (got {})",
            trials
        )));
    }
    let half = k / 2;
    if k < 2 || tail.n_agents <= half {
        return Err(RssError::InvalidParam(format!(
            "need k ≥ 2 and more than k/2 agents (k = {}, agents = {})",
            k, tail.n_agents
        )));
    }
    let hits: usize = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = seeded_stream(trial_seed(seed, trial), streams::MONTE_CARLO);
            let mut xs: Vec<f64> = (0..tail.n_agents)
                .map(|_| sample_truncated_pareto(rng.random::<f64>(), tail))
                .collect();
            let top = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (_, pivot, _) = xs.select_nth_unstable_by(half, |a, b| b.total_cmp(a));
            usize::from(top > half as f64 * *pivot)
        })
        .sum();
    let p = hits as f64 / trials as f64;
    Ok(McEstimate {
        probability: p,
        stderr: (p * (1.0 - p) / trials as f64).sqrt(),
        trials,
    })
}

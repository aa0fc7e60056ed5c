//! Perfect strategies and grid-based Nash verification.
//!
//! A verdict from [`verify_nash`] is exact up to the deviation grid: it
//! enumerates, for every player, margin changes, pool closure, pledge
//! changes, re-delegation and pool opening, each discretized by a
//! [`DeviationGrid`].

mod fair;
mod incentive;
mod two_stage;

pub use fair::{
    construct_no_equilibrium_instance, fair_equilibrium_check, FairVerdict, NoEquilibriumInstance,
};
pub use incentive::{incentive_compat_delta, IncentiveOutcome};
pub use two_stage::{
    build_mstar, two_stage_audit, AuditConfig, OuterOutcome, OuterProfile, TemplateOutcome,
    TwoStageParams, TwoStageReport,
};

use serde::{Deserialize, Serialize};

use crate::deviation::{DeviationContext, Frame, UtilityKind};
use crate::error::{Result, RssError};
use crate::game::{GameParams, Population};
use crate::strategy::{JointStrategy, Strategy};

/// The perfect strategy profile of a population.
#[derive(Debug, Clone)]
pub struct PerfectStrategy {
    pub joint: JointStrategy,
    /// Margin of every player (zero for non-leaders).
    pub margins: Vec<f64>,
    /// Leaders by potential-profit rank.
    pub leaders: Vec<usize>,
    /// `P(s_{k+1}, c_{k+1})`.
    pub threshold: f64,
    /// Players by decreasing potential profit.
    pub order: Vec<usize>,
}

/// Builds the perfect strategy: the `k` players with the highest potential
/// profit lead, pledge their whole stake and set margins so every leader's
/// desirability equals `P(s_{k+1}, c_{k+1})`; the remaining stake fills the
/// pools to exactly `β` in leader order.
pub fn build_perfect(pop: &Population, params: &GameParams) -> Result<PerfectStrategy> {
    let n = pop.len();
    let k = params.k;
    if n != params.n || k >= n {
        return Err(RssError::Construction(format!(
            "population of {} does not match n={}, k={}",
            n, params.n, k
        )));
    }
    if !pop.is_normalized() {
        return Err(RssError::Construction("stakes must sum to one".into()));
    }
    let beta = params.beta();
    if pop.players().iter().any(|p| p.stake > beta * (1.0 + 1e-12)) {
        return Err(RssError::Construction(
            "a player holds more than beta".into(),
        ));
    }
    let pp = pop.potential_profits(params);
    let order = pop.potential_order(params);
    let threshold = pp[order[k]];
    if !(threshold > 0.0) {
        return Err(RssError::Construction(format!(
            "P(s_k+1, c_k+1) = {} must be positive",
            threshold
        )));
    }
    if pp[order[k - 1]] <= threshold {
        return Err(RssError::Construction(
            "potential profits of ranks k and k+1 are tied".into(),
        ));
    }
    let leaders: Vec<usize> = order[..k].to_vec();
    let mut margins = vec![0.0; n];
    let mut strategies: Vec<Strategy> = pop
        .players()
        .iter()
        .map(|p| Strategy::passive(p.stake))
        .collect();
    for &j in &leaders {
        margins[j] = 1.0 - threshold / pp[j];
        strategies[j] = Strategy::leader(margins[j], pop.stake(j));
    }
    let mut room: Vec<f64> = leaders.iter().map(|&j| beta - pop.stake(j)).collect();
    let mut pool = 0;
    for &i in &order[k..] {
        let mut left = pop.stake(i);
        while left > 0.0 && pool < k {
            let x = left.min(room[pool]);
            if x > 0.0 {
                *strategies[i]
                    .delegations
                    .entry(leaders[pool])
                    .or_insert(0.0) += x;
                room[pool] -= x;
                left -= x;
            }
            if room[pool] <= 1e-15 {
                pool += 1;
            } else if left <= 0.0 {
                break;
            }
        }
    }
    let joint = JointStrategy::new(strategies, pop)?;
    Ok(PerfectStrategy {
        joint,
        margins,
        leaders,
        threshold,
        order,
    })
}

/// Closed-form utilities at the perfect strategy:
/// `u_i = P_{k+1}·s_i/β + (P_i − P_{k+1})⁺`.
pub fn perfect_utilities(pop: &Population, params: &GameParams) -> Result<Vec<f64>> {
    let perfect = build_perfect(pop, params)?;
    let pp = pop.potential_profits(params);
    let beta = params.beta();
    Ok(pop
        .players()
        .iter()
        .map(|p| perfect.threshold * p.stake / beta + (pp[p.id] - perfect.threshold).max(0.0))
        .collect())
}

/// Discretization of the deviation space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationGrid {
    pub margin_step: f64,
    pub stake_step: f64,
    /// Restricts deviations to the inner game: margins and pledges stay
    /// fixed and only pool activation and delegations change.
    pub inner_only: bool,
}

impl DeviationGrid {
    pub fn new(margin_step: f64, stake_step: f64) -> Result<Self> {
        if !(margin_step > 0.0 && margin_step <= 1.0) || !(stake_step > 0.0 && stake_step <= 1.0) {
            return Err(RssError::InvalidParam(
                "grid steps must lie in (0, 1]".into(),
            ));
        }
        Ok(DeviationGrid {
            margin_step,
            stake_step,
            inner_only: false,
        })
    }

    pub fn inner(mut self) -> Self {
        self.inner_only = true;
        self
    }

    fn margins(&self) -> Vec<f64> {
        let steps = (1.0 / self.margin_step).ceil() as usize;
        let mut v: Vec<f64> = (0..=steps)
            .map(|t| (t as f64 * self.margin_step).min(1.0))
            .collect();
        v.dedup();
        v
    }

    /// Grid amounts in `(0, x]`, always including `x` itself.
    fn amounts(&self, x: f64) -> Vec<f64> {
        if x <= 0.0 {
            return Vec::new();
        }
        let steps = (x / self.stake_step).floor() as usize;
        let mut v: Vec<f64> = (1..=steps)
            .map(|t| t as f64 * self.stake_step)
            .filter(|&a| a < x)
            .collect();
        v.push(x);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub player: usize,
    #[serde(rename = "move")]
    pub description: String,
    pub gain: f64,
    #[serde(skip)]
    pub strategy: Option<Strategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NashVerdict {
    pub equilibrium: bool,
    pub witness: Option<Witness>,
    /// Number of deviations evaluated.
    #[serde(skip)]
    pub evaluated: u64,
}

impl NashVerdict {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "equilibrium": self.equilibrium,
            "witness": self.witness.as_ref().map(|w| serde_json::json!({
                "player": w.player,
                "move": w.description,
                "gain": w.gain,
            })),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub tolerance: f64,
    /// Stop at the first player that has an improving deviation.
    pub early_exit: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            tolerance: 1e-9,
            early_exit: false,
        }
    }
}

/// Searches every player's grid deviations for one that improves its
/// utility by more than 1e-9. The witness is the lowest-id player with an
/// improving deviation, reported with its best such deviation.
pub fn verify_nash(
    joint: &JointStrategy,
    pop: &Population,
    params: &GameParams,
    grid: &DeviationGrid,
    utility: UtilityKind,
) -> NashVerdict {
    verify_nash_with(joint, pop, params, grid, utility, VerifyOptions::default())
}

pub fn verify_nash_with(
    joint: &JointStrategy,
    pop: &Population,
    params: &GameParams,
    grid: &DeviationGrid,
    utility: UtilityKind,
    opts: VerifyOptions,
) -> NashVerdict {
    let mut evaluated = 0;
    let mut witness = None;
    for i in 0..joint.len() {
        let ctx = DeviationContext::new(joint, pop, params, utility, i);
        let search = best_deviation(&ctx, grid, opts.tolerance);
        evaluated += search.evaluated;
        if let Some(best) = search.best {
            if witness.is_none() {
                witness = Some(Witness {
                    player: i,
                    description: best.description,
                    gain: best.gain,
                    strategy: Some(best.strategy),
                });
            }
            if opts.early_exit {
                break;
            }
        }
    }
    NashVerdict {
        equilibrium: witness.is_none(),
        witness,
        evaluated,
    }
}

pub(crate) struct Deviation {
    pub gain: f64,
    pub description: String,
    pub strategy: Strategy,
}

pub(crate) struct Search {
    pub best: Option<Deviation>,
    pub evaluated: u64,
}

struct Tracker<'c> {
    u0: f64,
    tol: f64,
    best: Option<Deviation>,
    evaluated: u64,
    base: &'c Strategy,
}

impl<'c> Tracker<'c> {
    #[inline]
    fn offer(&mut self, u: f64, build: impl FnOnce(&Strategy) -> (String, Strategy)) {
        self.evaluated += 1;
        let gain = u - self.u0;
        if gain > self.tol && self.best.as_ref().is_none_or(|b| gain > b.gain) {
            let (description, strategy) = build(self.base);
            self.best = Some(Deviation {
                gain,
                description,
                strategy,
            });
        }
    }
}

fn own_pool(base: &Strategy, active: bool, margin: f64, pledge: f64) -> Strategy {
    let mut s = base.clone();
    s.active = active;
    s.margin = margin;
    s.pledge = pledge;
    s
}

/// Best grid deviation of the context's player, if any improves by more
/// than `tol`.
pub(crate) fn best_deviation(ctx: &DeviationContext, grid: &DeviationGrid, tol: f64) -> Search {
    let i = ctx.player;
    let me = ctx.joint.strategy(i);
    let stake = ctx.pop.stake(i);
    let free = (stake - me.allocated()).max(0.0);
    let cur = ctx.current_delegations();
    let cur_total: f64 = cur.iter().map(|c| c.1).sum();
    let cur_of = |j: usize| me.delegations.get(&j).copied().unwrap_or(0.0);
    let targets: Vec<usize> = (0..ctx.joint.len())
        .filter(|&j| j != i && ctx.joint.is_active(j))
        .collect();
    let beta = ctx.params.beta();
    let non_myopic = matches!(ctx.utility, UtilityKind::NonMyopic(_));
    let margins = grid.margins();

    let f0 = ctx.current_frame();
    let u0 = ctx.evaluate(&f0, &cur);
    let mut t = Tracker {
        u0,
        tol,
        best: None,
        evaluated: 0,
        base: me,
    };
    let base_members =
        |f: &Frame| -> f64 { cur.iter().map(|&(j, a)| ctx.member_value(f, j, a)).sum() };
    let add_delta = |f: &Frame, j: usize, x: f64| -> f64 {
        let c = cur_of(j);
        ctx.member_value(f, j, c + x) - ctx.member_value(f, j, c)
    };

    // Margin changes with everything else kept.
    if !grid.inner_only && (me.active || non_myopic) {
        for &m in &margins {
            if m == me.margin {
                continue;
            }
            let f = ctx.frame(me.active, m, me.pledge);
            let u = ctx.leader_value(&f) + base_members(&f);
            t.offer(u, |b| {
                (
                    format!("set margin {}", m),
                    own_pool(b, b.active, m, b.pledge),
                )
            });
        }
    }

    if me.active {
        // Closure, with the freed stake kept back or delegated.
        let fc = ctx.frame(false, me.margin, me.pledge);
        let bm = base_members(&fc);
        let freed = me.pledge + free;
        t.offer(bm, |b| {
            (
                "close pool".to_string(),
                own_pool(b, false, b.margin, b.pledge),
            )
        });
        for &j in &targets {
            let u = bm + add_delta(&fc, j, freed);
            t.offer(u, |b| {
                let mut s = own_pool(b, false, b.margin, b.pledge);
                *s.delegations.entry(j).or_insert(0.0) += freed;
                (format!("close pool, delegate {} to {}", freed, j), s)
            });
            let u = ctx.member_value(&fc, j, stake);
            t.offer(u, |b| {
                let mut s = own_pool(b, false, b.margin, b.pledge);
                s.delegations.clear();
                s.delegations.insert(j, stake);
                (format!("close pool, delegate all to {}", j), s)
            });
        }
        for (a, &j1) in targets.iter().enumerate() {
            for &j2 in &targets[a + 1..] {
                for x in grid.amounts(stake) {
                    let y = stake - x;
                    let u = ctx.member_value(&fc, j1, x) + ctx.member_value(&fc, j2, y);
                    t.offer(u, |b| {
                        let mut s = own_pool(b, false, b.margin, b.pledge);
                        s.delegations.clear();
                        s.delegations.insert(j1, x);
                        if y > 0.0 {
                            s.delegations.insert(j2, y);
                        }
                        (
                            format!("close pool, split {} to {} and {} to {}", x, j1, y, j2),
                            s,
                        )
                    });
                }
            }
        }

        // Pledge changes combined with margin changes.
        if !grid.inner_only {
            for lam in grid.amounts(stake) {
                if lam == me.pledge {
                    continue;
                }
                let extra = lam - me.pledge;
                if extra > free + 1e-15 {
                    continue;
                }
                let released = (-extra).max(0.0);
                for &m in &margins {
                    let f = ctx.frame(true, m, lam);
                    let base = ctx.leader_value(&f) + base_members(&f);
                    t.offer(base, |b| {
                        (
                            format!("pledge {} margin {}", lam, m),
                            own_pool(b, true, m, lam),
                        )
                    });
                    if released > 0.0 {
                        for &j in &targets {
                            let u = base + add_delta(&f, j, released);
                            t.offer(u, |b| {
                                let mut s = own_pool(b, true, m, lam);
                                *s.delegations.entry(j).or_insert(0.0) += released;
                                (
                                    format!(
                                        "pledge {} margin {}, delegate {} to {}",
                                        lam, m, released, j
                                    ),
                                    s,
                                )
                            });
                        }
                    }
                }
            }
        }
    }

    // Re-delegation between pools and the unallocated reserve.
    {
        let bm = base_members(&f0);
        let lead = ctx.leader_value(&f0);
        let mut sources: Vec<(Option<usize>, f64)> = cur
            .iter()
            .filter(|c| c.1 > 0.0)
            .map(|&(j, a)| (Some(j), a))
            .collect();
        if free > 0.0 {
            sources.push((None, free));
        }
        for &(src, avail) in &sources {
            let mut dests: Vec<Option<usize>> = targets.iter().map(|&j| Some(j)).collect();
            if src.is_some() {
                dests.push(None);
            }
            for &dst in &dests {
                if dst == src {
                    continue;
                }
                let mut amounts = grid.amounts(avail);
                if let Some(d) = dst {
                    let gap = beta - ctx.joint.sigma(d);
                    if gap > 0.0 && gap < avail {
                        amounts.push(gap);
                    }
                }
                for x in amounts {
                    let mut u = lead + bm;
                    if let Some(sj) = src {
                        let c = cur_of(sj);
                        u += ctx.member_value(&f0, sj, c - x) - ctx.member_value(&f0, sj, c);
                    }
                    if let Some(d) = dst {
                        u += add_delta(&f0, d, x);
                    }
                    t.offer(u, |b| {
                        let mut s = b.clone();
                        if let Some(sj) = src {
                            let e = s.delegations.entry(sj).or_insert(0.0);
                            *e -= x;
                            if *e <= 0.0 {
                                s.delegations.remove(&sj);
                            }
                        }
                        if let Some(d) = dst {
                            *s.delegations.entry(d).or_insert(0.0) += x;
                        }
                        let name = |o: Option<usize>| {
                            o.map_or("unallocated".to_string(), |j| j.to_string())
                        };
                        (format!("move {} from {} to {}", x, name(src), name(dst)), s)
                    });
                }
            }
        }
    }

    // Opening a pool.
    if !me.active {
        let configs: Vec<(f64, f64)> = if grid.inner_only {
            if me.pledge <= stake + 1e-15 {
                vec![(me.margin, me.pledge)]
            } else {
                Vec::new()
            }
        } else {
            let mut v = Vec::new();
            for lam in grid.amounts(stake) {
                for &m in &margins {
                    v.push((m, lam));
                }
            }
            v
        };
        for (m, lam) in configs {
            let f = ctx.frame(true, m, lam);
            let lead = ctx.leader_value(&f);
            // Pledge taken from the reserve first, then proportionally.
            let kept: Vec<(usize, f64)> = if lam <= free {
                cur.clone()
            } else {
                let scale = if cur_total > 0.0 {
                    ((stake - lam) / cur_total).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                cur.iter().map(|&(j, a)| (j, a * scale)).collect()
            };
            let u = lead
                + kept
                    .iter()
                    .map(|&(j, a)| ctx.member_value(&f, j, a))
                    .sum::<f64>();
            t.offer(u, |b| {
                let mut s = own_pool(b, true, m, lam);
                s.delegations = kept.iter().filter(|c| c.1 > 0.0).copied().collect();
                (format!("open pool margin {} pledge {}", m, lam), s)
            });
            t.offer(lead, |b| {
                let mut s = own_pool(b, true, m, lam);
                s.delegations.clear();
                (
                    format!("open pool margin {} pledge {}, rest unallocated", m, lam),
                    s,
                )
            });
            let rest = stake - lam;
            if rest > 0.0 {
                for &j in &targets {
                    let u = lead + ctx.member_value(&f, j, rest);
                    t.offer(u, |b| {
                        let mut s = own_pool(b, true, m, lam);
                        s.delegations.clear();
                        s.delegations.insert(j, rest);
                        (
                            format!(
                                "open pool margin {} pledge {}, delegate {} to {}",
                                m, lam, rest, j
                            ),
                            s,
                        )
                    });
                }
            }
        }
    }

    Search {
        best: t.best,
        evaluated: t.evaluated,
    }
}

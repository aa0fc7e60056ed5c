//! The inner-outer game: margins and pledges are fixed first, then players
//! choose allocations. Provides the approximate-equilibrium margins `m*`
//! and a sampling audit of both stages.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::deviation::UtilityKind;
use crate::error::{Result, RssError};
use crate::game::{seeded_stream, streams, GameParams, Population};
use crate::strategy::{desirability, nm_utility, JointStrategy, RankMode, Strategy, TieRule};

use super::{verify_nash_with, DeviationGrid, VerifyOptions, Witness};

/// Parameters of the approximate outer equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoStageParams {
    /// `P_k − P_{k+1}`.
    pub epsilon: f64,
    /// `P_{k+1} − P_{k+2}`.
    pub epsilon1: f64,
    pub epsilon_prime: f64,
    /// Weight splitting `ε′` between the leaders and player `k+1`.
    pub alpha_tie: f64,
    /// The `k` players with the highest potential profit, by rank.
    pub leader_set: Vec<usize>,
    /// Players by decreasing potential profit.
    pub order: Vec<usize>,
    pub potential: Vec<f64>,
}

impl TwoStageParams {
    pub fn new(
        pop: &Population,
        params: &GameParams,
        epsilon_prime: f64,
        alpha_tie: f64,
    ) -> Result<Self> {
        let k = params.k;
        if pop.len() < k + 2 {
            return Err(RssError::Construction(format!(
                "two-stage margins need at least k+2 = {} players",
                k + 2
            )));
        }
        let potential = pop.potential_profits(params);
        let order = pop.potential_order(params);
        let (pk, pk1, pk2) = (
            potential[order[k - 1]],
            potential[order[k]],
            potential[order[k + 1]],
        );
        let epsilon = pk - pk1;
        let epsilon1 = pk1 - pk2;
        if !(epsilon > 0.0 && epsilon1 > 0.0 && pk1 > 0.0) {
            return Err(RssError::Construction(format!(
                "need P_k > P_k+1 > max(P_k+2, 0); got {}, {}, {}",
                pk, pk1, pk2
            )));
        }
        let bound = epsilon.min(pk1).min(epsilon1);
        if !(epsilon_prime > 0.0 && epsilon_prime < bound) {
            return Err(RssError::Construction(format!(
                "epsilon' = {} must lie in (0, {})",
                epsilon_prime, bound
            )));
        }
        let floor = pop.stake(order[k]) / params.beta();
        if !(alpha_tie > floor && alpha_tie < 1.0) {
            return Err(RssError::Construction(format!(
                "alpha_tie = {} must lie in ({}, 1)",
                alpha_tie, floor
            )));
        }
        Ok(TwoStageParams {
            epsilon,
            epsilon1,
            epsilon_prime,
            alpha_tie,
            leader_set: order[..k].to_vec(),
            order,
            potential,
        })
    }

    /// `ε′ = fraction · min(ε, P_{k+1}, ε₁)` with `alpha_tie` midway in its
    /// admissible interval.
    pub fn with_fraction(pop: &Population, params: &GameParams, fraction: f64) -> Result<Self> {
        let probe = TwoStageParams::probe(pop, params)?;
        let floor = pop.stake(probe.1) / params.beta();
        Self::new(pop, params, fraction * probe.0, 0.5 * (floor + 1.0))
    }

    fn probe(pop: &Population, params: &GameParams) -> Result<(f64, usize)> {
        let k = params.k;
        if pop.len() < k + 2 {
            return Err(RssError::Construction(
                "two-stage margins need k+2 players".into(),
            ));
        }
        let p = pop.potential_profits(params);
        let o = pop.potential_order(params);
        let m = (p[o[k - 1]] - p[o[k]])
            .min(p[o[k]])
            .min(p[o[k]] - p[o[k + 1]]);
        Ok((m, o[k]))
    }

    pub fn is_leader(&self, i: usize) -> bool {
        self.leader_set.contains(&i)
    }

    /// Player ranked `k+1` by potential profit.
    pub fn runner_up(&self) -> usize {
        self.order[self.leader_set.len()]
    }
}

/// Outer-game strategy of every player.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OuterProfile {
    pub margins: Vec<f64>,
    pub pledges: Vec<f64>,
}

/// Margins `m*(ε′, α)` and pledges `λ* = s`.
pub fn build_mstar(
    pop: &Population,
    params: &GameParams,
    ts: &TwoStageParams,
) -> Result<OuterProfile> {
    let check = TwoStageParams::new(pop, params, ts.epsilon_prime, ts.alpha_tie)?;
    let p = &check.potential;
    let pk1 = p[check.runner_up()];
    let (e, a) = (ts.epsilon_prime, ts.alpha_tie);
    let mut margins = vec![0.0; pop.len()];
    for &i in &check.leader_set {
        margins[i] = (p[i] - pk1 - e * (1.0 - a)) / p[i];
    }
    margins[check.runner_up()] = e * a / pk1;
    if margins.iter().any(|m| !(0.0..1.0).contains(m)) {
        return Err(RssError::Construction(
            "m* margins fall outside [0, 1)".into(),
        ));
    }
    Ok(OuterProfile {
        margins,
        pledges: pop.players().iter().map(|q| q.stake).collect(),
    })
}

/// Sample sizes and grids used by [`two_stage_audit`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditConfig {
    pub seed: u64,
    /// Random fill orders tried for conforming configurations.
    pub conforming_samples: usize,
    /// Random non-conforming inner configurations.
    pub random_nonconforming: usize,
    /// Random outer deviations per player, on top of the structured ones.
    pub outer_samples: usize,
    pub tie: TieRule,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            seed: 0,
            conforming_samples: 6,
            random_nonconforming: 12,
            outer_samples: 16,
            tie: TieRule::PotentialProfit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemplateOutcome {
    pub template: String,
    pub refuted: bool,
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OuterOutcome {
    pub player: usize,
    pub margin: f64,
    pub pledge: f64,
    /// `u^up − u^low`; `None` when no inner equilibrium was found.
    pub gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoStageReport {
    pub conforming_checked: usize,
    /// Conforming configurations with an improving inner move.
    pub conforming_failures: Vec<Witness>,
    pub templates: Vec<TemplateOutcome>,
    pub random_checked: usize,
    pub random_unrefuted: usize,
    pub outer_checked: usize,
    /// Outer deviations for which no candidate inner equilibrium passed.
    pub outer_without_equilibrium: usize,
    pub max_outer_gain: f64,
    /// Outer deviations whose gain exceeds `ε′ + 1e-9`.
    pub outer_violations: Vec<OuterOutcome>,
    pub epsilon_prime: f64,
    pub notes: Vec<String>,
}

impl TwoStageReport {
    pub fn inner_ok(&self) -> bool {
        self.conforming_failures.is_empty()
            && self.templates.iter().all(|t| t.refuted)
            && self.random_unrefuted == 0
    }

    pub fn outer_ok(&self) -> bool {
        self.outer_violations.is_empty()
    }

    pub fn passed(&self) -> bool {
        self.inner_ok() && self.outer_ok()
    }
}

/// Tolerance on the outer approximation `ε′`.
const OUTER_TOL: f64 = 1e-9;

/// Inner-game strategy with outer choices `(m, λ)` and no allocation yet.
fn inner_strategy(margin: f64, pledge: f64, active: bool) -> Strategy {
    Strategy {
        margin,
        pledge,
        active,
        delegations: Default::default(),
    }
}

/// Base inner strategies: every player carries its outer `(m, λ)`; only
/// the players in `active` run their pool.
fn base_strategies(outer: &OuterProfile, active: &[usize]) -> Vec<Strategy> {
    (0..outer.margins.len())
        .map(|i| inner_strategy(outer.margins[i], outer.pledges[i], active.contains(&i)))
        .collect()
}

/// Places each contributor's stake into `pools` in order, filling every
/// pool up to `β`; a contributor never delegates to its own pool. Stake
/// that finds no room goes to the last pool it may use.
fn water_fill(
    strategies: &mut [Strategy],
    pools: &[usize],
    contributors: &[(usize, f64)],
    beta: f64,
) {
    let mut room: Vec<f64> = pools
        .iter()
        .map(|&j| (beta - strategies[j].pledge).max(0.0))
        .collect();
    for &(i, amount) in contributors {
        let mut left = amount;
        for (slot, &j) in pools.iter().enumerate() {
            if left <= 0.0 {
                break;
            }
            if j == i || room[slot] <= 0.0 {
                continue;
            }
            let x = left.min(room[slot]);
            *strategies[i].delegations.entry(j).or_insert(0.0) += x;
            room[slot] -= x;
            left -= x;
        }
        if left > 0.0 {
            if let Some(&j) = pools.iter().rev().find(|&&j| j != i) {
                *strategies[i].delegations.entry(j).or_insert(0.0) += left;
            }
        }
    }
}

fn inner_kind(cfg: &AuditConfig) -> UtilityKind {
    UtilityKind::NonMyopic(RankMode::TwoStage(cfg.tie))
}

fn inner_check(
    joint: &JointStrategy,
    pop: &Population,
    params: &GameParams,
    grid: &DeviationGrid,
    cfg: &AuditConfig,
) -> Option<Witness> {
    let opts = VerifyOptions {
        tolerance: 1e-9,
        early_exit: true,
    };
    verify_nash_with(joint, pop, params, &grid.inner(), inner_kind(cfg), opts).witness
}

/// A conforming configuration: the leaders of `G` pledge their stake and
/// everyone else fills their pools to `β` in the given orders.
fn conforming(
    pop: &Population,
    params: &GameParams,
    outer: &OuterProfile,
    pools: &[usize],
    members: &[usize],
) -> Result<JointStrategy> {
    let mut st = base_strategies(outer, pools);
    let contrib: Vec<(usize, f64)> = members.iter().map(|&i| (i, pop.stake(i))).collect();
    water_fill(&mut st, pools, &contrib, params.beta());
    JointStrategy::new(st, pop)
}

fn is_conforming(
    joint: &JointStrategy,
    pop: &Population,
    params: &GameParams,
    ts: &TwoStageParams,
) -> bool {
    let mut active = joint.active_pools();
    active.sort_unstable();
    let mut g = ts.leader_set.clone();
    g.sort_unstable();
    active == g
        && g.iter().all(|&j| joint.sigma(j) >= params.beta() - 1e-12)
        && (0..pop.len()).all(|i| joint.unallocated(i, pop) <= 1e-12 && joint.stranded(i) <= 1e-12)
}

/// Audits the two-stage game at `m*(ε′, α)`: conforming inner
/// configurations must be inner equilibria, non-conforming ones must be
/// refuted, and no sampled outer deviation may gain more than `ε′`.
pub fn two_stage_audit(
    pop: &Population,
    params: &GameParams,
    ts: &TwoStageParams,
    grid: &DeviationGrid,
    cfg: &AuditConfig,
) -> Result<TwoStageReport> {
    let outer = build_mstar(pop, params, ts)?;
    let n = pop.len();
    let k = params.k;
    let beta = params.beta();
    let mut rng = seeded_stream(cfg.seed, streams::AUDIT);
    let g = ts.leader_set.clone();
    let others: Vec<usize> = (0..n).filter(|i| !ts.is_leader(*i)).collect();
    let mut notes = Vec::new();

    // Conforming inner configurations.
    let mut conforming_failures = Vec::new();
    let mut u_low = vec![f64::INFINITY; n];
    let mut conforming_checked = 0;
    for t in 0..cfg.conforming_samples.max(1) {
        let mut pools = g.clone();
        let mut members = others.clone();
        if t > 0 {
            pools.shuffle(&mut rng);
            members.shuffle(&mut rng);
        }
        let joint = conforming(pop, params, &outer, &pools, &members)?;
        conforming_checked += 1;
        let mode = RankMode::TwoStage(cfg.tie);
        for (i, u) in u_low.iter_mut().enumerate() {
            *u = u.min(nm_utility(i, &joint, pop, params, mode));
        }
        if let Some(w) = inner_check(&joint, pop, params, grid, cfg) {
            conforming_failures.push(w);
        }
    }

    // Adversarial non-conforming templates.
    let mut templates = Vec::new();
    let push = |name: &str, joint: Result<JointStrategy>, templates: &mut Vec<TemplateOutcome>| {
        match joint {
            Ok(j) => {
                let w = inner_check(&j, pop, params, grid, cfg);
                templates.push(TemplateOutcome {
                    template: name.to_string(),
                    refuted: w.is_some(),
                    witness: w,
                });
            }
            Err(e) => templates.push(TemplateOutcome {
                template: format!("{} (not constructible: {})", name, e),
                refuted: true,
                witness: None,
            }),
        }
    };
    {
        // A leader of G does not run its pool.
        let missing = g[k - 1];
        let pools: Vec<usize> = g.iter().copied().filter(|&j| j != missing).collect();
        let mut members = others.clone();
        members.insert(0, missing);
        let joint = if pools.is_empty() {
            Ok(JointStrategy::new(base_strategies(&outer, &[]), pop).expect("passive profile"))
        } else {
            let mut st = base_strategies(&outer, &pools);
            let contrib: Vec<(usize, f64)> = members.iter().map(|&i| (i, pop.stake(i))).collect();
            water_fill(&mut st, &pools, &contrib, 2.0 * beta);
            JointStrategy::new(st, pop)
        };
        push("leader missing from G", joint, &mut templates);
    }
    {
        // Player k+1 runs a pool next to G.
        let extra = ts.runner_up();
        let mut pools = g.clone();
        pools.push(extra);
        let members: Vec<usize> = others.iter().copied().filter(|&i| i != extra).collect();
        let mut st = base_strategies(&outer, &pools);
        let contrib: Vec<(usize, f64)> = members.iter().map(|&i| (i, pop.stake(i))).collect();
        water_fill(&mut st, &g, &contrib, beta);
        push(
            "extra pool outside G",
            JointStrategy::new(st, pop),
            &mut templates,
        );
    }
    if k >= 2 {
        // Shift stake from one saturated pool into another.
        let mut joint = conforming(pop, params, &outer, &g, &others)?;
        let (a, b) = (g[0], g[1]);
        let mover = others
            .iter()
            .copied()
            .find(|&i| joint.allocation(i, a) > 0.0);
        if let Some(m) = mover {
            let mut s = joint.strategy(m).clone();
            let x = 0.5 * s.delegations[&a];
            *s.delegations.get_mut(&a).unwrap() -= x;
            *s.delegations.entry(b).or_insert(0.0) += x;
            joint.set_strategy(m, s, pop)?;
            push(
                "oversaturated and undersaturated pair",
                Ok(joint),
                &mut templates,
            );
        } else {
            notes.push("no member in the first pool; saturation template skipped".into());
        }
    }
    {
        // A member withholds part of its stake.
        let mut joint = conforming(pop, params, &outer, &g, &others)?;
        if let Some(&m) = others
            .iter()
            .find(|&&i| !joint.strategy(i).delegations.is_empty())
        {
            let mut s = joint.strategy(m).clone();
            let (&j, &a) = s.delegations.iter().next().unwrap();
            s.delegations.insert(j, 0.5 * a);
            joint.set_strategy(m, s, pop)?;
        }
        push("unallocated stake", Ok(joint), &mut templates);
    }
    {
        // A member delegates to a pool that is not running.
        let mut joint = conforming(pop, params, &outer, &g, &others)?;
        let idle = ts.order[k + 1];
        if let Some(&m) = others
            .iter()
            .find(|&&i| i != idle && !joint.strategy(i).delegations.is_empty())
        {
            let mut s = joint.strategy(m).clone();
            let (&j, &a) = s.delegations.iter().next().unwrap();
            s.delegations.insert(j, 0.5 * a);
            s.delegations.insert(idle, 0.5 * a);
            joint.set_strategy(m, s, pop)?;
        }
        push("stranded stake", Ok(joint), &mut templates);
    }

    // Random non-conforming configurations.
    let mut random_checked = 0;
    let mut random_unrefuted = 0;
    let mut attempts = 0;
    while random_checked < cfg.random_nonconforming
        && attempts < 50 * cfg.random_nonconforming.max(1)
    {
        attempts += 1;
        let active: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.4)).collect();
        let mut st = base_strategies(&outer, &active);
        for i in 0..n {
            if active.contains(&i) {
                continue;
            }
            let targets: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let mut left = pop.stake(i);
            while left > 1e-12 && rng.random_bool(0.85) {
                let j = targets[rng.random_range(0..targets.len())];
                let x = if rng.random_bool(0.5) {
                    left
                } else {
                    left * rng.random::<f64>()
                };
                *st[i].delegations.entry(j).or_insert(0.0) += x;
                left -= x;
            }
        }
        let joint = JointStrategy::new(st, pop)?;
        if is_conforming(&joint, pop, params, ts) {
            continue;
        }
        random_checked += 1;
        if inner_check(&joint, pop, params, grid, cfg).is_none() {
            random_unrefuted += 1;
            notes.push(format!(
                "unrefuted random configuration: {}",
                joint.to_json()
            ));
        }
    }

    // Outer deviations.
    let mut outer_checked = 0;
    let mut outer_without_equilibrium = 0;
    let mut max_outer_gain = f64::NEG_INFINITY;
    let mut outer_violations = Vec::new();
    for i in 0..n {
        let s = pop.stake(i);
        let mut devs: Vec<(f64, f64)> = Vec::new();
        let m0 = outer.margins[i];
        let p = ts.potential[i];
        let pk1 = ts.potential[ts.runner_up()];
        for dm in [-grid.margin_step, grid.margin_step, 2.0 * grid.margin_step] {
            devs.push(((m0 + dm).clamp(0.0, 1.0), s));
        }
        if ts.is_leader(i) && p > 0.0 {
            let threshold = (p - pk1 + ts.epsilon_prime * ts.alpha_tie) / p;
            devs.push((0.5 * (m0 + threshold), s));
            devs.push(((threshold + grid.margin_step).min(1.0), s));
        }
        devs.push((m0, 0.5 * s));
        devs.push((0.0, s));
        devs.push((1.0, s));
        let msteps = (1.0 / grid.margin_step).round() as u32;
        let ssteps = ((s / grid.stake_step).floor() as u32).max(1);
        for _ in 0..cfg.outer_samples {
            let m = rng.random_range(0..=msteps) as f64 * grid.margin_step;
            let l = (rng.random_range(1..=ssteps) as f64 * grid.stake_step).min(s);
            devs.push((m.min(1.0), l));
        }
        for (m, l) in devs {
            if m == m0 && l == outer.pledges[i] {
                continue;
            }
            outer_checked += 1;
            let mut dev = outer.clone();
            dev.margins[i] = m;
            dev.pledges[i] = l;
            let up = outer_upper_utility(pop, params, &dev, i, grid, cfg)?;
            let gain = up.map(|u| u - u_low[i]);
            match gain {
                None => outer_without_equilibrium += 1,
                Some(gn) => {
                    max_outer_gain = max_outer_gain.max(gn);
                    if gn > ts.epsilon_prime + OUTER_TOL {
                        outer_violations.push(OuterOutcome {
                            player: i,
                            margin: m,
                            pledge: l,
                            gain,
                        });
                    }
                }
            }
        }
    }
    if outer_without_equilibrium > 0 {
        notes.push(format!(
            "{} outer deviations: no equilibrium found at this grid resolution",
            outer_without_equilibrium
        ));
    }

    Ok(TwoStageReport {
        conforming_checked,
        conforming_failures,
        templates,
        random_checked,
        random_unrefuted,
        outer_checked,
        outer_without_equilibrium,
        max_outer_gain,
        outer_violations,
        epsilon_prime: ts.epsilon_prime,
        notes,
    })
}

/// Highest utility of `deviator` over candidate inner equilibria of the
/// inner game set by `outer`; `None` when no candidate is an equilibrium.
///
/// Candidates run `k` pools chosen among the `k+2` most desirable players
/// (desirability computed as if every pool were active) and water-fill the
/// rest of the stake in desirability order; each is also tried with the
/// deviator running a pool outside the chosen set.
fn outer_upper_utility(
    pop: &Population,
    params: &GameParams,
    outer: &OuterProfile,
    deviator: usize,
    grid: &DeviationGrid,
    cfg: &AuditConfig,
) -> Result<Option<f64>> {
    let n = pop.len();
    let k = params.k;
    let d: Vec<f64> = (0..n)
        .map(|j| {
            desirability(
                outer.margins[j],
                outer.pledges[j],
                pop.cost(j),
                params,
                true,
            )
        })
        .collect();
    let mut by_d: Vec<usize> = (0..n).collect();
    by_d.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    let pool_cands: Vec<usize> = by_d.iter().copied().take((k + 2).min(n)).collect();
    let mut best: Option<f64> = None;
    let mode = RankMode::TwoStage(cfg.tie);
    for set in combinations(&pool_cands, k) {
        for solo in [false, true] {
            if solo && set.contains(&deviator) {
                continue;
            }
            let mut active = set.clone();
            if solo {
                active.push(deviator);
            }
            let mut st = base_strategies(outer, &active);
            let mut contrib: Vec<(usize, f64)> = Vec::new();
            for &i in &by_d {
                let own = if active.contains(&i) {
                    outer.pledges[i]
                } else {
                    0.0
                };
                let rest = pop.stake(i) - own;
                if rest > 1e-15 {
                    contrib.push((i, rest));
                }
            }
            water_fill(&mut st, &set, &contrib, params.beta());
            let joint = JointStrategy::new(st, pop)?;
            if inner_check(&joint, pop, params, grid, cfg).is_none() {
                let u = nm_utility(deviator, &joint, pop, params, mode);
                best = Some(best.map_or(u, |b: f64| b.max(u)));
            }
        }
    }
    Ok(best)
}

fn combinations(items: &[usize], r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(r);
    fn rec(
        items: &[usize],
        r: usize,
        start: usize,
        cur: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            rec(items, r, i + 1, cur, out);
            cur.pop();
        }
    }
    rec(items, r, 0, &mut cur, &mut out);
    out
}

//! Best-response dynamics of the stake-pools game.
//!
//! At every step players are scanned in a seeded random order and the first
//! one with a move that raises its utility by more than `utility_eps`
//! applies it. Pool moves use one of two margins: 1 (a one-man pool) or the
//! highest margin that still ranks the pool among the `k` most desirable
//! once other players' likely pools are taken into account. Delegations are
//! chosen by a beam search over quantized allocations.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::deviation::{DeviationContext, Frame, UtilityKind};
use crate::error::{Result, RssError};
use crate::game::{seeded_stream, streams, GameParams, Population};
use crate::rewards::{RewardScheme, SchemeKind};
use crate::strategy::{
    nm_utilities, rank_pools, JointStrategy, RankMode, Strategy, TieRule, ALLOC_SLACK, TIE_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    #[default]
    Sequential,
    Simultaneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    #[default]
    Inactive,
    /// Every player whose one-man pool would be profitable runs one.
    MaxDecentralized,
    /// The `k` players with the highest potential profit run pools that the
    /// others fill to equal size.
    NicelyDecentralized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub utility_eps: f64,
    pub margin_precision: f64,
    /// Delegation quantum as a fraction of the mover's stake.
    pub stake_resolution: f64,
    pub beam_width: usize,
    /// Pools, besides those already held, that the beam search may use.
    pub beam_targets: usize,
    pub mode: SimMode,
    pub batch_size: usize,
    pub cooldown: usize,
    pub max_steps: usize,
    pub initial_state: InitialState,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            utility_eps: 1e-8,
            margin_precision: 1e-12,
            stake_resolution: 1e-8,
            beam_width: 10,
            beam_targets: 16,
            mode: SimMode::Sequential,
            batch_size: 5,
            cooldown: 100,
            max_steps: 20_000,
            initial_state: InitialState::Inactive,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.utility_eps > 0.0) {
            return Err(RssError::InvalidParam("utility_eps must be > 0".into()));
        }
        if !(self.margin_precision > 0.0 && self.margin_precision < 1.0) {
            return Err(RssError::InvalidParam(
                "margin_precision must lie in (0, 1)".into(),
            ));
        }
        if !(self.stake_resolution > 0.0 && self.stake_resolution <= 1.0) {
            return Err(RssError::InvalidParam(
                "stake_resolution must lie in (0, 1]".into(),
            ));
        }
        if self.beam_width == 0 || self.beam_targets == 0 {
            return Err(RssError::InvalidParam(
                "beam_width and beam_targets must be ≥ 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(RssError::InvalidParam("batch_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MoveKind {
    OpenPool { margin: f64 },
    ChangeMargin { margin: f64 },
    ClosePool { delegations: Vec<(usize, f64)> },
    Redelegate { delegations: Vec<(usize, f64)> },
}

impl MoveKind {
    pub fn is_pool_move(&self) -> bool {
        !matches!(self, MoveKind::Redelegate { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Move {
    pub player: usize,
    pub kind: MoveKind,
    /// Predicted utility gain.
    pub gain: f64,
    /// Predicted utility after the move.
    pub utility: f64,
}

/// Utility notion players maximize under a scheme.
pub fn utility_kind(scheme: &RewardScheme) -> UtilityKind {
    match scheme.kind {
        SchemeKind::Fair => UtilityKind::Myopic(*scheme),
        SchemeKind::CapMargin => {
            UtilityKind::NonMyopic(RankMode::TwoStage(TieRule::PotentialProfit))
        }
    }
}

/// Margins of the pools other players would plausibly run: leaders whose
/// pools rank among the `k` most desirable keep theirs; any other player,
/// including the leader of a pool ranked below `k`, gets the smallest
/// margin at which a saturated pool would beat its current utility, or no
/// entry when no margin below 1 does.
pub fn hypothetical_competitor_margins(
    actor: usize,
    joint: &JointStrategy,
    pop: &Population,
    params: &GameParams,
) -> Vec<Option<f64>> {
    let utilities = nm_utilities(
        joint,
        pop,
        params,
        RankMode::TwoStage(TieRule::PotentialProfit),
    );
    let mut m = competitor_margins(joint, pop, params, &utilities);
    m[actor] = None;
    m
}

/// `(u − (r − c)q)/((r − c)(1 − q))` for a player of stake `s` with
/// utility `u`, where `r − c` is the profit of a pool of stake
/// `max(s, β)`; `None` when that profit is not positive or the margin
/// would reach 1.
pub fn entry_margin(u: f64, profit: f64, s: f64, beta: f64) -> Option<f64> {
    if profit <= 0.0 {
        return None;
    }
    let q = s / s.max(beta);
    if q >= 1.0 {
        return Some(0.0);
    }
    let m = (u - profit * q) / (profit * (1.0 - q));
    if m >= 1.0 {
        None
    } else {
        Some(m.max(0.0))
    }
}

fn competitor_margins(
    joint: &JointStrategy,
    pop: &Population,
    params: &GameParams,
    utilities: &[f64],
) -> Vec<Option<f64>> {
    let beta = params.beta();
    let table = rank_pools(
        joint,
        pop,
        params,
        RankMode::TwoStage(TieRule::PotentialProfit),
    );
    (0..joint.len())
        .map(|b| {
            let s = joint.strategy(b);
            if s.active && table.top_k[b] {
                Some(s.margin)
            } else {
                let profit = crate::rewards::potential_profit(pop.stake(b), pop.cost(b), params);
                entry_margin(utilities[b], profit, pop.stake(b), beta)
            }
        })
        .collect()
}

/// Desirability and potential profit of every competitor entry.
fn competitor_keys(
    joint: &JointStrategy,
    pop: &Population,
    params: &GameParams,
    margins: &[Option<f64>],
) -> Vec<Option<(f64, f64)>> {
    (0..joint.len())
        .map(|b| {
            margins[b].map(|m| {
                let s = joint.strategy(b);
                let pledge = if s.active { s.pledge } else { pop.stake(b) };
                let p = crate::rewards::potential_profit(pledge, pop.cost(b), params);
                ((1.0 - m) * p.max(0.0), p)
            })
        })
        .collect()
}

/// Largest margin, to within `precision`, at which `actor` pledging its
/// whole stake ranks among the `k` most desirable entries of `keys`. An
/// entry whose desirability is within `TIE_EPS` of the actor's counts as
/// ranking above it.
fn viable_margin_from_keys(
    actor: usize,
    keys: &[Option<(f64, f64)>],
    pop: &Population,
    params: &GameParams,
    precision: f64,
) -> Option<f64> {
    let p_a = crate::rewards::potential_profit(pop.stake(actor), pop.cost(actor), params);
    if p_a <= 0.0 {
        return None;
    }
    let feasible = |m: f64| {
        let d_a = (1.0 - m) * p_a;
        if d_a <= 0.0 {
            return false;
        }
        let mut above = 0;
        for (b, key) in keys.iter().enumerate() {
            let Some((d_b, _)) = *key else { continue };
            if b == actor || d_b <= 0.0 {
                continue;
            }
            let beats = d_b >= d_a - TIE_EPS;
            if beats {
                above += 1;
                if above >= params.k {
                    return false;
                }
            }
        }
        true
    };
    if !feasible(0.0) {
        return None;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while hi - lo > precision {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

/// Highest margin below 1 at which `actor`'s pool would rank among the `k`
/// most desirable hypothetical pools.
pub fn viable_pool_margin(
    actor: usize,
    joint: &JointStrategy,
    pop: &Population,
    params: &GameParams,
    cfg: &SimConfig,
) -> Option<f64> {
    let margins = hypothetical_competitor_margins(actor, joint, pop, params);
    let keys = competitor_keys(joint, pop, params, &margins);
    viable_margin_from_keys(actor, &keys, pop, params, cfg.margin_precision)
}

/// A delegation plan with its utility.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub delegations: Vec<(usize, f64)>,
    pub utility: f64,
}

#[derive(Clone)]
struct BeamState {
    units: Vec<u64>,
    value: f64,
}

/// Beam search over allocations of the deviator's stake in multiples of
/// `stake_resolution·s` to the active pools of `frame`, the deviator's own
/// pool excluded. Returns the best allocation found, which is never worse
/// than `floor` (the value of the current delegations).
fn beam_delegation(ctx: &DeviationContext, frame: &Frame, cfg: &SimConfig) -> Allocation {
    let i = ctx.player;
    let stake = ctx.pop.stake(i);
    let beta = ctx.params.beta();
    let me = ctx.joint.strategy(i);
    let held: Vec<usize> = me
        .delegations
        .iter()
        .filter(|(j, a)| **a > 0.0 && ctx.joint.is_active(**j) && **j != i)
        .map(|(j, _)| *j)
        .collect();
    let mut scored: Vec<(f64, usize)> = (0..ctx.joint.len())
        .filter(|&j| j != i && ctx.joint.is_active(j) && !held.contains(&j))
        .map(|j| {
            let mut rate = ctx.member_value(frame, j, stake) / stake;
            let gap = beta - ctx.others(j);
            if gap > 0.0 && gap < stake {
                rate = rate.max(ctx.member_value(frame, j, gap) / gap);
            }
            (rate, j)
        })
        .filter(|(rate, _)| *rate > 0.0)
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut targets = held.clone();
    targets.extend(scored.iter().take(cfg.beam_targets).map(|x| x.1));
    targets.sort_unstable();
    let slots = targets.len() + 1;
    let free = slots - 1;
    let total = (1.0 / cfg.stake_resolution).round().max(1.0) as u64;
    let unit = stake / total as f64;
    let value_of = |slot: usize, u: u64| -> f64 {
        if slot == free || u == 0 {
            0.0
        } else {
            ctx.member_value(frame, targets[slot], u as f64 * unit)
        }
    };
    let eval = |units: &[u64]| -> f64 { (0..slots).map(|s| value_of(s, units[s])).sum() };

    let mut starts: Vec<Vec<u64>> = Vec::new();
    let mut current = vec![0u64; slots];
    for (slot, &j) in targets.iter().enumerate() {
        let a = me.delegations.get(&j).copied().unwrap_or(0.0);
        current[slot] = ((a / unit) + 1e-6).floor().min(total as f64) as u64;
    }
    let used: u64 = current.iter().sum();
    if used > total {
        current = vec![0; slots];
    }
    current[free] = total - current[..free].iter().sum::<u64>();
    starts.push(current);
    let mut idle = vec![0u64; slots];
    idle[free] = total;
    starts.push(idle);
    for slot in 0..free {
        let mut s = vec![0u64; slots];
        s[slot] = total;
        starts.push(s);
    }
    let mut beam: Vec<BeamState> = starts
        .into_iter()
        .map(|units| BeamState {
            value: eval(&units),
            units,
        })
        .collect();
    prune(&mut beam, cfg.beam_width);

    let mut q = (total / 2).max(1);
    loop {
        let mut guard = 0;
        loop {
            guard += 1;
            let best_before = beam[0].value;
            let mut cand: Vec<BeamState> = beam.clone();
            for st in &beam {
                for src in 0..slots {
                    if st.units[src] < q {
                        continue;
                    }
                    let src_old = value_of(src, st.units[src]);
                    let src_new = value_of(src, st.units[src] - q);
                    for dst in 0..slots {
                        if dst == src {
                            continue;
                        }
                        let v = st.value - src_old + src_new - value_of(dst, st.units[dst])
                            + value_of(dst, st.units[dst] + q);
                        if v > st.value {
                            let mut units = st.units.clone();
                            units[src] -= q;
                            units[dst] += q;
                            cand.push(BeamState { units, value: v });
                        }
                    }
                }
            }
            prune(&mut cand, cfg.beam_width);
            beam = cand;
            if !(beam[0].value > best_before) || guard > 10_000 {
                break;
            }
        }
        if q == 1 {
            break;
        }
        q /= 2;
    }
    let best = &beam[0];
    let delegations = (0..free)
        .filter(|&s| best.units[s] > 0)
        .map(|s| (targets[s], best.units[s] as f64 * unit))
        .collect();
    Allocation {
        delegations,
        utility: eval(&best.units),
    }
}

fn prune(states: &mut Vec<BeamState>, width: usize) {
    states.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then_with(|| a.units.cmp(&b.units))
    });
    states.dedup_by(|a, b| a.units == b.units);
    states.truncate(width);
}

/// Upper bound on the utility of delegating the whole stake under `frame`.
fn delegation_bound(ctx: &DeviationContext, frame: &Frame) -> f64 {
    let i = ctx.player;
    let stake = ctx.pop.stake(i);
    let pools = (0..ctx.joint.len()).filter(|&j| j != i && ctx.joint.is_active(j));
    match ctx.utility {
        UtilityKind::NonMyopic(_) => {
            let beta = ctx.params.beta();
            let d = pools.map(|j| frame.desirability[j]).fold(0.0, f64::max);
            stake * d / beta
        }
        UtilityKind::Myopic(scheme) => match scheme.kind {
            // Per-unit value grows with the amount delegated.
            SchemeKind::Fair => pools
                .map(|j| ctx.member_value(frame, j, stake))
                .fold(0.0, f64::max),
            SchemeKind::CapMargin => f64::INFINITY,
        },
    }
}

/// Best delegation for `actor` with its own pool closed, if it beats
/// `floor + eps`.
fn delegation_move(
    ctx: &DeviationContext,
    frame: &Frame,
    floor: f64,
    cfg: &SimConfig,
) -> Option<Allocation> {
    if delegation_bound(ctx, frame) <= floor + cfg.utility_eps {
        return None;
    }
    let a = beam_delegation(ctx, frame, cfg);
    (a.utility > floor + cfg.utility_eps).then_some(a)
}

/// Best delegation of `actor`'s stake (as if it ran no pool).
pub fn best_delegation(
    actor: usize,
    joint: &JointStrategy,
    pop: &Population,
    scheme: &RewardScheme,
    cfg: &SimConfig,
) -> Allocation {
    let params = scheme.params;
    let ctx = DeviationContext::new(joint, pop, &params, utility_kind(scheme), actor);
    let s = joint.strategy(actor);
    let frame = ctx.frame(false, s.margin, s.pledge);
    let current = ctx.evaluate(&frame, &ctx.current_delegations());
    let a = beam_delegation(&ctx, &frame, cfg);
    if a.utility >= current {
        a
    } else {
        Allocation {
            delegations: ctx.current_delegations(),
            utility: current,
        }
    }
}

/// Per-step data shared by every player's move search.
struct StepCache {
    keys: Vec<Option<(f64, f64)>>,
}

impl StepCache {
    fn new(joint: &JointStrategy, pop: &Population, scheme: &RewardScheme) -> Self {
        let params = scheme.params;
        let keys = match scheme.kind {
            SchemeKind::CapMargin => {
                let u = nm_utilities(
                    joint,
                    pop,
                    &params,
                    RankMode::TwoStage(TieRule::PotentialProfit),
                );
                let m = competitor_margins(joint, pop, &params, &u);
                competitor_keys(joint, pop, &params, &m)
            }
            SchemeKind::Fair => Vec::new(),
        };
        StepCache { keys }
    }
}

fn next_move_cached(
    actor: usize,
    joint: &JointStrategy,
    pop: &Population,
    scheme: &RewardScheme,
    cfg: &SimConfig,
    cache: &StepCache,
    pool_moves: bool,
) -> Option<Move> {
    let params = scheme.params;
    let ctx = DeviationContext::new(joint, pop, &params, utility_kind(scheme), actor);
    let me = joint.strategy(actor);
    let stake = pop.stake(actor);
    let u0 = ctx.current_utility();
    let eps = cfg.utility_eps;
    // Candidates are offered in order of preference; a later one must beat
    // the current choice by more than `eps`.
    let mut best: Option<Move> = None;
    let offer = |best: &mut Option<Move>, kind: MoveKind, u: f64| {
        if u > u0 + eps && best.as_ref().is_none_or(|b| u > b.utility + eps) {
            *best = Some(Move {
                player: actor,
                kind,
                gain: u - u0,
                utility: u,
            });
        }
    };

    let margins: Vec<f64> = match scheme.kind {
        SchemeKind::Fair => vec![0.0],
        SchemeKind::CapMargin => {
            let mut v = Vec::with_capacity(2);
            if let Some(m) =
                viable_margin_from_keys(actor, &cache.keys, pop, &params, cfg.margin_precision)
            {
                v.push(m);
            }
            v.push(1.0);
            v
        }
    };
    if pool_moves {
        for &m in &margins {
            if me.active && m == me.margin {
                continue;
            }
            let f = ctx.frame(true, m, stake);
            let u = ctx.leader_value(&f);
            let kind = if me.active {
                MoveKind::ChangeMargin { margin: m }
            } else {
                MoveKind::OpenPool { margin: m }
            };
            offer(&mut best, kind, u);
        }
    }
    if !me.active || pool_moves {
        let f = ctx.frame(false, me.margin, me.pledge);
        let floor = best.as_ref().map_or(u0, |b| b.utility);
        if let Some(a) = delegation_move(&ctx, &f, floor, cfg) {
            let kind = if me.active {
                MoveKind::ClosePool {
                    delegations: a.delegations,
                }
            } else {
                MoveKind::Redelegate {
                    delegations: a.delegations,
                }
            };
            offer(&mut best, kind, a.utility);
        }
    }
    best
}

/// Best improving move of `actor`, if any.
pub fn next_move(
    actor: usize,
    joint: &JointStrategy,
    pop: &Population,
    scheme: &RewardScheme,
    cfg: &SimConfig,
) -> Option<Move> {
    let cache = StepCache::new(joint, pop, scheme);
    next_move_cached(actor, joint, pop, scheme, cfg, &cache, true)
}

/// Applies `mv` and returns the players whose strategy changed.
pub fn apply_move(joint: &mut JointStrategy, pop: &Population, mv: &Move) -> Vec<usize> {
    let i = mv.player;
    let mut s = joint.strategy(i).clone();
    let mut changed = vec![i];
    match &mv.kind {
        MoveKind::OpenPool { margin } => {
            s.active = true;
            s.margin = *margin;
            s.pledge = pop.stake(i);
            s.delegations.clear();
        }
        MoveKind::ChangeMargin { margin } => s.margin = *margin,
        MoveKind::ClosePool { delegations } | MoveKind::Redelegate { delegations } => {
            s = Strategy::passive(pop.stake(i));
            s.delegations = delegations.iter().copied().collect::<BTreeMap<_, _>>();
        }
    }
    let closing = matches!(mv.kind, MoveKind::ClosePool { .. });
    joint.replace_unchecked(i, s);
    if closing {
        for j in 0..joint.len() {
            if j != i && joint.strategy(j).delegations.contains_key(&i) {
                let mut t = joint.strategy(j).clone();
                t.delegations.remove(&i);
                joint.replace_unchecked(j, t);
                changed.push(j);
            }
        }
    }
    changed
}

/// Starting profile of a run.
pub fn initial_joint(
    pop: &Population,
    scheme: &RewardScheme,
    state: InitialState,
) -> JointStrategy {
    let params = scheme.params;
    let mut joint = JointStrategy::inactive(pop);
    match state {
        InitialState::Inactive => {}
        InitialState::MaxDecentralized => {
            for p in pop.players() {
                if scheme.pool_reward(p.stake, p.stake) > p.cost {
                    joint.replace_unchecked(p.id, Strategy::leader(0.0, p.stake));
                }
            }
        }
        InitialState::NicelyDecentralized => {
            let mut order: Vec<usize> = (0..pop.len()).collect();
            let pp: Vec<f64> = pop
                .players()
                .iter()
                .map(|p| scheme.potential_profit(p.stake, p.cost))
                .collect();
            order.sort_by(|&a, &b| pp[b].total_cmp(&pp[a]).then(a.cmp(&b)));
            let k = params.k.min(pop.len());
            let leaders = &order[..k];
            let target = pop.players().iter().map(|p| p.stake).sum::<f64>() / k as f64;
            let mut room: Vec<f64> = leaders.iter().map(|&l| target - pop.stake(l)).collect();
            for &l in leaders {
                joint.replace_unchecked(l, Strategy::leader(0.0, pop.stake(l)));
            }
            let mut slot = 0;
            for &i in &order[k..] {
                let mut left = pop.stake(i);
                let mut s = Strategy::passive(left);
                while left > 0.0 && slot < k {
                    let x = left.min(room[slot]);
                    if x > 0.0 {
                        *s.delegations.entry(leaders[slot]).or_insert(0.0) += x;
                        room[slot] -= x;
                        left -= x;
                    }
                    if room[slot] <= 1e-15 {
                        slot += 1;
                    } else {
                        break;
                    }
                }
                joint.replace_unchecked(i, s);
            }
        }
    }
    joint
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolSnapshot {
    pub leader: usize,
    pub sigma: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub moves: Vec<Move>,
    /// New strategies of every player whose strategy changed.
    pub changed: Vec<(usize, Strategy)>,
    pub pools: Vec<PoolSnapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub initial: JointStrategy,
    pub records: Vec<StepRecord>,
    pub equilibrium_step: Option<usize>,
    pub converged: bool,
    pub final_state: JointStrategy,
    pub moves_applied: usize,
}

impl SimTrace {
    /// `(step, pool count)` starting with the initial state at step 0.
    pub fn pool_counts(&self) -> Vec<(usize, usize)> {
        let mut v = vec![(0, self.initial.active_pools().len())];
        v.extend(self.records.iter().map(|r| (r.step, r.pools.len())));
        v
    }
}

fn snapshot(joint: &JointStrategy) -> Vec<PoolSnapshot> {
    joint
        .active_pools()
        .into_iter()
        .map(|j| PoolSnapshot {
            leader: j,
            sigma: joint.sigma(j),
            margin: joint.strategy(j).margin,
        })
        .collect()
}

/// Total stake placed or held back, which must equal the population's.
pub fn conservation_gap(joint: &JointStrategy, pop: &Population) -> f64 {
    let placed: f64 = (0..joint.len())
        .map(|i| joint.strategy(i).allocated() + joint.unallocated(i, pop))
        .sum();
    let total: f64 = pop.players().iter().map(|p| p.stake).sum();
    (placed - total).abs()
}

/// Runs the dynamics until no player has an improving move or
/// `max_steps` steps have been taken.
pub fn run(pop: &Population, scheme: &RewardScheme, cfg: &SimConfig) -> Result<SimTrace> {
    cfg.validate()?;
    scheme.params.validate()?;
    if pop.len() != scheme.params.n {
        return Err(RssError::InvalidParam(format!(
            "population of {} players but n = {}",
            pop.len(),
            scheme.params.n
        )));
    }
    let initial = initial_joint(pop, scheme, cfg.initial_state);
    let mut joint = initial.clone();
    let mut rng = seeded_stream(cfg.seed, streams::SCAN_ORDER);
    let mut records = Vec::new();
    let mut cooldown_until = vec![0usize; pop.len()];
    let mut moves_applied = 0;
    let mut equilibrium_step = None;
    let mut order: Vec<usize> = (0..pop.len()).collect();
    let mut step = 1;
    while step <= cfg.max_steps {
        order.shuffle(&mut rng);
        let cache = StepCache::new(&joint, pop, scheme);
        let mut record = StepRecord {
            step,
            moves: Vec::new(),
            changed: Vec::new(),
            pools: Vec::new(),
        };
        let mut touched: Vec<usize> = Vec::new();
        match cfg.mode {
            SimMode::Sequential => {
                for &i in &order {
                    if let Some(mv) = next_move_cached(i, &joint, pop, scheme, cfg, &cache, true) {
                        touched.extend(apply_move(&mut joint, pop, &mv));
                        record.moves.push(mv);
                        break;
                    }
                }
            }
            SimMode::Simultaneous => {
                let mut movers = Vec::new();
                for &i in &order {
                    let pool_ok = cooldown_until[i] <= step;
                    if next_move_cached(i, &joint, pop, scheme, cfg, &cache, pool_ok).is_some() {
                        movers.push(i);
                        if movers.len() == cfg.batch_size {
                            break;
                        }
                    }
                }
                for i in movers {
                    let pool_ok = cooldown_until[i] <= step;
                    let fresh = StepCache::new(&joint, pop, scheme);
                    if let Some(mv) = next_move_cached(i, &joint, pop, scheme, cfg, &fresh, pool_ok)
                    {
                        if mv.kind.is_pool_move() {
                            cooldown_until[i] = step + cfg.cooldown;
                        }
                        touched.extend(apply_move(&mut joint, pop, &mv));
                        record.moves.push(mv);
                    }
                }
            }
        }
        if record.moves.is_empty() {
            let pending = cooldown_until.iter().copied().filter(|&t| t > step).min();
            match (cfg.mode, pending) {
                (SimMode::Simultaneous, Some(t)) => {
                    step = t;
                    continue;
                }
                _ => {
                    equilibrium_step = Some(step);
                    break;
                }
            }
        }
        moves_applied += record.moves.len();
        touched.sort_unstable();
        touched.dedup();
        record.changed = touched
            .iter()
            .map(|&i| (i, joint.strategy(i).clone()))
            .collect();
        record.pools = snapshot(&joint);
        debug_assert!(conservation_gap(&joint, pop) <= ALLOC_SLACK * pop.len() as f64);
        records.push(record);
        step += 1;
    }
    Ok(SimTrace {
        initial,
        records,
        converged: equilibrium_step.is_some(),
        equilibrium_step,
        final_state: joint,
        moves_applied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::build_perfect;
    use crate::game::{init_population, ParetoTail};

    #[test]
    fn entry_margin_formula() {
        let m = entry_margin(0.03, 0.09, 0.02, 0.1).unwrap();
        assert!((m - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(entry_margin(0.03, 0.09, 0.2, 0.1), Some(0.0));
        assert_eq!(entry_margin(0.03, -0.01, 0.02, 0.1), None);
        assert_eq!(entry_margin(1.0, 0.09, 0.02, 0.1), None);
    }

    #[test]
    fn viable_margin_matches_scan() {
        let pop = Population::from_pairs(&[(0.5, 0.05), (0.3, 0.08), (0.2, 0.06)]);
        let g = GameParams::new(3, 1, 1.0, 0.3).unwrap();
        let mut joint = JointStrategy::inactive(&pop);
        joint
            .set_strategy(1, Strategy::leader(0.2, 0.3), &pop)
            .unwrap();
        let cfg = SimConfig::default();
        let m = viable_pool_margin(0, &joint, &pop, &g, &cfg).unwrap();
        let margins = hypothetical_competitor_margins(0, &joint, &pop, &g);
        let keys = competitor_keys(&joint, &pop, &g, &margins);
        let p0 = crate::rewards::potential_profit(0.5, 0.05, &g);
        let mut scan = 0.0;
        for t in 0..1_000_000 {
            let mm = t as f64 * 1e-6;
            let d = (1.0 - mm) * p0;
            let beaten = keys
                .iter()
                .enumerate()
                .filter(|(b, k)| *b != 0 && k.is_some_and(|(db, _)| db > d + TIE_EPS))
                .count();
            if beaten < 1 {
                scan = mm;
            }
        }
        assert!((m - scan).abs() < 1e-6, "{} vs {}", m, scan);
    }

    #[test]
    fn lone_profitable_player_gets_margin_near_one() {
        let pop = Population::from_pairs(&[(0.5, 0.01), (0.3, 2.0), (0.2, 2.0)]);
        let g = GameParams::new(3, 1, 1.0, 0.3).unwrap();
        let joint = JointStrategy::inactive(&pop);
        let m = viable_pool_margin(0, &joint, &pop, &g, &SimConfig::default()).unwrap();
        assert!(1.0 - m < 1e-11, "{}", m);
        assert_eq!(
            viable_pool_margin(1, &joint, &pop, &g, &SimConfig::default()),
            None
        );
    }

    fn three_pools() -> (Population, RewardScheme, JointStrategy) {
        // k = 3; pools 0, 1 saturated, pool 2 short by 0.05; player 5 idle.
        let pop = Population::from_pairs(&[
            (0.2, 0.01),
            (0.2, 0.01),
            (0.2, 0.01),
            (0.1333333333333333, 0.02),
            (0.1333333333333333, 0.02),
            (0.1333333333333334, 0.02),
        ]);
        let g = GameParams::new(6, 3, 1.0, 0.0).unwrap();
        let mut j = JointStrategy::inactive(&pop);
        for l in 0..3 {
            j.set_strategy(l, Strategy::leader(0.1, 0.2), &pop).unwrap();
        }
        let mut s = Strategy::passive(0.1333333333333333);
        s.delegations.insert(0, 0.1333333333333333);
        j.set_strategy(3, s, &pop).unwrap();
        let mut s = Strategy::passive(0.1333333333333333);
        s.delegations.insert(1, 0.1333333333333333);
        j.set_strategy(4, s, &pop).unwrap();
        let mut s = Strategy::passive(0.1333333333333334);
        s.delegations.insert(2, 0.0833333333333334);
        j.set_strategy(5, s, &pop).unwrap();
        (pop, RewardScheme::cap_margin(g), j)
    }

    #[test]
    fn delegation_fills_the_unsaturated_pool() {
        let (pop, scheme, joint) = three_pools();
        let a = best_delegation(5, &joint, &pop, &scheme, &SimConfig::default());
        let to2: f64 = a.delegations.iter().filter(|d| d.0 == 2).map(|d| d.1).sum();
        let d = (1.0 - 0.1) * crate::rewards::potential_profit(0.2, 0.01, &scheme.params);
        let optimum = d * 0.1333333333333334 / scheme.params.beta();
        assert!((a.utility - optimum).abs() < 1e-12, "{:?}", a);
        assert!(to2 > 0.1333333333333334 * (1.0 - 2e-8), "{:?}", a);
    }

    #[test]
    fn zero_desirability_means_no_delegation() {
        let pop = Population::from_pairs(&[(0.5, 0.01), (0.5, 0.01)]);
        let g = GameParams::new(2, 1, 1.0, 0.0).unwrap();
        let mut j = JointStrategy::inactive(&pop);
        j.set_strategy(0, Strategy::leader(1.0, 0.5), &pop).unwrap();
        let a = best_delegation(
            1,
            &j,
            &pop,
            &RewardScheme::cap_margin(g),
            &SimConfig::default(),
        );
        // a margin-1 pool pays members nothing
        assert!(a.delegations.is_empty(), "{:?}", a);
    }

    #[test]
    fn perfect_strategy_is_a_fixpoint() {
        let tail = ParetoTail::new(2.0, 1.0, f64::INFINITY, 12).unwrap();
        let g = GameParams::new(12, 3, 1.0, 0.1).unwrap();
        let pop = init_population(&g, &tail, 0.001, 0.002, 5).unwrap();
        let perfect = build_perfect(&pop, &g).unwrap();
        let scheme = RewardScheme::cap_margin(g);
        for i in 0..12 {
            assert!(
                next_move(i, &perfect.joint, &pop, &scheme, &SimConfig::default()).is_none(),
                "player {}",
                i
            );
        }
    }

    #[test]
    fn fair_member_moves_to_cheaper_pool() {
        let pop = Population::from_pairs(&[(0.4, 0.05), (0.3, 0.2), (0.2, 0.3), (0.1, 0.3)]);
        let g = GameParams::new(4, 1, 1.0, 0.0).unwrap();
        let mut j = JointStrategy::inactive(&pop);
        j.set_strategy(0, Strategy::leader(0.0, 0.4), &pop).unwrap();
        j.set_strategy(1, Strategy::leader(0.0, 0.3), &pop).unwrap();
        let mut m = Strategy::passive(0.2);
        m.delegations.insert(1, 0.2);
        j.set_strategy(2, m, &pop).unwrap();
        let mv = next_move(2, &j, &pop, &RewardScheme::fair(g), &SimConfig::default()).unwrap();
        match mv.kind {
            MoveKind::Redelegate { delegations } => assert_eq!(delegations[0].0, 0),
            other => panic!("{:?}", other),
        }
        assert!(mv.gain > 0.0);
    }

    #[test]
    fn expensive_fair_population_stays_idle() {
        let pop = Population::from_pairs(&[(0.5, 1.1), (0.3, 1.2), (0.2, 1.5)]);
        let g = GameParams::new(3, 1, 1.0, 0.0).unwrap();
        let j = JointStrategy::inactive(&pop);
        for i in 0..3 {
            assert!(
                next_move(i, &j, &pop, &RewardScheme::fair(g), &SimConfig::default()).is_none()
            );
        }
    }

    #[test]
    fn closing_strands_members() {
        let pop = Population::from_pairs(&[(0.5, 0.4), (0.3, 0.01), (0.2, 0.01)]);
        let mut j = JointStrategy::inactive(&pop);
        j.set_strategy(0, Strategy::leader(0.0, 0.5), &pop).unwrap();
        j.set_strategy(1, Strategy::leader(0.0, 0.3), &pop).unwrap();
        let mut m = Strategy::passive(0.2);
        m.delegations.insert(0, 0.2);
        j.set_strategy(2, m, &pop).unwrap();
        let mv = Move {
            player: 0,
            kind: MoveKind::ClosePool {
                delegations: vec![(1, 0.5)],
            },
            gain: 0.0,
            utility: 0.0,
        };
        let changed = apply_move(&mut j, &pop, &mv);
        assert_eq!(changed, vec![0, 2]);
        assert_eq!(j.unallocated(2, &pop), 0.2);
        assert!(conservation_gap(&j, &pop) < 1e-15);
    }

    #[test]
    fn small_fair_run_centralizes() {
        let tail = ParetoTail::new(2.0, 1.0, f64::INFINITY, 20).unwrap();
        let g = GameParams::new(20, 5, 1.0, 0.0).unwrap();
        let pop = init_population(&g, &tail, 0.001, 0.002, 1).unwrap();
        let scheme = RewardScheme::fair(g);
        for init in [
            InitialState::Inactive,
            InitialState::MaxDecentralized,
            InitialState::NicelyDecentralized,
        ] {
            let cfg = SimConfig {
                initial_state: init,
                ..SimConfig::default()
            };
            let t = run(&pop, &scheme, &cfg).unwrap();
            assert!(t.converged);
            let pools = t.final_state.active_pools();
            assert_eq!(pools.len(), 1, "{:?}", init);
            assert!((t.final_state.sigma(pools[0]) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn small_cap_margin_run_reaches_k_pools() {
        let tail = ParetoTail::new(2.0, 1.0, f64::INFINITY, 20).unwrap();
        let g = GameParams::new(20, 4, 1.0, 0.05).unwrap();
        let pop = init_population(&g, &tail, 0.001, 0.002, 2).unwrap();
        let scheme = RewardScheme::cap_margin(g);
        let t = run(&pop, &scheme, &SimConfig::default()).unwrap();
        assert!(t.converged);
        let pools = t.final_state.active_pools();
        assert_eq!(pools.len(), 4);
        for &p in &pools {
            assert!((t.final_state.sigma(p) - 0.25).abs() < 1e-6);
        }
        let t2 = run(&pop, &scheme, &SimConfig::default()).unwrap();
        assert_eq!(t, t2);
    }
}

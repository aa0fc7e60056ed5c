//! Run configuration and the CSV exports of a simulation: the step-by-step
//! dynamics trace, the pool-count series and the equilibrium table.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{InitialState, SimConfig, SimMode, SimTrace};
use crate::error::{Result, RssError};
use crate::game::{init_population, GameParams, ParetoTail, Population};
use crate::rewards::{RewardScheme, SchemeKind};
use crate::strategy::{desirability, rank_order, JointStrategy, RankMode, Strategy, TieRule};

/// Ranking used when `verify-perfect` checks the perfect strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VerifyRanking {
    #[default]
    SingleStage,
    TwoStage,
}

impl VerifyRanking {
    pub fn rank_mode(self) -> RankMode {
        match self {
            VerifyRanking::SingleStage => RankMode::SingleStage,
            VerifyRanking::TwoStage => RankMode::TwoStage(TieRule::PotentialProfit),
        }
    }
}

/// Every knob of a run. Missing keys take the defaults of [`Default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    pub k: usize,
    pub total_reward: f64,
    pub alpha: f64,
    pub scheme: SchemeKind,
    pub pareto_shape: f64,
    pub pareto_theta: f64,
    /// Truncation point of the stake distribution; `null` for none.
    pub pareto_upper: Option<f64>,
    /// Number of agents in whale queries; `null` for `n`.
    pub tail_agents: Option<usize>,
    pub cost_min: f64,
    pub cost_max: f64,
    pub seed: u64,
    /// Output directory; `null` for the working directory.
    pub out: Option<String>,
    pub utility_eps: f64,
    pub margin_precision: f64,
    pub stake_resolution: f64,
    pub beam_width: usize,
    pub beam_targets: usize,
    pub mode: SimMode,
    pub batch_size: usize,
    pub cooldown: usize,
    pub max_steps: usize,
    pub initial_state: InitialState,
    pub margin_step: f64,
    pub stake_step: f64,
    pub verify_ranking: VerifyRanking,
    /// `ε′` as a fraction of its admissible maximum.
    pub epsilon_fraction: f64,
    pub audit_conforming: usize,
    pub audit_random: usize,
    pub audit_outer: usize,
    pub trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        RunConfig {
            n: 100,
            k: 10,
            total_reward: 1.0,
            alpha: 0.02,
            scheme: SchemeKind::CapMargin,
            pareto_shape: 2.0,
            pareto_theta: 1.0,
            pareto_upper: None,
            tail_agents: None,
            cost_min: 0.001,
            cost_max: 0.002,
            seed: 0,
            out: None,
            utility_eps: sim.utility_eps,
            margin_precision: sim.margin_precision,
            stake_resolution: sim.stake_resolution,
            beam_width: sim.beam_width,
            beam_targets: sim.beam_targets,
            mode: sim.mode,
            batch_size: sim.batch_size,
            cooldown: sim.cooldown,
            max_steps: sim.max_steps,
            initial_state: sim.initial_state,
            margin_step: 0.01,
            stake_step: 1e-3,
            verify_ranking: VerifyRanking::SingleStage,
            epsilon_fraction: 0.5,
            audit_conforming: 6,
            audit_random: 12,
            audit_outer: 16,
            trials: 500,
        }
    }
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(RssError::Config(msg.to_string()))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.n >= 1, "n must be ≥ 1")?;
        check(self.k >= 1, "k must be ≥ 1")?;
        check(self.k <= self.n, "k must be ≤ n")?;
        check(
            self.total_reward > 0.0 && self.total_reward.is_finite(),
            "total_reward must be positive and finite",
        )?;
        check(
            self.alpha >= 0.0 && self.alpha.is_finite(),
            "alpha must be ≥ 0 and finite",
        )?;
        check(
            self.pareto_shape > 0.0 && self.pareto_shape.is_finite(),
            "pareto_shape must be positive and finite",
        )?;
        check(
            self.pareto_theta > 0.0 && self.pareto_theta.is_finite(),
            "pareto_theta must be positive and finite",
        )?;
        if let Some(t) = self.pareto_upper {
            check(
                t >= self.pareto_theta,
                "pareto_upper must be ≥ pareto_theta",
            )?;
        }
        if let Some(a) = self.tail_agents {
            check(a >= 1, "tail_agents must be ≥ 1")?;
        }
        check(self.cost_min > 0.0, "cost_min must be > 0")?;
        check(self.cost_max > self.cost_min, "cost_max must be > cost_min")?;
        check(
            self.cost_max < self.total_reward,
            "cost_max must be < total_reward",
        )?;
        check(
            self.margin_step > 0.0 && self.margin_step <= 1.0,
            "margin_step must lie in (0, 1]",
        )?;
        check(
            self.stake_step > 0.0 && self.stake_step <= 1.0,
            "stake_step must lie in (0, 1]",
        )?;
        check(
            self.epsilon_fraction > 0.0 && self.epsilon_fraction < 1.0,
            "epsilon_fraction must lie in (0, 1)",
        )?;
        check(self.trials >= 1, "trials must be ≥ 1")?;
        self.sim_config()
            .validate()
            .map_err(|e| RssError::Config(e.to_string()))
    }

    pub fn game_params(&self) -> Result<GameParams> {
        GameParams::new(self.n, self.k, self.total_reward, self.alpha)
    }

    pub fn scheme(&self) -> Result<RewardScheme> {
        Ok(RewardScheme::new(self.scheme, self.game_params()?))
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            utility_eps: self.utility_eps,
            margin_precision: self.margin_precision,
            stake_resolution: self.stake_resolution,
            beam_width: self.beam_width,
            beam_targets: self.beam_targets,
            mode: self.mode,
            batch_size: self.batch_size,
            cooldown: self.cooldown,
            max_steps: self.max_steps,
            initial_state: self.initial_state,
            seed: self.seed,
        }
    }

    /// Stake distribution with `n_agents` set to `n`.
    pub fn population_tail(&self) -> Result<ParetoTail> {
        self.tail_with_agents(self.n)
    }

    /// Stake distribution with `n_agents` set to `tail_agents`.
    pub fn whale_tail(&self) -> Result<ParetoTail> {
        self.tail_with_agents(self.tail_agents.unwrap_or(self.n))
    }

    fn tail_with_agents(&self, agents: usize) -> Result<ParetoTail> {
        ParetoTail::new(
            self.pareto_shape,
            self.pareto_theta,
            self.pareto_upper.unwrap_or(f64::INFINITY),
            agents,
        )
    }

    /// The seeded population of this configuration.
    pub fn population(&self) -> Result<Population> {
        init_population(
            &self.game_params()?,
            &self.population_tail()?,
            self.cost_min,
            self.cost_max,
            self.seed,
        )
    }

    /// Pretty JSON listing every key; parsing it gives back `self`.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Parses and validates a JSON configuration. Errors name the offending
/// key.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            RssError::Config(e.inner().to_string())
        } else {
            RssError::Config(format!("{}: {}", path, e.inner()))
        }
    })?;
    de.end().map_err(|e| RssError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RssError::Io(format!("{}: {}", path.display(), e)))?;
    parse_config(&text)
}

/// Writes `contents` to a temporary file beside `path` and renames it into
/// place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| RssError::Io(e.to_string()))?;
    Ok(())
}

/// One surviving pool of an equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumRow {
    /// Potential-profit rank of the leader.
    pub player: usize,
    /// Desirability rank of the pool among surviving pools.
    pub rk: usize,
    /// Cost rank of the leader, 1 = cheapest.
    pub crk: usize,
    /// Stake rank of the leader, 1 = largest.
    pub srk: usize,
    pub cost: f64,
    pub margin: f64,
    pub player_stake: f64,
    pub pool_stake: f64,
    pub reward: f64,
    pub desirability: f64,
}

pub const EQUILIBRIUM_HEADER: &str =
    "player,rk,crk,srk,cost,margin,player_stake,pool_stake,reward,desirability";

fn fixed(x: f64) -> String {
    format!("{:.8}", x + 0.0)
}

fn significant(x: f64) -> String {
    format!("{:.14e}", x + 0.0)
}

fn reparse(s: &str) -> f64 {
    s.parse().expect("formatted float parses")
}

impl EquilibriumRow {
    /// The row as it reads back from its printed form.
    pub fn at_printed_precision(&self) -> Self {
        EquilibriumRow {
            cost: reparse(&fixed(self.cost)),
            margin: reparse(&fixed(self.margin)),
            player_stake: reparse(&fixed(self.player_stake)),
            pool_stake: reparse(&fixed(self.pool_stake)),
            reward: reparse(&fixed(self.reward)),
            desirability: reparse(&significant(self.desirability)),
            ..self.clone()
        }
    }
}

/// 1-based ranks of `values` in the order given by `before`, ties broken
/// by id.
fn ranks_by(values: &[f64], before: impl Fn(f64, f64) -> bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        if before(values[a], values[b]) {
            std::cmp::Ordering::Less
        } else if before(values[b], values[a]) {
            std::cmp::Ordering::Greater
        } else {
            a.cmp(&b)
        }
    });
    let mut ranks = vec![0; values.len()];
    for (r, &i) in idx.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// Table rows for every active pool of `joint`, sorted by the player
/// column.
pub fn equilibrium_rows(
    joint: &JointStrategy,
    pop: &Population,
    scheme: &RewardScheme,
) -> Vec<EquilibriumRow> {
    let params = &scheme.params;
    let costs: Vec<f64> = pop.players().iter().map(|p| p.cost).collect();
    let stakes: Vec<f64> = pop.players().iter().map(|p| p.stake).collect();
    let crk = ranks_by(&costs, |a, b| a < b);
    let srk = ranks_by(&stakes, |a, b| a > b);
    let prk = pop.potential_ranks(params);
    let pools = joint.active_pools();
    let mut rows: Vec<EquilibriumRow> = pools
        .iter()
        .map(|&j| {
            let s = joint.strategy(j);
            let sigma = joint.sigma(j);
            let reward = scheme.pool_reward(sigma, s.pledge);
            let d = match scheme.kind {
                SchemeKind::CapMargin => {
                    desirability(s.margin, s.pledge, pop.cost(j), params, true)
                }
                SchemeKind::Fair => (1.0 - s.margin) * (reward - pop.cost(j)).max(0.0),
            };
            EquilibriumRow {
                player: prk[j],
                rk: 0,
                crk: crk[j],
                srk: srk[j],
                cost: pop.cost(j),
                margin: s.margin,
                player_stake: s.pledge,
                pool_stake: sigma,
                reward,
                desirability: d,
            }
        })
        .collect();
    let d: Vec<f64> = rows.iter().map(|r| r.desirability).collect();
    let p: Vec<f64> = pools
        .iter()
        .map(|&j| scheme.potential_profit(pop.stake(j), pop.cost(j)))
        .collect();
    for (r, i) in rank_order(&d, &p, TieRule::PotentialProfit)
        .into_iter()
        .enumerate()
    {
        rows[i].rk = r + 1;
    }
    rows.sort_by_key(|r| r.player);
    rows
}

pub fn format_equilibrium_table(rows: &[EquilibriumRow]) -> String {
    let mut out = String::from(EQUILIBRIUM_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.player,
            r.rk,
            r.crk,
            r.srk,
            fixed(r.cost),
            fixed(r.margin),
            fixed(r.player_stake),
            fixed(r.pool_stake),
            fixed(r.reward),
            significant(r.desirability)
        );
    }
    out
}

/// The equilibrium table of a converged run. A run that stopped without
/// reaching equilibrium is refused.
pub fn emit_equilibrium_table(
    trace: &SimTrace,
    pop: &Population,
    scheme: &RewardScheme,
) -> Result<String> {
    if !trace.converged {
        return Err(RssError::Argument(
            "the run did not reach an equilibrium; no table is emitted".into(),
        ));
    }
    Ok(format_equilibrium_table(&equilibrium_rows(
        &trace.final_state,
        pop,
        scheme,
    )))
}

pub fn parse_equilibrium_table(text: &str) -> Result<Vec<EquilibriumRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == EQUILIBRIUM_HEADER => {}
        other => {
            return Err(RssError::Argument(format!(
                "unexpected equilibrium header: {:?}",
                other
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |what: &str| RssError::Argument(format!("line {}: {}", lineno + 2, what));
        if cols.len() != 10 {
            return Err(bad("expected 10 columns"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(&e.to_string()));
        let float = |s: &str| s.parse::<f64>().map_err(|e| bad(&e.to_string()));
        rows.push(EquilibriumRow {
            player: int(cols[0])?,
            rk: int(cols[1])?,
            crk: int(cols[2])?,
            srk: int(cols[3])?,
            cost: float(cols[4])?,
            margin: float(cols[5])?,
            player_stake: float(cols[6])?,
            pool_stake: float(cols[7])?,
            reward: float(cols[8])?,
            desirability: float(cols[9])?,
        });
    }
    Ok(rows)
}

fn allocation_rows(out: &mut String, step: usize, player: usize, s: &Strategy, stake: f64) {
    if s.active {
        let _ = writeln!(out, "{},{},{},{:.16e}", step, player, player, s.pledge);
    }
    for (j, a) in &s.delegations {
        let _ = writeln!(out, "{},{},{},{:.16e}", step, player, j, a);
    }
    let free = (stake - s.allocated()).max(0.0);
    let _ = writeln!(out, "{},{},-1,{:.16e}", step, player, free);
}

/// Header of the dynamics trace CSV.
pub const DYNAMICS_HEADER: &str = "step,player,pool_leader,amount";

/// The dynamics trace: step 0 lists every player's allocation, later steps
/// list the complete new allocation of each player whose strategy changed.
/// `pool_leader = -1` carries the unallocated stake.
pub fn dynamics_csv(trace: &SimTrace, pop: &Population) -> String {
    let mut out = String::from(DYNAMICS_HEADER);
    out.push('\n');
    for (i, s) in trace.initial.strategies().iter().enumerate() {
        allocation_rows(&mut out, 0, i, s, pop.stake(i));
    }
    for rec in &trace.records {
        for (i, s) in &rec.changed {
            allocation_rows(&mut out, rec.step, *i, s, pop.stake(*i));
        }
    }
    out
}

/// Replays a dynamics trace CSV into the allocation of every player after
/// the last step: `(pool_leader, amount)` pairs with `-1` for unallocated
/// stake.
pub fn replay_dynamics_csv(text: &str, n: usize) -> Result<Vec<Vec<(i64, f64)>>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(DYNAMICS_HEADER) {
        return Err(RssError::Argument("unexpected dynamics header".into()));
    }
    let mut state: Vec<Vec<(i64, f64)>> = vec![Vec::new(); n];
    let mut current: Option<(usize, usize)> = None;
    for (lineno, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || RssError::Argument(format!("line {}: malformed row", lineno + 2));
        if cols.len() != 4 {
            return Err(bad());
        }
        let step: usize = cols[0].parse().map_err(|_| bad())?;
        let player: usize = cols[1].parse().map_err(|_| bad())?;
        let pool: i64 = cols[2].parse().map_err(|_| bad())?;
        let amount: f64 = cols[3].parse().map_err(|_| bad())?;
        if player >= n {
            return Err(bad());
        }
        if current != Some((step, player)) {
            state[player].clear();
            current = Some((step, player));
        }
        state[player].push((pool, amount));
    }
    Ok(state)
}

/// Pool count after every step, starting with the initial state at step 0.
pub fn pools_csv(trace: &SimTrace) -> String {
    let mut out = String::from("step,pool_count\n");
    for (step, count) in trace.pool_counts() {
        let _ = writeln!(out, "{},{}", step, count);
    }
    out
}

//! Global game parameters, player populations and the samplers used to
//! build them.
//!
//! Stakes are relative (they sum to one once a population is normalized)
//! and each player carries a fixed operating cost that is paid only when the
//! player runs a pool.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RssError};
use crate::rewards;

/// Stream ids used to split one master seed into independent generators.
pub mod streams {
    pub const POPULATION: u64 = 0;
    pub const SCAN_ORDER: u64 = 1;
    pub const MONTE_CARLO: u64 = 2;
    pub const INSTANCES: u64 = 3;
    pub const AUDIT: u64 = 4;
}

/// Seeded ChaCha8 generator on a given stream. Two generators built from the
/// same seed but different streams never overlap.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Global constants of the stake-pools game.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameParams {
    pub n: usize,
    pub k: usize,
    pub total_reward: f64,
    pub alpha: f64,
}

impl GameParams {
    pub fn new(n: usize, k: usize, total_reward: f64, alpha: f64) -> Result<Self> {
        let p = GameParams {
            n,
            k,
            total_reward,
            alpha,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(RssError::InvalidParam("n must be ≥ 2".into()));
        }
        if self.k < 1 {
            return Err(RssError::InvalidParam("k must be ≥ 1".into()));
        }
        if self.k >= self.n {
            return Err(RssError::InvalidParam(format!(
                "k must be < n (k={}, n={})",
                self.k, self.n
            )));
        }
        if !(self.total_reward > 0.0) || !self.total_reward.is_finite() {
            return Err(RssError::InvalidParam("total reward R must be > 0".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(RssError::InvalidParam("alpha must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Saturation cap, `1/k`.
    #[inline]
    pub fn beta(&self) -> f64 {
        1.0 / self.k as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Player {
    pub id: usize,
    pub stake: f64,
    pub cost: f64,
}

/// The `n` players of one game instance. Player ids equal their index.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    players: Vec<Player>,
    normalized: bool,
    notes: Vec<String>,
}

impl Population {
    /// Builds a population from `(stake, cost)` pairs. Stakes are taken as
    /// given; `normalized` is set when they sum to one within 1e-12.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let players: Vec<Player> = pairs
            .iter()
            .enumerate()
            .map(|(id, &(stake, cost))| Player { id, stake, cost })
            .collect();
        let sum: f64 = players.iter().map(|p| p.stake).sum();
        Population {
            players,
            normalized: (sum - 1.0).abs() <= 1e-12,
            notes: Vec::new(),
        }
    }

    pub fn players(&self) -> &[Player] {
        &self.players
    }

    pub fn len(&self) -> usize {
        self.players.len()
    }

    pub fn is_empty(&self) -> bool {
        self.players.is_empty()
    }

    pub fn stake(&self, id: usize) -> f64 {
        self.players[id].stake
    }

    pub fn cost(&self, id: usize) -> f64 {
        self.players[id].cost
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Adjustments applied while building the population (tie perturbations).
    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    /// Replaces one player's cost, e.g. to model a declared cost.
    pub fn with_cost(&self, id: usize, cost: f64) -> Population {
        let mut p = self.clone();
        p.players[id].cost = cost;
        p
    }

    /// Potential profit `P(s_i, c_i)` of every player, pledging full stake.
    pub fn potential_profits(&self, params: &GameParams) -> Vec<f64> {
        self.players
            .iter()
            .map(|p| rewards::potential_profit(p.stake, p.cost, params))
            .collect()
    }

    /// Player ids ordered by decreasing potential profit (rank 1 first).
    /// Exact ties fall back to the lower id.
    pub fn potential_order(&self, params: &GameParams) -> Vec<usize> {
        let pp = self.potential_profits(params);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| pp[b].total_cmp(&pp[a]).then(a.cmp(&b)));
        order
    }

    /// 1-based potential-profit rank of every player.
    pub fn potential_ranks(&self, params: &GameParams) -> Vec<usize> {
        let mut ranks = vec![0; self.len()];
        for (pos, id) in self.potential_order(params).into_iter().enumerate() {
            ranks[id] = pos + 1;
        }
        ranks
    }

    /// Separates exactly tied potential profits by nudging the smaller-stake
    /// player's cost up by `1e-15 · rank`.
    pub fn perturb_ties(&mut self, params: &GameParams) {
        for _ in 0..16 {
            let order = self.potential_order(params);
            let pp = self.potential_profits(params);
            let mut changed = false;
            for w in 0..order.len().saturating_sub(1) {
                let (a, b) = (order[w], order[w + 1]);
                if pp[a] == pp[b] {
                    let (victim, rank) = if self.players[a].stake < self.players[b].stake {
                        (a, w + 1)
                    } else {
                        (b, w + 2)
                    };
                    let bump = 1e-15 * rank as f64;
                    self.players[victim].cost += bump;
                    self.notes.push(format!(
                        "tied potential profit: player {} cost raised by {:e}",
                        victim, bump
                    ));
                    changed = true;
                    break;
                }
            }
            if !changed {
                return;
            }
        }
    }

    /// CSV with header `id,stake,cost`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,stake,cost\n");
        for p in &self.players {
            let _ = writeln!(out, "{},{:.16e},{:.16e}", p.id, p.stake, p.cost);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Population> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "id,stake,cost" => {}
            other => {
                return Err(RssError::Argument(format!(
                    "unexpected population header: {:?}",
                    other
                )))
            }
        }
        let mut pairs = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(RssError::Argument(format!(
                    "line {}: expected 3 columns",
                    lineno + 2
                )));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| RssError::Argument(format!("line {}: {}", lineno + 2, e)))
            };
            pairs.push((parse(cols[1])?, parse(cols[2])?));
        }
        Ok(Population::from_pairs(&pairs))
    }
}

/// Upper-truncated Pareto distribution on `[theta, upper]`. `upper` may be
/// infinite (plain Pareto); `theta == upper` is the point mass at `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoTail {
    pub shape: f64,
    pub theta: f64,
    pub upper: f64,
    pub n_agents: usize,
}

impl ParetoTail {
    pub fn new(shape: f64, theta: f64, upper: f64, n_agents: usize) -> Result<Self> {
        if shape == 0.0 || !shape.is_finite() {
            return Err(RssError::InvalidParam(
                "pareto shape must be finite and ≠ 0".into(),
            ));
        }
        if !(theta > 0.0) || !(upper >= theta) {
            return Err(RssError::InvalidParam(format!(
                "pareto support requires 0 < theta ≤ T (theta={}, T={})",
                theta, upper
            )));
        }
        Ok(ParetoTail {
            shape,
            theta,
            upper,
            n_agents,
        })
    }

    fn truncation_mass(&self) -> f64 {
        1.0 - (self.theta / self.upper).powf(self.shape)
    }

    fn is_degenerate(&self) -> bool {
        self.theta == self.upper
    }
}

/// `F_X(x) = (1 − (θ/x)^a) / (1 − (θ/T)^a)` on `θ ≤ x ≤ T`.
pub fn truncated_pareto_cdf(x: f64, tail: &ParetoTail) -> Result<f64> {
    if !(x >= tail.theta && x <= tail.upper) {
        return Err(RssError::Domain(format!(
            "x={} outside pareto support [{}, {}]",
            x, tail.theta, tail.upper
        )));
    }
    if tail.is_degenerate() {
        return Ok(1.0);
    }
    let v = (1.0 - (tail.theta / x).powf(tail.shape)) / tail.truncation_mass();
    Ok(v.clamp(0.0, 1.0))
}

/// Inverse-CDF sample for `u ∈ [0, 1)`.
pub fn sample_truncated_pareto(u: f64, tail: &ParetoTail) -> f64 {
    debug_assert!((0.0..1.0).contains(&u));
    if tail.is_degenerate() {
        return tail.theta;
    }
    let x = tail.theta / (1.0 - u * tail.truncation_mass()).powf(1.0 / tail.shape);
    x.min(tail.upper)
}

/// Converts raw positive samples into relative stakes summing to one with
/// no stake above `beta`. Players whose share would exceed the cap are
/// pinned at `beta` and the rest rescaled; the loop repeats until no
/// uncapped share exceeds the cap.
pub fn cap_and_normalize(raw: &[f64], beta: f64) -> Result<Vec<f64>> {
    let n = raw.len();
    if n == 0 {
        return Err(RssError::Construction("empty stake sample".into()));
    }
    if raw.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(RssError::Construction(
            "raw stakes must be positive and finite".into(),
        ));
    }
    if (n as f64) * beta < 1.0 - 1e-12 {
        return Err(RssError::Construction(format!(
            "{} players cannot each hold at most {} of the stake",
            n, beta
        )));
    }
    let mut capped = vec![false; n];
    let mut out = vec![0.0; n];
    for _round in 0..=n {
        let n_capped = capped.iter().filter(|&&c| c).count();
        let free_mass = 1.0 - n_capped as f64 * beta;
        let free_raw: f64 = raw
            .iter()
            .zip(&capped)
            .filter(|(_, &c)| !c)
            .map(|(x, _)| *x)
            .sum();
        let mut newly = false;
        for i in 0..n {
            if capped[i] {
                out[i] = beta;
            } else {
                out[i] = if free_raw > 0.0 {
                    raw[i] * free_mass / free_raw
                } else {
                    0.0
                };
                if out[i] > beta {
                    newly = true;
                }
            }
        }
        if !newly {
            return Ok(out);
        }
        for i in 0..n {
            if !capped[i] && out[i] > beta {
                capped[i] = true;
            }
        }
    }
    Err(RssError::Construction(
        "cap-and-normalize did not converge".into(),
    ))
}

/// Samples `params.n` players: Pareto stakes capped at `beta` and
/// normalized, costs uniform in `[cost_min, cost_max]`.
pub fn init_population(
    params: &GameParams,
    tail: &ParetoTail,
    cost_min: f64,
    cost_max: f64,
    seed: u64,
) -> Result<Population> {
    if !(cost_min > 0.0 && cost_min < cost_max && cost_max < params.total_reward) {
        return Err(RssError::InvalidParam(format!(
            "costs must satisfy 0 < cost_min < cost_max < R (got {} .. {})",
            cost_min, cost_max
        )));
    }
    let mut rng = seeded_stream(seed, streams::POPULATION);
    let raw: Vec<f64> = (0..params.n)
        .map(|_| sample_truncated_pareto(rng.random::<f64>(), tail))
        .collect();
    let stakes = cap_and_normalize(&raw, params.beta())?;
    let pairs: Vec<(f64, f64)> = stakes
        .into_iter()
        .map(|s| (s, rng.random_range(cost_min..=cost_max)))
        .collect();
    let mut pop = Population::from_pairs(&pairs);
    pop.normalized = true;
    pop.perturb_ties(params);
    Ok(pop)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Diagnostic {
    NotNormalized { sum_ppb: i64 },
    StakeOutOfRange { id: usize },
    CostOutOfRange { id: usize },
    StakeAboveCap { id: usize },
    TiedPotentialProfit { a: usize, b: usize },
    WrongSize { expected: usize, actual: usize },
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Diagnostic::NotNormalized { sum_ppb } => {
                write!(f, "not normalized: stake sum off by {} ppb", sum_ppb)
            }
            Diagnostic::StakeOutOfRange { id } => write!(f, "player {} stake outside (0,1)", id),
            Diagnostic::CostOutOfRange { id } => write!(f, "player {} cost outside (0,R)", id),
            Diagnostic::StakeAboveCap { id } => write!(f, "player {} stake above beta", id),
            Diagnostic::TiedPotentialProfit { a, b } => {
                write!(f, "tied potential profit between players {} and {}", a, b)
            }
            Diagnostic::WrongSize { expected, actual } => {
                write!(
                    f,
                    "population has {} players, params expect {}",
                    actual, expected
                )
            }
        }
    }
}

/// Every violated population invariant; the input is left untouched.
pub fn validate_population(pop: &Population, params: &GameParams) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if pop.len() != params.n {
        out.push(Diagnostic::WrongSize {
            expected: params.n,
            actual: pop.len(),
        });
    }
    let sum: f64 = pop.players.iter().map(|p| p.stake).sum();
    if (sum - 1.0).abs() > 1e-12 {
        out.push(Diagnostic::NotNormalized {
            sum_ppb: ((sum - 1.0) * 1e9).round() as i64,
        });
    }
    let beta = params.beta();
    for p in &pop.players {
        if !(p.stake > 0.0 && p.stake < 1.0) {
            out.push(Diagnostic::StakeOutOfRange { id: p.id });
        }
        if !(p.cost > 0.0 && p.cost < params.total_reward) {
            out.push(Diagnostic::CostOutOfRange { id: p.id });
        }
        if p.stake > beta * (1.0 + 1e-12) {
            out.push(Diagnostic::StakeAboveCap { id: p.id });
        }
    }
    let pp = pop.potential_profits(params);
    let order = pop.potential_order(params);
    for w in order.windows(2) {
        if pp[w[0]] == pp[w[1]] {
            out.push(Diagnostic::TiedPotentialProfit {
                a: w[0].min(w[1]),
                b: w[0].max(w[1]),
            });
        }
    }
    out
}

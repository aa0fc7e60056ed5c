//! Equilibria of the fair proportional scheme and the construction of
//! instances whose every equilibrium has one pool per player.

use serde::Serialize;

use crate::error::{Result, RssError};
use crate::game::Population;
use crate::rewards::{RewardScheme, SchemeKind};
use crate::strategy::JointStrategy;

/// Tolerance on pool stakes when checking that all stake sits in one pool.
const FULL_STAKE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FairVerdict {
    pub equilibrium: bool,
    /// The condition that fails, or the one that certifies equilibrium.
    pub clause: String,
}

fn verdict(equilibrium: bool, clause: &str) -> FairVerdict {
    FairVerdict {
        equilibrium,
        clause: clause.to_string(),
    }
}

/// Decides whether `joint` is an equilibrium of the fair scheme with
/// `R = 1` from the closed-form characterization. Populations where no
/// player has stake above cost but some player has cost at most one are
/// outside the characterization and are refused.
pub fn fair_equilibrium_check(
    joint: &JointStrategy,
    pop: &Population,
    scheme: &RewardScheme,
) -> Result<FairVerdict> {
    if scheme.kind != SchemeKind::Fair {
        return Err(RssError::Unsupported(
            "the fair equilibrium check applies to the fair scheme only".into(),
        ));
    }
    if (scheme.params.total_reward - 1.0).abs() > 1e-12 {
        return Err(RssError::Unsupported("the fair check assumes R = 1".into()));
    }
    let players = pop.players();
    let some_profitable = players.iter().any(|p| p.stake > p.cost);
    let all_expensive = players.iter().all(|p| p.cost > 1.0);
    if !some_profitable && !all_expensive {
        return Err(RssError::Unsupported(
            "population outside hypotheses: no player has s > c and not all costs exceed 1".into(),
        ));
    }
    let pools = joint.active_pools();
    if pools.len() >= 2 {
        return Ok(verdict(false, "more than one pool"));
    }
    if all_expensive {
        return Ok(if pools.is_empty() {
            verdict(true, "every cost exceeds the reward and no pool runs")
        } else {
            verdict(false, "every cost exceeds the reward yet a pool runs")
        });
    }
    let Some(&i) = pools.first() else {
        return Ok(verdict(
            false,
            "no pool although some stake exceeds its cost",
        ));
    };
    let ci = pop.cost(i);
    if ci > 1.0 {
        return Ok(verdict(false, "the leader cost exceeds the reward"));
    }
    for j in 0..pop.len() {
        if j != i && joint.allocation(j, i) > 0.0 && pop.stake(j) * ci > pop.cost(j) {
            return Ok(verdict(
                false,
                "a member profits from leaving for its own pool",
            ));
        }
    }
    if (joint.sigma(i) - 1.0).abs() > FULL_STAKE_TOL {
        return Ok(verdict(false, "the pool does not hold all stake"));
    }
    Ok(verdict(true, "one pool holding all stake"))
}

/// Equal-stake population parameters for which no equilibrium has fewer
/// pools than players.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoEquilibriumInstance {
    pub stakes: Vec<f64>,
    pub cost_min: f64,
    pub cost_max: f64,
    /// `(r(s_min/f) − c_max)·f/s_min`, the per-unit profit of a minimal pool.
    pub y: f64,
    /// Target per-unit profit strictly between the two bounds.
    pub r0: f64,
    /// Cost at which a `1/n` pool matches `y` per unit.
    pub c_lower: f64,
}

/// Number of grid points used to test the hypotheses on the reward profile.
const HYPOTHESIS_GRID: usize = 2000;

/// First grid point in `[lo, 1]` where `(r(σ) − c)/σ` fails to decrease.
fn ratio_violation(r: &dyn Fn(f64) -> f64, c: f64, lo: f64) -> Option<f64> {
    let g = |s: f64| (r(s) - c) / s;
    let mut prev = g(lo);
    for t in 1..=HYPOTHESIS_GRID {
        let s = lo + (1.0 - lo) * t as f64 / HYPOTHESIS_GRID as f64;
        let v = g(s);
        if !(v < prev) {
            return Some(s);
        }
        prev = v;
    }
    None
}

/// Builds stakes `1/n` with costs `c_min < c_max` such that a member can
/// always gain by splitting off a pool of stake `s_min/f`, so every
/// configuration with fewer than `n` pools has an improving move.
///
/// `c_max` is taken midway in the admissible interval: above
/// `r(s_min/f) − r(s_min)/f`, below `r(s_min/f)`, and small enough that
/// `(r(σ) − c_max)/σ` decreases on `[s_min/f, 1]`.
pub fn construct_no_equilibrium_instance(
    n: usize,
    f: f64,
    r: &dyn Fn(f64) -> f64,
) -> Result<NoEquilibriumInstance> {
    if n < 2 {
        return Err(RssError::InvalidParam("need at least two players".into()));
    }
    if !(f > 1.0) || !f.is_finite() {
        return Err(RssError::InvalidParam(format!(
            "f must exceed 1 (got {})",
            f
        )));
    }
    let nf = n as f64;
    let s_min = 1.0 / nf;
    let q = s_min / f;
    let mut prev = r(0.0);
    for t in 1..=HYPOTHESIS_GRID {
        let s = t as f64 / HYPOTHESIS_GRID as f64;
        let v = r(s);
        if !v.is_finite() || !(v > prev) {
            return Err(RssError::Construction(format!(
                "reward profile is not strictly increasing at sigma = {}",
                s
            )));
        }
        prev = v;
    }
    let lower = (r(q) - r(s_min) / f).max(0.0);
    let upper = r(q);
    // Largest admissible cost for the monotone-ratio hypothesis.
    let mut hi = upper;
    if ratio_violation(r, hi, q).is_some() {
        let mut lo = lower;
        if let Some(s) = ratio_violation(r, lo, q) {
            return Err(RssError::Construction(format!(
                "(r(sigma) - c)/sigma is not strictly decreasing at sigma = {}",
                s
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ratio_violation(r, mid, q).is_some() {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi = lo;
    }
    if !(hi > lower) {
        return Err(RssError::Construction("no admissible maximum cost".into()));
    }
    let cost_max = 0.5 * (lower + hi);
    let y = (r(q) - cost_max) / q;
    let z = (r(s_min) - cost_max) / s_min;
    let r0 = 0.5 * (y + z);
    let c_lower = r(s_min) - y * s_min;
    let cost_min = r(s_min) - r0 * s_min;
    let g = |x: f64| (r(s_min) - x) / s_min;

    let checks = [
        (lower < cost_max, "max{r(s_min/f) - r(s_min)/f, 0} < c_max"),
        (cost_max < upper, "c_max < r(s_min/f)"),
        (y > z, "y > g(c_max)"),
        (g(cost_max) < y && y < g(0.0), "g(c_max) < y < g(0)"),
        (0.0 < c_lower && c_lower < cost_max, "0 < c < c_max"),
        (
            c_lower < cost_min && cost_min < cost_max,
            "c < c_min < c_max",
        ),
        (g(c_lower) > r0 && r0 > g(cost_max), "g(c) > r0 > g(c_max)"),
        (y > g(cost_min), "g(c) > g(c_min)"),
        (
            ratio_violation(r, cost_min, q).is_none(),
            "ratio decreasing at c_min",
        ),
        (
            ratio_violation(r, cost_max, q).is_none(),
            "ratio decreasing at c_max",
        ),
    ];
    for (ok, what) in checks {
        if !ok {
            return Err(RssError::Construction(format!(
                "constructed costs violate {}",
                what
            )));
        }
    }
    Ok(NoEquilibriumInstance {
        stakes: vec![s_min; n],
        cost_min,
        cost_max,
        y,
        r0,
        c_lower,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::GameParams;
    use crate::strategy::Strategy;

    fn fair(n: usize) -> RewardScheme {
        RewardScheme::fair(GameParams::new(n, 1, 1.0, 0.0).unwrap())
    }

    fn one_pool(pop: &Population, leader: usize) -> JointStrategy {
        let mut j = JointStrategy::inactive(pop);
        for p in pop.players() {
            let s = if p.id == leader {
                Strategy::leader(0.0, p.stake)
            } else {
                let mut s = Strategy::passive(p.stake);
                s.delegations.insert(leader, p.stake);
                s
            };
            j.set_strategy(p.id, s, pop).unwrap();
        }
        j
    }

    #[test]
    fn single_pool_examples() {
        let pop = Population::from_pairs(&[(0.5, 0.5), (0.3, 0.2), (0.2, 0.15)]);
        let v = fair_equilibrium_check(&one_pool(&pop, 0), &pop, &fair(3)).unwrap();
        assert!(v.equilibrium, "{:?}", v);
        // member 1 would rather run its own pool: 0.3·0.5 > 0.1
        let pop2 = Population::from_pairs(&[(0.5, 0.5), (0.3, 0.1), (0.2, 0.15)]);
        let v = fair_equilibrium_check(&one_pool(&pop2, 0), &pop2, &fair(3)).unwrap();
        assert_eq!(
            v,
            verdict(false, "a member profits from leaving for its own pool")
        );
    }

    #[test]
    fn two_pools_and_no_pools() {
        let pop = Population::from_pairs(&[(0.5, 0.1), (0.3, 0.2), (0.2, 0.15)]);
        let mut j = JointStrategy::inactive(&pop);
        j.set_strategy(0, Strategy::leader(0.0, 0.5), &pop).unwrap();
        j.set_strategy(1, Strategy::leader(0.0, 0.3), &pop).unwrap();
        assert_eq!(
            fair_equilibrium_check(&j, &pop, &fair(3)).unwrap(),
            verdict(false, "more than one pool")
        );
        let none = JointStrategy::inactive(&pop);
        assert!(
            !fair_equilibrium_check(&none, &pop, &fair(3))
                .unwrap()
                .equilibrium
        );
        let costly = Population::from_pairs(&[(0.5, 1.1), (0.5, 1.2)]);
        let none = JointStrategy::inactive(&costly);
        assert_eq!(
            fair_equilibrium_check(&none, &costly, &fair(2)).unwrap(),
            verdict(true, "every cost exceeds the reward and no pool runs")
        );
    }

    #[test]
    fn refuses_other_schemes_and_out_of_hypothesis_populations() {
        let pop = Population::from_pairs(&[(0.5, 0.1), (0.5, 0.2)]);
        let j = JointStrategy::inactive(&pop);
        let cm = RewardScheme::cap_margin(GameParams::new(2, 1, 1.0, 0.0).unwrap());
        assert!(matches!(
            fair_equilibrium_check(&j, &pop, &cm),
            Err(RssError::Unsupported(_))
        ));
        let mid = Population::from_pairs(&[(0.5, 0.6), (0.5, 0.9)]);
        let j = JointStrategy::inactive(&mid);
        assert!(matches!(
            fair_equilibrium_check(&j, &mid, &fair(2)),
            Err(RssError::Unsupported(_))
        ));
    }

    #[test]
    fn partial_pool_fails_clause_iii() {
        let pop = Population::from_pairs(&[(0.5, 0.1), (0.3, 0.2), (0.2, 0.15)]);
        let mut j = one_pool(&pop, 0);
        j.set_strategy(2, Strategy::passive(0.2), &pop).unwrap();
        assert_eq!(
            fair_equilibrium_check(&j, &pop, &fair(3)).unwrap(),
            verdict(false, "the pool does not hold all stake")
        );
    }

    #[test]
    fn sqrt_profile_instance() {
        let r = |s: f64| s.sqrt() / 4.0;
        let inst = construct_no_equilibrium_instance(4, 2.0, &r).unwrap();
        let q = 0.125;
        assert!((r(q) - r(0.25) / 2.0).max(0.0) < inst.cost_max && inst.cost_max < r(q));
        let g = |x: f64| (r(0.25) - x) * 4.0;
        assert!(g(inst.c_lower) > inst.r0 && inst.r0 > g(inst.cost_max));
        assert!(inst.cost_min < inst.cost_max);
        assert_eq!(inst.stakes, vec![0.25; 4]);
    }

    #[test]
    fn non_increasing_profile_is_refused() {
        let r = |s: f64| if s < 0.5 { s } else { 0.5 };
        let e = construct_no_equilibrium_instance(4, 2.0, &r).unwrap_err();
        assert!(e.to_string().contains("sigma"));
    }
}

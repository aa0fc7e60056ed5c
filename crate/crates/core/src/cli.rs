//! Command-line front end. Exit status 0 means success, 1 a verification
//! counterexample (or a run that did not settle), 2 a usage or input error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::deviation::UtilityKind;
use crate::dynamics::run;
use crate::equilibrium::{
    build_perfect, fair_equilibrium_check, two_stage_audit, verify_nash, AuditConfig,
    DeviationGrid, TwoStageParams,
};
use crate::error::{Result, RssError};
use crate::io::{
    dynamics_csv, emit_equilibrium_table, load_config, pools_csv, write_atomic, RunConfig,
};
use crate::rewards::RewardScheme;
use crate::sybil::{mc_domination_probability, whale_tail_bound, WhaleQuery};

pub const EXIT_OK: i32 = 0;
pub const EXIT_COUNTEREXAMPLE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable that overrides `--seed`.
pub const SEED_ENV: &str = "RSS_LAB_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "rss-lab",
    version,
    about = "Reward sharing schemes for stake pools"
)]
pub struct Cli {
    /// Seed for population sampling and the dynamics.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for written files.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the best-response dynamics and write dynamics.csv, pools.csv
    /// and equilibrium.csv.
    Simulate,
    /// Check that the perfect strategy admits no improving grid deviation.
    VerifyPerfect,
    /// Run the fair-scheme dynamics and check the final state against the
    /// closed-form equilibrium characterization.
    VerifyFair,
    /// Audit the two-stage game at the constructed margins and pledges.
    TwoStage,
    /// Whale bounds for Pareto-distributed stake.
    Sybil {
        #[command(subcommand)]
        query: SybilCommand,
    },
    /// Sample the configured population and write population.csv.
    Sample,
}

#[derive(Debug, Subcommand)]
pub enum SybilCommand {
    /// Chernoff bound on the largest agent dominating the top `k/2`.
    Bound,
    /// Monte-Carlo estimate of the same event next to the bound.
    Prob,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            EXIT_USAGE
        }
    }
}

/// The configuration after `--config`, `--seed` and the seed environment
/// variable are applied.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| RssError::Config(format!("{} must be an unsigned integer", SEED_ENV)))?;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("report serializes")
    );
}

fn grid(cfg: &RunConfig) -> Result<DeviationGrid> {
    DeviationGrid::new(cfg.margin_step, cfg.stake_step)
}

fn verdict_code(ok: bool) -> i32 {
    if ok {
        EXIT_OK
    } else {
        EXIT_COUNTEREXAMPLE
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Simulate => simulate(&cfg, &out_dir(cli, &cfg)?),
        Command::VerifyPerfect => verify_perfect(&cfg),
        Command::VerifyFair => verify_fair(&cfg),
        Command::TwoStage => two_stage(&cfg),
        Command::Sybil { query } => sybil(&cfg, query),
        Command::Sample => {
            let dir = out_dir(cli, &cfg)?;
            let pop = cfg.population()?;
            let path = dir.join("population.csv");
            write_atomic(&path, &pop.to_csv())?;
            print_json(&json!({ "players": pop.len(), "file": path.display().to_string() }));
            Ok(EXIT_OK)
        }
    }
}

fn simulate(cfg: &RunConfig, dir: &Path) -> Result<i32> {
    let pop = cfg.population()?;
    let scheme = cfg.scheme()?;
    let trace = run(&pop, &scheme, &cfg.sim_config())?;
    write_atomic(&dir.join("dynamics.csv"), &dynamics_csv(&trace, &pop))?;
    write_atomic(&dir.join("pools.csv"), &pools_csv(&trace))?;
    let summary = json!({
        "converged": trace.converged,
        "equilibrium_step": trace.equilibrium_step,
        "moves_applied": trace.moves_applied,
        "pools": trace.final_state.active_pools().len(),
    });
    print_json(&summary);
    if !trace.converged {
        eprintln!(
            "no equilibrium within {} steps; equilibrium.csv not written",
            cfg.max_steps
        );
        return Ok(EXIT_COUNTEREXAMPLE);
    }
    let table = emit_equilibrium_table(&trace, &pop, &scheme)?;
    write_atomic(&dir.join("equilibrium.csv"), &table)?;
    Ok(EXIT_OK)
}

fn verify_perfect(cfg: &RunConfig) -> Result<i32> {
    let pop = cfg.population()?;
    let params = cfg.game_params()?;
    let perfect = build_perfect(&pop, &params)?;
    let verdict = verify_nash(
        &perfect.joint,
        &pop,
        &params,
        &grid(cfg)?,
        UtilityKind::NonMyopic(cfg.verify_ranking.rank_mode()),
    );
    print_json(&verdict.to_json());
    Ok(verdict_code(verdict.equilibrium))
}

fn verify_fair(cfg: &RunConfig) -> Result<i32> {
    let pop = cfg.population()?;
    let scheme = RewardScheme::fair(cfg.game_params()?);
    let trace = run(&pop, &scheme, &cfg.sim_config())?;
    let verdict = fair_equilibrium_check(&trace.final_state, &pop, &scheme)?;
    print_json(&json!({
        "converged": trace.converged,
        "moves_applied": trace.moves_applied,
        "pools": trace.final_state.active_pools().len(),
        "equilibrium": verdict.equilibrium,
        "clause": verdict.clause,
    }));
    Ok(verdict_code(trace.converged && verdict.equilibrium))
}

fn two_stage(cfg: &RunConfig) -> Result<i32> {
    let pop = cfg.population()?;
    let params = cfg.game_params()?;
    let ts = TwoStageParams::with_fraction(&pop, &params, cfg.epsilon_fraction)?;
    let audit = AuditConfig {
        seed: cfg.seed,
        conforming_samples: cfg.audit_conforming,
        random_nonconforming: cfg.audit_random,
        outer_samples: cfg.audit_outer,
        ..AuditConfig::default()
    };
    let report = two_stage_audit(&pop, &params, &ts, &grid(cfg)?, &audit)?;
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["passed"] = json!(report.passed());
    print_json(&value);
    Ok(verdict_code(report.passed()))
}

fn sybil(cfg: &RunConfig, query: &SybilCommand) -> Result<i32> {
    let q = WhaleQuery {
        tail: cfg.whale_tail()?,
        k: cfg.k,
    };
    let bound = whale_tail_bound(&q)?;
    match query {
        SybilCommand::Bound => {
            print_json(&json!({
                "k": q.k,
                "agents": q.tail.n_agents,
                "shape": q.tail.shape,
                "theta": q.tail.theta,
                "upper": q.tail.upper,
                "delta": bound.delta,
                "mu": bound.mu,
                "bound": bound.bound,
                "vacuous": bound.vacuous,
            }));
            Ok(EXIT_OK)
        }
        SybilCommand::Prob => {
            let est = mc_domination_probability(&q.tail, q.k, cfg.trials, cfg.seed)?;
            let within = est.probability <= bound.bound + 3.0 * est.stderr;
            print_json(&json!({
                "k": q.k,
                "agents": q.tail.n_agents,
                "probability": est.probability,
                "stderr": est.stderr,
                "trials": est.trials,
                "bound": bound.bound,
                "within_bound": within,
            }));
            Ok(verdict_code(within))
        }
    }
}

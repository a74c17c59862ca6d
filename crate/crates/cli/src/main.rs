use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use staleracer::accept::{self, AcceptOptions, Mutation, DEFAULT_SEED};
use staleracer::config::{Built, ConfigErrors, ExperimentConfig, Need, SpeedupSection};
use staleracer::output::{csv_writer, g9, opt, trace_row, write_trace, TRACE_HEADER};
use staleracer::sweep::{speedup_curve, sweep_tradeoff, FRONTIER_HEADER, SPEEDUP_HEADER};
use staleracer::verify::{run_verify, VERIFY_HEADER};
use staleracer_core::adasync::{run_adasync, AdaSyncConfig};
use staleracer_core::runtime::expected_runtime;
use staleracer_core::sim::{self, RunSetup};
use staleracer_core::{DelayDistribution, Variant, VariantConfig};

#[derive(Parser)]
#[command(name = "staleracer", version, about = "Runtime analysis and simulation of K-sync / K-async SGD")]
struct Cli {
    /// Experiment configuration (JSON, or TOML by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; CSV subcommands write to stdout without it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed for subcommands whose config has no seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel replications (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expected per-iteration runtime of one protocol.
    Analyze {
        /// Delay distribution file (JSON or TOML), e.g. {"kind": "exponential", "rate": 1.0}.
        #[arg(long)]
        dist: PathBuf,
        #[arg(long)]
        variant: Variant,
        #[arg(short = 'K')]
        k: usize,
        #[arg(short = 'P')]
        p: usize,
    },
    /// Monte-Carlo runtimes against the analytic results.
    Verify,
    /// One simulation run; writes the per-update trace.
    Simulate,
    /// One AdaSync run; writes the trace with slot and K columns.
    Adasync,
    /// Error-runtime frontier over protocols and K.
    Sweep,
    /// Log-speedup of asynchronous over synchronous SGD versus P.
    Speedup,
    /// The acceptance criteria.
    Accept {
        /// Run only these criteria.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u8>,
        /// Swap one formula for a wrong one (sensitivity check).
        #[arg(long)]
        mutation: Option<MutationArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MutationArg {
    OrderStatistic,
    Speedup,
    Renewal,
    FreshProbability,
    AdasyncRule,
}

impl From<MutationArg> for Mutation {
    fn from(m: MutationArg) -> Self {
        match m {
            MutationArg::OrderStatistic => Mutation::OrderStatistic,
            MutationArg::Speedup => Mutation::Speedup,
            MutationArg::Renewal => Mutation::Renewal,
            MutationArg::FreshProbability => Mutation::FreshProbability,
            MutationArg::AdasyncRule => Mutation::AdaSyncRule,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(errors) = e.downcast_ref::<ConfigErrors>() {
                eprintln!("configuration errors:");
                for line in &errors.0 {
                    eprintln!("  - {line}");
                }
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(2)
        }
    }
}

/// Output piped into `head` and closed early.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
            || c.downcast_ref::<csv::Error>().is_some_and(|ce| matches!(ce.kind(), csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::BrokenPipe))
    })
}

fn load_config(cli: &Cli, needs: &[Need]) -> anyhow::Result<Option<ExperimentConfig>> {
    let Some(path) = &cli.config else {
        if needs.is_empty() {
            return Ok(None);
        }
        bail!("this subcommand needs --config");
    };
    let cfg = ExperimentConfig::load(path)?;
    cfg.require(needs)?;
    Ok(Some(cfg))
}

fn load_dist(path: &Path) -> anyhow::Result<DelayDistribution> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let d = if is_toml { toml::from_str(&text)? } else { serde_json::from_str(&text)? };
    Ok(d)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Analyze { dist, variant, k, p } => {
            let d = load_dist(dist)?;
            let cfg = VariantConfig::timing(*variant, *k, *p)?;
            let r = expected_runtime(&cfg, &d)?;
            let mut w = csv_writer(out)?;
            w.write_record(["variant", "K", "P", "dist", "value", "kind", "assumptions"])?;
            w.write_record([variant.to_string(), k.to_string(), p.to_string(), d.label(), g9(r.value), r.kind.to_string(), r.assumptions])?;
            w.flush()?;
        }
        Command::Verify => {
            let section = load_config(&cli, &[])?.and_then(|c| c.verify).unwrap_or_default();
            let (rows, skipped) = run_verify(&section, seed)?;
            let mut w = csv_writer(out)?;
            w.write_record(VERIFY_HEADER)?;
            for r in &rows {
                w.write_record([
                    r.variant.to_string(),
                    r.k.to_string(),
                    r.p.to_string(),
                    r.dist.clone(),
                    g9(r.analytic),
                    r.kind.to_string(),
                    g9(r.mc_mean),
                    g9(r.mc_ci95),
                    r.pass.to_string(),
                ])?;
            }
            w.flush()?;
            for s in &skipped {
                eprintln!("skipped (no bound for this delay class): {s}");
            }
            return Ok(rows.iter().all(|r| r.pass));
        }
        Command::Simulate => {
            let cfg = load_config(&cli, &[Need::Simulation])?.expect("required");
            let built = Built::from_config(&cfg)?;
            let trace = match sim::run(&setup(&built, &cfg, seed)) {
                Ok(t) => t,
                Err(sim::SimError::NonFiniteLoss { trace }) => {
                    eprintln!("run diverged after {} updates", trace.records.len());
                    *trace
                }
                Err(e) => return Err(e.into()),
            };
            write_trace(&mut csv_writer(out)?, &trace)?;
            return Ok(!trace.diverged);
        }
        Command::Adasync => {
            let cfg = load_config(&cli, &[Need::AdaSync])?.expect("required");
            let built = Built::from_config(&cfg)?;
            let a = cfg.adasync.as_ref().expect("required");
            let ada = AdaSyncConfig {
                variant: built.variant.variant,
                k0: a.k0,
                p: built.variant.p,
                slot_length: a.slot_length,
                rounding: a.rounding,
                monotone: a.monotone,
            };
            let run = run_adasync(&ada, &setup(&built, &cfg, seed))?;
            if run.rule.extrapolated {
                eprintln!("note: the {:?} rule is applied outside the delay model it was derived for", run.rule.rule);
            }
            let mut w = csv_writer(out)?;
            let mut header: Vec<&str> = TRACE_HEADER.to_vec();
            header.extend(["slot", "K"]);
            w.write_record(&header)?;
            for (r, slot) in run.trace.records.iter().zip(&run.slots) {
                let mut row = trace_row(r);
                row.extend([slot.to_string(), r.k.to_string()]);
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        Command::Sweep => {
            let cfg = load_config(&cli, &[Need::Sweep])?.expect("required");
            let built = Built::from_config(&cfg)?;
            let base = cfg.seeds.map_or(seed, |s| s.delay);
            let (points, _) = sweep_tradeoff(&built, cfg.sweep.as_ref().expect("required"), base)?;
            let mut w = csv_writer(out)?;
            w.write_record(FRONTIER_HEADER)?;
            for pt in &points {
                w.write_record([
                    pt.variant.to_string(),
                    pt.k.to_string(),
                    pt.p.to_string(),
                    g9(pt.floor_median),
                    g9(pt.floor_iqr),
                    g9(pt.target),
                    g9(pt.time_to_target_median),
                    g9(pt.mean_iteration_time),
                    pt.diverged.to_string(),
                ])?;
            }
            w.flush()?;
        }
        Command::Speedup => {
            let s: SpeedupSection = load_config(&cli, &[])?.and_then(|c| c.speedup).unwrap_or_default();
            let points = speedup_curve(&s.distributions, &s.p_values, s.simulate_iterations, seed)?;
            let mut w = csv_writer(out)?;
            w.write_record(SPEEDUP_HEADER)?;
            for pt in &points {
                w.write_record([
                    pt.dist.clone(),
                    pt.p.to_string(),
                    g9(pt.speedup),
                    g9(pt.log_speedup),
                    opt(pt.harmonic_form),
                    opt(pt.simulated),
                    opt(pt.simulated_ci95),
                ])?;
            }
            w.flush()?;
        }
        Command::Accept { criteria, mutation } => {
            let ids: Vec<u8> = if criteria.is_empty() { accept::CRITERIA.iter().map(|c| c.0).collect() } else { criteria.clone() };
            if let Some(bad) = ids.iter().find(|&&id| !(1..=13).contains(&id)) {
                bail!("unknown criterion {bad} (expected 1..13)");
            }
            let opts = AcceptOptions { seed, mutation: mutation.map(Into::into) };
            let mut results = Vec::new();
            for id in ids {
                let r = accept::run_criterion(id, &opts);
                println!("{}", r.line());
                for n in &r.notes {
                    println!("    {n}");
                }
                results.push(r);
            }
            let passed = results.iter().filter(|r| r.passed).count();
            println!("{passed}/{} criteria passed", results.len());
            if let Some(path) = out {
                std::fs::write(path, serde_json::to_string_pretty(&results)?)?;
            }
            return Ok(passed == results.len());
        }
    }
    Ok(true)
}

fn setup<'a>(built: &'a Built, cfg: &ExperimentConfig, seed: u64) -> RunSetup<'a> {
    RunSetup {
        config: built.variant,
        delays: &built.delays,
        oracle: Some(&built.oracle),
        w0: &built.w0,
        horizon: built.horizon,
        seeds: cfg.seeds_or(seed),
        options: cfg.options,
    }
}

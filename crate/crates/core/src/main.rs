use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use viability::harness::{evaluate, Experiment};
use viability::io::{load_qset, load_run, load_sset, save_qset, save_run, save_sset, write_atomic, Config, ConfigError, PersistError, RunDocument};
use viability::lattice::{qset_csv, Membership, SetMeta};
use viability::oracle::{compute_viability, StoredOracle, ViabilityResult};
use viability::policy::{critical_set, opt_graph, optimal_policy};

/// Viability kernels, critical sets and greedy constraint learning.
#[derive(Parser)]
#[command(name = "viability", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the viability kernel and viable set on the grid.
    Viability(Common),
    /// Compute the critical set and the optimal constrained policy.
    Critical(Common),
    /// Run greedy constraint learning and write a run directory.
    Learn(Common),
    /// Recompute metrics and the admissibility verdict of a stored run.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the configured output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Require every enclosing grid point to be a member.
    #[arg(long)]
    conservative_membership: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory written by `learn`.
    run_dir: PathBuf,
    /// Configuration; defaults to the one stored in run.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding q_viable.json and s_kernel.json from `viability`;
    /// computed afresh when absent.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Where to write evaluation.json (defaults to the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(common: &Common) -> Result<(Config, PathBuf)> {
    let mut config = Config::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.override_seed(seed);
    }
    if common.conservative_membership {
        config.experiment.membership = Membership::Conservative;
    }
    let out = common.out.clone().unwrap_or_else(|| config.output_dir.clone());
    Ok((config, out))
}

fn oracle_for(config: &Config) -> Result<ViabilityResult> {
    let system = config.system()?;
    let grid = config.grid_spec(&system)?;
    Ok(compute_viability(&system, grid)?)
}

fn meta(config: &Config, iterations: Option<usize>, description: &str) -> Result<SetMeta> {
    Ok(SetMeta { model: Some(config.system()?.name().to_string()), iterations, description: Some(description.into()) })
}

fn cmd_viability(common: &Common) -> Result<()> {
    let (config, out) = load(common)?;
    let result = oracle_for(&config)?;
    let m = meta(&config, Some(result.iterations), "viable set")?;
    save_qset(&out.join("q_viable.json"), &result.viable, Some(m))?;
    let m = meta(&config, Some(result.iterations), "viability kernel")?;
    save_sset(&out.join("s_kernel.json"), &result.kernel, Some(m))?;
    write_atomic(&out.join("viability.csv"), qset_csv(&result.viable).as_bytes())?;
    println!(
        "viable={} kernel={} iterations={} out={}",
        result.viable.count(),
        result.kernel.count(),
        result.iterations,
        out.display()
    );
    Ok(())
}

fn cmd_critical(common: &Common) -> Result<()> {
    let (config, out) = load(common)?;
    let result = oracle_for(&config)?;
    let crit = critical_set(&result, &config.policy)?;
    let graph = opt_graph(&result, &config.policy)?;
    save_qset(&out.join("q_critical.json"), &crit, Some(meta(&config, None, "critical set")?))?;
    write_atomic(&out.join("critical.csv"), qset_csv(&crit).as_bytes())?;
    save_qset(&out.join("q_opt.json"), &graph, Some(meta(&config, None, "graph of the optimal viable policy")?))?;
    if config.policy.is_deterministic() {
        let grid = result.viable.grid();
        let table = optimal_policy(&result, &config.policy)?;
        let mut rows = String::new();
        let header: Vec<String> = (0..grid.state_dim())
            .map(|d| format!("state_{d}"))
            .chain((0..grid.action_dim()).map(|d| format!("nominal_{d}")))
            .chain((0..grid.action_dim()).map(|d| format!("action_{d}")))
            .collect();
        rows.push_str(&header.join(","));
        rows.push('\n');
        for (i, j) in table.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))) {
            let s = grid.state_point(i);
            let nominal = config.policy.action(grid, &s).expect("deterministic");
            let cells: Vec<String> = s.iter().chain(&nominal).chain(&grid.action_point(j)).map(f64::to_string).collect();
            rows.push_str(&cells.join(","));
            rows.push('\n');
        }
        write_atomic(&out.join("opt_policy.csv"), rows.as_bytes())?;
    }
    println!("critical={} opt_pairs={} out={}", crit.count(), graph.count(), out.display());
    Ok(())
}

fn cmd_learn(common: &Common) -> Result<()> {
    let (config, out) = load(common)?;
    let system = config.system()?;
    let grid = config.grid_spec(&system)?;
    let experiment = Experiment {
        model: &system,
        grid: grid.clone(),
        policy: &config.policy,
        learner: &config.learner,
        config: &config.experiment,
    };
    let record = experiment.run()?;
    let oracle = compute_viability(&system, grid)?;
    let evaluation = evaluate(&record.khat_final, &oracle, &config.policy, record.sample_count(), record.failure_count())?;
    let config_json = serde_json::to_value(&config).context("serializing the configuration")?;
    let document = RunDocument::new(&record, system.name(), config.experiment.seed, config_json, Some(evaluation.metrics.clone()));
    save_run(&out, &record, &document)?;
    println!("{}", serde_json::to_string(&evaluation.metrics)?);
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let run = load_run(&args.run_dir)?;
    let config = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::from_json(&run.document.config.to_string())?,
    };
    let grid = run.khat_final.grid();
    let evaluation = match &args.oracle {
        Some(dir) => {
            let oracle = stored_oracle(dir)?;
            if oracle.viable.grid() != grid {
                bail!(viability::Error::GridMismatch);
            }
            evaluate(&run.khat_final, &oracle, &config.policy, run.samples.len(), failures(&run.samples))?
        }
        None => {
            let oracle = oracle_for(&config)?;
            if oracle.viable.grid() != grid {
                bail!(viability::Error::GridMismatch);
            }
            evaluate(&run.khat_final, &oracle, &config.policy, run.samples.len(), failures(&run.samples))?
        }
    };
    let mut report = serde_json::to_string_pretty(&evaluation)?;
    report.push('\n');
    let out = args.out.clone().unwrap_or_else(|| args.run_dir.clone());
    write_atomic(&out.join("evaluation.json"), report.as_bytes())?;
    print!("{report}");
    evaluation.check_greedy_sufficiency().map_err(|e| anyhow::Error::new(e).context(SufficiencyViolation))?;
    Ok(())
}

fn failures(samples: &[viability::io::SampleRow]) -> usize {
    samples.iter().filter(|s| s.label == 0.0).count()
}

fn stored_oracle(dir: &Path) -> Result<StoredOracle> {
    let (viable, _) = load_qset(&dir.join("q_viable.json"))?;
    let (kernel, _) = load_sset(&dir.join("s_kernel.json"))?;
    if viable.project() != kernel {
        bail!("stored kernel is not the projection of the stored viable set");
    }
    Ok(StoredOracle { kernel, viable })
}

#[derive(Debug)]
struct SufficiencyViolation;

impl std::fmt::Display for SufficiencyViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("greedy sufficiency violated")
    }
}

/// Error class and exit code for a failed command.
fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    if let Some(c) = e.downcast_ref::<ConfigError>() {
        return (c.kind(), c.exit_code() as u8);
    }
    if e.downcast_ref::<PersistError>().is_some() {
        return ("artifact", 7);
    }
    if e.downcast_ref::<SufficiencyViolation>().is_some() {
        return ("sufficiency", 8);
    }
    if let Some(viability::Error::GridMismatch) = e.downcast_ref::<viability::Error>() {
        return ("grid-mismatch", 9);
    }
    ("runtime", 1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VIABILITY_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Viability(c) => cmd_viability(c),
        Command::Critical(c) => cmd_critical(c),
        Command::Learn(c) => cmd_learn(c),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            let message = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error[{kind}]: {message}");
            ExitCode::from(code)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use cfl_core::baselines::Algorithm;
use cfl_core::cfl_admm::EpsilonSchedule;
use cfl_core::harness::{check_invariants, reference_cache_path, run_experiment, write_trace, ExperimentConfig, Instance};

#[derive(Parser)]
#[command(name = "cfl", version, about = "Confederated learning experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (first α and ε of the config unless overridden).
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        alpha: Option<f64>,
        /// A number or `decreasing`.
        #[arg(long)]
        epsilon: Option<String>,
        #[arg(long)]
        algorithm: Option<Algorithm>,
    },
    /// Run the full α × ε × algorithm grid of the config.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute and cache the reference solution x*.
    Reference {
        #[command(flatten)]
        common: Common,
    },
    /// Run the invariant suite on a built-in tiny instance.
    Check,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; the built-in desk instance when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    sigma1: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    reference_tol: Option<f64>,
    #[arg(long)]
    timing: bool,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::desk(),
        };
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.repeats {
            cfg.repeats = v;
        }
        if let Some(v) = self.sigma1 {
            cfg.sigma1 = v;
        }
        if let Some(v) = self.sigma2 {
            cfg.sigma2 = v;
        }
        if let Some(v) = self.reference_tol {
            cfg.reference_tol = v;
        }
        cfg.timing |= self.timing;
        Ok(cfg)
    }
}

fn parse_epsilon(text: &str) -> anyhow::Result<EpsilonSchedule> {
    if text.eq_ignore_ascii_case("decreasing") {
        return Ok(EpsilonSchedule::Decreasing);
    }
    let v: f64 = text.parse().with_context(|| format!("invalid epsilon {text:?}"))?;
    Ok(EpsilonSchedule::Constant(v))
}

fn execute(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    cfg.validate()?;
    let result = run_experiment(cfg)?;
    let failed: usize = result
        .cells
        .iter()
        .map(|c| c.repeats.iter().filter(|r| r.is_err()).count())
        .sum();
    let path = write_trace(&result, &cfg.resolved_output_dir(), &cfg.name)?;
    println!("wrote {}", path.display());
    for cell in &result.cells {
        if let Some(last) = cell.mean.last() {
            println!(
                "{} alpha={} epsilon={} final gap {:.3e}",
                cell.key.algorithm.name(),
                cell.key.alpha,
                cell.key.epsilon.map_or("-".into(), |e| e.describe()),
                last.optimality_gap
            );
        }
    }
    if failed > 0 {
        bail!("{failed} repeat(s) failed; see status column");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            common,
            seed,
            alpha,
            epsilon,
            algorithm,
        } => {
            let mut cfg = common.load()?;
            cfg.seed = Some(seed);
            cfg.alphas = vec![alpha.or(cfg.alphas.first().copied()).context("no alpha given")?];
            let eps = match epsilon {
                Some(text) => parse_epsilon(&text)?,
                None => *cfg.epsilons.first().context("no epsilon given")?,
            };
            cfg.epsilons = vec![eps];
            if let Some(a) = algorithm {
                cfg.algorithms = vec![a];
            }
            execute(&cfg)
        }
        Command::Sweep { common, seed } => {
            let mut cfg = common.load()?;
            if seed.is_some() {
                cfg.seed = seed;
            }
            if cfg.seed.is_none() {
                bail!("sweep needs a seed in the config or via --seed");
            }
            execute(&cfg)
        }
        Command::Reference { common } => {
            let cfg = common.load()?;
            let dir = cfg
                .cache_dir
                .clone()
                .unwrap_or_else(|| cfg.resolved_output_dir());
            let instance = Instance::build_with_cache(&cfg, Some(&dir))?;
            println!("{}", reference_cache_path(&dir, &instance.content_hash).display());
            println!(
                "gradient norm {:.3e} after {} iterations",
                instance.reference.gradient_norm, instance.reference.iterations
            );
            Ok(())
        }
        Command::Check => {
            let outcomes = check_invariants()?;
            let mut ok = true;
            for c in &outcomes {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            if !ok {
                bail!("invariant check failed");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

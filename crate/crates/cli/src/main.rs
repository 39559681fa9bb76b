//! `ltcl`: run, score and sweep long-tailed continual learning experiments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ltcl_core::gradcheck::{self, REL_TOLERANCE};
use ltcl_core::harness::{
    expand_grid, parse_grid, run_experiment, write_artifacts, EvalMode, ExperimentConfig,
    RunArtifacts, RunOptions,
};

#[derive(Parser)]
#[command(name = "ltcl", version, about = "Long-tailed continual learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a long-tailed stream and write the run artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the `seed` key.
        #[arg(long)]
        seed: Option<u64>,
        /// Artifacts go to `<out>/<name>/`.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write `scores.csv` with every task's uncertainty scores.
        #[arg(long)]
        dump_scores: bool,
    },
    /// Compare analytic loss gradients with central finite differences.
    Gradcheck {
        /// Random configurations per loss term.
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
        eps: f64,
    },
    /// Run a configuration and print the per-task uncertainty scores as CSV.
    Score {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every combination of a `key = v1 | v2` grid over a base config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg =
        ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(seed) = seed {
        let mut over = BTreeMap::new();
        over.insert("seed".to_string(), seed.to_string());
        cfg.apply(&over)?;
    }
    Ok(cfg)
}

fn summary_line(a: &RunArtifacts) -> String {
    let mut parts = vec![a.record.config.name.clone()];
    for mode in [EvalMode::ClassIl, EvalMode::TaskIl] {
        if let Some(r) = a.record.mode(mode) {
            parts.push(format!(
                "{} ACC {:.2} BWT {:.2}",
                mode.as_str(),
                r.acc,
                r.bwt
            ));
        }
    }
    parts.push(format!("{:.1}s", a.wall_clock_secs));
    parts.join("  ")
}

fn run(config: &Path, seed: Option<u64>, out: &Path, dump_scores: bool) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let artifacts = run_experiment(&cfg, RunOptions { dump_scores })?;
    let dir = out.join(&cfg.name);
    write_artifacts(&dir, &artifacts).with_context(|| format!("writing {}", dir.display()))?;
    println!("{}", summary_line(&artifacts));
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn run_gradcheck(configs: usize, seed: u64, eps: f64) -> Result<bool> {
    let results = gradcheck::run_suite(configs, seed, eps)?;
    println!("term,seed,head,params,max_rel_error,passed");
    for r in &results {
        println!(
            "{},{},{},{},{:.3e},{}",
            r.term.name(),
            r.seed,
            r.head,
            r.params,
            r.max_rel_error,
            r.passed()
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!(
        "{} of {} checks below relative error {REL_TOLERANCE:e}",
        results.len() - failed,
        results.len()
    );
    Ok(failed == 0)
}

fn score(config: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let artifacts = run_experiment(&cfg, RunOptions { dump_scores: true })?;
    print!(
        "task_id,sample_index,H,expected_H,MI\n{}",
        artifacts.scores.unwrap_or_default()
    );
    Ok(())
}

fn sweep(config: &Path, grid: &Path, out: &Path) -> Result<()> {
    let base = load_config(config, None)?;
    let text =
        std::fs::read_to_string(grid).with_context(|| format!("reading {}", grid.display()))?;
    let grid = parse_grid(&text)?;
    if grid.iter().any(|(k, _)| k == "name") {
        bail!("`name` is derived from the grid values and cannot be swept");
    }
    let combos = expand_grid(&grid);
    println!("{} runs", combos.len());
    for over in combos {
        let mut cfg = base.clone();
        cfg.apply(&over)?;
        let suffix: Vec<String> = over.iter().map(|(k, v)| format!("{k}={v}")).collect();
        cfg.name = format!("{}_{}", base.name, suffix.join("_")).replace([',', '/', ' '], "-");
        let artifacts = run_experiment(&cfg, RunOptions::default())
            .with_context(|| format!("run {}", cfg.name))?;
        write_artifacts(&out.join(&cfg.name), &artifacts)?;
        println!("{}", summary_line(&artifacts));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            dump_scores,
        } => run(&config, seed, &out, dump_scores).map(|_| true),
        Command::Gradcheck { configs, seed, eps } => run_gradcheck(configs, seed, eps),
        Command::Score { config, seed } => score(&config, seed).map(|_| true),
        Command::Sweep { config, grid, out } => sweep(&config, &grid, &out).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::thread;

use clap::{Parser, Subcommand};
use incrt::harness::{
    run_checks, run_exp1, run_exp2, run_exp3, run_exp4, run_gradcheck, write_outputs, ExperimentOutput,
    RunConfig,
};

#[derive(Parser)]
#[command(name = "incrt", version, about = "Experiments for the self-organising prototype layer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` config file; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Runs this many consecutive seeds in parallel, one subdirectory each.
    #[arg(long, global = true)]
    seeds: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Spectral ordering, coverage, growth-direction force and free-energy audit.
    Exp1,
    /// Temperature trajectories and scale specialisation.
    Exp2,
    /// Separation-force ordering across heads.
    Exp3,
    /// Staged pruning safety.
    Exp4,
    /// Every invariant suite.
    Checks,
    /// Gradient checks only.
    Gradcheck,
}

impl Command {
    fn run(self, cfg: &RunConfig) -> incrt::Result<ExperimentOutput> {
        match self {
            Command::Exp1 => run_exp1(cfg),
            Command::Exp2 => run_exp2(cfg),
            Command::Exp3 => run_exp3(cfg),
            Command::Exp4 => run_exp4(cfg),
            Command::Checks => run_checks(cfg),
            Command::Gradcheck => run_gradcheck(cfg),
        }
    }
}

fn run_one(cmd: Command, cfg: &RunConfig) -> incrt::Result<ExperimentOutput> {
    let out = cmd.run(cfg)?;
    write_outputs(&out, &cfg.out_dir)?;
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None if matches!(cli.command, Command::Exp4) => RunConfig::pruning_preset(),
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }

    let results: Vec<(u64, incrt::Result<ExperimentOutput>)> = match cli.seeds {
        None => vec![(cfg.seed, run_one(cli.command, &cfg))],
        Some(n) => {
            let configs: Vec<RunConfig> = (0..n)
                .map(|i| {
                    let seed = cfg.seed.wrapping_add(i);
                    RunConfig {
                        seed,
                        out_dir: cfg.out_dir.join(format!("seed_{seed}")),
                        ..cfg.clone()
                    }
                })
                .collect();
            thread::scope(|scope| {
                let handles: Vec<_> = configs
                    .iter()
                    .map(|c| (c.seed, scope.spawn(move || run_one(cli.command, c))))
                    .collect();
                handles
                    .into_iter()
                    .map(|(seed, h)| (seed, h.join().expect("worker panicked")))
                    .collect()
            })
        }
    };

    let mut failing = Vec::new();
    let mut summary = String::from("seed,passed,failing\n");
    let mut had_error = false;
    for (seed, result) in &results {
        match result {
            Ok(out) => {
                for c in &out.report.criteria {
                    let prefix = if cli.seeds.is_some() { format!("seed {seed}: ") } else { String::new() };
                    println!("{prefix}{}", c.line());
                }
                let ids = out.report.failing();
                let _ = writeln!(summary, "{seed},{},{}", ids.is_empty(), ids.join(" "));
                for id in ids {
                    if !failing.contains(&id.to_string()) {
                        failing.push(id.to_string());
                    }
                }
            }
            Err(e) => {
                eprintln!("error (seed {seed}): {e}");
                had_error = true;
            }
        }
    }
    if cli.seeds.is_some() {
        let path = cfg.out_dir.join("summary.csv");
        if let Err(e) = std::fs::create_dir_all(&cfg.out_dir).and_then(|_| std::fs::write(&path, summary)) {
            eprintln!("error: cannot write {}: {e}", path.display());
            had_error = true;
        }
    }
    if had_error {
        return ExitCode::from(2);
    }
    if failing.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("failing criteria: {}", failing.join(", "));
        ExitCode::FAILURE
    }
}

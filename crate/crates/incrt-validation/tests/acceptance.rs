//! Runs every acceptance criterion at its stated tolerance and runtime bound,
//! printing one PASS/FAIL line per criterion. Exits nonzero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::thread;
use std::time::{Duration, Instant};

use incrt::harness::{
    dominance_suite, exp1_report, exp2_report, exp3_report, gradient_suite, identity_suite, run_checks,
    run_exp1, run_exp2, run_exp3, run_exp4, simulate, spectral_suite, write_outputs, CriterionResult,
    ExperimentOutput, ExperimentReport, RunConfig, Simulation,
};

struct Outcome {
    result: CriterionResult,
    elapsed: Duration,
    limit: Option<Duration>,
}

impl Outcome {
    fn timed(result: CriterionResult, elapsed: Duration, limit_secs: u64) -> Self {
        let limit = Duration::from_secs(limit_secs);
        let result = if elapsed > limit {
            let detail = format!("{}; runtime {:.2} s over {limit_secs} s", result.detail, elapsed.as_secs_f64());
            CriterionResult::new(result.id, result.name, false, detail)
        } else {
            result
        };
        Self {
            result,
            elapsed,
            limit: Some(limit),
        }
    }

    fn line(&self) -> String {
        match self.limit {
            Some(l) => format!(
                "{} [{:.2} s, limit {} s]",
                self.result.line(),
                self.elapsed.as_secs_f64(),
                l.as_secs()
            ),
            None => format!("{} [{:.2} s]", self.result.line(), self.elapsed.as_secs_f64()),
        }
    }
}

type Verdict = incrt::Result<Outcome>;
type Criterion = fn() -> Verdict;

struct Shared {
    sim: Simulation,
    elapsed: Duration,
}

/// The default-configuration run, trained once for every criterion that reads it.
fn shared() -> &'static incrt::Result<Shared> {
    static CELL: OnceLock<incrt::Result<Shared>> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let sim = simulate(&RunConfig::default())?;
        Ok(Shared {
            sim,
            elapsed: start.elapsed(),
        })
    })
}

fn missing(id: &str) -> incrt::Error {
    incrt::Error::Numeric(format!("report has no criterion {id}"))
}

fn from_shared(id: &str, build: fn(&Simulation) -> incrt::Result<ExperimentReport>, limit: u64) -> Verdict {
    let s = shared().as_ref().map_err(|e| incrt::Error::Numeric(format!("default run failed: {e}")))?;
    let start = Instant::now();
    let report = build(&s.sim)?;
    let result = report.criterion(id).ok_or_else(|| missing(id))?.clone();
    Ok(Outcome::timed(result, s.elapsed + start.elapsed(), limit))
}

fn from_suite(
    suite: impl FnOnce(&mut ExperimentReport) -> incrt::Result<CriterionResult>,
    limit: u64,
) -> Verdict {
    let mut scratch = ExperimentReport::new("acceptance", &RunConfig::default());
    let start = Instant::now();
    let result = suite(&mut scratch)?;
    Ok(Outcome::timed(result, start.elapsed(), limit))
}

fn gradients_match_finite_differences() -> Verdict {
    let seed = RunConfig::default().seed;
    from_suite(|r| gradient_suite(seed, r), 10)
}

fn algebraic_identities_hold() -> Verdict {
    let seed = RunConfig::default().seed;
    from_suite(|r| identity_suite(seed, r), 30)
}

fn growth_orders_heads_and_covers_the_signal() -> Verdict {
    from_shared("3", exp1_report, 60)
}

fn temperatures_diverge_by_birth_order() -> Verdict {
    from_shared("4", exp2_report, 60)
}

fn separation_forces_fall_in_growth_order() -> Verdict {
    from_shared("5", exp3_report, 60)
}

fn staged_pruning_leaves_survivors_untouched() -> Verdict {
    let start = Instant::now();
    let out = run_exp4(&RunConfig::pruning_preset())?;
    let result = out.report.criterion("6").ok_or_else(|| missing("6"))?.clone();
    Ok(Outcome::timed(result, start.elapsed(), 60))
}

fn growth_direction_never_lowers_the_force() -> Verdict {
    from_shared("7", exp1_report, 60)
}

fn free_energy_never_rises() -> Verdict {
    from_shared("8", exp1_report, 60)
}

fn directional_heads_beat_a_random_basis() -> Verdict {
    let cfg = RunConfig::default();
    from_suite(|r| dominance_suite(&cfg, r), 30)
}

fn spectral_mechanics_hold() -> Verdict {
    let seed = RunConfig::default().seed;
    from_suite(|r| spectral_suite(seed, r), 30)
}

fn snapshot(dir: &Path) -> incrt::Result<BTreeMap<String, Vec<u8>>> {
    let io = |source| incrt::Error::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let entry = entry.map_err(io)?;
        let bytes = fs::read(entry.path()).map_err(io)?;
        files.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
    }
    Ok(files)
}

fn repeated_runs_write_identical_bytes() -> Verdict {
    type Runner = fn(&RunConfig) -> incrt::Result<ExperimentOutput>;
    let runs: [(&str, Runner, RunConfig); 5] = [
        ("exp1", run_exp1, RunConfig::default()),
        ("exp2", run_exp2, RunConfig::default()),
        ("exp3", run_exp3, RunConfig::default()),
        ("exp4", run_exp4, RunConfig::pruning_preset()),
        ("checks", run_checks, RunConfig::default()),
    ];
    let start = Instant::now();
    let scratch = tempfile::tempdir().map_err(|source| incrt::Error::Io {
        path: std::env::temp_dir(),
        source,
    })?;
    let mut mismatched = Vec::new();
    let mut files = 0;
    for (name, runner, cfg) in runs {
        let (a, b) = (scratch.path().join(format!("{name}_a")), scratch.path().join(format!("{name}_b")));
        write_outputs(&runner(&cfg)?, &a)?;
        write_outputs(&runner(&cfg)?, &b)?;
        let (sa, sb) = (snapshot(&a)?, snapshot(&b)?);
        files += sa.len();
        if sa != sb {
            mismatched.push(name);
        }
    }
    let detail = if mismatched.is_empty() {
        format!("{files} files byte-identical across 5 experiments")
    } else {
        format!("outputs differ for {}", mismatched.join(", "))
    };
    Ok(Outcome {
        result: CriterionResult::new("11", "determinism", mismatched.is_empty(), detail),
        elapsed: start.elapsed(),
        limit: None,
    })
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 11] = [
        ("1", gradients_match_finite_differences),
        ("2", algebraic_identities_hold),
        ("3", growth_orders_heads_and_covers_the_signal),
        ("4", temperatures_diverge_by_birth_order),
        ("5", separation_forces_fall_in_growth_order),
        ("6", staged_pruning_leaves_survivors_untouched),
        ("7", growth_direction_never_lowers_the_force),
        ("8", free_energy_never_rises),
        ("9", directional_heads_beat_a_random_basis),
        ("10", spectral_mechanics_hold),
        ("11", repeated_runs_write_identical_bytes),
    ];
    println!("\nrunning {} acceptance criteria", criteria.len());
    let verdicts: Vec<(&str, Verdict)> = thread::scope(|scope| {
        let handles: Vec<_> = criteria.iter().map(|(id, f)| (*id, scope.spawn(f))).collect();
        handles
            .into_iter()
            .map(|(id, h)| {
                let v = h
                    .join()
                    .unwrap_or_else(|_| Err(incrt::Error::Numeric("criterion panicked".into())));
                (id, v)
            })
            .collect()
    });

    let mut failing = Vec::new();
    for (id, verdict) in &verdicts {
        match verdict {
            Ok(outcome) => {
                println!("{}", outcome.line());
                if !outcome.result.passed {
                    failing.push(*id);
                }
            }
            Err(e) => {
                println!("criterion {id}: FAIL (error: {e})");
                failing.push(*id);
            }
        }
    }
    let passed = verdicts.len() - failing.len();
    println!("\nacceptance result: {passed} passed; {} failed", failing.len());
    if failing.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("failing criteria: {}", failing.join(", "));
        ExitCode::FAILURE
    }
}

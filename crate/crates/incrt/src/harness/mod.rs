//! Configuration, synthetic data and the experiment runners.

mod checks;
mod experiments;
mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::ddcl::TokenMatrix;
use crate::dynamics::{run, validate_step_sizes, ControlParams, RunTrace, StepSizes, ValidationReport};
use crate::error::{Error, Result};
use crate::incrt::{DirectionalSignal, PruneRule, SignalWeighting};
use crate::lyapunov::{audit_monotone, AuditReport};
use crate::numerics::{gram_schmidt_extend, Matrix, Rng};

pub use checks::{
    assignment_negative_control, dominance_suite, gradient_suite, identity_suite, run_checks,
    run_gradcheck, spectral_suite, validation_negative_control,
};
pub use experiments::{exp1_report, exp2_report, exp3_report, run_exp1, run_exp2, run_exp3, run_exp4};
pub use output::{format_real, write_outputs};

/// Run settings. Field names double as the config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub n_tokens: usize,
    pub dim: usize,
    pub rho: f64,
    pub lambda1: f64,
    pub n_blocks: usize,
    pub theta_w: f64,
    pub phi_g: f64,
    pub k_protos: usize,
    pub t_init: f64,
    pub t_min: f64,
    pub eta_t: f64,
    pub eta_p: f64,
    pub eta_plus: f64,
    pub n_min: usize,
    pub lambda_barrier: f64,
    pub max_heads: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Left out of the report so that outputs do not depend on where they land.
    #[serde(skip)]
    pub out_dir: PathBuf,
    pub signal_weighting: SignalWeighting,
    pub prune_rule: PruneRule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_tokens: 500,
            dim: 64,
            rho: 0.7,
            lambda1: 2.0,
            n_blocks: 32,
            theta_w: 0.05,
            phi_g: 0.01,
            k_protos: 4,
            t_init: 1.0,
            t_min: 0.1,
            eta_t: 0.01,
            eta_p: 0.1,
            eta_plus: 1.0,
            n_min: 400,
            lambda_barrier: 2.0,
            max_heads: 8,
            max_steps: 6000,
            seed: 0,
            out_dir: PathBuf::from("out"),
            signal_weighting: SignalWeighting::SecondMoment,
            prune_rule: PruneRule::Gamma,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Reads flat `key = value` lines over the defaults. `#` starts a comment;
    /// unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {line}: {key} given twice")));
            }
            seen.push(key);
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "n_tokens" => self.n_tokens = parse_value(key, value, line)?,
            "dim" => self.dim = parse_value(key, value, line)?,
            "rho" => self.rho = parse_value(key, value, line)?,
            "lambda1" => self.lambda1 = parse_value(key, value, line)?,
            "n_blocks" => self.n_blocks = parse_value(key, value, line)?,
            "theta_w" => self.theta_w = parse_value(key, value, line)?,
            "phi_g" => self.phi_g = parse_value(key, value, line)?,
            "k_protos" => self.k_protos = parse_value(key, value, line)?,
            "t_init" => self.t_init = parse_value(key, value, line)?,
            "t_min" => self.t_min = parse_value(key, value, line)?,
            "eta_t" => self.eta_t = parse_value(key, value, line)?,
            "eta_p" => self.eta_p = parse_value(key, value, line)?,
            "eta_plus" => self.eta_plus = parse_value(key, value, line)?,
            "n_min" => self.n_min = parse_value(key, value, line)?,
            "lambda_barrier" => self.lambda_barrier = parse_value(key, value, line)?,
            "max_heads" => self.max_heads = parse_value(key, value, line)?,
            "max_steps" => self.max_steps = parse_value(key, value, line)?,
            "seed" => self.seed = parse_value(key, value, line)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "signal_weighting" => {
                self.signal_weighting = match value {
                    "second_moment" => SignalWeighting::SecondMoment,
                    "unweighted" => SignalWeighting::Unweighted,
                    _ => return Err(Error::Config(format!("line {line}: unknown weighting {value:?}"))),
                }
            }
            "prune_rule" => {
                self.prune_rule = match value {
                    "gamma" => PruneRule::Gamma,
                    "spread" => PruneRule::Spread,
                    _ => return Err(Error::Config(format!("line {line}: unknown prune rule {value:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Exp-4 preset: a lower growth threshold so the cap is reached with
    /// heads to spare for staged pruning.
    pub fn pruning_preset() -> Self {
        Self {
            theta_w: 0.02,
            ..Self::default()
        }
    }

    pub fn step_sizes(&self) -> StepSizes {
        StepSizes {
            eta_t: self.eta_t,
            eta_p: self.eta_p,
            eta_plus: self.eta_plus,
            n_min: self.n_min,
            t_min: self.t_min,
            t_init: self.t_init,
        }
    }

    pub fn control(&self) -> ControlParams {
        ControlParams {
            theta_w: self.theta_w,
            phi_g: self.phi_g,
            k_protos: self.k_protos,
            max_heads: self.max_heads,
            max_steps: self.max_steps,
            lambda_barrier: self.lambda_barrier,
            prune_rule: self.prune_rule,
        }
    }

    /// Structural checks done at load time.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_tokens < 2 || self.dim < 2 {
            return fail("need at least 2 tokens and 2 dimensions".into());
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return fail(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if 2 * self.n_blocks > self.dim {
            return fail(format!("{} blocks do not fit in {} dimensions", self.n_blocks, self.dim));
        }
        if !(self.phi_g < self.theta_w) {
            return fail(format!(
                "phi_g ({}) must be below theta_w ({})",
                self.phi_g, self.theta_w
            ));
        }
        let positive = [self.lambda1, self.theta_w, self.phi_g, self.lambda_barrier];
        if positive.iter().any(|x| !(*x > 0.0)) {
            return fail("lambda1, theta_w, phi_g and lambda_barrier must be positive".into());
        }
        if self.k_protos < 2 || self.max_heads == 0 {
            return fail("need k_protos ≥ 2 and max_heads ≥ 1".into());
        }
        if 2 * self.max_heads > self.dim {
            return fail("max_heads planes do not fit in the embedding dimension".into());
        }
        self.step_sizes().check()
    }
}

/// Isotropic tokens and a block-rotation attention product in a random basis.
///
/// Returns the generator's rotation magnitudes alongside the data.
pub fn gen_synthetic(cfg: &RunConfig, rng: &mut Rng) -> Result<(TokenMatrix, DirectionalSignal, Vec<f64>)> {
    let (n, d) = (cfg.n_tokens, cfg.dim);
    let mut z = rng.normal_matrix(n, d);
    for c in 0..d {
        let mean = z.col(c).iter().sum::<f64>() / n as f64;
        for r in 0..n {
            z[(r, c)] -= mean;
        }
    }
    let z = TokenMatrix::new(z)?;
    let basis = gram_schmidt_extend(&Matrix::zeros(d, 0), &rng.normal_matrix(d, d))?;
    let mags: Vec<f64> = (0..cfg.n_blocks)
        .map(|k| cfg.lambda1 * cfg.rho.powi(k as i32))
        .collect();
    let mut m_a = Matrix::zeros(d, d);
    for (k, lam) in mags.iter().enumerate() {
        let u = basis.col(2 * k);
        let v = basis.col(2 * k + 1);
        for i in 0..d {
            for j in 0..d {
                m_a[(i, j)] += lam * (u[i] * v[j] - v[i] * u[j]);
            }
        }
    }
    let sig = DirectionalSignal::new(m_a, &z, cfg.signal_weighting)?;
    Ok((z, sig, mags))
}

/// One full training run on freshly generated data, with its diagnostics.
pub struct Simulation {
    pub cfg: RunConfig,
    pub z: TokenMatrix,
    pub sig: DirectionalSignal,
    pub magnitudes: Vec<f64>,
    pub trace: RunTrace,
    pub validation: ValidationReport,
    pub audit: AuditReport,
}

/// Data from `seed`, training from `seed ^ 1`.
pub fn simulate(cfg: &RunConfig) -> Result<Simulation> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let (z, sig, magnitudes) = gen_synthetic(cfg, &mut rng)?;
    let s = cfg.step_sizes();
    let validation = validate_step_sizes(&s, &z, &sig, cfg.k_protos, cfg.seed)?;
    let trace = run(&z, &sig, s, cfg.control(), cfg.seed ^ 1)?;
    let audit = audit_monotone(&trace, cfg.lambda_barrier, &s, cfg.k_protos);
    Ok(Simulation {
        cfg: cfg.clone(),
        z,
        sig,
        magnitudes,
        trace,
        validation,
        audit,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CriterionResult {
    pub fn new(id: impl Into<String>, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    /// `criterion <id>: PASS|FAIL <name> (<detail>)`.
    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("criterion {}: {verdict} {} ({})", self.id, self.name, self.detail)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config: RunConfig,
    pub metrics: BTreeMap<String, f64>,
    pub criteria: Vec<CriterionResult>,
    pub validation: Option<ValidationReport>,
    /// Files written next to the report.
    pub series: Vec<String>,
}

impl ExperimentReport {
    pub fn new(experiment: &str, cfg: &RunConfig) -> Self {
        Self {
            experiment: experiment.into(),
            config: cfg.clone(),
            metrics: BTreeMap::new(),
            criteria: Vec::new(),
            validation: None,
            series: Vec::new(),
        }
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn criterion(&self, id: &str) -> Option<&CriterionResult> {
        self.criteria.iter().find(|c| c.id == id)
    }

    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.criteria.iter().filter(|c| !c.passed).map(|c| c.id.as_str()).collect()
    }
}

/// A report plus the run it came from, when there was one.
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub trace: Option<RunTrace>,
}

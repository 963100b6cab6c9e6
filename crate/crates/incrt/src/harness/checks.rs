use crate::baseline::compare_info_loss;
use crate::ddcl::{
    assignment_first_variation, assignment_second_variation, grad_prototypes, grad_temperature, grad_v,
    gini_sum, loss_decomposition, loss_lq, residual_vectors, separation_force, sigma_q, soft_assign,
    AssignmentMatrix, PrototypeBank, TokenMatrix,
};
use crate::dynamics::{validate_step_sizes, CheckStatus};
use crate::error::{Error, Result};
use crate::incrt::{gate_update, residual_matrix, CapturedSubspace, DirectionalSignal};
use crate::numerics::{finite_diff, gram_schmidt_extend, norm, sym_eig, Matrix, Rng};

use super::{gen_synthetic, CriterionResult, ExperimentOutput, ExperimentReport, RunConfig};

fn random_instance(rng: &mut Rng, max_n: usize, max_k: usize, max_d: usize) -> (TokenMatrix, PrototypeBank) {
    let n = 2 + rng.below(max_n - 1);
    let k = 2 + rng.below(max_k - 1);
    let d = 2 + rng.below(max_d - 1);
    let z = TokenMatrix::new(rng.normal_matrix(n, d)).expect("finite normal draws");
    let t = 0.5 + 1.5 * rng.uniform();
    let bank = PrototypeBank::new(rng.normal_matrix(k, d), t).expect("positive temperature");
    (z, bank)
}

fn rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / norm(reference).max(1e-12)
}

pub const GRADIENT_TRIALS: usize = 100;

/// Analytic gradients and assignment variations against central differences.
pub fn gradient_suite(seed: u64, report: &mut ExperimentReport) -> Result<CriterionResult> {
    let mut rng = Rng::new(seed);
    let (mut w_p, mut w_t, mut w_1, mut w_2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..GRADIENT_TRIALS {
        let (z, bank) = random_instance(&mut rng, 50, 8, 16);
        let (k, d) = (bank.k(), bank.dim());
        let g = grad_prototypes(&z, &bank)?;
        let fd = finite_diff(
            |x| {
                let p = Matrix::new(k, d, x.to_vec()).expect("shape preserved");
                loss_lq(&z, &PrototypeBank::new(p, bank.temperature).expect("valid bank"))
                    .expect("dimensions agree")
            },
            bank.prototypes.as_slice(),
            1e-5,
        )?;
        w_p = w_p.max(rel_err(g.as_slice(), &fd));

        let gt = grad_temperature(&z, &bank)?;
        let fdt = finite_diff(
            |t| loss_lq(&z, &bank.with_temperature(t[0])).expect("dimensions agree"),
            &[bank.temperature],
            1e-5,
        )?;
        w_t = w_t.max(rel_err(&[gt], &fdt));

        let u = rng.unit_vector(d);
        let alpha = z.project(&u);
        let q_at = |eps: f64| soft_assign(&z.expanded(&u, &alpha, eps), &bank).map(|q| q.matrix().clone());
        let first = assignment_first_variation(&z, &bank, &u)?;
        let h1 = 1e-5;
        let (qp, qm) = (q_at(h1)?, q_at(-h1)?);
        let fd1 = qp.sub(&qm)?.scale(1.0 / (2.0 * h1));
        w_1 = w_1.max(rel_err(first.as_slice(), fd1.as_slice()));

        let second = assignment_second_variation(&z, &bank, &u)?;
        let h2 = 1e-4;
        let (qp, q0, qm) = (q_at(h2)?, q_at(0.0)?, q_at(-h2)?);
        let fd2 = qp.add(&qm)?.sub(&q0.scale(2.0))?.scale(1.0 / (h2 * h2));
        w_2 = w_2.max(rel_err(second.as_slice(), fd2.as_slice()));
    }
    report.metric("grad_p_worst_rel", w_p);
    report.metric("grad_t_worst_rel", w_t);
    report.metric("first_variation_worst_rel", w_1);
    report.metric("second_variation_worst_rel", w_2);
    let pass = w_p <= 1e-5 && w_t <= 1e-5 && w_1 <= 1e-5 && w_2 <= 1e-4;
    Ok(CriterionResult::new(
        "1",
        "gradient correctness",
        pass,
        format!(
            "{GRADIENT_TRIALS} instances; worst relative error dP {w_p:e}, dT {w_t:e}, first variation {w_1:e}, second variation {w_2:e}"
        ),
    ))
}

pub const IDENTITY_TRIALS: usize = 1000;

/// Loss split, separation gradient, force and assignment-covariance identities.
pub fn identity_suite(seed: u64, report: &mut ExperimentReport) -> Result<CriterionResult> {
    let mut rng = Rng::new(seed);
    let (mut w_split, mut min_v, mut w_gv, mut w_force, mut min_eig, mut w_trace) =
        (0.0f64, f64::INFINITY, 0.0f64, 0.0f64, f64::INFINITY, 0.0f64);
    for _ in 0..IDENTITY_TRIALS {
        let (z, bank) = random_instance(&mut rng, 50, 8, 16);
        let l = loss_lq(&z, &bank)?;
        let dec = loss_decomposition(&z, &bank)?;
        w_split = w_split.max((l - dec.l_fit - dec.v_sep).abs() / l.abs().max(1e-300));
        min_v = min_v.min(dec.v_sep);

        let q = soft_assign(&z, &bank)?;
        let sq = sigma_q(&q);
        let gv = grad_v(&bank, &sq)?;
        let r2 = residual_vectors(&z, &bank)?.scale(2.0);
        w_gv = w_gv.max(gv.sub(&r2)?.frobenius() / r2.frobenius().max(1.0));
        let f = separation_force(&z, &bank)?;
        w_force = w_force.max((f - gv.frobenius_sq()).abs() / f.max(1e-300));

        let eig = sym_eig(&sq)?;
        let scale = sq.trace().max(1.0);
        min_eig = min_eig.min(eig.values.last().copied().unwrap_or(0.0) / scale);
        w_trace = w_trace.max((sq.trace() - gini_sum(&q)).abs() / gini_sum(&q).max(1.0));
    }
    report.metric("split_worst_rel", w_split);
    report.metric("v_min", min_v);
    report.metric("grad_v_worst", w_gv);
    report.metric("force_worst_rel", w_force);
    report.metric("sigma_q_min_eig_rel", min_eig);
    report.metric("sigma_q_trace_worst", w_trace);
    let pass = w_split <= 1e-10
        && min_v >= 0.0
        && w_gv <= 1e-12
        && w_force <= 1e-10
        && min_eig >= -1e-12
        && w_trace <= 1e-12;
    Ok(CriterionResult::new(
        "2",
        "algebraic identities",
        pass,
        format!(
            "{IDENTITY_TRIALS} instances; split {w_split:e}; min V {min_v:e}; grad_v {w_gv:e}; force {w_force:e}; min eig {min_eig:e}; trace {w_trace:e}"
        ),
    ))
}

pub const DOMINANCE_TRIALS: u64 = 100;

/// Matched-rank information loss against a random fixed basis.
pub fn dominance_suite(cfg: &RunConfig, report: &mut ExperimentReport) -> Result<CriterionResult> {
    let mut rng = Rng::new(cfg.seed);
    let (_, sig, _) = gen_synthetic(cfg, &mut rng)?;
    let cmp = compare_info_loss(&sig, 0..DOMINANCE_TRIALS, 2, 1.0)?;
    let min_margin = cmp
        .trials
        .iter()
        .map(|t| t.gain - t.gain_bound)
        .fold(f64::INFINITY, f64::min);
    report.metric("dominance_wins", cmp.wins as f64);
    report.metric("dominance_bound_violations", cmp.bound_violations as f64);
    report.metric("dominance_min_gain_margin", min_margin);
    if let Some(t) = cmp.trials.first() {
        report.metric("dominance_i_ddcl", t.i_ddcl);
    }
    let pass = cmp.wins >= 99 && cmp.bounds_met() && !cmp.degenerate;
    Ok(CriterionResult::new(
        "9",
        "dominance over a random basis",
        pass,
        format!(
            "wins {}/{}; gain below bound in {} trials (min margin {min_margin:e})",
            cmp.wins,
            cmp.trials.len(),
            cmp.bound_violations
        ),
    ))
}

fn random_antisymmetric(rng: &mut Rng, d: usize) -> Matrix {
    let a = rng.normal_matrix(d, d);
    Matrix::from_fn(d, d, |i, j| a[(i, j)] - a[(j, i)])
}

pub const SPECTRAL_TRIALS: u64 = 100;

/// Interlacing, block telescoping and gate convergence.
pub fn spectral_suite(seed: u64, report: &mut ExperimentReport) -> Result<CriterionResult> {
    let mut rng = Rng::new(seed);
    let mut worst_interlace = f64::NEG_INFINITY;
    let mut worst_telescope = 0.0f64;
    for _ in 0..SPECTRAL_TRIALS {
        let d = 4 + rng.below(13);
        let sig = DirectionalSignal::from_parts(random_antisymmetric(&mut rng, d), Matrix::identity(d))?;
        let before = residual_matrix(&sig, &CapturedSubspace::empty(d))?;
        let random_plane = gram_schmidt_extend(&Matrix::zeros(d, 0), &rng.normal_matrix(d, 2))?;
        for plane in [&before.plane, &random_plane] {
            let after = residual_matrix(&sig, &CapturedSubspace::empty(d).extend(plane)?)?;
            worst_interlace = worst_interlace.max(after.lambda_max - before.lambda_max);
        }

        let blocks = 1 + rng.below(d / 2);
        let basis = gram_schmidt_extend(&Matrix::zeros(d, 0), &rng.normal_matrix(d, d))?;
        let mut m = Matrix::zeros(d, d);
        for b in 0..blocks {
            let lam = 0.1 + 2.0 * rng.uniform();
            let (u, v) = (basis.col(2 * b), basis.col(2 * b + 1));
            m = m.add(&Matrix::from_fn(d, d, |i, j| lam * (u[i] * v[j] - v[i] * u[j])))?;
        }
        let sig = DirectionalSignal::from_parts(m, Matrix::identity(d))?;
        let mut sub = CapturedSubspace::empty(d);
        let mut res = residual_matrix(&sig, &sub)?;
        for _ in 0..blocks {
            sub = sub.extend(&res.plane)?;
            let next = residual_matrix(&sig, &sub)?;
            let drop = res.frob_sq - next.frob_sq;
            worst_telescope = worst_telescope.max((drop - 2.0 * res.lambda_max * res.lambda_max).abs());
            res = next;
        }
    }

    let mut worst_align = f64::INFINITY;
    for seed in 0..SPECTRAL_TRIALS {
        let mut rng = Rng::new(seed);
        let d = 16;
        let (g, v1) = loop {
            let b = rng.normal_matrix(d, d);
            let g = b.t_matmul(&b)?.scale(1.0 / d as f64);
            let g = Matrix::from_fn(d, d, |i, j| 0.5 * (g[(i, j)] + g[(j, i)]));
            let eig = sym_eig(&g)?;
            if eig.values[0] - eig.values[1] > 0.01 {
                break (g, eig.vectors.col(0));
            }
        };
        let mut u = rng.unit_vector(d);
        let mut align = 0.0;
        for _ in 0..GATE_STEP_CAP {
            u = gate_update(&u, &g, 1.0)?;
            align = crate::numerics::dot(&u, &v1).abs();
            if align >= 0.999 {
                break;
            }
        }
        worst_align = worst_align.min(align);
    }
    report.metric("interlacing_worst_increase", worst_interlace);
    report.metric("telescoping_worst_error", worst_telescope);
    report.metric("gate_worst_alignment", worst_align);
    let pass = worst_interlace <= 1e-12 && worst_telescope <= 1e-9 && worst_align >= 0.999;
    Ok(CriterionResult::new(
        "10",
        "spectral mechanics",
        pass,
        format!(
            "worst interlacing increase {worst_interlace:e}; worst telescoping error {worst_telescope:e}; worst gate alignment {worst_align:.6}"
        ),
    ))
}

const GATE_STEP_CAP: usize = 5000;

/// The hard step-size ordering must be rejected when `η_T = η_P`.
pub fn validation_negative_control(cfg: &RunConfig) -> CriterionResult {
    let bad = RunConfig {
        eta_t: cfg.eta_p,
        ..cfg.clone()
    };
    let caught = matches!(bad.validate(), Err(Error::Config(_)));
    CriterionResult::new(
        "validation-negative-control",
        "equal eta_t and eta_p rejected",
        caught,
        format!("config error raised: {caught}"),
    )
}

/// A corrupted assignment row must be refused.
pub fn assignment_negative_control() -> CriterionResult {
    let q = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.7, 0.4]]).expect("rows agree");
    let caught = AssignmentMatrix::new(q).is_err();
    CriterionResult::new(
        "assignment-negative-control",
        "row not summing to one rejected",
        caught,
        format!("invariant violation caught: {caught}"),
    )
}

pub fn run_gradcheck(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let mut report = ExperimentReport::new("gradcheck", cfg);
    let c = gradient_suite(cfg.seed, &mut report)?;
    report.criteria.push(c);
    report.series = vec!["report.json".into()];
    Ok(ExperimentOutput { report, trace: None })
}

/// Every invariant suite plus the step-size validation of the configuration.
pub fn run_checks(cfg: &RunConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut report = ExperimentReport::new("checks", cfg);
    let c = gradient_suite(cfg.seed, &mut report)?;
    report.criteria.push(c);
    let c = identity_suite(cfg.seed, &mut report)?;
    report.criteria.push(c);
    let c = dominance_suite(cfg, &mut report)?;
    report.criteria.push(c);
    let c = spectral_suite(cfg.seed, &mut report)?;
    report.criteria.push(c);
    report.criteria.push(validation_negative_control(cfg));
    report.criteria.push(assignment_negative_control());

    let mut rng = Rng::new(cfg.seed);
    let (z, sig, _) = gen_synthetic(cfg, &mut rng)?;
    let v = validate_step_sizes(&cfg.step_sizes(), &z, &sig, cfg.k_protos, cfg.seed)?;
    for c in &v.conditions {
        let code = match c.status {
            CheckStatus::Pass => 0.0,
            CheckStatus::Warn => 1.0,
            CheckStatus::Fail => 2.0,
            CheckStatus::NotEvaluated => -1.0,
        };
        report.metric(format!("condition_{}", c.id), code);
    }
    let hard_fail = v.conditions.iter().any(|c| c.status == CheckStatus::Fail);
    report.criteria.push(CriterionResult::new(
        "step-size-validation",
        "no hard step-size failure",
        !hard_fail,
        v.conditions
            .iter()
            .map(|c| format!("{} {:?}", c.id, c.status))
            .collect::<Vec<_>>()
            .join(", "),
    ));
    report.validation = Some(v);
    report.series = vec!["report.json".into()];
    Ok(ExperimentOutput { report, trace: None })
}

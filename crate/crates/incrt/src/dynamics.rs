//! The coupled discrete-time loop: per-step prototype and temperature
//! updates, growth and pruning events under a dwell constraint, step-size
//! validation and head classification.

use serde::Serialize;

use crate::ddcl::{effective_scale, head_stats, phi_curve, PhiCurve, PrototypeBank, TokenMatrix};
use crate::error::{Error, Result};
use crate::incrt::{
    coverage, gamma_h, gate_operator, prune_check_with, residual_matrix, spawn_head, CapturedSubspace,
    DirectionalSignal, GateState, Head, PruneRule, ResidualReport,
};
use crate::lyapunov::{barrier, free_energy, temperature_potential, FreeEnergyBreakdown};
use crate::numerics::{dot, norm, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepSizes {
    pub eta_t: f64,
    pub eta_p: f64,
    pub eta_plus: f64,
    /// Minimum steps between architectural events.
    pub n_min: usize,
    pub t_min: f64,
    pub t_init: f64,
}

impl StepSizes {
    /// Hard requirements: positive sizes, `t_min ≤ t_init`, and
    /// `eta_t < eta_p < eta_plus`.
    pub fn check(&self) -> Result<()> {
        let positive = [self.eta_t, self.eta_p, self.eta_plus, self.t_min, self.t_init];
        if positive.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::Config("step sizes and temperatures must be positive".into()));
        }
        if self.t_min > self.t_init {
            return Err(Error::Config(format!(
                "t_min {} exceeds t_init {}",
                self.t_min, self.t_init
            )));
        }
        if !(self.eta_t < self.eta_p && self.eta_p < self.eta_plus) {
            return Err(Error::Config(format!(
                "step sizes must satisfy eta_t < eta_p < eta_plus, got {} / {} / {}",
                self.eta_t, self.eta_p, self.eta_plus
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Warn,
    Fail,
    NotEvaluated,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub id: &'static str,
    pub status: CheckStatus,
    /// The quantity being bounded.
    pub value: f64,
    pub bound: f64,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub conditions: Vec<ConditionCheck>,
    pub sigma0: f64,
    pub sigma_max: f64,
    pub lipschitz_p: f64,
    pub s_star: usize,
    pub n_gate: usize,
}

impl ValidationReport {
    pub fn get(&self, id: &str) -> Option<&ConditionCheck> {
        self.conditions.iter().find(|c| c.id == id)
    }
}

/// `ceil((T_init³ − T_min³)/(3 η_T σ₀)) + 1`.
pub fn dwell_steps(t_init: f64, t_min: f64, eta_t: f64, sigma0: f64) -> usize {
    let x = (t_init.powi(3) - t_min.powi(3)) / (3.0 * eta_t * sigma0);
    if !x.is_finite() {
        return usize::MAX;
    }
    // Keep round-off from lifting an exact integer to the next one.
    (x * (1.0 - 1e-12)).ceil().max(0.0) as usize + 1
}

fn random_bank(rng: &mut Rng, k: usize, centre: [f64; 2], radius: f64, t: f64) -> PrototypeBank {
    let p = Matrix::from_fn(k, 2, |_, c| centre[c] + radius * rng.normal());
    PrototypeBank {
        prototypes: p,
        temperature: t,
    }
}

/// Steps of the gate iteration from a seeded start to 0.99 alignment.
pub fn gate_steps_to_align(report: &ResidualReport, eta_plus: f64, seed: u64, cap: usize) -> Result<usize> {
    let g = gate_operator(report)?;
    let mut gate = GateState::new(&mut Rng::new(seed), report.matrix.rows());
    for step in 0..cap {
        if gate.alignment(&report.plane) >= 0.99 {
            return Ok(step);
        }
        gate.step(&g, eta_plus)?;
    }
    Ok(cap)
}

/// Checks the discrete step-size conditions and reports the bounds used.
pub fn validate_step_sizes(
    s: &StepSizes,
    z: &TokenMatrix,
    sig: &DirectionalSignal,
    k_protos: usize,
    seed: u64,
) -> Result<ValidationReport> {
    let mut rng = Rng::new(seed);
    let report = residual_matrix(sig, &CapturedSubspace::empty(sig.dim()))?;
    let first = spawn_head(&report.clone_with_floor(), z, k_protos, s.t_init, &mut rng, 0, 0)?;
    let sigma0 = effective_scale(first.view(), &first.bank)?;
    let view = first.view();
    let n = view.n() as f64;
    let centre = [
        view.matrix().col(0).iter().sum::<f64>() / n,
        view.matrix().col(1).iter().sum::<f64>() / n,
    ];
    let radius = first.spread()?.max(1e-12);

    let mut sigma_max: f64 = 0.0;
    for _ in 0..32 {
        let b = random_bank(&mut rng, k_protos, centre, radius, s.t_init);
        sigma_max = sigma_max.max(effective_scale(view, &b)?);
    }

    // Lipschitz ratio of the per-token prototype gradient, the quantity the
    // update actually uses.
    let mut lipschitz_p: f64 = 0.0;
    for i in 0..64 {
        let t = if i % 2 == 0 { s.t_init } else { s.t_min };
        let a = random_bank(&mut rng, k_protos, centre, radius, t);
        let delta = Matrix::from_fn(k_protos, 2, |_, _| 1e-2 * radius * rng.normal());
        let b = PrototypeBank {
            prototypes: a.prototypes.add(&delta)?,
            temperature: t,
        };
        let ga = head_stats(view, &a)?.grad;
        let gb = head_stats(view, &b)?.grad;
        let ratio = ga.sub(&gb)?.frobenius() / (n * delta.frobenius());
        lipschitz_p = lipschitz_p.max(ratio);
    }

    let s_star = dwell_steps(s.t_init, s.t_min, s.eta_t, sigma0);
    let n_gate = gate_steps_to_align(&report, s.eta_plus, seed ^ 0x9e37_79b9, 100_000)?;

    let mut conditions = Vec::new();
    let e1_bound = s.t_min.powi(3) / (3.0 * sigma_max);
    conditions.push(ConditionCheck {
        id: "E1",
        status: if s.eta_t < e1_bound { CheckStatus::Pass } else { CheckStatus::Warn },
        value: s.eta_t,
        bound: e1_bound,
        note: "eta_t < t_min^3 / (3 sigma_max), sigma_max over 32 random banks at t_init".into(),
    });
    let e2_bound = 2.0 / lipschitz_p;
    conditions.push(ConditionCheck {
        id: "E2",
        status: if s.eta_p < e2_bound { CheckStatus::Pass } else { CheckStatus::Warn },
        value: s.eta_p,
        bound: e2_bound,
        note: "eta_p < 2 / L_P, L_P sampled over 64 random prototype pairs".into(),
    });
    conditions.push(ConditionCheck {
        id: "E3",
        status: CheckStatus::NotEvaluated,
        value: s.eta_p,
        bound: f64::NAN,
        note: "needs the curvature of the separation term along the growth direction".into(),
    });
    conditions.push(ConditionCheck {
        id: "E4",
        status: CheckStatus::Pass,
        value: s.eta_plus,
        bound: f64::NAN,
        note: "constant gate step on a finite horizon stands in for a square-summable schedule"
            .into(),
    });
    let ordered = s.eta_t < s.eta_p && s.eta_p < s.eta_plus;
    let r_tp = s.eta_t / s.eta_p;
    let r_pg = s.eta_p / s.eta_plus;
    let in_band = |r: f64| (0.01..=0.1).contains(&r);
    conditions.push(ConditionCheck {
        id: "E5",
        status: if !ordered {
            CheckStatus::Fail
        } else if in_band(r_tp) && in_band(r_pg) {
            CheckStatus::Pass
        } else {
            CheckStatus::Warn
        },
        value: r_tp.max(r_pg),
        bound: 0.1,
        note: format!("eta_t/eta_p = {r_tp}, eta_p/eta_plus = {r_pg}, both expected in [0.01, 0.1]"),
    });
    let e6_bound = n_gate.max(s_star);
    conditions.push(ConditionCheck {
        id: "E6",
        status: if s.n_min > e6_bound { CheckStatus::Pass } else { CheckStatus::Warn },
        value: s.n_min as f64,
        bound: e6_bound as f64,
        note: format!("n_min > max(N_gate = {n_gate}, s* = {s_star})"),
    });

    Ok(ValidationReport {
        conditions,
        sigma0,
        sigma_max,
        lipschitz_p,
        s_star,
        n_gate,
    })
}

impl ResidualReport {
    /// Copy usable for spawning even when the residual is exactly zero.
    fn clone_with_floor(&self) -> ResidualReport {
        let mut r = self.clone();
        if !(r.lambda_max > 0.0) {
            r.lambda_max = f64::MIN_POSITIVE;
        }
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Growth,
    Prune,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Growth => "growth",
            EventKind::Prune => "prune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventRecord {
    pub step: usize,
    pub kind: EventKind,
    pub head_id: usize,
    pub lambda_at_event: f64,
    pub free_energy_before: f64,
    pub free_energy_after: f64,
    pub coverage_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadSample {
    pub head_id: usize,
    pub temperature: f64,
    pub sigma: f64,
    pub loss: f64,
    pub f_sep: f64,
    pub spread: f64,
}

/// State at the start of one training step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_total: f64,
    pub free_energy: f64,
    pub lambda_max: f64,
    pub info_loss: f64,
    pub gate_alignment: f64,
    pub heads: Vec<HeadSample>,
}

/// Separation force along the growth direction, for one head at one trigger.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhiCheck {
    pub step: usize,
    pub head_id: usize,
    /// True for the head created by this trigger, false for heads that existed before it.
    pub spawned: bool,
    pub phi0: f64,
    pub phi1: f64,
    pub d1: f64,
    pub d2: f64,
    pub d2_lower_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneCheck {
    pub step: usize,
    pub head_id: usize,
    pub gamma: f64,
    /// Largest |ΔS(P)| over surviving heads.
    pub max_spread_change: f64,
    /// Surviving prototype coordinates compared bit for bit.
    pub survivors_identical: bool,
    pub f_total_before: f64,
    pub f_total_after: f64,
    pub f_pruned: f64,
}

impl PruneCheck {
    pub fn force_drop_rel_error(&self) -> f64 {
        let drop = self.f_total_before - self.f_total_after;
        (drop - self.f_pruned).abs() / self.f_pruned.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadSummary {
    pub id: usize,
    pub birth_lambda: f64,
    pub birth_step: usize,
    pub removed_step: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxSteps,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunTrace {
    pub steps: Vec<StepRecord>,
    pub events: Vec<EventRecord>,
    pub heads: Vec<HeadSummary>,
    #[serde(skip)]
    pub final_heads: Vec<Head>,
    pub phi_checks: Vec<PhiCheck>,
    pub prune_checks: Vec<PruneCheck>,
    pub growth_new_head_terms: Vec<[f64; 3]>,
    pub final_free_energy: FreeEnergyBreakdown,
    pub termination: Termination,
}

impl RunTrace {
    /// Birth λ of every head in creation order, the initial head included.
    pub fn growth_lambdas(&self) -> Vec<f64> {
        self.heads.iter().map(|h| h.birth_lambda).collect()
    }

    /// Temperature series of one head as (step, T).
    pub fn temperatures(&self, head_id: usize) -> Vec<(usize, f64)> {
        self.steps
            .iter()
            .filter_map(|r| {
                r.heads
                    .iter()
                    .find(|h| h.head_id == head_id)
                    .map(|h| (r.step, h.temperature))
            })
            .collect()
    }
}

/// Growth, pruning and convergence settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ControlParams {
    pub theta_w: f64,
    pub phi_g: f64,
    pub k_protos: usize,
    pub max_heads: usize,
    pub max_steps: usize,
    pub lambda_barrier: f64,
    pub prune_rule: PruneRule,
}

/// Heads, captured subspace, gate and the cached residual.
#[derive(Clone, Debug)]
pub struct ArchitectureState {
    pub heads: Vec<Head>,
    pub subspace: CapturedSubspace,
    pub step: usize,
    pub last_event_step: usize,
    pub gate: GateState,
    pub residual: ResidualReport,
    gate_op: Matrix,
    next_id: usize,
    signal_energy: f64,
}

impl ArchitectureState {
    /// One head along the full signal's dominant plane.
    pub fn initial(
        z: &TokenMatrix,
        sig: &DirectionalSignal,
        s: &StepSizes,
        k_protos: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let empty = CapturedSubspace::empty(sig.dim());
        let report = residual_matrix(sig, &empty)?;
        let plane = report.plane.clone();
        let mut head = spawn_head(&report.clone_with_floor(), z, k_protos, s.t_init, rng, 0, 0)?;
        head.birth_lambda = report.lambda_max;
        let subspace = empty.extend(&plane)?;
        let mut gate = GateState::new(rng, sig.dim());
        gate.restrict(&subspace);
        let residual = residual_matrix(sig, &subspace)?;
        let gate_op = gate_operator(&residual)?;
        Ok(Self {
            heads: vec![head],
            subspace,
            step: 0,
            last_event_step: 0,
            gate,
            residual,
            gate_op,
            next_id: 1,
            signal_energy: sig.m_tilde.frobenius_sq(),
        })
    }

    fn refresh(&mut self, sig: &DirectionalSignal) -> Result<()> {
        self.residual = residual_matrix(sig, &self.subspace)?;
        self.gate_op = gate_operator(&self.residual)?;
        self.gate.restrict(&self.subspace);
        Ok(())
    }

    pub fn info_loss(&self) -> f64 {
        if self.signal_energy == 0.0 {
            return 0.0;
        }
        (self.residual.frob_sq / self.signal_energy).sqrt().min(1.0)
    }

    pub fn head(&self, id: usize) -> Option<&Head> {
        self.heads.iter().find(|h| h.id == id)
    }
}

/// One synchronous update of every head and of the gate.
///
/// Prototypes follow the per-token loss gradient, `P ← P − (η_P/N)∇_P L_q`;
/// temperatures follow `T ← max(T − η_T σ/T², T_min)`. Returns the state
/// observed before the update.
pub fn train_step(arch: &mut ArchitectureState, s: &StepSizes, lambda_barrier: f64) -> Result<StepRecord> {
    let mut samples = Vec::with_capacity(arch.heads.len());
    let mut w = FreeEnergyBreakdown::zero(lambda_barrier);
    for head in &mut arch.heads {
        let stats = head_stats(head.view(), &head.bank)?;
        if !stats.grad.is_finite() || !stats.sigma.is_finite() || !stats.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in head {} at step {}",
                head.id, arch.step
            )));
        }
        w.add_head(stats.loss, &head.bank, s)?;
        samples.push(HeadSample {
            head_id: head.id,
            temperature: head.bank.temperature,
            sigma: stats.sigma,
            loss: stats.loss,
            f_sep: stats.f_sep,
            spread: head.spread()?,
        });
        let n = head.view().n() as f64;
        let step = stats.grad.scale(s.eta_p / n);
        head.bank.prototypes = head.bank.prototypes.sub(&step)?;
        let t = head.bank.temperature;
        head.bank.temperature = (t - s.eta_t * stats.sigma / (t * t)).max(s.t_min);
    }
    let record = StepRecord {
        step: arch.step,
        loss_total: w.loss_total,
        free_energy: w.total,
        lambda_max: arch.residual.lambda_max,
        info_loss: arch.info_loss(),
        gate_alignment: arch.gate.alignment(&arch.residual.plane),
        heads: samples,
    };
    arch.gate.step(&arch.gate_op, s.eta_plus)?;
    arch.step += 1;
    Ok(record)
}

/// Separation force of one head as the tokens expand along `u_star`.
///
/// Evaluated in the head's own coordinates: its plane, plus the part of
/// `u_star` outside the plane as a third axis on which every prototype sits at
/// exactly zero. Token components orthogonal to both do not move the
/// assignments, so dropping them leaves the curve unchanged while keeping
/// the finite differences free of the large common distance term.
pub fn phi_in_head_frame(head: &Head, z: &TokenMatrix, u_star: &[f64]) -> Result<PhiCurve> {
    let in_plane: Vec<f64> = (0..2).map(|c| dot(&head.plane.col(c), u_star)).collect();
    let mut outside = u_star.to_vec();
    for (c, a) in in_plane.iter().enumerate() {
        let b = head.plane.col(c);
        outside.iter_mut().zip(&b).for_each(|(x, bi)| *x -= a * bi);
    }
    let out_norm = norm(&outside);
    let k = head.bank.k();
    if out_norm < 1e-6 {
        // The expansion lies in the head's plane.
        let u = vec![in_plane[0] / norm(&in_plane), in_plane[1] / norm(&in_plane)];
        return phi_curve(head.view(), &head.bank, &u, &[0.0, 1.0]);
    }
    outside.iter_mut().for_each(|x| *x /= out_norm);
    if in_plane.iter().any(|a| a.abs() > 1e-6) {
        // Mixed direction: fall back to the embedding space.
        return phi_curve(z, &head.ambient_bank(), u_star, &[0.0, 1.0]);
    }
    let off: Vec<f64> = z.project(&outside);
    let view = head.view().matrix();
    let tokens = TokenMatrix::new(Matrix::from_fn(z.n(), 3, |n, c| {
        if c < 2 {
            view[(n, c)]
        } else {
            off[n]
        }
    }))?;
    let protos = Matrix::from_fn(k, 3, |r, c| if c < 2 { head.bank.prototypes[(r, c)] } else { 0.0 });
    let bank = PrototypeBank::new(protos, head.bank.temperature)?;
    phi_curve(&tokens, &bank, &[0.0, 0.0, 1.0], &[0.0, 1.0])
}

pub struct GrowthOutcome {
    pub record: EventRecord,
    pub phi_checks: Vec<PhiCheck>,
    /// Loss, barrier and potential of the new head.
    pub new_head_terms: [f64; 3],
}

/// Spawns a head along the dominant residual plane when it is strong enough.
pub fn growth_event(
    arch: &mut ArchitectureState,
    z: &TokenMatrix,
    sig: &DirectionalSignal,
    s: &StepSizes,
    ctl: &ControlParams,
    rng: &mut Rng,
) -> Result<Option<GrowthOutcome>> {
    if arch.step < arch.last_event_step + s.n_min
        || arch.heads.len() >= ctl.max_heads
        || !(arch.residual.lambda_max > ctl.theta_w)
    {
        return Ok(None);
    }
    let w_before = free_energy(&arch.heads, ctl.lambda_barrier, s)?.total;
    let u_star = arch.residual.plane.col(0);
    let mut phi_checks = Vec::new();
    for head in &arch.heads {
        let c = phi_in_head_frame(head, z, &u_star)?;
        phi_checks.push(PhiCheck {
            step: arch.step,
            head_id: head.id,
            spawned: false,
            phi0: c.values[0],
            phi1: c.values[1],
            d1: c.d1,
            d2: c.d2,
            d2_lower_bound: c.d2_lower_bound,
        });
    }

    let subspace = arch.subspace.extend(&arch.residual.plane)?;
    let mut report = arch.residual.clone();
    report.plane = subspace.plane(subspace.rank() / 2 - 1);
    let head = spawn_head(&report, z, ctl.k_protos, s.t_init, rng, arch.next_id, arch.step)?;

    let c = phi_in_head_frame(&head, z, &u_star)?;
    phi_checks.push(PhiCheck {
        step: arch.step,
        head_id: head.id,
        spawned: true,
        phi0: c.values[0],
        phi1: c.values[1],
        d1: c.d1,
        d2: c.d2,
        d2_lower_bound: c.d2_lower_bound,
    });
    let new_loss = head_stats(head.view(), &head.bank)?.loss;
    let new_terms = [
        new_loss,
        barrier(&head.bank, ctl.lambda_barrier)?,
        temperature_potential(head.bank.temperature, s.t_init, s.eta_t)?,
    ];

    let lambda = report.lambda_max;
    let id = head.id;
    arch.heads.push(head);
    arch.subspace = subspace;
    arch.next_id += 1;
    arch.last_event_step = arch.step;
    arch.refresh(sig)?;
    let w_after = free_energy(&arch.heads, ctl.lambda_barrier, s)?.total;
    Ok(Some(GrowthOutcome {
        record: EventRecord {
            step: arch.step,
            kind: EventKind::Growth,
            head_id: id,
            lambda_at_event: lambda,
            free_energy_before: w_before,
            free_energy_after: w_after,
            coverage_after: coverage(sig, &arch.subspace)?,
        },
        phi_checks,
        new_head_terms: new_terms,
    }))
}

fn total_force(heads: &[Head]) -> Result<f64> {
    heads
        .iter()
        .map(|h| Ok(head_stats(h.view(), &h.bank)?.f_sep))
        .sum()
}

/// Removes every head failing the pruning rule, weakest first.
pub fn pruning_event(
    arch: &mut ArchitectureState,
    sig: &DirectionalSignal,
    s: &StepSizes,
    phi_g: f64,
    rule: PruneRule,
    lambda_barrier: f64,
) -> Result<Vec<(EventRecord, PruneCheck)>> {
    let mut failing = Vec::new();
    for h in &arch.heads {
        if prune_check_with(h, sig, phi_g, rule)? {
            failing.push((gamma_h(h, sig)?, h.id));
        }
    }
    if failing.is_empty() {
        return Ok(Vec::new());
    }
    if failing.len() == arch.heads.len() {
        return Err(Error::PruneRefused(format!(
            "all {} heads fall below the threshold {phi_g}",
            arch.heads.len()
        )));
    }
    failing.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut out = Vec::new();
    for (gamma, id) in failing {
        let w_before = free_energy(&arch.heads, lambda_barrier, s)?.total;
        let f_before = total_force(&arch.heads)?;
        let idx = arch.heads.iter().position(|h| h.id == id).expect("failing head exists");
        let pruned = arch.heads[idx].clone();
        let f_pruned = head_stats(pruned.view(), &pruned.bank)?.f_sep;
        let survivors_before: Vec<(f64, Matrix)> = arch
            .heads
            .iter()
            .filter(|h| h.id != id)
            .map(|h| Ok((h.spread()?, h.bank.prototypes.clone())))
            .collect::<Result<_>>()?;

        arch.heads.remove(idx);
        let planes: Vec<&Matrix> = arch.heads.iter().map(|h| &h.plane).collect();
        arch.subspace = CapturedSubspace::from_planes(sig.dim(), &planes)?;
        arch.last_event_step = arch.step;
        arch.refresh(sig)?;

        let mut max_spread_change: f64 = 0.0;
        let mut identical = true;
        for (h, (spread, protos)) in arch.heads.iter().zip(&survivors_before) {
            max_spread_change = max_spread_change.max((h.spread()? - spread).abs());
            identical &= h
                .bank
                .prototypes
                .as_slice()
                .iter()
                .zip(protos.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        }
        let f_after = total_force(&arch.heads)?;
        let w_after = free_energy(&arch.heads, lambda_barrier, s)?.total;
        let record = EventRecord {
            step: arch.step,
            kind: EventKind::Prune,
            head_id: id,
            lambda_at_event: pruned.birth_lambda,
            free_energy_before: w_before,
            free_energy_after: w_after,
            coverage_after: coverage(sig, &arch.subspace)?,
        };
        let check = PruneCheck {
            step: arch.step,
            head_id: id,
            gamma,
            max_spread_change,
            survivors_identical: identical,
            f_total_before: f_before,
            f_total_after: f_after,
            f_pruned,
        };
        out.push((record, check));
    }
    Ok(out)
}

const CONVERGE_WINDOW: usize = 50;

fn losses_settled(steps: &[StepRecord]) -> bool {
    if steps.len() <= CONVERGE_WINDOW {
        return false;
    }
    let last = &steps[steps.len() - 1];
    let earlier = &steps[steps.len() - 1 - CONVERGE_WINDOW];
    if last.heads.len() != earlier.heads.len() {
        return false;
    }
    last.heads.iter().zip(&earlier.heads).all(|(a, b)| {
        a.head_id == b.head_id && (a.loss - b.loss).abs() <= 1e-8 * a.loss.abs().max(1e-300)
    })
}

/// Mutable run state for stepping a configuration by hand.
pub struct Trainer<'a> {
    pub z: &'a TokenMatrix,
    pub sig: &'a DirectionalSignal,
    pub s: StepSizes,
    pub ctl: ControlParams,
    pub arch: ArchitectureState,
    pub rng: Rng,
    trace: RunTrace,
}

impl<'a> Trainer<'a> {
    pub fn new(
        z: &'a TokenMatrix,
        sig: &'a DirectionalSignal,
        s: StepSizes,
        ctl: ControlParams,
        seed: u64,
    ) -> Result<Self> {
        s.check()?;
        if ctl.k_protos < 2 || ctl.max_heads == 0 {
            return Err(Error::Config("need k_protos ≥ 2 and max_heads ≥ 1".into()));
        }
        let mut rng = Rng::new(seed);
        let arch = ArchitectureState::initial(z, sig, &s, ctl.k_protos, &mut rng)?;
        let h0 = &arch.heads[0];
        let trace = RunTrace {
            steps: Vec::new(),
            events: Vec::new(),
            heads: vec![HeadSummary {
                id: h0.id,
                birth_lambda: h0.birth_lambda,
                birth_step: 0,
                removed_step: None,
            }],
            final_heads: Vec::new(),
            phi_checks: Vec::new(),
            prune_checks: Vec::new(),
            growth_new_head_terms: Vec::new(),
            final_free_energy: FreeEnergyBreakdown::zero(ctl.lambda_barrier),
            termination: Termination::MaxSteps,
        };
        Ok(Self {
            z,
            sig,
            s,
            ctl,
            arch,
            rng,
            trace,
        })
    }

    /// One training step followed by the growth and pruning checks.
    pub fn step(&mut self) -> Result<()> {
        let rec = train_step(&mut self.arch, &self.s, self.ctl.lambda_barrier)?;
        self.trace.steps.push(rec);
        if let Some(g) = growth_event(&mut self.arch, self.z, self.sig, &self.s, &self.ctl, &mut self.rng)? {
            let head = self.arch.heads.last().expect("growth adds a head");
            self.trace.heads.push(HeadSummary {
                id: head.id,
                birth_lambda: head.birth_lambda,
                birth_step: head.birth_step,
                removed_step: None,
            });
            self.trace.events.push(g.record);
            self.trace.phi_checks.extend(g.phi_checks);
            self.trace.growth_new_head_terms.push(g.new_head_terms);
        }
        if self.arch.step >= self.arch.last_event_step + self.s.n_min && self.arch.heads.len() >= 2 {
            self.prune(self.ctl.phi_g)?;
        }
        Ok(())
    }

    /// One training step with no growth or pruning checks.
    pub fn train_only(&mut self) -> Result<()> {
        let rec = train_step(&mut self.arch, &self.s, self.ctl.lambda_barrier)?;
        self.trace.steps.push(rec);
        Ok(())
    }

    /// Steps until convergence or `max_steps`.
    pub fn run_to_convergence(&mut self) -> Result<Termination> {
        while self.arch.step < self.ctl.max_steps {
            self.step()?;
            if self.converged() {
                self.trace.termination = Termination::Converged;
                return Ok(Termination::Converged);
            }
        }
        self.trace.termination = Termination::MaxSteps;
        Ok(Termination::MaxSteps)
    }

    /// Applies a pruning event with an explicit threshold.
    pub fn prune(&mut self, phi_g: f64) -> Result<usize> {
        let out = pruning_event(
            &mut self.arch,
            self.sig,
            &self.s,
            phi_g,
            self.ctl.prune_rule,
            self.ctl.lambda_barrier,
        )?;
        let count = out.len();
        for (rec, check) in out {
            if let Some(h) = self.trace.heads.iter_mut().find(|h| h.id == rec.head_id) {
                h.removed_step = Some(rec.step);
            }
            self.trace.events.push(rec);
            self.trace.prune_checks.push(check);
        }
        Ok(count)
    }

    pub fn converged(&self) -> bool {
        let quiet = self.arch.step >= self.arch.last_event_step + 4 * self.s.n_min;
        let saturated = self.arch.heads.len() >= self.ctl.max_heads
            || !(self.arch.residual.lambda_max > self.ctl.theta_w);
        quiet && saturated && losses_settled(&self.trace.steps)
    }

    pub fn trace(&self) -> &RunTrace {
        &self.trace
    }

    pub fn finish(mut self) -> Result<RunTrace> {
        self.trace.final_free_energy = free_energy(&self.arch.heads, self.ctl.lambda_barrier, &self.s)?;
        self.trace.final_heads = self.arch.heads.clone();
        Ok(self.trace)
    }
}

/// Trains until convergence or `max_steps`.
pub fn run(
    z: &TokenMatrix,
    sig: &DirectionalSignal,
    s: StepSizes,
    ctl: ControlParams,
    seed: u64,
) -> Result<RunTrace> {
    let mut t = Trainer::new(z, sig, s, ctl, seed)?;
    t.run_to_convergence()?;
    t.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadClasses {
    pub local: Vec<usize>,
    pub global: Vec<usize>,
    /// First recorded step at which each surviving head sat at `t_min`.
    pub first_reach: Vec<(usize, Option<usize>)>,
}

/// Splits surviving heads by whether their final temperature is `t_min`.
pub fn classify_heads(trace: &RunTrace, t_min: f64) -> HeadClasses {
    let mut local = Vec::new();
    let mut global = Vec::new();
    let mut first_reach = Vec::new();
    for h in &trace.final_heads {
        if (h.bank.temperature - t_min).abs() <= 1e-9 {
            local.push(h.id);
        } else {
            global.push(h.id);
        }
        let reach = trace
            .temperatures(h.id)
            .into_iter()
            .find(|(_, t)| (t - t_min).abs() <= 1e-9)
            .map(|(step, _)| step)
            .or_else(|| ((h.bank.temperature - t_min).abs() <= 1e-9).then_some(trace.steps.len()));
        first_reach.push((h.id, reach));
    }
    HeadClasses {
        local,
        global,
        first_reach,
    }
}

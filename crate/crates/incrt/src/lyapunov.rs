//! Piecewise free energy and its monotonicity audit.

use serde::Serialize;

use crate::ddcl::{loss_lq, PrototypeBank};
use crate::dynamics::{EventKind, RunTrace, StepSizes};
use crate::error::{param, Error, Result};
use crate::incrt::Head;

/// `Φ(T) = (T_init³ − T³) / (3 η_T)`.
pub fn temperature_potential(t: f64, t_init: f64, eta_t: f64) -> Result<f64> {
    if t > t_init {
        return Err(param(format!("temperature {t} exceeds the initial value {t_init}")));
    }
    if !(eta_t > 0.0) {
        return Err(param("eta_t must be positive"));
    }
    Ok((t_init.powi(3) - t.powi(3)) / (3.0 * eta_t))
}

/// `(λ/2) Σ_{k≠k'} ‖p_k − p_k'‖⁻²` over ordered pairs.
pub fn barrier(bank: &PrototypeBank, lambda_barrier: f64) -> Result<f64> {
    let p = &bank.prototypes;
    let mut acc = 0.0;
    for i in 0..bank.k() {
        for j in 0..bank.k() {
            if i == j {
                continue;
            }
            let d2: f64 = p
                .row(i)
                .iter()
                .zip(p.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2 == 0.0 {
                return Err(Error::Collapse(format!("prototypes {i} and {j} coincide")));
            }
            acc += 1.0 / d2;
        }
    }
    Ok(0.5 * lambda_barrier * acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FreeEnergyBreakdown {
    pub loss_total: f64,
    pub barrier: f64,
    pub temp_potential: f64,
    pub total: f64,
    pub lambda_barrier: f64,
}

impl FreeEnergyBreakdown {
    pub fn zero(lambda_barrier: f64) -> Self {
        Self {
            loss_total: 0.0,
            barrier: 0.0,
            temp_potential: 0.0,
            total: 0.0,
            lambda_barrier,
        }
    }

    /// Adds one head's terms given its loss.
    pub fn add_head(&mut self, loss: f64, bank: &PrototypeBank, s: &StepSizes) -> Result<()> {
        self.loss_total += loss;
        self.barrier += barrier(bank, self.lambda_barrier)?;
        self.temp_potential += temperature_potential(bank.temperature, s.t_init, s.eta_t)?;
        self.total = self.loss_total + self.barrier + self.temp_potential;
        Ok(())
    }
}

/// Free energy of the heads, each evaluated on its own plane view.
pub fn free_energy(heads: &[Head], lambda_barrier: f64, s: &StepSizes) -> Result<FreeEnergyBreakdown> {
    let mut w = FreeEnergyBreakdown::zero(lambda_barrier);
    for h in heads {
        w.add_head(loss_lq(h.view(), &h.bank)?, &h.bank, s)?;
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    /// `λ > 2 η_P C(K, 2)`.
    pub f1_holds: bool,
    pub f1_bound: f64,
    /// Largest `(W_{t+1} − W_t)/|W_t|` over training steps.
    pub max_step_increase: f64,
    pub worst_step: Option<usize>,
    pub max_growth_jump: f64,
    pub max_prune_jump: f64,
    pub w_start: f64,
    pub w_end: f64,
    /// Loss, barrier and potential the newest head contributed at each growth.
    pub growth_new_head_terms: Vec<[f64; 3]>,
    pub min_spread: f64,
    pub imminent_collapse: bool,
    pub steps_pass: bool,
    pub events_pass: bool,
    pub end_pass: bool,
    pub pass: bool,
}

pub const AUDIT_TOL: f64 = 1e-8;

fn relative(delta: f64, base: f64) -> f64 {
    delta / base.abs().max(f64::MIN_POSITIVE)
}

/// Checks that the free energy never rises on dwell intervals or at events.
pub fn audit_monotone(
    trace: &RunTrace,
    lambda_barrier: f64,
    s: &StepSizes,
    k_max: usize,
) -> AuditReport {
    let pairs = (k_max * k_max.saturating_sub(1) / 2) as f64;
    let f1_bound = 2.0 * s.eta_p * pairs;

    let mut max_step = f64::NEG_INFINITY;
    let mut worst_step = None;
    for (i, rec) in trace.steps.iter().enumerate() {
        let next = trace
            .events
            .iter()
            .find(|e| e.step == rec.step + 1)
            .map(|e| e.free_energy_before)
            .or_else(|| trace.steps.get(i + 1).map(|r| r.free_energy))
            .unwrap_or(trace.final_free_energy.total);
        let inc = relative(next - rec.free_energy, rec.free_energy);
        if inc > max_step {
            max_step = inc;
            worst_step = Some(rec.step);
        }
    }
    if trace.steps.is_empty() {
        max_step = 0.0;
    }

    let jump = |kind: EventKind| {
        trace
            .events
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| relative(e.free_energy_after - e.free_energy_before, e.free_energy_before))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    // No events of a kind means no jump to report.
    let or_zero = |x: f64| if x == f64::NEG_INFINITY { 0.0 } else { x };
    let max_growth_jump = or_zero(jump(EventKind::Growth));
    let max_prune_jump = or_zero(jump(EventKind::Prune));

    let w_start = trace.steps.first().map_or(trace.final_free_energy.total, |r| r.free_energy);
    let w_end = trace.final_free_energy.total;
    let min_spread = trace
        .steps
        .iter()
        .flat_map(|r| r.heads.iter().map(|h| h.spread))
        .fold(f64::INFINITY, f64::min);

    let steps_pass = max_step <= AUDIT_TOL;
    let events_pass = max_growth_jump <= AUDIT_TOL && max_prune_jump <= AUDIT_TOL;
    let end_pass = w_end <= w_start + AUDIT_TOL * w_start.abs();
    let f1_holds = lambda_barrier > f1_bound;
    AuditReport {
        f1_holds,
        f1_bound,
        max_step_increase: max_step,
        worst_step,
        max_growth_jump,
        max_prune_jump,
        w_start,
        w_end,
        growth_new_head_terms: trace.growth_new_head_terms.clone(),
        min_spread,
        imminent_collapse: min_spread < 1e-6,
        steps_pass,
        events_pass,
        end_pass,
        pass: steps_pass && events_pass && end_pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn sizes() -> StepSizes {
        StepSizes {
            eta_t: 0.01,
            eta_p: 0.1,
            eta_plus: 1.0,
            n_min: 10,
            t_min: 0.1,
            t_init: 1.0,
        }
    }

    #[test]
    fn potential_examples() {
        assert_eq!(temperature_potential(1.0, 1.0, 0.01).unwrap(), 0.0);
        let phi = temperature_potential(0.1, 1.0, 0.01).unwrap();
        assert!((phi - 0.999 / 0.03).abs() < 1e-12);
        assert!((phi - 33.3).abs() < 1e-9);
        assert!(matches!(temperature_potential(1.5, 1.0, 0.01), Err(Error::Parameter(_))));
        let grid: Vec<f64> = (0..=20).map(|i| 0.1 + 0.045 * i as f64).collect();
        let vals: Vec<f64> = grid
            .iter()
            .map(|t| temperature_potential(*t, 1.0, 0.01).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn barrier_counts_ordered_pairs() {
        let b = PrototypeBank::new(Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap(), 1.0)
            .unwrap();
        assert_eq!(barrier(&b, 1.0).unwrap(), 0.25);
        let c = PrototypeBank::new(Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap(), 1.0)
            .unwrap();
        assert!(matches!(barrier(&c, 1.0), Err(Error::Collapse(_))));
    }

    #[test]
    fn breakdown_total_is_sum_of_parts() {
        let b = PrototypeBank::new(
            Matrix::from_rows(&[vec![0.0, 1.0], vec![1.5, -0.5], vec![-1.0, 0.2]]).unwrap(),
            0.4,
        )
        .unwrap();
        let mut w = FreeEnergyBreakdown::zero(2.0);
        w.add_head(12.5, &b, &sizes()).unwrap();
        w.add_head(3.25, &b.with_temperature(1.0), &sizes()).unwrap();
        assert!((w.total - (w.loss_total + w.barrier + w.temp_potential)).abs() < 1e-12 * w.total);
        let mut fresh = FreeEnergyBreakdown::zero(1.0);
        fresh.add_head(1.0, &b.with_temperature(1.0), &sizes()).unwrap();
        assert_eq!(fresh.temp_potential, 0.0);
    }
}

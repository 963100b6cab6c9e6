//! Fixed random-basis MLP comparator for the directional information loss.
//!
//! Only the row directions of the first weight matrix matter for the metric,
//! so the nonlinearity and the second layer are left out.

use serde::Serialize;

use crate::error::{param, shape, Error, Result};
use crate::incrt::{directional_info_loss, residual_matrix, CapturedSubspace, DirectionalSignal};
use crate::numerics::{dot, gram_schmidt_extend, norm, Matrix, Rng};

#[derive(Clone, Debug)]
pub struct RandomMlpBasis {
    /// d_ff×d, entries N(0, σ²/d).
    pub w1: Matrix,
    pub sigma_sq: f64,
}

impl RandomMlpBasis {
    pub fn new(dim: usize, d_ff: usize, sigma_sq: f64, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || d_ff == 0 {
            return Err(shape("basis needs positive dimensions"));
        }
        if !(sigma_sq > 0.0) || !sigma_sq.is_finite() {
            return Err(param(format!("sigma_sq must be positive, got {sigma_sq}")));
        }
        let sd = (sigma_sq / dim as f64).sqrt();
        let w1 = rng.normal_matrix(d_ff, dim).scale(sd);
        Ok(Self { w1, sigma_sq })
    }

    /// The usual width, `d_ff = 4d`.
    pub fn standard(dim: usize, sigma_sq: f64, rng: &mut Rng) -> Result<Self> {
        Self::new(dim, 4 * dim, sigma_sq, rng)
    }

    pub fn from_rows(w1: Matrix, sigma_sq: f64) -> Result<Self> {
        if w1.rows() == 0 || !w1.is_finite() {
            return Err(shape("basis rows must be present and finite"));
        }
        Ok(Self { w1, sigma_sq })
    }

    pub fn d_ff(&self) -> usize {
        self.w1.rows()
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    fn unit_row(&self, i: usize) -> Option<Vec<f64>> {
        let w = self.w1.row(i);
        let n = norm(w);
        (n > 0.0).then(|| w.iter().map(|x| x / n).collect())
    }
}

/// `max_i ⟨v, w_i/‖w_i‖⟩²`.
pub fn mlp_alignment(basis: &RandomMlpBasis, v: &[f64]) -> Result<f64> {
    if v.len() != basis.dim() {
        return Err(shape("direction and basis dimensions differ"));
    }
    if (norm(v) - 1.0).abs() > 1e-9 {
        return Err(param("direction must be a unit vector"));
    }
    Ok((0..basis.d_ff())
        .filter_map(|i| basis.unit_row(i))
        .map(|w| dot(&w, v).powi(2))
        .fold(0.0, f64::max)
        .min(1.0))
}

/// Subspace of rank `r` picked greedily along the residual's dominant planes.
///
/// When the residual vanishes before rank `r` the remaining directions are
/// filled from the coordinate axes; they carry no signal either way.
pub fn greedy_plane_capture(sig: &DirectionalSignal, r: usize) -> Result<CapturedSubspace> {
    let d = sig.dim();
    if r > d {
        return Err(param(format!("rank {r} exceeds dimension {d}")));
    }
    let scale = sig.m_tilde.frobenius();
    let mut sub = CapturedSubspace::empty(d);
    while sub.rank() < r {
        let res = residual_matrix(sig, &sub)?;
        if res.lambda_max <= 1e-12 * scale {
            break;
        }
        let take = (r - sub.rank()).min(2);
        sub = sub.extend(&res.plane.col_range(0, take))?;
    }
    let mut axis = 0;
    while sub.rank() < r && axis < d {
        let e = Matrix::from_fn(d, 1, |i, _| if i == axis { 1.0 } else { 0.0 });
        if norm(&sub.project_out(&e.col(0))) > 1e-6 {
            sub = sub.extend(&e)?;
        }
        axis += 1;
    }
    Ok(sub)
}

/// The MLP's best case at rank `r`: its `r` rows most aligned with the
/// signal's leading planes, orthonormalised.
pub fn mlp_captured_subspace(
    basis: &RandomMlpBasis,
    sig: &DirectionalSignal,
    r: usize,
) -> Result<CapturedSubspace> {
    let d = basis.dim();
    if sig.dim() != d {
        return Err(shape("basis and signal dimensions differ"));
    }
    if r > d {
        return Err(param(format!("rank {r} exceeds dimension {d}")));
    }
    if r == 0 {
        return Ok(CapturedSubspace::empty(d));
    }
    let planes = greedy_plane_capture(sig, (2 * r.div_ceil(2)).min(d))?;
    let q = planes.basis();
    let mut scored: Vec<(f64, usize)> = (0..basis.d_ff())
        .filter_map(|i| basis.unit_row(i).map(|w| (i, w)))
        .map(|(i, w)| {
            let s: f64 = (0..q.cols()).map(|c| dot(&q.col(c), &w).powi(2)).sum();
            (s, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    if scored.len() < r {
        return Err(Error::Degenerate(format!(
            "only {} usable rows for rank {r}",
            scored.len()
        )));
    }
    let picked = Matrix::from_fn(d, r, |row, c| basis.w1[(scored[c].1, row)]);
    let cols = gram_schmidt_extend(&Matrix::zeros(d, 0), &picked)?;
    CapturedSubspace::empty(d).extend(&cols)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trial {
    pub seed: u64,
    pub i_ddcl: f64,
    pub i_mlp: f64,
    pub gain: f64,
    /// `λ_max² / ‖M̃‖_F² · (1 − max_i ⟨v₁, ŵ_i⟩²)`.
    pub gain_bound: f64,
    pub max_alignment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub rank: usize,
    pub trials: Vec<Trial>,
    /// Trials with `I_DDCL < I_MLP`.
    pub wins: usize,
    pub ties: usize,
    pub bound_violations: usize,
    /// Zero signal: nothing to compare.
    pub degenerate: bool,
}

impl ComparisonReport {
    pub fn win_rate(&self) -> f64 {
        if self.trials.is_empty() {
            0.0
        } else {
            self.wins as f64 / self.trials.len() as f64
        }
    }

    pub fn bounds_met(&self) -> bool {
        self.bound_violations == 0
    }
}

pub const GAIN_TOL: f64 = 1e-9;

/// Paired trials: greedy plane capture against a fresh random basis per seed.
pub fn compare_info_loss(
    sig: &DirectionalSignal,
    seeds: impl IntoIterator<Item = u64>,
    rank: usize,
    sigma_sq: f64,
) -> Result<ComparisonReport> {
    let d = sig.dim();
    let total = sig.m_tilde.frobenius_sq();
    let mut report = ComparisonReport {
        rank,
        trials: Vec::new(),
        wins: 0,
        ties: 0,
        bound_violations: 0,
        degenerate: total == 0.0,
    };
    if report.degenerate {
        return Ok(report);
    }
    let top = residual_matrix(sig, &CapturedSubspace::empty(d))?;
    let v1 = top.plane.col(0);
    let base = top.lambda_max * top.lambda_max / total;
    let i_ddcl = directional_info_loss(sig, &greedy_plane_capture(sig, rank)?)?;

    for seed in seeds {
        let mut rng = Rng::new(seed);
        let basis = RandomMlpBasis::standard(d, sigma_sq, &mut rng)?;
        let i_mlp = directional_info_loss(sig, &mlp_captured_subspace(&basis, sig, rank)?)?;
        let align = mlp_alignment(&basis, &v1)?;
        let trial = Trial {
            seed,
            i_ddcl,
            i_mlp,
            gain: i_mlp - i_ddcl,
            gain_bound: base * (1.0 - align),
            max_alignment: align,
        };
        if trial.i_ddcl < trial.i_mlp {
            report.wins += 1;
        } else if trial.i_ddcl == trial.i_mlp {
            report.ties += 1;
        }
        if trial.gain < trial.gain_bound - GAIN_TOL {
            report.bound_violations += 1;
        }
        report.trials.push(trial);
    }
    Ok(report)
}

/// Monte-Carlo mean of the best-row alignment with a fixed random direction.
pub fn mean_alignment(dim: usize, seeds: impl IntoIterator<Item = u64>) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for seed in seeds {
        let mut rng = Rng::new(seed);
        let basis = RandomMlpBasis::standard(dim, 1.0, &mut rng)?;
        let v = rng.unit_vector(dim);
        acc += mlp_alignment(&basis, &v)?;
        count += 1;
    }
    if count == 0 {
        return Err(param("need at least one seed"));
    }
    Ok(acc / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks(d: usize, mags: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(d, d);
        for (k, l) in mags.iter().enumerate() {
            m[(2 * k, 2 * k + 1)] = *l;
            m[(2 * k + 1, 2 * k)] = -*l;
        }
        m
    }

    fn signal(d: usize, mags: &[f64]) -> DirectionalSignal {
        DirectionalSignal::from_parts(blocks(d, mags), Matrix::identity(d)).unwrap()
    }

    #[test]
    fn alignment_extremes() {
        let w = Matrix::from_rows(&[vec![0.0, 2.0, 0.0], vec![1.0, 1.0, 0.0]]).unwrap();
        let b = RandomMlpBasis::from_rows(w, 1.0).unwrap();
        assert!((mlp_alignment(&b, &[0.0, 1.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(mlp_alignment(&b, &[0.0, 0.0, 1.0]).unwrap(), 0.0);
        assert!(mlp_alignment(&b, &[0.0, 0.0, 2.0]).is_err());
    }

    #[test]
    fn rank_zero_and_full() {
        let sig = signal(6, &[2.0, 1.0, 0.5]);
        let mut rng = Rng::new(3);
        let b = RandomMlpBasis::standard(6, 1.0, &mut rng).unwrap();
        assert_eq!(mlp_captured_subspace(&b, &sig, 0).unwrap().rank(), 0);
        let full = mlp_captured_subspace(&b, &sig, 6).unwrap();
        assert!(directional_info_loss(&sig, &full).unwrap() < 1e-7);
        let rep = compare_info_loss(&sig, 0..5, 6, 1.0).unwrap();
        assert!(rep.trials.iter().all(|t| t.i_ddcl < 1e-7 && t.i_mlp < 1e-7));
    }

    #[test]
    fn zero_signal_is_flagged() {
        let sig = signal(4, &[]);
        let rep = compare_info_loss(&sig, 0..3, 2, 1.0).unwrap();
        assert!(rep.degenerate);
        assert!(rep.trials.is_empty());
    }

    #[test]
    fn greedy_capture_takes_top_plane() {
        let sig = signal(6, &[2.0, 1.0, 0.5]);
        let sub = greedy_plane_capture(&sig, 2).unwrap();
        let i = directional_info_loss(&sig, &sub).unwrap();
        // Energy left: 2(1² + 0.5²) out of 2(4 + 1 + 0.25).
        assert!((i * i - 2.5 / 10.5).abs() < 1e-12);
    }

    #[test]
    fn width_defaults_to_four_d() {
        let mut rng = Rng::new(0);
        let b = RandomMlpBasis::standard(8, 2.0, &mut rng).unwrap();
        assert_eq!((b.d_ff(), b.dim()), (32, 8));
    }
}

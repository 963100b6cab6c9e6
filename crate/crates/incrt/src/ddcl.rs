//! The prototype layer: soft assignments, the loss and its exact split,
//! analytic gradients, and the separation-force diagnostics.

use crate::error::{param, shape, Error, Result};
use crate::numerics::{dot, norm, Matrix};

/// N token embeddings, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix(Matrix);

impl TokenMatrix {
    pub fn new(z: Matrix) -> Result<Self> {
        if z.rows() == 0 || z.cols() == 0 {
            return Err(shape("token matrix must be non-empty"));
        }
        if !z.is_finite() {
            return Err(Error::Numeric("non-finite token entry".into()));
        }
        Ok(Self(z))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    /// Projections `⟨z_n, u⟩`.
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|n| dot(self.0.row(n), u)).collect()
    }

    /// Tokens moved along `u` by `eps·⟨z_n,u⟩`, the expansion used in `phi_curve`.
    pub fn expanded(&self, u: &[f64], alpha: &[f64], eps: f64) -> TokenMatrix {
        let mut z = self.0.clone();
        for (n, a) in alpha.iter().enumerate() {
            for (x, ui) in z.row_mut(n).iter_mut().zip(u) {
                *x += eps * a * ui;
            }
        }
        TokenMatrix(z)
    }
}

/// K prototypes with a shared temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub prototypes: Matrix,
    pub temperature: f64,
}

impl PrototypeBank {
    pub fn new(prototypes: Matrix, temperature: f64) -> Result<Self> {
        if prototypes.rows() == 0 {
            return Err(shape("a bank needs at least one prototype"));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(param(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self {
            prototypes,
            temperature,
        })
    }

    pub fn k(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn with_temperature(&self, t: f64) -> Self {
        Self {
            prototypes: self.prototypes.clone(),
            temperature: t,
        }
    }
}

/// Row-stochastic N×K weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix(Matrix);

impl AssignmentMatrix {
    /// Wraps `q` after checking every row is a probability vector.
    pub fn new(q: Matrix) -> Result<Self> {
        for n in 0..q.rows() {
            let row = q.row(n);
            let s: f64 = row.iter().sum();
            if row.iter().any(|x| *x < 0.0) || (s - 1.0).abs() > 1e-12 {
                return Err(param(format!("assignment row {n} is not a probability vector")));
            }
        }
        Ok(Self(q))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn k(&self) -> usize {
        self.0.cols()
    }
}

fn check_dims(z: &TokenMatrix, bank: &PrototypeBank) -> Result<()> {
    if z.dim() != bank.dim() {
        return Err(shape(format!(
            "tokens have dimension {}, prototypes {}",
            z.dim(),
            bank.dim()
        )));
    }
    Ok(())
}

/// N×K squared distances `‖z_n − p_k‖²`.
pub fn squared_distances(z: &TokenMatrix, bank: &PrototypeBank) -> Result<Matrix> {
    check_dims(z, bank)?;
    let p = &bank.prototypes;
    Ok(Matrix::from_fn(z.n(), bank.k(), |n, k| {
        z.matrix()
            .row(n)
            .iter()
            .zip(p.row(k))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }))
}

/// N×K `‖p_k‖² − 2⟨z_n, p_k⟩`, the squared distances less the per-token
/// constant `‖z_n‖²`. Assignments and distance variances only depend on
/// these, and they are unaffected by token components orthogonal to every
/// prototype.
pub fn shifted_distances(z: &TokenMatrix, bank: &PrototypeBank) -> Result<Matrix> {
    check_dims(z, bank)?;
    let p = &bank.prototypes;
    let norms: Vec<f64> = (0..bank.k()).map(|k| dot(p.row(k), p.row(k))).collect();
    Ok(Matrix::from_fn(z.n(), bank.k(), |n, k| {
        norms[k] - 2.0 * dot(z.matrix().row(n), p.row(k))
    }))
}

fn softmax_rows(dist: &Matrix, t: f64) -> Matrix {
    let (n_rows, k) = dist.shape();
    let mut q = Matrix::zeros(n_rows, k);
    for n in 0..n_rows {
        let d = dist.row(n);
        let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let row = q.row_mut(n);
        let mut s = 0.0;
        for (qk, dk) in row.iter_mut().zip(d) {
            *qk = (-(dk - dmin) / t).exp();
            s += *qk;
        }
        row.iter_mut().for_each(|x| *x /= s);
    }
    q
}

/// Softmax over negative squared distances divided by the temperature.
pub fn soft_assign(z: &TokenMatrix, bank: &PrototypeBank) -> Result<AssignmentMatrix> {
    if !(bank.temperature > 0.0) {
        return Err(param("temperature must be positive"));
    }
    let g = shifted_distances(z, bank)?;
    Ok(AssignmentMatrix(softmax_rows(&g, bank.temperature)))
}

/// `μ_n = Σ_k q_nk p_k`.
pub fn soft_centroids(q: &AssignmentMatrix, bank: &PrototypeBank) -> Result<Matrix> {
    if q.k() != bank.k() {
        return Err(shape(format!(
            "assignments have {} columns, bank has {} prototypes",
            q.k(),
            bank.k()
        )));
    }
    q.matrix().matmul(&bank.prototypes)
}

/// Weighted mean and variance of `values` under `weights`.
fn weighted_moments(weights: &[f64], values: &[f64]) -> (f64, f64) {
    let mean = dot(weights, values);
    let var = weights
        .iter()
        .zip(values)
        .map(|(w, v)| w * (v - mean) * (v - mean))
        .sum();
    (mean, var)
}

/// `Σ_n Σ_k q_nk ‖z_n − p_k‖²`.
pub fn loss_lq(z: &TokenMatrix, bank: &PrototypeBank) -> Result<f64> {
    let d = squared_distances(z, bank)?;
    let q = softmax_rows(&shifted_distances(z, bank)?, bank.temperature);
    Ok(q.as_slice().iter().zip(d.as_slice()).map(|(a, b)| a * b).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossDecomposition {
    /// `Σ_n ‖z_n − μ_n‖²`.
    pub l_fit: f64,
    /// `Σ_n Σ_k q_nk ‖p_k − μ_n‖²`.
    pub v_sep: f64,
    /// `Σ_n min_k ‖z_n − p_k‖²`.
    pub l_ols: f64,
}

pub fn loss_decomposition(z: &TokenMatrix, bank: &PrototypeBank) -> Result<LossDecomposition> {
    let d = squared_distances(z, bank)?;
    let q = AssignmentMatrix(softmax_rows(&shifted_distances(z, bank)?, bank.temperature));
    let mu = soft_centroids(&q, bank)?;
    let mut l_fit = 0.0;
    let mut v_sep = 0.0;
    let mut l_ols = 0.0;
    for n in 0..z.n() {
        let mu_n = mu.row(n);
        l_fit += z
            .matrix()
            .row(n)
            .iter()
            .zip(mu_n)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        for k in 0..bank.k() {
            let gap: f64 = bank
                .prototypes
                .row(k)
                .iter()
                .zip(mu_n)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            v_sep += q.matrix()[(n, k)] * gap;
        }
        l_ols += d.row(n).iter().cloned().fold(f64::INFINITY, f64::min);
    }
    Ok(LossDecomposition {
        l_fit,
        v_sep,
        l_ols,
    })
}

/// `Σ_q = Σ_n (diag q_n − q_n q_nᵀ)`.
pub fn sigma_q(q: &AssignmentMatrix) -> Matrix {
    let k = q.k();
    let mut s = Matrix::zeros(k, k);
    for n in 0..q.n() {
        let row = q.matrix().row(n);
        for i in 0..k {
            s[(i, i)] += row[i];
            for j in 0..k {
                s[(i, j)] -= row[i] * row[j];
            }
        }
    }
    s
}

/// Total Gini diversity `Σ_n Σ_k q_nk (1 − q_nk)`.
pub fn gini_sum(q: &AssignmentMatrix) -> f64 {
    q.matrix().as_slice().iter().map(|x| x * (1.0 - x)).sum()
}

/// Everything one training step needs from a head, from a single pass.
#[derive(Clone, Debug)]
pub struct HeadStats {
    pub loss: f64,
    pub sigma: f64,
    pub f_sep: f64,
    /// Gradient of `loss` with respect to the prototypes.
    pub grad: Matrix,
    /// Gradient of `loss` with respect to the temperature.
    pub grad_t: f64,
}

pub fn head_stats(z: &TokenMatrix, bank: &PrototypeBank) -> Result<HeadStats> {
    let d = squared_distances(z, bank)?;
    let g = shifted_distances(z, bank)?;
    let t = bank.temperature;
    let q = softmax_rows(&g, t);
    let (k, dim) = (bank.k(), bank.dim());
    let p = &bank.prototypes;
    let mut loss = 0.0;
    let mut var_sum = 0.0;
    let mut grad = Matrix::zeros(k, dim);
    let mut resid = Matrix::zeros(k, dim);
    let mut mu = vec![0.0; dim];
    for n in 0..z.n() {
        let (qn, dn, gn, zn) = (q.row(n), d.row(n), g.row(n), z.matrix().row(n));
        let (gbar, var) = weighted_moments(qn, gn);
        loss += dot(qn, dn);
        var_sum += var;
        mu.iter_mut().for_each(|x| *x = 0.0);
        for kk in 0..k {
            for (m, pk) in mu.iter_mut().zip(p.row(kk)) {
                *m += qn[kk] * pk;
            }
        }
        for kk in 0..k {
            let coef = 2.0 * qn[kk] * (1.0 - (gn[kk] - gbar) / t);
            let pk = p.row(kk);
            let g = grad.row_mut(kk);
            for i in 0..dim {
                g[i] += coef * (pk[i] - zn[i]);
            }
            let r = resid.row_mut(kk);
            for i in 0..dim {
                r[i] += qn[kk] * (pk[i] - mu[i]);
            }
        }
    }
    let f_sep = 4.0 * resid.frobenius_sq();
    Ok(HeadStats {
        loss,
        sigma: var_sum / z.n() as f64,
        f_sep,
        grad,
        grad_t: var_sum / (t * t),
    })
}

/// Analytic gradient of `loss_lq` in the prototype coordinates, softmax
/// dependence included:
/// `∂L/∂p_k = Σ_n 2 q_nk [1 − (d_nk − d̄_n)/T] (p_k − z_n)`.
pub fn grad_prototypes(z: &TokenMatrix, bank: &PrototypeBank) -> Result<Matrix> {
    Ok(head_stats(z, bank)?.grad)
}

/// `2·Σ_q·P`, the gradient of the separation term with the assignments frozen.
pub fn grad_v(bank: &PrototypeBank, sq: &Matrix) -> Result<Matrix> {
    if sq.shape() != (bank.k(), bank.k()) {
        return Err(shape("Σ_q must be K×K"));
    }
    Ok(sq.matmul(&bank.prototypes)?.scale(2.0))
}

/// Rows `r_k = Σ_n q_nk (p_k − μ_n)`.
pub fn residual_vectors(z: &TokenMatrix, bank: &PrototypeBank) -> Result<Matrix> {
    let q = soft_assign(z, bank)?;
    let mu = soft_centroids(&q, bank)?;
    let mut r = Matrix::zeros(bank.k(), bank.dim());
    for n in 0..z.n() {
        for k in 0..bank.k() {
            let w = q.matrix()[(n, k)];
            let pk = bank.prototypes.row(k);
            for (i, x) in r.row_mut(k).iter_mut().enumerate() {
                *x += w * (pk[i] - mu[(n, i)]);
            }
        }
    }
    Ok(r)
}

/// `F_sep = 4·Σ_k ‖r_k‖²`.
pub fn separation_force(z: &TokenMatrix, bank: &PrototypeBank) -> Result<f64> {
    Ok(4.0 * residual_vectors(z, bank)?.frobenius_sq())
}

/// Minimum pairwise prototype distance.
pub fn prototype_spread(bank: &PrototypeBank) -> Result<f64> {
    if bank.k() < 2 {
        return Err(param("prototype spread needs at least two prototypes"));
    }
    let p = &bank.prototypes;
    let mut best = f64::INFINITY;
    for i in 0..bank.k() {
        for j in i + 1..bank.k() {
            let d: f64 = p
                .row(i)
                .iter()
                .zip(p.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    Ok(best)
}

/// Per-token q-weighted variances of the squared distances.
fn distance_variances(z: &TokenMatrix, bank: &PrototypeBank) -> Result<Vec<f64>> {
    let g = shifted_distances(z, bank)?;
    let q = softmax_rows(&g, bank.temperature);
    Ok((0..z.n())
        .map(|n| weighted_moments(q.row(n), g.row(n)).1)
        .collect())
}

/// `σ = (1/N) Σ_n Var_{q_n}[‖z_n − p_k‖²]`.
pub fn effective_scale(z: &TokenMatrix, bank: &PrototypeBank) -> Result<f64> {
    let v = distance_variances(z, bank)?;
    Ok(v.iter().sum::<f64>() / z.n() as f64)
}

/// `∂L_q/∂T = (1/T²) Σ_n Var_{q_n}[‖z_n − p_k‖²]`.
pub fn grad_temperature(z: &TokenMatrix, bank: &PrototypeBank) -> Result<f64> {
    let t = bank.temperature;
    if !(t > 0.0) {
        return Err(param("temperature must be positive"));
    }
    let v = distance_variances(z, bank)?;
    Ok(v.iter().sum::<f64>() / (t * t))
}

fn check_unit(u: &[f64], dim: usize) -> Result<()> {
    if u.len() != dim {
        return Err(shape(format!("direction has length {}, expected {dim}", u.len())));
    }
    let len = norm(u);
    if (len - 1.0).abs() > 1e-10 {
        return Err(param(format!("direction must be unit length, got norm {len}")));
    }
    Ok(())
}

/// Shared pieces of the assignment variations along `u`.
struct Variation {
    q: Matrix,
    alpha: Vec<f64>,
    /// `p_k* − p̄_n*` per (n, k).
    centred: Matrix,
    /// `Var_{q_n}[p*]` per token.
    var: Vec<f64>,
}

fn variation_parts(z: &TokenMatrix, bank: &PrototypeBank, u: &[f64]) -> Result<Variation> {
    check_unit(u, z.dim())?;
    let q = soft_assign(z, bank)?.0;
    let alpha = z.project(u);
    let pstar: Vec<f64> = (0..bank.k())
        .map(|k| dot(bank.prototypes.row(k), u))
        .collect();
    let mut centred = Matrix::zeros(z.n(), bank.k());
    let mut var = Vec::with_capacity(z.n());
    for n in 0..z.n() {
        let (mean, v) = weighted_moments(q.row(n), &pstar);
        for k in 0..bank.k() {
            centred[(n, k)] = pstar[k] - mean;
        }
        var.push(v);
    }
    Ok(Variation {
        q,
        alpha,
        centred,
        var,
    })
}

/// `dq_nk/dε = (2α_n/T) q_nk (p_k* − p̄_n*)` for tokens moved along `u`.
pub fn assignment_first_variation(
    z: &TokenMatrix,
    bank: &PrototypeBank,
    u_star: &[f64],
) -> Result<Matrix> {
    let v = variation_parts(z, bank, u_star)?;
    let t = bank.temperature;
    Ok(Matrix::from_fn(z.n(), bank.k(), |n, k| {
        2.0 * v.alpha[n] / t * v.q[(n, k)] * v.centred[(n, k)]
    }))
}

/// `d²q_nk/dε² = (4α_n²/T²) q_nk [(p_k* − p̄_n*)² − Var_{q_n}[p*]]`.
pub fn assignment_second_variation(
    z: &TokenMatrix,
    bank: &PrototypeBank,
    u_star: &[f64],
) -> Result<Matrix> {
    let v = variation_parts(z, bank, u_star)?;
    let t = bank.temperature;
    Ok(Matrix::from_fn(z.n(), bank.k(), |n, k| {
        let c = v.centred[(n, k)];
        4.0 * v.alpha[n] * v.alpha[n] / (t * t) * v.q[(n, k)] * (c * c - v.var[n])
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhiCurve {
    pub epsilons: Vec<f64>,
    pub values: Vec<f64>,
    /// Central-difference `φ'(0)`.
    pub d1: f64,
    /// Central-difference `φ''(0)`.
    pub d2: f64,
    pub d2_lower_bound: f64,
}

pub const PHI_STEP: f64 = 1e-4;

/// Separation force as tokens are stretched along `u_star`.
pub fn phi_curve(
    z: &TokenMatrix,
    bank: &PrototypeBank,
    u_star: &[f64],
    epsilons: &[f64],
) -> Result<PhiCurve> {
    check_unit(u_star, z.dim())?;
    check_dims(z, bank)?;
    let alpha = z.project(u_star);
    let phi = |eps: f64| -> Result<f64> {
        if eps == 0.0 {
            separation_force(z, bank)
        } else {
            separation_force(&z.expanded(u_star, &alpha, eps), bank)
        }
    };
    let values = epsilons.iter().map(|e| phi(*e)).collect::<Result<Vec<_>>>()?;
    let (fp, f0, fm) = (phi(PHI_STEP)?, phi(0.0)?, phi(-PHI_STEP)?);
    let d1 = (fp - fm) / (2.0 * PHI_STEP);
    let d2 = (fp - 2.0 * f0 + fm) / (PHI_STEP * PHI_STEP);

    let v = variation_parts(z, bank, u_star)?;
    let t = bank.temperature;
    let k = bank.k() as f64;
    let n = z.n() as f64;
    let s0 = if bank.k() >= 2 { prototype_spread(bank)? } else { 0.0 };
    let lambda: f64 = alpha.iter().map(|a| a * a).sum();
    let var_mean = v.var.iter().sum::<f64>() / n;
    let var_max = v.var.iter().cloned().fold(0.0, f64::max);
    let alpha_inf = alpha.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let mu = v.q.matmul(&bank.prototypes)?;
    let mut d_max: f64 = 0.0;
    for row in 0..z.n() {
        for kk in 0..bank.k() {
            let gap: f64 = bank
                .prototypes
                .row(kk)
                .iter()
                .zip(mu.row(row))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d_max = d_max.max(gap.sqrt());
        }
    }
    let c0 = alpha_inf * alpha_inf * var_max * n * d_max * d_max;
    let d2_lower_bound = 32.0 / (t * t) * (s0 * s0 / (k * k) * lambda * var_mean - c0);

    Ok(PhiCurve {
        epsilons: epsilons.to_vec(),
        values,
        d1,
        d2,
        d2_lower_bound,
    })
}

/// `C_k = Σ_n α_n (p_k* − p̄_n*)`.
pub fn residual_covariance_ck(
    z: &TokenMatrix,
    bank: &PrototypeBank,
    u_star: &[f64],
) -> Result<Vec<f64>> {
    let v = variation_parts(z, bank, u_star)?;
    Ok((0..bank.k())
        .map(|k| {
            (0..z.n())
                .map(|n| v.alpha[n] * v.centred[(n, k)])
                .sum()
        })
        .collect())
}

//! Growth and pruning controller: the residual directional signal, plane
//! extraction, head spawning, the pruning score, the gate iteration and the
//! directional information loss.

use serde::{Deserialize, Serialize};

use crate::ddcl::{prototype_spread, PrototypeBank, TokenMatrix};
use crate::error::{param, shape, Error, Result};
use crate::numerics::{antisym_dominant_plane, dot, gram_schmidt_extend, norm, sym_eig, Matrix, Rng};

/// How tokens weight the attention product before residual analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalWeighting {
    /// `C^{1/2} M_a C^{1/2}` with `C` the token second moment.
    SecondMoment,
    /// `M_a` as is.
    Unweighted,
}

/// Antisymmetric attention product and its token-weighted form.
#[derive(Clone, Debug)]
pub struct DirectionalSignal {
    pub m_a: Matrix,
    pub c_half: Matrix,
    pub m_tilde: Matrix,
}

fn antisymmetrize(m: &Matrix) -> Matrix {
    let n = m.rows();
    Matrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] - m[(j, i)]))
}

impl DirectionalSignal {
    pub fn new(m_a: Matrix, z: &TokenMatrix, weighting: SignalWeighting) -> Result<Self> {
        if m_a.shape() != (z.dim(), z.dim()) {
            return Err(shape(format!(
                "signal is {:?} but tokens have dimension {}",
                m_a.shape(),
                z.dim()
            )));
        }
        let c_half = match weighting {
            SignalWeighting::Unweighted => Matrix::identity(z.dim()),
            SignalWeighting::SecondMoment => {
                let c = z.matrix().t_matmul(z.matrix())?.scale(1.0 / z.n() as f64);
                psd_sqrt(&c)?
            }
        };
        Self::from_parts(m_a, c_half)
    }

    pub fn from_parts(m_a: Matrix, c_half: Matrix) -> Result<Self> {
        if !m_a.is_square() || m_a.shape() != c_half.shape() {
            return Err(shape("signal and weighting must be matching square matrices"));
        }
        if m_a.max_symmetric_part() > 1e-12 * m_a.frobenius().max(1.0) {
            return Err(shape("attention product is not antisymmetric"));
        }
        let m_tilde = antisymmetrize(&c_half.matmul(&m_a)?.matmul(&c_half)?);
        Ok(Self {
            m_a,
            c_half,
            m_tilde,
        })
    }

    pub fn dim(&self) -> usize {
        self.m_a.rows()
    }
}

/// Symmetric square root of a PSD matrix.
pub fn psd_sqrt(c: &Matrix) -> Result<Matrix> {
    let sym = Matrix::from_fn(c.rows(), c.cols(), |i, j| 0.5 * (c[(i, j)] + c[(j, i)]));
    let eig = sym_eig(&sym)?;
    let roots: Vec<f64> = eig.values.iter().map(|v| v.max(0.0).sqrt()).collect();
    let vr = eig.vectors.matmul(&Matrix::diag(&roots))?;
    let out = vr.matmul(&eig.vectors.transpose())?;
    Ok(Matrix::from_fn(out.rows(), out.cols(), |i, j| {
        0.5 * (out[(i, j)] + out[(j, i)])
    }))
}

/// Orthonormal basis of every captured plane, two columns per head.
#[derive(Clone, Debug, PartialEq)]
pub struct CapturedSubspace {
    basis: Matrix,
}

impl CapturedSubspace {
    pub fn empty(dim: usize) -> Self {
        Self {
            basis: Matrix::zeros(dim, 0),
        }
    }

    pub fn from_planes(dim: usize, planes: &[&Matrix]) -> Result<Self> {
        planes
            .iter()
            .try_fold(Self::empty(dim), |sub, p| sub.extend(p))
    }

    /// Basis after appending `cols`, orthonormalised against what is already there.
    pub fn extend(&self, cols: &Matrix) -> Result<Self> {
        Ok(Self {
            basis: gram_schmidt_extend(&self.basis, cols)?,
        })
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    /// Columns `2h, 2h+1`.
    pub fn plane(&self, h: usize) -> Matrix {
        self.basis.col_range(2 * h, 2 * h + 2)
    }

    /// `I − QQᵀ`.
    pub fn perp_projector(&self) -> Matrix {
        let d = self.dim();
        let mut p = Matrix::identity(d);
        for c in 0..self.rank() {
            let q = self.basis.col(c);
            for i in 0..d {
                for j in 0..d {
                    p[(i, j)] -= q[i] * q[j];
                }
            }
        }
        p
    }

    pub fn project_out(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for c in 0..self.rank() {
            let q = self.basis.col(c);
            let a = dot(&q, &out);
            out.iter_mut().zip(&q).for_each(|(x, qi)| *x -= a * qi);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct ResidualReport {
    pub lambda_max: f64,
    pub plane: Matrix,
    /// `‖A_res‖_F²`.
    pub frob_sq: f64,
    pub matrix: Matrix,
}

/// `A_res = P⊥ M̃ P⊥` and its dominant rotation plane.
pub fn residual_matrix(sig: &DirectionalSignal, sub: &CapturedSubspace) -> Result<ResidualReport> {
    if sub.dim() != sig.dim() {
        return Err(shape("subspace and signal dimensions differ"));
    }
    let a = if sub.rank() == 0 {
        sig.m_tilde.clone()
    } else {
        let p = sub.perp_projector();
        antisymmetrize(&p.matmul(&sig.m_tilde)?.matmul(&p)?)
    };
    let dom = antisym_dominant_plane(&a)?;
    Ok(ResidualReport {
        lambda_max: dom.sigma1,
        plane: dom.plane,
        frob_sq: a.frobenius_sq(),
        matrix: a,
    })
}

pub fn growth_trigger(report: &ResidualReport, theta_w: f64) -> bool {
    report.lambda_max > theta_w
}

/// A prototype bank confined to a plane of the embedding space.
///
/// Prototypes and the token view are stored in plane coordinates; the
/// ambient prototype is `plane · c_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub id: usize,
    /// d×2 orthonormal.
    pub plane: Matrix,
    /// K×2 prototype coordinates and the head temperature.
    pub bank: PrototypeBank,
    pub birth_lambda: f64,
    pub birth_step: usize,
    view: TokenMatrix,
}

impl Head {
    pub fn new(
        id: usize,
        plane: Matrix,
        bank: PrototypeBank,
        z: &TokenMatrix,
        birth_lambda: f64,
        birth_step: usize,
    ) -> Result<Self> {
        if plane.cols() != 2 || plane.rows() != z.dim() || bank.dim() != 2 {
            return Err(shape("a head needs a d×2 plane and planar prototypes"));
        }
        let view = TokenMatrix::new(z.matrix().matmul(&plane)?)?;
        Ok(Self {
            id,
            plane,
            bank,
            birth_lambda,
            birth_step,
            view,
        })
    }

    /// Tokens in plane coordinates, `z_n·B`.
    pub fn view(&self) -> &TokenMatrix {
        &self.view
    }

    /// K×d prototypes in the embedding space.
    pub fn ambient_prototypes(&self) -> Matrix {
        self.bank
            .prototypes
            .matmul(&self.plane.transpose())
            .expect("plane and prototypes agree by construction")
    }

    pub fn ambient_bank(&self) -> PrototypeBank {
        PrototypeBank {
            prototypes: self.ambient_prototypes(),
            temperature: self.bank.temperature,
        }
    }

    pub fn spread(&self) -> Result<f64> {
        prototype_spread(&self.bank)
    }
}

/// Places `k_protos` prototypes on a circle in the report's plane.
///
/// The circle is centred on the mean token projection with radius equal to
/// the pooled per-axis standard deviation of the projections; each prototype
/// gets an in-plane jitter of size `1e-3·radius`.
pub fn spawn_head(
    report: &ResidualReport,
    z: &TokenMatrix,
    k_protos: usize,
    t_init: f64,
    rng: &mut Rng,
    id: usize,
    step: usize,
) -> Result<Head> {
    if k_protos < 2 {
        return Err(param("a head needs at least two prototypes"));
    }
    if !(report.lambda_max > 0.0) {
        return Err(param("cannot spawn along a zero residual"));
    }
    if z.n() < 2 {
        return Err(param("spawning needs at least two tokens"));
    }
    let view = z.matrix().matmul(&report.plane)?;
    let n = z.n() as f64;
    let centre = [
        view.col(0).iter().sum::<f64>() / n,
        view.col(1).iter().sum::<f64>() / n,
    ];
    let ss: f64 = (0..z.n())
        .map(|i| (view[(i, 0)] - centre[0]).powi(2) + (view[(i, 1)] - centre[1]).powi(2))
        .sum();
    let radius = (ss / (2.0 * (n - 1.0))).sqrt();
    if !(radius > 1e-12) {
        return Err(Error::Degenerate("tokens have no variance in the new plane".into()));
    }
    let mut protos = Matrix::zeros(k_protos, 2);
    for j in 0..k_protos {
        let angle = 2.0 * std::f64::consts::PI * j as f64 / k_protos as f64;
        protos[(j, 0)] = centre[0] + radius * angle.cos() + 1e-3 * radius * rng.normal();
        protos[(j, 1)] = centre[1] + radius * angle.sin() + 1e-3 * radius * rng.normal();
    }
    let bank = PrototypeBank::new(protos, t_init)?;
    Head::new(id, report.plane.clone(), bank, z, report.lambda_max, step)
}

/// The head plane's share of directional energy,
/// `‖Bᵀ M̃ B‖₂ / ‖M̃‖_F`.
pub fn gamma_h(head: &Head, sig: &DirectionalSignal) -> Result<f64> {
    gamma_of_plane(&head.plane, sig)
}

pub fn gamma_of_plane(plane: &Matrix, sig: &DirectionalSignal) -> Result<f64> {
    let total = sig.m_tilde.frobenius();
    if total == 0.0 {
        return Err(param("directional signal is zero"));
    }
    let block = plane.t_matmul(&sig.m_tilde.matmul(plane)?)?;
    let gram = block.t_matmul(&block)?;
    let gram = Matrix::from_fn(2, 2, |i, j| 0.5 * (gram[(i, j)] + gram[(j, i)]));
    let top = sym_eig(&gram)?.values[0].max(0.0).sqrt();
    Ok((top / total).clamp(0.0, 1.0))
}

/// Which quantity the pruning threshold is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneRule {
    /// Directional energy share `Γ_h`.
    Gamma,
    /// Prototype spread `S(P)`.
    Spread,
}

pub fn prune_check(head: &Head, sig: &DirectionalSignal, phi_g: f64) -> Result<bool> {
    Ok(gamma_h(head, sig)? < phi_g)
}

pub fn prune_check_with(head: &Head, sig: &DirectionalSignal, phi_g: f64, rule: PruneRule) -> Result<bool> {
    match rule {
        PruneRule::Gamma => prune_check(head, sig, phi_g),
        PruneRule::Spread => Ok(head.spread()? < phi_g),
    }
}

/// One normalised power step `u ← (u + η⁺ G u)/‖·‖`.
pub fn gate_update(u: &[f64], g: &Matrix, eta_plus: f64) -> Result<Vec<f64>> {
    if !(eta_plus > 0.0) {
        return Err(param("gate step size must be positive"));
    }
    let gu = g.matvec(u)?;
    let mut next: Vec<f64> = u.iter().zip(&gu).map(|(a, b)| a + eta_plus * b).collect();
    let len = norm(&next);
    if !(len > 0.0) || !len.is_finite() {
        return Err(Error::Numeric("gate state vanished".into()));
    }
    next.iter_mut().for_each(|x| *x /= len);
    Ok(next)
}

/// Gate pair tracking the dominant residual plane.
#[derive(Clone, Debug, PartialEq)]
pub struct GateState {
    pub u_plus: Vec<f64>,
    pub u_minus: Vec<f64>,
}

impl GateState {
    pub fn new(rng: &mut Rng, dim: usize) -> Self {
        let u_plus = rng.unit_vector(dim);
        let mut s = Self {
            u_minus: rng.unit_vector(dim),
            u_plus,
        };
        s.orthonormalise();
        s
    }

    fn orthonormalise(&mut self) {
        let a = dot(&self.u_plus, &self.u_minus);
        for (m, p) in self.u_minus.iter_mut().zip(&self.u_plus) {
            *m -= a * p;
        }
        let len = norm(&self.u_minus);
        if len > 1e-12 {
            self.u_minus.iter_mut().for_each(|x| *x /= len);
        }
    }

    /// Advances both vectors by one `gate_update` on `G = AᵀA`.
    pub fn step(&mut self, g: &Matrix, eta_plus: f64) -> Result<()> {
        self.u_plus = gate_update(&self.u_plus, g, eta_plus)?;
        self.u_minus = gate_update(&self.u_minus, g, eta_plus)?;
        self.orthonormalise();
        Ok(())
    }

    /// Restricts the pair to the residual subspace after an event.
    pub fn restrict(&mut self, sub: &CapturedSubspace) {
        let fallback = |i: usize| -> Vec<f64> {
            let mut v = vec![0.0; sub.dim()];
            v[i % sub.dim()] = 1.0;
            sub.project_out(&v)
        };
        let fix = |v: Vec<f64>, seed: usize| -> Vec<f64> {
            let mut w = sub.project_out(&v);
            let mut i = seed;
            while norm(&w) < 1e-8 && i < seed + sub.dim() {
                w = fallback(i);
                i += 1;
            }
            let len = norm(&w);
            if len > 0.0 {
                w.iter_mut().for_each(|x| *x /= len);
            }
            w
        };
        self.u_plus = fix(std::mem::take(&mut self.u_plus), 0);
        self.u_minus = fix(std::mem::take(&mut self.u_minus), 1);
        self.orthonormalise();
    }

    /// `‖Bᵀ u⁺‖` for a d×2 plane `B`.
    pub fn alignment(&self, plane: &Matrix) -> f64 {
        (0..plane.cols())
            .map(|c| dot(&plane.col(c), &self.u_plus).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Gram operator `AᵀA` of a residual.
pub fn gate_operator(report: &ResidualReport) -> Result<Matrix> {
    report.matrix.t_matmul(&report.matrix)
}

/// `‖P⊥ M̃ P⊥‖_F / ‖M̃‖_F`.
pub fn directional_info_loss(sig: &DirectionalSignal, sub: &CapturedSubspace) -> Result<f64> {
    let total = sig.m_tilde.frobenius_sq();
    if total == 0.0 {
        return Err(param("directional signal is zero"));
    }
    let res = residual_matrix(sig, sub)?;
    Ok((res.frob_sq / total).sqrt().clamp(0.0, 1.0))
}

/// Captured share of directional energy, `1 − I²`.
pub fn coverage(sig: &DirectionalSignal, sub: &CapturedSubspace) -> Result<f64> {
    let i = directional_info_loss(sig, sub)?;
    Ok(1.0 - i * i)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Block-diagonal antisymmetric matrix with the given rotation magnitudes.
    fn blocks(d: usize, mags: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(d, d);
        for (k, l) in mags.iter().enumerate() {
            m[(2 * k, 2 * k + 1)] = *l;
            m[(2 * k + 1, 2 * k)] = -*l;
        }
        m
    }

    fn identity_signal(m: Matrix) -> DirectionalSignal {
        let d = m.rows();
        DirectionalSignal::from_parts(m, Matrix::identity(d)).unwrap()
    }

    fn axes_plane(d: usize, i: usize, j: usize) -> Matrix {
        Matrix::from_fn(d, 2, |r, c| if (c == 0 && r == i) || (c == 1 && r == j) { 1.0 } else { 0.0 })
    }

    #[test]
    fn zero_signal_has_zero_residual() {
        let r = residual_matrix(&identity_signal(Matrix::zeros(4, 4)), &CapturedSubspace::empty(4))
            .unwrap();
        assert_eq!(r.lambda_max, 0.0);
        assert!(!growth_trigger(&r, 0.05));
    }

    #[test]
    fn full_capture_leaves_nothing() {
        let sig = identity_signal(blocks(6, &[2.0, 1.0]));
        let sub = CapturedSubspace::from_planes(6, &[&axes_plane(6, 0, 1), &axes_plane(6, 2, 3)])
            .unwrap();
        let r = residual_matrix(&sig, &sub).unwrap();
        assert!(r.lambda_max < 1e-12);
        assert!(directional_info_loss(&sig, &sub).unwrap() < 1e-12);
    }

    #[test]
    fn trigger_boundary_is_strict() {
        let sig = identity_signal(blocks(4, &[0.05]));
        let r = residual_matrix(&sig, &CapturedSubspace::empty(4)).unwrap();
        assert_eq!(r.lambda_max, 0.05);
        assert!(!growth_trigger(&r, 0.05));
        assert!(growth_trigger(&r, 0.049));
    }

    #[test]
    fn residual_is_idempotent_and_antisymmetric() {
        let mut rng = Rng::new(1);
        let g = rng.normal_matrix(8, 8);
        let m = Matrix::from_fn(8, 8, |i, j| g[(i, j)] - g[(j, i)]);
        let sig = identity_signal(m);
        let sub = CapturedSubspace::empty(8).extend(&rng.normal_matrix(8, 2)).unwrap();
        let r1 = residual_matrix(&sig, &sub).unwrap();
        assert!(r1.matrix.max_symmetric_part() < 1e-10);
        let again = residual_matrix(&identity_signal(r1.matrix.clone()), &sub).unwrap();
        assert!(again.matrix.sub(&r1.matrix).unwrap().frobenius() < 1e-12);
    }

    #[test]
    fn telescoping_removes_two_lambda_squared() {
        let mags = [2.0, 1.4, 0.98, 0.686];
        let sig = identity_signal(blocks(10, &mags));
        let mut sub = CapturedSubspace::empty(10);
        let mut prev = residual_matrix(&sig, &sub).unwrap();
        for lam in mags {
            assert!((prev.lambda_max - lam).abs() < 1e-12);
            sub = sub.extend(&prev.plane).unwrap();
            let next = residual_matrix(&sig, &sub).unwrap();
            assert!((prev.frob_sq - next.frob_sq - 2.0 * lam * lam).abs() < 1e-9);
            prev = next;
        }
    }

    #[test]
    fn spawn_geometry() {
        let mut rng = Rng::new(2);
        let z = TokenMatrix::new(rng.normal_matrix(200, 6)).unwrap();
        let sig = identity_signal(blocks(6, &[1.0]));
        let r = residual_matrix(&sig, &CapturedSubspace::empty(6)).unwrap();
        let h = spawn_head(&r, &z, 2, 1.0, &mut rng, 0, 0).unwrap();
        let view = h.view().matrix();
        let n = 200.0;
        let c0 = view.col(0).iter().sum::<f64>() / n;
        let c1 = view.col(1).iter().sum::<f64>() / n;
        let ss: f64 = (0..200)
            .map(|i| (view[(i, 0)] - c0).powi(2) + (view[(i, 1)] - c1).powi(2))
            .sum();
        let radius = (ss / (2.0 * (n - 1.0))).sqrt();
        let s = h.spread().unwrap();
        assert!((s - 2.0 * radius).abs() < 1e-2 * radius);
        let p = h.ambient_prototypes();
        let plane = &h.plane;
        for k in 0..2 {
            let row = p.row(k).to_vec();
            let mut resid = row.clone();
            for c in 0..2 {
                let col = plane.col(c);
                let a = dot(&col, &row);
                resid.iter_mut().zip(&col).for_each(|(x, q)| *x -= a * q);
            }
            assert!(norm(&resid) < 1e-10);
        }
        let h4 = spawn_head(&r, &z, 4, 1.0, &mut rng, 1, 0).unwrap();
        let r4 = radius;
        let mut gap: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                gap = gap.max((h4.bank.prototypes[(i, 0)] - h4.bank.prototypes[(j, 0)]).abs());
            }
        }
        assert!(gap > r4 / 2.0);
    }

    #[test]
    fn spawn_rejects_flat_plane() {
        let z = TokenMatrix::new(Matrix::from_fn(5, 4, |i, j| if j >= 2 { i as f64 } else { 0.0 }))
            .unwrap();
        let sig = identity_signal(blocks(4, &[1.0]));
        let r = residual_matrix(&sig, &CapturedSubspace::empty(4)).unwrap();
        assert!(matches!(
            spawn_head(&r, &z, 3, 1.0, &mut Rng::new(0), 0, 0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn gamma_examples() {
        let sig = identity_signal(blocks(6, &[1.5]));
        let z = TokenMatrix::new(Rng::new(3).normal_matrix(50, 6)).unwrap();
        let bank = PrototypeBank::new(Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap(), 1.0)
            .unwrap();
        let on = Head::new(0, axes_plane(6, 0, 1), bank.clone(), &z, 1.5, 0).unwrap();
        let off = Head::new(1, axes_plane(6, 2, 4), bank, &z, 0.0, 0).unwrap();
        let g_on = gamma_h(&on, &sig).unwrap();
        assert!((g_on - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(gamma_h(&off, &sig).unwrap(), 0.0);
        assert!(prune_check(&off, &sig, 1e-9).unwrap());
        assert!(!prune_check(&on, &sig, g_on).unwrap());
        assert!(prune_check(&on, &sig, g_on + 1e-12).unwrap());
    }

    #[test]
    fn gate_fixed_points() {
        let g = Matrix::diag(&[3.0, 1.0, 0.5]);
        assert_eq!(gate_update(&[1.0, 0.0, 0.0], &g, 0.1).unwrap(), vec![1.0, 0.0, 0.0]);
        let u = [0.6, 0.8, 0.0];
        let next = gate_update(&u, &Matrix::identity(3), 0.3).unwrap();
        for (a, b) in next.iter().zip(u) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(gate_update(&[0.0; 3], &g, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn gate_converges_to_top_eigenvector() {
        let mut rng = Rng::new(4);
        let a = rng.normal_matrix(10, 10);
        let g = a.t_matmul(&a).unwrap();
        let eig = sym_eig(&g).unwrap();
        let v1 = eig.vectors.col(0);
        let mut u = rng.unit_vector(10);
        let mut prev = dot(&u, &v1).abs();
        for _ in 0..500 {
            u = gate_update(&u, &g, 0.1).unwrap();
            let al = dot(&u, &v1).abs();
            assert!(al >= prev - 1e-12);
            prev = al;
        }
        assert!(prev > 0.999);
    }

    #[test]
    fn info_loss_examples() {
        let mags = [2.0, 1.0, 0.5];
        let sig = identity_signal(blocks(6, &mags));
        assert_eq!(directional_info_loss(&sig, &CapturedSubspace::empty(6)).unwrap(), 1.0);
        let sub = CapturedSubspace::from_planes(6, &[&axes_plane(6, 0, 1)]).unwrap();
        let total: f64 = mags.iter().map(|l| 2.0 * l * l).sum();
        let expected = (1.0 - 2.0 * 4.0 / total).sqrt();
        assert!((directional_info_loss(&sig, &sub).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(
            directional_info_loss(&identity_signal(Matrix::zeros(4, 4)), &CapturedSubspace::empty(4)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn second_moment_weighting() {
        let mut rng = Rng::new(5);
        let z = TokenMatrix::new(rng.normal_matrix(100, 4)).unwrap();
        let sig = DirectionalSignal::new(blocks(4, &[1.0]), &z, SignalWeighting::SecondMoment).unwrap();
        let c = z.matrix().t_matmul(z.matrix()).unwrap().scale(0.01);
        let c2 = sig.c_half.matmul(&sig.c_half).unwrap();
        assert!(c2.sub(&c).unwrap().frobenius() < 1e-12 * c.frobenius());
        assert!(sig.m_tilde.max_symmetric_part() < 1e-10);
        let plain = DirectionalSignal::new(blocks(4, &[1.0]), &z, SignalWeighting::Unweighted).unwrap();
        assert_eq!(plain.m_tilde, plain.m_a);
    }
}

//! Constant-mode Hitchin layer on the flat torus: Higgs data, the fibration, harmonic and
//! twisted-harmonic metrics, twisting, irreducibility and the complex structures `I_w`.
//!
//! A metric `H` is stored in the holomorphic frame; `X^{dagger H} = H^-1 X^dagger H`. The
//! barred Higgs component is `phi_zbar = -phi^{dagger H}`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry_fields::HoloData;
use crate::lie_core::{
    c, comm, exp_herm, fro, herm_eig, herm_fn_jet, hermitian_basis, log_pos, max_abs, principal_triple,
    re_tr_prod, sqrt_pos, CMatrix, ScalarFn, C64, I,
};

#[derive(Clone, Debug)]
pub struct HiggsData {
    pub n: usize,
    pub alpha0: CMatrix,
    pub phi: CMatrix,
}

impl HiggsData {
    pub fn new(alpha0: CMatrix, phi: CMatrix) -> Result<Self> {
        let n = phi.nrows();
        if n < 2 {
            return Err(Error::InvalidRank(n));
        }
        if alpha0.nrows() != n {
            return Err(Error::DimensionMismatch { expected: n, got: alpha0.nrows() });
        }
        let scale = 1.0 + max_abs(&alpha0) * max_abs(&phi);
        if max_abs(&comm(&alpha0, &phi)) > 1e-12 * scale {
            return Err(Error::Domain("Higgs field is not holomorphic: [alpha0, phi] != 0".into()));
        }
        if phi.trace().norm() > 1e-12 * (1.0 + max_abs(&phi)) {
            return Err(Error::Domain("Higgs field must be traceless".into()));
        }
        Ok(HiggsData { n, alpha0, phi })
    }
}

/// Constant-mode flat pair `P1 = d_zbar + p1`, `P2 = d_z + p2` with twist `w`.
#[derive(Clone, Debug)]
pub struct FlatPair {
    pub p1: CMatrix,
    pub p2: CMatrix,
    pub w: C64,
}

impl FlatPair {
    pub fn flatness_defect(&self) -> f64 {
        max_abs(&comm(&self.p1, &self.p2))
    }
}

pub fn adjoint_h(x: &CMatrix, h: &CMatrix) -> Result<CMatrix> {
    let hi = h.clone().try_inverse().ok_or_else(|| Error::Decomposition("singular metric".into()))?;
    Ok(hi * x.adjoint() * h)
}

pub fn hitchin_section_higgs(n: usize, q: &[C64]) -> Result<HiggsData> {
    if n < 2 {
        return Err(Error::InvalidRank(n));
    }
    if q.len() != n - 1 {
        return Err(Error::DimensionMismatch { expected: n - 1, got: q.len() });
    }
    let mut phi = principal_triple(n)?.e_plus;
    // q[0] = q_2 sits next to the diagonal, q[n-2] = q_n in the first column.
    for (idx, &qj) in q.iter().enumerate() {
        let j = idx + 2;
        phi[(n - 1, n - j)] = qj;
    }
    HiggsData::new(CMatrix::zeros(n, n), phi)
}

/// Coefficients of `det(lambda - phi) = sum_j lambda^(n-j) (-1)^j p_j`, returned as `(p_2, ..., p_n)`.
pub fn hitchin_fibration(phi: &CMatrix) -> Vec<C64> {
    let n = phi.nrows();
    // Faddeev-LeVerrier: det(lambda - A) = sum_k c_k lambda^(n-k).
    let mut coeffs = vec![c(1.0)];
    let mut m = CMatrix::zeros(n, n);
    for k in 1..=n {
        m = phi * &m + CMatrix::identity(n, n) * coeffs[k - 1];
        let ck = -(phi * &m).trace() / c(k as f64);
        coeffs.push(ck);
    }
    (2..=n).map(|j| coeffs[j] * c(if j % 2 == 0 { 1.0 } else { -1.0 })).collect()
}

/// Inverse of the fibration restricted to the Hitchin section.
pub fn section_from_fibration(n: usize, p: &[C64]) -> Result<Vec<C64>> {
    if p.len() != n - 1 {
        return Err(Error::DimensionMismatch { expected: n - 1, got: p.len() });
    }
    Ok((2..=n)
        .map(|j| {
            let cycle: f64 = (n - j + 1..n).map(|i| ((i * (n - i)) as f64).sqrt()).product();
            let sign = if j % 2 == 0 { -1.0 } else { 1.0 };
            p[j - 2] * c(sign / cycle)
        })
        .collect())
}

#[derive(Clone, Copy, Debug)]
pub struct ConvexOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Largest admissible `|log H|`; beyond it the orbit is treated as unstable.
    pub max_log: f64,
}

impl Default for ConvexOptions {
    fn default() -> Self {
        ConvexOptions { tol: 1e-12, max_iter: 200, max_log: 25.0 }
    }
}

#[derive(Clone, Debug)]
pub struct MetricSolution {
    pub h: CMatrix,
    pub residual: f64,
    pub iterations: usize,
}

/// Weighted matrices `(c_k, P_k)` entering `F(g) = sum_k c_k |g P_k g^-1|^2`.
struct Functional<'a> {
    terms: &'a [(f64, CMatrix)],
    basis: Vec<CMatrix>,
}

impl<'a> Functional<'a> {
    fn new(terms: &'a [(f64, CMatrix)]) -> Self {
        Functional { terms, basis: hermitian_basis(terms[0].1.nrows()) }
    }

    fn transported(&self, g: &CMatrix, gi: &CMatrix) -> Vec<(f64, CMatrix)> {
        self.terms.iter().map(|(w, p)| (*w, g * p * gi)).collect()
    }

    fn value(&self, g: &CMatrix, gi: &CMatrix) -> f64 {
        self.transported(g, gi).iter().map(|(w, p)| w * fro(p).powi(2)).sum()
    }

    /// Moment map `sum_k c_k [P, P^dagger]` in the unitary frame.
    fn moment(&self, g: &CMatrix, gi: &CMatrix) -> CMatrix {
        let n = g.nrows();
        self.transported(g, gi)
            .iter()
            .fold(CMatrix::zeros(n, n), |acc, (w, p)| acc + comm(p, &p.adjoint()).scale(*w))
    }

    fn hessian(&self, g: &CMatrix, gi: &CMatrix) -> DMatrix<f64> {
        let tp = self.transported(g, gi);
        let d = self.basis.len();
        let brackets: Vec<Vec<CMatrix>> =
            self.basis.iter().map(|e| tp.iter().map(|(_, p)| comm(e, p)).collect()).collect();
        DMatrix::from_fn(d, d, |a, b| {
            tp.iter()
                .enumerate()
                .map(|(k, (w, _))| w * re_tr_prod(&brackets[a][k], &brackets[b][k].adjoint()))
                .sum()
        })
    }

    fn coords(&self, x: &CMatrix) -> DVector<f64> {
        DVector::from_iterator(self.basis.len(), self.basis.iter().map(|e| re_tr_prod(e, x)))
    }

    fn matrix(&self, x: &DVector<f64>) -> CMatrix {
        let n = self.basis[0].nrows();
        self.basis.iter().zip(x.iter()).fold(CMatrix::zeros(n, n), |acc, (e, &v)| acc + e.scale(v))
    }
}

fn pinv_solve(h: &DMatrix<f64>, rhs: &DVector<f64>, rel_cut: f64) -> DVector<f64> {
    let svd = h.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cut = rel_cut * smax.max(f64::MIN_POSITIVE);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut out = DVector::zeros(h.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cut {
            let coef = u.column(i).dot(rhs) / s;
            out += vt.row(i).transpose() * coef;
        }
    }
    out
}

fn inverse(g: &CMatrix) -> Result<CMatrix> {
    g.clone().try_inverse().ok_or_else(|| Error::Decomposition("singular frame".into()))
}

/// Minimizes the weighted norm functional over positive `det = 1` metrics by damped Newton steps,
/// then moves along the minimizing set to the point nearest the identity.
pub fn minimize_norm_functional(
    terms: &[(f64, CMatrix)],
    init: Option<&CMatrix>,
    opts: ConvexOptions,
) -> Result<MetricSolution> {
    if terms.is_empty() {
        return Err(Error::Domain("empty functional".into()));
    }
    let n = terms[0].1.nrows();
    let fun = Functional::new(terms);
    let scale = terms.iter().map(|(w, p)| w * fro(p).powi(2)).sum::<f64>().max(1e-300);
    let mut g = match init {
        Some(h0) => {
            let det = h0.determinant().re;
            if det <= 0.0 {
                return Err(Error::Domain("initial metric must be positive".into()));
            }
            sqrt_pos(&h0.scale(det.powf(-1.0 / n as f64)))?
        }
        None => CMatrix::identity(n, n),
    };
    let unstable = || Error::Reducible { basis: invariant_subspace(&terms.iter().map(|t| t.1.clone()).collect::<Vec<_>>()).unwrap_or_else(|| CMatrix::zeros(n, 0)) };
    let mut gi = inverse(&g)?;
    let mut iterations = 0;
    loop {
        let mom = fun.moment(&g, &gi);
        let res = fro(&mom);
        if res <= opts.tol * scale {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(unstable());
        }
        iterations += 1;
        let grad = fun.coords(&mom);
        let step = -pinv_solve(&fun.hessian(&g, &gi), &grad, 1e-12);
        let f0 = fun.value(&g, &gi);
        let mut t = 1.0;
        loop {
            let xi = fun.matrix(&(&step * t));
            let g_new = exp_herm(&xi.scale(0.5)) * &g;
            let gi_new = inverse(&g_new)?;
            let f_new = fun.value(&g_new, &gi_new);
            if f_new <= f0 + 1e-14 * scale || t < 1e-6 {
                g = g_new;
                gi = gi_new;
                break;
            }
            t *= 0.5;
        }
        let h = g.adjoint() * &g;
        let (mu, _) = herm_eig(&h);
        if mu[0] <= 0.0 || (mu[mu.len() - 1] / mu[0]).ln() > opts.max_log {
            return Err(unstable());
        }
    }
    let g = nearest_identity(&fun, g)?;
    let gi = inverse(&g)?;
    let residual = fro(&fun.moment(&g, &gi)) / scale.max(1.0);
    Ok(MetricSolution { h: g.adjoint() * &g, residual, iterations })
}

/// Moves `H = g^dagger g` along the stabilizer directions to minimize `|log H|^2`.
fn nearest_identity(fun: &Functional, mut g: CMatrix) -> Result<CMatrix> {
    let gi = inverse(&g)?;
    let hess = fun.hessian(&g, &gi);
    let eig = hess.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let kernel: Vec<CMatrix> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i].abs() <= 1e-9 * top)
        .map(|i| fun.matrix(&eig.eigenvectors.column(i).into_owned()))
        .collect();
    if kernel.is_empty() {
        return Ok(g);
    }
    let k = kernel.len();
    let objective = |g: &CMatrix| -> Result<f64> {
        let l = log_pos(&(g.adjoint() * g))?;
        Ok(re_tr_prod(&l, &l))
    };
    for _ in 0..60 {
        let h = g.adjoint() * &g;
        let second = |eta: &CMatrix| {
            let h1 = g.adjoint() * eta * &g;
            let h2 = g.adjoint() * eta * eta * &g;
            let (l, l1, l2) = herm_fn_jet(ScalarFn::Log, &h, &h1, &h2);
            (2.0 * re_tr_prod(&l, &l1), 2.0 * (re_tr_prod(&l1, &l1) + re_tr_prod(&l, &l2)))
        };
        let grad = DVector::from_iterator(k, kernel.iter().map(|e| second(e).0));
        if grad.amax() < 1e-14 {
            break;
        }
        let diag: Vec<f64> = kernel.iter().map(|e| second(e).1).collect();
        let hmat = DMatrix::from_fn(k, k, |a, b| {
            if a == b {
                diag[a]
            } else {
                0.5 * (second(&(&kernel[a] + &kernel[b])).1 - diag[a] - diag[b])
            }
        });
        let step = -pinv_solve(&hmat, &grad, 1e-14);
        let f0 = objective(&g)?;
        let mut t = 1.0;
        loop {
            let xi = kernel.iter().zip(step.iter()).fold(CMatrix::zeros(g.nrows(), g.nrows()), |acc, (e, &s)| acc + e.scale(s * t));
            let g_new = exp_herm(&xi.scale(0.5)) * &g;
            if objective(&g_new)? <= f0 + 1e-15 || t < 1e-6 {
                g = g_new;
                break;
            }
            t *= 0.5;
        }
    }
    Ok(g)
}

/// Residual `[alpha0, alpha0^{dagger H}] + [phi, phi^{dagger H}]`, the constant-mode Hitchin equation.
pub fn hitchin_residual(data: &HiggsData, h: &CMatrix) -> Result<CMatrix> {
    let a = &data.alpha0;
    let p = &data.phi;
    Ok(comm(a, &adjoint_h(a, h)?) + comm(p, &adjoint_h(p, h)?))
}

pub fn solve_hitchin_constant(data: &HiggsData) -> Result<MetricSolution> {
    let terms = [(1.0, data.alpha0.clone()), (1.0, data.phi.clone())];
    minimize_norm_functional(&terms, None, ConvexOptions::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TwistDirection {
    /// `(D, phi, H) -> (P1, P2)`.
    Forward,
    /// `(P1, P2, H) -> (D, phi)`.
    Backward,
}

pub fn twist(data: &HiggsData, h: &CMatrix, w: C64) -> Result<FlatPair> {
    if w.norm() == 0.0 {
        return Err(Error::Domain("twist parameter w must be nonzero".into()));
    }
    let p1 = &data.alpha0 + adjoint_h(&data.phi, h)? * w;
    let p2 = -adjoint_h(&data.alpha0, h)? + &data.phi / w;
    Ok(FlatPair { p1, p2, w })
}

pub fn untwist(pair: &FlatPair, h: &CMatrix) -> Result<HiggsData> {
    let w = pair.w;
    if w.norm() == 0.0 {
        return Err(Error::Domain("twist parameter w must be nonzero".into()));
    }
    let ww = w.norm_sqr();
    let alpha0 = (&pair.p1 - adjoint_h(&pair.p2, h)?.scale(ww)).scale(1.0 / (1.0 + ww));
    let phi = (&pair.p2 + adjoint_h(&pair.p1, h)?) * (w / (1.0 + ww));
    Ok(HiggsData { n: phi.nrows(), alpha0, phi })
}

/// Residual `[p1, p1^{dagger H}] + |w|^2 [p2, p2^{dagger H}]` of the twisted equation.
pub fn twisted_residual(pair: &FlatPair, h: &CMatrix) -> Result<CMatrix> {
    let ww = pair.w.norm_sqr();
    Ok(comm(&pair.p1, &adjoint_h(&pair.p1, h)?) + comm(&pair.p2, &adjoint_h(&pair.p2, h)?).scale(ww))
}

pub fn solve_twisted_hitchin(pair: &FlatPair, init: Option<&CMatrix>) -> Result<MetricSolution> {
    let scale = 1.0 + max_abs(&pair.p1) * max_abs(&pair.p2);
    if pair.flatness_defect() > 1e-10 * scale {
        return Err(Error::Domain(format!("pair is not flat: |[P1,P2]| = {:e}", pair.flatness_defect())));
    }
    if pair.w.norm() == 0.0 {
        return Err(Error::Domain("twist parameter w must be nonzero".into()));
    }
    let terms = [(1.0, pair.p1.clone()), (pair.w.norm_sqr(), pair.p2.clone())];
    minimize_norm_functional(&terms, init, ConvexOptions::default())
}

fn orthonormal_columns(vs: &[DVector<C64>], n: usize, tol: f64) -> CMatrix {
    if vs.is_empty() {
        return CMatrix::zeros(n, 0);
    }
    let m = CMatrix::from_columns(vs);
    let svd = m.svd(true, false);
    let u = svd.u.unwrap();
    let smax = svd.singular_values.max();
    let r = svd.singular_values.iter().filter(|&&s| s > tol * smax).count();
    u.columns(0, r).into_owned()
}

fn algebra_basis(mats: &[CMatrix]) -> Vec<CMatrix> {
    let n = mats[0].nrows();
    let mut basis: Vec<CMatrix> = Vec::new();
    let add = |basis: &mut Vec<CMatrix>, x: CMatrix| -> bool {
        let mut v = x;
        for _ in 0..2 {
            for b in basis.iter() {
                let ip: C64 = b.iter().zip(v.iter()).map(|(p, q)| p.conj() * q).sum();
                v -= b * ip;
            }
        }
        let nv = fro(&v);
        if nv > 1e-9 {
            basis.push(v / c(nv));
            true
        } else {
            false
        }
    };
    add(&mut basis, CMatrix::identity(n, n).scale(1.0 / (n as f64).sqrt()));
    let gens: Vec<CMatrix> = mats.iter().map(|m| m / c(fro(m).max(1e-300))).collect();
    let mut i = 0;
    while i < basis.len() && basis.len() < n * n {
        let b = basis[i].clone();
        for g in &gens {
            add(&mut basis, g * &b);
        }
        i += 1;
    }
    basis
}

fn null_vector(m: &CMatrix) -> DVector<C64> {
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.unwrap();
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    vt.row(idx).adjoint()
}

/// Basis of a common invariant subspace, if one is found.
pub fn invariant_subspace(mats: &[CMatrix]) -> Option<CMatrix> {
    let n = mats.first()?.nrows();
    let alg = algebra_basis(mats);
    if alg.len() == n * n {
        return None;
    }
    let adj: Vec<CMatrix> = alg.iter().map(|a| a.adjoint()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..6 {
        let coeffs: Vec<C64> = alg.iter().map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
        let r = alg.iter().zip(&coeffs).fold(CMatrix::zeros(n, n), |acc, (a, &k)| acc + a * k);
        for (family, dual) in [(&alg, false), (&adj, true)] {
            let rr = if dual { r.adjoint() } else { r.clone() };
            let eigs = rr.clone().schur().eigenvalues();
            let eigs = match eigs {
                Some(e) => e,
                None => continue,
            };
            for lam in eigs.iter() {
                let v = null_vector(&(&rr - CMatrix::identity(n, n) * *lam));
                let images: Vec<DVector<C64>> = family.iter().map(|a| a * &v).collect();
                let span = orthonormal_columns(&images, n, 1e-8);
                let k = span.ncols();
                if k == 0 || k == n {
                    continue;
                }
                if !dual {
                    return Some(span);
                }
                let proj = CMatrix::identity(n, n) - &span * span.adjoint();
                let cols: Vec<DVector<C64>> = (0..n).map(|i| proj.column(i).into_owned()).collect();
                return Some(orthonormal_columns(&cols, n, 1e-8));
            }
        }
    }
    None
}

#[derive(Clone, Debug)]
pub struct Irreducibility {
    pub irreducible: bool,
    pub certificate: Option<CMatrix>,
}

pub fn is_irreducible(mats: &[CMatrix]) -> Result<Irreducibility> {
    if mats.is_empty() {
        return Err(Error::Domain("need at least one matrix".into()));
    }
    let n = mats[0].nrows();
    if algebra_basis(mats).len() == n * n {
        return Ok(Irreducibility { irreducible: true, certificate: None });
    }
    Ok(Irreducibility { irreducible: false, certificate: invariant_subspace(mats) })
}

/// `I(a,b) = (ia, ib)`.
pub fn complex_i(a: &CMatrix, b: &CMatrix) -> (CMatrix, CMatrix) {
    (a * I, b * I)
}

/// `J(a,b) = (i b^dagger, -i a^dagger)`.
pub fn complex_j(a: &CMatrix, b: &CMatrix) -> (CMatrix, CMatrix) {
    (b.adjoint() * I, a.adjoint() * (-I))
}

/// `K(a,b) = (-b^dagger, a^dagger)`.
pub fn complex_k(a: &CMatrix, b: &CMatrix) -> (CMatrix, CMatrix) {
    (-b.adjoint(), a.adjoint())
}

pub fn hyperkahler_iw(w: C64, a: &CMatrix, b: &CMatrix) -> (CMatrix, CMatrix) {
    let ww = w.norm_sqr();
    let ci = (1.0 - ww) / (1.0 + ww);
    let cj = (I * (w - w.conj())).re / (1.0 + ww);
    let ck = (w + w.conj()).re / (1.0 + ww);
    let (ia, ib) = complex_i(a, b);
    let (ja, jb) = complex_j(a, b);
    let (ka, kb) = complex_k(a, b);
    (ia.scale(ci) + ja.scale(cj) + ka.scale(ck), ib.scale(ci) + jb.scale(cj) + kb.scale(ck))
}

/// Twisted-harmonic metric of the `y = infinity` slice, pair `(0, alpha)` with `w = tan(beta)`.
pub fn boundary_metric(oper: &HoloData) -> Result<MetricSolution> {
    let pair = FlatPair { p1: CMatrix::zeros(oper.n, oper.n), p2: oper.alpha.clone(), w: c(oper.tilt.w) };
    solve_twisted_hitchin(&pair, None)
}

//! Finite-dimensional Lie algebra layer for `sl(n, C)`.
//!
//! Principal `sl2` triple, the Casimir operator, indicial roots, analytic
//! functions of `ad_s` for Hermitian `s`, and the tilt parameter dictionary.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

#[inline]
pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn comm(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b - b * a
}

/// Largest entry modulus.
pub fn max_abs(a: &CMatrix) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.norm()))
}

pub fn fro(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `Re tr(a b)`, the real pairing used on Hermitian matrices.
pub fn re_tr_prod(a: &CMatrix, b: &CMatrix) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..n {
            acc += (a[(i, k)] * b[(k, i)]).re;
        }
    }
    acc
}

pub fn hermitian_part(a: &CMatrix) -> CMatrix {
    (a + a.adjoint()).scale(0.5)
}

pub fn is_hermitian(a: &CMatrix, tol: f64) -> bool {
    max_abs(&(a - a.adjoint())) < tol
}

pub fn remove_trace(a: &CMatrix) -> CMatrix {
    let n = a.nrows();
    let tr = a.trace() / c(n as f64);
    let mut out = a.clone();
    for i in 0..n {
        out[(i, i)] -= tr;
    }
    out
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

#[derive(Clone, Debug)]
pub struct PrincipalTriple {
    pub n: usize,
    pub e_plus: CMatrix,
    pub e_minus: CMatrix,
    pub e_zero: CMatrix,
}

impl PrincipalTriple {
    /// Diagonal of `e_zero`: `n-1, n-3, ..., -(n-1)`.
    pub fn weights(&self) -> Vec<f64> {
        weights(self.n)
    }
}

pub fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| (n as f64 - 1.0) - 2.0 * i as f64).collect()
}

pub fn principal_triple(n: usize) -> Result<PrincipalTriple> {
    if n < 2 {
        return Err(Error::InvalidRank(n));
    }
    let mut e_plus = CMatrix::zeros(n, n);
    for i in 1..n {
        e_plus[(i - 1, i)] = c(((i * (n - i)) as f64).sqrt());
    }
    let e_minus = e_plus.transpose();
    let e_zero = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        n,
        weights(n).into_iter().map(c),
    ));
    Ok(PrincipalTriple { n, e_plus, e_minus, e_zero })
}

pub fn casimir_apply(triple: &PrincipalTriple, s: &CMatrix) -> Result<CMatrix> {
    if s.nrows() != triple.n || s.ncols() != triple.n {
        return Err(Error::DimensionMismatch { expected: triple.n, got: s.nrows() });
    }
    let (ep, em, e0) = (&triple.e_plus, &triple.e_minus, &triple.e_zero);
    let a = comm(ep, &comm(em, s)) + comm(em, &comm(ep, s));
    Ok(a.scale(0.5) + comm(e0, &comm(e0, s)).scale(0.25))
}

/// Orthonormal basis of traceless Hermitian `n x n` matrices under `tr(ab)`.
pub fn hermitian_basis(n: usize) -> Vec<CMatrix> {
    let mut basis = Vec::with_capacity(n * n - 1);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut x = CMatrix::zeros(n, n);
            x[(i, j)] = c(r);
            x[(j, i)] = c(r);
            basis.push(x);
            let mut y = CMatrix::zeros(n, n);
            y[(i, j)] = C64::new(0.0, -r);
            y[(j, i)] = C64::new(0.0, r);
            basis.push(y);
        }
    }
    for k in 1..n {
        let norm = ((k * (k + 1)) as f64).sqrt();
        let mut d = CMatrix::zeros(n, n);
        for i in 0..k {
            d[(i, i)] = c(1.0 / norm);
        }
        d[(k, k)] = c(-(k as f64) / norm);
        basis.push(d);
    }
    basis
}

pub fn to_coords(basis: &[CMatrix], x: &CMatrix) -> Vec<f64> {
    basis.iter().map(|b| re_tr_prod(b, x)).collect()
}

pub fn from_coords(basis: &[CMatrix], coords: &[f64]) -> CMatrix {
    let n = basis[0].nrows();
    let mut out = CMatrix::zeros(n, n);
    for (b, &v) in basis.iter().zip(coords) {
        out += b.scale(v);
    }
    out
}

/// Real symmetric matrix of the Casimir operator on traceless Hermitian matrices.
pub fn casimir_matrix(triple: &PrincipalTriple) -> DMatrix<f64> {
    let basis = hermitian_basis(triple.n);
    let d = basis.len();
    let mut m = DMatrix::<f64>::zeros(d, d);
    for (l, bl) in basis.iter().enumerate() {
        let img = casimir_apply(triple, bl).expect("square basis element");
        for (k, bk) in basis.iter().enumerate() {
            m[(k, l)] = re_tr_prod(bk, &img);
        }
    }
    (&m + m.transpose()).scale(0.5)
}

pub fn casimir_spectrum(n: usize) -> Result<Vec<f64>> {
    let triple = principal_triple(n)?;
    let eig = SymmetricEigen::new(casimir_matrix(&triple));
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    Ok(vals)
}

/// Spin label `k` with `k(k+1) = lambda`, rounded to the nearest integer.
pub fn spin_of_eigenvalue(lambda: f64) -> usize {
    ((-1.0 + (1.0 + 4.0 * lambda).sqrt()) / 2.0).round() as usize
}

/// Splits a traceless matrix into Casimir eigencomponents; entry `k - 1` holds spin `k`.
pub struct CasimirDecomposition {
    basis: Vec<CMatrix>,
    vectors: DMatrix<f64>,
    spins: Vec<usize>,
    pub n: usize,
}

impl CasimirDecomposition {
    pub fn new(triple: &PrincipalTriple) -> Self {
        let eig = SymmetricEigen::new(casimir_matrix(triple));
        let spins = eig.eigenvalues.iter().map(|&l| spin_of_eigenvalue(l)).collect();
        CasimirDecomposition {
            basis: hermitian_basis(triple.n),
            vectors: eig.eigenvectors,
            spins,
            n: triple.n,
        }
    }

    /// Components `s_k` (k = 1..n-1) with `s = sum s_k` and `Cas(s_k) = k(k+1) s_k`.
    pub fn split(&self, s: &CMatrix) -> Vec<CMatrix> {
        let herm = hermitian_part(s);
        let anti = (s - s.adjoint()).scale(0.5) * (-I);
        let mut out = vec![CMatrix::zeros(self.n, self.n); self.n - 1];
        for part in 0..2 {
            let x = if part == 0 { &herm } else { &anti };
            let coords = nalgebra::DVector::from_vec(to_coords(&self.basis, x));
            let proj = self.vectors.transpose() * coords;
            for (col, &k) in self.spins.iter().enumerate() {
                let v = self.vectors.column(col) * proj[col];
                let m = from_coords(&self.basis, v.as_slice());
                if part == 0 {
                    out[k - 1] += m;
                } else {
                    out[k - 1] += m * I;
                }
            }
        }
        out
    }
}

pub fn indicial_roots(n: usize) -> Result<Vec<f64>> {
    let spec = casimir_spectrum(n)?;
    let mut roots: Vec<f64> = Vec::new();
    for lambda in spec {
        let disc = (1.0 + 4.0 * lambda).sqrt();
        for r in [(1.0 + disc) / 2.0, (1.0 - disc) / 2.0] {
            if !roots.iter().any(|&x| (x - r).abs() < 1e-9) {
                roots.push(r);
            }
        }
    }
    roots.sort_by(|a, b| a.total_cmp(b));
    Ok(roots)
}

/// Eigenvalues (ascending order not guaranteed) and unitary eigenvectors of a Hermitian matrix.
pub fn herm_eig(s: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = SymmetricEigen::new(hermitian_part(s));
    (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
}

/// `f(s)` for Hermitian `s`.
pub fn herm_fn(s: &CMatrix, f: impl Fn(f64) -> f64) -> CMatrix {
    let (mu, v) = herm_eig(s);
    let n = mu.len();
    let mut d = v.clone();
    for j in 0..n {
        let fj = c(f(mu[j]));
        for i in 0..n {
            d[(i, j)] *= fj;
        }
    }
    d * v.adjoint()
}

pub fn exp_herm(s: &CMatrix) -> CMatrix {
    herm_fn(s, f64::exp)
}

pub fn log_pos(h: &CMatrix) -> Result<CMatrix> {
    let (mu, _) = herm_eig(h);
    if mu.iter().any(|&m| m <= 0.0) {
        return Err(Error::Decomposition("matrix is not positive definite".into()));
    }
    Ok(herm_fn(h, f64::ln))
}

pub fn sqrt_pos(h: &CMatrix) -> Result<CMatrix> {
    let (mu, _) = herm_eig(h);
    if mu.iter().any(|&m| m <= 0.0) {
        return Err(Error::Decomposition("matrix is not positive definite".into()));
    }
    Ok(herm_fn(h, f64::sqrt))
}

/// `f(ad_s) x` for Hermitian `s`: in the eigenbasis of `s`, entry `(i, j)` is scaled by `f(mu_i - mu_j)`.
pub fn ad_fn(s: &CMatrix, x: &CMatrix, f: impl Fn(f64) -> f64) -> CMatrix {
    let (mu, v) = herm_eig(s);
    let mut xt = v.adjoint() * x * &v;
    let n = mu.len();
    for i in 0..n {
        for j in 0..n {
            xt[(i, j)] *= c(f(mu[i] - mu[j]));
        }
    }
    &v * xt * v.adjoint()
}

pub fn gamma_scalar(l: f64) -> f64 {
    if l.abs() < 1e-8 {
        1.0 + l / 2.0
    } else {
        l.exp_m1() / l
    }
}

pub fn v_scalar(l: f64) -> f64 {
    if l.abs() < 1e-8 {
        1.0 - l / 4.0
    } else {
        (-(-l).exp_m1() / l).sqrt()
    }
}

/// `sinh(l/2) / (l/2)`: the tangent map of `s -> exp(s)` read in the symmetric frame.
pub fn sinhc_half(l: f64) -> f64 {
    let h = 0.5 * l;
    if h.abs() < 1e-6 {
        1.0 + h * h / 6.0
    } else {
        h.sinh() / h
    }
}

fn check_hermitian(s: &CMatrix) -> Result<()> {
    let scale = 1.0f64.max(max_abs(s));
    if !is_hermitian(s, 1e-10 * scale) {
        return Err(Error::Domain("ad-function requires a Hermitian argument".into()));
    }
    Ok(())
}

const SERIES_RADIUS: f64 = 1e-4;
const SERIES_TERMS: usize = 12;

fn ad_series(s: &CMatrix, x: &CMatrix, coeffs: &[f64]) -> CMatrix {
    let mut term = x.clone();
    let mut acc = x.scale(coeffs[0]);
    for &ck in &coeffs[1..] {
        term = comm(s, &term);
        acc += term.scale(ck);
    }
    acc
}

fn gamma_coeffs(sign: f64) -> Vec<f64> {
    gamma_coeffs_n(sign, SERIES_TERMS)
}

fn gamma_coeffs_n(sign: f64, terms: usize) -> Vec<f64> {
    let mut fact = 1.0;
    (0..terms)
        .map(|k| {
            fact *= (k + 1) as f64;
            sign.powi(k as i32) / fact
        })
        .collect()
}

fn v_coeffs() -> Vec<f64> {
    let g = gamma_coeffs(-1.0);
    let mut a = vec![0.0; SERIES_TERMS];
    a[0] = 1.0;
    for k in 1..SERIES_TERMS {
        let cross: f64 = (1..k).map(|i| a[i] * a[k - i]).sum();
        a[k] = (g[k] - cross) / 2.0;
    }
    a
}

/// `gamma(s) x = ((exp(ad_s) - 1) / ad_s) x`.
pub fn gamma_apply(s: &CMatrix, x: &CMatrix) -> Result<CMatrix> {
    check_hermitian(s)?;
    if fro(s) < SERIES_RADIUS {
        return Ok(ad_series(s, x, &gamma_coeffs(1.0)));
    }
    Ok(ad_fn(s, x, gamma_scalar))
}

/// `v(s) x = sqrt(gamma(-s)) x`, positive branch.
pub fn v_apply(s: &CMatrix, x: &CMatrix) -> Result<CMatrix> {
    check_hermitian(s)?;
    if fro(s) < SERIES_RADIUS {
        return Ok(ad_series(s, x, &v_coeffs()));
    }
    Ok(ad_fn(s, x, v_scalar))
}

/// `exp(-ad_s) x - x`, accurate when `s` is small.
pub fn conj_exp_minus_id(s: &CMatrix, x: &CMatrix) -> CMatrix {
    ad_fn(s, x, |l| (-l).exp_m1())
}

/// Scalar functions with derivatives up to fourth order, for matrix-function jets.
#[derive(Clone, Copy, Debug)]
pub enum ScalarFn {
    Exp,
    Log,
}

impl ScalarFn {
    fn derivs(self, x: f64) -> [f64; 5] {
        match self {
            ScalarFn::Exp => [x.exp(); 5],
            ScalarFn::Log => {
                let r = 1.0 / x;
                [x.ln(), r, -r * r, 2.0 * r * r * r, -6.0 * r * r * r * r]
            }
        }
    }

    fn dd1(self, a: f64, b: f64) -> f64 {
        let m = 0.5 * (a + b);
        let d = a - b;
        if d.abs() < 1e-3 * (1.0 + m.abs()) {
            let f = self.derivs(m);
            return f[1] + f[3] * d * d / 24.0;
        }
        match self {
            ScalarFn::Exp => b.exp() * d.exp_m1() / d,
            ScalarFn::Log => (d / b).ln_1p() / d,
        }
    }

    fn dd2(self, a: f64, b: f64, cc: f64) -> f64 {
        let mut v = [a, b, cc];
        v.sort_by(|x, y| x.total_cmp(y));
        let [x, y, z] = v;
        let m = (x + y + z) / 3.0;
        if z - x < 1e-3 * (1.0 + m.abs()) {
            let f = self.derivs(m);
            let (d1, d2, d3) = (x - m, y - m, z - m);
            let h2 = d1 * d1 + d2 * d2 + d3 * d3 + d1 * d2 + d1 * d3 + d2 * d3;
            return f[2] / 2.0 + f[4] * h2 / 24.0;
        }
        (self.dd1(y, z) - self.dd1(x, y)) / (z - x)
    }

    pub fn eval(self, x: f64) -> f64 {
        self.derivs(x)[0]
    }
}

/// Value, first and second `y`-derivatives of `f(A(y))` for a Hermitian path with jet `(a, a1, a2)`.
pub fn herm_fn_jet(f: ScalarFn, a: &CMatrix, a1: &CMatrix, a2: &CMatrix) -> (CMatrix, CMatrix, CMatrix) {
    let (mu, v) = herm_eig(a);
    let n = mu.len();
    let vh = v.adjoint();
    let e1 = &vh * a1 * &v;
    let e2 = &vh * a2 * &v;
    let mut f0 = CMatrix::zeros(n, n);
    let mut f1 = CMatrix::zeros(n, n);
    let mut f2 = CMatrix::zeros(n, n);
    for i in 0..n {
        f0[(i, i)] = c(f.eval(mu[i]));
        for j in 0..n {
            let d = c(f.dd1(mu[i], mu[j]));
            f1[(i, j)] = e1[(i, j)] * d;
            let mut acc = e2[(i, j)] * d;
            for k in 0..n {
                acc += e1[(i, k)] * e1[(k, j)] * c(2.0 * f.dd2(mu[i], mu[k], mu[j]));
            }
            f2[(i, j)] = acc;
        }
    }
    (&v * f0 * &vh, &v * f1 * &vh, &v * f2 * &vh)
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct TiltParams {
    pub beta: f64,
    pub t: f64,
    pub w: f64,
    pub c_minus: f64,
    pub c_plus: f64,
}

impl TiltParams {
    pub fn sin(&self) -> f64 {
        self.beta.sin()
    }
    pub fn cos(&self) -> f64 {
        self.beta.cos()
    }
}

pub fn tilt_params(beta: f64) -> Result<TiltParams> {
    let bound = std::f64::consts::PI / 6.0;
    if !beta.is_finite() || beta.abs() >= bound {
        return Err(Error::Domain(format!("beta = {beta} outside (-pi/6, pi/6)")));
    }
    if beta == 0.0 {
        return Err(Error::Domain("beta = 0 is excluded".into()));
    }
    let t = (std::f64::consts::FRAC_PI_4 - 1.5 * beta).tan();
    Ok(TiltParams {
        beta,
        t,
        w: beta.tan(),
        c_minus: 0.5 * (t - 1.0 / t),
        c_plus: 0.5 * (t + 1.0 / t),
    })
}

/// `diag(w^{(n-1)/2}, ..., w^{-(n-1)/2})` on the principal branch.
pub fn twist_gauge(n: usize, w: C64) -> Result<CMatrix> {
    if n < 2 {
        return Err(Error::InvalidRank(n));
    }
    if w.norm() == 0.0 {
        return Err(Error::Domain("twist parameter w must be nonzero".into()));
    }
    let lw = w.ln();
    let diag = weights(n).into_iter().map(|p| (lw * (0.5 * p)).exp());
    Ok(CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, diag)))
}

/// Random traceless Hermitian matrix with entries of order `scale`.
pub fn random_hermitian<R: rand::Rng>(rng: &mut R, n: usize, scale: f64) -> CMatrix {
    let coords: Vec<f64> = (0..n * n - 1).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
    from_coords(&hermitian_basis(n), &coords)
}

pub fn random_matrix<R: rand::Rng>(rng: &mut R, n: usize, scale: f64) -> CMatrix {
    CMatrix::from_fn(n, n, |_, _| {
        C64::new(2.0 * rng.random::<f64>() - 1.0, 2.0 * rng.random::<f64>() - 1.0) * scale
    })
}

pub fn random_unitary<R: rand::Rng>(rng: &mut R, n: usize) -> CMatrix {
    let h = random_hermitian(rng, n, 1.5);
    herm_fn_complex(&h, |x| (I * x).exp())
}

/// Complex-valued function of a Hermitian matrix.
pub fn herm_fn_complex(s: &CMatrix, f: impl Fn(f64) -> C64) -> CMatrix {
    let (mu, v) = herm_eig(s);
    let mut d = v.clone();
    for j in 0..mu.len() {
        let fj = f(mu[j]);
        for i in 0..mu.len() {
            d[(i, j)] *= fj;
        }
    }
    d * v.adjoint()
}

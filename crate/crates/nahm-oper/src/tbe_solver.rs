//! Continuity-method solver for the Sigma-invariant equations on a graded mesh.
//!
//! A metric is stored as `H = g^dagger W e^sigma W g` with `g` the analytic background
//! frame, `W = e^{rho0/2}` an optional discrete reference deformation and `sigma` the
//! unknown. The discrete moment map is the weighted gradient of a geodesic energy on
//! the node metrics, so the Newton Hessian is symmetric. A fixed defect term makes the
//! discrete moment map of the background equal its exact value.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry_fields::{
    chern_fields, d_y, d_yy, weighted_norm, FrameField, GradedMesh, HoloData, MatField, UnitaryFields, WeightedNorm,
};
use crate::hitchin_flat::{hitchin_fibration, section_from_fibration, untwist, FlatPair};
use crate::lie_core::{
    ad_fn, c, comm, exp_herm, fro, gamma_scalar, herm_fn, herm_fn_jet, hermitian_basis, hermitian_part, log_pos,
    max_abs, re_tr_prod, sinhc_half, to_coords, from_coords, CMatrix, ScalarFn, C64,
};
use crate::nahm_model_approx::{build_h0, AdmissibleMetric, OperPoint};

/// Analytic background sampled on a Sigma-invariant mesh.
#[derive(Debug)]
pub struct Background {
    pub mesh: Arc<GradedMesh>,
    pub holo: HoloData,
    pub frame: FrameField,
    /// Model transport `h_{i+1} h_i^{-1}` per edge, diagonal.
    model_diag: Vec<Vec<f64>>,
    /// `e^{S/2} - I` and `e^{-S/2} - I` per node.
    half_dev: Vec<CMatrix>,
    half_inv_dev: Vec<CMatrix>,
    /// `g alpha g^{-1}` at nodes.
    higgs: Vec<CMatrix>,
    pub omega_exact: Vec<CMatrix>,
    /// Discrete minus exact moment map of the background, zero on boundary rows.
    defect: Vec<CMatrix>,
    /// Log-transport excess over the model part at the background, per edge.
    excess_fwd: Vec<CMatrix>,
    excess_bwd: Vec<CMatrix>,
    pub admissible: AdmissibleMetric,
}

fn inverse(m: &CMatrix) -> Result<CMatrix> {
    m.clone().try_inverse().ok_or_else(|| Error::Decomposition("singular frame".into()))
}

/// `e^{k s} - I` without cancellation.
fn exp_dev(s: &CMatrix, k: f64) -> CMatrix {
    herm_fn(s, |x| (k * x).exp_m1())
}

/// `(I + a)(I + b) - I`.
fn compose_dev(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a + b + a * b
}

fn diag_mat(d: &[f64]) -> CMatrix {
    CMatrix::from_diagonal(&DVector::from_iterator(d.len(), d.iter().map(|&x| c(x))))
}

/// `log(D^2 + delta) - log(D^2)` for positive diagonal `D^2`, accurate to `eps |delta|` when
/// `delta` is small against the gaps of `D^2`; falls back to a direct logarithm otherwise.
fn log_excess(d2: &[f64], delta: &CMatrix) -> Result<CMatrix> {
    let n = d2.len();
    let gap = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| (d2[i] - d2[j]).abs())
        .fold(f64::INFINITY, f64::min);
    let log_d2: Vec<f64> = d2.iter().map(|x| x.ln()).collect();
    let direct = || -> Result<CMatrix> {
        let p = diag_mat(d2) + delta;
        Ok(log_pos(&hermitian_part(&p))? - diag_mat(&log_d2))
    };
    if n == 1 || fro(delta) >= 0.2 * gap {
        return direct();
    }
    let mut out = CMatrix::zeros(n, n);
    for k in 0..n {
        let rest: Vec<usize> = (0..n).filter(|&j| j != k).collect();
        let m = rest.len();
        let col = DVector::from_iterator(m, rest.iter().map(|&j| delta[(j, k)]));
        let mut shift = delta[(k, k)].re;
        let mut w = DVector::zeros(m);
        let mut converged = false;
        for _ in 0..200 {
            // Brillouin-Wigner fixed point for the eigenpair continuing e_k.
            let mut a = CMatrix::zeros(m, m);
            for (r, &jr) in rest.iter().enumerate() {
                for (s, &js) in rest.iter().enumerate() {
                    a[(r, s)] = -delta[(jr, js)];
                }
                a[(r, r)] += c(d2[k] - d2[jr] + shift);
            }
            let Some(wn) = a.lu().solve(&col) else { return direct() };
            let next = delta[(k, k)].re + rest.iter().zip(wn.iter()).map(|(&j, z)| (delta[(k, j)] * z).re).sum::<f64>();
            let done = (next - shift).abs() <= 1e-16 * (next.abs() + d2[k] * 1e-3) && (&wn - &w).norm() <= 1e-15 * wn.norm();
            shift = next;
            w = wn;
            if done {
                converged = true;
                break;
            }
        }
        if !converged {
            return direct();
        }
        let mut wfull = CMatrix::zeros(n, 1);
        for (r, &j) in rest.iter().enumerate() {
            wfull[(j, 0)] = w[r];
        }
        let mut ek = CMatrix::zeros(n, 1);
        ek[(k, 0)] = c(1.0);
        let wn2 = w.norm_squared();
        let norm2 = 1.0 + wn2;
        let v = &ek + &wfull;
        let proj = &v * v.adjoint() / c(norm2);
        let proj_dev = (&ek * wfull.adjoint() + &wfull * ek.adjoint() + &wfull * wfull.adjoint()
            - (&ek * ek.adjoint()).scale(wn2))
            / c(norm2);
        out += proj.scale((shift / d2[k]).ln_1p()) + proj_dev.scale(log_d2[k]);
    }
    Ok(hermitian_part(&out))
}

/// Log-transport excess across one edge for frame factors `G_l = I + gl`, `G_r = I + gr`.
fn edge_excess(d: &[f64], gl_inv: &CMatrix, gr: &CMatrix) -> Result<CMatrix> {
    let dm = diag_mat(d);
    let y = gl_inv * &dm + &dm * gr + gl_inv * &dm * gr;
    let delta = &dm * y.adjoint() + &y * &dm + &y * y.adjoint();
    let d2: Vec<f64> = d.iter().map(|x| x * x).collect();
    log_excess(&d2, &hermitian_part(&delta))
}

fn model_log(d: &[f64]) -> CMatrix {
    diag_mat(&d.iter().map(|x| (x * x).ln()).collect::<Vec<_>>())
}

impl Background {
    pub fn new(h0: &AdmissibleMetric, mesh: Arc<GradedMesh>) -> Result<Arc<Self>> {
        if mesh.torus_size != 1 {
            return Err(Error::Domain("the continuity solver runs on Sigma-invariant meshes only".into()));
        }
        let n = h0.op.n;
        let holo = h0.holo()?;
        let frame = h0.frame(&mesh);
        let ny = mesh.ny();
        let w = h0.triple.weights();
        let mut half_dev = Vec::with_capacity(ny);
        let mut half_inv_dev = Vec::with_capacity(ny);
        let mut higgs = Vec::with_capacity(ny);
        let mut omega_exact = Vec::with_capacity(ny);
        for &y in &mesh.y {
            let s = &h0.sigma_jet(y)[0];
            let (e, ei) = (exp_dev(s, 0.5), exp_dev(s, -0.5));
            let id = CMatrix::identity(n, n);
            higgs.push((&id + &e) * h0.model_higgs_at(y) * (&id + &ei));
            omega_exact.push(h0.omega_at(y));
            half_dev.push(e);
            half_inv_dev.push(ei);
        }
        let model_diag: Vec<Vec<f64>> = (0..ny - 1)
            .map(|i| {
                let r = mesh.y[i + 1] / mesh.y[i];
                w.iter().map(|&p| r.powf(-0.5 * p)).collect()
            })
            .collect();
        let mut bg = Background {
            mesh,
            holo,
            frame,
            model_diag,
            half_dev,
            half_inv_dev,
            higgs,
            omega_exact,
            defect: vec![CMatrix::zeros(n, n); ny],
            excess_fwd: Vec::new(),
            excess_bwd: Vec::new(),
            admissible: h0.clone(),
        };
        let (fwd, bwd) = edge_excesses(&bg, &bg.half_dev, &bg.half_inv_dev)?;
        bg.excess_fwd = fwd;
        bg.excess_bwd = bwd;
        let s2 = bg.holo.tilt.sin().powi(2);
        for i in 1..ny - 1 {
            let m = &bg.mesh;
            let lf = model_log(&bg.model_diag[i]) + &bg.excess_fwd[i];
            let inv: Vec<f64> = bg.model_diag[i - 1].iter().map(|x| 1.0 / x).collect();
            let lb = model_log(&inv) + &bg.excess_bwd[i - 1];
            let kin = (lf / c(m.h(i)) + lb / c(m.h(i - 1))).scale(-1.0 / m.weight(i));
            let om = kin + comm(&bg.higgs[i], &bg.higgs[i].adjoint()).scale(s2);
            bg.defect[i] = hermitian_part(&(om - &bg.omega_exact[i]));
        }
        Ok(Arc::new(bg))
    }

    pub fn for_oper(op: &OperPoint, order: usize, mesh: Arc<GradedMesh>) -> Result<Arc<Self>> {
        Background::new(&build_h0(op, order)?, mesh)
    }

    pub fn n(&self) -> usize {
        self.holo.n
    }

    pub fn ny(&self) -> usize {
        self.mesh.ny()
    }

    pub fn zero_field(&self) -> Vec<CMatrix> {
        vec![CMatrix::zeros(self.n(), self.n()); self.ny()]
    }

    /// Discrete minus exact moment map of the background.
    pub fn defect(&self) -> &[CMatrix] {
        &self.defect
    }
}

/// Excesses for all edges; `excess_bwd[i]` is the edge `i+1 -> i`.
fn edge_excesses(bg: &Background, g: &[CMatrix], g_inv: &[CMatrix]) -> Result<(Vec<CMatrix>, Vec<CMatrix>)> {
    let mut fwd = Vec::with_capacity(g.len() - 1);
    let mut bwd = Vec::with_capacity(g.len() - 1);
    for i in 0..g.len() - 1 {
        let d = &bg.model_diag[i];
        let dinv: Vec<f64> = d.iter().map(|x| 1.0 / x).collect();
        fwd.push(edge_excess(d, &g_inv[i], &g[i + 1])?);
        bwd.push(edge_excess(&dinv, &g_inv[i + 1], &g[i])?);
    }
    Ok((fwd, bwd))
}

/// Node-wise data of the discrete moment map at one metric.
pub struct Evaluation {
    /// Moment map in the frame `e^{sigma/2} W g`, zero on boundary rows.
    pub omega: Vec<CMatrix>,
    /// Log-transport to the right neighbour, per edge.
    pub log_fwd: Vec<CMatrix>,
    pub higgs: Vec<CMatrix>,
    /// `log(W e^sigma W)`.
    pub rho: Vec<CMatrix>,
}

/// Background with a discrete reference deformation `rho0`; the unknown lives in its frame.
pub struct Reference {
    pub bg: Arc<Background>,
    pub rho0: Vec<CMatrix>,
    w: Vec<CMatrix>,
    w_dev: Vec<CMatrix>,
    w_inv_dev: Vec<CMatrix>,
    deformed: bool,
}

impl Reference {
    pub fn new(bg: Arc<Background>, rho0: Option<&[CMatrix]>) -> Result<Self> {
        let (n, ny) = (bg.n(), bg.ny());
        let Some(rho0) = rho0 else {
            return Ok(Reference {
                rho0: bg.zero_field(),
                w: vec![CMatrix::identity(n, n); ny],
                w_dev: bg.zero_field(),
                w_inv_dev: bg.zero_field(),
                deformed: false,
                bg,
            });
        };
        if rho0.len() != ny {
            return Err(Error::DimensionMismatch { expected: ny, got: rho0.len() });
        }
        Ok(Reference {
            w: rho0.iter().map(|r| exp_herm(&r.scale(0.5))).collect(),
            w_dev: rho0.iter().map(|r| exp_dev(r, 0.5)).collect(),
            w_inv_dev: rho0.iter().map(|r| exp_dev(r, -0.5)).collect(),
            rho0: rho0.to_vec(),
            deformed: true,
            bg,
        })
    }

    pub fn evaluate(&self, sigma: &[CMatrix]) -> Result<Evaluation> {
        let bg = &self.bg;
        let mesh = &bg.mesh;
        let ny = mesh.ny();
        let n = bg.n();
        if sigma.len() != ny {
            return Err(Error::DimensionMismatch { expected: ny, got: sigma.len() });
        }
        let s2 = bg.holo.tilt.sin().powi(2);
        // Frame factors relative to the model: G = e^{S/2} W e^{sigma/2}, and G' = W e^{sigma/2}.
        let sig_dev: Vec<CMatrix> = sigma.iter().map(|s| exp_dev(s, 0.5)).collect();
        let sig_inv_dev: Vec<CMatrix> = sigma.iter().map(|s| exp_dev(s, -0.5)).collect();
        let inner: Vec<CMatrix> = (0..ny).map(|i| compose_dev(&self.w_dev[i], &sig_dev[i])).collect();
        let inner_inv: Vec<CMatrix> = (0..ny).map(|i| compose_dev(&sig_inv_dev[i], &self.w_inv_dev[i])).collect();
        let g: Vec<CMatrix> = (0..ny).map(|i| compose_dev(&bg.half_dev[i], &inner[i])).collect();
        let g_inv: Vec<CMatrix> = (0..ny).map(|i| compose_dev(&inner_inv[i], &bg.half_inv_dev[i])).collect();
        let (fwd, bwd) = edge_excesses(bg, &g, &g_inv)?;
        let rho: Vec<CMatrix> = if self.deformed {
            (0..ny)
                .map(|i| log_pos(&hermitian_part(&(&self.w[i] * exp_herm(&sigma[i]) * &self.w[i]))))
                .collect::<Result<Vec<_>>>()?
        } else {
            sigma.to_vec()
        };
        let mut higgs = Vec::with_capacity(ny);
        let mut omega = vec![CMatrix::zeros(n, n); ny];
        for i in 0..ny {
            let big = &bg.higgs[i];
            // e^{sigma/2} W - I and W^{-1} e^{-sigma/2} - I.
            let u = compose_dev(&sig_dev[i], &self.w_dev[i]);
            let v = compose_dev(&self.w_inv_dev[i], &sig_inv_dev[i]);
            let (u, v) = (&u, &v);
            let dm = u * big + big * v + u * big * v;
            let m = big + &dm;
            if i > 0 && i + 1 < ny {
                let (hm, hp) = (mesh.h(i - 1), mesh.h(i));
                let dfwd = &fwd[i] - &bg.excess_fwd[i];
                let dbwd = &bwd[i - 1] - &bg.excess_bwd[i - 1];
                let kin = (dfwd / c(hp) + dbwd / c(hm)).scale(-1.0 / mesh.weight(i));
                let pot = (comm(big, &dm.adjoint()) + comm(&dm, &big.adjoint()) + comm(&dm, &dm.adjoint())).scale(s2);
                let c0 = &bg.defect[i];
                // c - U^dagger Phi(rho)^{-1}(c) U, with U = I when undeformed.
                let corr = if self.deformed {
                    let u = exp_herm(&rho[i].scale(0.5)) * (CMatrix::identity(n, n) + v);
                    c0 - u.adjoint() * ad_fn(&rho[i], c0, |l| 1.0 / sinhc_half(l)) * u
                } else {
                    ad_fn(&rho[i], c0, |l| 1.0 - 1.0 / sinhc_half(l))
                };
                omega[i] = hermitian_part(&(&bg.omega_exact[i] + kin + pot + corr));
            }
            higgs.push(m);
        }
        let log_fwd = (0..ny - 1).map(|i| model_log(&bg.model_diag[i]) + &fwd[i]).collect();
        Ok(Evaluation { omega, log_fwd, higgs, rho })
    }

    /// `N_t(sigma) = Omega + t sigma` on interior rows.
    pub fn nt_residual(&self, sigma: &[CMatrix], t: f64) -> Result<Vec<CMatrix>> {
        let ev = self.evaluate(sigma)?;
        let ny = self.bg.ny();
        Ok((0..ny)
            .map(|i| if i == 0 || i == ny - 1 { ev.omega[i].scale(0.0) } else { &ev.omega[i] + sigma[i].scale(t) })
            .collect())
    }

    /// Discrete Donaldson-type energy whose weighted gradient is `Phi(sigma) N_t`.
    pub fn energy(&self, sigma: &[CMatrix], t: f64) -> Result<f64> {
        let ev = self.evaluate(sigma)?;
        Ok(self.energy_of(&ev, sigma, t))
    }

    fn energy_of(&self, ev: &Evaluation, sigma: &[CMatrix], t: f64) -> f64 {
        let mesh = &self.bg.mesh;
        let s2 = self.bg.holo.tilt.sin().powi(2);
        let ny = mesh.ny();
        let mut e = 0.0;
        for i in 0..ny - 1 {
            e += fro(&ev.log_fwd[i]).powi(2) / (2.0 * mesh.h(i));
        }
        for i in 0..ny {
            let w = mesh.weight(i);
            e += w * s2 * fro(&ev.higgs[i]).powi(2);
            if i > 0 && i < ny - 1 {
                e -= w * re_tr_prod(&self.bg.defect[i], &ev.rho[i]);
                e += 0.5 * t * w * fro(&sigma[i]).powi(2);
            }
        }
        e
    }
}

/// Coordinates of the interior unknowns in an orthonormal traceless Hermitian basis.
struct Coords {
    basis: Vec<CMatrix>,
    ny: usize,
}

impl Coords {
    fn dim(&self) -> usize {
        self.basis.len()
    }

    fn pack(&self, f: &[CMatrix]) -> DVector<f64> {
        let d = self.dim();
        let mut v = DVector::zeros(d * (self.ny - 2));
        for i in 1..self.ny - 1 {
            for (k, x) in to_coords(&self.basis, &f[i]).into_iter().enumerate() {
                v[(i - 1) * d + k] = x;
            }
        }
        v
    }

    fn unpack_add(&self, base: &[CMatrix], v: &DVector<f64>, lambda: f64) -> Vec<CMatrix> {
        let d = self.dim();
        let mut out = base.to_vec();
        for i in 1..self.ny - 1 {
            let coords: Vec<f64> = (0..d).map(|k| lambda * v[(i - 1) * d + k]).collect();
            out[i] += from_coords(&self.basis, &coords);
        }
        out
    }
}

/// Weighted gradient `w_i Phi(sigma_i) N_t(sigma)_i` of the discrete energy.
fn gradient(r: &Reference, sigma: &[CMatrix], t: f64) -> Result<Vec<CMatrix>> {
    let nt = r.nt_residual(sigma, t)?;
    let mesh = &r.bg.mesh;
    Ok((0..sigma.len()).map(|i| ad_fn(&sigma[i], &nt[i], sinhc_half).scale(mesh.weight(i))).collect())
}

/// Block tridiagonal symmetric matrix: `diag[i]`, `upper[i]` couples unknown blocks `i` and `i+1`.
pub struct BlockTridiag {
    pub diag: Vec<DMatrix<f64>>,
    pub upper: Vec<DMatrix<f64>>,
}

impl BlockTridiag {
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = self.diag[0].nrows();
        let m = self.diag.len();
        let mut y = DVector::zeros(x.len());
        for i in 0..m {
            let xi = x.rows(i * d, d);
            let mut yi = &self.diag[i] * xi;
            if i + 1 < m {
                yi += &self.upper[i] * x.rows((i + 1) * d, d);
            }
            if i > 0 {
                yi += self.upper[i - 1].transpose() * x.rows((i - 1) * d, d);
            }
            y.rows_mut(i * d, d).copy_from(&yi);
        }
        y
    }

    /// Block Cholesky factorization; `None` when the matrix is not positive definite.
    fn factor(&self, shift: f64) -> Option<Vec<(Cholesky<f64, nalgebra::Dyn>, DMatrix<f64>)>> {
        let d = self.diag[0].nrows();
        let mut out: Vec<(Cholesky<f64, nalgebra::Dyn>, DMatrix<f64>)> = Vec::with_capacity(self.diag.len());
        for i in 0..self.diag.len() {
            let mut s = &self.diag[i] + DMatrix::identity(d, d) * shift;
            if i > 0 {
                let b = &self.upper[i - 1];
                let prev = &out[i - 1].0;
                s -= b.transpose() * prev.solve(b);
            }
            let ch = Cholesky::new(s)?;
            let b = if i + 1 < self.diag.len() { self.upper[i].clone() } else { DMatrix::zeros(d, d) };
            out.push((ch, b));
        }
        Some(out)
    }

    fn solve_factored(f: &[(Cholesky<f64, nalgebra::Dyn>, DMatrix<f64>)], r: &DVector<f64>) -> DVector<f64> {
        let m = f.len();
        let d = f[0].1.nrows();
        let mut z: Vec<DVector<f64>> = Vec::with_capacity(m);
        for i in 0..m {
            let mut ri: DVector<f64> = r.rows(i * d, d).into_owned();
            if i > 0 {
                ri -= f[i - 1].1.transpose() * f[i - 1].0.solve(&z[i - 1]);
            }
            z.push(ri);
        }
        let mut x: Vec<DVector<f64>> = vec![DVector::zeros(d); m];
        for i in (0..m).rev() {
            let mut rhs = z[i].clone();
            if i + 1 < m {
                rhs -= &f[i].1 * &x[i + 1];
            }
            x[i] = f[i].0.solve(&rhs);
        }
        let mut out = DVector::zeros(r.len());
        for i in 0..m {
            out.rows_mut(i * d, d).copy_from(&x[i]);
        }
        out
    }
}

/// Hessian of the discrete energy by colored central differences of the gradient.
fn hessian(r: &Reference, co: &Coords, sigma: &[CMatrix], t: f64) -> Result<BlockTridiag> {
    let d = co.dim();
    let m = co.ny - 2;
    let mut diag = vec![DMatrix::zeros(d, d); m];
    let mut lower = vec![DMatrix::zeros(d, d); m.saturating_sub(1)];
    let mut upper = vec![DMatrix::zeros(d, d); m.saturating_sub(1)];
    let step = 1e-5;
    for color in 0..3 {
        for k in 0..d {
            let mut plus = sigma.to_vec();
            let mut minus = sigma.to_vec();
            for i in (1..co.ny - 1).filter(|i| (i - 1) % 3 == color) {
                plus[i] += co.basis[k].scale(step);
                minus[i] -= co.basis[k].scale(step);
            }
            let gp = gradient(r, &plus, t)?;
            let gm = gradient(r, &minus, t)?;
            for j in 1..co.ny - 1 {
                let col = to_coords(&co.basis, &((&gp[j] - &gm[j]).scale(0.5 / step)));
                // The perturbed node within {j-1, j, j+1} carrying this color.
                let jb = j - 1;
                for (src, slot) in [(jb.wrapping_sub(1), 0usize), (jb, 1), (jb + 1, 2)] {
                    if src >= m || src % 3 != color {
                        continue;
                    }
                    for (row, &v) in col.iter().enumerate() {
                        match slot {
                            0 => lower[src][(row, k)] = v,
                            1 => diag[jb][(row, k)] = v,
                            _ => upper[jb][(row, k)] = v,
                        }
                    }
                }
            }
        }
    }
    // lower[src] holds d g_{src+1} / d x_src, upper[jb] holds d g_jb / d x_{jb+1}.
    let diag = diag.into_iter().map(|a| (&a + a.transpose()).scale(0.5)).collect();
    let upper = upper.iter().zip(&lower).map(|(u, l)| (u + l.transpose()).scale(0.5)).collect();
    Ok(BlockTridiag { diag, upper })
}

/// Preconditioned conjugate gradients; returns the solution and iteration count.
fn pcg(a: &BlockTridiag, b: &DVector<f64>, tol: f64, max_iter: usize) -> Result<(DVector<f64>, usize)> {
    let mut shift = 0.0;
    let scale = a.diag.iter().map(|m| m.diagonal().amax()).fold(0.0, f64::max);
    let fac = loop {
        if let Some(f) = a.factor(shift) {
            break f;
        }
        shift = if shift == 0.0 { 1e-8 * scale } else { shift * 10.0 };
        if shift > scale {
            return Err(Error::NotConverged("CG breakdown: Hessian not positive after shifting".into()));
        }
    };
    let mut x = DVector::zeros(b.len());
    let mut res = b.clone();
    let mut z = BlockTridiag::solve_factored(&fac, &res);
    let mut p = z.clone();
    let mut rz = res.dot(&z);
    let bnorm = b.norm().max(f64::MIN_POSITIVE);
    for it in 0..max_iter {
        if res.norm() <= tol * bnorm {
            return Ok((x, it));
        }
        let ap = a.apply(&p);
        let curv = p.dot(&ap);
        if curv <= 0.0 {
            if it == 0 || shift > 0.0 {
                // Indefinite direction: fall back to the preconditioned step.
                return Ok((z, it));
            }
            return Ok((x, it));
        }
        let alpha = rz / curv;
        x += &p * alpha;
        res -= &ap * alpha;
        z = BlockTridiag::solve_factored(&fac, &res);
        let rz_new = res.dot(&z);
        p = &z + &p * (rz_new / rz);
        rz = rz_new;
    }
    Ok((x, max_iter))
}

fn sup_norm(f: &[CMatrix]) -> f64 {
    f.iter().map(fro).fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct ContinuitySchedule {
    pub t_values: Vec<f64>,
    /// Tolerance on `sup |N_t|` for stages with `t > 0`.
    pub stage_tol: f64,
    /// Tolerance on `sup |Omega|` at `t = 0`.
    pub final_tol: f64,
    pub max_iter: usize,
}

impl ContinuitySchedule {
    /// `t = 1, 1/2, ..., 2^-halvings, 0`.
    pub fn geometric(halvings: u32, final_tol: f64) -> Self {
        let mut t_values: Vec<f64> = (0..=halvings).map(|k| 0.5f64.powi(k as i32)).collect();
        t_values.push(0.0);
        ContinuitySchedule { t_values, stage_tol: 1e-7, final_tol, max_iter: 60 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Domain("continuity schedule must be strictly decreasing".into()));
        }
        if self.t_values.last() != Some(&0.0) {
            return Err(Error::Domain("continuity schedule must end at t = 0".into()));
        }
        if self.t_values.iter().any(|&t| t < 0.0) {
            return Err(Error::Domain("continuity parameters must be nonnegative".into()));
        }
        Ok(())
    }
}

impl Default for ContinuitySchedule {
    fn default() -> Self {
        ContinuitySchedule::geometric(10, 1e-8)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HistoryEntry {
    pub t: f64,
    pub iteration: usize,
    pub energy: f64,
    pub residual_sup: f64,
    pub step: f64,
    pub cg_iterations: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct PoleFit {
    /// Relative deviations of `y A_z`, `y phi_z`, `y phi_1` from `sin e+`, `cos e+`, `(i/2) cos e0` at the smallest node.
    pub a_z: f64,
    pub phi_z: f64,
    pub phi_1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlatLimit {
    /// `D2` matrix at `y_max` in the unitary frame, as `[re, im]` rows.
    pub p2: Vec<Vec<[f64; 2]>>,
    pub twisted_residual: f64,
    /// Fitted exponential decay rate of `|[D2, D2^dagger]|` and the fit quality.
    pub decay_rate: f64,
    pub r_squared: f64,
    pub predicted_rate: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub omega_sup: f64,
    pub omega_weighted: WeightedNorm,
    pub s_weighted: WeightedNorm,
    pub s_sup: f64,
    pub history: Vec<HistoryEntry>,
    pub last_t: f64,
    pub pole_fit: Option<PoleFit>,
    pub flat_limit: Option<FlatLimit>,
    pub mesh_nodes: usize,
    pub y_min: f64,
    pub y_max: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct NormWeights {
    pub mu: f64,
    pub delta: f64,
}

impl Default for NormWeights {
    fn default() -> Self {
        NormWeights { mu: 1.0, delta: 0.5 }
    }
}

pub struct Solution {
    pub reference: Reference,
    pub sigma: Vec<CMatrix>,
    pub report: SolveReport,
}

impl Solution {
    pub fn sigma_field(&self) -> MatField {
        to_field(&self.reference.bg.mesh, &self.sigma)
    }

    pub fn fields(&self) -> Result<UnitaryFields> {
        solution_fields(&self.reference, &self.sigma)
    }

    pub fn frame(&self) -> MatField {
        let bg = &self.reference.bg;
        let g: Vec<CMatrix> = (0..bg.ny())
            .map(|i| exp_herm(&self.sigma[i].scale(0.5)) * &self.reference.w[i] * bg.frame.g.at(i, 0))
            .collect();
        to_field(&bg.mesh, &g)
    }
}

pub fn to_field(mesh: &GradedMesh, v: &[CMatrix]) -> MatField {
    MatField::from_fn(mesh, v[0].nrows(), |iy, _| v[iy].clone())
}

pub fn from_field(f: &MatField) -> Vec<CMatrix> {
    f.data.clone()
}

/// Damped Newton at fixed `t`, warm-started; returns the final residual.
fn newton_stage(
    r: &Reference,
    co: &Coords,
    sigma: &mut Vec<CMatrix>,
    t: f64,
    tol: f64,
    max_iter: usize,
    history: &mut Vec<HistoryEntry>,
) -> Result<f64> {
    let mut res = sup_norm(&r.nt_residual(sigma, t)?);
    let mut f = r.energy(sigma, t)?;
    history.push(HistoryEntry { t, iteration: 0, energy: f, residual_sup: res, step: 0.0, cg_iterations: 0 });
    for it in 1..=max_iter {
        if res < tol {
            return Ok(res);
        }
        let g = co.pack(&gradient(r, sigma, t)?);
        let h = hessian(r, co, sigma, t)?;
        let (p, cg_it) = pcg(&h, &(-&g), 1e-12, 50)?;
        let slope = g.dot(&p);
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = co.unpack_add(sigma, &p, lambda);
            if let (Ok(ft), Ok(nt)) = (r.energy(&trial, t), r.nt_residual(&trial, t)) {
                let rt = sup_norm(&nt);
                let armijo = ft <= f + 1e-4 * lambda * slope;
                // Near convergence energy differences drown in roundoff; accept on residual decrease.
                let flat = (ft - f).abs() <= 1e-11 * f.abs().max(1.0) && rt < res;
                if armijo || flat {
                    accepted = Some((trial, ft, rt));
                    break;
                }
            }
            lambda *= 0.5;
        }
        let Some((trial, ft, rt)) = accepted else {
            return Err(Error::NotConverged(format!("line search failed at t = {t}, residual {res:e}")));
        };
        *sigma = trial;
        f = ft.min(f);
        res = rt;
        history.push(HistoryEntry { t, iteration: it, energy: f, residual_sup: res, step: lambda, cg_iterations: cg_it });
    }
    if res < tol {
        Ok(res)
    } else {
        Err(Error::NotConverged(format!("stage t = {t} stopped at residual {res:e}")))
    }
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub schedule: ContinuitySchedule,
    /// Background series order; defaults to `n`.
    pub order: Option<usize>,
    pub norms: NormWeights,
    pub initial: Option<Vec<CMatrix>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { schedule: ContinuitySchedule::default(), order: None, norms: NormWeights::default(), initial: None }
    }
}

pub fn continuity_solve(op: &OperPoint, mesh: Arc<GradedMesh>, opts: &SolveOptions) -> Result<Solution> {
    let bg = Background::for_oper(op, opts.order.unwrap_or(op.n), mesh)?;
    solve_on(Reference::new(bg, None)?, opts)
}

/// Runs the continuity schedule on a prepared reference.
pub fn solve_on(reference: Reference, opts: &SolveOptions) -> Result<Solution> {
    opts.schedule.validate()?;
    let start = Instant::now();
    let bg = reference.bg.clone();
    let ny = bg.ny();
    let co = Coords { basis: hermitian_basis(bg.n()), ny };
    let mut sigma = match &opts.initial {
        Some(s) if s.len() == ny => s.clone(),
        Some(s) => return Err(Error::DimensionMismatch { expected: ny, got: s.len() }),
        None => bg.zero_field(),
    };
    let mut history = Vec::new();
    let mut last_t = f64::NAN;
    for &t in &opts.schedule.t_values {
        let tol = if t == 0.0 { opts.schedule.final_tol } else { opts.schedule.stage_tol };
        newton_stage(&reference, &co, &mut sigma, t, tol, opts.schedule.max_iter, &mut history)
            .map_err(|e| Error::NotConverged(format!("{e}; last good t = {last_t}")))?;
        last_t = t;
    }
    let ev = reference.evaluate(&sigma)?;
    let omega_sup = sup_norm(&ev.omega);
    let mesh = &bg.mesh;
    let omega_weighted = weighted_norm(mesh, &to_field(mesh, &ev.omega), opts.norms.mu, opts.norms.delta, 0)?;
    let s_weighted = weighted_norm(mesh, &to_field(mesh, &sigma), opts.norms.mu, opts.norms.delta, 1)?;
    let s_sup = sup_norm(&sigma);
    let fields = solution_fields(&reference, &sigma)?;
    let report = SolveReport {
        omega_sup,
        omega_weighted,
        s_weighted,
        s_sup,
        history,
        last_t,
        pole_fit: Some(pole_fit(&fields, &bg.holo)),
        flat_limit: flat_limit(&fields, &bg.holo).ok(),
        mesh_nodes: ny,
        y_min: mesh.y_min(),
        y_max: mesh.y_max(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(Solution { reference, sigma, report })
}

/// Unitary-gauge fields of the metric `H = g^dagger W e^sigma W g`.
pub fn solution_fields(r: &Reference, sigma: &[CMatrix]) -> Result<UnitaryFields> {
    let bg = &r.bg;
    let mesh = &bg.mesh;
    let total: Vec<CMatrix> = if r.deformed {
        (0..bg.ny()).map(|i| log_pos(&hermitian_part(&(&r.w[i] * exp_herm(&sigma[i]) * &r.w[i])))).collect::<Result<_>>()?
    } else {
        sigma.to_vec()
    };
    chern_fields(mesh.clone(), &bg.holo, &bg.frame, &to_field(mesh, &total))
}

fn pole_fit(f: &UnitaryFields, holo: &HoloData) -> PoleFit {
    let t = crate::lie_core::principal_triple(holo.n).expect("rank checked");
    let (s, co) = (holo.tilt.sin(), holo.tilt.cos());
    let y = f.mesh.y[0];
    let rel = |m: &CMatrix, target: CMatrix| max_abs(&(m.scale(y) - &target)) / max_abs(&target);
    PoleFit {
        a_z: rel(f.a_z.at(0, 0), t.e_plus.scale(s)),
        phi_z: rel(f.phi_z.at(0, 0), t.e_plus.scale(co)),
        phi_1: rel(f.phi_1.at(0, 0), t.e_zero.map(|z| z * C64::new(0.0, 0.5 * co))),
    }
}

/// `D2` matrix `A_z + cot(b) phi_z` of the unitary fields at node `iy`.
fn d2_matrix(f: &UnitaryFields, holo: &HoloData, iy: usize) -> CMatrix {
    let tilt = &holo.tilt;
    f.a_z.at(iy, 0) + f.phi_z.at(iy, 0).scale(tilt.cos() / tilt.sin())
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

/// Flat limit at `y_max` and the exponential approach of `[D2, D2^dagger]` to zero.
pub fn flat_limit(f: &UnitaryFields, holo: &HoloData) -> Result<FlatLimit> {
    let mesh = &f.mesh;
    let ny = mesh.ny();
    let top = d2_matrix(f, holo, ny - 1);
    let twisted_residual = fro(&comm(&top, &top.adjoint()));
    let (lo, hi) = (2.0, 0.5 * mesh.y_max());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for iy in 0..ny {
        let y = mesh.y[iy];
        if y >= lo && y <= hi {
            let m = d2_matrix(f, holo, iy);
            let v = fro(&comm(&m, &m.adjoint()));
            if v > 1e-14 {
                xs.push(y);
                ys.push(v.ln());
            }
        }
    }
    if xs.len() < 4 {
        return Err(Error::Domain("too few nodes in the flat-limit fit window".into()));
    }
    let (slope, _, r2) = linear_fit(&xs, &ys);
    let p2 = (0..top.nrows()).map(|r| (0..top.ncols()).map(|k| [top[(r, k)].re, top[(r, k)].im]).collect()).collect();
    Ok(FlatLimit { p2, twisted_residual, decay_rate: -slope, r_squared: r2, predicted_rate: predicted_decay(&top, holo) })
}

/// Square root of the smallest nonzero eigenvalue of `v -> sin^2 [M^dagger, [M, v]]` on traceless Hermitian `v`.
fn predicted_decay(m: &CMatrix, holo: &HoloData) -> Option<f64> {
    let basis = hermitian_basis(holo.n);
    let s2 = holo.tilt.sin().powi(2);
    let d = basis.len();
    let mut a = DMatrix::zeros(d, d);
    for (k, b) in basis.iter().enumerate() {
        let img = hermitian_part(&comm(&m.adjoint(), &comm(m, b)).scale(s2));
        for (r, x) in to_coords(&basis, &img).into_iter().enumerate() {
            a[(r, k)] = x;
        }
    }
    let a = (&a + a.transpose()).scale(0.5);
    let eig = nalgebra::SymmetricEigen::new(a);
    let top = eig.eigenvalues.amax();
    eig.eigenvalues.iter().filter(|&&l| l > 1e-8 * top.max(1e-300)).fold(None, |acc: Option<f64>, &l| {
        Some(acc.map_or(l, |a| a.min(l)))
    }).map(f64::sqrt)
}

/// Linearized operator at `H = H0 e^{s_bg}` by central differences of the corrected moment map.
pub fn apply_l(bg: &Arc<Background>, s_bg: &[CMatrix], v: &[CMatrix]) -> Result<Vec<CMatrix>> {
    if v.len() != bg.ny() {
        return Err(Error::DimensionMismatch { expected: bg.ny(), got: v.len() });
    }
    let r = Reference::new(bg.clone(), Some(s_bg))?;
    let eps = 1e-4 / sup_norm(v).max(1.0);
    let plus: Vec<CMatrix> = v.iter().map(|x| x.scale(eps)).collect();
    let minus: Vec<CMatrix> = v.iter().map(|x| x.scale(-eps)).collect();
    let (op, om) = (r.evaluate(&plus)?.omega, r.evaluate(&minus)?.omega);
    Ok(op.iter().zip(&om).map(|(a, b)| (a - b).scale(0.5 / eps)).collect())
}

/// Fields `(D2, a, h)` of `H = H0 e^{s}` in the frame `e^{s/2} g`, with `a`, `h` the
/// anti-Hermitian and Hermitian parts of the `D3` connection matrix.
fn frame_fields(bg: &Background, s: &[CMatrix]) -> (Vec<CMatrix>, Vec<CMatrix>, Vec<CMatrix>) {
    let mesh = &bg.mesh;
    let sf = to_field(mesh, s);
    let (s1, s2) = (d_y(mesh, &sf), d_yy(mesh, &sf));
    let (g1, _) = bg.frame.dy.as_ref().expect("analytic backgrounds carry frame jets");
    let mut m2 = Vec::new();
    let mut a = Vec::new();
    let mut h = Vec::new();
    for i in 0..bg.ny() {
        let (w0, w1, _) = herm_fn_jet(
            ScalarFn::Exp,
            &s[i].scale(0.5),
            &s1.at(i, 0).scale(0.5),
            &s2.at(i, 0).scale(0.5),
        );
        let wi = exp_herm(&s[i].scale(-0.5));
        let g = bg.frame.g.at(i, 0);
        let gi = inverse(g).expect("frames are invertible");
        let m3g = -(g1.at(i, 0) * &gi);
        let m3 = &w0 * m3g * &wi - &w1 * &wi;
        m2.push(&w0 * &bg.higgs[i] * &wi);
        a.push((&m3 - m3.adjoint()).scale(0.5));
        h.push(hermitian_part(&m3));
    }
    (m2, a, h)
}

/// Second evaluation path for the linearized operator:
/// `sin^2 [M^dagger, [M, v]] + 1/2 [sin^2 [M, M^dagger], v] - nabla^2 v + [h, [h, v]]`.
pub fn apply_l_weitzenbock(bg: &Arc<Background>, s_bg: &[CMatrix], v: &[CMatrix]) -> Result<Vec<CMatrix>> {
    if v.len() != bg.ny() || s_bg.len() != bg.ny() {
        return Err(Error::DimensionMismatch { expected: bg.ny(), got: v.len() });
    }
    let mesh = &bg.mesh;
    let s2 = bg.holo.tilt.sin().powi(2);
    let (m, a, h) = frame_fields(bg, s_bg);
    let vf = to_field(mesh, v);
    let (v1, v2) = (d_y(mesh, &vf), d_yy(mesh, &vf));
    let a1 = d_y(mesh, &to_field(mesh, &a));
    let n = bg.n();
    Ok((0..bg.ny())
        .map(|i| {
            if i == 0 || i + 1 == bg.ny() {
                return CMatrix::zeros(n, n);
            }
            let (m, a, h, v) = (&m[i], &a[i], &h[i], &v[i]);
            let pot = (comm(&m.adjoint(), &comm(m, v)) + comm(&comm(m, &m.adjoint()), v).scale(0.5)).scale(s2);
            let lap = v2.at(i, 0) + comm(a1.at(i, 0), v) + comm(a, v1.at(i, 0)).scale(2.0) + comm(a, &comm(a, v));
            hermitian_part(&(pot - lap + comm(h, &comm(h, v))))
        })
        .collect())
}

/// `sum_ij f(mu_i - mu_j) |X_ij|^2` in the eigenbasis of `s`.
fn weighted_square(s: &CMatrix, x: &CMatrix, f: impl Fn(f64) -> f64) -> f64 {
    re_tr_prod(&x.adjoint(), &ad_fn(s, x, f))
}

/// Pointwise defect of the discrete identity
/// `<Omega(s) - Omega(0), s> = 1/2 Delta |s|^2 + |v(s) nabla s|^2 + sin^2 |v(s) [s, D2]|^2`.
pub fn keyeq_defect(bg: &Arc<Background>, s: &[CMatrix]) -> Result<Vec<f64>> {
    let r = Reference::new(bg.clone(), None)?;
    let mesh = &bg.mesh;
    let ny = mesh.ny();
    let zero = bg.zero_field();
    let e0 = r.evaluate(&zero)?;
    let e1 = r.evaluate(s)?;
    let s2 = bg.holo.tilt.sin().powi(2);
    // Log-transport increments, from the excesses stored in the evaluation.
    let g: Vec<CMatrix> = (0..ny).map(|i| compose_dev(&bg.half_dev[i], &exp_dev(&s[i], 0.5))).collect();
    let gi: Vec<CMatrix> = (0..ny).map(|i| compose_dev(&exp_dev(&s[i], -0.5), &bg.half_inv_dev[i])).collect();
    let (fwd, bwd) = edge_excesses(bg, &g, &gi)?;
    // Hermitian part of the background D3 matrix, in the g frame.
    let (_, _, herm) = frame_fields(bg, &zero);
    let mut out = vec![0.0; ny];
    for i in 1..ny - 1 {
        let (hm, hp) = (mesh.h(i - 1), mesh.h(i));
        // Pairing is frame independent since s commutes with e^{s/2}.
        let corr0 = &e0.omega[i];
        let lhs = re_tr_prod(&(&e1.omega[i] - corr0), &s[i])
            + re_tr_prod(&(ad_fn(&s[i], &bg.defect[i], |l| 1.0 / sinhc_half(l)) - &bg.defect[i]), &s[i]);
        let sq = |k: usize| fro(&s[k]).powi(2);
        let lap = -(2.0 / (hp + hm)) * ((sq(i + 1) - sq(i)) / hp - (sq(i) - sq(i - 1)) / hm);
        // Recover the covariant derivative from each one-sided increment, then weight its D3 image.
        let kinetic = |signed: CMatrix| {
            let shifted = signed + ad_fn(&s[i], &herm[i], |l| 2.0 * ((0.5 * l).cosh() - 1.0));
            let nabla = ad_fn(&s[i], &shifted, |l| 1.0 / sinhc_half(l));
            weighted_square(&s[i], &(nabla + comm(&herm[i], &s[i])), gamma_scalar)
        };
        let dp = (&fwd[i] - &bg.excess_fwd[i]) / c(hp);
        let dm = (&bwd[i - 1] - &bg.excess_bwd[i - 1]) / c(-hm);
        let kin = (hp * kinetic(dp) + hm * kinetic(dm)) / (hp + hm);
        let pot = s2 * weighted_square(&s[i], &comm(&s[i], &bg.higgs[i]), gamma_scalar);
        out[i] = (lhs - (0.5 * lap + kin + pot)).abs();
    }
    Ok(out)
}

/// Gauss-Legendre nodes and weights on `[0, 1]`.
fn gauss_legendre(order: usize) -> Result<Vec<(f64, f64)>> {
    let table: &[(f64, f64)] = match order {
        4 => &[(0.3399810435848563, 0.6521451548625461), (0.8611363115940526, 0.3478548451374538)],
        8 => &[
            (0.1834346424956498, 0.3626837833783620),
            (0.5255324099163290, 0.3137066458778873),
            (0.7966664774136267, 0.2223810344533745),
            (0.9602898564975363, 0.1012285362903763),
        ],
        _ => return Err(Error::Domain(format!("Gauss-Legendre order {order} not tabulated (use 4 or 8)"))),
    };
    Ok(table
        .iter()
        .flat_map(|&(x, w)| [(0.5 * (1.0 - x), 0.5 * w), (0.5 * (1.0 + x), 0.5 * w)])
        .collect())
}

/// Derivative `m'(t) = sum_i w_i tr(s Omega(t s))` of the Donaldson functional along `K e^{t s}`.
pub fn donaldson_first(r: &Reference, s: &[CMatrix], t: f64) -> Result<f64> {
    let ts: Vec<CMatrix> = s.iter().map(|x| x.scale(t)).collect();
    let ev = r.evaluate(&ts)?;
    let mesh = &r.bg.mesh;
    Ok((1..mesh.ny() - 1).map(|i| mesh.weight(i) * re_tr_prod(&s[i], &ev.omega[i])).sum())
}

/// `M(K e^{t s}, K)` by Gauss-Legendre quadrature in the path parameter.
pub fn donaldson_m(r: &Reference, s: &[CMatrix], t: f64, order: usize) -> Result<f64> {
    let mut total = 0.0;
    for (u, w) in gauss_legendre(order)? {
        total += w * t * donaldson_first(r, s, u * t)?;
    }
    Ok(total)
}

/// `(m'(t), m''(t))`; the second derivative by central differences of the first.
pub fn donaldson_derivatives(r: &Reference, s: &[CMatrix], t: f64) -> Result<(f64, f64)> {
    let dt = 1e-4;
    let first = donaldson_first(r, s, t)?;
    let second = (donaldson_first(r, s, t + dt)? - donaldson_first(r, s, t - dt)?) / (2.0 * dt);
    Ok((first, second))
}

/// Continuum quadratic form `sum w (sin^2 |[D2, s]|^2 + |[h, s]|^2) + |nabla s|^2` at `K`.
pub fn donaldson_quadratic_form(bg: &Arc<Background>, s: &[CMatrix]) -> Result<f64> {
    let mesh = &bg.mesh;
    let s2 = bg.holo.tilt.sin().powi(2);
    let (m, a, h) = frame_fields(bg, &bg.zero_field());
    let ds = d_y(mesh, &to_field(mesh, s));
    Ok((0..bg.ny())
        .map(|i| {
            let nabla = ds.at(i, 0) + comm(&a[i], &s[i]);
            mesh.weight(i)
                * (s2 * fro(&comm(&m[i], &s[i])).powi(2) + fro(&comm(&h[i], &s[i])).powi(2) + fro(&nabla).powi(2))
        })
        .sum())
}

/// Solution `u` of `-u'' = f` with `u = 0` at both ends, on the graded mesh.
pub fn scalar_dirichlet(mesh: &GradedMesh, f: &[f64]) -> Result<Vec<f64>> {
    let ny = mesh.ny();
    if f.len() != ny {
        return Err(Error::DimensionMismatch { expected: ny, got: f.len() });
    }
    let m = ny - 2;
    let (mut sub, mut dia, mut sup, mut rhs) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for k in 0..m {
        let i = k + 1;
        let (hm, hp) = (mesh.h(i - 1), mesh.h(i));
        let scale = 2.0 / (hm + hp);
        sub[k] = -scale / hm;
        sup[k] = -scale / hp;
        dia[k] = scale * (1.0 / hm + 1.0 / hp);
        rhs[k] = f[i];
    }
    // Thomas algorithm; the matrix is an M-matrix so no pivoting is needed.
    for k in 1..m {
        let l = sub[k] / dia[k - 1];
        dia[k] -= l * sup[k - 1];
        rhs[k] -= l * rhs[k - 1];
    }
    let mut u = vec![0.0; ny];
    for k in (0..m).rev() {
        let next = if k + 1 < m { u[k + 2] } else { 0.0 };
        let val = (rhs[k] - sup[k] * next) / dia[k];
        if !val.is_finite() {
            return Err(Error::Decomposition("scalar Dirichlet solve failed".into()));
        }
        u[k + 1] = val;
    }
    Ok(u)
}

#[derive(Clone, Debug, Serialize)]
pub struct C0Report {
    pub sup_s: f64,
    pub bound: f64,
    pub margin: f64,
    pub holds: bool,
}

/// Compares `sup |s|` with `2 sup u`, where `-u'' = |Omega_{H0}|` with zero boundary values.
pub fn c0_diagnostic(bg: &Background, s: &[CMatrix]) -> Result<C0Report> {
    let src: Vec<f64> = bg.omega_exact.iter().map(fro).collect();
    let u = scalar_dirichlet(&bg.mesh, &src)?;
    let bound = 2.0 * u.iter().cloned().fold(0.0, f64::max);
    let sup_s = sup_norm(s);
    Ok(C0Report { sup_s, bound, margin: bound - sup_s, holds: sup_s <= bound })
}

#[derive(Clone, Debug, Serialize)]
pub struct Filtration {
    /// Growth exponents of parallel sections, ascending.
    pub rates: Vec<f64>,
    /// Initial values at `y = 1` (unitary coordinates), one column per rate.
    pub basis: Vec<Vec<[f64; 2]>>,
    /// `|<v_i, D2 v_{i+1}>|` at `y = 1`.
    pub induced: Vec<f64>,
}

/// Vanishing rates of `D3`-parallel sections near `y = 0` and the induced `D2` maps.
pub fn filtration_extract(frame: &MatField, fields: &UnitaryFields, holo: &HoloData) -> Result<Filtration> {
    let mesh = &fields.mesh;
    let n = holo.n;
    let one = (0..mesh.ny())
        .min_by(|&a, &b| (mesh.y[a] - 1.0).abs().total_cmp(&(mesh.y[b] - 1.0).abs()))
        .expect("mesh is nonempty");
    let far = mesh.y.iter().position(|&y| y >= 10.0 * mesh.y[0]).unwrap_or(one.min(4));
    if far == 0 || far >= one {
        return Err(Error::Domain("mesh too short for a vanishing-rate fit".into()));
    }
    let f1_inv = inverse(frame.at(one, 0))?;
    let sv = |iy: usize| {
        let a = frame.at(iy, 0) * &f1_inv;
        let svd = a.svd(false, true);
        let mut pairs: Vec<(f64, CMatrix)> = (0..n)
            .map(|k| {
                let row = svd.v_t.as_ref().expect("requested").row(k).adjoint();
                (svd.singular_values[k], CMatrix::from_column_slice(n, 1, row.as_slice()))
            })
            .collect();
        pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
        pairs
    };
    let near = sv(0);
    let ref_sv = sv(far);
    let dl = mesh.y[0].ln() - mesh.y[far].ln();
    let rates: Vec<f64> = (0..n).map(|k| (near[k].0.ln() - ref_sv[k].0.ln()) / dl).collect();
    if rates.windows(2).any(|w| (w[1] - w[0]).abs() < 0.25) {
        return Err(Error::Domain(format!("ambiguous filtration: rates {rates:?} nearly coincide")));
    }
    let m2 = d2_matrix(fields, holo, one);
    let induced = (0..n - 1).map(|k| (near[k].1.adjoint() * &m2 * &near[k + 1].1)[(0, 0)].norm()).collect();
    let basis = near.iter().map(|(_, v)| v.iter().map(|z| [z.re, z.im]).collect()).collect();
    Ok(Filtration { rates, basis, induced })
}

/// Kobayashi-Hitchin map: reads the flat pair at `y_max`, untwists, and returns the oper coefficients.
pub fn kobayashi_hitchin(fields: &UnitaryFields, holo: &HoloData) -> Result<OperPoint> {
    let mesh = &fields.mesh;
    let top = mesh.ny() - 1;
    let tilt = &holo.tilt;
    let tan = tilt.sin() / tilt.cos();
    let p2 = d2_matrix(fields, holo, top);
    let p1 = (fields.a_z.at(top, 0) - fields.phi_z.at(top, 0).scale(tan)).adjoint().scale(-1.0);
    let scale = max_abs(&p2).max(1.0);
    // A nilpotent slice has vanishing fibration at every y: the oper is q = 0.
    let nilpotent = hitchin_fibration(&p2).iter().enumerate().all(|(k, x)| x.norm() <= 1e-12 * scale.powi(k as i32 + 2));
    if nilpotent {
        return OperPoint::new(holo.n, tilt.clone(), vec![c(0.0); holo.n - 1]);
    }
    let flat = fro(&comm(&p2, &p2.adjoint())) / (scale * scale);
    if flat > 1e-6 || max_abs(&p1) > 1e-9 * scale {
        return Err(Error::NotConverged(format!("slice at y_max is not flat (defect {flat:e})")));
    }
    let pair = FlatPair { p1, p2, w: c(tan) };
    let higgs = untwist(&pair, &CMatrix::identity(holo.n, holo.n))?;
    let w = tan;
    let p: Vec<C64> = hitchin_fibration(&higgs.phi)
        .into_iter()
        .enumerate()
        .map(|(k, x)| x * ((1.0 + w * w) / w).powi(k as i32 + 2))
        .collect();
    let scaled = section_from_fibration(holo.n, &p)?;
    let s = tilt.sin();
    let q = scaled.iter().enumerate().map(|(k, z)| z * s.powi(k as i32 + 1)).collect();
    OperPoint::new(holo.n, tilt.clone(), q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry_fields::make_mesh;
    use crate::lie_core::{principal_triple, random_hermitian, remove_trace, tilt_params};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn main_mesh() -> Arc<GradedMesh> {
        Arc::new(make_mesh(1e-3, 12.0, 200, 1.08, 1, 1.0).unwrap())
    }

    fn small_mesh() -> Arc<GradedMesh> {
        Arc::new(make_mesh(1e-2, 6.0, 60, 1.2, 1, 1.0).unwrap())
    }

    fn oper(n: usize, q: &[f64], beta: f64) -> OperPoint {
        let mut coeffs = vec![c(0.0); n - 1];
        for (k, &v) in q.iter().enumerate() {
            coeffs[k] = c(v);
        }
        OperPoint::new(n, tilt_params(beta).unwrap(), coeffs).unwrap()
    }

    /// Smooth random traceless field vanishing at both ends.
    fn bump(mesh: &GradedMesh, n: usize, scale: f64, seed: u64) -> Vec<CMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_hermitian(&mut rng, n, 1.0);
        let b = random_hermitian(&mut rng, n, 1.0);
        let (lo, hi) = (mesh.y_min(), mesh.y_max());
        mesh.y
            .iter()
            .map(|&y| {
                let u = (y - lo) / (hi - lo);
                let env = (std::f64::consts::PI * u).sin().powi(2);
                remove_trace(&(a.scale((2.0 * u).cos()) + b.scale((3.0 * u).sin())).scale(scale * env))
            })
            .collect()
    }

    fn sup_diff(a: &[CMatrix], b: &[CMatrix]) -> f64 {
        a.iter().zip(b).map(|(x, y)| fro(&(x - y))).fold(0.0, f64::max)
    }

    #[test]
    fn schedule_validation() {
        let s = ContinuitySchedule::default();
        s.validate().unwrap();
        assert_eq!(s.t_values.first(), Some(&1.0));
        assert_eq!(s.t_values.last(), Some(&0.0));
        let bad = ContinuitySchedule { t_values: vec![1.0, 1.0, 0.0], ..s.clone() };
        assert!(bad.validate().is_err());
        let bad = ContinuitySchedule { t_values: vec![1.0, 0.5], ..s };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn corrected_moment_map_is_exact_at_background() {
        let bg = Background::for_oper(&oper(2, &[0.5], 0.2), 2, main_mesh()).unwrap();
        let r = Reference::new(bg.clone(), None).unwrap();
        let ev = r.evaluate(&bg.zero_field()).unwrap();
        for i in 1..bg.ny() - 1 {
            assert!(fro(&(&ev.omega[i] - &bg.omega_exact[i])) < 1e-12 * (1.0 + fro(&bg.omega_exact[i])));
        }
    }

    #[test]
    fn background_defect_is_second_order() {
        let op = oper(2, &[0.5], 0.2);
        let mut m = small_mesh();
        let mut sups = vec![];
        for level in 0..3 {
            let bg = Background::for_oper(&op, 2, m.clone()).unwrap();
            // Sup over the coarse-mesh nodes, which every refinement keeps.
            let d = bg.defect().iter().zip(&m.y).step_by(1 << level).map(|(d, y)| fro(d) * y * y);
            sups.push(d.fold(0.0, f64::max));
            m = Arc::new(m.refine());
        }
        for w in sups.windows(2) {
            assert!((3.0..5.5).contains(&(w[0] / w[1])), "{sups:?}");
        }
    }

    #[test]
    fn gradient_is_derivative_of_energy() {
        let bg = Background::for_oper(&oper(2, &[0.5], 0.2), 2, small_mesh()).unwrap();
        let r = Reference::new(bg.clone(), None).unwrap();
        let s = bump(&bg.mesh, 2, 0.4, 3);
        let dir = bump(&bg.mesh, 2, 1.0, 4);
        let t = 0.3;
        let g = gradient(&r, &s, t).unwrap();
        let exact: f64 = g.iter().zip(&dir).map(|(a, b)| re_tr_prod(a, b)).sum();
        let eps = 1e-4;
        let shift = |k: f64| s.iter().zip(&dir).map(|(a, b)| a + b.scale(k)).collect::<Vec<_>>();
        let fd = (r.energy(&shift(eps), t).unwrap() - r.energy(&shift(-eps), t).unwrap()) / (2.0 * eps);
        assert!((fd - exact).abs() < 1e-6 * exact.abs().max(1.0), "{fd} vs {exact}");
    }

    #[test]
    fn nt_residual_vanishes_on_shifted_reference() {
        // H0 = H_{-1} e^kappa with kappa = Omega_{H_{-1}}; at t = 1, s = -kappa solves N_1 = 0.
        let bg = Background::for_oper(&oper(2, &[0.5], 0.2), 0, main_mesh()).unwrap();
        let mut kappa = bg.omega_exact.clone();
        let ny = bg.ny();
        kappa[0] = CMatrix::zeros(2, 2);
        kappa[ny - 1] = CMatrix::zeros(2, 2);
        let r = Reference::new(bg.clone(), Some(&kappa)).unwrap();
        let s: Vec<CMatrix> = kappa.iter().map(|k| -k).collect();
        let res = r.nt_residual(&s, 1.0).unwrap();
        assert!(sup_norm(&res) < 1e-10, "{}", sup_norm(&res));
        let model = Background::for_oper(&oper(2, &[0.0], 0.2), 2, main_mesh()).unwrap();
        let r = Reference::new(model.clone(), None).unwrap();
        for t in [0.0, 0.7, 1.0] {
            assert!(sup_norm(&r.nt_residual(&model.zero_field(), t).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn linearization_at_solution_matches_directional_derivative() {
        let op = oper(2, &[0.5], 0.2);
        let sol = continuity_solve(&op, small_mesh(), &SolveOptions::default()).unwrap();
        let bg = sol.reference.bg.clone();
        let s1 = bump(&bg.mesh, 2, 1.0, 9);
        let eps = 1e-5;
        let shift = |k: f64| sol.sigma.iter().zip(&s1).map(|(a, b)| a + b.scale(k)).collect::<Vec<_>>();
        let np = sol.reference.nt_residual(&shift(eps), 0.0).unwrap();
        let nm = sol.reference.nt_residual(&shift(-eps), 0.0).unwrap();
        let fd: Vec<CMatrix> = np.iter().zip(&nm).map(|(a, b)| (a - b).scale(0.5 / eps)).collect();
        let v: Vec<CMatrix> = sol.sigma.iter().zip(&s1).map(|(s, x)| ad_fn(s, x, sinhc_half)).collect();
        let lin = apply_l(&bg, &sol.sigma, &v).unwrap();
        let scale = sup_norm(&lin);
        assert!(sup_diff(&fd, &lin) < 1e-6 * scale, "{} vs {scale}", sup_diff(&fd, &lin));
    }

    #[test]
    fn linearization_on_model_matches_hand_profile() {
        let op = oper(2, &[0.0], 0.2);
        let t = principal_triple(2).unwrap();
        let err = |m: Arc<GradedMesh>| {
            let bg = Background::for_oper(&op, 2, m.clone()).unwrap();
            let l = m.y_max();
            let v: Vec<CMatrix> = m.y.iter().map(|&y| t.e_zero.scale(y * y * (1.0 - y / l))).collect();
            let a = apply_l(&bg, &bg.zero_field(), &v).unwrap();
            let b = apply_l_weitzenbock(&bg, &bg.zero_field(), &v).unwrap();
            let mut worst = [0.0f64; 2];
            for i in 1..m.ny() - 1 {
                let want = t.e_zero.scale(4.0 * m.y[i] / l);
                worst[0] = worst[0].max(fro(&(&a[i] - &want)));
                worst[1] = worst[1].max(fro(&(&b[i] - &want)));
            }
            worst
        };
        let coarse = small_mesh();
        let e1 = err(coarse.clone());
        let e2 = err(Arc::new(coarse.refine()));
        for k in 0..2 {
            assert!(e1[k] < 5e-2 && e2[k] < e1[k] / 3.0, "path {k}: {} -> {}", e1[k], e2[k]);
        }
    }

    #[test]
    fn weitzenbock_paths_agree_to_second_order() {
        let op = oper(2, &[0.5], 0.2);
        let mut m = small_mesh();
        let mut sups = vec![];
        for level in 0..3 {
            let bg = Background::for_oper(&op, 2, m.clone()).unwrap();
            let s_bg = bump(&m, 2, 0.3, 21);
            let v = bump(&m, 2, 1.0, 22);
            let a = apply_l(&bg, &s_bg, &v).unwrap();
            let b = apply_l_weitzenbock(&bg, &s_bg, &v).unwrap();
            let stride = 1 << level;
            let d = (stride..m.ny() - 1).step_by(stride).map(|i| fro(&(&a[i] - &b[i])) * m.y[i] * m.y[i]);
            sups.push(d.fold(0.0, f64::max));
            m = Arc::new(m.refine());
        }
        for w in sups.windows(2) {
            assert!((w[0] / w[1]).log2() > 1.8, "{sups:?}");
        }
    }

    #[test]
    fn indicial_roots_are_annihilated_at_leading_order() {
        let coarse = main_mesh();
        let fine = Arc::new(coarse.refine());
        for (n, spin, root, other) in [(2usize, 1usize, 2.0f64, 1.5f64), (3, 1, 2.0, 1.5), (3, 2, 3.0, 2.5)] {
            let op = oper(n, &vec![0.0; n - 1], 0.2);
            let t = principal_triple(n).unwrap();
            let dec = crate::lie_core::CasimirDecomposition::new(&t);
            // Weight-zero vector of the given spin: the spin part of a power of the Cartan generator.
            let power = if spin == 1 { t.e_zero.clone() } else { &t.e_zero * &t.e_zero };
            let vk = dec.split(&remove_trace(&power))[spin - 1].clone();
            assert!(fro(&vk) > 1e-6);
            let casimir = (spin * (spin + 1)) as f64;
            // Relative deviation from (k(k+1) - j(j-1)) y^(j-2) v_k on the coarse nodes 5..20.
            let dev = |mesh: &Arc<GradedMesh>, stride: usize, j: f64| {
                let bg = Background::for_oper(&op, n, mesh.clone()).unwrap();
                let v: Vec<CMatrix> = mesh.y.iter().map(|&y| vk.scale(y.powf(j))).collect();
                let l = apply_l(&bg, &bg.zero_field(), &v).unwrap();
                (5..20)
                    .map(|i| i * stride)
                    .map(|i| {
                        let want = v[i].scale((casimir - j * (j - 1.0)) / mesh.y[i].powi(2));
                        fro(&(&l[i] - &want)) * mesh.y[i].powi(2) / fro(&v[i])
                    })
                    .fold(0.0, f64::max)
            };
            for j in [root, other] {
                let (d1, d2) = (dev(&coarse, 1, j), dev(&fine, 2, j));
                assert!(d1 < 5e-2 && d1 / d2 > 3.0, "n={n} spin={spin} j={j}: {d1} -> {d2}");
            }
            assert_eq!(casimir - root * (root - 1.0), 0.0);
            assert!((casimir - other * (other - 1.0)).abs() > 0.5);
        }
    }

    #[test]
    fn model_solution_is_fixed_point() {
        let op = oper(2, &[0.0], 0.2);
        let sol = continuity_solve(&op, main_mesh(), &SolveOptions::default()).unwrap();
        assert!(sol.report.s_sup < 1e-9);
        assert!(sol.report.omega_sup < 1e-8);
        let bg = sol.reference.bg.clone();
        let opts = SolveOptions { initial: Some(bump(&bg.mesh, 2, 0.3, 5)), ..SolveOptions::default() };
        let sol = solve_on(Reference::new(bg, None).unwrap(), &opts).unwrap();
        assert!(sol.report.s_sup < 1e-6, "{}", sol.report.s_sup);
    }

    #[test]
    fn solution_is_unique_across_starts() {
        let op = oper(2, &[0.5], 0.2);
        let bg = Background::for_oper(&op, 2, main_mesh()).unwrap();
        let solve = |seed: u64| {
            let opts = SolveOptions { initial: Some(bump(&bg.mesh, 2, 0.5, seed)), ..SolveOptions::default() };
            solve_on(Reference::new(bg.clone(), None).unwrap(), &opts).unwrap()
        };
        let (a, b) = (solve(11), solve(12));
        assert!(a.report.omega_sup < 1e-8 && b.report.omega_sup < 1e-8);
        assert!(sup_diff(&a.sigma, &b.sigma) < 1e-6);
        // Energy never increases within a stage beyond roundoff.
        for w in a.report.history.windows(2) {
            if w[0].t == w[1].t {
                assert!(w[1].energy <= w[0].energy + 1e-9 * w[0].energy.abs().max(1.0));
            }
        }
    }

    #[test]
    fn keyeq_trivial_and_commuting_cases() {
        let bg = Background::for_oper(&oper(2, &[0.5], 0.2), 2, small_mesh()).unwrap();
        assert!(keyeq_defect(&bg, &bg.zero_field()).unwrap().iter().all(|&d| d == 0.0));
        let model = Background::for_oper(&oper(2, &[0.0], 0.2), 2, small_mesh()).unwrap();
        let t = principal_triple(2).unwrap();
        let s: Vec<CMatrix> = bump(&model.mesh, 2, 0.7, 1).iter().map(|m| t.e_zero.scale(m[(0, 0)].re)).collect();
        let d = keyeq_defect(&model, &s).unwrap();
        let worst = d.iter().zip(&model.mesh.y).map(|(x, y)| x * y * y).fold(0.0, f64::max);
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn keyeq_defect_converges_at_second_order() {
        let op = oper(2, &[0.5], 0.2);
        let mut m = small_mesh();
        let mut sups = vec![];
        for level in 0..3 {
            let bg = Background::for_oper(&op, 2, m.clone()).unwrap();
            let d = keyeq_defect(&bg, &bump(&m, 2, 0.6, 31)).unwrap();
            // Sup over the coarse-mesh nodes, which every refinement keeps.
            sups.push(d.iter().step_by(1 << level).fold(0.0, |a: f64, &x| a.max(x)));
            m = Arc::new(m.refine());
        }
        for w in sups.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 1.8, "{sups:?}");
        }
    }

    #[test]
    fn solution_self_converges_at_second_order() {
        let op = oper(2, &[0.5], 0.2);
        let mut m = small_mesh();
        let mut sols = vec![];
        for _ in 0..3 {
            sols.push(continuity_solve(&op, m.clone(), &SolveOptions::default()).unwrap().sigma);
            m = Arc::new(m.refine());
        }
        // Differences on the coarse nodes between consecutive levels.
        let gap = |a: &[CMatrix], b: &[CMatrix], stride: usize| {
            a.iter().step_by(stride).zip(b.iter().step_by(2 * stride)).map(|(x, y)| fro(&(x - y))).fold(0.0, f64::max)
        };
        let (d1, d2) = (gap(&sols[0], &sols[1], 1), gap(&sols[1], &sols[2], 2));
        assert!((d1 / d2).log2() >= 1.8, "{d1} -> {d2}");
    }

    #[test]
    fn donaldson_functional_derivatives() {
        let bg = Background::for_oper(&oper(2, &[0.5], 0.2), 2, small_mesh()).unwrap();
        let r = Reference::new(bg.clone(), None).unwrap();
        let s = bump(&bg.mesh, 2, 0.5, 41);
        assert_eq!(donaldson_m(&r, &bg.zero_field(), 1.0, 8).unwrap(), 0.0);
        let (d0, _) = donaldson_derivatives(&r, &bg.zero_field(), 0.0).unwrap();
        assert_eq!(d0, 0.0);
        // M along the path equals the energy difference.
        let m1 = donaldson_m(&r, &s, 1.0, 8).unwrap();
        let e = r.energy(&s, 0.0).unwrap() - r.energy(&bg.zero_field(), 0.0).unwrap();
        assert!((m1 - e).abs() < 1e-8 * e.abs().max(1.0), "{m1} vs {e}");
        let t = 0.3;
        let h = 1e-3;
        let fd = (donaldson_m(&r, &s, t + h, 8).unwrap() - donaldson_m(&r, &s, t - h, 8).unwrap()) / (2.0 * h);
        let (first, second) = donaldson_derivatives(&r, &s, t).unwrap();
        assert!((fd - first).abs() < 1e-6 * first.abs().max(1e-3), "{fd} vs {first}");
        assert!(second > 0.0);
        let q = donaldson_quadratic_form(&bg, &s).unwrap();
        let (_, m2) = donaldson_derivatives(&r, &s, 0.0).unwrap();
        assert!((m2 - q).abs() < 0.05 * q, "{m2} vs {q}");
    }

    #[test]
    fn c0_diagnostic_bounds_solutions() {
        let model = Background::for_oper(&oper(2, &[0.0], 0.2), 2, main_mesh()).unwrap();
        let rep = c0_diagnostic(&model, &model.zero_field()).unwrap();
        assert!(rep.holds && rep.sup_s == 0.0);
        let sol = continuity_solve(&oper(2, &[0.5], 0.2), main_mesh(), &SolveOptions::default()).unwrap();
        let rep = c0_diagnostic(&sol.reference.bg, &sol.sigma).unwrap();
        assert!(rep.holds, "{rep:?}");
        let mesh = main_mesh();
        let f: Vec<f64> = mesh.y.iter().map(|y| (-y).exp()).collect();
        let u1 = scalar_dirichlet(&mesh, &f).unwrap();
        let u2 = scalar_dirichlet(&mesh, &f.iter().map(|x| 2.0 * x).collect::<Vec<_>>()).unwrap();
        for (a, b) in u1.iter().zip(&u2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn filtration_rates_of_models() {
        for n in [2usize, 3] {
            let sol = continuity_solve(&oper(n, &vec![0.0; n - 1], 0.2), main_mesh(), &SolveOptions::default()).unwrap();
            let fields = sol.fields().unwrap();
            let f = filtration_extract(&sol.frame(), &fields, &sol.reference.bg.holo).unwrap();
            for (i, r) in f.rates.iter().enumerate() {
                let want = -((n - 1) as f64) / 2.0 + i as f64;
                assert!((r - want).abs() <= 0.02 * want.abs().max(0.5), "n={n}: {:?}", f.rates);
            }
        }
    }

    #[test]
    fn filtration_induced_maps_survive_deformation() {
        let mesh = main_mesh();
        let model = continuity_solve(&oper(2, &[0.0], 0.2), mesh.clone(), &SolveOptions::default()).unwrap();
        let fm = filtration_extract(&model.frame(), &model.fields().unwrap(), &model.reference.bg.holo).unwrap();
        let sol = continuity_solve(&oper(2, &[0.5], 0.2), mesh, &SolveOptions::default()).unwrap();
        let fs = filtration_extract(&sol.frame(), &sol.fields().unwrap(), &sol.reference.bg.holo).unwrap();
        for (a, b) in fs.induced.iter().zip(&fm.induced) {
            assert!(*a > 0.1 * b, "{:?} vs {:?}", fs.induced, fm.induced);
        }
    }

    #[test]
    fn kobayashi_hitchin_round_trip() {
        for q in [0.25, 0.5, 1.0] {
            let op = oper(2, &[q], 0.2);
            let sol = continuity_solve(&op, main_mesh(), &SolveOptions::default()).unwrap();
            assert!(sol.report.omega_sup < 1e-8);
            let back = kobayashi_hitchin(&sol.fields().unwrap(), &sol.reference.bg.holo).unwrap();
            assert!((back.q[0] - c(q)).norm() < 1e-4 * q, "{q}: {:?}", back.q);
        }
        let model = continuity_solve(&oper(2, &[0.0], 0.2), main_mesh(), &SolveOptions::default()).unwrap();
        let back = kobayashi_hitchin(&model.fields().unwrap(), &model.reference.bg.holo).unwrap();
        assert!(back.q.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn report_fits_boundary_structure() {
        let sol = continuity_solve(&oper(2, &[0.5], 0.2), main_mesh(), &SolveOptions::default()).unwrap();
        let pole = sol.report.pole_fit.clone().unwrap();
        assert!(pole.a_z < 0.01 && pole.phi_z < 0.01 && pole.phi_1 < 0.01);
        let flat = sol.report.flat_limit.clone().unwrap();
        assert!(flat.r_squared > 0.99 && flat.twisted_residual < 1e-10);
        let json = serde_json::to_value(&sol.report).unwrap();
        assert!(json.get("history").is_some() && json.get("omega_weighted").is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn log_excess_matches_direct_logarithm(seed in 0u64..10_000, size in 1e-9f64..1e-2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d2 = [1.3f64, 1.0, 0.7];
            let delta = random_hermitian(&mut rng, 3, size);
            let fast = log_excess(&d2, &delta).unwrap();
            let direct = log_pos(&(diag_mat(&d2) + &delta)).unwrap() - diag_mat(&d2.map(f64::ln));
            prop_assert!(fro(&(fast - direct)) < 1e-14);
        }
    }
}

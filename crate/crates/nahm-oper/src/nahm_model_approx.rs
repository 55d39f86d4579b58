//! Model tilted Nahm-pole configuration, oper frames and admissible background metrics.
//!
//! Backgrounds are written `H0 = h e^{S(y)} h` with `h = (y sin b)^{-e0/2}` the model
//! frame. Near `y = 0`, `S` is a truncated series in `y^j (log y)^l` built order by
//! order; far out it blends into the boundary metric of the flat limit.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry_fields::{FrameField, GradedMesh, MatField, UnitaryFields};
use crate::hitchin_flat::{boundary_metric, hitchin_section_higgs};
use crate::lie_core::{
    c, comm, conj_exp_minus_id, exp_herm, fro, herm_fn_jet, hermitian_part, max_abs, principal_triple,
    CasimirDecomposition, CMatrix, PrincipalTriple, ScalarFn, TiltParams, C64, I,
};

/// Largest supported truncation order of the background series.
pub const J_MAX: usize = 6;

#[derive(Clone, Debug)]
pub struct OperPoint {
    pub n: usize,
    pub tilt: TiltParams,
    /// `(q_2, ..., q_n)`.
    pub q: Vec<C64>,
}

impl OperPoint {
    pub fn new(n: usize, tilt: TiltParams, q: Vec<C64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidRank(n));
        }
        if q.len() != n - 1 {
            return Err(Error::DimensionMismatch { expected: n - 1, got: q.len() });
        }
        if q.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Domain("oper coefficients must be finite".into()));
        }
        Ok(OperPoint { n, tilt, q })
    }

    pub fn is_zero(&self) -> bool {
        self.q.iter().all(|z| z.norm() == 0.0)
    }
}

fn diag(v: impl Iterator<Item = f64>, n: usize) -> CMatrix {
    CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, v.map(c)))
}

/// Model configuration: `A_z = sin e+/y`, `phi_z = cos e+/y`, `phi_1 = i cos e0/(2y)`, `A_y = 0`.
pub fn model_fields(n: usize, tilt: &TiltParams, mesh: Arc<GradedMesh>) -> Result<UnitaryFields> {
    let t = principal_triple(n)?;
    let (s, co) = (tilt.sin(), tilt.cos());
    let f = |m: &CMatrix, p: i32, k: C64| {
        MatField::from_fn(&mesh, n, |iy, _| m * (k * mesh.y[iy].powi(p)))
    };
    let zero = MatField::zeros(&mesh, n);
    Ok(UnitaryFields {
        a_z: f(&t.e_plus, -1, c(s)),
        phi_z: f(&t.e_plus, -1, c(co)),
        a_y: zero.clone(),
        phi_1: f(&t.e_zero, -1, I * (0.5 * co)),
        dy: Some([
            f(&t.e_plus, -2, c(-s)),
            f(&t.e_plus, -2, c(-co)),
            zero,
            f(&t.e_zero, -2, I * (-0.5 * co)),
        ]),
        mesh,
    })
}

/// `H0 = (y sin b)^{-e0}` at each node.
pub fn model_metric(n: usize, tilt: &TiltParams, mesh: &GradedMesh) -> Result<MatField> {
    let w = principal_triple(n)?.weights();
    let s = tilt.sin();
    Ok(MatField::from_fn(mesh, n, |iy, _| diag(w.iter().map(|&p| (mesh.y[iy] * s).powf(-p)), n)))
}

/// Constant `alpha` of the oper in the holomorphic frame: the Hitchin section with `q_j / sin^{j-1}`.
pub fn oper_local_frame(op: &OperPoint) -> Result<crate::geometry_fields::HoloData> {
    let s = op.tilt.sin();
    let scaled: Vec<C64> = op.q.iter().enumerate().map(|(i, &q)| q * s.powi(-(i as i32 + 1))).collect();
    let higgs = hitchin_section_higgs(op.n, &scaled)?;
    crate::geometry_fields::HoloData::new(op.tilt, higgs.phi)
}

/// Lower-triangular part in the model frame: bottom row `(y^{n-1} q_n, ..., y q_2, 0)`.
pub fn oper_tail(op: &OperPoint, y: f64) -> CMatrix {
    let n = op.n;
    let mut b = CMatrix::zeros(n, n);
    for (idx, &q) in op.q.iter().enumerate() {
        let j = idx + 2;
        b[(n - 1, n - j)] = q * y.powi(j as i32 - 1);
    }
    b
}

/// Leading model term `e+ / (y sin b)`.
pub fn model_higgs(triple: &PrincipalTriple, tilt: &TiltParams, y: f64) -> CMatrix {
    triple.e_plus.scale(1.0 / (y * tilt.sin()))
}

/// Truncated series `sum C_{p,l} y^p (log y)^l` with matrix coefficients.
#[derive(Clone, Debug)]
pub struct LogLaurent {
    pub n: usize,
    /// Terms with `p > cap` are dropped.
    pub cap: i32,
    pub terms: BTreeMap<(i32, u32), CMatrix>,
}

impl LogLaurent {
    pub fn zero(n: usize, cap: i32) -> Self {
        LogLaurent { n, cap, terms: BTreeMap::new() }
    }

    pub fn monomial(p: i32, l: u32, m: CMatrix, cap: i32) -> Self {
        let mut s = Self::zero(m.nrows(), cap);
        s.push(p, l, m);
        s
    }

    fn push(&mut self, p: i32, l: u32, m: CMatrix) {
        if p > self.cap || m.iter().all(|z| *z == c(0.0)) {
            return;
        }
        match self.terms.get_mut(&(p, l)) {
            Some(x) => *x += m,
            None => {
                self.terms.insert((p, l), m);
            }
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut out = self.clone();
        out.cap = self.cap.min(o.cap);
        out.terms.retain(|k, _| k.0 <= out.cap);
        for (&(p, l), m) in &o.terms {
            out.push(p, l, m.clone());
        }
        out
    }

    pub fn scale(&self, a: C64) -> Self {
        let mut out = self.clone();
        out.terms.values_mut().for_each(|m| *m *= a);
        out
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.scale(c(-1.0)))
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut out = Self::zero(self.n, self.cap.min(o.cap));
        for (&(p, l), a) in &self.terms {
            for (&(q, k), b) in &o.terms {
                out.push(p + q, l + k, a * b);
            }
        }
        out
    }

    pub fn comm(&self, o: &Self) -> Self {
        self.mul(o).sub(&o.mul(self))
    }

    pub fn adjoint(&self) -> Self {
        let mut out = self.clone();
        out.terms.values_mut().for_each(|m| *m = m.adjoint());
        out
    }

    pub fn deriv(&self) -> Self {
        let mut out = Self::zero(self.n, self.cap - 1);
        for (&(p, l), m) in &self.terms {
            if p != 0 {
                out.push(p - 1, l, m.scale(p as f64));
            }
            if l > 0 {
                out.push(p - 1, l - 1, m.scale(l as f64));
            }
        }
        out
    }

    /// Lowest power present.
    pub fn valuation(&self) -> Option<i32> {
        self.terms.keys().map(|k| k.0).min()
    }

    /// `exp` of a series with positive valuation.
    pub fn exp(&self) -> Result<Self> {
        let v = self.valuation().unwrap_or(i32::MAX);
        if v <= 0 {
            return Err(Error::Domain("series exponential needs positive valuation".into()));
        }
        let mut out = Self::monomial(0, 0, CMatrix::identity(self.n, self.n), self.cap);
        let mut term = out.clone();
        let mut k = 1.0;
        while !term.terms.is_empty() {
            term = term.mul(self).scale(c(1.0 / k));
            out = out.add(&term);
            k += 1.0;
        }
        Ok(out)
    }

    pub fn eval(&self, y: f64) -> CMatrix {
        let lg = y.ln();
        let mut out = CMatrix::zeros(self.n, self.n);
        for (&(p, l), m) in &self.terms {
            out += m.scale(y.powi(p) * lg.powi(l as i32));
        }
        out
    }

    /// Coefficients at power `p`, keyed by log power.
    pub fn at_power(&self, p: i32) -> Vec<(u32, CMatrix)> {
        self.terms.range((p, 0)..=(p, u32::MAX)).map(|(k, m)| (k.1, m.clone())).collect()
    }
}

/// Moment map of `K = e^S` in the model frame, as a series, for `D2 = d + higgs`, `D3 = d + e0/(2y)`.
fn omega_series(tilt: &TiltParams, e0: &CMatrix, higgs: &LogLaurent, sigma: &LogLaurent) -> Result<LogLaurent> {
    let cap = higgs.cap.min(sigma.cap);
    let k = sigma.exp()?;
    let ki = sigma.scale(c(-1.0)).exp()?;
    let m3 = LogLaurent::monomial(-1, 0, e0.scale(0.5), cap);
    let s2 = tilt.sin() * tilt.sin();
    let pot = higgs.comm(&ki.mul(&higgs.adjoint()).mul(&k)).scale(c(s2));
    let nn = ki.mul(&k.deriv()).sub(&ki.mul(&m3).mul(&k));
    Ok(pot.sub(&nn.deriv()).add(&m3.deriv()).sub(&m3.comm(&nn)))
}

/// Same moment map at a point, grouped so that the model cancellation is exact.
///
/// `phi` is the `1/y` part of the Higgs field and `b` the remainder; `sig` is the jet of `S`.
pub fn omega_model_frame(tilt: &TiltParams, e0: &CMatrix, phi: &CMatrix, b: &CMatrix, y: f64, sig: &[CMatrix; 3]) -> CMatrix {
    let s0 = &sig[0];
    let (k0, k1, k2) = herm_fn_jet(ScalarFn::Exp, s0, &sig[1], &sig[2]);
    let ki = exp_herm(&(-s0));
    let m3 = e0.scale(0.5 / y);
    let dm3 = e0.scale(-0.5 / (y * y));
    let cm = |x: &CMatrix| conj_exp_minus_id(s0, x);
    let m = phi + b;
    let s2 = tilt.sin() * tilt.sin();
    let pot = (comm(phi, &cm(&phi.adjoint())) + comm(phi, &(&ki * b.adjoint() * &k0)) + comm(b, &(&ki * m.adjoint() * &k0)))
        .scale(s2);
    let kik1 = &ki * &k1;
    let dn = &kik1 - cm(&m3);
    let d_cm3 = -(&kik1 * (&ki * &m3 * &k0)) + cm(&dm3) + &ki * &m3 * &k1;
    let d_dn = -(&kik1 * &kik1) + &ki * &k2 - d_cm3;
    pot - d_dn - comm(&m3, &dn)
}

/// Solves `(-d^2 + Cas/y^2)(sum_l D_l y^P L^l) = -sum_l F_l y^{P-2} L^l` for one Casimir component.
fn normal_solve(lambda: f64, p: i32, f: &BTreeMap<u32, CMatrix>, n: usize) -> BTreeMap<u32, CMatrix> {
    let pf = p as f64;
    let mu = lambda - pf * (pf - 1.0);
    let top = f.keys().max().copied().unwrap_or(0);
    let zero = CMatrix::zeros(n, n);
    let fm = |m: u32| f.get(&m).cloned().unwrap_or_else(|| zero.clone());
    let mut d: BTreeMap<u32, CMatrix> = BTreeMap::new();
    let dm = |d: &BTreeMap<u32, CMatrix>, m: u32| d.get(&m).cloned().unwrap_or_else(|| zero.clone());
    let lin = 2.0 * pf - 1.0;
    if mu.abs() > 1e-9 {
        for m in (0..=top).rev() {
            let mf = m as f64;
            let rhs = -fm(m) + dm(&d, m + 1).scale(lin * (mf + 1.0)) + dm(&d, m + 2).scale((mf + 2.0) * (mf + 1.0));
            d.insert(m, rhs.scale(1.0 / mu));
        }
    } else {
        for m in (0..=top).rev() {
            let mf = m as f64;
            let rhs = fm(m) - dm(&d, m + 2).scale((mf + 2.0) * (mf + 1.0));
            d.insert(m + 1, rhs.scale(1.0 / (lin * (mf + 1.0))));
        }
    }
    d.retain(|_, m| m.iter().any(|z| *z != c(0.0)));
    d
}

/// Iteratively removes all `y^p (log y)^l` terms with `p <= order` from the moment map.
fn build_series(tilt: &TiltParams, triple: &PrincipalTriple, higgs: &LogLaurent, order: usize) -> Result<LogLaurent> {
    let n = triple.n;
    let cap = order as i32 + 3;
    let higgs = LogLaurent { cap, ..higgs.clone() };
    // The normal operator is the Casimir of the triple carried by the pole of the Higgs field.
    let lead = higgs.terms.get(&(-1, 0)).ok_or_else(|| Error::Domain("Higgs series has no 1/y pole".into()))?;
    let e_plus = lead.scale(tilt.sin());
    let e_minus = e_plus.adjoint();
    let pole = PrincipalTriple { n, e_zero: comm(&e_plus, &e_minus), e_plus, e_minus };
    if max_abs(&(&pole.e_zero - &triple.e_zero)) > 1e-12 {
        return Err(Error::Domain("Higgs pole is not a principal triple compatible with the model frame".into()));
    }
    let cas = CasimirDecomposition::new(&pole);
    let scale = 1.0 + higgs.terms.values().map(fro).fold(0.0, f64::max);
    let tol = 1e-11 * scale * scale;
    let mut sigma = LogLaurent::zero(n, cap);
    let mut last: Option<(i32, f64)> = None;
    for _ in 0..8 * (order + 2) {
        let omega = omega_series(tilt, &triple.e_zero, &higgs, &sigma)?;
        let lowest = (-2..=order as i32).find(|&p| omega.at_power(p).iter().any(|(_, m)| max_abs(m) > tol));
        let Some(p0) = lowest else {
            return Ok(sigma);
        };
        let coeffs = omega.at_power(p0);
        let size = coeffs.iter().map(|(_, m)| fro(m)).fold(0.0, f64::max);
        if let Some((lp, ls)) = last {
            if lp == p0 && size >= 0.5 * ls {
                let mut worst = (0, 0.0);
                for (_, m) in &coeffs {
                    for (k, part) in cas.split(&hermitian_part(m)).iter().enumerate() {
                        if fro(part) > worst.1 {
                            worst = (k + 1, fro(part));
                        }
                    }
                }
                return Err(Error::NotConverged(format!(
                    "resonance bookkeeping failed at power {p0}: Casimir component of spin {} not removed",
                    worst.0
                )));
            }
        }
        last = Some((p0, size));
        if p0 < 0 {
            return Err(Error::Domain(format!("moment map has a y^{p0} term; Higgs field lacks the Nahm-pole form")));
        }
        let p = p0 + 2;
        // Split each log coefficient into Casimir components.
        let mut by_spin: Vec<BTreeMap<u32, CMatrix>> = vec![BTreeMap::new(); n - 1];
        for (l, m) in &coeffs {
            for (k, part) in cas.split(&hermitian_part(m)).into_iter().enumerate() {
                if max_abs(&part) > tol {
                    by_spin[k].insert(*l, part);
                }
            }
        }
        let mut delta = LogLaurent::zero(n, cap);
        for (k, f) in by_spin.iter().enumerate() {
            let spin = (k + 1) as f64;
            for (l, m) in normal_solve(spin * (spin + 1.0), p, f, n) {
                delta.push(p, l, hermitian_part(&m));
            }
        }
        sigma = sigma.add(&delta);
    }
    Err(Error::NotConverged(format!("background series did not close at order {order}")))
}

/// Higgs field of the oper in the model frame as a series: `e+/(y sin b) + b(y)`.
pub fn oper_higgs_series(op: &OperPoint, cap: i32) -> Result<LogLaurent> {
    let t = principal_triple(op.n)?;
    let mut s = LogLaurent::monomial(-1, 0, t.e_plus.scale(1.0 / op.tilt.sin()), cap);
    for (idx, &q) in op.q.iter().enumerate() {
        let j = idx + 2;
        let mut m = CMatrix::zeros(op.n, op.n);
        m[(op.n - 1, op.n - j)] = q;
        s.push(j as i32 - 1, 0, m);
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug)]
pub struct BuildOptions {
    pub j_max: usize,
    /// The near series is used below `blend.0`, the flat limit above `blend.1`.
    pub blend: (f64, f64),
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { j_max: J_MAX, blend: (0.2, 1.5) }
    }
}

/// Background `H0 = h e^S h`, with `S` the blend of a truncated series and the flat-limit metric.
#[derive(Clone, Debug)]
pub struct AdmissibleMetric {
    pub op: OperPoint,
    pub order: usize,
    pub triple: PrincipalTriple,
    /// Near-field Higgs field in the model frame.
    pub higgs: LogLaurent,
    /// `S_near`, coefficients keyed by `(power, log power)`.
    pub series: LogLaurent,
    /// Boundary metric of the flat limit, absent for the nilpotent oper.
    pub flat: Option<CMatrix>,
    pub blend: (f64, f64),
    d_series: LogLaurent,
    dd_series: LogLaurent,
}

pub fn build_h0(op: &OperPoint, order: usize) -> Result<AdmissibleMetric> {
    build_h0_with(op, order, &BuildOptions::default())
}

pub fn build_h0_with(op: &OperPoint, order: usize, opts: &BuildOptions) -> Result<AdmissibleMetric> {
    if order > opts.j_max {
        return Err(Error::Domain(format!("order {order} exceeds configured maximum {}", opts.j_max)));
    }
    if !(0.0 < opts.blend.0 && opts.blend.0 < opts.blend.1) {
        return Err(Error::Domain("blend window must satisfy 0 < y_a < y_b".into()));
    }
    let higgs = oper_higgs_series(op, order as i32 + 3)?;
    let flat = if op.is_zero() {
        None
    } else {
        let h = boundary_metric(&oper_local_frame(op)?)?.h;
        let det = h.determinant().re;
        Some(h.scale(det.powf(-1.0 / op.n as f64)))
    };
    from_higgs(op.clone(), higgs, order, flat, opts.blend)
}

/// Background built from an arbitrary model-frame Higgs series with leading term `e+/(y sin b)`.
pub fn from_higgs(
    op: OperPoint,
    higgs: LogLaurent,
    order: usize,
    flat: Option<CMatrix>,
    blend: (f64, f64),
) -> Result<AdmissibleMetric> {
    let triple = principal_triple(op.n)?;
    let series = build_series(&op.tilt, &triple, &higgs, order)?;
    let d_series = series.deriv();
    let dd_series = d_series.deriv();
    Ok(AdmissibleMetric { op, order, triple, higgs, series, flat, blend, d_series, dd_series })
}

fn smoothstep(x: f64) -> [f64; 3] {
    if x <= 0.0 {
        return [0.0; 3];
    }
    if x >= 1.0 {
        return [1.0, 0.0, 0.0];
    }
    let (x2, x3) = (x * x, x * x * x);
    [
        x2 * x2 * (35.0 - 84.0 * x + 70.0 * x2 - 20.0 * x3),
        140.0 * x3 * (1.0 - 3.0 * x + 3.0 * x2 - x3),
        420.0 * x2 * (1.0 - 4.0 * x + 5.0 * x2 - 2.0 * x3),
    ]
}

impl AdmissibleMetric {
    pub fn holo(&self) -> Result<crate::geometry_fields::HoloData> {
        oper_local_frame(&self.op)
    }

    /// Coefficients `s_{j,l}` keyed by `(j, l)`.
    pub fn coefficients(&self) -> BTreeMap<(i32, u32), CMatrix> {
        self.series.terms.clone()
    }

    pub fn coefficients_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for (&(j, l), m) in &self.series.terms {
            let rows: Vec<Vec<[f64; 2]>> =
                (0..m.nrows()).map(|r| (0..m.ncols()).map(|k| [m[(r, k)].re, m[(r, k)].im]).collect()).collect();
            obj.insert(format!("{j},{l}"), serde_json::json!(rows));
        }
        serde_json::Value::Object(obj)
    }

    fn near_jet(&self, y: f64) -> [CMatrix; 3] {
        [self.series.eval(y), self.d_series.eval(y), self.dd_series.eval(y)]
    }

    fn far_jet(&self, hf: &CMatrix, y: f64) -> [CMatrix; 3] {
        let n = self.op.n;
        let w = self.triple.weights();
        let s = self.op.tilt.sin();
        let d0 = diag(w.iter().map(|&p| (y * s).powf(0.5 * p)), n);
        let d1 = diag(w.iter().map(|&p| 0.5 * p / y * (y * s).powf(0.5 * p)), n);
        let d2 = diag(w.iter().map(|&p| 0.5 * p * (0.5 * p - 1.0) / (y * y) * (y * s).powf(0.5 * p)), n);
        let a0 = &d0 * hf * &d0;
        let a1 = &d1 * hf * &d0 + &d0 * hf * &d1;
        let a2 = &d2 * hf * &d0 + (&d1 * hf * &d1).scale(2.0) + &d0 * hf * &d2;
        let (l0, l1, l2) = herm_fn_jet(ScalarFn::Log, &hermitian_part(&a0), &hermitian_part(&a1), &hermitian_part(&a2));
        [l0, l1, l2]
    }

    /// Jet `(S, S', S'')` of the exponent at `y`.
    pub fn sigma_jet(&self, y: f64) -> [CMatrix; 3] {
        let Some(hf) = &self.flat else {
            return self.near_jet(y);
        };
        let (ya, yb) = self.blend;
        if y <= ya {
            return self.near_jet(y);
        }
        if y >= yb {
            return self.far_jet(hf, y);
        }
        let width = yb - ya;
        let st = smoothstep((y - ya) / width);
        let (chi, chi1, chi2) = (1.0 - st[0], -st[1] / width, -st[2] / (width * width));
        let nj = self.near_jet(y);
        let fj = self.far_jet(hf, y);
        let diff0 = &nj[0] - &fj[0];
        let diff1 = &nj[1] - &fj[1];
        [
            &fj[0] + diff0.scale(chi),
            diff0.scale(chi1) + nj[1].scale(chi) + fj[1].scale(1.0 - chi),
            diff0.scale(chi2) + diff1.scale(2.0 * chi1) + nj[2].scale(chi) + fj[2].scale(1.0 - chi),
        ]
    }

    fn model_diag_jet(&self, y: f64) -> [CMatrix; 3] {
        let n = self.op.n;
        let w = self.triple.weights();
        let s = self.op.tilt.sin();
        [
            diag(w.iter().map(|&p| (y * s).powf(-0.5 * p)), n),
            diag(w.iter().map(|&p| -0.5 * p / y * (y * s).powf(-0.5 * p)), n),
            diag(w.iter().map(|&p| 0.5 * p * (0.5 * p + 1.0) / (y * y) * (y * s).powf(-0.5 * p)), n),
        ]
    }

    /// Frame `g = e^{S/2} h` with its first two `y`-derivatives.
    pub fn frame_jet(&self, y: f64) -> [CMatrix; 3] {
        let sj = self.sigma_jet(y);
        let (e0, e1, e2) = herm_fn_jet(ScalarFn::Exp, &sj[0].scale(0.5), &sj[1].scale(0.5), &sj[2].scale(0.5));
        let h = self.model_diag_jet(y);
        [&e0 * &h[0], &e1 * &h[0] + &e0 * &h[1], &e2 * &h[0] + (&e1 * &h[1]).scale(2.0) + &e0 * &h[2]]
    }

    pub fn frame(&self, mesh: &GradedMesh) -> FrameField {
        let jets: Vec<[CMatrix; 3]> = mesh.y.iter().map(|&y| self.frame_jet(y)).collect();
        let col = |k: usize| MatField::from_fn(mesh, self.op.n, |iy, _| jets[iy][k].clone());
        FrameField { g: col(0), dy: Some((col(1), col(2))) }
    }

    pub fn metric(&self, mesh: &GradedMesh) -> MatField {
        self.frame(mesh).metric()
    }

    /// Higgs field `e+/(y sin b) + b(y)` in the model frame, split into pole and remainder.
    fn higgs_split(&self, y: f64) -> (CMatrix, CMatrix) {
        let mut phi = CMatrix::zeros(self.op.n, self.op.n);
        let mut b = CMatrix::zeros(self.op.n, self.op.n);
        for (&(p, l), m) in &self.higgs.terms {
            let v = m.scale(y.powi(p) * y.ln().powi(l as i32));
            if p == -1 && l == 0 {
                phi += v;
            } else {
                b += v;
            }
        }
        (phi, b)
    }

    /// Higgs field in the model frame.
    pub fn model_higgs_at(&self, y: f64) -> CMatrix {
        let (phi, b) = self.higgs_split(y);
        phi + b
    }

    /// Moment map of `H0` at `y`, in the unitary frame `g`.
    pub fn omega_at(&self, y: f64) -> CMatrix {
        let sj = self.sigma_jet(y);
        let (phi, b) = self.higgs_split(y);
        let om = omega_model_frame(&self.op.tilt, &self.triple.e_zero, &phi, &b, y, &sj);
        let e = exp_herm(&sj[0].scale(0.5));
        let ei = exp_herm(&sj[0].scale(-0.5));
        hermitian_part(&(e * om * ei))
    }

    pub fn omega_field(&self, mesh: &GradedMesh) -> MatField {
        MatField::from_fn(mesh, self.op.n, |iy, _| self.omega_at(mesh.y[iy]))
    }

    /// Moment map of the truncated series alone, evaluated at `y` in the model frame.
    pub fn omega_series_at(&self, y: f64) -> Result<CMatrix> {
        let om = omega_series(&self.op.tilt, &self.triple.e_zero, &self.higgs, &self.series)?;
        let trimmed = LogLaurent {
            terms: om.terms.into_iter().filter(|(k, _)| k.0 <= self.order as i32).collect(),
            ..LogLaurent::zero(self.op.n, self.order as i32)
        };
        Ok(trimmed.eval(y))
    }
}

/// Sentinel returned when the field vanishes to roundoff at the smallest nodes.
pub const VANISHING_INFINITE: f64 = f64::INFINITY;

/// Least-squares slope of `log|u|` against `log y` over the three smallest nodes.
pub fn vanishing_order(mesh: &GradedMesh, u: &MatField) -> Result<f64> {
    let below = mesh.y.iter().filter(|&&y| y < 0.1).count();
    if below < 4 {
        return Err(Error::Domain(format!("vanishing order needs 4 nodes below y = 0.1, mesh has {below}")));
    }
    let pts: Vec<(f64, f64)> = (0..3)
        .map(|iy| {
            let norm = (0..mesh.nz()).map(|iz| fro(u.at(iy, iz))).fold(0.0, f64::max);
            (mesh.y[iy], norm)
        })
        .collect();
    if pts.iter().all(|p| p.1 < 1e-13) {
        return Ok(VANISHING_INFINITE);
    }
    if pts.iter().any(|p| p.1 == 0.0) {
        return Err(Error::Domain("field vanishes at some but not all fit nodes".into()));
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / 3.0;
    let my = ys.iter().sum::<f64>() / 3.0;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Max over nodes below `y_cut` of `y^{1-eps} |F - F_model|` for each of `A_z, phi_z, phi_1`.
pub fn nahm_pole_defect(fields: &UnitaryFields, model: &UnitaryFields, eps: f64, y_cut: f64) -> f64 {
    let mesh = &fields.mesh;
    let mut worst = 0.0f64;
    for iy in 0..mesh.ny() {
        let y = mesh.y[iy];
        if y >= y_cut {
            break;
        }
        for (a, b) in [(&fields.a_z, &model.a_z), (&fields.phi_z, &model.phi_z), (&fields.phi_1, &model.phi_1), (&fields.a_y, &model.a_y)] {
            for iz in 0..mesh.nz() {
                worst = worst.max(y.powf(1.0 - eps) * max_abs(&(a.at(iy, iz) - b.at(iy, iz))));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry_fields::{
        chern_fields, chern_fields_sigma, commutator_residuals, gebe_residuals, make_mesh, model_frame, reduced_residuals,
    };
    use crate::lie_core::{random_hermitian, tilt_params};
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mesh() -> Arc<GradedMesh> {
        Arc::new(make_mesh(1e-3, 12.0, 200, 1.08, 1, 1.0).unwrap())
    }

    fn oper(n: usize, beta: f64, q: &[f64]) -> OperPoint {
        OperPoint::new(n, tilt_params(beta).unwrap(), q.iter().map(|&x| c(x)).collect()).unwrap()
    }

    fn y2_weighted(fields: &[MatField], mesh: &GradedMesh) -> f64 {
        let mut worst = 0.0f64;
        for f in fields {
            for iy in 1..mesh.ny() - 1 {
                worst = worst.max(mesh.y[iy] * mesh.y[iy] * max_abs(f.at(iy, 0)));
            }
        }
        worst
    }

    #[test]
    fn model_solves_every_system() {
        let m = mesh();
        for n in 2..=4 {
            for beta in [0.1, 0.3] {
                let tilt = tilt_params(beta).unwrap();
                let f = model_fields(n, &tilt, m.clone()).unwrap();
                let worst = y2_weighted(&commutator_residuals(&f, &tilt), &m)
                    .max(y2_weighted(&reduced_residuals(&f, &tilt), &m))
                    .max(y2_weighted(&gebe_residuals(&f, &tilt), &m));
                assert!(worst < 1e-10, "n={n} beta={beta}: {worst}");
            }
        }
    }

    #[test]
    fn chern_fields_of_model_frame_reproduce_model() {
        let m = mesh();
        for n in 2..=4 {
            let tilt = tilt_params(0.2).unwrap();
            let t = principal_triple(n).unwrap();
            let holo = oper_local_frame(&oper(n, 0.2, &vec![0.0; n - 1])).unwrap();
            let f = chern_fields(m.clone(), &holo, &model_frame(&m, &t, &tilt), &MatField::zeros(&m, n)).unwrap();
            let g = model_fields(n, &tilt, m.clone()).unwrap();
            for (a, b) in [(&f.a_z, &g.a_z), (&f.phi_z, &g.phi_z), (&f.a_y, &g.a_y), (&f.phi_1, &g.phi_1)] {
                for iy in 0..m.ny() {
                    assert!(m.y[iy] * max_abs(&(a.at(iy, 0) - b.at(iy, 0))) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn small_tilt_gives_untwisted_pole() {
        let m = mesh();
        let tilt = tilt_params(1e-6).unwrap();
        let f = model_fields(3, &tilt, m.clone()).unwrap();
        let t = principal_triple(3).unwrap();
        for iy in [0, 50, 199] {
            let y = m.y[iy];
            assert!(y * max_abs(f.a_z.at(iy, 0)) < 2e-6);
            assert!(y * max_abs(&(f.phi_z.at(iy, 0) - t.e_plus.scale(1.0 / y))) < 1e-11);
        }
    }

    #[test]
    fn oper_frame_examples() {
        let op = oper(3, 0.2, &[0.0, 0.0]);
        let t = principal_triple(3).unwrap();
        assert_eq!(oper_local_frame(&op).unwrap().alpha, t.e_plus);
        assert!(max_abs(&oper_tail(&op, 0.3)) == 0.0);
        let op2 = oper(2, 0.2, &[1.0]);
        let b = oper_tail(&op2, 0.37);
        assert_eq!(b[(1, 0)], c(0.37));
        assert_eq!(b[(0, 0)] + b[(0, 1)] + b[(1, 1)], c(0.0));
    }

    #[test]
    fn oper_frame_conjugation_matches_model_decomposition() {
        let tilt = tilt_params(0.25).unwrap();
        let m = mesh();
        for n in 2..=4 {
            let q: Vec<C64> = (0..n - 1).map(|i| C64::new(0.3 + i as f64, -0.2 * i as f64)).collect();
            let op = OperPoint::new(n, tilt, q).unwrap();
            let alpha = oper_local_frame(&op).unwrap().alpha;
            let t = principal_triple(n).unwrap();
            let frame = model_frame(&m, &t, &tilt);
            for iy in [0, 40, 120] {
                let y = m.y[iy];
                let g = frame.g.at(iy, 0);
                let lhs = g * &alpha * g.clone().try_inverse().unwrap();
                let rhs = model_higgs(&t, &tilt, y) + oper_tail(&op, y);
                assert!(max_abs(&(lhs - &rhs)) < 1e-12 * (1.0 + max_abs(&rhs)));
            }
        }
    }

    #[test]
    fn nilpotent_oper_gives_model_exactly() {
        let m = mesh();
        for n in 2..=4 {
            let op = oper(n, 0.2, &vec![0.0; n - 1]);
            let h0 = build_h0(&op, n).unwrap();
            assert!(h0.series.terms.is_empty());
            let a = h0.metric(&m);
            let b = model_metric(n, &op.tilt, &m).unwrap();
            for iy in 0..m.ny() {
                assert!(max_abs(&(a.at(iy, 0) - b.at(iy, 0))) < 1e-14 * max_abs(b.at(iy, 0)));
                assert_eq!(max_abs(&h0.omega_at(m.y[iy])), 0.0);
            }
            assert_eq!(vanishing_order(&m, &h0.omega_field(&m)).unwrap(), VANISHING_INFINITE);
        }
    }

    #[test]
    fn order_one_background_vanishes_to_second_order() {
        let m = mesh();
        let h0 = build_h0(&oper(2, 0.2, &[0.5]), 1).unwrap();
        let v = vanishing_order(&m, &h0.omega_field(&m)).unwrap();
        assert!(v >= 1.8, "slope {v}");
        // order 0 leaves an O(1) error
        let raw = build_h0(&oper(2, 0.2, &[0.5]), 0).unwrap();
        assert!(raw.series.terms.keys().all(|k| k.0 == 2));
    }

    #[test]
    fn vanishing_order_reaches_requested_order() {
        let m = mesh();
        for (n, q, order) in [(2usize, vec![0.5], 2usize), (2, vec![1.0], 3), (3, vec![0.4, 0.3], 2), (3, vec![0.0, 0.7], 3)] {
            let h0 = build_h0(&oper(n, 0.2, &q), order).unwrap();
            let v = vanishing_order(&m, &h0.omega_field(&m)).unwrap();
            assert!(v >= order as f64 + 1.0 - 0.2, "n={n} q={q:?} J={order}: {v}");
        }
    }

    #[test]
    fn series_and_pointwise_moment_maps_agree() {
        let h0 = build_h0(&oper(3, 0.2, &[0.4, 0.3]), 3).unwrap();
        for y in [1e-3, 3e-3, 1e-2] {
            let s = h0.sigma_jet(y);
            let (phi, b) = h0.higgs_split(y);
            let direct = omega_model_frame(&h0.op.tilt, &h0.triple.e_zero, &phi, &b, y, &s);
            let series = h0.omega_series_at(y).unwrap();
            // series truncated at y^3: the next order is O(y^4 log^2 y)
            assert!(max_abs(&(direct - series)) < 1e3 * y.powi(4), "y={y}");
        }
    }

    /// `(-d^2 + lambda/y^2)` applied to a series with scalar-times-matrix terms.
    fn apply_normal(lambda: f64, s: &LogLaurent) -> LogLaurent {
        let mut out = s.deriv().deriv().scale(c(-1.0));
        for (&(p, l), m) in &s.terms {
            out.push(p - 2, l, m.scale(lambda));
        }
        out
    }

    #[test]
    fn resonant_and_plain_normal_solves() {
        let v = principal_triple(3).unwrap().e_zero;
        for (lambda, p, top) in [(2.0, 2, 0u32), (2.0, 2, 1), (6.0, 3, 2), (6.0, 2, 1), (2.0, 4, 2)] {
            let mut f = BTreeMap::new();
            for l in 0..=top {
                f.insert(l, v.scale(1.0 + l as f64));
            }
            let d = normal_solve(lambda, p, &f, 3);
            let resonant = (lambda - (p * (p - 1)) as f64).abs() < 1e-12;
            assert_eq!(d.keys().max().copied().unwrap(), if resonant { top + 1 } else { top });
            let mut sol = LogLaurent::zero(3, 10);
            d.into_iter().for_each(|(l, m)| sol.push(p, l, m));
            let lhs = apply_normal(lambda, &sol);
            for l in 0..=top + 1 {
                let want = f.get(&l).map(|m| -m).unwrap_or_else(|| CMatrix::zeros(3, 3));
                let got = lhs.terms.get(&(p - 2, l)).cloned().unwrap_or_else(|| CMatrix::zeros(3, 3));
                assert!(max_abs(&(got - want)) < 1e-12, "lambda={lambda} p={p} l={l}");
            }
        }
    }

    #[test]
    fn constant_opers_need_no_logarithms() {
        for (n, q) in [(2usize, vec![0.5]), (3, vec![0.4, 0.3]), (4, vec![0.3, 0.2, 0.1])] {
            let h0 = build_h0(&oper(n, 0.2, &q), J_MAX).unwrap();
            assert!(h0.series.terms.keys().all(|k| k.1 == 0), "n={n}");
            assert!(h0.series.terms.keys().all(|k| k.0 >= 2));
        }
        assert!(build_h0(&oper(2, 0.2, &[0.5]), J_MAX + 1).is_err());
    }

    #[test]
    fn normal_operator_matches_finite_difference() {
        // Linearize the pointwise moment map at the model in direction y^j v_k.
        for n in [2usize, 3, 4] {
            let tilt = tilt_params(0.2).unwrap();
            let t = principal_triple(n).unwrap();
            let cas = CasimirDecomposition::new(&t);
            let mut rng = ChaCha8Rng::seed_from_u64(7 + n as u64);
            let parts = cas.split(&random_hermitian(&mut rng, n, 1.0));
            for (idx, v) in parts.iter().enumerate() {
                let k = (idx + 1) as f64;
                for j in [1i32, 3, 5] {
                    if (j as f64 - k - 1.0).abs() < 1e-12 {
                        continue;
                    }
                    let y: f64 = 0.3;
                    let eps = 1e-5;
                    let jf = j as f64;
                    let jet = |e: f64| {
                        [
                            v.scale(e * y.powi(j)),
                            v.scale(e * jf * y.powi(j - 1)),
                            v.scale(e * jf * (jf - 1.0) * y.powi(j - 2)),
                        ]
                    };
                    let phi = model_higgs(&t, &tilt, y);
                    let zero = CMatrix::zeros(n, n);
                    let om = |e: f64| omega_model_frame(&tilt, &t.e_zero, &phi, &zero, y, &jet(e));
                    let fd = (om(eps) - om(-eps)).scale(0.5 / eps);
                    let expect = v.scale((k * (k + 1.0) - jf * (jf - 1.0)) * y.powi(j - 2));
                    assert!(max_abs(&(&fd - &expect)) < 1e-7 * (1.0 + max_abs(&expect)), "n={n} k={k} j={j}");
                }
            }
        }
    }

    #[test]
    fn unitary_equivariance() {
        // Diagonal unitaries fix the model frame; the background transforms by conjugation.
        let op = oper(3, 0.2, &[0.4, 0.3]);
        let base = build_h0(&op, 3).unwrap();
        let u = diag_phase(&[0.3, -1.1, 0.8]);
        let ui = u.adjoint();
        let mut higgs = base.higgs.clone();
        higgs.terms.values_mut().for_each(|m| *m = &u * &*m * &ui);
        let rot = from_higgs(op, higgs, 3, None, base.blend).unwrap();
        for (key, m) in &base.series.terms {
            let r = rot.series.terms.get(key).unwrap();
            assert!(max_abs(&(&u * m * &ui - r)) < 1e-10);
        }
        assert_eq!(rot.series.terms.len(), base.series.terms.len());
    }

    fn diag_phase(th: &[f64]) -> CMatrix {
        CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(th.len(), th.iter().map(|&t| (I * t).exp())))
    }

    #[test]
    fn background_depends_continuously_on_q() {
        let m = mesh();
        let metric = |q: f64| build_h0(&oper(2, 0.2, &[q]), 2).unwrap().frame(&m).g;
        let base = metric(0.5);
        let mut ratios = Vec::new();
        for dq in [1e-2, 5e-3, 2.5e-3] {
            let other = metric(0.5 + dq);
            let mut worst = 0.0f64;
            for iy in 0..m.ny() {
                let g = base.at(iy, 0);
                let rel = g.clone().try_inverse().unwrap() * other.at(iy, 0) - CMatrix::identity(2, 2);
                worst = worst.max(max_abs(&rel));
            }
            ratios.push(worst / dq);
        }
        assert!(ratios.iter().all(|&r| r < 10.0), "{ratios:?}");
        assert!((ratios[0] / ratios[2] - 1.0).abs() < 0.1, "{ratios:?}");
    }

    #[test]
    fn background_reaches_flat_limit() {
        let m = mesh();
        let op = oper(2, 0.2, &[0.5]);
        let h0 = build_h0(&op, 2).unwrap();
        let hf = h0.flat.clone().unwrap();
        let metric = h0.metric(&m);
        for iy in 0..m.ny() {
            let y = m.y[iy];
            if y >= h0.blend.1 {
                assert!(max_abs(&(metric.at(iy, 0) - &hf)) < 1e-10 * max_abs(&hf));
                assert!(max_abs(&h0.omega_at(y)) < 1e-10);
            }
        }
    }

    #[test]
    fn background_has_nahm_pole_rates() {
        let m = mesh();
        let op = oper(2, 0.2, &[0.5]);
        let h0 = build_h0(&op, 2).unwrap();
        let f = chern_fields_sigma(m.clone(), &h0.holo().unwrap(), &h0.frame(&m)).unwrap();
        let model = model_fields(2, &op.tilt, m.clone()).unwrap();
        assert!(nahm_pole_defect(&f, &model, 0.5, 0.1) < 0.1);
        assert!(f.unitarity_defect() < 1e-9 * 1e3);
    }

    #[test]
    fn vanishing_order_examples() {
        let m = mesh();
        let t = principal_triple(2).unwrap();
        let cubic = MatField::from_fn(&m, 2, |iy, _| t.e_zero.scale(m.y[iy].powi(3)));
        assert!((vanishing_order(&m, &cubic).unwrap() - 3.0).abs() < 0.05);
        let zero = MatField::zeros(&m, 2);
        assert_eq!(vanishing_order(&m, &zero).unwrap(), VANISHING_INFINITE);
        let log = MatField::from_fn(&m, 2, |iy, _| t.e_zero.scale(m.y[iy].powi(2) * m.y[iy].ln()));
        let v = vanishing_order(&m, &log).unwrap();
        assert!((1.8..=2.0).contains(&v), "{v}");
        let coarse = Arc::new(make_mesh(0.05, 3.0, 20, 1.5, 1, 1.0).unwrap());
        assert!(vanishing_order(&coarse, &MatField::zeros(&coarse, 2)).is_err());
    }

    proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn series_exponential_inverts(seed in 0u64..1000, n in 2usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = LogLaurent::zero(n, 8);
            s.push(2, 1, random_hermitian(&mut rng, n, 0.5));
            s.push(3, 0, random_hermitian(&mut rng, n, 0.5));
            let prod = s.exp().unwrap().mul(&s.scale(c(-1.0)).exp().unwrap());
            let id = LogLaurent::monomial(0, 0, CMatrix::identity(n, n), 8);
            let diff = prod.sub(&id);
            prop_assert!(diff.terms.values().all(|m| max_abs(m) < 1e-12));
        }
    }
}

//! Meshes, matrix fields, unitary-gauge configurations and the residual systems.
//!
//! Conventions: `d_z = (d_x - i d_x2) / 2`, `A_zbar = -A_z^dagger`,
//! `phi_zbar = -phi_z^dagger`, and `A_y`, `phi_1` anti-Hermitian.

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lie_core::{
    c, comm, exp_herm, herm_fn, max_abs, random_hermitian, random_matrix, re_tr_prod, remove_trace, sqrt_pos, CMatrix,
    PrincipalTriple, TiltParams, C64, I,
};

#[derive(Clone, Debug)]
pub struct GradedMesh {
    pub y: Vec<f64>,
    pub grading: f64,
    pub torus_size: usize,
    pub torus_period: f64,
    /// First index of the three-point stencil used at each node.
    stencil_start: Vec<usize>,
    d1: Vec<[f64; 3]>,
    d2: Vec<[f64; 3]>,
}

fn lagrange_weights(x: f64, nodes: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let mut d1 = [0.0; 3];
    let mut d2 = [0.0; 3];
    for k in 0..3 {
        let (a, b) = ((k + 1) % 3, (k + 2) % 3);
        let denom = (nodes[k] - nodes[a]) * (nodes[k] - nodes[b]);
        d1[k] = ((x - nodes[a]) + (x - nodes[b])) / denom;
        d2[k] = 2.0 / denom;
    }
    (d1, d2)
}

impl GradedMesh {
    pub fn from_nodes(y: Vec<f64>, grading: f64, torus_size: usize, torus_period: f64) -> Result<Self> {
        if y.len() < 3 || y.windows(2).any(|w| w[1] <= w[0]) || y[0] <= 0.0 {
            return Err(Error::Domain("mesh nodes must be positive and increasing".into()));
        }
        if torus_size == 0 || torus_period <= 0.0 {
            return Err(Error::Domain("torus size must be >= 1 with positive period".into()));
        }
        let ny = y.len();
        let mut stencil_start = Vec::with_capacity(ny);
        let mut d1 = Vec::with_capacity(ny);
        let mut d2 = Vec::with_capacity(ny);
        for i in 0..ny {
            let s = i.saturating_sub(1).min(ny - 3);
            let (w1, w2) = lagrange_weights(y[i], [y[s], y[s + 1], y[s + 2]]);
            stencil_start.push(s);
            d1.push(w1);
            d2.push(w2);
        }
        Ok(GradedMesh { y, grading, torus_size, torus_period, stencil_start, d1, d2 })
    }

    pub fn ny(&self) -> usize {
        self.y.len()
    }

    pub fn nz(&self) -> usize {
        self.torus_size * self.torus_size
    }

    pub fn y_min(&self) -> f64 {
        self.y[0]
    }

    pub fn y_max(&self) -> f64 {
        *self.y.last().unwrap()
    }

    /// Spacing `y[i+1] - y[i]`.
    pub fn h(&self, i: usize) -> f64 {
        self.y[i + 1] - self.y[i]
    }

    /// Trapezoid weight in `y`.
    pub fn weight(&self, i: usize) -> f64 {
        let ny = self.ny();
        let left = if i > 0 { self.h(i - 1) } else { 0.0 };
        let right = if i + 1 < ny { self.h(i) } else { 0.0 };
        0.5 * (left + right)
    }

    pub fn torus_spacing(&self) -> f64 {
        self.torus_period / self.torus_size as f64
    }

    pub fn area_weight(&self) -> f64 {
        self.torus_spacing().powi(2)
    }

    pub fn stencil(&self, i: usize) -> (usize, [f64; 3], [f64; 3]) {
        (self.stencil_start[i], self.d1[i], self.d2[i])
    }

    /// Mesh with every interval split once: geometric midpoints below 1, arithmetic above.
    pub fn refine(&self) -> Self {
        // Cubic interpolation of ln y in the node index keeps the node map smooth.
        let ln: Vec<f64> = self.y.iter().map(|v| v.ln()).collect();
        let ny = ln.len();
        let mut y = Vec::with_capacity(2 * ny - 1);
        for i in 0..ny - 1 {
            y.push(self.y[i]);
            let s = i.saturating_sub(1).min(ny.saturating_sub(4));
            let x = i as f64 + 0.5;
            let mut mid = 0.0;
            for a in s..(s + 4).min(ny) {
                let w: f64 = (s..(s + 4).min(ny)).filter(|&b| b != a).map(|b| (x - b as f64) / (a as f64 - b as f64)).product();
                mid += w * ln[a];
            }
            y.push(mid.exp().clamp(self.y[i], self.y[i + 1]));
        }
        y.push(self.y_max());
        GradedMesh::from_nodes(y, self.grading.sqrt(), self.torus_size, self.torus_period)
            .expect("refined nodes stay increasing")
    }

    /// Number of nodes with `y < 1`.
    pub fn nodes_below_one(&self) -> usize {
        self.y.iter().filter(|&&v| v < 1.0).count()
    }
}

/// Rate `b` with `b / (e^b - 1) = slope`, the start slope of the unit profile `(e^{bx} - 1) / (e^b - 1)`.
fn exp_profile_rate(slope: f64) -> f64 {
    let f = |b: f64| if b.abs() < 1e-12 { 1.0 } else { b / b.exp_m1() };
    let (mut lo, mut hi) = (-1.0, 1.0);
    while f(lo) < slope {
        lo *= 2.0;
    }
    while f(hi) > slope {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > slope { lo = mid } else { hi = mid }
    }
    0.5 * (lo + hi)
}

/// Geometric nodes (ratio at most `grading`) on `[y_min, 1)`, then a smooth exponential profile on `[1, y_max]`.
pub fn make_mesh(
    y_min: f64,
    y_max: f64,
    count: usize,
    grading: f64,
    torus_size: usize,
    period: f64,
) -> Result<GradedMesh> {
    if !(y_min > 0.0 && y_min < 1.0 && y_max > 1.0) {
        return Err(Error::Domain(format!("need 0 < y_min < 1 < y_max, got ({y_min}, {y_max})")));
    }
    if count < 16 || grading <= 1.0 {
        return Err(Error::Domain("need count >= 16 and grading > 1".into()));
    }
    let k = ((1.0 / y_min).ln() / grading.ln()).ceil() as usize;
    if k + 2 > count {
        return Err(Error::Domain(format!("{count} nodes cannot reach y=1 at grading {grading}")));
    }
    let ratio = (1.0 / y_min).powf(1.0 / k as f64);
    let mut y: Vec<f64> = (0..k).map(|i| y_min * ratio.powi(i as i32)).collect();
    // Above 1 the spacing starts at the last log-step, so the node map is C1 at y = 1.
    let m = count - k;
    let slope = ratio.ln() * (m - 1) as f64 / (y_max - 1.0);
    let b = exp_profile_rate(slope);
    let profile = |x: f64| if b.abs() < 1e-9 { x } else { (b * x).exp_m1() / b.exp_m1() };
    y.extend((0..m).map(|j| 1.0 + (y_max - 1.0) * profile(j as f64 / (m - 1) as f64)));
    *y.last_mut().unwrap() = y_max;
    GradedMesh::from_nodes(y, grading, torus_size, period)
}

/// Matrix-valued field sampled on mesh nodes, index `iy * nz + iz`.
#[derive(Clone, Debug)]
pub struct MatField {
    pub ny: usize,
    pub nz: usize,
    pub n: usize,
    pub data: Vec<CMatrix>,
}

impl MatField {
    pub fn zeros(mesh: &GradedMesh, n: usize) -> Self {
        MatField { ny: mesh.ny(), nz: mesh.nz(), n, data: vec![CMatrix::zeros(n, n); mesh.ny() * mesh.nz()] }
    }

    pub fn from_fn(mesh: &GradedMesh, n: usize, mut f: impl FnMut(usize, usize) -> CMatrix) -> Self {
        let mut data = Vec::with_capacity(mesh.ny() * mesh.nz());
        for iy in 0..mesh.ny() {
            for iz in 0..mesh.nz() {
                data.push(f(iy, iz));
            }
        }
        MatField { ny: mesh.ny(), nz: mesh.nz(), n, data }
    }

    pub fn at(&self, iy: usize, iz: usize) -> &CMatrix {
        &self.data[iy * self.nz + iz]
    }

    pub fn map(&self, f: impl Fn(&CMatrix) -> CMatrix) -> Self {
        MatField { ny: self.ny, nz: self.nz, n: self.n, data: self.data.iter().map(f).collect() }
    }

    pub fn zip(&self, other: &MatField, f: impl Fn(&CMatrix, &CMatrix) -> CMatrix) -> Self {
        MatField {
            ny: self.ny,
            nz: self.nz,
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(a, b)).collect(),
        }
    }

    /// Max entry modulus over nodes with `lo <= iy < hi`.
    pub fn max_abs_rows(&self, lo: usize, hi: usize) -> f64 {
        (lo * self.nz..hi * self.nz).fold(0.0, |m, k| m.max(max_abs(&self.data[k])))
    }

    pub fn max_abs_interior(&self) -> f64 {
        self.max_abs_rows(1, self.ny - 1)
    }
}

/// `d/dy` by the mesh stencils (second order, one-sided at the ends).
pub fn d_y(mesh: &GradedMesh, f: &MatField) -> MatField {
    MatField::from_fn(mesh, f.n, |iy, iz| {
        let (s, w, _) = mesh.stencil(iy);
        (0..3).fold(CMatrix::zeros(f.n, f.n), |acc, k| acc + f.at(s + k, iz).scale(w[k]))
    })
}

pub fn d_yy(mesh: &GradedMesh, f: &MatField) -> MatField {
    MatField::from_fn(mesh, f.n, |iy, iz| {
        let (s, _, w) = mesh.stencil(iy);
        (0..3).fold(CMatrix::zeros(f.n, f.n), |acc, k| acc + f.at(s + k, iz).scale(w[k]))
    })
}

/// Periodic central differences `(d_x, d_x2)`; identically zero when the torus has one point.
pub fn d_torus(mesh: &GradedMesh, f: &MatField) -> (MatField, MatField) {
    let m = mesh.torus_size;
    if m == 1 {
        return (f.map(|a| CMatrix::zeros(a.nrows(), a.ncols())), f.map(|a| CMatrix::zeros(a.nrows(), a.ncols())));
    }
    let inv = 0.5 / mesh.torus_spacing();
    let idx = |ix: usize, iw: usize| (ix % m) * m + (iw % m);
    let dx = MatField::from_fn(mesh, f.n, |iy, iz| {
        let (ix, iw) = (iz / m, iz % m);
        (f.at(iy, idx(ix + 1, iw)) - f.at(iy, idx(ix + m - 1, iw))).scale(inv)
    });
    let dw = MatField::from_fn(mesh, f.n, |iy, iz| {
        let (ix, iw) = (iz / m, iz % m);
        (f.at(iy, idx(ix, iw + 1)) - f.at(iy, idx(ix, iw + m - 1))).scale(inv)
    });
    (dx, dw)
}

/// `(d_z f, d_zbar f)`.
pub fn d_z(mesh: &GradedMesh, f: &MatField) -> (MatField, MatField) {
    let (dx, dw) = d_torus(mesh, f);
    let dz = dx.zip(&dw, |a, b| (a - b * I).scale(0.5));
    let dzb = dx.zip(&dw, |a, b| (a + b * I).scale(0.5));
    (dz, dzb)
}

/// A matrix coefficient together with its first derivatives.
#[derive(Clone, Debug)]
pub struct Jet {
    pub v: CMatrix,
    pub dy: CMatrix,
    pub dz: CMatrix,
    pub dzb: CMatrix,
}

impl Jet {
    pub fn constant(v: CMatrix) -> Self {
        let z = CMatrix::zeros(v.nrows(), v.ncols());
        Jet { v, dy: z.clone(), dz: z.clone(), dzb: z }
    }

    /// Jet of `-X^dagger`, the conjugation rule for the barred components.
    pub fn bar(&self) -> Jet {
        Jet {
            v: -self.v.adjoint(),
            dy: -self.dy.adjoint(),
            dz: -self.dzb.adjoint(),
            dzb: -self.dz.adjoint(),
        }
    }

    pub fn scale(&self, a: C64) -> Jet {
        Jet { v: &self.v * a, dy: &self.dy * a, dz: &self.dz * a, dzb: &self.dzb * a }
    }

    pub fn add(&self, o: &Jet) -> Jet {
        Jet { v: &self.v + &o.v, dy: &self.dy + &o.dy, dz: &self.dz + &o.dz, dzb: &self.dzb + &o.dzb }
    }

    pub fn conj(&self, g: &CMatrix, gi: &CMatrix) -> Jet {
        Jet { v: g * &self.v * gi, dy: g * &self.dy * gi, dz: g * &self.dz * gi, dzb: g * &self.dzb * gi }
    }
}

/// Unitary-gauge fields at one node; `a_1` is the extra component used only by the twisted reduction.
#[derive(Clone, Debug)]
pub struct NodeJet {
    pub a_z: Jet,
    pub phi_z: Jet,
    pub a_y: Jet,
    pub phi_1: Jet,
    pub a_1: Jet,
}

impl NodeJet {
    pub fn conj(&self, g: &CMatrix) -> NodeJet {
        let gi = g.adjoint();
        NodeJet {
            a_z: self.a_z.conj(g, &gi),
            phi_z: self.phi_z.conj(g, &gi),
            a_y: self.a_y.conj(g, &gi),
            phi_1: self.phi_1.conj(g, &gi),
            a_1: self.a_1.conj(g, &gi),
        }
    }
}

/// Curvature and covariant-derivative building blocks of all residual systems.
struct Blocks {
    f: CMatrix,
    x: CMatrix,
    y: CMatrix,
    f_yz: CMatrix,
    f_yzb: CMatrix,
    dy_phi_z: CMatrix,
    dy_phi_zb: CMatrix,
    dz_phi1: CMatrix,
    dzb_phi1: CMatrix,
    dy_phi1: CMatrix,
    phiz_phi1: CMatrix,
    phizb_phi1: CMatrix,
}

fn blocks(j: &NodeJet) -> Blocks {
    let azb = j.a_z.bar();
    let pzb = j.phi_z.bar();
    let (az, pz, ay, p1) = (&j.a_z, &j.phi_z, &j.a_y, &j.phi_1);
    let f_zzb = &azb.dz - &az.dzb + comm(&az.v, &azb.v);
    let dz_pzb = &pzb.dz + comm(&az.v, &pzb.v);
    let dzb_pz = &pz.dzb + comm(&azb.v, &pz.v);
    Blocks {
        f: f_zzb - comm(&pz.v, &pzb.v),
        x: &dz_pzb - &dzb_pz,
        y: &dz_pzb + &dzb_pz,
        f_yz: &az.dy - &ay.dz + comm(&ay.v, &az.v),
        f_yzb: &azb.dy - &ay.dzb + comm(&ay.v, &azb.v),
        dy_phi_z: &pz.dy + comm(&ay.v, &pz.v),
        dy_phi_zb: &pzb.dy + comm(&ay.v, &pzb.v),
        dz_phi1: &p1.dz + comm(&az.v, &p1.v),
        dzb_phi1: &p1.dzb + comm(&azb.v, &p1.v),
        dy_phi1: &p1.dy + comm(&ay.v, &p1.v),
        phiz_phi1: comm(&pz.v, &p1.v),
        phizb_phi1: comm(&pzb.v, &p1.v),
    }
}

/// `(I12, I13, I23, I_mm)`: the operator commutators and the moment map.
pub fn system_at(j: &NodeJet, tilt: &TiltParams) -> [CMatrix; 4] {
    let b = blocks(j);
    let (s, co) = (tilt.sin(), tilt.cos());
    let (s2, c2) = ((2.0 * tilt.beta).sin(), (2.0 * tilt.beta).cos());
    let i12 = b.f.scale(s2) + b.x.scale(c2) - &b.y;
    let i13 = &b.f_yzb - b.dy_phi_zb.scale(s / co) + &b.dzb_phi1 * (I / co) - &b.phizb_phi1 * (I * s / (co * co));
    let i23 = &b.f_yz + b.dy_phi_z.scale(co / s) + &b.dz_phi1 * (I / co) + &b.phiz_phi1 * (I / s);
    let imm = b.f.scale(c2) - b.x.scale(s2) - &b.dy_phi1 * (I * 2.0 / co);
    [i12, i13, i23, imm]
}

/// The five reduced equations, each written as `residual = 0`.
pub fn reduced_at(j: &NodeJet, tilt: &TiltParams) -> [CMatrix; 5] {
    let b = blocks(j);
    let (s, co) = (tilt.sin(), tilt.cos());
    let beta2 = 2.0 * tilt.beta;
    let e1 = &b.f + b.x.scale(beta2.cos() / beta2.sin());
    let e2 = &b.dy_phi1 * I + b.x.scale(0.25 / s);
    let e3 = &b.f_yz * I + b.dz_phi1.scale(beta2.cos() / co) - b.phiz_phi1.scale(2.0 * s);
    let e4 = &b.dy_phi_z * I - b.dz_phi1.scale(2.0 * s) - b.phiz_phi1.scale(beta2.cos() / co);
    [e1, e2, e3, e4, b.y]
}

/// The twisted reduction with independent `A_1`; `c_minus`, `c_plus` from the tilt.
pub fn gebe_at(j: &NodeJet, c_minus: f64, c_plus: f64) -> [CMatrix; 5] {
    let b = blocks(j);
    let pzb = j.phi_z.bar();
    let azb = j.a_z.bar();
    let a1 = &j.a_1;
    let dy_a1 = &a1.dy + comm(&j.a_y.v, &a1.v);
    let dzb_a1 = &a1.dzb + comm(&azb.v, &a1.v);
    let pzb_a1 = comm(&pzb.v, &a1.v);
    let g1a = &b.f + b.x.scale(c_minus) - &b.dy_phi1 * (I * 2.0 * c_plus);
    let g1b = &b.f_yzb + b.dy_phi_zb.scale(c_minus) + (&b.dzb_phi1 + &pzb_a1) * (I * c_plus);
    let g2a = dy_a1 + b.dy_phi1.scale(c_minus) + &b.x * (I * 0.5 * c_plus);
    let g2b = dzb_a1 - &b.phizb_phi1 + (&b.dzb_phi1 + &pzb_a1).scale(c_minus) - &b.dy_phi_zb * (I * c_plus);
    let g3 = &b.y - comm(&j.phi_1.v, &a1.v).scale(0.5);
    [g1a, g1b, g2a, g2b, g3]
}

/// Residual of the Hitchin equations `(F + [phi, phi^dagger], D_zbar phi)` for `y`-independent data.
pub fn hitchin_at(j: &NodeJet) -> [CMatrix; 2] {
    let b = blocks(j);
    let azb = j.a_z.bar();
    let dzb_pz = &j.phi_z.dzb + comm(&azb.v, &j.phi_z.v);
    [b.f, dzb_pz]
}

/// Coefficients of the reduced system as combinations of the commutator system.
pub fn reduced_from_system(i: &[CMatrix; 4], tilt: &TiltParams) -> [CMatrix; 5] {
    let (s, co) = (tilt.sin(), tilt.cos());
    let (s2, c2) = ((2.0 * tilt.beta).sin(), (2.0 * tilt.beta).cos());
    let herm = (&i[0] + i[0].adjoint()).scale(0.5);
    let anti = (&i[0] - i[0].adjoint()).scale(0.5);
    let i13d = i[1].adjoint();
    [
        herm.scale(1.0 / s2),
        herm.scale(co * c2 / (2.0 * s2)) - i[3].scale(0.5 * co),
        &i[2] * (I * s * s) - &i13d * (I * co * co),
        (&i[2] + &i13d) * (I * s * co),
        -anti,
    ]
}

/// Inverse of [`reduced_from_system`].
pub fn system_from_reduced(e: &[CMatrix; 5], tilt: &TiltParams) -> [CMatrix; 4] {
    let (s, co) = (tilt.sin(), tilt.cos());
    let (s2, c2) = ((2.0 * tilt.beta).sin(), (2.0 * tilt.beta).cos());
    let i12 = e[0].scale(s2) - &e[4];
    let imm = e[0].scale(c2) - e[1].scale(2.0 / co);
    let i23 = &e[2] * (-I) + &e[3] * (-I / (s * co)) * c(co * co);
    let i13d = &e[2] * I + &e[3] * (-I / (s * co)) * c(s * s);
    [i12, i13d.adjoint(), i23, imm]
}

/// Random traceless jet; anti-Hermitian value and `y`-derivative when `anti`.
pub fn random_jet<R: rand::Rng>(r: &mut R, n: usize, anti: bool) -> Jet {
    let mut mk = || {
        remove_trace(&if anti { random_hermitian(r, n, 1.0) * I } else { random_matrix(r, n, 1.0) })
    };
    let v = mk();
    let dy = mk();
    if anti {
        let dz = remove_trace(&random_matrix(r, n, 1.0));
        let dzb = -dz.adjoint();
        Jet { v, dy, dz, dzb }
    } else {
        Jet { v, dy, dz: mk(), dzb: mk() }
    }
}

pub fn random_node<R: rand::Rng>(r: &mut R, n: usize) -> NodeJet {
    NodeJet {
        a_z: random_jet(r, n, false),
        phi_z: random_jet(r, n, false),
        a_y: random_jet(r, n, true),
        phi_1: random_jet(r, n, true),
        a_1: random_jet(r, n, true),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dir {
    Z,
    Zb,
    Y,
}

/// First-order operator `d_dir + m` with a matrix coefficient jet.
#[derive(Clone, Debug)]
pub struct FirstOrderOp {
    pub dir: Dir,
    pub m: Jet,
}

impl FirstOrderOp {
    /// Formal adjoint in a unitary frame: `d_z <-> d_zbar` and `m -> -m^dagger`.
    pub fn adjoint(&self) -> FirstOrderOp {
        let dir = match self.dir {
            Dir::Z => Dir::Zb,
            Dir::Zb => Dir::Z,
            Dir::Y => Dir::Y,
        };
        FirstOrderOp { dir, m: self.m.bar() }
    }
}

fn along(j: &Jet, d: Dir) -> &CMatrix {
    match d {
        Dir::Z => &j.dz,
        Dir::Zb => &j.dzb,
        Dir::Y => &j.dy,
    }
}

/// The zeroth-order operator `[P, Q]`.
pub fn op_commutator(p: &FirstOrderOp, q: &FirstOrderOp) -> CMatrix {
    along(&q.m, p.dir) - along(&p.m, q.dir) + comm(&p.m.v, &q.m.v)
}

/// The three operators `D1, D2, D3` built from unitary fields.
pub fn operators_at(j: &NodeJet, tilt: &TiltParams) -> [FirstOrderOp; 3] {
    let (s, co) = (tilt.sin(), tilt.cos());
    let d1 = j.a_z.bar().add(&j.phi_z.bar().scale(c(-s / co)));
    let d2 = j.a_z.add(&j.phi_z.scale(c(co / s)));
    let d3 = j.a_y.add(&j.phi_1.scale(-I / co));
    [
        FirstOrderOp { dir: Dir::Zb, m: d1 },
        FirstOrderOp { dir: Dir::Z, m: d2 },
        FirstOrderOp { dir: Dir::Y, m: d3 },
    ]
}

/// Moment map from operator commutators: `-(cos^2 [D1,D1^+] + sin^2 [D2,D2^+] + [D3,D3^+])`.
pub fn moment_map_ops(j: &NodeJet, tilt: &TiltParams) -> CMatrix {
    let ops = operators_at(j, tilt);
    let (s, co) = (tilt.sin(), tilt.cos());
    let k = [co * co, s * s, 1.0];
    -(0..3).fold(CMatrix::zeros(j.a_z.v.nrows(), j.a_z.v.nrows()), |acc, i| {
        acc + op_commutator(&ops[i], &ops[i].adjoint()).scale(k[i])
    })
}

/// Constant-mode holomorphic data: `D1 = d_zbar`, `D2 = d_z + alpha`, `D3 = d_y`.
#[derive(Clone, Debug)]
pub struct HoloData {
    pub n: usize,
    pub tilt: TiltParams,
    pub alpha: CMatrix,
}

impl HoloData {
    pub fn new(tilt: TiltParams, alpha: CMatrix) -> Result<Self> {
        let n = alpha.nrows();
        if n < 2 || alpha.ncols() != n {
            return Err(Error::InvalidRank(n));
        }
        Ok(HoloData { n, tilt, alpha })
    }
}

/// A frame `g` with `H = g^dagger g` at each node, with optional exact `y`-derivatives.
#[derive(Clone, Debug)]
pub struct FrameField {
    pub g: MatField,
    pub dy: Option<(MatField, MatField)>,
}

impl FrameField {
    /// Hermitian square-root frame of a metric field.
    pub fn from_metric(h: &MatField) -> Result<Self> {
        let mut data = Vec::with_capacity(h.data.len());
        for m in &h.data {
            data.push(sqrt_pos(m)?);
        }
        Ok(FrameField { g: MatField { data, ..h.clone() }, dy: None })
    }

    pub fn metric(&self) -> MatField {
        self.g.map(|g| g.adjoint() * g)
    }
}

/// Unitary-gauge fields on the mesh; `dy` holds exact `y`-derivatives when known.
#[derive(Clone, Debug)]
pub struct UnitaryFields {
    pub mesh: Arc<GradedMesh>,
    pub a_z: MatField,
    pub phi_z: MatField,
    pub a_y: MatField,
    pub phi_1: MatField,
    pub dy: Option<[MatField; 4]>,
}

impl UnitaryFields {
    pub fn n(&self) -> usize {
        self.a_z.n
    }

    /// Per-node jets, with `A_1 = a1_factor * phi_1`.
    pub fn jets(&self, a1_factor: f64) -> Vec<NodeJet> {
        let mesh = &*self.mesh;
        let fields = [&self.a_z, &self.phi_z, &self.a_y, &self.phi_1];
        let dys: Vec<MatField> = match &self.dy {
            Some(d) => d.to_vec(),
            None => fields.iter().map(|f| d_y(mesh, f)).collect(),
        };
        let dzs: Vec<(MatField, MatField)> = fields.iter().map(|f| d_z(mesh, f)).collect();
        (0..self.a_z.data.len())
            .map(|k| {
                let jet = |i: usize| Jet {
                    v: fields[i].data[k].clone(),
                    dy: dys[i].data[k].clone(),
                    dz: dzs[i].0.data[k].clone(),
                    dzb: dzs[i].1.data[k].clone(),
                };
                let phi_1 = jet(3);
                NodeJet { a_z: jet(0), phi_z: jet(1), a_y: jet(2), a_1: phi_1.scale(c(a1_factor)), phi_1 }
            })
            .collect()
    }

    pub fn conjugate(&self, g: &CMatrix) -> UnitaryFields {
        let gi = g.adjoint();
        let cj = |f: &MatField| f.map(|m| g * m * &gi);
        UnitaryFields {
            mesh: self.mesh.clone(),
            a_z: cj(&self.a_z),
            phi_z: cj(&self.phi_z),
            a_y: cj(&self.a_y),
            phi_1: cj(&self.phi_1),
            dy: self.dy.as_ref().map(|d| [cj(&d[0]), cj(&d[1]), cj(&d[2]), cj(&d[3])]),
        }
    }

    /// Max deviation from the unitary-gauge rules (`A_y`, `phi_1` anti-Hermitian).
    pub fn unitarity_defect(&self) -> f64 {
        let anti = |f: &MatField| f.data.iter().fold(0.0f64, |m, a| m.max(max_abs(&(a + a.adjoint()))));
        anti(&self.a_y).max(anti(&self.phi_1))
    }
}

fn residual_fields<const K: usize>(
    f: &UnitaryFields,
    a1_factor: f64,
    eval: impl Fn(&NodeJet) -> [CMatrix; K],
) -> Vec<MatField> {
    let jets = f.jets(a1_factor);
    let vals: Vec<[CMatrix; K]> = jets.iter().map(eval).collect();
    (0..K)
        .map(|r| MatField {
            ny: f.a_z.ny,
            nz: f.a_z.nz,
            n: f.n(),
            data: vals.iter().map(|v| v[r].clone()).collect(),
        })
        .collect()
}

pub fn commutator_residuals(fields: &UnitaryFields, tilt: &TiltParams) -> Vec<MatField> {
    residual_fields(fields, 0.0, |j| system_at(j, tilt))
}

pub fn reduced_residuals(fields: &UnitaryFields, tilt: &TiltParams) -> Vec<MatField> {
    residual_fields(fields, 0.0, |j| reduced_at(j, tilt))
}

/// Twisted reduction with the constraint `A_1 = tan(beta) phi_1` imposed.
pub fn gebe_residuals(fields: &UnitaryFields, tilt: &TiltParams) -> Vec<MatField> {
    residual_fields(fields, tilt.w, |j| gebe_at(j, tilt.c_minus, tilt.c_plus))
}

/// Unitary-gauge fields of `D2 = d + alpha` for Sigma-invariant frames with exact `y`-jets.
pub fn chern_fields_sigma(mesh: Arc<GradedMesh>, holo: &HoloData, frame: &FrameField) -> Result<UnitaryFields> {
    if mesh.torus_size != 1 {
        return Err(Error::Domain("Sigma-invariant frame on a torus grid".into()));
    }
    let (s, co) = (holo.tilt.sin(), holo.tilt.cos());
    let n = holo.n;
    let (g1, g2) = match &frame.dy {
        Some((a, b)) => (a.clone(), b.clone()),
        None => (d_y(&mesh, &frame.g), d_yy(&mesh, &frame.g)),
    };
    let mut out: Vec<[CMatrix; 8]> = Vec::with_capacity(mesh.ny());
    for k in 0..frame.g.data.len() {
        let g = &frame.g.data[k];
        let gi = g.clone().try_inverse().ok_or_else(|| Error::Decomposition("singular frame".into()))?;
        let m2 = g * &holo.alpha * &gi;
        let k1 = &g1.data[k] * &gi;
        let m3 = -&k1;
        let dm3 = -(&g2.data[k] * &gi) + &k1 * &k1;
        let dm2 = comm(&m2, &m3);
        let herm = |x: &CMatrix| (x + x.adjoint()).scale(0.5);
        let anti = |x: &CMatrix| (x - x.adjoint()).scale(0.5);
        out.push([
            m2.scale(s * s),
            m2.scale(s * co),
            anti(&m3),
            herm(&m3) * (I * co),
            dm2.scale(s * s),
            dm2.scale(s * co),
            anti(&dm3),
            herm(&dm3) * (I * co),
        ]);
    }
    let col = |i: usize| MatField {
        ny: mesh.ny(),
        nz: 1,
        n,
        data: out.iter().map(|r| r[i].clone()).collect(),
    };
    Ok(UnitaryFields {
        a_z: col(0),
        phi_z: col(1),
        a_y: col(2),
        phi_1: col(3),
        dy: Some([col(4), col(5), col(6), col(7)]),
        mesh,
    })
}

/// Unitary-gauge fields from a frame `g` with `H = g^dagger g`, all derivatives by stencils.
pub fn chern_fields_grid(mesh: Arc<GradedMesh>, holo: &HoloData, g: &MatField) -> Result<UnitaryFields> {
    let (s, co) = (holo.tilt.sin(), holo.tilt.cos());
    let ginv = {
        let mut data = Vec::with_capacity(g.data.len());
        for m in &g.data {
            data.push(m.clone().try_inverse().ok_or_else(|| Error::Decomposition("singular frame".into()))?);
        }
        MatField { data, ..g.clone() }
    };
    let gd = g.map(|m| m.adjoint());
    let (dz_g, _) = d_z(&mesh, g);
    let (dz_gd, _) = d_z(&mesh, &gd);
    let dy_g = d_y(&mesh, g);
    let mut a_z = Vec::new();
    let mut phi_z = Vec::new();
    let mut a_y = Vec::new();
    let mut phi_1 = Vec::new();
    for k in 0..g.data.len() {
        let gi = &ginv.data[k];
        let gdi = gi.adjoint();
        let m2 = &g.data[k] * &holo.alpha * gi - &dz_g.data[k] * gi;
        let hol = &gdi * &dz_gd.data[k];
        a_z.push(m2.scale(s * s) + hol.scale(co * co));
        phi_z.push((&m2 - &hol).scale(s * co));
        let m3 = -(&dy_g.data[k] * gi);
        a_y.push((&m3 - m3.adjoint()).scale(0.5));
        phi_1.push((&m3 + m3.adjoint()) * (I * 0.5 * co));
    }
    let wrap = |data| MatField { data, ..g.clone() };
    Ok(UnitaryFields { mesh, a_z: wrap(a_z), phi_z: wrap(phi_z), a_y: wrap(a_y), phi_1: wrap(phi_1), dy: None })
}

/// Chern fields of `H = H0 exp(s)`, with `s` Hermitian in the `H0` unitary frame.
pub fn chern_fields(
    mesh: Arc<GradedMesh>,
    holo: &HoloData,
    background: &FrameField,
    s: &MatField,
) -> Result<UnitaryFields> {
    let half = s.map(|x| exp_herm(&x.scale(0.5)));
    let g = half.zip(&background.g, |e, g0| e * g0);
    if mesh.torus_size > 1 {
        return chern_fields_grid(mesh, holo, &g);
    }
    let frame = match &background.dy {
        Some((g1, g2)) => {
            let e1 = d_y(&mesh, &half);
            let e2 = d_yy(&mesh, &half);
            let mut d1 = Vec::new();
            let mut d2 = Vec::new();
            for k in 0..g.data.len() {
                let (e, g0) = (&half.data[k], &background.g.data[k]);
                d1.push(&e1.data[k] * g0 + e * &g1.data[k]);
                d2.push(&e2.data[k] * g0 + (&e1.data[k] * &g1.data[k]).scale(2.0) + e * &g2.data[k]);
            }
            FrameField { g: g.clone(), dy: Some((MatField { data: d1, ..g.clone() }, MatField { data: d2, ..g.clone() })) }
        }
        None => FrameField { g, dy: None },
    };
    chern_fields_sigma(mesh, holo, &frame)
}

/// Moment map of `H = H0 exp(s)` through the unitary fields.
pub fn moment_map(mesh: Arc<GradedMesh>, holo: &HoloData, background: &FrameField, s: &MatField) -> Result<MatField> {
    let f = chern_fields(mesh, holo, background, s)?;
    Ok(commutator_residuals(&f, &holo.tilt).swap_remove(3))
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct WeightedNorm {
    pub value: f64,
    pub divergent: bool,
}

pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Discrete proxy of the weighted norm `y^-mu e^(delta y) (|u| + sum |(y d_y)^i (y d_z)^b u|)`.
pub fn weighted_norm(mesh: &GradedMesh, u: &MatField, mu: f64, delta: f64, k: usize) -> Result<WeightedNorm> {
    if k > 2 {
        return Err(Error::Domain("weighted norm order k must be 0, 1 or 2".into()));
    }
    let ydy = |f: &MatField| {
        let d = d_y(mesh, f);
        MatField::from_fn(mesh, f.n, |iy, iz| d.at(iy, iz).scale(mesh.y[iy]))
    };
    let ydz = |f: &MatField| {
        let (dx, dw) = d_torus(mesh, f);
        let m = dx.zip(&dw, |a, b| a + b * I);
        MatField::from_fn(mesh, f.n, |iy, iz| m.at(iy, iz).scale(0.5 * mesh.y[iy]))
    };
    let mut terms = vec![u.clone()];
    if k >= 1 {
        terms.push(ydy(u));
        terms.push(ydz(u));
    }
    if k >= 2 {
        let (a, b) = (terms[1].clone(), terms[2].clone());
        terms.push(ydy(&a));
        terms.push(ydz(&a));
        terms.push(ydz(&b));
    }
    let mut value = 0.0f64;
    for iy in 0..mesh.ny() {
        let wt = mesh.y[iy].powf(-mu) * (delta * mesh.y[iy]).exp();
        for iz in 0..mesh.nz() {
            let sum: f64 = terms.iter().map(|t| max_abs(t.at(iy, iz))).sum();
            value = value.max(wt * sum);
        }
    }
    Ok(WeightedNorm { value, divergent: !(value <= DIVERGENCE_THRESHOLD) })
}

/// Discrete weighted inner product `sum_i w_i Re tr(a b^dagger)` over nodes.
pub fn inner(mesh: &GradedMesh, a: &MatField, b: &MatField) -> f64 {
    let mut acc = 0.0;
    for iy in 0..mesh.ny() {
        let w = mesh.weight(iy) * mesh.area_weight();
        for iz in 0..mesh.nz() {
            acc += w * re_tr_prod(a.at(iy, iz), &b.at(iy, iz).adjoint());
        }
    }
    acc
}

/// CSV dump: `y_index,z_index,matrix_entry_row,matrix_entry_col,re,im`.
pub fn write_field_csv<W: Write>(out: &mut W, f: &MatField) -> std::io::Result<()> {
    writeln!(out, "y_index,z_index,matrix_entry_row,matrix_entry_col,re,im")?;
    for iy in 0..f.ny {
        for iz in 0..f.nz {
            let m = f.at(iy, iz);
            for r in 0..f.n {
                for col in 0..f.n {
                    writeln!(out, "{iy},{iz},{r},{col},{:e},{:e}", m[(r, col)].re, m[(r, col)].im)?;
                }
            }
        }
    }
    Ok(())
}

/// Model metric frame `g = (y sin b)^(-e0/2)` with exact derivatives.
pub fn model_frame(mesh: &GradedMesh, triple: &PrincipalTriple, tilt: &TiltParams) -> FrameField {
    let n = triple.n;
    let w = triple.weights();
    let s = tilt.sin();
    let diag = |f: &dyn Fn(f64) -> f64| CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, w.iter().map(|&p| c(f(p)))));
    let g = MatField::from_fn(mesh, n, |iy, _| diag(&|p| (mesh.y[iy] * s).powf(-0.5 * p)));
    let g1 = MatField::from_fn(mesh, n, |iy, _| {
        let y = mesh.y[iy];
        diag(&|p| -0.5 * p / y * (y * s).powf(-0.5 * p))
    });
    let g2 = MatField::from_fn(mesh, n, |iy, _| {
        let y = mesh.y[iy];
        diag(&|p| 0.5 * p * (0.5 * p + 1.0) / (y * y) * (y * s).powf(-0.5 * p))
    });
    FrameField { g, dy: Some((g1, g2)) }
}

/// Hermitian matrix function applied node by node.
pub fn map_herm(f: &MatField, func: impl Fn(f64) -> f64 + Copy) -> MatField {
    f.map(|m| herm_fn(m, func))
}

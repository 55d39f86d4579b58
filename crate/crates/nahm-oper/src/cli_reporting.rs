//! Run configuration, the subcommand suites, and report persistence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geometry_fields::{
    chern_fields, commutator_residuals, gebe_residuals, make_mesh, model_frame, random_node, reduced_at,
    reduced_from_system, reduced_residuals, system_at, system_from_reduced, write_field_csv, GradedMesh, HoloData,
    MatField,
};
use crate::hitchin_flat::{
    hitchin_residual, hitchin_section_higgs, solve_hitchin_constant, solve_twisted_hitchin, twist, twisted_residual,
    untwist, FlatPair,
};
use crate::lie_core::{
    c, casimir_spectrum, comm, exp_herm, fro, gamma_apply, indicial_roots, max_abs, principal_triple, random_hermitian,
    random_matrix, random_unitary, remove_trace, tilt_params, v_apply, CMatrix, C64, I,
};
use crate::nahm_model_approx::OperPoint;
use crate::tbe_solver::{
    apply_l, apply_l_weitzenbock, c0_diagnostic, continuity_solve, donaldson_derivatives, donaldson_m,
    donaldson_quadratic_form, filtration_extract, keyeq_defect, kobayashi_hitchin, solve_on, Background,
    ContinuitySchedule, NormWeights, Reference, Solution, SolveOptions,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_ENV: &str = "NAHM_OPER_OUT";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    pub y_min: f64,
    pub y_max: f64,
    pub count: usize,
    pub grading: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig { y_min: 1e-3, y_max: 12.0, count: 200, grading: 1.08 }
    }
}

impl MeshConfig {
    /// Coarse mesh used by the refinement-order checks.
    pub fn identity_default() -> Self {
        MeshConfig { y_min: 1e-2, y_max: 6.0, count: 60, grading: 1.2 }
    }

    pub fn build(&self) -> Result<Arc<GradedMesh>> {
        Ok(Arc::new(make_mesh(self.y_min, self.y_max, self.count, self.grading, 1, 1.0)?))
    }

    fn validate(&self, path: &str) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::Config { path: format!("{path}.{field}"), msg });
        if !(self.y_min > 0.0 && self.y_min < 1.0) {
            return err("y_min", format!("need 0 < y_min < 1, got {}", self.y_min));
        }
        if !(self.y_max > 1.0 && self.y_max.is_finite()) {
            return err("y_max", format!("need y_max > 1, got {}", self.y_max));
        }
        if !(self.grading > 1.0) {
            return err("grading", format!("need grading > 1, got {}", self.grading));
        }
        if self.count < 16 {
            return err("count", format!("need count >= 16, got {}", self.count));
        }
        make_mesh(self.y_min, self.y_max, self.count, self.grading, 1, 1.0)
            .map(|_| ())
            .map_err(|e| Error::Config { path: format!("{path}.count"), msg: e.to_string() })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Number of halvings of `t` after `t = 1`, before the final `t = 0` stage.
    pub halvings: usize,
    pub stage_tol: f64,
    pub final_tol: f64,
    pub max_iter: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let d = ContinuitySchedule::default();
        ScheduleConfig { halvings: 10, stage_tol: d.stage_tol, final_tol: d.final_tol, max_iter: d.max_iter }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> ContinuitySchedule {
        let mut s = ContinuitySchedule::geometric(self.halvings as u32, self.final_tol);
        s.stage_tol = self.stage_tol;
        s.max_iter = self.max_iter;
        s
    }

    fn validate(&self, path: &str) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::Config { path: format!("{path}.{field}"), msg });
        if self.halvings > 60 {
            return err("halvings", format!("at most 60 halvings, got {}", self.halvings));
        }
        if !(self.stage_tol > 0.0) {
            return err("stage_tol", "must be positive".into());
        }
        if !(self.final_tol > 0.0) {
            return err("final_tol", "must be positive".into());
        }
        if self.max_iter == 0 {
            return err("max_iter", "must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NormConfig {
    pub mu: f64,
    pub delta: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        let d = NormWeights::default();
        NormConfig { mu: d.mu, delta: d.delta }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n: usize,
    pub beta: f64,
    /// Real oper coefficients `(q_2, ..., q_n)`.
    pub q: Vec<f64>,
    pub mesh: MeshConfig,
    /// Coarse mesh of the refinement-order checks.
    pub identity_mesh: MeshConfig,
    pub schedule: ScheduleConfig,
    pub norms: NormConfig,
    /// Background series order; `None` means `n`.
    pub order: Option<usize>,
    /// Additional random starts in `solve-tbe` for the uniqueness check.
    pub extra_starts: usize,
    /// Random directions in `donaldson`.
    pub probes: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: 2,
            beta: 0.2,
            q: vec![0.5],
            mesh: MeshConfig::default(),
            identity_mesh: MeshConfig::identity_default(),
            schedule: ScheduleConfig::default(),
            norms: NormConfig::default(),
            order: None,
            extra_starts: 1,
            probes: 50,
            out_dir: PathBuf::from("nahm-oper-out"),
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config { path: json_error_path(&e), msg: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config { path: path.display().to_string(), msg: e.to_string() })?;
        Self::from_json(&text)
    }

    /// Pads or truncates `q` to `n - 1` entries, filling with zeros.
    pub fn with_rank(mut self, n: usize) -> Self {
        self.n = n;
        self.q.resize(n.saturating_sub(1), 0.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, msg: String| Err(Error::Config { path: path.into(), msg });
        if !(2..=8).contains(&self.n) {
            return err("n", format!("need 2 <= n <= 8, got {}", self.n));
        }
        if let Err(e) = tilt_params(self.beta) {
            return err("beta", e.to_string());
        }
        if self.beta <= 0.0 {
            return err("beta", format!("need beta > 0, got {}", self.beta));
        }
        if self.q.len() != self.n - 1 {
            return err("q", format!("need {} coefficients (q_2..q_n), got {}", self.n - 1, self.q.len()));
        }
        if let Some(k) = self.q.iter().position(|x| !x.is_finite()) {
            return err(&format!("q[{k}]"), "must be finite".into());
        }
        self.mesh.validate("mesh")?;
        self.identity_mesh.validate("identity_mesh")?;
        self.schedule.validate("schedule")?;
        if !(-1.0 < self.norms.mu && self.norms.mu < 2.0) {
            return err("norms.mu", format!("need -1 < mu < 2, got {}", self.norms.mu));
        }
        if !(self.norms.delta > 0.0) {
            return err("norms.delta", format!("need delta > 0, got {}", self.norms.delta));
        }
        if self.order == Some(0) {
            return err("order", "must be at least 1".into());
        }
        if self.probes == 0 {
            return err("probes", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn oper(&self) -> Result<OperPoint> {
        OperPoint::new(self.n, tilt_params(self.beta)?, self.q.iter().map(|&x| c(x)).collect())
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            schedule: self.schedule.build(),
            order: self.order,
            norms: NormWeights { mu: self.norms.mu, delta: self.norms.delta },
            initial: None,
        }
    }

    /// Output directory: the environment override wins over the config value.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }
}

fn json_error_path(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    // serde reports unknown or invalid keys as "... field `name` ...".
    match (msg.find('`'), msg[msg.find('`').map_or(0, |i| i + 1)..].find('`')) {
        (Some(a), Some(len)) => msg[a + 1..a + 1 + len].to_string(),
        _ => format!("line {}, column {}", e.line(), e.column()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    VerifyModel,
    IndicialRoots,
    SolveHitchin,
    SolveTbe,
    KhMap,
    CheckIdentities,
    Donaldson,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::VerifyModel,
        Command::IndicialRoots,
        Command::SolveHitchin,
        Command::SolveTbe,
        Command::KhMap,
        Command::CheckIdentities,
        Command::Donaldson,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::VerifyModel => "verify-model",
            Command::IndicialRoots => "indicial-roots",
            Command::SolveHitchin => "solve-hitchin",
            Command::SolveTbe => "solve-tbe",
            Command::KhMap => "kh-map",
            Command::CheckIdentities => "check-identities",
            Command::Donaldson => "donaldson",
        }
    }

    pub fn parse(name: &str) -> Option<Command> {
        Command::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// One verified invariant. `pass` means `value <= tolerance` unless `lower_bound` is set.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub invariant: String,
    pub value: f64,
    pub tolerance: f64,
    pub lower_bound: bool,
    pub pass: bool,
}

impl Check {
    pub fn at_most(invariant: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Check { invariant: invariant.into(), value, tolerance, lower_bound: false, pass: value <= tolerance }
    }

    pub fn at_least(invariant: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { invariant: invariant.into(), value, tolerance: bound, lower_bound: true, pass: value >= bound }
    }

    pub fn line(&self) -> String {
        let rel = if self.lower_bound { ">=" } else { "<=" };
        let status = if self.pass { "PASS" } else { "FAIL" };
        format!("{status} {}: {:.6e} (need {rel} {:.3e})", self.invariant, self.value, self.tolerance)
    }
}

/// A CSV table: header plus rows of numbers.
#[derive(Clone, Debug)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Table { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{}", self.header.join(","))?;
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|x| format!("{x:e}")).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

pub struct Outcome {
    pub command: Command,
    pub checks: Vec<Check>,
    pub results: Value,
    pub tables: Vec<Table>,
    pub fields: Vec<(String, MatField)>,
    /// Human-readable lines printed before the PASS/FAIL summary.
    pub text: Vec<String>,
    pub wall_seconds: f64,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn report_json(&self, cfg: &RunConfig) -> Value {
        json!({
            "schema_version": SCHEMA_VERSION,
            "command": self.command.name(),
            "status": if self.passed() { "PASS" } else { "FAIL" },
            "parameters": cfg,
            "results": self.results,
            "checks": self.checks,
            "wall_seconds": self.wall_seconds,
        })
    }

    pub fn summary_json(&self) -> Value {
        let checks: Vec<Value> = self
            .checks
            .iter()
            .map(|c| json!({ "invariant": c.invariant, "status": if c.pass { "PASS" } else { "FAIL" } }))
            .collect();
        json!({
            "schema_version": SCHEMA_VERSION,
            "command": self.command.name(),
            "status": if self.passed() { "PASS" } else { "FAIL" },
            "checks": checks,
        })
    }

    /// Writes `report.json`, `summary.json`, tables and fields into `dir/<command>/`.
    pub fn write(&self, cfg: &RunConfig, dir: &Path) -> std::io::Result<PathBuf> {
        let target = dir.join(self.command.name());
        fs::create_dir_all(&target)?;
        let pretty = |v: &Value| serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(std::io::Error::other);
        fs::write(target.join("report.json"), pretty(&self.report_json(cfg))?)?;
        fs::write(target.join("summary.json"), pretty(&self.summary_json())?)?;
        for t in &self.tables {
            let mut f = std::io::BufWriter::new(fs::File::create(target.join(format!("{}.csv", t.name)))?);
            t.write_csv(&mut f)?;
        }
        for (name, field) in &self.fields {
            let mut f = std::io::BufWriter::new(fs::File::create(target.join(format!("{name}.csv")))?);
            write_field_csv(&mut f, field)?;
        }
        Ok(target)
    }
}

/// Process exit status: 0 all pass, 1 a check failed, 2 numerical failure, 3 configuration error.
pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(o) if o.passed() => 0,
        Ok(_) => 1,
        Err(Error::Config { .. }) => 3,
        Err(_) => 2,
    }
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut out = Outcome {
        command: cmd,
        checks: Vec::new(),
        results: Value::Null,
        tables: Vec::new(),
        fields: Vec::new(),
        text: Vec::new(),
        wall_seconds: 0.0,
    };
    match cmd {
        Command::VerifyModel => verify_model(cfg, &mut out)?,
        Command::IndicialRoots => indicial(cfg, &mut out)?,
        Command::SolveHitchin => solve_hitchin(cfg, &mut out)?,
        Command::SolveTbe => solve_tbe(cfg, &mut out)?,
        Command::KhMap => kh_map(cfg, &mut out)?,
        Command::CheckIdentities => check_identities(cfg, &mut out)?,
        Command::Donaldson => donaldson(cfg, &mut out)?,
    }
    strip_key(&mut out.results, "wall_seconds");
    out.wall_seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Removes a key at every depth, so the only time-dependent value is the top-level one.
fn strip_key(v: &mut Value, key: &str) {
    match v {
        Value::Object(m) => {
            m.remove(key);
            m.values_mut().for_each(|x| strip_key(x, key));
        }
        Value::Array(a) => a.iter_mut().for_each(|x| strip_key(x, key)),
        _ => {}
    }
}

fn matrix_json(m: &CMatrix) -> Value {
    let rows: Vec<Vec<[f64; 2]>> =
        (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect()).collect();
    json!(rows)
}

fn complex_json(z: &[C64]) -> Value {
    json!(z.iter().map(|x| [x.re, x.im]).collect::<Vec<_>>())
}

/// Smooth random traceless Hermitian field vanishing at both ends.
pub fn random_deformation(mesh: &GradedMesh, n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<CMatrix> {
    let a = random_hermitian(rng, n, 1.0);
    let b = random_hermitian(rng, n, 1.0);
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

fn verify_model(cfg: &RunConfig, out: &mut Outcome) -> Result<()> {
    let tilt = tilt_params(cfg.beta)?;
    let t = principal_triple(cfg.n)?;
    let mesh = cfg.mesh.build()?;
    let holo = HoloData::new(tilt.clone(), t.e_plus.clone())?;
    let frame = model_frame(&mesh, &t, &tilt);
    let fields = chern_fields(mesh.clone(), &holo, &frame, &MatField::zeros(&mesh, cfg.n))?;
    // Residuals scaled by y^2, the natural size of the fields' products near the pole.
    let ys = &mesh.y;
    let worst = |v: Vec<MatField>| {
        v.iter()
            .flat_map(|f| ys.iter().enumerate().map(move |(iy, y)| y * y * max_abs(f.at(iy, 0))))
            .fold(0.0, f64::max)
    };
    let suites = [
        ("model: commutator system and moment map vanish", worst(commutator_residuals(&fields, &tilt))),
        ("model: reduced system vanishes", worst(reduced_residuals(&fields, &tilt))),
        ("model: twisted reduction with A1 = tan(beta) phi1 vanishes", worst(gebe_residuals(&fields, &tilt))),
    ];
    let mut pole = 0.0f64;
    for iy in 0..mesh.ny() {
        let y = mesh.y[iy];
        let az = fields.a_z.at(iy, 0) - t.e_plus.scale(tilt.sin() / y);
        let p1 = fields.phi_1.at(iy, 0) - (t.e_zero.scale(0.5 * tilt.cos() / y) * I);
        pole = pole.max(y * max_abs(&az)).max(y * max_abs(&p1));
    }
    for (name, v) in suites {
        out.checks.push(Check::at_most(name, v, 1e-10));
    }
    out.checks.push(Check::at_most("model: Nahm-pole coefficients are exact", pole, 1e-12));
    out.results = json!({
        "n": cfg.n,
        "beta": cfg.beta,
        "max_residual": suites.iter().map(|s| s.1).fold(0.0, f64::max),
        "residuals": suites.iter().map(|(k, v)| json!({"suite": k, "max_y2_residual": v})).collect::<Vec<_>>(),
    });
    out.fields.push(("a_z".into(), fields.a_z.clone()));
    out.fields.push(("phi_z".into(), fields.phi_z.clone()));
    out.fields.push(("phi_1".into(), fields.phi_1.clone()));
    Ok(())
}

fn indicial(cfg: &RunConfig, out: &mut Outcome) -> Result<()> {
    let n = cfg.n;
    let roots = indicial_roots(n)?;
    let spectrum = casimir_spectrum(n)?;
    let mut table = Table::new("indicial_roots", &["spin", "casimir", "root_low", "root_high"]);
    let mut err_roots = 0.0f64;
    let mut err_cas = 0.0f64;
    let mut sorted = spectrum.clone();
    sorted.sort_by(f64::total_cmp);
    let mut expected_cas: Vec<f64> = Vec::new();
    for k in 1..n {
        let kk = (k * (k + 1)) as f64;
        for _ in 0..(2 * k + 1) {
            expected_cas.push(kk);
        }
        let (lo, hi) = (-(k as f64), (k + 1) as f64);
        for r in [lo, hi] {
            err_roots = err_roots.max((kk - r * (r - 1.0)).abs());
        }
        table.rows.push(vec![k as f64, kk, lo, hi]);
    }
    expected_cas.sort_by(f64::total_cmp);
    if expected_cas.len() != sorted.len() {
        err_cas = f64::INFINITY;
    } else {
        for (a, b) in expected_cas.iter().zip(&sorted) {
            err_cas = err_cas.max((a - b).abs());
        }
    }
    let mut want: Vec<f64> = (1..n).map(|k| -(k as f64)).chain((2..=n).map(|k| k as f64)).collect();
    want.sort_by(f64::total_cmp);
    let mut got = roots.clone();
    got.sort_by(f64::total_cmp);
    let set_err = if got.len() == want.len() {
        got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    out.checks.push(Check::at_most("algebra: Casimir spectrum is {k(k+1)} with multiplicity 2k+1", err_cas, 1e-9));
    out.checks.push(Check::at_most("algebra: indicial roots are -(n-1)..-1, 2..n", set_err, 1e-9));
    out.checks.push(Check::at_most("algebra: roots solve k(k+1) = r(r-1)", err_roots, 1e-9));
    let shown = got.iter().map(|r| if (r - r.round()).abs() < 1e-9 { format!("{}", r.round() as i64) } else { format!("{r}") });
    out.text.push(shown.collect::<Vec<_>>().join(" "));
    out.results = json!({ "n": n, "roots": got, "casimir_spectrum": sorted });
    out.tables.push(table);
    Ok(())
}

fn solve_hitchin(cfg: &RunConfig, out: &mut Outcome) -> Result<()> {
    let n = cfg.n;
    let q: Vec<C64> = cfg.q.iter().map(|&x| c(x)).collect();
    if q.iter().all(|z| z.norm() == 0.0) {
        return Err(Error::Config { path: "q".into(), msg: "constant-mode data with q = 0 is reducible".into() });
    }
    let data = hitchin_section_higgs(n, &q)?;
    let sol = solve_hitchin_constant(&data)?;
    let res = max_abs(&hitchin_residual(&data, &sol.h)?);
    out.checks.push(Check::at_most("constant mode: Hitchin residual", res, 1e-10));
    out.checks.push(Check::at_most("constant mode: det H = 1", (sol.h.determinant().re - 1.0).abs(), 1e-10));
    let mut closed = Value::Null;
    if n == 2 {
        let a = cfg.q[0].abs().sqrt();
        let want = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(a), c(1.0 / a)]));
        let d = max_abs(&(&sol.h - want));
        out.checks.push(Check::at_most("constant mode: n = 2 metric is diag(sqrt q, 1/sqrt q)", d, 1e-10));
        closed = json!(d);
    }
    // Twist at w = tan(beta) and back.
    let tilt = tilt_params(cfg.beta)?;
    let w = c(tilt.w);
    let pair = twist(&data, &sol.h, w)?;
    let back = untwist(&pair, &sol.h)?;
    let round = max_abs(&(&back.alpha0 - &data.alpha0)).max(max_abs(&(&back.phi - &data.phi)));
    out.checks.push(Check::at_most("twist: untwist(twist(D, phi)) round trip", round, 1e-12));
    out.checks.push(Check::at_most("twist: pair is flat", pair.flatness_defect(), 1e-10));
    out.checks.push(Check::at_most("twist: Hitchin metric solves the twisted equation", max_abs(&twisted_residual(&pair, &sol.h)?), 1e-10));
    // Uniqueness from two random positive starts.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h1 = solve_twisted_hitchin(&pair, Some(&exp_herm(&remove_trace(&random_hermitian(&mut rng, n, 0.7)))))?;
    let h2 = solve_twisted_hitchin(&pair, Some(&exp_herm(&remove_trace(&random_hermitian(&mut rng, n, 0.7)))))?;
    out.checks.push(Check::at_most("twisted equation: two random starts agree", max_abs(&(&h1.h - &h2.h)), 1e-8));
    // At w = -i the untwisted data splits into a commuting harmonic pair.
    let minus_i = FlatPair { p1: data.alpha0.clone(), p2: data.phi.clone(), w: -I };
    let hm = solve_twisted_hitchin(&minus_i, None)?;
    let split = untwist(&minus_i, &hm.h)?;
    let harmonic = max_abs(&comm(&split.alpha0, &split.phi)).max(max_abs(&hitchin_residual(&split, &hm.h)?));
    out.checks.push(Check::at_most("twisted equation at w = -i gives a harmonic split", harmonic, 1e-8));
    out.results = json!({
        "n": n,
        "q": cfg.q,
        "metric": matrix_json(&sol.h),
        "iterations": sol.iterations,
        "hitchin_residual": res,
        "closed_form_deviation": closed,
        "twisted_metric_w_minus_i": matrix_json(&hm.h),
    });
    Ok(())
}

fn solve_with_checks(cfg: &RunConfig, out: &mut Outcome) -> Result<Solution> {
    let op = cfg.oper()?;
    let mesh = cfg.mesh.build()?;
    let opts = cfg.solve_options();
    let sol = continuity_solve(&op, mesh.clone(), &opts)?;
    let rep = &sol.report;
    out.checks.push(Check::at_most("solve: discrete moment map sup norm", rep.omega_sup, cfg.schedule.final_tol));
    let c0 = c0_diagnostic(&sol.reference.bg, &sol.sigma)?;
    out.checks.push(Check::at_least("solve: C0 estimate margin (bound - sup|s|)", c0.margin, 0.0));
    if op.is_zero() {
        out.checks.push(Check::at_most("solve: q = 0 recovers the model metric", rep.s_sup, 1e-6));
    }
    if let Some(p) = &rep.pole_fit {
        let worst = p.a_z.max(p.phi_z).max(p.phi_1);
        out.checks.push(Check::at_most("boundary: Nahm-pole coefficients (relative)", worst, 0.01));
    }
    match &rep.flat_limit {
        Some(f) if !op.is_zero() => {
            out.checks.push(Check::at_least("boundary: exponential approach to the flat limit (R^2)", f.r_squared, 0.99));
            out.checks.push(Check::at_most("boundary: y_max slice solves the twisted equation", f.twisted_residual, 1e-10));
        }
        None if !op.is_zero() => {
            out.checks.push(Check::at_least("boundary: exponential approach to the flat limit (R^2)", 0.0, 0.99));
        }
        _ => {}
    }
    let fields = sol.fields()?;
    let filtration = filtration_extract(&sol.frame(), &fields, &sol.reference.bg.holo);
    let filtration_json = match &filtration {
        Ok(f) => {
            let n = cfg.n;
            let worst = f
                .rates
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let want = -((n - 1) as f64) / 2.0 + i as f64;
                    (r - want).abs() / want.abs().max(0.5)
                })
                .fold(0.0, f64::max);
            out.checks.push(Check::at_most("boundary: filtration vanishing rates (relative)", worst, 0.02));
            serde_json::to_value(f).map_err(|e| Error::Domain(e.to_string()))?
        }
        Err(e) => {
            out.checks.push(Check::at_most("boundary: filtration extraction succeeds", 1.0, 0.0));
            json!({ "error": e.to_string() })
        }
    };
    // Uniqueness: further random starts reach the same solution.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut spread = 0.0f64;
    for _ in 0..cfg.extra_starts {
        let bg = sol.reference.bg.clone();
        let init = random_deformation(&mesh, cfg.n, 0.5, &mut rng);
        let o = SolveOptions { initial: Some(init), ..opts.clone() };
        let other = solve_on(Reference::new(bg, None)?, &o)?;
        let d = sol.sigma.iter().zip(&other.sigma).map(|(a, b)| fro(&(a - b))).fold(0.0, f64::max);
        spread = spread.max(d);
    }
    if cfg.extra_starts > 0 {
        out.checks.push(Check::at_most("solve: distinct starts agree (uniqueness)", spread, 1e-6));
    }
    out.results = json!({
        "oper": { "n": cfg.n, "beta": cfg.beta, "q": cfg.q },
        "report": rep,
        "c0": c0,
        "filtration": filtration_json,
        "uniqueness_spread": spread,
    });
    let mut hist = Table::new("history", &["t", "iteration", "energy", "residual_sup", "step", "cg_iterations"]);
    for h in &rep.history {
        hist.rows.push(vec![h.t, h.iteration as f64, h.energy, h.residual_sup, h.step, h.cg_iterations as f64]);
    }
    out.tables.push(hist);
    out.fields.push(("sigma".into(), sol.sigma_field()));
    out.fields.push(("a_z".into(), fields.a_z.clone()));
    out.fields.push(("phi_z".into(), fields.phi_z.clone()));
    out.fields.push(("phi_1".into(), fields.phi_1.clone()));
    Ok(sol)
}

fn solve_tbe(cfg: &RunConfig, out: &mut Outcome) -> Result<()> {
    solve_with_checks(cfg, out).map(|_| ())
}

fn kh_map(cfg: &RunConfig, out: &mut Outcome) -> Result<()> {
    let sol = solve_with_checks(cfg, out)?;
    let fields = sol.fields()?;
    let holo = &sol.reference.bg.holo;
    let back = kobayashi_hitchin(&fields, holo)?;
    let want: Vec<C64> = cfg.q.iter().map(|&x| c(x)).collect();
    let scale = want.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let err = back.q.iter().zip(&want).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    let (value, name) = if scale > 0.0 {
        (err / scale, "Kobayashi-Hitchin round trip recovers q (relative)")
    } else {
        (err, "Kobayashi-Hitchin round trip recovers q = 0")
    };
    out.checks.push(Check::at_most(name, value, 1e-4));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let u = random_unitary(&mut rng, cfg.n);
    let rotated = kobayashi_hitchin(&fields.conjugate(&u), holo)?;
    let gauge = rotated.q.iter().zip(&back.q).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    out.checks.push(Check::at_most("Kobayashi-Hitchin map is invariant under constant unitary gauge", gauge, 1e-10 * (1.0 + scale)));
    if let Some(r) = out.results.as_object_mut() {
        r.insert("recovered_q".into(), complex_json(&back.q));
        r.insert("round_trip_error".into(), json!(err));
    }
    out.text.push(format!(
        "recovered q = {}",
        back.q.iter().map(|z| format!("{:.8}{:+.2e}i", z.re, z.im)).collect::<Vec<_>>().join(", ")
    ));
    Ok(())
}

/// Refinement order from sups on the coarse-mesh nodes over three levels.
fn refinement_orders(mesh: &Arc<GradedMesh>, mut probe: impl FnMut(&Arc<GradedMesh>, usize) -> Result<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut m = mesh.clone();
    let mut sups = Vec::new();
    for level in 0..3 {
        sups.push(probe(&m, 1 << level)?);
        m = Arc::new(m.refine());
    }
    let orders = sups.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    Ok((sups, orders))
}

fn check_identities(cfg: &RunConfig, out: &mut Outcome) -> Result<()> {
    let op = cfg.oper()?;
    let n = cfg.n;
    let order = cfg.order.unwrap_or(n);
    let base = cfg.identity_mesh.build()?;
    let seed = cfg.seed;
    // Fields depend only on y, so every level samples the same functions.
    let field = |m: &GradedMesh, scale: f64, s: u64| random_deformation(m, n, scale, &mut ChaCha8Rng::seed_from_u64(s));

    let (key_sups, key_orders) = refinement_orders(&base, |m, stride| {
        let bg = Background::for_oper(&op, order, m.clone())?;
        let d = keyeq_defect(&bg, &field(m, 0.6, seed))?;
        Ok(d.iter().step_by(stride).fold(0.0, |a: f64, &x| a.max(x)))
    })?;
    let key_min = key_orders.iter().cloned().fold(f64::INFINITY, f64::min);
    out.checks.push(Check::at_least("identity: key identity defect refinement order", key_min, 1.8));

    let (w_sups, w_orders) = refinement_orders(&base, |m, stride| {
        let bg = Background::for_oper(&op, order, m.clone())?;
        let s_bg = field(m, 0.3, seed + 1);
        let v = field(m, 1.0, seed + 2);
        let a = apply_l(&bg, &s_bg, &v)?;
        let b = apply_l_weitzenbock(&bg, &s_bg, &v)?;
        Ok((stride..m.ny() - 1).step_by(stride).map(|i| fro(&(&a[i] - &b[i])) * m.y[i] * m.y[i]).fold(0.0, f64::max))
    })?;
    let w_min = w_orders.iter().cloned().fold(f64::INFINITY, f64::min);
    out.checks.push(Check::at_least("identity: two linearization paths agree, refinement order", w_min, 1.8));

    let (defect_sups, defect_orders) = refinement_orders(&base, |m, stride| {
        let bg = Background::for_oper(&op, order, m.clone())?;
        Ok(bg.defect().iter().zip(&m.y).step_by(stride).map(|(d, y)| fro(d) * y * y).fold(0.0, f64::max))
    })?;
    let d_min = defect_orders.iter().cloned().fold(f64::INFINITY, f64::min);
    out.checks.push(Check::at_least("discretization: background moment-map defect refinement order", d_min, 1.8));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut equiv = 0.0f64;
    for draw in 0..100 {
        let tilt = tilt_params(0.05 + 0.004 * draw as f64)?;
        let j = random_node(&mut rng, 2 + draw % 3);
        let sys = system_at(&j, &tilt);
        let red = reduced_at(&j, &tilt);
        let back = reduced_from_system(&sys, &tilt);
        let fwd = system_from_reduced(&red, &tilt);
        for k in 0..5 {
            equiv = equiv.max(max_abs(&(&back[k] - &red[k])));
        }
        for k in 0..4 {
            equiv = equiv.max(max_abs(&(&fwd[k] - &sys[k])));
        }
    }
    out.checks.push(Check::at_most("identity: commutator and reduced systems are equivalent", equiv, 1e-9));

    let (mut gexp, mut vsq) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let s0 = random_hermitian(&mut rng, 3, 1.0);
        let s = if fro(&s0) > 2.0 { s0.scale(2.0 / fro(&s0)) } else { s0 };
        let x = random_matrix(&mut rng, 3, 1.0);
        let lhs = exp_herm(&s) * &x * exp_herm(&(-&s)) - &x;
        gexp = gexp.max(max_abs(&(lhs - comm(&s, &gamma_apply(&s, &x)?))));
        let vv = v_apply(&s, &v_apply(&s, &x)?)?;
        vsq = vsq.max(max_abs(&(vv - gamma_apply(&(-&s), &x)?)));
    }
    out.checks.push(Check::at_most("identity: exp(s) x exp(-s) - x = [s, gamma(s) x]", gexp, 1e-10));
    out.checks.push(Check::at_most("identity: v(s)^2 = gamma(-s)", vsq, 1e-10));

    let mut table = Table::new("refinement", &["level", "nodes", "key_identity_sup", "linearization_gap_sup", "background_defect_sup"]);
    let mut m = base.clone();
    for level in 0..3 {
        table.rows.push(vec![level as f64, m.ny() as f64, key_sups[level], w_sups[level], defect_sups[level]]);
        m = Arc::new(m.refine());
    }
    out.tables.push(table);
    out.results = json!({
        "key_identity": { "sups": key_sups, "orders": key_orders },
        "linearization_paths": { "sups": w_sups, "orders": w_orders },
        "background_defect": { "sups": defect_sups, "orders": defect_orders },
        "system_equivalence": equiv,
        "gamma_exp": gexp,
        "v_squared": vsq,
    });
    Ok(())
}

fn donaldson(cfg: &RunConfig, out: &mut Outcome) -> Result<()> {
    let op = cfg.oper()?;
    let mesh = cfg.mesh.build()?;
    let bg = Background::for_oper(&op, cfg.order.unwrap_or(cfg.n), mesh.clone())?;
    let r = Reference::new(bg.clone(), None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let zero = bg.zero_field();
    out.checks.push(Check::at_most("Donaldson: M(K, K) = 0", donaldson_m(&r, &zero, 1.0, 8)?.abs(), 0.0));
    let mut scan = Table::new("scan", &["direction", "t", "M", "dM", "d2M"]);
    let (mut grad_err, mut min_second, mut form_err, mut path_err) = (0.0f64, f64::INFINITY, 0.0f64, 0.0f64);
    let h = 1e-3;
    for k in 0..cfg.probes {
        let s = random_deformation(&mesh, cfg.n, 0.5, &mut rng);
        let t = 0.3;
        let fd = (donaldson_m(&r, &s, t + h, 8)? - donaldson_m(&r, &s, t - h, 8)?) / (2.0 * h);
        let (first, second) = donaldson_derivatives(&r, &s, t)?;
        grad_err = grad_err.max((fd - first).abs() / first.abs().max(1e-3));
        min_second = min_second.min(second);
        for tt in [0.0, 1.0] {
            min_second = min_second.min(donaldson_derivatives(&r, &s, tt)?.1);
        }
        let q = donaldson_quadratic_form(&bg, &s)?;
        let m2 = donaldson_derivatives(&r, &s, 0.0)?.1;
        form_err = form_err.max((m2 - q).abs() / q);
        let m1 = donaldson_m(&r, &s, 1.0, 8)?;
        let e = r.energy(&s, 0.0)? - r.energy(&zero, 0.0)?;
        path_err = path_err.max((m1 - e).abs() / e.abs().max(1.0));
        if k < 5 {
            for step in 0..=10 {
                let tt = step as f64 / 10.0;
                let (d1, d2) = donaldson_derivatives(&r, &s, tt)?;
                scan.rows.push(vec![k as f64, tt, donaldson_m(&r, &s, tt, 8)?, d1, d2]);
            }
        }
    }
    out.checks.push(Check::at_most("Donaldson: derivative matches finite differences (relative)", grad_err, 1e-6));
    out.checks.push(Check::at_least("Donaldson: second derivative is positive on every direction", min_second, f64::MIN_POSITIVE));
    out.checks.push(Check::at_most("Donaldson: M along the path equals the energy difference", path_err, 1e-8));
    out.checks.push(Check::at_most("Donaldson: second variation matches the continuum quadratic form", form_err, 0.05));
    out.tables.push(scan);
    out.results = json!({
        "directions": cfg.probes,
        "gradient_relative_error": grad_err,
        "min_second_derivative": min_second,
        "quadratic_form_relative_error": form_err,
        "path_energy_error": path_err,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys_with_path() {
        let e = RunConfig::from_json(r#"{"n": 2, "bogus": 1}"#).unwrap_err();
        match e {
            Error::Config { path, .. } => assert_eq!(path, "bogus"),
            other => panic!("{other:?}"),
        }
        let e = RunConfig::from_json(r#"{"mesh": {"y_min": 0.01, "typo": 3}}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref path, .. } if path == "typo"));
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = RunConfig { q: vec![0.5, 1.0], ..RunConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { ref path, .. }) if path == "q"));
        let bad = RunConfig { mesh: MeshConfig { y_max: 0.9, ..MeshConfig::default() }, ..RunConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { ref path, .. }) if path == "mesh.y_max"));
        let bad = RunConfig { norms: NormConfig { mu: 3.0, delta: 0.5 }, ..RunConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { ref path, .. }) if path == "norms.mu"));
        RunConfig::default().validate().unwrap();
        let parsed = RunConfig::from_json(&serde_json::to_string(&RunConfig::default()).unwrap()).unwrap();
        assert_eq!(parsed, RunConfig::default());
    }

    #[test]
    fn indicial_roots_table() {
        let o = run(Command::IndicialRoots, &RunConfig::default().with_rank(4)).unwrap();
        assert!(o.passed());
        assert_eq!(o.text[0], "-3 -2 -1 2 3 4");
        assert_eq!(exit_code(&Ok(o)), 0);
    }

    #[test]
    fn verify_model_passes() {
        let cfg = RunConfig { beta: 0.2, ..RunConfig::default() }.with_rank(3);
        let o = run(Command::VerifyModel, &cfg).unwrap();
        assert!(o.passed(), "{:?}", o.checks);
        assert!(o.results["max_residual"].as_f64().unwrap() < 1e-10);
    }

    #[test]
    fn reports_are_deterministic_up_to_wall_time() {
        let cfg = RunConfig::default();
        let strip = |o: Outcome| {
            let mut v = o.report_json(&cfg);
            v.as_object_mut().unwrap().remove("wall_seconds");
            serde_json::to_string(&v).unwrap()
        };
        let a = strip(run(Command::SolveHitchin, &cfg).unwrap());
        let b = strip(run(Command::SolveHitchin, &cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Err(Error::Config { path: "n".into(), msg: String::new() })), 3);
        assert_eq!(exit_code(&Err(Error::NotConverged(String::new()))), 2);
        let cfg = RunConfig { n: 9, ..RunConfig::default() };
        assert_eq!(exit_code(&run(Command::IndicialRoots, &cfg)), 3);
    }

    #[test]
    fn artifacts_are_written() {
        let dir = std::env::temp_dir().join(format!("nahm-oper-test-{}", std::process::id()));
        let cfg = RunConfig::default().with_rank(3);
        let o = run(Command::IndicialRoots, &cfg).unwrap();
        let target = o.write(&cfg, &dir).unwrap();
        let report: Value = serde_json::from_str(&fs::read_to_string(target.join("report.json")).unwrap()).unwrap();
        assert_eq!(report["schema_version"], 1);
        assert_eq!(report["status"], "PASS");
        let csv = fs::read_to_string(target.join("indicial_roots.csv")).unwrap();
        assert!(csv.starts_with("spin,casimir,root_low,root_high\n"));
        fs::remove_dir_all(dir).unwrap();
    }
}

//! Inequality-verification harness: experiment configs, ratio reports and the seven runners.
//!
//! Every runner turns a config into independent row jobs, evaluates them in parallel and
//! sorts the rows by key, so a report depends only on the config and its seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decomp::{
    atomic_decompose, cz_decompose, goldberg_split, make_atom, rough_atoms, truncate_bad_part, verify_atom, AtomKind, AtomicOptions, Region,
    SparseField, GOOD_CONSTANT_BOUND, MOMENT_TOL,
};
use crate::error::{Error, Result};
use crate::grid::{bump, derivative, dist2, lp_or_inf, sample, DerivMethod, GridFunction, GridSpec, MultiIndex, Point, Profile, TestFamily, C64};
use crate::norms::{
    admissible, grand_maximal, hardy_sobolev_norm, hp_norm, np_exponent, sobolev_exponent, sobolev_norm, MaximalDictionary, ScaleSet,
};
use crate::operators::{adjoint, apply, bessel_potential, certify_elliptic, kernel_field, operator_by_name, principal_part, DiffOperator, KernelKind};
use crate::poly::{poincare_lhs, weighted_fit, PoincareOptions};

/// Largest max/min ratio across a dilation sweep that still counts as scale-stable.
pub const VARIATION_MAX: f64 = 4.0;
/// Largest ratio change under one grid refinement.
pub const DRIFT_MAX: f64 = 2.0;
/// Largest admissible |A* v|_2 / |v|_2 for a kernel field.
pub const KERNEL_CONSTRAINT_MAX: f64 = 1e-8;
pub const RESCALE_TOL: f64 = 1e-10;
/// Poincare deviation of a polynomial on balls where the plateau is flat.
pub const POLY_LHS_TOL: f64 = 1e-9;
pub const ELLIPTIC_THRESHOLD: f64 = 0.1;
pub const RECONSTRUCTION_TOL: f64 = 1e-9;
/// Largest max / median of the atom suite integrals.
pub const UNIFORMITY_MAX: f64 = 4.0;
/// Lower-order ratio distance from 1 at the smallest radius of a sweep.
pub const RADIUS_LIMIT_TOL: f64 = 0.2;
/// Balls whose local right side falls below this fraction of its maximum are not ratio-tested.
pub const LOCAL_RHS_FLOOR: f64 = 1e-6;
/// Annuli below this fraction of the peak are rounding noise.
pub const FAR_ZONE_FLOOR: f64 = 1e-9;
/// The decay slope is fitted from this multiple of the atom radius out to the noise floor.
pub const SLOPE_START: f64 = 2.0;
const SPHERE_SAMPLES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExperimentKind {
    #[serde(rename = "poincare")]
    Poincare,
    #[serde(rename = "sgn")]
    Sgn,
    #[serde(rename = "elliptic_equiv")]
    EllipticEquiv,
    #[serde(rename = "divcurl_A")]
    DivcurlA,
    #[serde(rename = "divcurl_B")]
    DivcurlB,
    #[serde(rename = "atom_uniformity")]
    AtomUniformity,
    #[serde(rename = "decomp_audit")]
    DecompAudit,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Poincare => "poincare",
            ExperimentKind::Sgn => "sgn",
            ExperimentKind::EllipticEquiv => "elliptic_equiv",
            ExperimentKind::DivcurlA => "divcurl_A",
            ExperimentKind::DivcurlB => "divcurl_B",
            ExperimentKind::AtomUniformity => "atom_uniformity",
            ExperimentKind::DecompAudit => "decomp_audit",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exponents {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl Exponents {
    fn need(&self, key: &str) -> Result<f64> {
        let v = match key {
            "p" => self.p,
            "q" => self.q,
            "r" => self.r,
            "alpha" => self.alpha,
            "gamma" => self.gamma,
            "m" => self.m.map(|m| m as f64),
            _ => None,
        };
        v.ok_or_else(|| Error::Config(format!("exponents.{key} required")))
    }

    fn need_m(&self) -> Result<usize> {
        self.m.ok_or_else(|| Error::Config("exponents.m required".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl OperatorSpec {
    pub fn build(&self) -> Result<DiffOperator> {
        operator_by_name(&self.name, &self.params)
    }
}

/// How the second factor v of a div-curl pairing is built from its generator family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldConstruction {
    /// The family sampled with one channel per operator output.
    Sample,
    /// (d_y psi, -d_x psi) of a scalar generator.
    Stream2d,
    /// curl of a 3-channel generator.
    Curl3d,
    /// grad psi of a scalar generator (curl-free, not in the kernel of -div).
    Gradient,
    /// Spectral projection of the sampled family onto ker A*.
    Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub construction: FieldConstruction,
    pub family: TestFamily,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    /// Evaluation sublattice stride for Poincare fields.
    pub stride: usize,
    /// Size of the atom suite.
    pub atoms: usize,
    /// CZ levels as fractions of max M f.
    pub cz_fractions: Vec<f64>,
    /// Truncation thresholds for the bad part.
    pub deltas: Vec<f64>,
    /// Ladder depth of the atomic decomposition; None lets the ladder pick its own depth.
    pub levels: Option<usize>,
    /// Scalars applied to the two pairing factors in the rescaling check.
    pub rescale: [f64; 2],
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { stride: 4, atoms: 20, cz_fractions: vec![0.5, 0.25, 0.125], deltas: vec![0.5, 0.25, 0.125], levels: None, rescale: [3.0, 0.7] }
    }
}

fn default_dilations() -> Vec<f64> {
    vec![1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub grid: GridSpec,
    #[serde(default)]
    pub exponents: Exponents,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<OperatorSpec>,
    #[serde(default)]
    pub families: Vec<TestFamily>,
    #[serde(default = "default_dilations")]
    pub dilations: Vec<f64>,
    #[serde(default)]
    pub scales: ScaleSet,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldSpec>,
    /// Neighbourhood radii; elliptic_equiv defaults to a quarter of the box half-width.
    #[serde(default)]
    pub radii: Vec<f64>,
    #[serde(default)]
    pub options: RunOptions,
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Sets `path` (dot separated) in a JSON tree; the value is parsed as JSON when possible.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key.parse().map_err(|_| Error::Config(format!("override {path}: `{key}` is not an index")))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| Error::Config(format!("override {path}: index {idx} out of {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("override {path}: `{key}` is not inside an object"))),
        };
    }
    Err(Error::Config(format!("override {path}: empty path")))
}

impl ExperimentConfig {
    /// Parses and validates; every failure is a config error naming the offending key.
    pub fn from_json(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        for (k, v) in overrides {
            apply_override(&mut tree, k, v)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate().map_err(|e| Error::Config(format!("grid: {e}")))?;
        self.scales.validate().map_err(|e| Error::Config(format!("scales: {e}")))?;
        if self.dilations.is_empty() || self.dilations.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Config("dilations must be a non-empty list of positive numbers".into()));
        }
        if self.radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("radii must be positive".into()));
        }
        if self.experiment != ExperimentKind::AtomUniformity && self.families.is_empty() {
            return Err(Error::Config("families required".into()));
        }
        for f in &self.families {
            f.resolve().map_err(|e| Error::Config(format!("families: {e}")))?;
        }
        let e = &self.exponents;
        let dim = self.grid.dim;
        match self.experiment {
            ExperimentKind::Poincare => {
                let m = e.need_m()?;
                let alpha = e.need("alpha")?;
                let gamma = e.need("gamma")?;
                e.need("p")?;
                if m == 0 {
                    return Err(Error::Config("exponents.m must be >= 1".into()));
                }
                if alpha < 1.0 {
                    return Err(Error::Config("exponents.alpha must be >= 1".into()));
                }
                if alpha > 1.0 && (gamma - alpha).abs() > 1e-12 {
                    return Err(Error::Config("exponents.gamma must equal alpha when alpha > 1".into()));
                }
                if alpha == 1.0 && gamma <= alpha {
                    return Err(Error::Config("exponents.gamma must exceed alpha when alpha = 1".into()));
                }
            }
            ExperimentKind::Sgn => {
                let p = e.need("p")?;
                if dim < 2 {
                    return Err(Error::Config("sgn needs grid.dim >= 2".into()));
                }
                let ps = sobolev_exponent(p, dim, 1).map_err(config_err)?;
                if ps.is_infinite() {
                    return Err(Error::Config("exponents.p must be below N".into()));
                }
            }
            ExperimentKind::EllipticEquiv => {
                e.need("p")?;
                let op = self.operator()?;
                if let Some(m) = e.m {
                    if m != op.order {
                        return Err(Error::Config(format!("exponents.m = {m} but the operator has order {}", op.order)));
                    }
                }
            }
            ExperimentKind::DivcurlA | ExperimentKind::DivcurlB => {
                let p = e.need("p")?;
                let q = e.need("q")?;
                let m = e.need_m()?;
                let op = self.operator()?;
                if op.order != m {
                    return Err(Error::Config(format!("exponents.m = {m} but the operator has order {}", op.order)));
                }
                if op.dim != dim {
                    return Err(Error::Config(format!("operator acts on N = {} but grid.dim = {dim}", op.dim)));
                }
                if self.field.is_none() {
                    return Err(Error::Config("field required".into()));
                }
                let r = self.pairing_exponent(p, q, m)?;
                if let Some(given) = e.r {
                    if (given - r).abs() > 1e-9 * r {
                        return Err(Error::Config(format!("exponents.r = {given} but 1/r = 1/p + 1/q gives {r}")));
                    }
                }
            }
            ExperimentKind::AtomUniformity => {
                let p = e.need("p")?;
                let m = e.need_m()?;
                let lo = dim as f64 / (dim as f64 + m as f64);
                if !(p > lo && p <= 1.0) {
                    return Err(Error::Config(format!("exponents.p must lie in ({lo}, 1]")));
                }
                if self.options.atoms < 2 {
                    return Err(Error::Config("options.atoms must be >= 2".into()));
                }
            }
            ExperimentKind::DecompAudit => {
                let p = e.need("p")?;
                let m = e.need_m()?;
                let np = np_exponent(p, dim).map_err(config_err)?;
                if m < np + 1 {
                    return Err(Error::Config(format!("exponents.m must be >= {} for p = {p}", np + 1)));
                }
                if self.options.deltas.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
                    return Err(Error::Config("options.deltas must lie in (0, 1)".into()));
                }
                if self.options.cz_fractions.is_empty() || self.options.cz_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
                    return Err(Error::Config("options.cz_fractions must lie in (0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    fn operator(&self) -> Result<DiffOperator> {
        let spec = self.operator.as_ref().ok_or_else(|| Error::Config("operator required".into()))?;
        spec.build().map_err(|e| Error::Config(format!("operator: {e}")))
    }

    /// r with 1/r = 1/p + 1/q; refuses exponents outside the admissible range.
    fn pairing_exponent(&self, p: f64, q: f64, m: usize) -> Result<f64> {
        let (r, ok) = admissible(p, q, self.grid.dim, m).map_err(|e| Error::Config(format!("exponents: {e}")))?;
        if !ok {
            return Err(Error::Config(format!("exponents: 1/r = {} violates 1/r < 1 + m/N", 1.0 / r)));
        }
        Ok(r)
    }

    pub fn refined(&self) -> Result<ExperimentConfig> {
        let grid = self.grid.refined().map_err(|e| Error::Config(format!("audit refinement: {e}")))?;
        Ok(ExperimentConfig { grid, ..self.clone() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub family: String,
    pub lambda: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    /// Which estimate or decomposition stage the row measures.
    pub case: String,
    pub params: BTreeMap<String, f64>,
    pub extra: BTreeMap<String, f64>,
}

impl ReportRow {
    fn new(family: String, case: &str, lambda: f64, lhs: f64, rhs: f64) -> Self {
        let ratio = if rhs > 0.0 {
            lhs / rhs
        } else if lhs == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        ReportRow { family, lambda, lhs, rhs, ratio, case: case.to_string(), params: BTreeMap::new(), extra: BTreeMap::new() }
    }

    fn with_param(mut self, k: &str, v: f64) -> Self {
        self.params.insert(k.to_string(), v);
        self
    }

    fn group_key(&self) -> String {
        format!("{}|{}|{:?}", self.family, self.case, self.params)
    }

    fn sort_key(&self) -> (String, u64) {
        (self.group_key(), self.lambda.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

impl Gate {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Gate { name: name.to_string(), passed: value <= threshold, value, threshold }
    }

    fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Gate { name: name.to_string(), passed: value >= threshold, value, threshold }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub max_ratio: f64,
    pub min_ratio: f64,
    /// Largest max/min ratio within a row group across the dilation sweep.
    pub variation: f64,
    /// Largest ratio change against the run at one higher resolution, when audited.
    pub drift: Option<f64>,
    pub gates: Vec<Gate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub experiment: String,
    pub grid: GridSpec,
    pub seed: u64,
    pub version: String,
    pub tolerances: BTreeMap<String, f64>,
    /// Derived exponents and constants used by every row (p*, r, ...).
    pub header: BTreeMap<String, f64>,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub environment: Environment,
    pub rows: Vec<ReportRow>,
    pub summary: Summary,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.summary.gates.iter().all(|g| g.passed)
    }

    pub fn failed_gates(&self) -> Vec<&Gate> {
        self.summary.gates.iter().filter(|g| !g.passed).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// family, lambda, lhs, rhs, ratio, case, then every parameter and extra column.
    pub fn to_csv(&self) -> Result<String> {
        let mut pkeys: Vec<&String> = self.rows.iter().flat_map(|r| r.params.keys()).collect();
        pkeys.sort();
        pkeys.dedup();
        let mut ekeys: Vec<&String> = self.rows.iter().flat_map(|r| r.extra.keys()).collect();
        ekeys.sort();
        ekeys.dedup();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["family", "lambda", "lhs", "rhs", "ratio", "case"].iter().map(|s| s.to_string()).collect();
        header.extend(pkeys.iter().map(|k| format!("param_{k}")));
        header.extend(ekeys.iter().map(|k| k.to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.family.clone(), num(r.lambda), num(r.lhs), num(r.rhs), num(r.ratio), r.case.clone()];
            rec.extend(pkeys.iter().map(|k| r.params.get(*k).map(|v| num(*v)).unwrap_or_default()));
            rec.extend(ekeys.iter().map(|k| r.extra.get(*k).map(|v| num(*v)).unwrap_or_default()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    /// One-line summary printed by the command line front end.
    pub fn summary_line(&self) -> String {
        let failed: Vec<&str> = self.failed_gates().iter().map(|g| g.name.as_str()).collect();
        let drift = self.summary.drift.map(|d| format!(" drift={d:.3}")).unwrap_or_default();
        format!(
            "{}: {} rows, ratio in [{:.4e}, {:.4e}], variation {:.3}{drift}, {}",
            self.environment.experiment,
            self.rows.len(),
            self.summary.min_ratio,
            self.summary.max_ratio,
            self.summary.variation,
            if failed.is_empty() { "all gates passed".to_string() } else { format!("FAILED: {}", failed.join(", ")) }
        )
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

struct Outcome {
    rows: Vec<ReportRow>,
    gates: Vec<Gate>,
    header: BTreeMap<String, f64>,
}

fn tolerances() -> BTreeMap<String, f64> {
    [
        ("variation_max", VARIATION_MAX),
        ("drift_max", DRIFT_MAX),
        ("kernel_constraint_max", KERNEL_CONSTRAINT_MAX),
        ("rescale_tol", RESCALE_TOL),
        ("poly_lhs_tol", POLY_LHS_TOL),
        ("elliptic_threshold", ELLIPTIC_THRESHOLD),
        ("reconstruction_tol", RECONSTRUCTION_TOL),
        ("moment_tol", MOMENT_TOL),
        ("good_constant_bound", GOOD_CONSTANT_BOUND),
        ("uniformity_max", UNIFORMITY_MAX),
        ("radius_limit_tol", RADIUS_LIMIT_TOL),
        ("local_rhs_floor", LOCAL_RHS_FLOOR),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), *v))
    .collect()
}

/// Runs the configured experiment once at the configured resolution.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out = match cfg.experiment {
        ExperimentKind::Poincare => poincare_outcome(cfg)?,
        ExperimentKind::Sgn => sgn_outcome(cfg)?,
        ExperimentKind::EllipticEquiv => elliptic_equiv_outcome(cfg)?,
        ExperimentKind::DivcurlA => divcurl_a_outcome(cfg)?,
        ExperimentKind::DivcurlB => divcurl_b_outcome(cfg)?,
        ExperimentKind::AtomUniformity => atom_uniformity_outcome(cfg)?,
        ExperimentKind::DecompAudit => decomp_audit_outcome(cfg)?,
    };
    Ok(assemble(cfg, out))
}

pub fn run_poincare(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    Ok(assemble(cfg, poincare_outcome(cfg)?))
}

pub fn run_sgn(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    Ok(assemble(cfg, sgn_outcome(cfg)?))
}

pub fn run_elliptic_equiv(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    Ok(assemble(cfg, elliptic_equiv_outcome(cfg)?))
}

pub fn run_divcurl_a(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    Ok(assemble(cfg, divcurl_a_outcome(cfg)?))
}

pub fn run_divcurl_b(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    Ok(assemble(cfg, divcurl_b_outcome(cfg)?))
}

pub fn run_atom_uniformity(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    Ok(assemble(cfg, atom_uniformity_outcome(cfg)?))
}

pub fn run_decomp_audit(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    Ok(assemble(cfg, decomp_audit_outcome(cfg)?))
}

/// Runs at the configured resolution and once refined, recording the ratio drift.
pub fn run_audited(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut coarse = run(cfg)?;
    let fine = run(&cfg.refined()?)?;
    let drift = refinement_drift(&coarse, &fine);
    coarse.summary.drift = Some(drift);
    coarse.summary.gates.push(Gate::at_most("refinement_drift", drift, DRIFT_MAX));
    coarse.environment.header.insert("audit_points_per_axis".into(), fine.environment.grid.points_per_axis as f64);
    Ok(coarse)
}

/// max over rows present in both runs of max(a/b, b/a), rows with a zero side skipped.
pub fn refinement_drift(coarse: &ExperimentReport, fine: &ExperimentReport) -> f64 {
    let index: BTreeMap<(String, u64), f64> = fine.rows.iter().map(|r| (r.sort_key(), r.ratio)).collect();
    let mut worst: f64 = 1.0;
    for r in &coarse.rows {
        let Some(&b) = index.get(&r.sort_key()) else { continue };
        let a = r.ratio;
        if a > 0.0 && b > 0.0 {
            worst = worst.max((a / b).max(b / a));
        } else if (a > 0.0) != (b > 0.0) {
            worst = f64::INFINITY;
        }
    }
    worst
}

fn assemble(cfg: &ExperimentConfig, out: Outcome) -> ExperimentReport {
    let Outcome { mut rows, mut gates, header } = out;
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    let min_ratio = if ratios.is_empty() { 0.0 } else { ratios.iter().cloned().fold(f64::INFINITY, f64::min) };
    let variation = sweep_variation(&rows);
    let finite = rows.iter().all(|r| r.lhs.is_finite() && r.rhs.is_finite() && r.lhs >= 0.0 && r.rhs >= 0.0 && r.ratio.is_finite());
    gates.insert(0, Gate { name: "finite_rows".into(), passed: finite, value: max_ratio, threshold: f64::MAX });
    ExperimentReport {
        environment: Environment {
            experiment: cfg.experiment.name().to_string(),
            grid: cfg.grid,
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            tolerances: tolerances(),
            header,
            config: cfg.clone(),
        },
        rows,
        summary: Summary { max_ratio, min_ratio, variation, drift: None, gates },
    }
}

/// Largest max/min ratio within any (family, case, params) group; groups with a zero ratio are skipped.
fn sweep_variation(rows: &[ReportRow]) -> f64 {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.group_key()).or_default().push(r.ratio);
    }
    let mut worst: f64 = 1.0;
    for v in groups.values() {
        let hi = v.iter().cloned().fold(0.0, f64::max);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        if lo > 0.0 {
            worst = worst.max(hi / lo);
        }
    }
    worst
}

fn par_rows<J: Sync>(jobs: &[J], f: impl Fn(&J) -> Result<Vec<ReportRow>> + Sync + Send) -> Result<Vec<ReportRow>> {
    let chunks: Vec<Result<Vec<ReportRow>>> = jobs.par_iter().map(f).collect();
    let mut rows = Vec::new();
    for c in chunks {
        rows.extend(c?);
    }
    Ok(rows)
}

fn family_lambda_jobs(cfg: &ExperimentConfig) -> Vec<(TestFamily, f64)> {
    cfg.families.iter().flat_map(|f| cfg.dilations.iter().map(move |&l| (f.clone(), l))).collect()
}

fn dilated(f: &TestFamily, lambda: f64) -> TestFamily {
    TestFamily::dilated(f.clone(), lambda)
}

fn hp(u: &GridFunction, p: f64, scales: &ScaleSet) -> Result<f64> {
    hp_norm(u, p, &Profile::Bump, scales)
}

/// D^m u = (D^beta u_c) over channels c and |beta| = m, as one vector field.
pub fn total_derivative(u: &GridFunction, m: usize) -> Result<GridFunction> {
    let mut chans = Vec::new();
    for c in 0..u.channels {
        let uc = u.single(c);
        for beta in MultiIndex::of_order(u.spec.dim, m) {
            chans.push(derivative(&uc, &beta, DerivMethod::Spectral)?.values);
        }
    }
    Ok(GridFunction::from_channels(u.spec, chans)?.with_support(u.support))
}

/// The scalar generator behind a family: stream fields are rotated gradients of Gaussians.
fn scalar_family(f: &TestFamily) -> TestFamily {
    let mut g = f.clone();
    if g.name == "stream_field" {
        g.name = "gaussian_bump".into();
    }
    if let Some(b) = g.base.as_mut() {
        **b = scalar_family(b);
    }
    g
}

fn without_support(f: GridFunction) -> GridFunction {
    GridFunction { support: None, ..f }
}


/// Degree and flat region (centre, radius) of a polynomial_bump leaf.
fn polynomial_leaf(f: &TestFamily, dim: usize) -> Option<(usize, Point, f64)> {
    let (leaf, _) = f.resolve().ok()?;
    if leaf.name != "polynomial_bump" {
        return None;
    }
    let mut degree = 0;
    for k in leaf.params.keys() {
        let Some(rest) = k.strip_prefix('c') else { continue };
        if !rest.starts_with(|c: char| c.is_ascii_digit()) {
            continue;
        }
        let d: usize = rest.split('_').filter_map(|s| s.parse::<usize>().ok()).sum();
        degree = degree.max(d);
    }
    let flat = leaf.param("radius", 1.0) - 6.0 * leaf.param("edge", 0.25);
    Some((degree, leaf.center(dim), flat))
}

fn poincare_outcome(cfg: &ExperimentConfig) -> Result<Outcome> {
    let e = &cfg.exponents;
    let (m, alpha, gamma, p) = (e.need_m()?, e.need("alpha")?, e.need("gamma")?, e.need("p")?);
    let jobs = family_lambda_jobs(cfg);
    let rows = par_rows(&jobs, |(fam, lam)| Ok(vec![poincare_row(cfg, fam, *lam, m, alpha, gamma, p)?]))?;
    let mut gates = Vec::new();
    let poly: Vec<f64> = rows.iter().filter_map(|r| r.extra.get("interior_lhs_max").copied()).collect();
    if !poly.is_empty() {
        gates.push(Gate::at_most("polynomial_interior_lhs", poly.iter().cloned().fold(0.0, f64::max), POLY_LHS_TOL));
    }
    let local = rows.iter().filter_map(|r| r.extra.get("local_ratio_max").copied()).fold(0.0, f64::max);
    gates.push(Gate { name: "local_ratio_finite".into(), passed: local.is_finite(), value: local, threshold: f64::MAX });
    let header = [("m", m as f64), ("alpha", alpha), ("gamma", gamma), ("p", p)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    Ok(Outcome { rows, gates, header })
}

fn poincare_row(cfg: &ExperimentConfig, fam: &TestFamily, lam: f64, m: usize, alpha: f64, gamma: f64, p: f64) -> Result<ReportRow> {
    let spec = cfg.grid;
    let dim = spec.dim;
    let f = sample(&dilated(fam, lam), &spec, 1)?;
    let tf = poincare_lhs(&f, m, alpha, &cfg.scales, &PoincareOptions { stride: cfg.options.stride })?;
    let g: Vec<f64> = total_derivative(&f, m)?.magnitudes().into_iter().map(|v| v.powf(gamma)).collect();
    // Ball average of |D^m f|^gamma on the same open balls as the left side.
    let local: Vec<Vec<f64>> = tf
        .points
        .par_iter()
        .map(|&i| {
            let x = spec.point(i);
            tf.scales
                .iter()
                .map(|&t| {
                    let cells = crate::grid::ball_cells(&spec, &x, t);
                    let s: f64 = cells.iter().map(|&c| g[c]).sum();
                    (s / cells.len().max(1) as f64).powf(1.0 / gamma)
                })
                .collect()
        })
        .collect();
    let rhs_top = local.iter().flatten().cloned().fold(0.0, f64::max);
    let (mut best, mut best_lhs, mut best_rhs) = (0.0f64, 0.0, 0.0);
    for (j, row) in local.iter().enumerate() {
        for (s, &rhs) in row.iter().enumerate() {
            if rhs <= LOCAL_RHS_FLOOR * rhs_top {
                continue;
            }
            let lhs = tf.per_scale[s][j];
            if lhs / rhs > best {
                (best, best_lhs, best_rhs) = (lhs / rhs, lhs, rhs);
            }
        }
    }
    let lhs = tf.lp(p);
    let rhs = hardy_sobolev_norm(&f, m, p, &Profile::Bump, &cfg.scales, false)?;
    let mut row = ReportRow::new(fam.label(), "global", lam, lhs, rhs);
    row.extra.insert("local_ratio_max".into(), best);
    row.extra.insert("local_lhs".into(), best_lhs);
    row.extra.insert("local_rhs".into(), best_rhs);
    row.extra.insert("tf_max".into(), tf.max());
    if let Some((degree, c, flat)) = polynomial_leaf(fam, dim) {
        if degree < m {
            // Balls on which the plateau is 1 to double precision, in leaf coordinates.
            let mut worst: f64 = 0.0;
            for (j, &i) in tf.points.iter().enumerate() {
                let mut x = spec.point(i);
                x.iter_mut().for_each(|v| *v *= lam);
                let r = dist2(&x, &c, dim).sqrt();
                for (s, &t) in tf.scales.iter().enumerate() {
                    if r + lam * t <= flat {
                        worst = worst.max(tf.per_scale[s][j]);
                    }
                }
            }
            row.extra.insert("interior_lhs_max".into(), worst);
        }
    }
    Ok(row)
}


fn sgn_outcome(cfg: &ExperimentConfig) -> Result<Outcome> {
    let p = cfg.exponents.need("p")?;
    let p_star = sobolev_exponent(p, cfg.grid.dim, 1)?;
    let jobs = family_lambda_jobs(cfg);
    let rows = par_rows(&jobs, |(fam, lam)| {
        let u = sample(&dilated(fam, *lam), &cfg.grid, 1)?;
        let grad = total_derivative(&u, 1)?;
        let lhs = hp(&u, p_star, &cfg.scales)?;
        let rhs = hp(&grad, p, &cfg.scales)?;
        if lhs == 0.0 && rhs == 0.0 {
            return Ok(Vec::new());
        }
        Ok(vec![ReportRow::new(fam.label(), "sobolev_embedding", *lam, lhs, rhs)])
    })?;
    let variation = sweep_variation(&rows);
    let gates = vec![Gate::at_most("dilation_variation", variation, VARIATION_MAX)];
    let header = [("p", p), ("p_star", p_star)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    Ok(Outcome { rows, gates, header })
}


fn elliptic_equiv_outcome(cfg: &ExperimentConfig) -> Result<Outcome> {
    let p = cfg.exponents.need("p")?;
    let op = cfg.operator()?;
    let radii = if cfg.radii.is_empty() { vec![cfg.grid.box_half_width / 4.0] } else { cfg.radii.clone() };
    let rmax = radii.iter().cloned().fold(0.0, f64::max);
    let dim = op.dim;
    let mut probe_points = vec![[0.0; 3]];
    for d in 0..dim {
        for s in [-1.0, 1.0] {
            let mut x = [0.0; 3];
            x[d] = s * rmax;
            probe_points.push(x);
        }
    }
    let min_sv = certify_elliptic(&op, &probe_points, SPHERE_SAMPLES, ELLIPTIC_THRESHOLD)?;
    let principal = principal_part(&op);
    let has_lower = op.terms.iter().any(|(a, _)| a.order() < op.order);
    let jobs: Vec<(TestFamily, f64, f64)> =
        family_lambda_jobs(cfg).into_iter().flat_map(|(f, l)| radii.iter().map(move |&r| (f.clone(), l, r))).collect();
    let rows = par_rows(&jobs, |(fam, lam, radius)| {
        let spec = cfg.grid;
        let probe = sample(&dilated(fam, *lam), &spec, op.n_in)?;
        let s = probe.support.ok_or_else(|| Error::InvalidParameter("family without support".into()))?;
        let reach = dist2(&s.center, &[0.0; 3], dim).sqrt() + s.radius;
        // Shrink until the support sits inside the neighbourhood ball.
        let lam_eff = lam * (reach / radius).max(1.0);
        let u = if lam_eff == *lam { probe } else { sample(&dilated(fam, lam_eff), &spec, op.n_in)? };
        let a = op.clone().with_domain([0.0; 3], *radius);
        let a_nu = principal.clone().with_domain([0.0; 3], *radius);
        let full = hp(&apply(&a, &u)?, p, &cfg.scales)?;
        let top = hp(&apply(&a_nu, &u)?, p, &cfg.scales)?;
        let hom = hp(&total_derivative(&u, op.order)?, p, &cfg.scales)?;
        let label = fam.label();
        let mut r1 = ReportRow::new(label.clone(), "homogeneous_vs_principal", *lam, hom, top).with_param("radius", *radius);
        let mut r2 = ReportRow::new(label, "principal_vs_full", *lam, top, full).with_param("radius", *radius);
        r1.extra.insert("lambda_eff".into(), lam_eff);
        r2.extra.insert("lambda_eff".into(), lam_eff);
        Ok(vec![r1, r2])
    })?;
    let mut gates = vec![Gate::at_least("ellipticity", min_sv, ELLIPTIC_THRESHOLD)];
    if has_lower && radii.len() >= 2 {
        // Per family and dilation: |ratio - 1| shrinks with the radius and ends within tolerance.
        let mut by_key: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.case == "principal_vs_full") {
            by_key.entry(format!("{}|{}", r.family, r.lambda)).or_default().push((r.params["radius"], r.ratio));
        }
        let mut worst_end: f64 = 0.0;
        let mut monotone = true;
        for list in by_key.values_mut() {
            list.sort_by(|a, b| b.0.total_cmp(&a.0));
            let dev: Vec<f64> = list.iter().map(|(_, q)| (q - 1.0).abs()).collect();
            monotone &= dev.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9));
            worst_end = worst_end.max(*dev.last().unwrap_or(&0.0));
        }
        gates.push(Gate { name: "lower_order_monotone".into(), passed: monotone, value: if monotone { 1.0 } else { 0.0 }, threshold: 1.0 });
        gates.push(Gate::at_most("lower_order_limit", worst_end, RADIUS_LIMIT_TOL));
    }
    let header = [("p", p), ("m", op.order as f64), ("min_singular_value", min_sv)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    Ok(Outcome { rows, gates, header })
}


/// Builds v at dilation `lam`, rescaled so that dilation acts as v(lam x).
fn build_field(fs: &FieldSpec, construction: FieldConstruction, lam: f64, spec: &GridSpec, a: &DiffOperator, a_star: &DiffOperator) -> Result<GridFunction> {
    let inv = C64::new(1.0 / lam, 0.0);
    let fam = dilated(&fs.family, lam);
    match construction {
        FieldConstruction::Sample => sample(&fam, spec, a.n_out),
        FieldConstruction::Stream2d => {
            let g = sample(&scalar_family(&fam), spec, 1)?;
            Ok(kernel_field(KernelKind::Stream2d, &g, None)?.field.scaled(inv))
        }
        FieldConstruction::Curl3d => {
            let g = sample(&fam, spec, 3)?;
            Ok(kernel_field(KernelKind::Curl3d, &g, None)?.field.scaled(inv))
        }
        FieldConstruction::Gradient => {
            let g = sample(&scalar_family(&fam), spec, 1)?;
            Ok(total_derivative(&g, 1)?.scaled(inv))
        }
        FieldConstruction::Projection => {
            let g = sample(&fam, spec, a.n_out)?;
            Ok(kernel_field(KernelKind::CustomProjection, &g, Some(a_star))?.field)
        }
    }
}

fn l2(f: &GridFunction) -> f64 {
    f.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// (h^r norm of the pairing, h^p norm of A phi, W^{m-1,q} norm of v).
fn divcurl_sides(aphi: &GridFunction, v: &GridFunction, r: f64, p: f64, q: f64, m: usize, scales: &ScaleSet) -> Result<(f64, f64, f64)> {
    let pair = aphi.pairing(v)?;
    Ok((hp(&pair, r, scales)?, hp(aphi, p, scales)?, sobolev_norm(v, m - 1, q)?))
}

struct DivcurlSetup {
    op: DiffOperator,
    a_star: DiffOperator,
    p: f64,
    q: f64,
    r: f64,
    m: usize,
}

fn divcurl_setup(cfg: &ExperimentConfig) -> Result<DivcurlSetup> {
    let e = &cfg.exponents;
    let (p, q, m) = (e.need("p")?, e.need("q")?, e.need_m()?);
    let r = cfg.pairing_exponent(p, q, m)?;
    let op = cfg.operator()?;
    let a_star = adjoint(&op)?;
    Ok(DivcurlSetup { op, a_star, p, q, r, m })
}

fn divcurl_jobs(cfg: &ExperimentConfig) -> Vec<(TestFamily, f64, Option<f64>)> {
    let radii: Vec<Option<f64>> = if cfg.radii.is_empty() { vec![None] } else { cfg.radii.iter().map(|&r| Some(r)).collect() };
    family_lambda_jobs(cfg).into_iter().flat_map(|(f, l)| radii.clone().into_iter().map(move |r| (f.clone(), l, r))).collect()
}

fn with_radius(op: &DiffOperator, radius: Option<f64>) -> DiffOperator {
    match radius {
        Some(r) => op.clone().with_domain([0.0; 3], r),
        None => op.clone(),
    }
}

fn divcurl_header(s: &DivcurlSetup) -> BTreeMap<String, f64> {
    [("p", s.p), ("q", s.q), ("r", s.r), ("m", s.m as f64)].iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn divcurl_a_outcome(cfg: &ExperimentConfig) -> Result<Outcome> {
    let s = divcurl_setup(cfg)?;
    let fs = cfg.field.as_ref().ok_or_else(|| Error::Config("field required".into()))?;
    let contrast = if s.op.n_out == s.op.dim { FieldConstruction::Gradient } else { FieldConstruction::Sample };
    let [c1, c2] = cfg.options.rescale;
    let jobs = divcurl_jobs(cfg);
    let rows = par_rows(&jobs, |(fam, lam, radius)| {
        let spec = cfg.grid;
        let v = build_field(fs, fs.construction, *lam, &spec, &s.op, &s.a_star)?;
        let constraint = l2(&apply(&s.a_star, &without_support(v.clone()))?) / l2(&v).max(f64::MIN_POSITIVE);
        if constraint > KERNEL_CONSTRAINT_MAX {
            return Err(Error::KernelConstraintViolated(constraint));
        }
        let phi = sample(&dilated(fam, *lam), &spec, s.op.n_in)?;
        let aphi = apply(&with_radius(&s.op, *radius), &phi)?;
        let (lhs, hpa, wv) = divcurl_sides(&aphi, &v, s.r, s.p, s.q, s.m, &cfg.scales)?;
        if lhs == 0.0 && hpa * wv == 0.0 {
            return Ok(Vec::new());
        }
        let mut row = ReportRow::new(fam.label(), "kernel_field", *lam, lhs, hpa * wv);
        if let Some(r) = radius {
            row = row.with_param("radius", *r);
        }
        // Scalar rescaling of both factors must leave the ratio unchanged.
        let (l2s, h2, w2) = divcurl_sides(&aphi.scaled(C64::new(c1, 0.0)), &v.scaled(C64::new(c2, 0.0)), s.r, s.p, s.q, s.m, &cfg.scales)?;
        let rescaled = l2s / (h2 * w2);
        let w = build_field(fs, contrast, *lam, &spec, &s.op, &s.a_star)?;
        let (cl, ch, cw) = divcurl_sides(&aphi, &w, s.r, s.p, s.q, s.m, &cfg.scales)?;
        row.extra.insert("constraint_ratio".into(), constraint);
        row.extra.insert("rescale_defect".into(), if row.ratio > 0.0 { (rescaled - row.ratio).abs() / row.ratio } else { 0.0 });
        row.extra.insert("contrast_lhs".into(), cl);
        row.extra.insert("contrast_rhs".into(), ch * cw);
        row.extra.insert("contrast_ratio".into(), if ch * cw > 0.0 { cl / (ch * cw) } else { 0.0 });
        Ok(vec![row])
    })?;
    let variation = sweep_variation(&rows);
    let rescale = rows.iter().map(|r| r.extra["rescale_defect"]).fold(0.0, f64::max);
    let constraint = rows.iter().map(|r| r.extra["constraint_ratio"]).fold(0.0, f64::max);
    let gates = vec![
        Gate::at_most("dilation_variation", variation, VARIATION_MAX),
        Gate::at_most("rescale_invariance", rescale, RESCALE_TOL),
        Gate::at_most("kernel_constraint", constraint, KERNEL_CONSTRAINT_MAX),
    ];
    Ok(Outcome { rows, gates, header: divcurl_header(&s) })
}

fn divcurl_b_outcome(cfg: &ExperimentConfig) -> Result<Outcome> {
    let s = divcurl_setup(cfg)?;
    let fs = cfg.field.as_ref().ok_or_else(|| Error::Config("field required".into()))?;
    let jobs = divcurl_jobs(cfg);
    let rows = par_rows(&jobs, |(fam, lam, radius)| {
        let spec = cfg.grid;
        let v = build_field(fs, fs.construction, *lam, &spec, &s.op, &s.a_star)?;
        let astar_v = apply(&s.a_star, &without_support(v.clone()))?;
        let phi = sample(&dilated(fam, *lam), &spec, s.op.n_in)?;
        let aphi = apply(&with_radius(&s.op, *radius), &phi)?;
        let (lhs, hpa, wv) = divcurl_sides(&aphi, &v, s.r, s.p, s.q, s.m, &cfg.scales)?;
        if lhs == 0.0 && hpa * wv == 0.0 {
            return Ok(Vec::new());
        }
        let astar_q = lp_or_inf(&astar_v, s.q)?;
        let mut row = ReportRow::new(fam.label(), "augmented", *lam, lhs, hpa * (wv + astar_q));
        if let Some(r) = radius {
            row = row.with_param("radius", *r);
        }
        let plain = hpa * wv;
        let hv = hp(&v, s.q, &cfg.scales)?;
        let ha = hp(&astar_v, s.q, &cfg.scales)?;
        let cor = hpa * (hv + ha);
        row.extra.insert("rhs_plain".into(), plain);
        row.extra.insert("ratio_plain".into(), if plain > 0.0 { lhs / plain } else { 0.0 });
        row.extra.insert("adjoint_ratio".into(), if wv > 0.0 { astar_q / wv } else { 0.0 });
        row.extra.insert("hardy_rhs".into(), cor);
        row.extra.insert("hardy_ratio".into(), if cor > 0.0 { lhs / cor } else { 0.0 });
        Ok(vec![row])
    })?;
    let variation = sweep_variation(&rows);
    let excess = rows.iter().map(|r| if r.extra["ratio_plain"] > 0.0 { r.ratio / r.extra["ratio_plain"] } else { 0.0 }).fold(0.0, f64::max);
    let gates = vec![Gate::at_most("dilation_variation", variation, VARIATION_MAX), Gate::at_most("augmented_below_plain", excess, 1.0)];
    Ok(Outcome { rows, gates, header: divcurl_header(&s) })
}


/// Grid for an atom of radius r: box wide enough for the far zone, cells resolving r.
fn atom_grid(base: &GridSpec, r: f64) -> Result<(GridSpec, usize)> {
    let w = (base.box_half_width.max(16.0 * r)).log2().ceil().exp2();
    let h = base.h().min(r / 4.0);
    let cap = match base.dim {
        1 => 1 << 16,
        2 => 1024,
        _ => 128,
    };
    let n = ((2.0 * w / h).log2().ceil().exp2() as usize).clamp(32, cap);
    let spec = GridSpec::new(base.dim, w, n, base.margin)?;
    let stride = ((r / (2.0 * spec.h())).floor() as usize).clamp(1, 8);
    Ok((spec, stride))
}

fn suite_radius(k: usize, count: usize) -> f64 {
    2f64.powf(-4.0 + 5.0 * k as f64 / (count - 1) as f64)
}

/// bump(|z|^2) (1 + random quadratic in z), moments to order m - 1 removed when r < 1.
fn suite_atom(spec: &GridSpec, center: Point, r: f64, coeffs: &[(MultiIndex, f64)], p: f64, m: usize) -> (f64, crate::decomp::Atom) {
    let dim = spec.dim;
    let cells = crate::grid::ball_cells(spec, &center, r);
    let mut keep = Vec::new();
    let mut weights = Vec::new();
    let mut shape = Vec::new();
    for &i in &cells {
        let x = spec.point(i);
        let mut z = [0.0; 3];
        for d in 0..dim {
            z[d] = (x[d] - center[d]) / r;
        }
        let w = bump((0..dim).map(|d| z[d] * z[d]).sum());
        if w <= 0.0 {
            continue;
        }
        keep.push(i);
        weights.push(w);
        shape.push(C64::new(1.0 + coeffs.iter().map(|(a, c)| c * a.monomial(&z)).sum::<f64>(), 0.0));
    }
    let values: Vec<C64> = if r < 1.0 {
        let q = weighted_fit(spec, &keep, &weights, &shape, center, r, m);
        keep.iter().zip(&weights).zip(&shape).map(|((&i, w), g)| (g - q.eval(&spec.point(i))) * *w).collect()
    } else {
        weights.iter().zip(&shape).map(|(w, g)| g * *w).collect()
    };
    make_atom(spec, SparseField { cells: keep, values }, Region::Ball { center, radius: r }, p, m)
}

/// Least-squares slope of log(max T'a over annulus) against log |x| on SLOPE_START r < |x| <= W.
fn far_zone_slope(spec: &GridSpec, points: &[usize], values: &[f64], center: &Point, r: f64) -> Option<f64> {
    let dim = spec.dim;
    let top = values.iter().cloned().fold(0.0, f64::max);
    let mut bins: BTreeMap<i64, f64> = BTreeMap::new();
    let ratio: f64 = 1.2;
    let start = SLOPE_START * r;
    for (&i, &v) in points.iter().zip(values) {
        let d = dist2(&spec.point(i), center, dim).sqrt();
        if d <= start || d > spec.box_half_width {
            continue;
        }
        let k = ((d / start).ln() / ratio.ln()).floor() as i64;
        let e = bins.entry(k).or_insert(0.0);
        *e = e.max(v);
    }
    let pts: Vec<(f64, f64)> = bins
        .into_iter()
        .filter(|(_, v)| *v > FAR_ZONE_FLOOR * top)
        .map(|(k, v)| ((start * ratio.powf(k as f64 + 0.5)).ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

fn atom_uniformity_outcome(cfg: &ExperimentConfig) -> Result<Outcome> {
    let e = &cfg.exponents;
    let (p, m) = (e.need("p")?, e.need_m()?);
    let alpha = e.alpha.unwrap_or(1.0);
    let dim = cfg.grid.dim;
    let count = cfg.options.atoms;
    let np = np_exponent(p, dim)?;
    let moments = m.max(np + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shapes = MultiIndex::up_to(dim, 2).into_iter().filter(|a| a.order() > 0).collect::<Vec<_>>();
    let jobs: Vec<(usize, f64, Point, Vec<(MultiIndex, f64)>)> = (0..count)
        .map(|k| {
            let r = suite_radius(k, count);
            let mut c = [0.0; 3];
            for slot in c.iter_mut().take(dim) {
                *slot = rng.gen_range(-0.5..0.5);
            }
            let coeffs = shapes.iter().map(|a| (a.clone(), rng.gen_range(-0.5..0.5))).collect();
            (k, r, c, coeffs)
        })
        .collect();
    let rows = par_rows(&jobs, |(k, r, center, coeffs)| {
        let (spec, stride) = atom_grid(&cfg.grid, *r)?;
        let (_, atom) = suite_atom(&spec, *center, *r, coeffs, p, moments);
        let check = verify_atom(&spec, &atom, p, moments);
        let a = atom.field.to_grid(&spec);
        let b = without_support(bessel_potential(&a, m)?);
        let tf = poincare_lhs(&b, m, alpha, &cfg.scales, &PoincareOptions { stride })?;
        let cell = (stride as f64 * spec.h()).powi(dim as i32);
        let (mut near, mut far) = (0.0, 0.0);
        for (&i, &v) in tf.points.iter().zip(&tf.values) {
            let w = v.powf(p) * cell;
            if dist2(&spec.point(i), center, dim).sqrt() <= 10.0 * r {
                near += w;
            } else {
                far += w;
            }
        }
        let kind = if atom.kind == AtomKind::Rough { "rough" } else { "standard" };
        let mut row = ReportRow::new(format!("atom_{k:02}"), kind, 1.0, near + far, 1.0).with_param("radius", *r);
        for d in 0..dim {
            row = row.with_param(&format!("center_{d}"), center[d]);
        }
        row.extra.insert("near".into(), near);
        row.extra.insert("far".into(), far);
        row.extra.insert("atom_valid".into(), if check.passed() { 1.0 } else { 0.0 });
        row.extra.insert("moment_defect".into(), check.max_moment_defect);
        row.extra.insert("points_per_axis".into(), spec.points_per_axis as f64);
        row.extra.insert("box_half_width".into(), spec.box_half_width);
        if let Some(sl) = far_zone_slope(&spec, &tf.points, &tf.values, center, *r) {
            row.extra.insert("far_slope".into(), sl);
        }
        Ok(vec![row])
    })?;
    let mut totals: Vec<f64> = rows.iter().map(|r| r.lhs).collect();
    totals.sort_by(f64::total_cmp);
    let median = if totals.len() % 2 == 1 { totals[totals.len() / 2] } else { 0.5 * (totals[totals.len() / 2 - 1] + totals[totals.len() / 2]) };
    let max = totals.last().copied().unwrap_or(0.0);
    let valid = rows.iter().all(|r| r.extra["atom_valid"] == 1.0);
    let bound = -(dim as f64) / p;
    let rough_slopes: Vec<f64> = rows.iter().filter(|r| r.case == "rough").map(|r| r.extra.get("far_slope").copied().unwrap_or(f64::NAN)).collect();
    let steepest_allowed = rough_slopes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut gates = vec![
        Gate::at_most("max_over_median", if median > 0.0 { max / median } else { f64::INFINITY }, UNIFORMITY_MAX),
        Gate { name: "atoms_valid".into(), passed: valid, value: if valid { 1.0 } else { 0.0 }, threshold: 1.0 },
    ];
    if !rough_slopes.is_empty() {
        // A NaN (no measurable far zone) fails the comparison.
        gates.push(Gate { name: "rough_far_slope".into(), passed: steepest_allowed < bound, value: steepest_allowed, threshold: bound });
    }
    let header = [("p", p), ("m", m as f64), ("alpha", alpha), ("median", median), ("max", max)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    Ok(Outcome { rows, gates, header })
}


fn decomp_audit_outcome(cfg: &ExperimentConfig) -> Result<Outcome> {
    let e = &cfg.exponents;
    let (p, m) = (e.need("p")?, e.need_m()?);
    let dim = cfg.grid.dim;
    let np = np_exponent(p, dim)?;
    let jobs = family_lambda_jobs(cfg);
    let rows = par_rows(&jobs, |(fam, lam)| {
        let f = sample(&dilated(fam, *lam), &cfg.grid, 1)?;
        let label = fam.label();
        let mut rows = Vec::new();

        let split = goldberg_split(&f, np, 1.0)?;
        let mut row = ReportRow::new(label.clone(), "goldberg", *lam, split.moment_defect, MOMENT_TOL);
        row.extra.insert("reconstruction_error".into(), split.reconstruction_error);
        rows.push(row);

        let rough = rough_atoms(&split.f2, p)?;
        let f2_norm = hp(&split.f2, p, &cfg.scales)?;
        let fails = rough.iter().filter(|(_, a)| !verify_atom(&cfg.grid, a, p, 0).passed()).count();
        let mut row = ReportRow::new(label.clone(), "rough_atoms", *lam, rough.iter().map(|(c, _)| c.powf(p)).sum(), f2_norm.powf(p));
        row.extra.insert("count".into(), rough.len() as f64);
        row.extra.insert("failed_atoms".into(), fails as f64);
        rows.push(row);

        let dict = MaximalDictionary::default();
        let mf = grand_maximal(&f, &dict, &crate::decomp::cz_scales(&cfg.grid))?;
        let top = mf.values.iter().map(|v| v.re).fold(0.0, f64::max);
        let mut first = None;
        for &frac in &cfg.options.cz_fractions {
            let level = frac * top;
            let cz = cz_decompose(&f, level, m, &dict)?;
            let g_sup = cz.good_part.max_magnitude();
            let mut row = ReportRow::new(label.clone(), "cz", *lam, g_sup, level).with_param("fraction", frac);
            row.extra.insert("reconstruction_error".into(), cz.reconstruction_error);
            row.extra.insert("moment_defect".into(), cz.max_moment_defect);
            row.extra.insert("partition_error".into(), cz.partition_error);
            row.extra.insert("max_overlap".into(), cz.max_overlap as f64);
            row.extra.insert("cubes".into(), cz.cubes.len() as f64);
            rows.push(row);
            first.get_or_insert(cz);
        }
        if let Some(cz) = first {
            for &delta in &cfg.options.deltas {
                let t = truncate_bad_part(&cz, delta)?;
                let mut row = ReportRow::new(label.clone(), "truncation", *lam, t.rho_sup, f.max_magnitude()).with_param("delta", delta);
                row.extra.insert("kept".into(), t.kept as f64);
                rows.push(row);
            }
        }

        let opts = AtomicOptions { levels: cfg.options.levels, scales: cfg.scales.clone(), ..AtomicOptions::default() };
        let ad = atomic_decompose(&f, p, m, &opts)?;
        let fails = ad.atoms().filter(|(_, a)| !verify_atom(&cfg.grid, a, p, m).passed()).count();
        let worst_moment = ad.atoms().map(|(_, a)| verify_atom(&cfg.grid, a, p, m).max_moment_defect).fold(0.0, f64::max);
        let mut row = ReportRow::new(label, "atomic", *lam, ad.coeff_lp_sum, ad.source_hp_norm.powf(p));
        row.extra.insert("standard".into(), ad.standard.len() as f64);
        row.extra.insert("rough".into(), ad.rough.len() as f64);
        row.extra.insert("failed_atoms".into(), fails as f64);
        row.extra.insert("moment_defect".into(), worst_moment);
        row.extra.insert("reconstruction_error".into(), ad.reconstruction_error);
        row.extra.insert("residual_seminorm".into(), ad.residual_seminorm);
        rows.push(row);
        Ok(rows)
    })?;
    let max_extra = |case: &str, key: &str| rows.iter().filter(|r| r.case == case).filter_map(|r| r.extra.get(key)).cloned().fold(0.0, f64::max);
    let recon = ["goldberg", "cz", "atomic"].iter().map(|c| max_extra(c, "reconstruction_error")).fold(0.0, f64::max);
    let moments = max_extra("cz", "moment_defect").max(max_extra("atomic", "moment_defect"));
    let goldberg = rows.iter().filter(|r| r.case == "goldberg").map(|r| r.lhs).fold(0.0, f64::max);
    let failed = max_extra("rough_atoms", "failed_atoms") + max_extra("atomic", "failed_atoms");
    let good = rows.iter().filter(|r| r.case == "cz").map(|r| r.ratio).fold(0.0, f64::max);
    // rho_sup must not grow as delta shrinks.
    let mut by_family: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.case == "truncation") {
        by_family.entry(format!("{}|{}", r.family, r.lambda)).or_default().push((r.params["delta"], r.lhs));
    }
    let mut trend_ok = true;
    for list in by_family.values_mut() {
        list.sort_by(|a, b| b.0.total_cmp(&a.0));
        trend_ok &= list.windows(2).all(|w| w[1].1 <= w[0].1 * (1.0 + 1e-12));
    }
    let gates = vec![
        Gate::at_most("reconstruction", recon, RECONSTRUCTION_TOL),
        Gate::at_most("moment_defects", moments, MOMENT_TOL),
        Gate::at_most("mollifier_moments", goldberg, MOMENT_TOL),
        Gate::at_most("failed_atoms", failed, 0.0),
        Gate::at_most("good_constant", good, GOOD_CONSTANT_BOUND),
        Gate { name: "truncation_trend".into(), passed: trend_ok, value: if trend_ok { 1.0 } else { 0.0 }, threshold: 1.0 },
    ];
    let header = [("p", p), ("m", m as f64), ("n_p", np as f64)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    Ok(Outcome { rows, gates, header })
}

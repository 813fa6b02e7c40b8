//! Command-line front end. Every subcommand reads a JSON config, writes CSV/JSON (and
//! binary fields where relevant) into the output directory and prints one summary line.
//!
//! Exit codes: 0 success, 1 internal error, 2 failed property gate, 3 invalid config.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::decomp::{atomic_decompose, cz_decompose, verify_atom, AtomicOptions, Region};
use crate::error::{Error, Result};
use crate::experiments::{apply_override, run, run_audited, ExperimentConfig, ExperimentKind, ExperimentReport};
use crate::grid::{lp_or_inf, sample, GridSpec, Profile, TestFamily};
use crate::io::{write_atomic, write_field};
use crate::norms::{
    bmo_norm, fractional_maximal, grand_maximal, hardy_sobolev_norm, hl_maximal, holder_seminorm, hp_norm, small_maximal, sobolev_norm,
    MaximalDictionary, ScaleSet,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_GATE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "hardy-lab", version, about = "Local Hardy space numerics and inequality experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// A single norm of a sampled family.
    Norm(Common),
    /// A maximal function of a sampled family, written as a binary field.
    Maximal(Common),
    /// Atomic decomposition of a sampled family.
    Decompose(Common),
    /// Calderon-Zygmund decomposition at one level.
    Cz(Common),
    /// Poincare experiment.
    Poincare(Common),
    /// Div-curl experiment (divcurl_A or divcurl_B).
    Divcurl(Common),
    /// Any experiment config.
    Run(Common),
    /// Any experiment config, rerun at one higher resolution to record drift.
    Audit(Common),
    /// Concatenates experiment report JSONs into one summary table.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
    /// Rerun at one higher resolution and gate the drift.
    #[arg(long)]
    pub audit: bool,
    /// Replaces grid.points_per_axis.
    #[arg(long)]
    pub resolution_override: Option<usize>,
    /// Replaces the experiment seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted-path override, e.g. `--set exponents.q=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    /// Report JSON files written by experiment runs.
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::InvalidGrid(_) | Error::UnknownFamily(_) => EXIT_CONFIG,
        Error::NotElliptic(_) | Error::KernelConstraintViolated(_) => EXIT_GATE,
        _ => EXIT_INTERNAL,
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Norm(c) => single(c, norm),
        Command::Maximal(c) => single(c, maximal),
        Command::Decompose(c) => single(c, decompose),
        Command::Cz(c) => single(c, cz),
        Command::Poincare(c) => experiment(c, Some(&[ExperimentKind::Poincare]), c.audit),
        Command::Divcurl(c) => experiment(c, Some(&[ExperimentKind::DivcurlA, ExperimentKind::DivcurlB]), c.audit),
        Command::Run(c) => experiment(c, None, c.audit),
        Command::Audit(c) => experiment(c, None, true),
        Command::Report(r) => report(r),
    }
}

/// Config text as a JSON tree with the command-line overrides applied.
fn load_tree(c: &Common, experiment: bool) -> Result<Value> {
    let text = fs::read_to_string(&c.config).map_err(|e| Error::Config(format!("cannot read {}: {e}", c.config.display())))?;
    let mut tree: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
    if let Some(n) = c.resolution_override {
        apply_override(&mut tree, "grid.points_per_axis", &n.to_string())?;
    }
    if let Some(s) = c.seed {
        if !experiment {
            return Err(Error::Config("--seed applies to experiment configs only".into()));
        }
        apply_override(&mut tree, "seed", &s.to_string())?;
    }
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        apply_override(&mut tree, k, v)?;
    }
    Ok(tree)
}

fn stem(c: &Common) -> String {
    c.config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

/// Marks the run as in progress; removed once every output is in place.
struct Pending(PathBuf);

impl Pending {
    fn start(dir: &Path, stem: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let p = dir.join(format!("{stem}.partial"));
        fs::write(&p, b"running\n")?;
        Ok(Pending(p))
    }

    fn finish(self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn experiment(c: &Common, allowed: Option<&[ExperimentKind]>, audit: bool) -> Result<i32> {
    let tree = load_tree(c, true)?;
    let cfg = ExperimentConfig::from_json(&tree.to_string(), &[])?;
    if let Some(kinds) = allowed {
        if !kinds.contains(&cfg.experiment) {
            let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
            return Err(Error::Config(format!("experiment `{}` not accepted here (expected {})", cfg.experiment.name(), names.join(" or "))));
        }
    }
    let stem = stem(c);
    let pending = Pending::start(&c.output_dir, &stem)?;
    let rep = if audit { run_audited(&cfg)? } else { run(&cfg)? };
    write_report(&c.output_dir, &stem, &rep)?;
    pending.finish();
    println!("{}", rep.summary_line());
    Ok(if rep.passed() { EXIT_OK } else { EXIT_GATE })
}

pub fn write_report(dir: &Path, stem: &str, rep: &ExperimentReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(format!("{stem}.csv")), rep.to_csv()?.as_bytes())?;
    write_atomic(&dir.join(format!("{stem}.json")), rep.to_json()?.as_bytes())
}

fn single(c: &Common, f: fn(&Value, &Path, &str) -> Result<Value>) -> Result<i32> {
    if c.audit {
        return Err(Error::Config("--audit applies to experiment subcommands".into()));
    }
    let tree = load_tree(c, false)?;
    let stem = stem(c);
    let pending = Pending::start(&c.output_dir, &stem)?;
    let out = f(&tree, &c.output_dir, &stem)?;
    let text = serde_json::to_string_pretty(&out)? + "\n";
    write_atomic(&c.output_dir.join(format!("{stem}.json")), text.as_bytes())?;
    pending.finish();
    println!("{}", serde_json::to_string(&out)?);
    Ok(EXIT_OK)
}

fn parse<T: for<'de> Deserialize<'de>>(tree: &Value) -> Result<T> {
    serde_json::from_value(tree.clone()).map_err(|e| Error::Config(e.to_string()))
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Hp,
    Lp,
    HardySobolev,
    Sobolev,
    Holder,
    Bmo,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormConfig {
    pub grid: GridSpec,
    pub family: TestFamily,
    #[serde(default = "one_usize")]
    pub channels: usize,
    #[serde(default = "one")]
    pub dilation: f64,
    pub norm: NormKind,
    /// Exponent: p for hp / lp / hardy_sobolev, q for sobolev, r for holder.
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub homogeneous: bool,
    #[serde(default)]
    pub scales: ScaleSet,
}

fn need<T: Copy>(v: Option<T>, key: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("{key} required")))
}

fn sampled(grid: &GridSpec, family: &TestFamily, dilation: f64, channels: usize) -> Result<crate::grid::GridFunction> {
    grid.validate().map_err(|e| Error::Config(format!("grid: {e}")))?;
    let fam = if dilation == 1.0 { family.clone() } else { TestFamily::dilated(family.clone(), dilation) };
    sample(&fam, grid, channels)
}

fn norm(tree: &Value, _dir: &Path, _stem: &str) -> Result<Value> {
    let cfg: NormConfig = parse(tree)?;
    let f = sampled(&cfg.grid, &cfg.family, cfg.dilation, cfg.channels)?;
    let (key, value) = match cfg.norm {
        NormKind::Hp => ("hp_norm", hp_norm(&f, need(cfg.p, "p")?, &Profile::Bump, &cfg.scales)?),
        NormKind::Lp => ("lp_norm", lp_or_inf(&f, need(cfg.p, "p")?)?),
        NormKind::HardySobolev => {
            ("hardy_sobolev_norm", hardy_sobolev_norm(&f, need(cfg.m, "m")?, need(cfg.p, "p")?, &Profile::Bump, &cfg.scales, cfg.homogeneous)?)
        }
        NormKind::Sobolev => ("sobolev_norm", sobolev_norm(&f, need(cfg.m, "m")?, need(cfg.p, "p")?)?),
        NormKind::Holder => ("holder_seminorm", holder_seminorm(&f, need(cfg.p, "p")?)?),
        NormKind::Bmo => ("bmo_norm", bmo_norm(&f)?),
    };
    Ok(json!({ key: value }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaximalKind {
    Small,
    Grand,
    HardyLittlewood,
    Fractional,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaximalConfig {
    pub grid: GridSpec,
    pub family: TestFamily,
    #[serde(default = "one_usize")]
    pub channels: usize,
    #[serde(default = "one")]
    pub dilation: f64,
    pub kind: MaximalKind,
    #[serde(default = "default_profile")]
    pub profile: Profile,
    #[serde(default)]
    pub dictionary: MaximalDictionary,
    #[serde(default)]
    pub scales: ScaleSet,
    #[serde(default)]
    pub q: Option<f64>,
}

fn default_profile() -> Profile {
    Profile::Bump
}

fn maximal(tree: &Value, dir: &Path, stem: &str) -> Result<Value> {
    let cfg: MaximalConfig = parse(tree)?;
    let f = sampled(&cfg.grid, &cfg.family, cfg.dilation, cfg.channels)?;
    let m = match cfg.kind {
        MaximalKind::Small => small_maximal(&f, &cfg.profile, &cfg.scales)?,
        MaximalKind::Grand => grand_maximal(&f, &cfg.dictionary, &cfg.scales)?,
        MaximalKind::HardyLittlewood => hl_maximal(&f),
        MaximalKind::Fractional => fractional_maximal(&f, need(cfg.q, "q")?)?,
    };
    let path = dir.join(format!("{stem}.field"));
    write_field(&path, &m)?;
    Ok(json!({ "max": m.max_magnitude(), "l1": crate::grid::lp_norm(&m, 1.0)?, "field": path.file_name().map(|s| s.to_string_lossy().into_owned()) }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeConfig {
    pub grid: GridSpec,
    pub family: TestFamily,
    #[serde(default = "one")]
    pub dilation: f64,
    pub p: f64,
    pub m: usize,
    #[serde(default)]
    pub options: AtomicOptions,
}

fn region_json(r: &Region) -> Value {
    serde_json::to_value(r).unwrap_or(Value::Null)
}

fn decompose(tree: &Value, dir: &Path, stem: &str) -> Result<Value> {
    let cfg: DecomposeConfig = parse(tree)?;
    let f = sampled(&cfg.grid, &cfg.family, cfg.dilation, 1)?;
    let ad = atomic_decompose(&f, cfg.p, cfg.m, &cfg.options)?;
    let atoms: Vec<Value> = ad
        .atoms()
        .map(|(c, a)| {
            let check = verify_atom(&f.spec, a, cfg.p, cfg.m);
            json!({ "coefficient": c, "kind": a.kind, "region": region_json(&a.region), "cells": a.field.cells.len(), "check": check })
        })
        .collect();
    let path = dir.join(format!("{stem}.residual.field"));
    write_field(&path, &ad.residual)?;
    Ok(json!({
        "p": ad.p,
        "m": ad.m,
        "standard_atoms": ad.standard.len(),
        "rough_atoms": ad.rough.len(),
        "coeff_lp_sum": ad.coeff_lp_sum,
        "source_hp_norm": ad.source_hp_norm,
        "coefficient_ratio": ad.coefficient_ratio(),
        "reconstruction_error": ad.reconstruction_error,
        "residual_sup": ad.residual_sup,
        "residual_seminorm": ad.residual_seminorm,
        "thresholds": ad.thresholds,
        "ladder_seminorms": ad.ladder_seminorms,
        "atoms": atoms,
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CzConfig {
    pub grid: GridSpec,
    pub family: TestFamily,
    #[serde(default = "one")]
    pub dilation: f64,
    /// Absolute level; exclusive with `level_fraction`.
    #[serde(default)]
    pub level: Option<f64>,
    /// Level as a fraction of max M f.
    #[serde(default)]
    pub level_fraction: Option<f64>,
    pub m: usize,
    #[serde(default)]
    pub dictionary: MaximalDictionary,
}

fn cz(tree: &Value, dir: &Path, stem: &str) -> Result<Value> {
    let cfg: CzConfig = parse(tree)?;
    let f = sampled(&cfg.grid, &cfg.family, cfg.dilation, 1)?;
    let level = match (cfg.level, cfg.level_fraction) {
        (Some(l), None) => l,
        (None, Some(frac)) => {
            let mf = grand_maximal(&f, &cfg.dictionary, &crate::decomp::cz_scales(&f.spec))?;
            frac * mf.values.iter().map(|v| v.re).fold(0.0, f64::max)
        }
        _ => return Err(Error::Config("exactly one of level, level_fraction required".into())),
    };
    let d = cz_decompose(&f, level, cfg.m, &cfg.dictionary)?;
    write_field(&dir.join(format!("{stem}.good.field")), &d.good_part)?;
    write_field(&dir.join(format!("{stem}.bad.field")), &d.bad_sum())?;
    let cubes: Vec<Value> = d.cubes.iter().map(|q| json!({ "center": &q.center[..f.spec.dim], "side": q.side })).collect();
    Ok(json!({
        "level": d.level,
        "m": d.m,
        "cubes": cubes,
        "max_overlap": d.max_overlap,
        "partition_error": d.partition_error,
        "reconstruction_error": d.reconstruction_error,
        "max_moment_defect": d.max_moment_defect,
        "good_constant": d.good_constant,
    }))
}

fn report(r: &ReportArgs) -> Result<i32> {
    if r.inputs.is_empty() {
        return Err(Error::Config("report needs at least one report JSON".into()));
    }
    let mut table = Vec::new();
    let mut all_passed = true;
    for path in &r.inputs {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let rep: ExperimentReport = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        all_passed &= rep.passed();
        let failed: Vec<String> = rep.failed_gates().iter().map(|g| g.name.clone()).collect();
        table.push(json!({
            "source": path.file_name().map(|s| s.to_string_lossy().into_owned()),
            "experiment": rep.environment.experiment,
            "points_per_axis": rep.environment.grid.points_per_axis,
            "rows": rep.rows.len(),
            "min_ratio": rep.summary.min_ratio,
            "max_ratio": rep.summary.max_ratio,
            "variation": rep.summary.variation,
            "drift": rep.summary.drift,
            "passed": rep.passed(),
            "failed_gates": failed.join(";"),
        }));
    }
    fs::create_dir_all(&r.output_dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let cols = ["source", "experiment", "points_per_axis", "rows", "min_ratio", "max_ratio", "variation", "drift", "passed", "failed_gates"];
    let io_err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(cols).map_err(io_err)?;
    for row in &table {
        let rec: Vec<String> = cols
            .iter()
            .map(|c| match &row[*c] {
                Value::String(s) => s.clone(),
                Value::Null => String::new(),
                v => v.to_string(),
            })
            .collect();
        w.write_record(&rec).map_err(io_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    write_atomic(&r.output_dir.join("report.csv"), &bytes)?;
    let text = serde_json::to_string_pretty(&Value::Array(table))? + "\n";
    write_atomic(&r.output_dir.join("report.json"), text.as_bytes())?;
    println!("report: {} runs, {}", r.inputs.len(), if all_passed { "all gates passed" } else { "some gates FAILED" });
    Ok(if all_passed { EXIT_OK } else { EXIT_GATE })
}


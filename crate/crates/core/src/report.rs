//! Experiment configuration, command runner and JSON reports.
//!
//! A config is a TOML file naming a manifold (catalog entry or user file),
//! a top-level seed, and one optional table per command. Every randomized
//! step takes its seed from the top-level one, so a resolved config fully
//! determines a report apart from its timestamp.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ambient::SpaceKind;
use crate::bundle::{
    build_leaf_chart, classify_fiber_action, holonomy_sample, horizontal_lift, local_holonomy_probe, ClassifyOptions,
    HolonomyRecord, LiftOptions, LoopConfig, ParamCurve,
};
use crate::connectivity::{
    bracket_generation, cc_distance_estimate, connect_horizontal, equivalence_class_probe, integrate_controls, ClassKind,
    ConnectConfig, ConnectionStatus, FourierControls, NullityDistribution, ProbeConfig,
};
use crate::error::{Error, Result};
use crate::immersion::{load_immersion_file, lookup, make_h3_counterexample, make_h3_matrix, ChartedImmersion, ParamBox};
use crate::linalg::fitted_order;
use crate::nullity::{autoparallel_residual, gauss_kernel_crosscheck, index_scan, leaf_geodesic_check, nullity_at, DEFAULT_TAU, MIN_GAP};
use crate::shape::{mean_curvature_and_gauss, ShapeData};
use crate::tubes::{build_tube, holonomy_tube_reachability, nullity_projection_check, sigma_star_projection, tube_shape};

/// The commands of the runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Analyze,
    Leafcheck,
    Lift,
    Holonomy,
    Connect,
    Classprobe,
    Tube,
    Counterexample,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Analyze,
        Command::Leafcheck,
        Command::Lift,
        Command::Holonomy,
        Command::Connect,
        Command::Classprobe,
        Command::Tube,
        Command::Counterexample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Leafcheck => "leafcheck",
            Command::Lift => "lift",
            Command::Holonomy => "holonomy",
            Command::Connect => "connect",
            Command::Classprobe => "classprobe",
            Command::Tube => "tube",
            Command::Counterexample => "counterexample",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Grid points per axis for the index scan.
    pub grid: usize,
    /// Scan box; defaults to the evaluation box clipped to `[-3, 3]`.
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    /// Points with detailed shape output (default: the scan-box centre).
    pub points: Vec<Vec<f64>>,
    pub tau: f64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            grid: 21,
            lower: None,
            upper: None,
            points: Vec::new(),
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeafcheckConfig {
    pub points: Vec<Vec<f64>>,
    /// Direction inside the nullity (parameter coordinates); default: first basis vector.
    pub direction: Option<Vec<f64>>,
    pub s_max: f64,
    pub steps: usize,
    /// Finite-difference steps for the autoparallel residual.
    pub h: Vec<f64>,
    pub tolerance: f64,
    pub tau: f64,
}

impl Default for LeafcheckConfig {
    fn default() -> Self {
        Self {
            points: Vec::new(),
            direction: None,
            s_max: 1.0,
            steps: 100,
            h: vec![1e-2, 5e-3, 2.5e-3],
            tolerance: 1e-6,
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiftConfig {
    /// The base curve is the parameter segment `start → end`.
    pub start: Option<Vec<f64>>,
    pub end: Option<Vec<f64>>,
    /// Start of the lift (parameter point on the leaf of `start`).
    pub q: Option<Vec<f64>>,
    pub steps: usize,
    pub tolerance: f64,
    pub tau: f64,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            start: None,
            end: None,
            q: None,
            steps: 1000,
            tolerance: 1e-6,
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HolonomyConfig {
    pub center: Option<Vec<f64>>,
    pub chart_radius: f64,
    pub loops: LoopConfig,
    pub classify: ClassifyOptions,
    /// Fiber point for the orbit analysis, in fiber coordinates.
    pub fiber_point: Option<Vec<f64>>,
    /// Loop radii for the local holonomy probe.
    pub local_radii: Vec<f64>,
    pub local_count: usize,
}

impl Default for HolonomyConfig {
    fn default() -> Self {
        Self {
            center: None,
            chart_radius: 0.3,
            loops: LoopConfig::default(),
            classify: ClassifyOptions::default(),
            fiber_point: None,
            local_radii: vec![0.2, 0.1, 0.05],
            local_count: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectSection {
    pub p: Option<Vec<f64>>,
    pub q: Option<Vec<f64>>,
    pub solver: ConnectConfig,
    /// Also estimate the Carnot–Carathéodory length.
    pub cc: bool,
}

impl Default for ConnectSection {
    fn default() -> Self {
        Self {
            p: None,
            q: None,
            solver: ConnectConfig::default(),
            cc: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassprobeConfig {
    pub point: Option<Vec<f64>>,
    /// Half-width of the parameter box `U`.
    pub half_width: f64,
    pub probe: ProbeConfig,
    /// Reached points re-confirmed by the connection solver.
    pub confirm: usize,
    pub confirm_tol: f64,
    pub bracket_depth: usize,
}

impl Default for ClassprobeConfig {
    fn default() -> Self {
        Self {
            point: None,
            half_width: 0.5,
            probe: ProbeConfig::default(),
            confirm: 3,
            confirm_tol: 1e-5,
            bracket_depth: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TubeConfig {
    pub eps: f64,
    /// Random tube points for the shape checks.
    pub samples: usize,
    /// Point for the reachability and `Σ*` checks (tube parameters).
    pub reach_point: Option<Vec<f64>>,
    pub half_width: f64,
    pub probe: ProbeConfig,
    pub sigma_span: f64,
    pub tolerance: f64,
}

impl Default for TubeConfig {
    fn default() -> Self {
        Self {
            eps: 0.5,
            samples: 100,
            reach_point: None,
            half_width: 0.5,
            probe: ProbeConfig::default(),
            sigma_span: 0.3,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterexampleConfig {
    pub v: [f64; 3],
    pub w: [f64; 3],
    pub c: f64,
    pub grid: usize,
    /// The grid covers `[-extent, extent]²`.
    pub extent: f64,
    /// Horizontal curves are followed over `t ∈ [-t_extent, t_extent]`.
    pub t_extent: f64,
    pub s_values: Vec<f64>,
    pub curve_steps: usize,
    pub solver: ConnectConfig,
    pub tolerance: f64,
}

impl Default for CounterexampleConfig {
    fn default() -> Self {
        Self {
            v: [1.0, 0.0, 0.0],
            w: [0.0, 1.0, 0.0],
            c: 1.0,
            grid: 21,
            extent: 3.0,
            t_extent: 5.0,
            s_values: vec![-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0],
            curve_steps: 400,
            solver: ConnectConfig::default(),
            tolerance: 1e-6,
        }
    }
}

/// Full experiment description.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Catalog name.
    pub manifold: Option<String>,
    /// User immersion file (relative paths are resolved against the config file).
    pub manifold_file: Option<PathBuf>,
    /// Single source of randomness; copied into every randomized step.
    pub seed: u64,
    pub analyze: AnalyzeConfig,
    pub leafcheck: LeafcheckConfig,
    pub lift: LiftConfig,
    pub holonomy: HolonomyConfig,
    pub connect: ConnectSection,
    pub classprobe: ClassprobeConfig,
    pub tube: TubeConfig,
    pub counterexample: CounterexampleConfig,
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read a config file; a relative `manifold_file` is made relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&src)?;
        if let (Some(f), Some(dir)) = (&cfg.manifold_file, path.parent()) {
            if f.is_relative() {
                cfg.manifold_file = Some(dir.join(f));
            }
        }
        Ok(cfg)
    }

    /// Copy the top-level seed into every randomized step.
    pub fn resolved(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        let s = self.seed;
        self.holonomy.loops.seed = s;
        self.connect.solver.seed = s;
        self.classprobe.probe.seed = s;
        self.tube.probe.seed = s;
        self.counterexample.solver.seed = s;
        self
    }

    pub fn immersion(&self) -> Result<ChartedImmersion> {
        match (&self.manifold, &self.manifold_file) {
            (Some(name), None) => lookup(name),
            (None, Some(path)) => load_immersion_file(path),
            (Some(_), Some(_)) => Err(Error::Config("give either `manifold` or `manifold_file`, not both".into())),
            (None, None) => Err(Error::Config("no manifold given".into())),
        }
    }
}

/// One pass/fail line of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// `"<"`, `"<="`, `">="` or `"=="`.
    pub relation: String,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    pub fn below(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            relation: "<".into(),
            bound,
            pass: value < bound,
        }
    }

    pub fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            relation: "<=".into(),
            bound,
            pass: value <= bound,
        }
    }

    pub fn at_least(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            relation: ">=".into(),
            bound,
            pass: value >= bound,
        }
    }

    pub fn equal(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            relation: "==".into(),
            bound,
            pass: value == bound,
        }
    }

    pub fn flag(name: &str, ok: bool) -> Self {
        Self::equal(name, if ok { 1.0 } else { 0.0 }, 1.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub tool: String,
    pub version: String,
    pub command: Command,
    /// Seconds since the Unix epoch; the only field that varies between
    /// identical runs.
    pub timestamp: u64,
    pub config: ExperimentConfig,
    pub results: Value,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub side_files: Vec<String>,
}

/// Everything a run produces; nothing is written until [`RunOutput::write`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    /// `(file name, contents)` of CSV/JSON side files.
    pub side_files: Vec<(String, String)>,
    pub connection_failed: bool,
}

/// Exit status: all checks passed.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECKS_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FAILED_CONNECTION: i32 = 3;
pub const EXIT_MODULE_ERROR: i32 = 4;

impl RunOutput {
    pub fn exit_code(&self) -> i32 {
        if self.connection_failed {
            EXIT_FAILED_CONNECTION
        } else if self.report.passed {
            EXIT_OK
        } else {
            EXIT_CHECKS_FAILED
        }
    }

    /// Report JSON with the timestamp field zeroed, for comparisons.
    pub fn canonical_json(&self) -> String {
        let mut r = self.report.clone();
        r.timestamp = 0;
        serde_json::to_string_pretty(&r).expect("report serializes")
    }

    /// Write `<command>.json` and the side files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        for (name, contents) in &self.side_files {
            std::fs::write(dir.join(name), contents)?;
        }
        let path = dir.join(format!("{}.json", self.report.command));
        let json = serde_json::to_string_pretty(&self.report).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(&path, json + "\n")?;
        Ok(path)
    }
}

pub fn exit_code_for_error(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Expression(_) | Error::UnknownManifold(_) => EXIT_CONFIG,
        _ => EXIT_MODULE_ERROR,
    }
}

struct Outcome {
    results: Value,
    checks: Vec<Check>,
    side_files: Vec<(String, String)>,
    connection_failed: bool,
}

impl Outcome {
    fn new(results: Value, checks: Vec<Check>) -> Self {
        Self {
            results,
            checks,
            side_files: Vec::new(),
            connection_failed: false,
        }
    }
}

/// Run one command on a config; `seed` overrides the config's seed.
pub fn run(command: Command, config: &ExperimentConfig, seed: Option<u64>) -> Result<RunOutput> {
    let cfg = config.clone().resolved(seed);
    let out = match command {
        Command::Counterexample => run_counterexample(&cfg.counterexample)?,
        _ => {
            let imm = cfg.immersion()?;
            match command {
                Command::Analyze => run_analyze(&imm, &cfg.analyze)?,
                Command::Leafcheck => run_leafcheck(&imm, &cfg.leafcheck)?,
                Command::Lift => run_lift(&imm, &cfg.lift)?,
                Command::Holonomy => run_holonomy(&imm, &cfg.holonomy)?,
                Command::Connect => run_connect(&imm, &cfg.connect)?,
                Command::Classprobe => run_classprobe(&imm, &cfg.classprobe)?,
                Command::Tube => run_tube(&imm, &cfg.tube, cfg.seed)?,
                Command::Counterexample => unreachable!(),
            }
        }
    };
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let passed = out.checks.iter().all(|c| c.pass);
    Ok(RunOutput {
        report: Report {
            tool: "nullity-lab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            timestamp,
            config: cfg,
            results: out.results,
            checks: out.checks,
            passed,
            side_files: out.side_files.iter().map(|(n, _)| n.clone()).collect(),
        },
        side_files: out.side_files,
        connection_failed: out.connection_failed,
    })
}

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn vecs(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn param(v: &[f64], imm: &ChartedImmersion, what: &str) -> Result<DVector<f64>> {
    if v.len() != imm.param_dim {
        return Err(Error::Config(format!(
            "{what} has {} coordinates, `{}` has {} parameters",
            v.len(),
            imm.name,
            imm.param_dim
        )));
    }
    Ok(dv(v))
}

/// Evaluation box clipped to `[-half, half]` per axis.
fn clipped_box(imm: &ChartedImmersion, half: f64) -> ParamBox {
    ParamBox::new(
        imm.eval_box.lower.iter().map(|x| x.max(-half)).collect(),
        imm.eval_box.upper.iter().map(|x| x.min(half)).collect(),
    )
}

/// Default base point: centre of the clipped evaluation box.
pub fn default_point(imm: &ChartedImmersion) -> DVector<f64> {
    let b = clipped_box(imm, 3.0);
    DVector::from_iterator(imm.param_dim, b.lower.iter().zip(&b.upper).map(|(a, c)| 0.5 * (a + c)))
}

fn csv_string<F>(f: F) -> Result<String>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
}

fn run_analyze(imm: &ChartedImmersion, cfg: &AnalyzeConfig) -> Result<Outcome> {
    let default = clipped_box(imm, 3.0);
    let bbox = ParamBox::new(
        cfg.lower.clone().unwrap_or(default.lower),
        cfg.upper.clone().unwrap_or(default.upper),
    );
    if bbox.dim() != imm.param_dim {
        return Err(Error::Config("analyze box has the wrong dimension".into()));
    }
    let scan = index_scan(imm, &bbox, cfg.grid, cfg.tau);
    let points: Vec<DVector<f64>> = if cfg.points.is_empty() {
        vec![default_point(imm)]
    } else {
        cfg.points.iter().map(|p| param(p, imm, "analyze point")).collect::<Result<_>>()?
    };
    let mut details = Vec::new();
    let mut asym: f64 = 0.0;
    let mut normal: f64 = 0.0;
    let mut gauss_kernel: f64 = 0.0;
    for u in &points {
        let (shape, data) = nullity_at(imm, u, cfg.tau)?;
        asym = asym.max(shape.alpha_asymmetry());
        normal = normal.max(shape.normal_defect());
        let curvature = mean_curvature_and_gauss(&shape).ok().map(|(h, k)| json!({"mean_curvature": vecs(&h), "gauss": k}));
        let kernel = if imm.space.kind == SpaceKind::Euclidean {
            let g = gauss_kernel_crosscheck(imm, u, cfg.tau)?;
            gauss_kernel = gauss_kernel.max(g.nullity_max);
            Some(g)
        } else {
            None
        };
        let ops: Vec<Vec<Vec<f64>>> = shape
            .ortho_shape_ops
            .iter()
            .map(|a| (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect())
            .collect();
        details.push(json!({
            "param": vecs(u),
            "mu": data.mu,
            "gap": data.gap.min(crate::nullity::GAP_CAP),
            "singular_values": data.singular_values,
            "nullity_basis": data.basis_param.iter().map(vecs).collect::<Vec<_>>(),
            "ortho_shape_operators": ops,
            "curvature": curvature,
            "gauss_map_kernel": kernel,
        }));
    }
    let mut checks = vec![
        Check::flag("index_constant", scan.is_constant()),
        Check::equal("ambiguous_points", scan.ambiguous.len() as f64, 0.0),
        Check::equal("failed_points", scan.failed.len() as f64, 0.0),
        Check::below("alpha_asymmetry", asym, 1e-8),
        Check::below("normal_frame_defect", normal, 1e-8),
    ];
    if imm.space.kind == SpaceKind::Euclidean {
        checks.push(Check::below("gauss_map_along_nullity", gauss_kernel, 1e-6));
    }
    let results = json!({
        "manifold": imm.name,
        "distinct_mu": scan.distinct_mu(),
        "components": scan.components.iter().map(|c| json!({"mu": c.mu, "size": c.size})).collect::<Vec<_>>(),
        "min_gap": scan.min_gap().min(crate::nullity::GAP_CAP),
        "box": {"lower": bbox.lower, "upper": bbox.upper, "per_axis": cfg.grid},
        "points": details,
    });
    let mut out = Outcome::new(results, checks);
    out.side_files.push(("index_scan.csv".into(), csv_string(|b| scan.write_csv(b))?));
    Ok(out)
}

fn run_leafcheck(imm: &ChartedImmersion, cfg: &LeafcheckConfig) -> Result<Outcome> {
    let points: Vec<DVector<f64>> = if cfg.points.is_empty() {
        vec![default_point(imm)]
    } else {
        cfg.points.iter().map(|p| param(p, imm, "leafcheck point")).collect::<Result<_>>()?
    };
    let direction = cfg.direction.as_ref().map(|d| param(d, imm, "leafcheck direction")).transpose()?;
    let mut per_point = Vec::new();
    let mut worst_auto: f64 = 0.0;
    let mut worst_leaf: f64 = 0.0;
    let mut unexpected_exits = 0;
    for u in &points {
        let residuals: Vec<f64> = cfg
            .h
            .iter()
            .map(|&h| autoparallel_residual(imm, u, h, cfg.tau))
            .collect::<Result<_>>()?;
        let order = (residuals.len() >= 2 && residuals.iter().all(|r| *r > 0.0)).then(|| fitted_order(&cfg.h, &residuals));
        let finest = cfg
            .h
            .iter()
            .zip(&residuals)
            .min_by(|a, b| a.0.total_cmp(b.0))
            .map_or(0.0, |(_, r)| *r);
        worst_auto = worst_auto.max(finest);
        let leaf = leaf_geodesic_check(imm, u, direction.as_ref(), cfg.s_max, cfg.steps, cfg.tau)?;
        worst_leaf = worst_leaf.max(leaf.max_residual);
        // leaving the chart is allowed; stopping inside it is not, unless
        // the manifold is flagged incomplete
        if let Some(exit) = &leaf.exit {
            if !imm.incomplete && !near_box_edge(&imm.eval_box, &exit.last_param, 0.02) {
                unexpected_exits += 1;
            }
        }
        per_point.push(json!({
            "param": vecs(u),
            "autoparallel": {"h": cfg.h, "residual": residuals, "fitted_order": order},
            "leaf_geodesic": leaf,
        }));
    }
    let checks = vec![
        Check::below("autoparallel_residual", worst_auto, cfg.tolerance),
        Check::below("leaf_geodesic_residual", worst_leaf, cfg.tolerance),
        Check::equal("interior_leaf_exits", unexpected_exits as f64, 0.0),
    ];
    Ok(Outcome::new(json!({"manifold": imm.name, "points": per_point}), checks))
}

/// Within `frac` of the box width from some face.
fn near_box_edge(b: &ParamBox, x: &[f64], frac: f64) -> bool {
    x.iter().enumerate().any(|(i, &v)| {
        let w = b.upper[i] - b.lower[i];
        w.is_finite() && (v - b.lower[i] < frac * w || b.upper[i] - v < frac * w)
    })
}

fn run_lift(imm: &ChartedImmersion, cfg: &LiftConfig) -> Result<Outcome> {
    let start = match &cfg.start {
        Some(s) => param(s, imm, "lift.start")?,
        None => default_point(imm),
    };
    let end = match &cfg.end {
        Some(e) => param(e, imm, "lift.end")?,
        None => {
            let mut e = start.clone();
            e[0] += 1.0;
            e
        }
    };
    let q = match &cfg.q {
        Some(q) => param(q, imm, "lift.q")?,
        None => start.clone(),
    };
    let opts = LiftOptions {
        steps: cfg.steps,
        tau: cfg.tau,
        tolerance: cfg.tolerance,
        ..LiftOptions::default()
    };
    let path = horizontal_lift(imm, &ParamCurve::segment(start.clone(), end.clone()), &q, &opts)?;
    let verify = path.reverify(imm, cfg.tau)?;
    let checks = vec![
        Check::below("horizontality", path.horizontality_residual, cfg.tolerance),
        Check::below("reverified_horizontality", verify.stored_velocity, cfg.tolerance),
        Check::below("on_manifold", path.on_manifold_residual, cfg.tolerance),
    ];
    let results = json!({
        "manifold": imm.name,
        "base": {"start": vecs(&start), "end": vecs(&end)},
        "q": vecs(&q),
        "endpoint": vecs(&path.endpoint()),
        "end_param": path.end_param().map(|p| vecs(&p)),
        "horizontality": path.horizontality_residual,
        "on_manifold": path.on_manifold_residual,
        "unverified_nodes": path.unverified_nodes,
        "reverify": verify,
    });
    let mut out = Outcome::new(results, checks);
    out.side_files.push(("lift_path.csv".into(), csv_string(|b| path.write_csv(b))?));
    Ok(out)
}

fn default_fiber_point(kind: SpaceKind, l: usize) -> DVector<f64> {
    match kind {
        SpaceKind::Euclidean => DVector::from_element(l, 0.5),
        SpaceKind::Sphere => DVector::from_element(l + 1, 1.0 / ((l + 1) as f64).sqrt()),
        SpaceKind::Hyperbolic => {
            let mut p = DVector::from_element(l + 1, 0.5);
            p[l] = (1.0 + 0.25 * l as f64).sqrt();
            p
        }
    }
}

fn run_holonomy(imm: &ChartedImmersion, cfg: &HolonomyConfig) -> Result<Outcome> {
    let center = match &cfg.center {
        Some(c) => param(c, imm, "holonomy.center")?,
        None => default_point(imm),
    };
    let chart = build_leaf_chart(imm, &center, cfg.chart_radius, cfg.loops.tau)?;
    let sample = holonomy_sample(imm, &chart, &cfg.loops)?;
    let p = match &cfg.fiber_point {
        Some(p) => dv(p),
        None => default_fiber_point(imm.space.kind, chart.leaf_dim),
    };
    let maps: Vec<_> = sample.elements.iter().map(|e| e.map.clone()).collect();
    let orbit = match classify_fiber_action(&imm.space, &maps, &p, &cfg.classify) {
        Ok(o) => serde_json::to_value(o).expect("serializable"),
        Err(e) => json!({"error": e.to_string()}),
    };
    let local_cfg = LoopConfig {
        count: cfg.local_count,
        ..cfg.loops
    };
    let local = local_holonomy_probe(imm, &chart, &cfg.local_radii, &local_cfg)?;
    let isometry = sample.elements.iter().map(|e| e.isometry_defect).fold(0.0, f64::max);
    let closure = sample.elements.iter().map(|e| e.closure_gap).fold(0.0, f64::max);
    let checks = vec![
        Check::below("slice_defect", chart.slice_defect, crate::bundle::SLICE_TOL),
        Check::below("isometry_defect", isometry, 1e-6),
        Check::below("loop_closure", closure, 1e-9),
    ];
    let records: Vec<HolonomyRecord> = sample.elements.iter().map(|e| e.record()).collect();
    let results = json!({
        "manifold": imm.name,
        "chart": {
            "center": vecs(&chart.center),
            "leaf_dim": chart.leaf_dim,
            "transverse_axes": chart.transverse_axes,
            "slice_defect": chart.slice_defect,
        },
        "elements": records.len(),
        "failures": sample.failures,
        "fiber_point": vecs(&p),
        "orbit": orbit,
        "local_holonomy": local,
    });
    let mut out = Outcome::new(results, checks);
    out.side_files.push((
        "holonomy_elements.json".into(),
        serde_json::to_string_pretty(&records).map_err(|e| Error::Io(e.to_string()))?,
    ));
    Ok(out)
}

fn run_connect(imm: &ChartedImmersion, cfg: &ConnectSection) -> Result<Outcome> {
    let p = match &cfg.p {
        Some(p) => param(p, imm, "connect.p")?,
        None => default_point(imm),
    };
    let q = match &cfg.q {
        Some(q) => param(q, imm, "connect.q")?,
        None => return Err(Error::Config("connect.q is required".into())),
    };
    let dist = NullityDistribution {
        imm,
        tau: cfg.solver.tau,
    };
    let (connection, cc) = if cfg.cc {
        let est = cc_distance_estimate(&dist, &p, &q, &cfg.solver)?;
        let c = est.connection.clone();
        (c, Some(json!({"length": est.length, "gap": est.gap})))
    } else {
        (connect_horizontal(&dist, &p, &q, &cfg.solver)?, None)
    };
    let mut checks = Vec::new();
    let mut side_files = Vec::new();
    if let Some(path) = &connection.path {
        if connection.status == ConnectionStatus::Connected {
            let v = path.reverify(imm, cfg.solver.tau)?;
            checks.push(Check::below("reverified_horizontality", v.stored_velocity, 1e-6));
            side_files.push(("connect_path.csv".into(), csv_string(|b| path.write_csv(b))?));
        }
    }
    let results = json!({
        "manifold": imm.name,
        "status": connection.status,
        "gap": connection.gap,
        "restarts_run": connection.restarts_run,
        "best_restart": connection.best_restart,
        "restart_gaps": connection.restart_gaps,
        "controls": connection.controls,
        "cc_estimate": cc,
        "p": connection.p,
        "q": connection.q,
        "seed": connection.seed,
    });
    Ok(Outcome {
        results,
        checks,
        side_files,
        connection_failed: connection.status == ConnectionStatus::Failed,
    })
}

fn run_classprobe(imm: &ChartedImmersion, cfg: &ClassprobeConfig) -> Result<Outcome> {
    let u = match &cfg.point {
        Some(p) => param(p, imm, "classprobe.point")?,
        None => default_point(imm),
    };
    let bbox = ParamBox::new(
        u.iter().zip(&imm.eval_box.lower).map(|(x, lo)| (x - cfg.half_width).max(*lo)).collect(),
        u.iter().zip(&imm.eval_box.upper).map(|(x, hi)| (x + cfg.half_width).min(*hi)).collect(),
    );
    let dist = NullityDistribution {
        imm,
        tau: cfg.probe.tau,
    };
    let report = equivalence_class_probe(&dist, &u, &bbox, &cfg.probe)?;
    let brackets = bracket_generation(&dist, &u, cfg.bracket_depth).ok();
    let mut confirm_gap: f64 = 0.0;
    let solver = ConnectConfig {
        bbox: Some(bbox.clone()),
        seed: cfg.probe.seed,
        tau: cfg.probe.tau,
        ..ConnectConfig::default()
    };
    let mut confirmed = 0;
    for target in report.class_points.iter().take(cfg.confirm) {
        let r = connect_horizontal(&dist, &u, &dv(target), &solver)?;
        confirm_gap = confirm_gap.max(r.gap);
        confirmed += 1;
    }
    let mut checks = vec![
        Check::flag("classified", report.classification != ClassKind::Undetermined),
        Check::below("path_horizontality", report.max_horizontality, 1e-6),
    ];
    if confirmed > 0 {
        checks.push(Check::below("reach_confirmed_by_connection", confirm_gap, cfg.confirm_tol));
    }
    if let Some(f) = &report.foliation {
        checks.push(Check::flag("parallel_foliation", f.pass));
    }
    let results = json!({
        "manifold": imm.name,
        "classification": report.classification,
        "dimension": report.dimension,
        "samples": report.samples,
        "foliation": report.foliation,
        "class_points": report.class_points,
        "truncated_paths": report.truncated_paths,
        "max_horizontality": report.max_horizontality,
        "brackets": brackets,
        "confirmed_points": confirmed,
        "confirm_gap": confirm_gap,
    });
    Ok(Outcome::new(results, checks))
}

fn run_tube(imm: &ChartedImmersion, cfg: &TubeConfig, seed: u64) -> Result<Outcome> {
    let tubes = build_tube(imm, cfg.eps)?;
    let mut per_tube = Vec::new();
    let mut checks = Vec::new();
    let mut side_files = Vec::new();
    for (i, tube) in tubes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let bbox = clipped_box(&tube.immersion, PI);
        let samples: Vec<DVector<f64>> = (0..cfg.samples)
            .map(|_| DVector::from_iterator(tube.dim(), bbox.lower.iter().zip(&bbox.upper).map(|(a, b)| rng.gen_range(*a..*b))))
            .collect();
        let mut point_defect: f64 = 0.0;
        let mut normal_defect: f64 = 0.0;
        let mut fiber_defect: f64 = 0.0;
        let mut asymmetry: f64 = 0.0;
        let mut ambiguous = 0;
        let mut e0_dims = Vec::new();
        for p in &samples {
            let (d, n) = tube.point_defects(p)?;
            point_defect = point_defect.max(d);
            normal_defect = normal_defect.max(n);
            let ts = tube_shape(tube, p)?;
            if ts.ambiguous {
                ambiguous += 1;
                continue;
            }
            fiber_defect = fiber_defect.max(ts.fiber_defect);
            asymmetry = asymmetry.max(ts.asymmetry);
            e0_dims.push(ts.e0.len());
        }
        let unambiguous: Vec<DVector<f64>> = samples
            .iter()
            .filter(|p| tube_shape(tube, p).is_ok_and(|t| !t.ambiguous))
            .cloned()
            .collect();
        let projection = nullity_projection_check(tube, &unambiguous, DEFAULT_TAU)?;
        let reach_point = match &cfg.reach_point {
            Some(p) => dv(p),
            None => default_point(&tube.immersion),
        };
        let reach = holonomy_tube_reachability(tube, &reach_point, cfg.half_width, &cfg.probe)?;
        let sigma = sigma_star_projection(tube, &reach_point, &reach, cfg.sigma_span, 5, cfg.probe.min_gap);
        let tag = tube.sheet.map_or(String::new(), |s| if s > 0 { "+".into() } else { "-".into() });
        checks.push(Check::below(&format!("tube{tag}.distance_to_base"), point_defect, 1e-10));
        checks.push(Check::below(&format!("tube{tag}.normality"), normal_defect, 1e-8));
        checks.push(Check::below(&format!("tube{tag}.fiber_in_e1"), fiber_defect, cfg.tolerance));
        checks.push(Check::below(&format!("tube{tag}.nullity_in_projected_e0"), projection, cfg.tolerance));
        checks.push(Check::flag(&format!("tube{tag}.reach_dimension_consistent"), reach.consistent));
        if let Some(f) = &reach.fiber {
            checks.push(Check::below(&format!("tube{tag}.fiber_reached"), f.max_gap, cfg.tolerance));
        }
        let sigma_json = match &sigma {
            Ok(s) => {
                checks.push(Check::below(&format!("tube{tag}.sigma_star_on_base"), s.base_residual, cfg.tolerance));
                checks.push(Check::below(&format!("tube{tag}.psi_constancy"), s.psi_variation, 1e-6));
                serde_json::to_value(s).expect("serializable")
            }
            Err(e) => json!({"error": e.to_string()}),
        };
        side_files.push((format!("tube{}_reach.csv", if tag.is_empty() { String::new() } else { format!("_{}", if tag == "+" { "plus" } else { "minus" }) }), csv_string(|b| reach.write_cloud_csv(b))?));
        let mut dims = e0_dims.clone();
        dims.sort_unstable();
        dims.dedup();
        per_tube.push(json!({
            "name": tube.immersion.name,
            "sheet": tube.sheet,
            "focal_bound": tube.focal_bound,
            "samples": cfg.samples,
            "ambiguous_samples": ambiguous,
            "e0_dimensions": dims,
            "e0_dimension_constant": dims.len() <= 1,
            "max_asymmetry": asymmetry,
            "reach": {
                "point": vecs(&reach_point),
                "dimension": reach.probe.dimension,
                "samples": reach.probe.samples,
                "e0_dim": reach.e0_dim,
                "tube_dim": reach.tube_dim,
                "consistent": reach.consistent,
                "fiber": reach.fiber,
            },
            "sigma_star": sigma_json,
        }));
    }
    let mut out = Outcome::new(json!({"manifold": imm.name, "eps": cfg.eps, "tubes": per_tube}), checks);
    out.side_files = side_files;
    Ok(out)
}

/// Largest distance from `q` to the curve `t ↦ f(t, s)` for `t` in a
/// range: golden-section refinement of the best grid point.
fn distance_to_t_curve(imm: &ChartedImmersion, q: &DVector<f64>, s: f64, t_range: f64) -> Result<f64> {
    let d = |t: f64| -> Result<f64> { Ok(imm.space.distance(&imm.point(&dv(&[t, s]))?, q)) };
    let n = 400;
    let mut best = (0.0, f64::INFINITY);
    for i in 0..=n {
        let t = -t_range + 2.0 * t_range * i as f64 / n as f64;
        let v = d(t)?;
        if v < best.1 {
            best = (t, v);
        }
    }
    let h = 2.0 * t_range / n as f64;
    let (mut a, mut b) = (best.0 - h, best.0 + h);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let c = b - g * (b - a);
        let e = a + g * (b - a);
        if d(c)? < d(e)? {
            b = e;
        } else {
            a = c;
        }
    }
    Ok(d(0.5 * (a + b))?.min(best.1))
}

fn run_counterexample(cfg: &CounterexampleConfig) -> Result<Outcome> {
    let k = make_h3_matrix(cfg.v, cfg.w, cfg.c)?;
    let imm = make_h3_counterexample(&k);
    let tol = cfg.tolerance;
    let mut checks = vec![
        Check::equal("a_cubed_zero", k.cube_defect(), 0.0),
        Check::at_most("lorentz_skew", k.lorentz_skew_defect(), 1e-15),
    ];
    // index of nullity on the grid
    let bbox = ParamBox::new(vec![-cfg.extent; 2], vec![cfg.extent; 2]);
    let scan = index_scan(&imm, &bbox, cfg.grid, DEFAULT_TAU);
    let mu_ok = scan.distinct_mu() == vec![1] && scan.failed.is_empty() && scan.ambiguous.is_empty();
    checks.push(Check::flag("nullity_index_one", mu_ok));
    checks.push(Check::at_least("kernel_gap", scan.min_gap(), MIN_GAP));
    // nullity direction and curvature on the grid
    let mut angle: f64 = 0.0;
    let mut curvature: f64 = 0.0;
    for u in bbox.grid(cfg.grid) {
        let (shape, data) = nullity_at(&imm, &u, DEFAULT_TAU)?;
        let fs = &shape.tangent_frame[1];
        let n = &data.basis_ambient[0];
        let r = n - fs * (imm.space.inner(n, fs) / imm.space.inner(fs, fs));
        angle = angle.max(imm.space.norm(&r) / imm.space.norm(n));
        let (_, gauss) = mean_curvature_and_gauss(&ShapeData::at(&imm, &u)?)?;
        curvature = curvature.max((gauss + 1.0).abs());
    }
    checks.push(Check::below("nullity_direction", angle, tol));
    checks.push(Check::below("gauss_curvature", curvature, tol));
    // horizontal integral curves through (0, s) in both directions
    let dist = NullityDistribution::new(&imm);
    let tbox = ParamBox::new(vec![-cfg.t_extent, imm.eval_box.lower[1]], vec![cfg.t_extent, imm.eval_box.upper[1]]);
    let mut s_drift: f64 = 0.0;
    let mut t_reach = f64::INFINITY;
    for &s in &cfg.s_values {
        // arclength of t ↦ f(t, s) over the box, to size the control
        let n = 2000;
        let mut length: f64 = 0.0;
        let mut prev = imm.point(&dv(&[-cfg.t_extent, s]))?;
        for i in 1..=n {
            let x = imm.point(&dv(&[-cfg.t_extent + 2.0 * cfg.t_extent * i as f64 / n as f64, s]))?;
            length += imm.space.distance(&prev, &x);
            prev = x;
        }
        for sign in [1.0, -1.0] {
            let mut ctl = FourierControls::zeros(1, 0);
            ctl.coefficients[0] = sign * 1.05 * length;
            let path = integrate_controls(&dist, &dv(&[0.0, s]), &ctl, cfg.curve_steps, &tbox, true)?;
            for p in &path.params {
                s_drift = s_drift.max((p[1] - s).abs());
            }
            t_reach = t_reach.min(path.end_param()[0].abs());
        }
    }
    checks.push(Check::below("horizontal_s_constancy", s_drift, tol));
    checks.push(Check::at_least("horizontal_t_reach", t_reach, cfg.t_extent * 0.98));
    // cross-leaf connection
    let p = dv(&[0.0, 0.0]);
    let q = dv(&[0.0, 1.0]);
    let solver = ConnectConfig {
        bbox: Some(ParamBox::new(vec![-cfg.t_extent, -1.5], vec![cfg.t_extent, 2.5])),
        ..cfg.solver.clone()
    };
    let conn = connect_horizontal(&dist, &p, &q, &solver)?;
    let separation = distance_to_t_curve(&imm, &imm.point(&q)?, 0.0, cfg.t_extent)?;
    checks.push(Check::flag("cross_leaf_connection_failed", conn.status == ConnectionStatus::Failed));
    checks.push(Check::at_least("cross_leaf_gap_ratio", conn.gap / separation, 0.5));
    let a = DMatrix::from_fn(4, 4, |i, j| k.a[(i, j)]);
    let results = json!({
        "matrix": (0..4).map(|i| a.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
        "cube_defect": k.cube_defect(),
        "lorentz_skew_defect": k.lorentz_skew_defect(),
        "distinct_mu": scan.distinct_mu(),
        "min_kernel_gap": scan.min_gap().min(crate::nullity::GAP_CAP),
        "nullity_direction_defect": angle,
        "gauss_curvature_defect": curvature,
        "s_drift": s_drift,
        "t_reach": t_reach,
        "connection": {
            "status": conn.status,
            "gap": conn.gap,
            "restarts_run": conn.restarts_run,
            "restart_gaps": conn.restart_gaps,
            "leaf_separation": separation,
        },
    });
    let mut out = Outcome::new(results, checks);
    out.side_files.push(("counterexample_index.csv".into(), csv_string(|b| scan.write_csv(b))?));
    Ok(out)
}

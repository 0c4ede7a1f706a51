//! Declarative experiments: a JSON config fixes the mixture, the rotation
//! angles, the network, the optimizers and every seed. Running it writes the
//! datasets, trajectories, boundaries, risk reports and residuals, plus a
//! `summary.json` with the outcome of each configured check.
//!
//! Every rotated cell is coupled to a reference run at angle zero. Without
//! EGOP the rotated run starts from `Qᵀθ₀`. With EGOP both runs start from
//! the same reparameterized point and the rotated basis is `QᵀV₀`.

use crate::analysis::{
    boundary_equivariance_check, classification_risk, equivariance_residual_with,
    extract_boundary, invariance_residual, max_distance_to_antidiagonal, net_predictor,
    paired_risk, probe_points, row_direction_convergence, BBox,
};
use crate::datagen::{sample, Dataset, MixtureParams};
use crate::egop::{
    column_sign_agreement, coupled_basis_for, coupled_points, egop_basis, estimate_egop_at,
    reparameterized_oracle, SamplingSpec,
};
use crate::error::{LabError, Result};
use crate::io;
use crate::linalg::{apply_param_rotation, rotation_matrix, OrthogonalMatrix};
use crate::loss::SampleLoss;
use crate::model::{
    init_params, make_fixed_outer_two_layer_with, make_mlp, rademacher_outer, Activation,
    Architecture, BiasSpec, InitSpec, LayerSpec, ParamVector, WeightSpec,
};
use crate::optim::{run, OptimizerSpec, RunOptions, Trajectory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

/// A rotation angle written either in radians or as a multiple of π such as
/// `"pi/4"`, `"7pi/8"` or `"-3*pi/32"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Angle {
    Radians(f64),
    Expr(String),
}

impl Angle {
    pub fn radians(&self) -> Result<f64> {
        match self {
            Angle::Radians(v) if v.is_finite() => Ok(*v),
            Angle::Radians(v) => Err(LabError::Config(format!("angle {v} is not finite"))),
            Angle::Expr(s) => parse_angle(s),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Angle::Radians(v) => format!("{v}"),
            Angle::Expr(s) => s.clone(),
        }
    }
}

fn parse_angle(s: &str) -> Result<f64> {
    let bad = || LabError::Config(format!("cannot read angle {s:?}"));
    let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if let Ok(v) = t.parse::<f64>() {
        return Ok(v);
    }
    let (num, den) = match t.split_once('/') {
        Some((n, d)) => (n, d.parse::<f64>().map_err(|_| bad())?),
        None => (t.as_str(), 1.0),
    };
    let coef = num.strip_suffix("pi").ok_or_else(bad)?;
    let coef = coef.strip_suffix('*').unwrap_or(coef);
    let k = match coef {
        "" | "+" => 1.0,
        "-" => -1.0,
        c => c.parse::<f64>().map_err(|_| bad())?,
    };
    if den == 0.0 {
        return Err(bad());
    }
    Ok(k * PI / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchitectureConfig {
    /// `aᵀ ReLU(W x)` with frozen Rademacher `a`.
    FixedOuter {
        #[serde(default = "two")]
        input_dim: usize,
        width: usize,
        outer_seed: u64,
        init: InitSpec,
    },
    /// Two layers, both trainable, optional hidden bias.
    FullTwoLayer {
        #[serde(default = "two")]
        input_dim: usize,
        width: usize,
        #[serde(default = "yes")]
        bias: bool,
        init: InitSpec,
    },
    /// ReLU MLP with trainable weights and optional biases on every layer.
    Mlp {
        #[serde(default = "two")]
        input_dim: usize,
        hidden: Vec<usize>,
        #[serde(default)]
        bias: bool,
        init: InitSpec,
    },
}

fn two() -> usize {
    2
}

fn yes() -> bool {
    true
}

impl ArchitectureConfig {
    fn input_dim(&self) -> usize {
        match self {
            ArchitectureConfig::FixedOuter { input_dim, .. }
            | ArchitectureConfig::FullTwoLayer { input_dim, .. }
            | ArchitectureConfig::Mlp { input_dim, .. } => *input_dim,
        }
    }

    pub fn build(&self) -> Result<(Architecture, ParamVector)> {
        if self.input_dim() != 2 {
            return Err(LabError::Config(format!(
                "the mixture is two-dimensional, input_dim {} is unsupported",
                self.input_dim()
            )));
        }
        match self {
            ArchitectureConfig::FixedOuter {
                width,
                outer_seed,
                init,
                ..
            } => make_fixed_outer_two_layer_with(2, *width, &rademacher_outer(*width, *outer_seed), *init),
            ArchitectureConfig::FullTwoLayer {
                width, bias, init, ..
            } => {
                let arch = Architecture::new(
                    2,
                    vec![
                        LayerSpec {
                            width: *width,
                            activation: Activation::Relu,
                            weights: WeightSpec::Trainable,
                            bias: if *bias { BiasSpec::Trainable } else { BiasSpec::None },
                        },
                        LayerSpec {
                            width: 1,
                            activation: Activation::Identity,
                            weights: WeightSpec::Trainable,
                            bias: BiasSpec::None,
                        },
                    ],
                )?;
                let theta = init_params(&arch, *init);
                Ok((arch, theta))
            }
            ArchitectureConfig::Mlp {
                hidden, bias, init, ..
            } => make_mlp(2, hidden, *bias, *init),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Defaults to the optimizer's name; must be unique.
    #[serde(default)]
    pub label: Option<String>,
    pub optimizer: OptimizerSpec,
    pub steps: usize,
    #[serde(default = "one")]
    pub snapshot_stride: usize,
    #[serde(default)]
    pub save_iterates: bool,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.optimizer.label().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BasisRoute {
    /// `V_γ = QᵀV₀` from the reference eigenbasis.
    #[default]
    Coupled,
    /// Eigendecompose each rotated estimate built from coupled samples.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgopConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Number of gradient samples; defaults to the parameter count.
    #[serde(default)]
    pub samples: Option<usize>,
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub basis: BasisRoute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub bbox: BBox,
    pub resolution: usize,
    pub n_mc: usize,
    pub risk_seed: u64,
    #[serde(default = "thousand")]
    pub probes: usize,
    pub probe_seed: u64,
}

fn thousand() -> usize {
    1000
}

/// Pass/fail conditions evaluated after all runs finish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckConfig {
    /// Rotated runs track the reference run.
    Equivariance {
        max_iterate_residual: f64,
        #[serde(default)]
        max_boundary_residual: Option<f64>,
        #[serde(default)]
        runs: Option<Vec<String>>,
    },
    /// Rotated runs depart from the reference run.
    NonEquivariance {
        min_iterate_residual: f64,
        #[serde(default)]
        runs: Option<Vec<String>>,
    },
    /// Run `worse` has higher risk than run `better` at `gamma`.
    RiskGap {
        gamma: Angle,
        worse: String,
        better: String,
        min_standard_errors: f64,
    },
    /// Rows of a fixed-outer network align with `a_k (1,1)/√2`.
    RowAlignment {
        run: String,
        gamma: Angle,
        min_cosine: f64,
    },
    /// Boundary stays within `max_cells` grid cells of `x₁ = −x₂`.
    AntidiagonalBoundary {
        run: String,
        gamma: Angle,
        max_cells: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub params: MixtureParams,
    pub gammas: Vec<Angle>,
    pub architecture: ArchitectureConfig,
    pub dataset: DatasetConfig,
    pub runs: Vec<RunConfig>,
    #[serde(default)]
    pub egop: Option<EgopConfig>,
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub checks: Vec<CheckConfig>,
    pub output_dir: String,
}

const ANGLE_MATCH_TOL: f64 = 1e-12;

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| LabError::Config(format!("{} is not UTF-8", path.display())))?;
        Ok((Self::from_json(text)?, bytes))
    }

    fn egop_enabled(&self) -> bool {
        self.egop.as_ref().is_some_and(|e| e.enabled)
    }

    fn gamma_values(&self) -> Result<Vec<f64>> {
        self.gammas.iter().map(Angle::radians).collect()
    }

    fn gamma_index(&self, a: &Angle) -> Result<usize> {
        let g = a.radians()?;
        self.gamma_values()?
            .iter()
            .position(|v| (v - g).abs() <= ANGLE_MATCH_TOL)
            .ok_or_else(|| LabError::Config(format!("check refers to angle {} not in gammas", a.label())))
    }

    fn run_index(&self, label: &str) -> Result<usize> {
        self.runs
            .iter()
            .position(|r| r.label() == label)
            .ok_or_else(|| LabError::Config(format!("check refers to unknown run {label:?}")))
    }

    /// Semantic checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(LabError::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return cfg(format!("name {:?} must be non-empty without path separators", self.name));
        }
        if self.gammas.is_empty() {
            return cfg("gammas must not be empty".into());
        }
        let gammas = self.gamma_values()?;
        for (i, a) in gammas.iter().enumerate() {
            if gammas[..i].iter().any(|b| (a - b).abs() <= ANGLE_MATCH_TOL) {
                return cfg(format!("angle {a} is listed twice"));
            }
        }
        let (arch, _) = self.architecture.build()?;
        if self.dataset.n == 0 {
            return cfg("dataset.n must be positive".into());
        }
        if self.runs.is_empty() {
            return cfg("at least one run is required".into());
        }
        let mut labels = std::collections::BTreeSet::new();
        for r in &self.runs {
            r.optimizer.validate()?;
            let label = r.label();
            if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return cfg(format!("run label {label:?} must be ASCII alphanumeric, '_' or '-'"));
            }
            if !labels.insert(label.clone()) {
                return cfg(format!("run label {label:?} is used twice"));
            }
            if r.snapshot_stride == 0 {
                return cfg(format!("run {label}: snapshot_stride must be positive"));
            }
            if self.egop_enabled() && matches!(r.optimizer, OptimizerSpec::Shampoo { .. }) {
                return cfg(format!(
                    "run {label}: shampoo needs layer blocks, which the EGOP basis does not preserve"
                ));
            }
        }
        if let Some(e) = &self.egop {
            e.sampling.validate()?;
            if e.samples == Some(0) {
                return cfg("egop.samples must be positive".into());
            }
        }
        let a = &self.analysis;
        a.bbox.validate()?;
        if a.resolution < crate::analysis::MIN_RESOLUTION {
            return cfg(format!(
                "analysis.resolution must be at least {}",
                crate::analysis::MIN_RESOLUTION
            ));
        }
        if a.n_mc < crate::analysis::MIN_MC {
            return cfg(format!("analysis.n_mc must be at least {}", crate::analysis::MIN_MC));
        }
        if a.probes == 0 {
            return cfg("analysis.probes must be positive".into());
        }
        for c in &self.checks {
            match c {
                CheckConfig::Equivariance { runs, .. } | CheckConfig::NonEquivariance { runs, .. } => {
                    for l in runs.iter().flatten() {
                        self.run_index(l)?;
                    }
                }
                CheckConfig::RiskGap {
                    gamma, worse, better, ..
                } => {
                    self.gamma_index(gamma)?;
                    self.run_index(worse)?;
                    self.run_index(better)?;
                }
                CheckConfig::RowAlignment { run, gamma, .. } => {
                    self.gamma_index(gamma)?;
                    self.run_index(run)?;
                    if arch.fixed_outer_weights().is_none() {
                        return cfg("row_alignment needs the fixed_outer family".into());
                    }
                }
                CheckConfig::AntidiagonalBoundary { run, gamma, .. } => {
                    self.gamma_index(gamma)?;
                    self.run_index(run)?;
                }
            }
        }
        Ok(())
    }
}

/// One (angle, run) pair. `gamma_index == None` is the hidden reference
/// cell at angle zero used when zero is not among the configured angles.
#[derive(Debug, Clone, Serialize)]
pub struct CellPlan {
    pub gamma_index: Option<usize>,
    pub gamma: f64,
    pub run: String,
    pub dir: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Plan {
    pub name: String,
    pub config_sha256: String,
    pub output_dir: PathBuf,
    pub parameters: usize,
    pub egop: bool,
    pub cells: Vec<CellPlan>,
    pub checks: usize,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn zero_index(gammas: &[f64]) -> Option<usize> {
    gammas.iter().position(|g| g.abs() <= ANGLE_MATCH_TOL)
}

pub fn plan(config: &ExperimentConfig, config_bytes: &[u8], out: Option<&Path>) -> Result<Plan> {
    let gammas = config.gamma_values()?;
    let (arch, _) = config.architecture.build()?;
    let mut cells = Vec::new();
    if zero_index(&gammas).is_none() {
        for r in &config.runs {
            cells.push(CellPlan {
                gamma_index: None,
                gamma: 0.0,
                run: r.label(),
                dir: format!("reference_{}", r.label()),
            });
        }
    }
    for (i, g) in gammas.iter().enumerate() {
        for r in &config.runs {
            cells.push(CellPlan {
                gamma_index: Some(i),
                gamma: *g,
                run: r.label(),
                dir: format!("g{i}_{}", r.label()),
            });
        }
    }
    Ok(Plan {
        name: config.name.clone(),
        config_sha256: sha256_hex(config_bytes),
        output_dir: out.map_or_else(|| PathBuf::from(&config.output_dir), Path::to_path_buf),
        parameters: arch.num_params(),
        egop: config.egop_enabled(),
        cells,
        checks: config.checks.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub kind: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub config_sha256: String,
    pub parameters: usize,
    pub checks: Vec<CheckResult>,
    pub all_passed: bool,
    pub exit_code: i32,
    /// Wall-clock data; the only part of the output that varies between
    /// identical runs.
    pub metadata: Value,
}

struct CellOutcome {
    traj: Trajectory,
    /// Final parameters in the network's own coordinates.
    theta: Vec<f64>,
}

/// Residuals of one rotated cell against the reference cell.
#[derive(Debug, Clone, Serialize)]
struct Residual {
    run: String,
    gamma: f64,
    gamma_label: String,
    iterate_residual: f64,
    boundary_residual: f64,
}

/// Runs the experiment and writes every artifact under the output directory.
pub fn run_experiment(config: &ExperimentConfig, config_bytes: &[u8], out: Option<&Path>) -> Result<Summary> {
    let started = unix_seconds();
    let plan = plan(config, config_bytes, out)?;
    let dir = plan.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    io::save_json(config, &dir.join("config.resolved.json"))?;

    let params = config.params;
    let gammas = config.gamma_values()?;
    let (arch, theta0) = config.architecture.build()?;
    io::save_param_vector(&theta0, &dir, "theta0")?;

    let mut datasets: BTreeMap<usize, Dataset> = BTreeMap::new();
    for (i, g) in gammas.iter().enumerate() {
        let data = sample(&params, *g, config.dataset.n, config.dataset.seed)?;
        data.save_csv(&dir.join(format!("dataset_g{i}.csv")))?;
        datasets.insert(i, data);
    }
    let reference_data = match zero_index(&gammas) {
        Some(i) => datasets[&i].clone(),
        None => sample(&params, 0.0, config.dataset.n, config.dataset.seed)?,
    };
    let oracle_for = |gi: Option<usize>| -> Result<SampleLoss> {
        let data = gi.map_or(&reference_data, |i| &datasets[&i]);
        SampleLoss::from_dataset(arch.clone(), data)
    };

    // EGOP bases, one per angle, indexed like the cells
    let mut bases: BTreeMap<Option<usize>, OrthogonalMatrix> = BTreeMap::new();
    let mut egop_report = Value::Null;
    if let Some(e) = config.egop.as_ref().filter(|e| e.enabled) {
        let p = arch.num_params();
        let points = e.sampling.draw(p, e.samples.unwrap_or(p));
        let reference = oracle_for(None)?;
        let est = estimate_egop_at(&reference, &points)?;
        let basis = egop_basis(&est)?;
        io::save_egop(&est, &basis, &dir, "egop_reference")?;
        let v0 = basis.basis.clone();
        let mut routes = Vec::new();
        bases.insert(None, v0.clone());
        for (i, g) in gammas.iter().enumerate() {
            let u = rotation_matrix(*g);
            let coupled = coupled_basis_for(&v0, &u, &arch)?;
            let v = match e.basis {
                BasisRoute::Coupled => coupled,
                BasisRoute::Direct => {
                    let oracle = oracle_for(Some(i))?;
                    let rot = estimate_egop_at(&oracle, &coupled_points(&points, &u, &arch)?)?;
                    let rb = egop_basis(&rot)?;
                    io::save_egop(&rot, &rb, &dir, &format!("egop_g{i}"))?;
                    routes.push(json!({"gamma": g, "column_gap": column_sign_agreement(&coupled, &rb.basis)?}));
                    rb.basis
                }
            };
            bases.insert(Some(i), v);
        }
        egop_report = json!({
            "samples": est.samples,
            "sampling": e.sampling,
            "basis": e.basis,
            "warning": basis.warning,
            "route_diagnostic": routes,
        });
    }

    let runs_by_label: BTreeMap<String, &RunConfig> = config.runs.iter().map(|r| (r.label(), r)).collect();
    let outcomes: Vec<Result<CellOutcome>> = plan
        .cells
        .par_iter()
        .map(|cell| {
            let rc = runs_by_label[&cell.run];
            let cell_dir = dir.join(&cell.dir);
            std::fs::create_dir_all(&cell_dir)?;
            let oracle = oracle_for(cell.gamma_index)?;
            let opts = RunOptions {
                steps: rc.steps,
                stride: rc.snapshot_stride,
            };
            let context = |e: LabError| {
                LabError::Config(format!("run {} at angle {}: {e}", cell.run, cell.gamma))
            };
            let (traj, theta) = if let Some(v) = bases.get(&cell.gamma_index) {
                let start = bases[&None].apply_transposed(&theta0)?;
                let re = reparameterized_oracle(&oracle, v.clone())?;
                let traj = run(&rc.optimizer, &re, None, &start, opts).map_err(context)?;
                let theta = v.apply(traj.final_theta())?;
                (traj, theta)
            } else {
                let start = apply_param_rotation(&rotation_matrix(cell.gamma), &arch, &theta0, true)?;
                let traj = run(&rc.optimizer, &oracle, Some(&arch), &start, opts).map_err(context)?;
                let theta = traj.final_theta().to_vec();
                (traj, theta)
            };
            io::save_trajectory_csv(&traj, &cell_dir.join("trajectory.csv"))?;
            if rc.save_iterates {
                io::save_iterates_bin(&traj, &cell_dir.join("iterates.bin"))?;
            }
            let pv = ParamVector {
                theta: theta.clone(),
                layout: arch.layout().clone(),
            };
            io::save_param_vector(&pv, &cell_dir, "theta_final")?;
            {
                let f = net_predictor(&arch, &theta)?;
                let a = &config.analysis;
                let boundary = extract_boundary(&f, a.bbox, a.resolution)?;
                io::save_boundary_csv(&boundary, &cell_dir.join("boundary.csv"))?;
                let risk = classification_risk(&f, &params, cell.gamma, a.n_mc, a.risk_seed)?;
                io::save_json(&risk, &cell_dir.join("risk.json"))?;
            }
            Ok(CellOutcome { traj, theta })
        })
        .collect();
    let mut cells: BTreeMap<(Option<usize>, String), CellOutcome> = BTreeMap::new();
    for (cell, outcome) in plan.cells.iter().zip(outcomes) {
        cells.insert((cell.gamma_index, cell.run.clone()), outcome?);
    }

    let ref_index = zero_index(&gammas);
    let probes = probe_points(config.analysis.bbox, config.analysis.probes, config.analysis.probe_seed);
    let mut residuals = Vec::new();
    for rc in &config.runs {
        let label = rc.label();
        let base = &cells[&(ref_index, label.clone())];
        for (i, g) in gammas.iter().enumerate() {
            if Some(i) == ref_index {
                continue;
            }
            let cell = &cells[&(Some(i), label.clone())];
            let iterate_residual = if bases.is_empty() {
                let u = rotation_matrix(*g);
                equivariance_residual_with(&cell.traj, &base.traj, |th| apply_param_rotation(&u, &arch, th, true))?
            } else {
                invariance_residual(&cell.traj, &base.traj)?
            };
            let boundary_residual = boundary_equivariance_check(
                net_predictor(&arch, &cell.theta)?,
                net_predictor(&arch, &base.theta)?,
                *g,
                &probes,
            )?;
            residuals.push(Residual {
                run: label.clone(),
                gamma: *g,
                gamma_label: config.gammas[i].label(),
                iterate_residual,
                boundary_residual,
            });
        }
    }
    io::save_json(
        &json!({"coupling": if bases.is_empty() { "initial_rotation" } else { "egop_basis" },
                "egop": egop_report, "residuals": residuals}),
        &dir.join("residuals.json"),
    )?;

    let checks = config
        .checks
        .iter()
        .map(|c| evaluate_check(config, c, &arch, &cells, &residuals))
        .collect::<Result<Vec<_>>>()?;
    let all_passed = checks.iter().all(|c| c.passed);
    let summary = Summary {
        name: config.name.clone(),
        config_sha256: plan.config_sha256.clone(),
        parameters: plan.parameters,
        checks,
        all_passed,
        exit_code: if all_passed { 0 } else { 1 },
        metadata: json!({
            "started_unix": started,
            "finished_unix": unix_seconds(),
            "threads": rayon::current_num_threads(),
        }),
    };
    io::save_json(&summary, &dir.join("summary.json"))?;
    Ok(summary)
}

fn unix_seconds() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn selected<'a>(residuals: &'a [Residual], runs: &Option<Vec<String>>) -> Vec<&'a Residual> {
    residuals
        .iter()
        .filter(|r| runs.as_ref().is_none_or(|l| l.contains(&r.run)))
        .collect()
}

fn evaluate_check(
    config: &ExperimentConfig,
    check: &CheckConfig,
    arch: &Architecture,
    cells: &BTreeMap<(Option<usize>, String), CellOutcome>,
    residuals: &[Residual],
) -> Result<CheckResult> {
    let (kind, passed, detail) = match check {
        CheckConfig::Equivariance {
            max_iterate_residual,
            max_boundary_residual,
            runs,
        } => {
            let rs = selected(residuals, runs);
            let it = rs.iter().map(|r| r.iterate_residual).fold(0.0, f64::max);
            let bd = rs.iter().map(|r| r.boundary_residual).fold(0.0, f64::max);
            let ok = !rs.is_empty()
                && it <= *max_iterate_residual
                && max_boundary_residual.is_none_or(|m| bd <= m);
            (
                "equivariance",
                ok,
                format!("{} pairs, worst iterate residual {it:.3e}, worst boundary residual {bd:.3e}", rs.len()),
            )
        }
        CheckConfig::NonEquivariance {
            min_iterate_residual,
            runs,
        } => {
            let rs = selected(residuals, runs);
            let it = rs.iter().map(|r| r.iterate_residual).fold(f64::INFINITY, f64::min);
            (
                "non_equivariance",
                !rs.is_empty() && it >= *min_iterate_residual,
                format!("{} pairs, smallest iterate residual {it:.3e}", rs.len()),
            )
        }
        CheckConfig::RiskGap {
            gamma,
            worse,
            better,
            min_standard_errors,
        } => {
            let gi = Some(config.gamma_index(gamma)?);
            let g = gamma.radians()?;
            let a = &config.analysis;
            let fw = net_predictor(arch, &cells[&(gi, worse.clone())].theta)?;
            let fb = net_predictor(arch, &cells[&(gi, better.clone())].theta)?;
            let r = paired_risk(fw, fb, &config.params, g, a.n_mc, a.risk_seed)?;
            let z = r.difference / r.combined_stderr;
            (
                "risk_gap",
                z >= *min_standard_errors,
                format!(
                    "risk {worse} {:.5} vs {better} {:.5}, gap {z:.2} combined standard errors",
                    r.risk_a, r.risk_b
                ),
            )
        }
        CheckConfig::RowAlignment {
            run,
            gamma,
            min_cosine,
        } => {
            let gi = Some(config.gamma_index(gamma)?);
            let cell = &cells[&(gi, run.clone())];
            let cos = if config.egop_enabled() {
                // alignment is a statement about the network's own weights
                let mut t = cell.traj.clone();
                t.iterates = vec![cell.theta.clone()];
                t.steps = vec![*cell.traj.steps.last().unwrap_or(&0)];
                row_direction_convergence(&t, arch)?
            } else {
                row_direction_convergence(&cell.traj, arch)?
            };
            let last = cos.last().copied().unwrap_or(f64::NAN);
            ("row_alignment", last >= *min_cosine, format!("final min cosine {last:.6}"))
        }
        CheckConfig::AntidiagonalBoundary { run, gamma, max_cells } => {
            let gi = Some(config.gamma_index(gamma)?);
            let a = &config.analysis;
            let f = net_predictor(arch, &cells[&(gi, run.clone())].theta)?;
            let b = extract_boundary(f, a.bbox, a.resolution)?;
            let d = max_distance_to_antidiagonal(&b);
            let limit = max_cells * b.cell_size();
            (
                "antidiagonal_boundary",
                !b.is_empty() && d <= limit,
                format!("max distance {d:.4} against limit {limit:.4}"),
            )
        }
    };
    Ok(CheckResult {
        kind: kind.to_string(),
        passed,
        detail,
    })
}

/// Upper bound on worker threads from `LAB_THREADS`, if set.
pub fn thread_limit_from_env() -> Result<Option<usize>> {
    match std::env::var("LAB_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(LabError::Config(format!("LAB_THREADS must be a positive integer, got {s:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// JSON Schema describing [`ExperimentConfig`].
pub fn config_schema() -> Value {
    let uint = json!({"type": "integer", "minimum": 0});
    let pos = json!({"type": "integer", "minimum": 1});
    let num = json!({"type": "number"});
    let angle = json!({"oneOf": [
        {"type": "number"},
        {"type": "string", "pattern": "^\\s*[-+]?[0-9.]*\\*?pi(\\s*/\\s*[0-9.]+)?\\s*$|^[-+0-9.eE]+$"}
    ]});
    let init = json!({"type": "object", "additionalProperties": false, "required": ["seed"],
        "properties": {"seed": uint, "scale": {"type": "number", "exclusiveMinimum": 0, "default": 1.0}}});
    let optimizer = json!({"oneOf": [
        {"type": "object", "additionalProperties": false, "required": ["name", "eta"],
         "properties": {"name": {"const": "gd"}, "eta": num, "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1, "default": 0}}},
        {"type": "object", "additionalProperties": false, "required": ["name", "eta", "beta1", "beta2", "eps"],
         "properties": {"name": {"const": "adam"}, "eta": num, "beta1": num, "beta2": num, "eps": num,
                        "standard_order": {"type": "boolean", "default": false}}},
        {"type": "object", "additionalProperties": false, "required": ["name", "eta", "eps"],
         "properties": {"name": {"const": "signgd"}, "eta": num, "eps": num}},
        {"type": "object", "additionalProperties": false, "required": ["name", "eta", "eps"],
         "properties": {"name": {"const": "shampoo"}, "eta": num, "eps": num,
                        "root_schedule": {"type": "object", "additionalProperties": false,
                            "properties": {"period": pos, "include_step0": {"type": "boolean"}}}}}
    ]});
    let run_names = json!({"type": "array", "items": {"type": "string"}});
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "ExperimentConfig",
        "type": "object",
        "additionalProperties": false,
        "required": ["name", "params", "gammas", "architecture", "dataset", "runs", "analysis", "output_dir"],
        "properties": {
            "name": {"type": "string", "minLength": 1},
            "params": {"type": "object", "additionalProperties": false, "required": ["omega", "mu", "sigma"],
                       "properties": {"omega": {"type": "number", "exclusiveMinimum": 1},
                                      "mu": {"type": "number", "exclusiveMinimum": 0},
                                      "sigma": {"type": "number", "exclusiveMinimum": 0}}},
            "gammas": {"type": "array", "minItems": 1, "items": angle},
            "architecture": {"oneOf": [
                {"type": "object", "additionalProperties": false, "required": ["family", "width", "outer_seed", "init"],
                 "properties": {"family": {"const": "fixed_outer"}, "input_dim": {"const": 2}, "width": pos,
                                "outer_seed": uint, "init": init}},
                {"type": "object", "additionalProperties": false, "required": ["family", "width", "init"],
                 "properties": {"family": {"const": "full_two_layer"}, "input_dim": {"const": 2}, "width": pos,
                                "bias": {"type": "boolean", "default": true}, "init": init}},
                {"type": "object", "additionalProperties": false, "required": ["family", "hidden", "init"],
                 "properties": {"family": {"const": "mlp"}, "input_dim": {"const": 2},
                                "hidden": {"type": "array", "items": pos},
                                "bias": {"type": "boolean", "default": false}, "init": init}}
            ]},
            "dataset": {"type": "object", "additionalProperties": false, "required": ["n", "seed"],
                        "properties": {"n": pos, "seed": uint}},
            "runs": {"type": "array", "minItems": 1, "items": {
                "type": "object", "additionalProperties": false, "required": ["optimizer", "steps"],
                "properties": {"label": {"type": "string", "pattern": "^[A-Za-z0-9_-]+$"},
                               "optimizer": optimizer, "steps": uint,
                               "snapshot_stride": {"type": "integer", "minimum": 1, "default": 1},
                               "save_iterates": {"type": "boolean", "default": false}}}},
            "egop": {"type": ["object", "null"], "additionalProperties": false, "required": ["sampling"],
                     "properties": {"enabled": {"type": "boolean", "default": true},
                                    "samples": {"type": ["integer", "null"], "minimum": 1},
                                    "sampling": {"type": "object", "additionalProperties": false, "required": ["seed"],
                                                 "properties": {"scale": {"type": "number", "exclusiveMinimum": 0, "default": 1.0},
                                                                "seed": uint}},
                                    "basis": {"enum": ["coupled", "direct"], "default": "coupled"}}},
            "analysis": {"type": "object", "additionalProperties": false,
                         "required": ["resolution", "n_mc", "risk_seed", "probe_seed"],
                         "properties": {"bbox": {"type": "object", "additionalProperties": false,
                                                 "required": ["x_min", "x_max", "y_min", "y_max"],
                                                 "properties": {"x_min": num, "x_max": num, "y_min": num, "y_max": num}},
                                        "resolution": {"type": "integer", "minimum": crate::analysis::MIN_RESOLUTION},
                                        "n_mc": {"type": "integer", "minimum": crate::analysis::MIN_MC},
                                        "risk_seed": uint,
                                        "probes": {"type": "integer", "minimum": 1, "default": 1000},
                                        "probe_seed": uint}},
            "checks": {"type": "array", "items": {"oneOf": [
                {"type": "object", "additionalProperties": false, "required": ["kind", "max_iterate_residual"],
                 "properties": {"kind": {"const": "equivariance"}, "max_iterate_residual": num,
                                "max_boundary_residual": num, "runs": run_names}},
                {"type": "object", "additionalProperties": false, "required": ["kind", "min_iterate_residual"],
                 "properties": {"kind": {"const": "non_equivariance"}, "min_iterate_residual": num, "runs": run_names}},
                {"type": "object", "additionalProperties": false,
                 "required": ["kind", "gamma", "worse", "better", "min_standard_errors"],
                 "properties": {"kind": {"const": "risk_gap"}, "gamma": angle, "worse": {"type": "string"},
                                "better": {"type": "string"}, "min_standard_errors": num}},
                {"type": "object", "additionalProperties": false, "required": ["kind", "run", "gamma", "min_cosine"],
                 "properties": {"kind": {"const": "row_alignment"}, "run": {"type": "string"}, "gamma": angle,
                                "min_cosine": num}},
                {"type": "object", "additionalProperties": false, "required": ["kind", "run", "gamma", "max_cells"],
                 "properties": {"kind": {"const": "antidiagonal_boundary"}, "run": {"type": "string"}, "gamma": angle,
                                "max_cells": num}}
            ]}},
            "output_dir": {"type": "string"}
        }
    })
}

//! Deterministic full-batch first-order methods: GD (with optional
//! heavy-ball momentum), Adam, SignGD and layer-wise Shampoo.
//!
//! Every method consumes a [`GradOracle`] and produces a [`Trajectory`].
//! Runs are single-threaded state machines; only the oracle may use
//! parallelism internally, and it must reduce deterministically.

use crate::error::{LabError, Result};
use crate::linalg::{inv_root, sym_eig, unvec, vec as vec_col, Matrix, RootPower, DEFAULT_EIG_FLOOR};
use crate::model::{Architecture, ParamLayout};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::ops::Range;

/// A deterministic map `θ ↦ (L(θ), ∇L(θ))`.
pub trait GradOracle: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<T: GradOracle + ?Sized> GradOracle for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        (**self).eval(theta)
    }
}

impl<T: GradOracle + ?Sized> GradOracle for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        (**self).eval(theta)
    }
}

/// Oracle backed by a closure.
pub struct FnOracle<F> {
    dim: usize,
    f: F,
}

impl<F> FnOracle<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> GradOracle for FnOracle<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        if theta.len() != self.dim {
            return Err(LabError::Dimension(format!(
                "oracle expects {} parameters, got {}",
                self.dim,
                theta.len()
            )));
        }
        Ok((self.f)(theta))
    }
}

/// Iterates of one optimizer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Snapshot steps; every `stride`-th step plus the final one.
    pub steps: Vec<usize>,
    pub iterates: Vec<Vec<f64>>,
    /// Loss at every step `0..=T`.
    pub losses: Vec<f64>,
    pub stride: usize,
    pub fingerprint: String,
}

impl Trajectory {
    pub fn final_theta(&self) -> &[f64] {
        self.iterates.last().expect("trajectory holds at least θ₀")
    }

    pub fn num_steps(&self) -> usize {
        self.losses.len() - 1
    }
}

struct Recorder {
    traj: Trajectory,
    total: usize,
}

impl Recorder {
    fn new(total: usize, stride: usize, fingerprint: String) -> Self {
        Self {
            traj: Trajectory {
                steps: Vec::new(),
                iterates: Vec::new(),
                losses: Vec::with_capacity(total + 1),
                stride: stride.max(1),
                fingerprint,
            },
            total,
        }
    }

    fn record(&mut self, t: usize, theta: &[f64], loss: f64) {
        self.traj.losses.push(loss);
        if t.is_multiple_of(self.traj.stride) || t == self.total {
            self.traj.steps.push(t);
            self.traj.iterates.push(theta.to_vec());
        }
    }
}

/// Run-level options shared by all methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub steps: usize,
    pub stride: usize,
}

impl RunOptions {
    pub fn new(steps: usize) -> Self {
        Self { steps, stride: 1 }
    }
}

fn check_finite(step: usize, what: &str, v: &[f64]) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(LabError::Numerical {
            step,
            what: format!("{what}[{i}] = {}", v[i]),
        });
    }
    Ok(())
}

fn eval_checked(oracle: &dyn GradOracle, theta: &[f64], step: usize) -> Result<(f64, Vec<f64>)> {
    let (loss, grad) = oracle.eval(theta)?;
    if grad.len() != theta.len() {
        return Err(LabError::Dimension(format!(
            "oracle returned {} gradient entries for {} parameters",
            grad.len(),
            theta.len()
        )));
    }
    if !loss.is_finite() {
        return Err(LabError::Numerical {
            step,
            what: format!("loss = {loss}"),
        });
    }
    check_finite(step, "gradient", &grad)?;
    Ok((loss, grad))
}

fn check_start(oracle: &dyn GradOracle, theta0: &[f64]) -> Result<()> {
    if theta0.len() != oracle.dim() {
        return Err(LabError::Dimension(format!(
            "initial point has {} entries, oracle expects {}",
            theta0.len(),
            oracle.dim()
        )));
    }
    check_finite(0, "theta0", theta0)
}

/// Hyperparameters of every supported method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Gd {
        eta: f64,
        /// Heavy-ball coefficient; zero is plain GD.
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        eta: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        /// Conventional Adam ordering instead of the literal pseudocode.
        #[serde(default)]
        standard_order: bool,
    },
    #[serde(rename = "signgd")]
    SignGd { eta: f64, eps: f64 },
    Shampoo {
        eta: f64,
        eps: f64,
        #[serde(default)]
        root_schedule: RootSchedule,
    },
}

impl OptimizerSpec {
    pub fn label(&self) -> &'static str {
        match self {
            OptimizerSpec::Gd { momentum, .. } if *momentum != 0.0 => "gd_momentum",
            OptimizerSpec::Gd { .. } => "gd",
            OptimizerSpec::Adam { .. } => "adam",
            OptimizerSpec::SignGd { .. } => "signgd",
            OptimizerSpec::Shampoo { .. } => "shampoo",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(m.to_string()));
        match *self {
            OptimizerSpec::Gd { eta, momentum } => {
                if !(eta >= 0.0 && eta.is_finite()) {
                    return bad("gd: eta must be finite and nonnegative");
                }
                if !(0.0..1.0).contains(&momentum) {
                    return bad("gd: momentum must lie in [0, 1)");
                }
            }
            OptimizerSpec::Adam {
                eta,
                beta1,
                beta2,
                eps,
                ..
            } => {
                if !(eta >= 0.0 && eta.is_finite()) {
                    return bad("adam: eta must be finite and nonnegative");
                }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return bad("adam: betas must lie in [0, 1)");
                }
                if !(eps >= 0.0 && eps.is_finite()) {
                    return bad("adam: eps must be finite and nonnegative");
                }
            }
            OptimizerSpec::SignGd { eta, eps } => {
                if !(eta >= 0.0 && eta.is_finite()) || !(eps >= 0.0 && eps.is_finite()) {
                    return bad("signgd: eta and eps must be finite and nonnegative");
                }
            }
            OptimizerSpec::Shampoo {
                eta,
                eps,
                root_schedule,
            } => {
                if !(eta >= 0.0 && eta.is_finite()) {
                    return bad("shampoo: eta must be finite and nonnegative");
                }
                if !(eps > 0.0 && eps.is_finite()) {
                    return bad("shampoo: eps must be positive");
                }
                if root_schedule.period == 0 {
                    return bad("shampoo: root period must be positive");
                }
            }
        }
        Ok(())
    }

    /// Stable digest of the method and its hyperparameters.
    pub fn fingerprint(&self, theta0: &[f64], opts: RunOptions) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("spec serializes"));
        h.update(opts.steps.to_le_bytes());
        h.update(opts.stride.to_le_bytes());
        for t in theta0 {
            h.update(t.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Runs `spec`; Shampoo needs the architecture for its block structure.
pub fn run(
    spec: &OptimizerSpec,
    oracle: &dyn GradOracle,
    arch: Option<&Architecture>,
    theta0: &[f64],
    opts: RunOptions,
) -> Result<Trajectory> {
    spec.validate()?;
    let fp = spec.fingerprint(theta0, opts);
    match *spec {
        OptimizerSpec::Gd { eta, momentum } => gd_impl(oracle, theta0, eta, momentum, opts, fp),
        OptimizerSpec::Adam {
            eta,
            beta1,
            beta2,
            eps,
            standard_order,
        } => {
            let cfg = AdamConfig {
                eta,
                beta1,
                beta2,
                eps,
                standard_order,
            };
            adam_impl(oracle, theta0, cfg, opts, fp)
        }
        OptimizerSpec::SignGd { eta, eps } => signgd_impl(oracle, theta0, eta, eps, opts, fp),
        OptimizerSpec::Shampoo {
            eta,
            eps,
            root_schedule,
        } => {
            let arch = arch.ok_or_else(|| {
                LabError::Config("shampoo needs the network architecture".into())
            })?;
            let blocks = ShampooBlocks::from_layout(arch.layout());
            Ok(shampoo_impl(oracle, &blocks, theta0, eta, eps, root_schedule, opts, fp)?.0)
        }
    }
}

/// `θ_{t+1} = θ_t − η ∇L(θ_t)`.
pub fn gd_run(oracle: &dyn GradOracle, theta0: &[f64], eta: f64, steps: usize) -> Result<Trajectory> {
    run(
        &OptimizerSpec::Gd { eta, momentum: 0.0 },
        oracle,
        None,
        theta0,
        RunOptions::new(steps),
    )
}

/// Heavy-ball: `v ← βv + ∇L(θ)`, `θ ← θ − ηv`.
pub fn gd_momentum_run(
    oracle: &dyn GradOracle,
    theta0: &[f64],
    eta: f64,
    momentum: f64,
    steps: usize,
) -> Result<Trajectory> {
    run(
        &OptimizerSpec::Gd { eta, momentum },
        oracle,
        None,
        theta0,
        RunOptions::new(steps),
    )
}

fn gd_impl(
    oracle: &dyn GradOracle,
    theta0: &[f64],
    eta: f64,
    momentum: f64,
    opts: RunOptions,
    fp: String,
) -> Result<Trajectory> {
    check_start(oracle, theta0)?;
    let mut rec = Recorder::new(opts.steps, opts.stride, fp);
    let mut theta = theta0.to_vec();
    let mut vel = vec![0.0; theta.len()];
    for t in 0..opts.steps {
        let (loss, g) = eval_checked(oracle, &theta, t)?;
        rec.record(t, &theta, loss);
        for ((th, v), gi) in theta.iter_mut().zip(&mut vel).zip(&g) {
            *v = momentum * *v + gi;
            *th -= eta * *v;
        }
        check_finite(t + 1, "theta", &theta)?;
    }
    let (loss, _) = eval_checked(oracle, &theta, opts.steps)?;
    rec.record(opts.steps, &theta, loss);
    Ok(rec.traj)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub standard_order: bool,
}

/// Adam state: moments, step counter and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(p: usize, cfg: AdamConfig) -> Self {
        Self {
            m: vec![0.0; p],
            v: vec![0.0; p],
            t: 0,
            cfg,
        }
    }

    /// `θ ← θ − η (diag(v) + εI)^{-1/2} m`, guarding `0/0` only when `ε = 0`.
    fn apply(&self, theta: &mut [f64], m: &[f64], v: &[f64], step: usize) -> Result<()> {
        let (eta, eps) = (self.cfg.eta, self.cfg.eps);
        for i in 0..theta.len() {
            let denom = (v[i] + eps).sqrt();
            if denom == 0.0 {
                if m[i] != 0.0 {
                    return Err(LabError::Numerical {
                        step,
                        what: format!("adam division by zero at coordinate {i} (eps = 0, v = 0, m ≠ 0)"),
                    });
                }
                continue;
            }
            theta[i] -= eta * m[i] / denom;
        }
        Ok(())
    }

    /// Literal update: step from the current moments, then fold in the
    /// gradient at the new point. The stored moments carry the bias
    /// correction, exactly as the recursion is written.
    pub fn literal_step(&mut self, theta: &mut [f64], grad_at: impl FnOnce(&[f64]) -> Result<Vec<f64>>) -> Result<()> {
        let (m, v) = (self.m.clone(), self.v.clone());
        self.apply(theta, &m, &v, self.t)?;
        let g = grad_at(theta)?;
        let k = (self.t + 1) as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 / (1.0 - b1.powi(k));
        let c2 = 1.0 / (1.0 - b2.powi(k));
        for i in 0..theta.len() {
            self.m[i] = c1 * (b1 * self.m[i] + (1.0 - b1) * g[i]);
            self.v[i] = c2 * (b2 * self.v[i] + (1.0 - b2) * g[i] * g[i]);
        }
        self.t += 1;
        Ok(())
    }

    /// Conventional Adam: update raw moments with `∇L(θ_t)`, then step with
    /// bias-corrected moments. `ε` stays inside the square root.
    pub fn standard_step(&mut self, theta: &mut [f64], g: &[f64]) -> Result<()> {
        let k = (self.t + 1) as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        for i in 0..theta.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
        }
        let c1 = 1.0 / (1.0 - b1.powi(k));
        let c2 = 1.0 / (1.0 - b2.powi(k));
        let mh: Vec<f64> = self.m.iter().map(|m| m * c1).collect();
        let vh: Vec<f64> = self.v.iter().map(|v| v * c2).collect();
        self.apply(theta, &mh, &vh, self.t)?;
        self.t += 1;
        Ok(())
    }
}

pub fn adam_run(
    oracle: &dyn GradOracle,
    theta0: &[f64],
    cfg: AdamConfig,
    steps: usize,
) -> Result<Trajectory> {
    run(
        &OptimizerSpec::Adam {
            eta: cfg.eta,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            standard_order: cfg.standard_order,
        },
        oracle,
        None,
        theta0,
        RunOptions::new(steps),
    )
}

fn adam_impl(
    oracle: &dyn GradOracle,
    theta0: &[f64],
    cfg: AdamConfig,
    opts: RunOptions,
    fp: String,
) -> Result<Trajectory> {
    check_start(oracle, theta0)?;
    let mut rec = Recorder::new(opts.steps, opts.stride, fp);
    let mut state = AdamState::new(theta0.len(), cfg);
    let mut theta = theta0.to_vec();
    let (mut loss, mut grad) = eval_checked(oracle, &theta, 0)?;
    for t in 0..opts.steps {
        rec.record(t, &theta, loss);
        if cfg.standard_order {
            state.standard_step(&mut theta, &grad)?;
            check_finite(t + 1, "theta", &theta)?;
            (loss, grad) = eval_checked(oracle, &theta, t + 1)?;
        } else {
            let mut fresh = None;
            state.literal_step(&mut theta, |th| {
                check_finite(t + 1, "theta", th)?;
                let (l, g) = eval_checked(oracle, th, t + 1)?;
                fresh = Some(l);
                Ok(g)
            })?;
            loss = fresh.expect("literal step evaluates the oracle");
            check_finite(t + 1, "adam moments", &state.m)?;
            check_finite(t + 1, "adam moments", &state.v)?;
        }
    }
    rec.record(opts.steps, &theta, loss);
    Ok(rec.traj)
}

/// `θ_{t+1} = θ_t − η (diag(g⊙g) + εI)^{-1/2} g`, with `sign(0) = 0`.
pub fn signgd_run(
    oracle: &dyn GradOracle,
    theta0: &[f64],
    eta: f64,
    eps: f64,
    steps: usize,
) -> Result<Trajectory> {
    run(
        &OptimizerSpec::SignGd { eta, eps },
        oracle,
        None,
        theta0,
        RunOptions::new(steps),
    )
}

/// One SignGD step direction for a single coordinate.
#[inline]
pub fn signgd_direction(g: f64, eps: f64) -> f64 {
    let denom = (g * g + eps).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        g / denom
    }
}

fn signgd_impl(
    oracle: &dyn GradOracle,
    theta0: &[f64],
    eta: f64,
    eps: f64,
    opts: RunOptions,
    fp: String,
) -> Result<Trajectory> {
    check_start(oracle, theta0)?;
    let mut rec = Recorder::new(opts.steps, opts.stride, fp);
    let mut theta = theta0.to_vec();
    for t in 0..opts.steps {
        let (loss, g) = eval_checked(oracle, &theta, t)?;
        rec.record(t, &theta, loss);
        for (th, gi) in theta.iter_mut().zip(&g) {
            *th -= eta * signgd_direction(*gi, eps);
        }
        check_finite(t + 1, "theta", &theta)?;
    }
    let (loss, _) = eval_checked(oracle, &theta, opts.steps)?;
    rec.record(opts.steps, &theta, loss);
    Ok(rec.traj)
}

/// When Shampoo recomputes its inverse roots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RootSchedule {
    /// Roots are refreshed at steps divisible by `period`.
    pub period: usize,
    /// Whether step 0 refreshes. Without it the first steps fall back to
    /// diagonal scaling until the first refresh.
    pub include_step0: bool,
}

impl Default for RootSchedule {
    fn default() -> Self {
        Self {
            period: 1,
            include_step0: true,
        }
    }
}

impl RootSchedule {
    pub fn refresh_at(&self, t: usize) -> bool {
        t.is_multiple_of(self.period) && (t > 0 || self.include_step0)
    }
}

/// A matrix-shaped slice of θ preconditioned as one unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShampooBlock {
    pub range: Range<usize>,
    pub rows: usize,
    pub cols: usize,
}

/// The trainable weight blocks of a layout followed by its bias blocks
/// (each an `m_j × 1` matrix).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShampooBlocks(pub Vec<ShampooBlock>);

impl ShampooBlocks {
    pub fn from_layout(layout: &ParamLayout) -> Self {
        let mut blocks = Vec::new();
        for (j, r) in layout.weights.iter().enumerate() {
            if let Some(r) = r {
                let (rows, cols) = layout.shapes[j];
                blocks.push(ShampooBlock {
                    range: r.clone(),
                    rows,
                    cols,
                });
            }
        }
        for r in layout.biases.iter().flatten() {
            blocks.push(ShampooBlock {
                range: r.clone(),
                rows: r.len(),
                cols: 1,
            });
        }
        Self(blocks)
    }

    fn covers(&self, p: usize) -> bool {
        let mut seen = vec![false; p];
        for b in &self.0 {
            if b.range.end > p || b.range.len() != b.rows * b.cols {
                return false;
            }
            for i in b.range.clone() {
                if seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Per-block accumulators and cached inverse roots.
#[derive(Debug, Clone)]
pub struct ShampooState {
    pub left: Vec<Matrix>,
    pub right: Vec<Matrix>,
    left_root: Vec<Option<Matrix>>,
    right_root: Vec<Option<Matrix>>,
    pub eps: f64,
    pub eta: f64,
}

/// Accumulator health observed during a Shampoo run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShampooDiagnostics {
    pub min_eigenvalue: f64,
    pub max_asymmetry: f64,
    pub root_refreshes: usize,
}

pub fn shampoo_run(
    oracle: &dyn GradOracle,
    arch: &Architecture,
    theta0: &[f64],
    eta: f64,
    eps: f64,
    steps: usize,
    schedule: RootSchedule,
) -> Result<(Trajectory, ShampooDiagnostics)> {
    let spec = OptimizerSpec::Shampoo {
        eta,
        eps,
        root_schedule: schedule,
    };
    spec.validate()?;
    let opts = RunOptions::new(steps);
    let fp = spec.fingerprint(theta0, opts);
    let blocks = ShampooBlocks::from_layout(arch.layout());
    shampoo_impl(oracle, &blocks, theta0, eta, eps, schedule, opts, fp)
}

#[allow(clippy::too_many_arguments)]
fn shampoo_impl(
    oracle: &dyn GradOracle,
    blocks: &ShampooBlocks,
    theta0: &[f64],
    eta: f64,
    eps: f64,
    schedule: RootSchedule,
    opts: RunOptions,
    fp: String,
) -> Result<(Trajectory, ShampooDiagnostics)> {
    check_start(oracle, theta0)?;
    if !blocks.covers(theta0.len()) {
        return Err(LabError::Dimension(
            "shampoo blocks do not tile the parameter vector".into(),
        ));
    }
    let n = blocks.0.len();
    let mut state = ShampooState {
        left: blocks.0.iter().map(|b| Matrix::identity(b.rows).scale(eps)).collect(),
        right: blocks.0.iter().map(|b| Matrix::identity(b.cols).scale(eps)).collect(),
        left_root: vec![None; n],
        right_root: vec![None; n],
        eps,
        eta,
    };
    let mut diag = ShampooDiagnostics {
        min_eigenvalue: f64::INFINITY,
        max_asymmetry: 0.0,
        root_refreshes: 0,
    };
    let mut rec = Recorder::new(opts.steps, opts.stride, fp);
    let mut theta = theta0.to_vec();
    for t in 0..opts.steps {
        let (loss, g) = eval_checked(oracle, &theta, t)?;
        rec.record(t, &theta, loss);
        let refresh = schedule.refresh_at(t);
        if refresh {
            diag.root_refreshes += 1;
        }
        for (j, b) in blocks.0.iter().enumerate() {
            let gm = unvec(&g[b.range.clone()], b.rows, b.cols)?;
            let gt = gm.transpose();
            state.left[j] = state.left[j].add(&gm.matmul(&gt)?)?;
            state.right[j] = state.right[j].add(&gt.matmul(&gm)?)?;
            diag.max_asymmetry = diag
                .max_asymmetry
                .max(state.left[j].asymmetry())
                .max(state.right[j].asymmetry());
            if refresh {
                for acc in [&state.left[j], &state.right[j]] {
                    let e = sym_eig(acc)?;
                    let lo = *e.eigenvalues.last().unwrap_or(&f64::INFINITY);
                    diag.min_eigenvalue = diag.min_eigenvalue.min(lo);
                }
                state.left_root[j] = Some(inv_root(&state.left[j], RootPower::Quarter, DEFAULT_EIG_FLOOR)?);
                state.right_root[j] = Some(inv_root(&state.right[j], RootPower::Quarter, DEFAULT_EIG_FLOOR)?);
            }
            let step = match (&state.left_root[j], &state.right_root[j]) {
                (Some(l), Some(r)) => vec_col(&l.matmul(&gm)?.matmul(r)?),
                _ => {
                    // no root computed yet: diagonal scaling by the
                    // accumulators' diagonals
                    let mut s = vec![0.0; b.rows * b.cols];
                    for c in 0..b.cols {
                        let rc = state.right[j].get(c, c).powf(-0.25);
                        for r in 0..b.rows {
                            let lr = state.left[j].get(r, r).powf(-0.25);
                            s[c * b.rows + r] = lr * gm.get(r, c) * rc;
                        }
                    }
                    s
                }
            };
            for (th, s) in theta[b.range.clone()].iter_mut().zip(step) {
                *th -= eta * s;
            }
        }
        check_finite(t + 1, "theta", &theta)?;
    }
    let (loss, _) = eval_checked(oracle, &theta, opts.steps)?;
    rec.record(opts.steps, &theta, loss);
    Ok((rec.traj, diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(p: usize) -> FnOracle<impl Fn(&[f64]) -> (f64, Vec<f64>) + Sync> {
        FnOracle::new(p, |th: &[f64]| (0.5 * th.iter().map(|x| x * x).sum::<f64>(), th.to_vec()))
    }

    fn constant(g: Vec<f64>) -> FnOracle<impl Fn(&[f64]) -> (f64, Vec<f64>) + Sync> {
        let p = g.len();
        FnOracle::new(p, move |th: &[f64]| (crate::linalg::dot(th, &g), g.clone()))
    }

    #[test]
    fn gd_geometric_decay() {
        let tr = gd_run(&quadratic(1), &[1.0], 0.5, 5).unwrap();
        let xs: Vec<f64> = tr.iterates.iter().map(|v| v[0]).collect();
        assert_eq!(xs, vec![1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125]);
        assert_eq!(tr.losses.len(), 6);
        let still = gd_run(&quadratic(3), &[1.0, 2.0, 3.0], 0.0, 4).unwrap();
        assert!(still.iterates.iter().all(|v| v == &vec![1.0, 2.0, 3.0]));
    }

    #[test]
    fn heavy_ball_recursion() {
        let tr = gd_momentum_run(&constant(vec![1.0]), &[0.0], 0.1, 0.5, 3).unwrap();
        // velocities 1, 1.5, 1.75
        let xs: Vec<f64> = tr.iterates.iter().map(|v| v[0]).collect();
        let want = [0.0, -0.1, -0.25, -0.425];
        for (a, b) in xs.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_literal_first_step_is_null() {
        let cfg = AdamConfig {
            eta: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            standard_order: false,
        };
        let tr = adam_run(&quadratic(2), &[1.0, -2.0], cfg, 3).unwrap();
        assert_eq!(tr.iterates[1], tr.iterates[0]);
        assert_ne!(tr.iterates[2], tr.iterates[1]);
    }

    #[test]
    fn adam_state_arithmetic() {
        let cfg = AdamConfig {
            eta: 0.1,
            beta1: 0.5,
            beta2: 0.5,
            eps: 0.0,
            standard_order: false,
        };
        let mut st = AdamState::new(1, cfg);
        st.m = vec![1.0];
        st.v = vec![4.0];
        st.t = 3;
        let mut th = vec![1.0];
        st.literal_step(&mut th, |_| Ok(vec![0.0])).unwrap();
        assert!((th[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_betas_is_shifted_signgd() {
        let g = |th: &[f64]| vec![th[0] - 3.0, 0.5 * th[1] + 1.0, -th[2]];
        let oracle = FnOracle::new(3, move |th: &[f64]| (0.0, g(th)));
        let theta0 = [0.3, -0.7, 2.0];
        let cfg = AdamConfig {
            eta: 0.05,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            standard_order: false,
        };
        let adam = adam_run(&oracle, &theta0, cfg, 20).unwrap();
        let sign = signgd_run(&oracle, &theta0, 0.05, 0.0, 19).unwrap();
        for t in 0..20 {
            assert_eq!(adam.iterates[t + 1], sign.iterates[t]);
        }
    }

    #[test]
    fn adam_division_guard() {
        let cfg = AdamConfig {
            eta: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            standard_order: false,
        };
        let mut st = AdamState::new(1, cfg);
        st.m = vec![1.0];
        let mut th = vec![0.0];
        assert!(matches!(
            st.literal_step(&mut th, |_| Ok(vec![0.0])),
            Err(LabError::Numerical { .. })
        ));
        // 0/0 is a null move
        let mut st = AdamState::new(1, cfg);
        st.literal_step(&mut th, |_| Ok(vec![0.0])).unwrap();
        assert_eq!(th, vec![0.0]);
    }

    #[test]
    fn adam_standard_order_first_step() {
        let cfg = AdamConfig {
            eta: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 0.0,
            standard_order: true,
        };
        let tr = adam_run(&constant(vec![2.0, -0.5]), &[0.0, 0.0], cfg, 1).unwrap();
        // bias-corrected moments equal g and g², so the step is −η·sign(g)
        assert!((tr.iterates[1][0] + 0.1).abs() < 1e-15);
        assert!((tr.iterates[1][1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn signgd_examples() {
        let tr = signgd_run(&constant(vec![0.3, -0.1]), &[0.5, -0.2], 0.1, 0.0, 1).unwrap();
        assert!((tr.iterates[1][0] - 0.4).abs() < 1e-15);
        assert!((tr.iterates[1][1] + 0.1).abs() < 1e-15);
        let tr = signgd_run(&constant(vec![0.3, 0.0, -2.0]), &[0.0; 3], 0.1, 0.0, 4).unwrap();
        for w in tr.iterates.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                let d = b - a;
                assert!(d == 0.0 || (d.abs() - 0.1).abs() < 1e-15);
            }
        }
        assert_eq!(tr.final_theta()[1], 0.0);
    }

    #[test]
    fn signgd_large_eps_is_scaled_gd() {
        let g = [0.3, -0.1, 2.0];
        let eps = 1e8;
        let tr = signgd_run(&constant(g.to_vec()), &[0.0; 3], 1.0, eps, 1).unwrap();
        for (s, gi) in tr.iterates[1].iter().zip(g) {
            let want = -gi / eps.sqrt();
            assert!(((s - want) / want).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let bad = FnOracle::new(1, |th: &[f64]| (0.0, vec![if th[0] > 0.5 { f64::NAN } else { -1.0 }]));
        let err = gd_run(&bad, &[0.0], 0.3, 5).unwrap_err();
        assert!(matches!(err, LabError::Numerical { step: 2, .. }), "{err}");
        assert!(gd_run(&quadratic(2), &[1.0], 0.1, 1).is_err());
    }

    #[test]
    fn stride_keeps_final_iterate() {
        let tr = run(
            &OptimizerSpec::Gd { eta: 0.1, momentum: 0.0 },
            &quadratic(1),
            None,
            &[1.0],
            RunOptions { steps: 7, stride: 3 },
        )
        .unwrap();
        assert_eq!(tr.steps, vec![0, 3, 6, 7]);
        assert_eq!(tr.losses.len(), 8);
    }

    #[test]
    fn spec_validation_and_serde() {
        let s: OptimizerSpec =
            serde_json::from_str(r#"{"name":"adam","eta":0.01,"beta1":0.9999,"beta2":0.9999,"eps":3.0}"#)
                .unwrap();
        assert!(matches!(s, OptimizerSpec::Adam { standard_order: false, .. }));
        assert!(OptimizerSpec::Adam {
            eta: 0.1,
            beta1: 1.0,
            beta2: 0.5,
            eps: 0.0,
            standard_order: false
        }
        .validate()
        .is_err());
        assert!(OptimizerSpec::Shampoo {
            eta: 0.1,
            eps: 0.0,
            root_schedule: RootSchedule::default()
        }
        .validate()
        .is_err());
        let sg: OptimizerSpec = serde_json::from_str(r#"{"name":"signgd","eta":0.01,"eps":0.0}"#).unwrap();
        assert_eq!(sg.label(), "signgd");
    }

    fn one_by_one_arch() -> Architecture {
        use crate::model::{Activation, BiasSpec, LayerSpec, WeightSpec};
        Architecture::new(
            1,
            vec![LayerSpec {
                width: 1,
                activation: Activation::Identity,
                weights: WeightSpec::Trainable,
                bias: BiasSpec::None,
            }],
        )
        .unwrap()
    }

    #[test]
    fn shampoo_scalar_first_step() {
        let arch = one_by_one_arch();
        let (g, eps, eta) = (0.7, 0.01, 0.1);
        let (tr, _) =
            shampoo_run(&constant(vec![g]), &arch, &[0.0], eta, eps, 1, RootSchedule::default()).unwrap();
        let want = -eta * g / (eps + g * g).sqrt();
        assert!((tr.iterates[1][0] - want).abs() < 1e-14);
    }

    #[test]
    fn shampoo_zero_gradient_is_constant() {
        let (arch, theta) = crate::model::make_full_two_layer(2, 3, 1).unwrap();
        let zero = constant(vec![0.0; arch.num_params()]);
        let (tr, d) = shampoo_run(&zero, &arch, &theta, 0.1, 1e-4, 5, RootSchedule::default()).unwrap();
        assert!(tr.iterates.iter().all(|v| v[..] == theta[..]));
        assert!(d.min_eigenvalue >= 1e-4 - 1e-12);
    }

    #[test]
    fn root_schedule() {
        let s = RootSchedule {
            period: 3,
            include_step0: false,
        };
        let hits: Vec<usize> = (0..10).filter(|t| s.refresh_at(*t)).collect();
        assert_eq!(hits, vec![3, 6, 9]);
        assert!(RootSchedule::default().refresh_at(0));
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let oracle = FnOracle::new(3, |th: &[f64]| {
            let g: Vec<f64> = th.iter().map(|x| x.sin() + 0.3 * x).collect();
            (th.iter().map(|x| x.cos()).sum(), g)
        });
        let spec = OptimizerSpec::Adam {
            eta: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            standard_order: true,
        };
        let a = run(&spec, &oracle, None, &[0.1, 0.2, 0.3], RunOptions::new(50)).unwrap();
        let b = run(&spec, &oracle, None, &[0.1, 0.2, 0.3], RunOptions::new(50)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint.len(), 64);
    }
}

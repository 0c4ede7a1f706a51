//! Decision boundaries, classification risk and equivariance diagnostics.

use crate::datagen::{bayes_predict, sample, Dataset, MixtureParams};
use crate::error::{LabError, Result};
use crate::linalg::{norm2, rotate2_inverse, OrthogonalMatrix};
use crate::model::{Architecture, Scratch};
use crate::optim::Trajectory;
use crate::rng::{CounterRng, Stream};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for BBox {
    fn default() -> Self {
        Self::square(8.0)
    }
}

impl BBox {
    /// `[−half, half]²`.
    pub fn square(half: f64) -> Self {
        Self {
            x_min: -half,
            x_max: half,
            y_min: -half,
            y_max: half,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max;
        if ok {
            Ok(())
        } else {
            Err(LabError::Config(format!("invalid bounding box {self:?}")))
        }
    }

    pub fn contains(&self, p: [f64; 2], slack: f64) -> bool {
        p[0] >= self.x_min - slack
            && p[0] <= self.x_max + slack
            && p[1] >= self.y_min - slack
            && p[1] <= self.y_max + slack
    }
}

/// Zero level set traced on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Boundary {
    pub segments: Vec<[[f64; 2]; 2]>,
    pub bbox: BBox,
    /// Cells per axis.
    pub resolution: usize,
}

impl Boundary {
    /// Larger of the two cell side lengths.
    pub fn cell_size(&self) -> f64 {
        let r = self.resolution as f64;
        ((self.bbox.x_max - self.bbox.x_min) / r).max((self.bbox.y_max - self.bbox.y_min) / r)
    }

    pub fn points(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.segments.iter().flat_map(|s| s.iter().copied())
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

pub const MIN_RESOLUTION: usize = 16;

/// Marching squares on the `resolution × resolution` cell grid. Node values
/// of exactly zero count as positive, matching the `f ≥ 0 ↦ +1` rule.
pub fn extract_boundary<F>(predictor: F, bbox: BBox, resolution: usize) -> Result<Boundary>
where
    F: Fn([f64; 2]) -> f64 + Sync,
{
    bbox.validate()?;
    if resolution < MIN_RESOLUTION {
        return Err(LabError::Config(format!(
            "resolution must be at least {MIN_RESOLUTION}, got {resolution}"
        )));
    }
    let n = resolution + 1;
    let hx = (bbox.x_max - bbox.x_min) / resolution as f64;
    let hy = (bbox.y_max - bbox.y_min) / resolution as f64;
    let node = |i: usize, j: usize| [bbox.x_min + i as f64 * hx, bbox.y_min + j as f64 * hy];
    let values: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| (0..n).map(|i| predictor(node(i, j))).collect())
        .collect();
    for (j, row) in values.iter().enumerate() {
        if let Some(i) = row.iter().position(|v| !v.is_finite()) {
            return Err(LabError::NonFinite(format!(
                "predictor at grid node {:?}",
                node(i, j)
            )));
        }
    }
    let rows: Vec<Vec<[[f64; 2]; 2]>> = (0..resolution)
        .into_par_iter()
        .map(|j| {
            let mut out = Vec::new();
            for i in 0..resolution {
                // corners counter-clockwise from bottom-left
                let c = [node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)];
                let v = [
                    values[j][i],
                    values[j][i + 1],
                    values[j + 1][i + 1],
                    values[j + 1][i],
                ];
                cell_segments(&c, &v, &mut out);
            }
            out
        })
        .collect();
    Ok(Boundary {
        segments: rows.into_iter().flatten().collect(),
        bbox,
        resolution,
    })
}

fn crossing(a: [f64; 2], b: [f64; 2], va: f64, vb: f64) -> [f64; 2] {
    let t = va / (va - vb);
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

fn cell_segments(c: &[[f64; 2]; 4], v: &[f64; 4], out: &mut Vec<[[f64; 2]; 2]>) {
    let pos = v.map(|x| x >= 0.0);
    let mut pts = Vec::with_capacity(4);
    for e in 0..4 {
        let (a, b) = (e, (e + 1) % 4);
        if pos[a] != pos[b] {
            pts.push(crossing(c[a], c[b], v[a], v[b]));
        }
    }
    match pts.len() {
        2 => out.push([pts[0], pts[1]]),
        4 => {
            // saddle: the centre value decides which corners connect
            let centre = 0.25 * v.iter().sum::<f64>();
            if (centre >= 0.0) == pos[0] {
                out.push([pts[0], pts[3]]);
                out.push([pts[1], pts[2]]);
            } else {
                out.push([pts[0], pts[1]]);
                out.push([pts[2], pts[3]]);
            }
        }
        _ => {}
    }
}

/// Monte-Carlo misclassification rates of a predictor and of the Bayes rule
/// on the same draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub risk: f64,
    pub stderr: f64,
    pub n_mc: usize,
    pub bayes_risk: f64,
    pub bayes_stderr: f64,
    pub excess_risk: f64,
    /// Standard error of the paired per-sample difference.
    pub excess_stderr: f64,
}

pub const MIN_MC: usize = 10_000;

#[inline]
fn label(f: f64) -> f64 {
    if f >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Mean and standard error of a 0/1 sequence given its count and length.
fn bernoulli(count: f64, n: f64) -> (f64, f64) {
    let p = count / n;
    (p, (p * (1.0 - p) / (n - 1.0)).max(0.0).sqrt())
}

/// Per-sample errors of two predictors on one dataset: counts of errors of
/// each and the sum of squared paired differences.
fn paired_counts<A, B>(data: &Dataset, a: &A, b: &B) -> (f64, f64, f64)
where
    A: Fn([f64; 2]) -> f64 + Sync,
    B: Fn([f64; 2]) -> f64 + Sync,
{
    let partials: Vec<[f64; 3]> = data
        .features
        .par_chunks(crate::loss::REDUCTION_CHUNK)
        .zip(data.labels.par_chunks(crate::loss::REDUCTION_CHUNK))
        .map(|(xs, ys)| {
            let mut acc = [0.0; 3];
            for (x, y) in xs.iter().zip(ys) {
                let ea = (label(a(*x)) != *y) as u8 as f64;
                let eb = (label(b(*x)) != *y) as u8 as f64;
                acc[0] += ea;
                acc[1] += eb;
                acc[2] += (ea - eb) * (ea - eb);
            }
            acc
        })
        .collect();
    partials.iter().fold((0.0, 0.0, 0.0), |s, p| (s.0 + p[0], s.1 + p[1], s.2 + p[2]))
}

fn diff_stderr(ea: f64, eb: f64, sq: f64, n: f64) -> f64 {
    let mean = (ea - eb) / n;
    let var = (sq / n - mean * mean) * n / (n - 1.0);
    (var.max(0.0) / n).sqrt()
}

/// Risk of `predictor` (label `+1` where it is nonnegative) on fresh samples
/// of the mixture rotated by `gamma`.
pub fn classification_risk<F>(
    predictor: F,
    params: &MixtureParams,
    gamma: f64,
    n_mc: usize,
    seed: u64,
) -> Result<RiskReport>
where
    F: Fn([f64; 2]) -> f64 + Sync,
{
    if n_mc < MIN_MC {
        return Err(LabError::Config(format!("n_mc must be at least {MIN_MC}, got {n_mc}")));
    }
    let data = sample(params, gamma, n_mc, seed)?;
    let bayes = |x: [f64; 2]| bayes_predict(params, gamma, x);
    let (ea, eb, sq) = paired_counts(&data, &predictor, &bayes);
    let n = n_mc as f64;
    let (risk, stderr) = bernoulli(ea, n);
    let (bayes_risk, bayes_stderr) = bernoulli(eb, n);
    Ok(RiskReport {
        risk,
        stderr,
        n_mc,
        bayes_risk,
        bayes_stderr,
        excess_risk: risk - bayes_risk,
        excess_stderr: diff_stderr(ea, eb, sq, n),
    })
}

/// Two predictors scored on one shared draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedRisk {
    pub risk_a: f64,
    pub stderr_a: f64,
    pub risk_b: f64,
    pub stderr_b: f64,
    /// `risk_a − risk_b`.
    pub difference: f64,
    /// Standard error of the per-sample paired difference.
    pub paired_stderr: f64,
    /// `√(se_a² + se_b²)`.
    pub combined_stderr: f64,
    pub n_mc: usize,
}

pub fn paired_risk<A, B>(
    a: A,
    b: B,
    params: &MixtureParams,
    gamma: f64,
    n_mc: usize,
    seed: u64,
) -> Result<PairedRisk>
where
    A: Fn([f64; 2]) -> f64 + Sync,
    B: Fn([f64; 2]) -> f64 + Sync,
{
    if n_mc < MIN_MC {
        return Err(LabError::Config(format!("n_mc must be at least {MIN_MC}, got {n_mc}")));
    }
    let data = sample(params, gamma, n_mc, seed)?;
    let (ea, eb, sq) = paired_counts(&data, &a, &b);
    let n = n_mc as f64;
    let (risk_a, stderr_a) = bernoulli(ea, n);
    let (risk_b, stderr_b) = bernoulli(eb, n);
    Ok(PairedRisk {
        risk_a,
        stderr_a,
        risk_b,
        stderr_b,
        difference: risk_a - risk_b,
        paired_stderr: diff_stderr(ea, eb, sq, n),
        combined_stderr: (stderr_a * stderr_a + stderr_b * stderr_b).sqrt(),
        n_mc,
    })
}

/// Network output as a function of a 2-D input.
pub fn net_predictor<'a>(arch: &'a Architecture, theta: &'a [f64]) -> Result<impl Fn([f64; 2]) -> f64 + Sync + 'a> {
    if arch.input_dim() != 2 {
        return Err(LabError::Dimension("decision boundaries need a 2-D input".into()));
    }
    let net = arch.bind(theta)?;
    Ok(move |x: [f64; 2]| {
        thread_local! {
            static SCRATCH: std::cell::RefCell<Scratch> = std::cell::RefCell::new(Scratch::default());
        }
        SCRATCH.with(|s| net.forward(&x, &mut s.borrow_mut()))
    })
}

/// Per recorded iterate, `min_k cos(w_k, a_k (1,1)/√2)` for a fixed-outer
/// two-layer network.
pub fn row_direction_convergence(traj: &Trajectory, arch: &Architecture) -> Result<Vec<f64>> {
    let a = arch
        .fixed_outer_weights()
        .ok_or_else(|| LabError::Unsupported("needs the fixed-outer two-layer family".into()))?;
    if arch.input_dim() != 2 {
        return Err(LabError::Unsupported("needs 2-D inputs".into()));
    }
    let m = a.len();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    traj.iterates
        .iter()
        .zip(&traj.steps)
        .map(|(theta, &t)| {
            let mut worst = f64::INFINITY;
            for k in 0..m {
                // column-major W: row k is (θ[k], θ[m + k])
                let w = [theta[k], theta[m + k]];
                let n = norm2(&w);
                if n == 0.0 {
                    return Err(LabError::Numerical {
                        step: t,
                        what: format!("row {k} of W is zero"),
                    });
                }
                let c = a[k] * s * (w[0] + w[1]) / n;
                worst = worst.min(c);
            }
            Ok(worst)
        })
        .collect()
}

/// `max_t ‖θ_t^(rot) − Qᵀ θ_t^(base)‖ / (1 + ‖θ_t^(base)‖)`.
pub fn equivariance_residual(rot: &Trajectory, base: &Trajectory, q: &OrthogonalMatrix) -> Result<f64> {
    equivariance_residual_with(rot, base, |th| q.apply_transposed(th))
}

/// As [`equivariance_residual`] with an arbitrary map in place of `Qᵀ`.
pub fn equivariance_residual_with<F>(rot: &Trajectory, base: &Trajectory, map: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if rot.iterates.len() != base.iterates.len() || rot.steps != base.steps {
        return Err(LabError::Dimension(format!(
            "trajectories have {} and {} snapshots",
            rot.iterates.len(),
            base.iterates.len()
        )));
    }
    let mut worst: f64 = 0.0;
    for (r, b) in rot.iterates.iter().zip(&base.iterates) {
        let mapped = map(b)?;
        if mapped.len() != r.len() {
            return Err(LabError::Dimension("iterate lengths differ".into()));
        }
        let diff: f64 = r.iter().zip(&mapped).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        worst = worst.max(diff / (1.0 + norm2(b)));
    }
    Ok(worst)
}

/// `max_t ‖θ_t^(a) − θ_t^(b)‖ / (1 + ‖θ_t^(b)‖)`.
pub fn invariance_residual(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    equivariance_residual_with(a, b, |th| Ok(th.to_vec()))
}

/// `max |f_rot(x) − f_base(U(γ)ᵀ x)|` over the probe points.
pub fn boundary_equivariance_check<A, B>(rot: A, base: B, gamma: f64, probes: &[[f64; 2]]) -> Result<f64>
where
    A: Fn([f64; 2]) -> f64 + Sync,
    B: Fn([f64; 2]) -> f64 + Sync,
{
    if probes.is_empty() {
        return Err(LabError::Empty("no probe points".into()));
    }
    Ok(probes
        .par_iter()
        .map(|&x| (rot(x) - base(rotate2_inverse(gamma, x))).abs())
        .reduce(|| 0.0, f64::max))
}

/// Uniform probe points in a box, addressed by seed.
pub fn probe_points(bbox: BBox, n: usize, seed: u64) -> Vec<[f64; 2]> {
    let rng = CounterRng::new(seed);
    (0..n as u64)
        .map(|k| {
            let u = rng.uniform(Stream::Probe, 2 * k);
            let v = rng.uniform(Stream::Probe, 2 * k + 1);
            [
                bbox.x_min + u * (bbox.x_max - bbox.x_min),
                bbox.y_min + v * (bbox.y_max - bbox.y_min),
            ]
        })
        .collect()
}

/// Largest distance from a traced point to the line `x₁ = −x₂`.
pub fn max_distance_to_antidiagonal(b: &Boundary) -> f64 {
    b.points()
        .map(|p| (p[0] + p[1]).abs() * std::f64::consts::FRAC_1_SQRT_2)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_fixed_outer_two_layer;
    use std::f64::consts::PI;

    fn circle_error(res: usize) -> f64 {
        let b = extract_boundary(|x| x[0] * x[0] + x[1] * x[1] - 1.0, BBox::square(2.0), res).unwrap();
        let radial = b.points().map(|p| (norm2(&p) - 1.0).abs()).fold(0.0, f64::max);
        // coverage: every point of the circle is close to some segment
        let cover = (0..720)
            .map(|k| {
                let t = k as f64 * PI / 360.0;
                let q = [t.cos(), t.sin()];
                b.segments
                    .iter()
                    .map(|s| point_segment_distance(q, s))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        radial.max(cover)
    }

    fn point_segment_distance(q: [f64; 2], s: &[[f64; 2]; 2]) -> f64 {
        let d = [s[1][0] - s[0][0], s[1][1] - s[0][1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((q[0] - s[0][0]) * d[0] + (q[1] - s[0][1]) * d[1]) / len2).clamp(0.0, 1.0)
        };
        norm2(&[q[0] - s[0][0] - t * d[0], q[1] - s[0][1] - t * d[1]])
    }

    #[test]
    fn linear_predictor_traces_a_line() {
        let b = extract_boundary(|x| x[0] + x[1], BBox::default(), 64).unwrap();
        assert!(!b.is_empty());
        let cell = b.cell_size();
        for p in b.points() {
            assert!((p[0] + p[1]).abs() <= 2.0 * cell);
            assert!(b.bbox.contains(p, 1e-12));
        }
        for s in &b.segments {
            let d = [s[1][0] - s[0][0], s[1][1] - s[0][1]];
            // direction (1, −1) up to orientation
            assert!((d[0] + d[1]).abs() <= 1e-9 * (1.0 + norm2(&d)));
        }
        assert!(max_distance_to_antidiagonal(&b) <= 1e-12);
    }

    #[test]
    fn circle_is_traced_and_refines() {
        let mut last = f64::INFINITY;
        for res in [16, 32, 64, 128] {
            let e = circle_error(res);
            let cell = 4.0 / res as f64;
            assert!(e <= cell, "res {res}: {e} > {cell}");
            assert!(e <= 0.5 * last);
            last = e;
        }
    }

    #[test]
    fn saddle_cells_produce_two_segments() {
        let b = extract_boundary(|x| x[0] * x[1], BBox::square(1.0), 16).unwrap();
        assert!(b.points().all(|p| p[0].abs() < 1e-12 || p[1].abs() < 1e-12));
    }

    #[test]
    fn boundary_errors() {
        assert!(extract_boundary(|x| x[0], BBox::default(), 8).is_err());
        assert!(extract_boundary(|_| f64::NAN, BBox::default(), 16).is_err());
        assert!(extract_boundary(|x| x[0], BBox::square(-1.0), 16).is_err());
    }

    #[test]
    fn risk_examples() {
        let p = MixtureParams::reference();
        let bayes = classification_risk(|x| bayes_predict(&p, 0.3, x), &p, 0.3, 20_000, 1).unwrap();
        assert_eq!(bayes.excess_risk, 0.0);
        let constant = classification_risk(|_| 1.0, &p, 0.3, 20_000, 2).unwrap();
        assert!((constant.risk - 0.5).abs() <= 3.0 * constant.stderr);
        assert!(constant.excess_risk >= -3.0 * constant.excess_stderr);
        assert!(classification_risk(|_| 1.0, &p, 0.3, 100, 2).is_err());
    }

    #[test]
    fn analytic_boundaries_ordered_at_small_rotation() {
        // sign(x₁+x₂) against the GD limit sign(x₁) rotated by γ; GD rows
        // align with ±(1,0) in the unrotated problem
        let p = MixtureParams::reference();
        let g = PI / 32.0;
        let gd_like = move |x: [f64; 2]| rotate2_inverse(g, x)[0];
        let res = paired_risk(|x| x[0] + x[1], gd_like, &p, g, 100_000, 3).unwrap();
        assert!(res.difference > 5.0 * res.combined_stderr, "{res:?}");
    }

    #[test]
    fn direction_convergence_examples() {
        let a = [1.0, -1.0];
        let (arch, _) = make_fixed_outer_two_layer(2, 2, &a, 0).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mk = |theta: Vec<f64>| Trajectory {
            steps: vec![0],
            iterates: vec![theta],
            losses: vec![0.0],
            stride: 1,
            fingerprint: String::new(),
        };
        // rows (s,s) and (−s,−s)
        let c = row_direction_convergence(&mk(vec![s, -s, s, -s]), &arch).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-15);
        // the a=−1 row pointing along (1,1)
        let c = row_direction_convergence(&mk(vec![s, s, s, s]), &arch).unwrap();
        assert!((c[0] + 1.0).abs() < 1e-15);
        assert!(row_direction_convergence(&mk(vec![0.0, 1.0, 0.0, 1.0]), &arch).is_err());
    }

    #[test]
    fn residuals() {
        let q = crate::linalg::rotation_matrix(0.4);
        let base = Trajectory {
            steps: vec![0, 1],
            iterates: vec![vec![1.0, 2.0], vec![-0.5, 0.25]],
            losses: vec![0.0, 0.0],
            stride: 1,
            fingerprint: String::new(),
        };
        let mut rot = base.clone();
        rot.iterates = base.iterates.iter().map(|t| q.apply_transposed(t).unwrap()).collect();
        assert_eq!(equivariance_residual(&rot, &base, &q).unwrap(), 0.0);
        assert_eq!(invariance_residual(&base, &base).unwrap(), 0.0);
        let mut short = base.clone();
        short.iterates.pop();
        short.steps.pop();
        assert!(equivariance_residual(&short, &base, &q).is_err());
    }

    #[test]
    fn boundary_check_identity() {
        let probes = probe_points(BBox::default(), 100, 1);
        assert!(probes.iter().all(|p| BBox::default().contains(*p, 0.0)));
        let f = |x: [f64; 2]| x[0] * x[0] - 0.3 * x[1];
        assert_eq!(boundary_equivariance_check(f, f, 0.0, &probes).unwrap(), 0.0);
        let g = PI / 5.0;
        let rot = move |x: [f64; 2]| f(rotate2_inverse(g, x));
        assert!(boundary_equivariance_check(rot, f, g, &probes).unwrap() <= 1e-14);
        assert!(boundary_equivariance_check(f, f, 0.0, &[]).is_err());
    }

    #[test]
    fn net_predictor_matches_forward() {
        let (arch, theta) = make_fixed_outer_two_layer(2, 3, &[1.0, -1.0, 1.0], 2).unwrap();
        let f = net_predictor(&arch, &theta).unwrap();
        let x = [0.4, -1.3];
        assert_eq!(f(x), crate::model::forward(&arch, &theta, &x).unwrap());
    }
}

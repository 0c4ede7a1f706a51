//! The rotated three-cluster Gaussian mixture, its Bayes classifier and the
//! parameter conditions used by the sign-pattern analysis.

use crate::error::{LabError, Result};
use crate::linalg::{rotate2, rotate2_inverse, sqrt_half_pi, std_normal_cdf};
use crate::rng::{CounterRng, Stream};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Mixture parameters `(ω, μ, σ)`; `μ₁` and `μ₃` are always derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture", into = "RawMixture")]
pub struct MixtureParams {
    omega: f64,
    mu: f64,
    sigma: f64,
}

#[derive(Serialize, Deserialize)]
struct RawMixture {
    omega: f64,
    mu: f64,
    sigma: f64,
}

impl TryFrom<RawMixture> for MixtureParams {
    type Error = LabError;
    fn try_from(r: RawMixture) -> Result<Self> {
        MixtureParams::new(r.omega, r.mu, r.sigma)
    }
}

impl From<MixtureParams> for RawMixture {
    fn from(p: MixtureParams) -> Self {
        RawMixture {
            omega: p.omega,
            mu: p.mu,
            sigma: p.sigma,
        }
    }
}

impl MixtureParams {
    pub fn new(omega: f64, mu: f64, sigma: f64) -> Result<Self> {
        if !(omega.is_finite() && omega > 1.0) {
            return Err(LabError::Domain(format!("omega must exceed 1, got {omega}")));
        }
        if !(mu.is_finite() && mu > 0.0) {
            return Err(LabError::Domain(format!("mu must be positive, got {mu}")));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(LabError::Domain(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { omega, mu, sigma })
    }

    /// `ω = 2(1+√2)`, `μ = 1.15`, `σ = 1`.
    pub fn reference() -> Self {
        Self::new(2.0 * (1.0 + 2f64.sqrt()), 1.15, 1.0).expect("valid reference params")
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mu1(&self) -> f64 {
        derive_means_unchecked(self.omega, self.mu).0
    }

    pub fn mu3(&self) -> f64 {
        derive_means_unchecked(self.omega, self.mu).1
    }

    /// Signal-to-noise ratio `μ/σ`.
    pub fn snr(&self) -> f64 {
        self.mu / self.sigma
    }
}

fn derive_means_unchecked(omega: f64, mu: f64) -> (f64, f64) {
    let half = 0.5 * mu;
    (half * (omega - 1.0 / omega), half * (omega + 1.0 / omega))
}

/// `(μ₁, μ₃)` from the realizability coupling.
pub fn derive_means(omega: f64, mu: f64) -> Result<(f64, f64)> {
    if !(omega > 1.0) || !(mu > 0.0) {
        return Err(LabError::Domain(format!(
            "derive_means needs omega > 1 and mu > 0, got ({omega}, {mu})"
        )));
    }
    Ok(derive_means_unchecked(omega, mu))
}

/// Cluster centres (unrotated): `μ₊`, `μ₊₋` carry label +1, `μ₋` label −1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterMeans {
    pub mu_plus: [f64; 2],
    pub mu_pm: [f64; 2],
    pub mu_minus: [f64; 2],
}

pub fn cluster_means(params: &MixtureParams) -> ClusterMeans {
    let half = 0.5 * params.mu;
    let (w, inv) = (params.omega, 1.0 / params.omega);
    ClusterMeans {
        mu_plus: [half * (w - inv), 2.0 * half],
        mu_pm: [half * (w - inv), -2.0 * half],
        mu_minus: [-half * (w + inv), 0.0],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<[f64; 2]>,
    pub labels: Vec<f64>,
    pub gamma: f64,
    pub seed: u64,
    pub params: MixtureParams,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Writes `x1,x2,y` CSV with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x1,x2,y")?;
        for (x, y) in self.features.iter().zip(&self.labels) {
            writeln!(
                w,
                "{},{},{}",
                crate::io::fmt_f64(x[0]),
                crate::io::fmt_f64(x[1]),
                if *y > 0.0 { "1" } else { "-1" }
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }

    /// Reads `x1,x2,y` CSV. Metadata that the file does not carry (angle,
    /// seed, mixture parameters) is supplied by the caller.
    pub fn read_csv<R: BufRead>(
        r: R,
        params: MixtureParams,
        gamma: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| LabError::Parse("empty dataset file".into()))??;
        if header.trim() != "x1,x2,y" {
            return Err(LabError::Parse(format!("unexpected header {header:?}")));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(LabError::Parse(format!("line {}: expected 3 fields", lineno + 2)));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| LabError::Parse(format!("line {}: {e}", lineno + 2)))
            };
            let x1 = parse(fields[0])?;
            let x2 = parse(fields[1])?;
            let y = match fields[2].trim() {
                "1" | "+1" => 1.0,
                "-1" => -1.0,
                other => {
                    return Err(LabError::Parse(format!(
                        "line {}: label {other:?} is not ±1",
                        lineno + 2
                    )))
                }
            };
            features.push([x1, x2]);
            labels.push(y);
        }
        Ok(Self {
            features,
            labels,
            gamma,
            seed,
            params,
        })
    }
}

const SAMPLE_CHUNK: usize = 4096;

/// Draws `n` labelled points from the mixture rotated by `gamma`.
///
/// The unrotated point for index `k` depends only on `(seed, k)`, so datasets
/// with equal seeds and different angles are exact rotations of each other.
pub fn sample(params: &MixtureParams, gamma: f64, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(LabError::Empty("sample size must be at least 1".into()));
    }
    if !gamma.is_finite() {
        return Err(LabError::Domain("rotation angle must be finite".into()));
    }
    let rng = CounterRng::new(seed);
    let (mu1, mu3) = (params.mu1(), params.mu3());
    let (mu2, sigma) = (params.mu, params.sigma);
    let chunks: Vec<(Vec<[f64; 2]>, Vec<f64>)> = (0..n)
        .step_by(SAMPLE_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let len = SAMPLE_CHUNK.min(n - start);
            let z1 = rng.normals(Stream::NoiseX1, start as u64, len);
            let z2 = rng.normals(Stream::NoiseX2, start as u64, len);
            let mut xs = Vec::with_capacity(len);
            let mut ys = Vec::with_capacity(len);
            for k in 0..len {
                let idx = (start + k) as u64;
                let y = rng.rademacher(Stream::Label, idx);
                let eps = rng.rademacher(Stream::Component, idx);
                let x1 = 0.5 * (mu1 - mu3) + y * 0.5 * (mu1 + mu3) + sigma * z1[k];
                let x2 = mu2 * eps * 0.5 * (y + 1.0) + sigma * z2[k];
                xs.push(if gamma == 0.0 { [x1, x2] } else { rotate2(gamma, [x1, x2]) });
                ys.push(y);
            }
            (xs, ys)
        })
        .collect();
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (xs, ys) in chunks {
        features.extend(xs);
        labels.extend(ys);
    }
    Ok(Dataset {
        features,
        labels,
        gamma,
        seed,
        params: *params,
    })
}

/// The unrotated Bayes decision function; the classifier predicts +1 where it
/// is nonnegative. Its zero set passes through the origin.
pub fn bayes_decision_value(params: &MixtureParams, x: [f64; 2]) -> f64 {
    let s2 = params.sigma * params.sigma;
    let t = -2.0 * params.mu * x[1] / s2;
    // log((1 + e^t)/2), evaluated stably for large |t|
    let log_term = if t > 0.0 {
        t + (-t).exp().ln_1p() - std::f64::consts::LN_2
    } else {
        t.exp().ln_1p() - std::f64::consts::LN_2
    };
    x[1] + params.omega * x[0] + (s2 / params.mu) * log_term
}

/// Bayes-optimal label for the mixture rotated by `gamma`.
pub fn bayes_predict(params: &MixtureParams, gamma: f64, x: [f64; 2]) -> f64 {
    let base = if gamma == 0.0 { x } else { rotate2_inverse(gamma, x) };
    if bayes_decision_value(params, base) >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `c_μ = Φ(S·min{1, (ω − 1/ω)/2})`.
pub fn c_mu(params: &MixtureParams) -> f64 {
    let w = params.omega;
    std_normal_cdf(params.snr() * (1.0f64).min(0.5 * (w - 1.0 / w)))
}

/// Outcome of the SNR/slope condition check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Assumption2Check {
    pub satisfied: bool,
    /// RHS minus `1/S`; negative when the SNR bound fails.
    pub slack: f64,
    pub omega_bound_holds: bool,
    pub c_mu: f64,
}

/// Checks `ω > √(2/c_μ)` and
/// `1/S ≤ √(π/2)·((c_μ ω − 2/ω) sin γ / 2 − cos γ)` for `γ ∈ (0, π/4]`.
pub fn check_assumption2(params: &MixtureParams, gamma: f64) -> Result<Assumption2Check> {
    if !(gamma > 0.0 && gamma <= std::f64::consts::FRAC_PI_4 + 1e-15) {
        return Err(LabError::Unsupported(format!(
            "assumption check is only defined for gamma in (0, pi/4], got {gamma}"
        )));
    }
    let c = c_mu(params);
    let w = params.omega;
    let omega_bound_holds = w > (2.0 / c).sqrt();
    let rhs = sqrt_half_pi() * (0.5 * (c * w - 2.0 / w) * gamma.sin() - gamma.cos());
    let slack = rhs - 1.0 / params.snr();
    Ok(Assumption2Check {
        satisfied: omega_bound_holds && slack >= 0.0,
        slack,
        omega_bound_holds,
        c_mu: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn derived_means() {
        let (m1, m3) = derive_means(2.0 * (1.0 + 2f64.sqrt()), 1.15).unwrap();
        assert!((m1 - 2.657_26).abs() < 1e-5, "{m1}");
        assert!((m3 - 2.895_43).abs() < 1e-5, "{m3}");
        assert_eq!(derive_means(2.0, 2.0).unwrap(), (1.5, 2.5));
        // boundary algebra at ω = 1
        assert_eq!(derive_means_unchecked(1.0, 1.7), (0.0, 1.7));
        assert!(derive_means(1.0, 1.0).is_err());
        assert!(derive_means(2.0, 0.0).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(MixtureParams::new(0.5, 1.0, 1.0).is_err());
        assert!(MixtureParams::new(2.0, -1.0, 1.0).is_err());
        assert!(MixtureParams::new(2.0, 1.0, 0.0).is_err());
        let p: std::result::Result<MixtureParams, _> =
            serde_json::from_str(r#"{"omega":0.9,"mu":1,"sigma":1}"#);
        assert!(p.is_err());
    }

    #[test]
    fn cluster_mean_values() {
        let p = MixtureParams::new(2.0, 2.0, 1.0).unwrap();
        let c = cluster_means(&p);
        assert_eq!(c.mu_plus, [1.5, 2.0]);
        assert_eq!(c.mu_pm, [1.5, -2.0]);
        assert_eq!(c.mu_minus, [-2.5, 0.0]);
        assert_eq!(c.mu_plus[1] + c.mu_pm[1], 0.0);
    }

    fn minus_class_mean(ds: &Dataset) -> [f64; 2] {
        let (mut s, mut n) = ([0.0; 2], 0usize);
        for (x, y) in ds.features.iter().zip(&ds.labels) {
            if *y < 0.0 {
                s[0] += x[0];
                s[1] += x[1];
                n += 1;
            }
        }
        [s[0] / n as f64, s[1] / n as f64]
    }

    #[test]
    fn minus_cluster_mean_and_rotation() {
        let p = MixtureParams::reference();
        let n = 100_000;
        let tol = 3.0 * p.sigma() / ((n / 2) as f64).sqrt();
        let target = cluster_means(&p).mu_minus;
        let ds0 = sample(&p, 0.0, n, 5).unwrap();
        let m0 = minus_class_mean(&ds0);
        assert!((m0[0] - target[0]).abs() < tol && (m0[1] - target[1]).abs() < tol);

        let ds90 = sample(&p, PI / 2.0, n, 6).unwrap();
        let m90 = minus_class_mean(&ds90);
        let rt = rotate2(PI / 2.0, target);
        assert!((m90[0] - rt[0]).abs() < tol && (m90[1] - rt[1]).abs() < tol);
    }

    #[test]
    fn monte_carlo_cluster_means() {
        let p = MixtureParams::reference();
        let n = 200_000;
        let ds = sample(&p, 0.0, n, 77).unwrap();
        let c = cluster_means(&p);
        // group by the latent component draw
        let rng = CounterRng::new(77);
        let mut acc = [[0.0f64; 2]; 3];
        let mut cnt = [0usize; 3];
        for (k, (x, y)) in ds.features.iter().zip(&ds.labels).enumerate() {
            let e = rng.rademacher(Stream::Component, k as u64);
            let g = if *y < 0.0 { 2 } else if e > 0.0 { 0 } else { 1 };
            acc[g][0] += x[0];
            acc[g][1] += x[1];
            cnt[g] += 1;
        }
        for (g, target) in [c.mu_plus, c.mu_pm, c.mu_minus].iter().enumerate() {
            let se = p.sigma() / (cnt[g] as f64).sqrt();
            for j in 0..2 {
                let m = acc[g][j] / cnt[g] as f64;
                assert!((m - target[j]).abs() < 3.0 * se, "group {g} coord {j}: {m}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_balanced() {
        let p = MixtureParams::reference();
        let a = sample(&p, 0.3, 10_000, 11).unwrap();
        let b = sample(&p, 0.3, 10_000, 11).unwrap();
        assert_eq!(a, b);
        let n = 100_000;
        let ds = sample(&p, 0.0, n, 12).unwrap();
        let mean: f64 = ds.labels.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() <= 4.0 / (n as f64).sqrt());
        assert!(sample(&p, 0.0, 0, 1).is_err());
    }

    #[test]
    fn rotated_sample_is_rotation_of_base() {
        let p = MixtureParams::reference();
        let base = sample(&p, 0.0, 5000, 3).unwrap();
        for &g in &[0.1, PI / 32.0, 2.5, 7.0 * PI / 8.0] {
            let rot = sample(&p, g, 5000, 3).unwrap();
            assert_eq!(rot.labels, base.labels);
            for (r, b) in rot.features.iter().zip(&base.features) {
                let e = rotate2(g, *b);
                assert!((r[0] - e[0]).abs() <= 1e-12 && (r[1] - e[1]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn bayes_rule_examples() {
        let p = MixtureParams::reference();
        assert_eq!(bayes_predict(&p, 0.0, [0.0, 0.0]), 1.0);
        assert!(bayes_decision_value(&p, [0.0, 0.0]).abs() <= 1e-12);
        assert_eq!(bayes_predict(&p, 0.0, [0.0, 10.0]), 1.0);
        // x = (−10, 0): 0 ≥ 10ω is false
        assert_eq!(bayes_predict(&p, 0.0, [-10.0, 0.0]), -1.0);
        // x = (0, −10): the log term dominates in favour of +1
        assert_eq!(bayes_predict(&p, 0.0, [0.0, -10.0]), 1.0);
        assert_eq!(bayes_predict(&p, 0.0, [10.0, 0.0]), 1.0);
    }

    #[test]
    fn bayes_rule_is_equivariant() {
        let p = MixtureParams::reference();
        let rng = CounterRng::new(9);
        for k in 0..500u64 {
            let g = 2.0 * PI * rng.uniform(Stream::Probe, 3 * k);
            let x = [
                6.0 * rng.normal(Stream::Probe, 3 * k + 1),
                6.0 * rng.normal(Stream::Probe, 3 * k + 2),
            ];
            assert_eq!(
                bayes_predict(&p, g, rotate2(g, x)),
                bayes_predict(&p, 0.0, x)
            );
        }
    }

    #[test]
    fn bayes_boundary_through_origin() {
        for &(w, mu, s) in &[(1.5, 0.3, 2.0), (4.8, 1.15, 1.0), (10.0, 5.0, 0.1)] {
            let p = MixtureParams::new(w, mu, s).unwrap();
            assert!(bayes_decision_value(&p, [0.0, 0.0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn c_mu_values() {
        let p = MixtureParams::reference();
        assert!((c_mu(&p) - 0.874_93).abs() < 1e-5);
        let tiny = MixtureParams::new(3.0, 1e-9, 1.0).unwrap();
        assert!((c_mu(&tiny) - 0.5).abs() < 1e-9);
        let huge = MixtureParams::new(3.0, 1e3, 1.0).unwrap();
        assert!((c_mu(&huge) - 1.0).abs() < 1e-12);
        let rng = CounterRng::new(4);
        for k in 0..1000u64 {
            let p = MixtureParams::new(
                1.0 + 10.0 * rng.uniform(Stream::Probe, 3 * k),
                0.01 + 5.0 * rng.uniform(Stream::Probe, 3 * k + 1),
                0.01 + 5.0 * rng.uniform(Stream::Probe, 3 * k + 2),
            )
            .unwrap();
            let c = c_mu(&p);
            assert!((0.5..=1.0).contains(&c));
        }
    }

    #[test]
    fn assumption2_reference_params() {
        let p = MixtureParams::reference();
        // The printed inequality evaluates to RHS ≈ 0.80217 against 1/S ≈ 0.86957
        // at γ = π/4, so it does not hold for these parameters.
        let at_quarter = check_assumption2(&p, PI / 4.0).unwrap();
        assert!(at_quarter.omega_bound_holds);
        assert!((at_quarter.slack - (0.802_173_989_288_536_8 - 1.0 / 1.15)).abs() < 1e-9);
        assert!(!at_quarter.satisfied);

        let small = check_assumption2(&p, PI / 32.0).unwrap();
        assert!(!small.satisfied);
        assert!(small.slack < 0.0);

        // γ → 0⁺: RHS → −√(π/2)
        let limit = check_assumption2(&p, 1e-12).unwrap();
        assert!(((limit.slack + 1.0 / p.snr()) + sqrt_half_pi()).abs() < 1e-9);
        assert!(!limit.satisfied);
    }

    #[test]
    fn assumption2_satisfiable_with_higher_snr() {
        let p = MixtureParams::new(2.0 * (1.0 + 2f64.sqrt()), 2.0, 1.0).unwrap();
        assert!(check_assumption2(&p, PI / 4.0).unwrap().satisfied);
    }

    #[test]
    fn assumption2_rejects_out_of_range() {
        let p = MixtureParams::reference();
        for g in [0.0, -0.1, PI / 2.0, 1.0] {
            assert!(matches!(check_assumption2(&p, g), Err(LabError::Unsupported(_))));
        }
    }

    #[test]
    fn csv_round_trip() {
        let p = MixtureParams::reference();
        let ds = sample(&p, 0.4, 50, 1).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x1,x2,y\n"));
        let back = Dataset::read_csv(&buf[..], p, 0.4, 1).unwrap();
        assert_eq!(back, ds);
        assert!(Dataset::read_csv(&b"a,b\n"[..], p, 0.0, 0).is_err());
        assert!(Dataset::read_csv(&b"x1,x2,y\n1,2,0\n"[..], p, 0.0, 0).is_err());
    }
}

//! Linear correlation loss `L_N(θ) = (1/N) Σ −y_k f(θ; x_k)` and the
//! closed-form population gradient of the fixed-outer two-layer network.

use crate::datagen::{cluster_means, Dataset, MixtureParams};
use crate::error::{LabError, Result};
use crate::linalg::{dot, norm2, rotate2, std_normal, Matrix};
use crate::model::{Architecture, Scratch};
use crate::optim::GradOracle;
use rayon::prelude::*;

/// Samples per reduction chunk. Partial sums are formed per chunk and then
/// added in chunk order, so results do not depend on the thread count.
pub const REDUCTION_CHUNK: usize = 256;

/// Full-batch sample loss over a fixed dataset.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    arch: Architecture,
    /// row-major `n × d`
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl SampleLoss {
    pub fn new(arch: Architecture, features: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if features.is_empty() {
            return Err(LabError::Empty("loss needs at least one sample".into()));
        }
        if features.len() != labels.len() {
            return Err(LabError::Dimension("features and labels differ in length".into()));
        }
        let d = arch.input_dim();
        if let Some(bad) = features.iter().find(|x| x.len() != d) {
            return Err(LabError::Dimension(format!(
                "sample of dimension {} for a network with input dimension {d}",
                bad.len()
            )));
        }
        Ok(Self {
            arch,
            features: features.concat(),
            labels,
        })
    }

    pub fn from_dataset(arch: Architecture, data: &Dataset) -> Result<Self> {
        let features = data.features.iter().map(|x| x.to_vec()).collect();
        Self::new(arch, features, data.labels.clone())
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample(&self, k: usize) -> &[f64] {
        let d = self.arch.input_dim();
        &self.features[k * d..(k + 1) * d]
    }

    /// Loss and gradient with a fixed, thread-count independent summation
    /// order.
    pub fn loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let net = self.arch.bind(theta)?;
        let n = self.len();
        let p = theta.len();
        let partials: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(REDUCTION_CHUNK))
            .into_par_iter()
            .map_init(Scratch::default, |scratch, c| {
                let mut g = vec![0.0; p];
                let mut l = 0.0;
                let end = ((c + 1) * REDUCTION_CHUNK).min(n);
                for k in c * REDUCTION_CHUNK..end {
                    let y = self.labels[k];
                    l -= y * net.accumulate_grad(self.sample(k), -y, &mut g, scratch);
                }
                (l, g)
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; p];
        for (l, g) in partials {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let inv = 1.0 / n as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok((loss * inv, grad))
    }

    pub fn loss(&self, theta: &[f64]) -> Result<f64> {
        let net = self.arch.bind(theta)?;
        let n = self.len();
        let partials: Vec<f64> = (0..n.div_ceil(REDUCTION_CHUNK))
            .into_par_iter()
            .map_init(Scratch::default, |scratch, c| {
                let end = ((c + 1) * REDUCTION_CHUNK).min(n);
                (c * REDUCTION_CHUNK..end)
                    .map(|k| -self.labels[k] * net.forward(self.sample(k), scratch))
                    .sum::<f64>()
            })
            .collect();
        Ok(partials.iter().sum::<f64>() / n as f64)
    }
}

impl GradOracle for SampleLoss {
    fn dim(&self) -> usize {
        self.arch.num_params()
    }

    fn eval(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.loss_grad(theta)
    }
}

/// Convenience wrapper: sample loss and gradient for one dataset.
pub fn sample_loss_grad(arch: &Architecture, theta: &[f64], data: &Dataset) -> Result<(f64, Vec<f64>)> {
    SampleLoss::from_dataset(arch.clone(), data)?.loss_grad(theta)
}

/// Gaussian probabilities and inverse Mills ratios for one direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PGammaTerms {
    pub p_plus: f64,
    pub p_pm: f64,
    pub p_minus: f64,
    pub gamma_plus: f64,
    pub gamma_pm: f64,
    pub gamma_minus: f64,
}

impl PGammaTerms {
    /// `p₊ + p₊₋ + 2p₋`, bounded below by `c_μ`.
    pub fn weighted_sum(&self) -> f64 {
        self.p_plus + self.p_pm + 2.0 * self.p_minus
    }
}

fn unit(w: [f64; 2]) -> Result<[f64; 2]> {
    let n = norm2(&w);
    if !(n > 0.0) || !n.is_finite() {
        return Err(LabError::Domain("direction w must be a nonzero finite vector".into()));
    }
    Ok([w[0] / n, w[1] / n])
}

fn terms_at(params: &MixtureParams, gamma: f64, wbar: [f64; 2]) -> (PGammaTerms, [[f64; 2]; 3]) {
    let cm = cluster_means(params);
    let means = [
        rotate2(gamma, cm.mu_plus),
        rotate2(gamma, cm.mu_pm),
        rotate2(gamma, cm.mu_minus),
    ];
    let s = params.sigma();
    let f = |m: [f64; 2]| {
        let (pdf, cdf) = std_normal(dot(&m, &wbar) / s);
        (cdf, pdf / cdf)
    };
    let (p_plus, gamma_plus) = f(means[0]);
    let (p_pm, gamma_pm) = f(means[1]);
    let (p_minus, gamma_minus) = f(means[2]);
    (
        PGammaTerms {
            p_plus,
            p_pm,
            p_minus,
            gamma_plus,
            gamma_pm,
            gamma_minus,
        },
        means,
    )
}

/// `p_α = Φ(⟨U μ_α, w̄⟩/σ)` and `Γ_α = φ/Φ` at the same argument.
pub fn p_gamma_terms(params: &MixtureParams, gamma: f64, w: [f64; 2]) -> Result<PGammaTerms> {
    Ok(terms_at(params, gamma, unit(w)?).0)
}

/// Population gradient of the correlation loss w.r.t. one row `w_k` of `W`
/// under the mixture rotated by `gamma`.
pub fn population_grad_row(
    params: &MixtureParams,
    gamma: f64,
    a_k: f64,
    w: [f64; 2],
) -> Result<[f64; 2]> {
    let wbar = unit(w)?;
    let (t, [mp, mpm, mm]) = terms_at(params, gamma, wbar);
    let s = params.sigma();
    let mix = |i: usize| t.p_plus * mp[i] + t.p_pm * mpm[i] - 2.0 * t.p_minus * mm[i];
    let mills = t.p_plus * t.gamma_plus + t.p_pm * t.gamma_pm - 2.0 * t.p_minus * t.gamma_minus;
    let scale = -s * a_k / 4.0;
    Ok([
        scale * (mix(0) / s + wbar[0] * mills),
        scale * (mix(1) / s + wbar[1] * mills),
    ])
}

/// Row-wise population gradient for `W ∈ R^{m×2}`.
pub fn population_grad(params: &MixtureParams, gamma: f64, a: &[f64], w: &Matrix) -> Result<Matrix> {
    if w.cols() != 2 || w.rows() != a.len() {
        return Err(LabError::Dimension(format!(
            "W is {}x{}, expected {}x2",
            w.rows(),
            w.cols(),
            a.len()
        )));
    }
    let rows = (0..w.rows())
        .map(|k| {
            let r = w.row(k);
            population_grad_row(params, gamma, a[k], [r[0], r[1]]).map(|g| g.to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// True iff every row gradient has strict sign pattern `−a_k·(1, 1)`.
/// Zero rows count as violations.
pub fn sign_pattern_holds(params: &MixtureParams, gamma: f64, a: &[f64], w: &Matrix) -> bool {
    match population_grad(params, gamma, a, w) {
        Ok(g) => (0..g.rows()).all(|k| {
            let want = -a[k];
            g.row(k).iter().all(|&v| v * want > 0.0)
        }),
        Err(_) => false,
    }
}

/// Monte-Carlo estimate of `−a_k E[y x 1{⟨w̄, x⟩ ≥ 0}]` with per-coordinate
/// standard errors.
pub fn monte_carlo_grad_row(data: &Dataset, a_k: f64, w: [f64; 2]) -> Result<([f64; 2], [f64; 2])> {
    let wbar = unit(w)?;
    let n = data.len();
    if n < 2 {
        return Err(LabError::Empty("need at least two samples".into()));
    }
    let partials: Vec<[f64; 4]> = data
        .features
        .par_chunks(REDUCTION_CHUNK)
        .zip(data.labels.par_chunks(REDUCTION_CHUNK))
        .map(|(xs, ys)| {
            let mut acc = [0.0; 4];
            for (x, y) in xs.iter().zip(ys) {
                if dot(x, &wbar) >= 0.0 {
                    let z = [-a_k * y * x[0], -a_k * y * x[1]];
                    acc[0] += z[0];
                    acc[1] += z[1];
                    acc[2] += z[0] * z[0];
                    acc[3] += z[1] * z[1];
                }
            }
            acc
        })
        .collect();
    let mut s = [0.0; 4];
    for p in partials {
        for i in 0..4 {
            s[i] += p[i];
        }
    }
    let nf = n as f64;
    let mean = [s[0] / nf, s[1] / nf];
    let se = |i: usize| {
        let var = (s[i + 2] / nf - mean[i] * mean[i]) * nf / (nf - 1.0);
        (var.max(0.0) / nf).sqrt()
    };
    Ok((mean, [se(0), se(1)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{c_mu, sample};
    use crate::model::{make_fixed_outer_two_layer, make_full_two_layer, make_mlp, InitSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn params() -> MixtureParams {
        MixtureParams::reference()
    }

    #[test]
    fn single_sample_hand_value() {
        let (arch, _) = make_fixed_outer_two_layer(2, 1, &[1.0], 0).unwrap();
        let oracle = SampleLoss::new(arch, vec![vec![1.0, 0.0]], vec![1.0]).unwrap();
        let (l, g) = oracle.loss_grad(&[1.0, 1.0]).unwrap();
        assert_eq!(l, -1.0);
        assert_eq!(g, vec![-1.0, 0.0]);
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        let (arch, _) = make_full_two_layer(2, 3, 0).unwrap();
        assert!(SampleLoss::new(arch.clone(), vec![], vec![]).is_err());
        assert!(SampleLoss::new(arch.clone(), vec![vec![1.0, 2.0]], vec![]).is_err());
        assert!(SampleLoss::new(arch, vec![vec![1.0]], vec![1.0]).is_err());
    }

    #[test]
    fn duplicating_samples_changes_nothing() {
        let data = sample(&params(), 0.3, 300, 1).unwrap();
        let (arch, theta) = make_full_two_layer(2, 8, 2).unwrap();
        let mut twice = data.clone();
        twice.features.extend(data.features.clone());
        twice.labels.extend(data.labels.clone());
        let (l1, g1) = sample_loss_grad(&arch, &theta, &data).unwrap();
        let (l2, g2) = sample_loss_grad(&arch, &theta, &twice).unwrap();
        assert!((l1 - l2).abs() <= 1e-14);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-14);
        }
        let oracle = SampleLoss::from_dataset(arch, &data).unwrap();
        assert!((oracle.loss(&theta).unwrap() - l1).abs() <= 1e-15);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let data = sample(&params(), 0.7, 200, 3).unwrap();
        for (arch, theta) in [
            make_full_two_layer(2, 5, 4).unwrap(),
            make_mlp(2, &[4, 3], true, InitSpec::new(5)).unwrap(),
        ] {
            // nonzero biases keep every sample away from the ReLU kinks
            let mut theta = theta;
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            for j in 0..arch.layers().len() {
                if let Some(r) = arch.layout().bias_range(j) {
                    theta[r].iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
                }
            }
            let oracle = SampleLoss::from_dataset(arch, &data).unwrap();
            let (_, g) = oracle.loss_grad(&theta).unwrap();
            let h = 1e-6;
            let mut worst: f64 = 0.0;
            for i in 0..theta.len() {
                let mut tp = theta.theta.clone();
                let mut tm = theta.theta.clone();
                tp[i] += h;
                tm[i] -= h;
                let fd = (oracle.loss(&tp).unwrap() - oracle.loss(&tm).unwrap()) / (2.0 * h);
                worst = worst.max((fd - g[i]).abs() / (1e-8 + g[i].abs().max(fd.abs())));
            }
            assert!(worst < 1e-4, "worst relative error {worst}");
        }
    }

    #[test]
    fn reduction_is_thread_count_independent() {
        let data = sample(&params(), 0.2, 2000, 9).unwrap();
        let (arch, theta) = make_full_two_layer(2, 16, 1).unwrap();
        let oracle = SampleLoss::from_dataset(arch, &data).unwrap();
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let multi = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = single.install(|| oracle.loss_grad(&theta).unwrap());
        let b = multi.install(|| oracle.loss_grad(&theta).unwrap());
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn terms_examples() {
        let p = params();
        let t = p_gamma_terms(&p, 0.0, [0.0, 1.0]).unwrap();
        assert!((t.p_minus - 0.5).abs() < 1e-15);
        let t1 = p_gamma_terms(&p, 0.4, [0.3, -0.7]).unwrap();
        let t2 = p_gamma_terms(&p, 0.4, [3.0, -7.0]).unwrap();
        let t3 = p_gamma_terms(&p, 0.4, [1.2, -2.8]).unwrap();
        // power-of-two rescaling leaves w̄ bitwise unchanged, other factors
        // only up to rounding
        assert_eq!(t1, t3);
        for (a, b) in [(t1.p_plus, t2.p_plus), (t1.p_minus, t2.p_minus), (t1.gamma_pm, t2.gamma_pm)] {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!(p_gamma_terms(&p, 0.4, [0.0, 0.0]).is_err());
    }

    #[test]
    fn row_gradient_symmetries() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let g = rng.gen_range(0.0..2.0 * PI);
            let w = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let c = rng.gen_range(0.1..10.0);
            let r1 = population_grad_row(&p, g, 1.0, w).unwrap();
            let r2 = population_grad_row(&p, g, 1.0, [w[0] / 8.0, w[1] / 8.0]).unwrap();
            let rc = population_grad_row(&p, g, 1.0, [c * w[0], c * w[1]]).unwrap();
            let rn = population_grad_row(&p, g, -1.0, w).unwrap();
            // powers of two leave the normalized direction bitwise unchanged
            assert_eq!(r1, r2);
            for i in 0..2 {
                assert!((r1[i] - rc[i]).abs() <= 1e-14);
                assert_eq!(rn[i], -r1[i]);
            }
        }
    }

    #[test]
    fn population_grad_stacks_rows() {
        let p = params();
        let w = Matrix::from_rows(&[vec![0.3, 0.9], vec![0.3, 0.9], vec![-1.0, 0.2]]).unwrap();
        let a = [1.0, -1.0, 1.0];
        let g = population_grad(&p, 0.5, &a, &w).unwrap();
        assert_eq!(g.row(0)[0], -g.row(1)[0]);
        assert_eq!(g.row(0)[1], -g.row(1)[1]);
        let r = population_grad_row(&p, 0.5, 1.0, [-1.0, 0.2]).unwrap();
        assert_eq!(g.row(2), &r[..]);
        let zero = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(population_grad(&p, 0.5, &[1.0], &zero).is_err());
        assert!(!sign_pattern_holds(&p, 0.5, &[1.0], &zero));
    }

    #[test]
    fn closed_form_matches_monte_carlo() {
        let p = params();
        let data = sample(&p, FRAC_PI_4, 200_000, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let phi: f64 = rng.gen_range(0.0..2.0 * PI);
            let w = [phi.cos(), phi.sin()];
            let exact = population_grad_row(&p, FRAC_PI_4, 1.0, w).unwrap();
            let (est, se) = monte_carlo_grad_row(&data, 1.0, w).unwrap();
            for i in 0..2 {
                assert!((exact[i] - est[i]).abs() <= 4.0 * se[i], "{exact:?} {est:?} {se:?}");
            }
        }
    }

    #[test]
    fn sign_pattern_at_quarter_turn_and_failure_at_zero() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..10)
                .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect();
            let a: Vec<f64> = (0..10).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
            let w = Matrix::from_rows(&rows).unwrap();
            assert!(sign_pattern_holds(&p, FRAC_PI_4, &a, &w));
            let flipped: Vec<f64> = a.iter().map(|v| -v).collect();
            assert!(sign_pattern_holds(&p, FRAC_PI_4, &flipped, &w));
        }
        // at γ=0 some direction violates the pattern
        let violated = (0..360).any(|k| {
            let phi = k as f64 * PI / 180.0;
            let w = Matrix::from_rows(&[vec![phi.cos(), phi.sin()]]).unwrap();
            !sign_pattern_holds(&p, 0.0, &[1.0], &w)
        });
        assert!(violated);
    }

    #[test]
    fn weighted_sum_bounded_by_c_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let p = MixtureParams::new(
                rng.gen_range(1.01..10.0),
                rng.gen_range(0.05..5.0),
                rng.gen_range(0.2..3.0),
            )
            .unwrap();
            let g = rng.gen_range(0.0..2.0 * PI);
            let w = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let t = p_gamma_terms(&p, g, w).unwrap();
            assert!(t.weighted_sum() >= c_mu(&p) - 1e-12);
        }
    }
}

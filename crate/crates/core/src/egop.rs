//! Expected gradient outer product (EGOP) estimation and the orthogonal
//! reparameterization built from its eigenbasis.

use crate::error::{LabError, Result};
use crate::linalg::{apply_param_rotation, sym_eig, Matrix, OrthogonalMatrix};
use crate::model::Architecture;
use crate::optim::GradOracle;
use crate::rng::{CounterRng, Stream};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Isotropic Gaussian `ρ = N(0, scale² I)` over parameter space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    #[serde(default = "unit_scale")]
    pub scale: f64,
    pub seed: u64,
}

fn unit_scale() -> f64 {
    1.0
}

impl SamplingSpec {
    pub fn new(scale: f64, seed: u64) -> Result<Self> {
        let s = Self { scale, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(LabError::Config(format!(
                "sampling scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// The `M` sample points `θ_i`, each of length `p`.
    pub fn draw(&self, p: usize, count: usize) -> Vec<Vec<f64>> {
        let rng = CounterRng::new(self.seed);
        (0..count)
            .map(|i| {
                rng.normals(Stream::Egop, (i * p) as u64, p)
                    .into_iter()
                    .map(|z| self.scale * z)
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EgopEstimate {
    pub matrix: Matrix,
    pub samples: usize,
    /// `None` when the estimate was formed from caller-supplied points.
    pub spec: Option<SamplingSpec>,
}

/// `P̂ = (1/M) Σ ∇L(θ_i) ∇L(θ_i)ᵀ` with `θ_i ~ ρ`.
pub fn estimate_egop(oracle: &dyn GradOracle, spec: SamplingSpec, count: usize) -> Result<EgopEstimate> {
    spec.validate()?;
    if count == 0 {
        return Err(LabError::Empty("EGOP needs at least one sample".into()));
    }
    let points = spec.draw(oracle.dim(), count);
    let mut est = estimate_egop_at(oracle, &points)?;
    est.spec = Some(spec);
    Ok(est)
}

/// EGOP over explicit sample points; used for rotation-coupled estimates.
pub fn estimate_egop_at(oracle: &dyn GradOracle, points: &[Vec<f64>]) -> Result<EgopEstimate> {
    if points.is_empty() {
        return Err(LabError::Empty("EGOP needs at least one sample".into()));
    }
    let p = oracle.dim();
    let grads: Vec<Vec<f64>> = points
        .par_iter()
        .enumerate()
        .map(|(i, th)| {
            if th.len() != p {
                return Err(LabError::Dimension(format!(
                    "sample {i} has {} entries, oracle expects {p}",
                    th.len()
                )));
            }
            let (_, g) = oracle.eval(th)?;
            if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                return Err(LabError::Numerical {
                    step: i,
                    what: format!("EGOP gradient sample {i} has non-finite entry {k}"),
                });
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    Ok(EgopEstimate {
        matrix: outer_product_mean(&grads, p)?,
        samples: points.len(),
        spec: None,
    })
}

/// Rows are summed independently over samples in a fixed order; the upper
/// triangle is mirrored so the result is exactly symmetric.
fn outer_product_mean(grads: &[Vec<f64>], p: usize) -> Result<Matrix> {
    let inv = 1.0 / grads.len() as f64;
    let rows: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; p - i];
            for g in grads {
                let gi = g[i];
                if gi == 0.0 {
                    continue;
                }
                for (r, gj) in row.iter_mut().zip(&g[i..]) {
                    *r += gi * gj;
                }
            }
            row
        })
        .collect();
    let mut data = vec![0.0; p * p];
    for (i, row) in rows.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            let j = i + k;
            data[i * p + j] = v * inv;
            data[j * p + i] = v * inv;
        }
    }
    Matrix::from_row_major(p, p, data)
}

/// Eigenbasis of an EGOP estimate.
#[derive(Debug, Clone)]
pub struct EgopBasis {
    pub basis: OrthogonalMatrix,
    pub eigenvalues: Vec<f64>,
    /// Set when consecutive eigenvalues nearly coincide, so the basis is not
    /// unique.
    pub warning: Option<String>,
}

/// Relative gap below which two eigenvalues are treated as repeated.
pub const DEGENERACY_TOL: f64 = 1e-10;

pub fn egop_basis(estimate: &EgopEstimate) -> Result<EgopBasis> {
    let eig = sym_eig(&estimate.matrix)?;
    let top = eig.eigenvalues.first().copied().unwrap_or(0.0).abs();
    let repeats = eig
        .eigenvalues
        .windows(2)
        .filter(|w| (w[0] - w[1]).abs() < DEGENERACY_TOL * top)
        .count();
    let warning = (repeats > 0).then(|| {
        format!("{repeats} near-repeated EGOP eigenvalue pair(s); the eigenbasis is not unique")
    });
    Ok(EgopBasis {
        basis: eig.eigenvectors,
        eigenvalues: eig.eigenvalues,
        warning,
    })
}

/// The oracle `θ ↦ (L(Vθ), Vᵀ ∇L(Vθ))`.
pub struct Reparameterized<O> {
    inner: O,
    v: OrthogonalMatrix,
}

impl<O: GradOracle> Reparameterized<O> {
    /// Maps reparameterized coordinates back to the original ones.
    pub fn to_original(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.v.apply(theta)
    }

    pub fn basis(&self) -> &OrthogonalMatrix {
        &self.v
    }
}

impl<O: GradOracle> GradOracle for Reparameterized<O> {
    fn dim(&self) -> usize {
        self.v.dim()
    }

    fn eval(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let x = self.v.apply(theta)?;
        let (loss, g) = self.inner.eval(&x)?;
        Ok((loss, self.v.apply_transposed(&g)?))
    }
}

pub fn reparameterized_oracle<O: GradOracle>(oracle: O, v: OrthogonalMatrix) -> Result<Reparameterized<O>> {
    if v.dim() != oracle.dim() {
        return Err(LabError::Dimension(format!(
            "basis is {0}x{0} but the oracle has {1} parameters",
            v.dim(),
            oracle.dim()
        )));
    }
    Ok(Reparameterized { inner: oracle, v })
}

/// `V_U = Qᵀ V_base`, the eigenbasis of the rotated problem implied by the
/// coupling of EGOP samples.
pub fn coupled_basis(v_base: &OrthogonalMatrix, q: &OrthogonalMatrix) -> Result<OrthogonalMatrix> {
    if v_base.dim() != q.dim() {
        return Err(LabError::Dimension("basis and rotation sizes differ".into()));
    }
    OrthogonalMatrix::new(q.matrix().transpose().matmul(v_base.matrix())?)
}

/// `coupled_basis` with `Q = param_rotation(U)` applied column by column,
/// without forming `Q`.
pub fn coupled_basis_for(
    v_base: &OrthogonalMatrix,
    u: &OrthogonalMatrix,
    arch: &Architecture,
) -> Result<OrthogonalMatrix> {
    let p = v_base.dim();
    let vt = v_base.matrix().transpose();
    let mut out = Matrix::zeros(p, p);
    for j in 0..p {
        let col = apply_param_rotation(u, arch, vt.row(j), true)?;
        for (i, v) in col.into_iter().enumerate() {
            out.set(i, j, v);
        }
    }
    OrthogonalMatrix::new(out)
}

/// The rotated problem's EGOP samples `Qᵀ θ_i` paired with base samples.
pub fn coupled_points(
    points: &[Vec<f64>],
    u: &OrthogonalMatrix,
    arch: &Architecture,
) -> Result<Vec<Vec<f64>>> {
    points
        .iter()
        .map(|th| apply_param_rotation(u, arch, th, true))
        .collect()
}

/// Largest `1 − |⟨v_i, v'_i⟩|` over matching columns of two bases.
pub fn column_sign_agreement(a: &OrthogonalMatrix, b: &OrthogonalMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(LabError::Dimension("bases differ in size".into()));
    }
    let (at, bt) = (a.matrix().transpose(), b.matrix().transpose());
    Ok((0..a.dim())
        .map(|j| 1.0 - crate::linalg::dot(at.row(j), bt.row(j)).abs())
        .fold(0.0, f64::max))
}

//! Small dense linear algebra: matrices, rotations, Gaussian special
//! functions and a deterministic cyclic-Jacobi symmetric eigensolver.

use crate::error::{LabError, Result};
use crate::model::Architecture;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Dense real matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from row-major entries. Entries must be finite.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::Dimension(format!(
                "{} entries for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LabError::NonFinite(format!("matrix entry {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(LabError::Dimension("ragged rows".into()));
        }
        Self::from_row_major(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn row_major(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LabError::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(LabError::Dimension(format!(
                "matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(self
            .data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| dot(row, v))
            .collect())
    }

    /// Computes `selfᵀ v` without materializing the transpose.
    pub fn matvec_transposed(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(LabError::Dimension(format!(
                "transposed matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LabError::Dimension("matrix sum shape mismatch".into()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Max-norm distance between two equally shaped matrices.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Matrix) -> Matrix {
        let (r, c) = (self.rows * other.rows, self.cols * other.cols);
        let mut out = Matrix::zeros(r, c);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let a = self.get(i, j);
                for k in 0..other.rows {
                    for l in 0..other.cols {
                        out.set(i * other.rows + k, j * other.cols + l, a * other.get(k, l));
                    }
                }
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Column-major vectorization.
pub fn vec(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.rows * m.cols);
    for j in 0..m.cols {
        for i in 0..m.rows {
            out.push(m.get(i, j));
        }
    }
    out
}

/// Inverse of [`vec`]: reshapes a column-major vector into `rows × cols`.
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(LabError::Dimension(format!(
            "cannot reshape {} entries to {}x{}",
            v.len(),
            rows,
            cols
        )));
    }
    let mut m = Matrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m.set(i, j, v[j * rows + i]);
        }
    }
    Ok(m)
}

const ORTHO_TOL: f64 = 1e-10;

/// Square matrix with `‖MᵀM − I‖_max ≤ 1e-10`, checked on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalMatrix(Matrix);

impl OrthogonalMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(LabError::Dimension(format!(
                "orthogonal matrix must be square, got {}x{}",
                m.rows, m.cols
            )));
        }
        let dev = orthogonality_defect(&m);
        if dev > ORTHO_TOL {
            return Err(LabError::NotOrthogonal(dev));
        }
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Transpose (the inverse) of an orthogonal matrix is orthogonal.
    pub fn transpose(&self) -> OrthogonalMatrix {
        OrthogonalMatrix(self.0.transpose())
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.0.matvec(v)
    }

    pub fn apply_transposed(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.0.matvec_transposed(v)
    }

    pub fn compose(&self, other: &OrthogonalMatrix) -> Result<OrthogonalMatrix> {
        OrthogonalMatrix::new(self.0.matmul(&other.0)?)
    }
}

/// `‖MᵀM − I‖_max`.
pub fn orthogonality_defect(m: &Matrix) -> f64 {
    let n = m.cols;
    let mut worst: f64 = 0.0;
    for a in 0..n {
        for b in a..n {
            let mut s = 0.0;
            for i in 0..m.rows {
                s += m.get(i, a) * m.get(i, b);
            }
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((s - target).abs());
        }
    }
    worst
}

/// Counter-clockwise planar rotation `[[cos γ, −sin γ], [sin γ, cos γ]]`.
pub fn rotation_matrix(gamma: f64) -> OrthogonalMatrix {
    let (s, c) = gamma.sin_cos();
    OrthogonalMatrix(Matrix {
        rows: 2,
        cols: 2,
        data: vec![c, -s, s, c],
    })
}

/// Applies `U(γ)` to a point without building the matrix.
#[inline]
pub fn rotate2(gamma: f64, x: [f64; 2]) -> [f64; 2] {
    let (s, c) = gamma.sin_cos();
    [c * x[0] - s * x[1], s * x[0] + c * x[1]]
}

/// Applies `U(γ)ᵀ`.
#[inline]
pub fn rotate2_inverse(gamma: f64, x: [f64; 2]) -> [f64; 2] {
    let (s, c) = gamma.sin_cos();
    [c * x[0] + s * x[1], -s * x[0] + c * x[1]]
}

/// Parameter-space rotation `Q` with `f(θ; Ux) = f(Qθ; x)`.
///
/// `Q` is `Uᵀ ⊗ I_{m₁}` on the `vec(W₁)` block and the identity elsewhere.
/// When `W₁` is frozen the data rotation cannot be absorbed into trainable
/// coordinates, so the construction is rejected.
pub fn param_rotation(u: &OrthogonalMatrix, arch: &Architecture) -> Result<OrthogonalMatrix> {
    let d = arch.input_dim();
    if u.dim() != d {
        return Err(LabError::Dimension(format!(
            "rotation is {}x{} but the architecture input dimension is {}",
            u.dim(),
            u.dim(),
            d
        )));
    }
    let layout = arch.layout();
    let block = layout.weight_range(0).ok_or_else(|| {
        LabError::Config("first-layer weights are frozen; no parameter rotation exists".into())
    })?;
    let p = layout.len();
    let m1 = arch.width(1);
    let mut q = Matrix::identity(p);
    let kron = u.matrix().transpose().kron(&Matrix::identity(m1));
    for i in 0..kron.rows() {
        for j in 0..kron.cols() {
            q.set(block.start + i, block.start + j, kron.get(i, j));
        }
    }
    OrthogonalMatrix::new(q)
}

/// Applies `Q = param_rotation(U)` (or its transpose) to θ in `O(p)` without
/// forming the `p × p` matrix. Both agree with the dense construction.
pub fn apply_param_rotation(
    u: &OrthogonalMatrix,
    arch: &Architecture,
    theta: &[f64],
    transpose: bool,
) -> Result<Vec<f64>> {
    let d = arch.input_dim();
    if u.dim() != d {
        return Err(LabError::Dimension("rotation/architecture mismatch".into()));
    }
    let layout = arch.layout();
    if theta.len() != layout.len() {
        return Err(LabError::Dimension("theta length does not match layout".into()));
    }
    let block = layout
        .weight_range(0)
        .ok_or_else(|| LabError::Config("first-layer weights are frozen".into()))?;
    let m1 = arch.width(1);
    let w1 = unvec(&theta[block.clone()], m1, d)?;
    // (Uᵀ ⊗ I) vec(W) = vec(W U);  (U ⊗ I) vec(W) = vec(W Uᵀ)
    let rotated = if transpose {
        w1.matmul(&u.matrix().transpose())?
    } else {
        w1.matmul(u.matrix())?
    };
    let mut out = theta.to_vec();
    out[block].copy_from_slice(&vec(&rotated));
    Ok(out)
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct EigResult {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Column `i` pairs with `eigenvalues[i]`; largest-magnitude entry positive.
    pub eigenvectors: OrthogonalMatrix,
    pub sweeps: usize,
}

const SYM_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigensolver with a fixed row-by-row sweep order.
pub fn sym_eig(a: &Matrix) -> Result<EigResult> {
    if !a.is_square() {
        return Err(LabError::Dimension(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if let Some(v) = a.data.iter().find(|v| !v.is_finite()) {
        return Err(LabError::NonFinite(format!("sym_eig input entry {v}")));
    }
    let asym = a.asymmetry();
    if asym > SYM_TOL * (1.0 + a.max_abs()) {
        return Err(LabError::NotSymmetric(asym));
    }
    let n = a.rows;
    // Work on the symmetrized copy so both triangles agree bitwise.
    let mut w = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (a.get(i, j) + a.get(j, i));
            w.set(i, j, s);
            w.set(j, i, s);
        }
    }
    let scale = a.frobenius();
    let target = 1e-12 * scale;
    // Eigenvectors accumulated as rows (vt = Vᵀ) for contiguous updates.
    let mut vt = Matrix::identity(n);
    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&w);
        if off <= target || scale == 0.0 {
            break;
        }
        if sweeps >= MAX_SWEEPS {
            return Err(LabError::NoConvergence {
                sweeps,
                residual: off,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = w.get(p, p);
                let aqq = w.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                jacobi_rotate(&mut w, p, q, c, s);
                // rows p and q of Vᵀ
                for k in 0..n {
                    let vp = vt.data[p * n + k];
                    let vq = vt.data[q * n + k];
                    vt.data[p * n + k] = c * vp - s * vq;
                    vt.data[q * n + k] = s * vp + c * vq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| w.get(i, i)).collect();
    // stable sort keeps index order among exact ties
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));
    let mut vecs = Matrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (col, &src) in order.iter().enumerate() {
        values.push(diag[src]);
        let row = &vt.data[src * n..(src + 1) * n];
        let mut best = 0;
        for (k, v) in row.iter().enumerate() {
            if v.abs() > row[best].abs() {
                best = k;
            }
        }
        let sign = if row[best] < 0.0 { -1.0 } else { 1.0 };
        for (k, v) in row.iter().enumerate() {
            vecs.set(k, col, sign * v);
        }
    }
    Ok(EigResult {
        eigenvalues: values,
        eigenvectors: OrthogonalMatrix::new(vecs)?,
        sweeps,
    })
}

fn off_diagonal_norm(w: &Matrix) -> f64 {
    let n = w.rows;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = w.get(i, j);
                s += v * v;
            }
        }
    }
    s.sqrt()
}

/// Two-sided rotation `JᵀWJ` in the (p, q) plane, zeroing `w[p][q]`.
fn jacobi_rotate(w: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = w.rows;
    let app = w.get(p, p);
    let aqq = w.get(q, q);
    let apq = w.get(p, q);
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = w.get(k, p);
        let akq = w.get(k, q);
        let np = c * akp - s * akq;
        let nq = s * akp + c * akq;
        w.set(k, p, np);
        w.set(p, k, np);
        w.set(k, q, nq);
        w.set(q, k, nq);
    }
    w.set(p, p, c * c * app - 2.0 * s * c * apq + s * s * aqq);
    w.set(q, q, s * s * app + 2.0 * s * c * apq + c * c * aqq);
    w.set(p, q, 0.0);
    w.set(q, p, 0.0);
}

/// Supported inverse-root powers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootPower {
    Half,
    Quarter,
}

impl RootPower {
    fn exponent(self) -> f64 {
        match self {
            RootPower::Half => 0.5,
            RootPower::Quarter => 0.25,
        }
    }
}

pub const DEFAULT_EIG_FLOOR: f64 = 1e-12;

/// `V diag(max(λ, floor)^(−power)) Vᵀ` for a symmetric PSD matrix.
pub fn inv_root(a: &Matrix, power: RootPower, floor: f64) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    let scale = a.max_abs();
    if let Some(&min) = eig.eigenvalues.last() {
        if min < -1e-8 * scale {
            return Err(LabError::NotPsd(min));
        }
    }
    let n = a.rows;
    let v = eig.eigenvectors.matrix();
    let weights: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| l.max(floor).powf(-power.exponent()))
        .collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for (k, wk) in weights.iter().enumerate() {
                s += v.get(i, k) * wk * v.get(j, k);
            }
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    Ok(out)
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density and distribution function `(φ(z), Φ(z))`.
pub fn std_normal(z: f64) -> (f64, f64) {
    let pdf = INV_SQRT_2PI * (-0.5 * z * z).exp();
    let cdf = 0.5 * libm::erfc(-z * FRAC_1_SQRT_2);
    (pdf, cdf)
}

pub fn std_normal_cdf(z: f64) -> f64 {
    std_normal(z).1
}

/// `√(π/2)`, used by the SNR assumption check.
pub fn sqrt_half_pi() -> f64 {
    (PI / 2.0).sqrt()
}

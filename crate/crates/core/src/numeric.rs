//! Small dense arithmetic, stable softmax, bilinear grid sampling, seeded
//! randomness and the central finite-difference gradient oracle.

use rand::rngs::Xoshiro256PlusPlus;
use rand::{RngExt, SeedableRng};
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{check_finite, check_len, Error, Result};

/// Default step for central differences.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("matrix data", rows * cols, data.len())?;
        check_finite("matrix data", &data)?;
        Ok(Self { rows, cols, data })
    }

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

    /// Builds a matrix from equally sized rows. `cols` is needed so that an
    /// empty row list still has a width.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_len("matrix row", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Entries drawn from N(0, scale²).
    pub fn random(rows: usize, cols: usize, scale: f64, rng: &mut Xoshiro256PlusPlus) -> Self {
        let data = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vecs(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.get(r, c);
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_len("matmul inner dimension", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    /// `self · x` for a column vector `x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("matrix-vector product", self.cols, x.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// Multiplies every row (as a column vector) by `w`, i.e. returns `self · wᵀ`.
    pub fn project_rows(&self, w: &Matrix) -> Result<Matrix> {
        self.matmul(&w.transpose())
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        check_len("matrix add rows", self.rows, other.rows)?;
        check_len("matrix add cols", self.cols, other.cols)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to [-1, 1]; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = l2_norm(a) * l2_norm(b);
    if denom == 0.0 {
        return 0.0;
    }
    (dot(a, b) / denom).clamp(-1.0, 1.0)
}

/// Numerically stable softmax of one slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(sum(exp(logits)))` with max subtraction.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if m.is_empty() {
        return Err(Error::Empty("softmax input matrix"));
    }
    let mut data = Vec::with_capacity(m.data.len());
    for r in 0..m.rows {
        data.extend(softmax(m.row(r)));
    }
    Ok(Matrix {
        rows: m.rows,
        cols: m.cols,
        data,
    })
}

/// One level of a feature pyramid: an `height × width` grid of `dim`-vectors.
///
/// Normalized coordinates put node `(row, col)` at
/// `x = col / (width - 1)`, `y = row / (height - 1)`, with `(0, 0)` top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureLevel {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::Empty("feature level"));
        }
        check_len("feature level data", height * width * dim, data.len())?;
        check_finite("feature level data", &data)?;
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    /// Every node holds the same vector.
    pub fn constant(height: usize, width: usize, value: &[f64]) -> Result<Self> {
        let data = value.repeat(height * width);
        Self::new(height, width, value.len(), data)
    }

    pub fn random(
        height: usize,
        width: usize,
        dim: usize,
        rng: &mut Xoshiro256PlusPlus,
    ) -> Result<Self> {
        Self::new(height, width, dim, normal_vec(rng, height * width * dim))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Normalized coordinate of node `(row, col)`.
    pub fn node_coord(&self, row: usize, col: usize) -> (f64, f64) {
        let x = if self.width > 1 {
            col as f64 / (self.width - 1) as f64
        } else {
            0.0
        };
        let y = if self.height > 1 {
            row as f64 / (self.height - 1) as f64
        } else {
            0.0
        };
        (x, y)
    }

    /// Tokens in row-major order.
    pub fn tokens(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(|c| c.to_vec()).collect()
    }

    /// Bilinear interpolation of the four nodes around `(x, y)`. Coordinates
    /// outside [0, 1] are clamped; NaN is treated as 0.
    pub fn bilinear_sample(&self, x: f64, y: f64) -> Vec<f64> {
        let (c0, c1, fx) = axis_cell(x, self.width);
        let (r0, r1, fy) = axis_cell(y, self.height);
        let weights = [
            (r0, c0, (1.0 - fx) * (1.0 - fy)),
            (r0, c1, fx * (1.0 - fy)),
            (r1, c0, (1.0 - fx) * fy),
            (r1, c1, fx * fy),
        ];
        let mut out = vec![0.0; self.dim];
        for (r, c, w) in weights {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.node(r, c)) {
                *o += w * v;
            }
        }
        out
    }
}

fn axis_cell(coord: f64, size: usize) -> (usize, usize, f64) {
    if size == 1 {
        return (0, 0, 0.0);
    }
    let coord = if coord.is_nan() { 0.0 } else { coord.clamp(0.0, 1.0) };
    let pos = coord * (size - 1) as f64;
    let lo = (pos.floor() as usize).min(size - 2);
    (lo, lo + 1, pos - lo as f64)
}

/// Free-function form of [`FeatureLevel::bilinear_sample`].
pub fn bilinear_sample(level: &FeatureLevel, x: f64, y: f64) -> Vec<f64> {
    level.bilinear_sample(x, y)
}

/// Central differences `(f(p + eps·e_i) − f(p − eps·e_i)) / 2eps` per coordinate.
pub fn finite_diff_grad<F>(f: F, p: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid(format!("finite difference step must be > 0, got {eps}")));
    }
    let mut point = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        point[i] = p[i] + eps;
        let plus = f(&point);
        point[i] = p[i] - eps;
        let minus = f(&point);
        point[i] = p[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                context: "finite difference evaluation",
                index: i,
            });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub n_params: usize,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    /// Worst-case merge of two reports over disjoint parameter blocks.
    pub fn merge(&self, other: &GradCheckReport) -> GradCheckReport {
        let worst_index = if other.max_rel_err > self.max_rel_err {
            self.n_params + other.worst_index
        } else {
            self.worst_index
        };
        GradCheckReport {
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            n_params: self.n_params + other.n_params,
            worst_index,
        }
    }
}

/// Relative error uses the denominator `max(|a|, |n|, 1e-8)`.
pub fn compare_grads(analytic: &[f64], numeric: &[f64]) -> Result<GradCheckReport> {
    check_len("gradient comparison", analytic.len(), numeric.len())?;
    if analytic.is_empty() {
        return Err(Error::Empty("gradient vectors"));
    }
    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        n_params: analytic.len(),
        worst_index: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(1e-8);
        if !abs.is_finite() {
            return Err(Error::NonFinite {
                context: "gradient comparison",
                index: i,
            });
        }
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

pub fn seeded_rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut Xoshiro256PlusPlus, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn uniform_vec(rng: &mut Xoshiro256PlusPlus, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

//! Dense linear algebra and differentiable kernels.
//!
//! Everything here is double precision, row-major, and computed with a fixed
//! summation order so that results are bit-reproducible on a given build. The
//! `*_par` helpers split work over output rows only; every output element is
//! still produced by one sequential loop, so parallel and serial results match
//! bit for bit.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Row-major dense matrix.
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericsError::Shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(NumericsError::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix-vector product `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(NumericsError::Shape(format!(
                "matvec: {}x{} with vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm2(a);
    let nb = norm2(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

fn check_inner(a: &Matrix, b: &Matrix, what: &str, a_inner: usize, b_inner: usize) -> Result<()> {
    if a_inner != b_inner {
        return Err(NumericsError::Shape(format!(
            "{what}: {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

// Below this many output elements the rayon split costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 14;

#[inline]
fn axpy_row(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

fn matmul_row(out: &mut [f64], a_row: &[f64], b: &Matrix) {
    for (k, &aik) in a_row.iter().enumerate() {
        if aik != 0.0 {
            axpy_row(out, aik, b.row(k));
        }
    }
}

/// `a · b`. Each output element accumulates over the inner index in ascending order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner(a, b, "matmul", a.cols, b.rows)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        matmul_row(out.row_mut(i), a.row(i), b);
    }
    Ok(out)
}

/// Same result as [`matmul`], parallel over output rows.
pub fn matmul_par(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner(a, b, "matmul", a.cols, b.rows)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    if a.rows * b.cols < PAR_THRESHOLD || b.cols == 0 {
        for i in 0..a.rows {
            matmul_row(out.row_mut(i), a.row(i), b);
        }
    } else {
        out.data
            .par_chunks_mut(b.cols)
            .enumerate()
            .for_each(|(i, row)| matmul_row(row, a.row(i), b));
    }
    Ok(out)
}

fn at_b_row(out: &mut [f64], i: usize, a: &Matrix, b: &Matrix) {
    for r in 0..a.rows {
        let v = a.data[r * a.cols + i];
        if v != 0.0 {
            axpy_row(out, v, b.row(r));
        }
    }
}

/// `aᵀ · b`, parallel over output rows; summation over the shared row index is ascending.
pub fn matmul_at_b(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner(a, b, "matmul_at_b", a.rows, b.rows)?;
    let mut out = Matrix::zeros(a.cols, b.cols);
    if a.cols * b.cols < PAR_THRESHOLD || b.cols == 0 {
        for i in 0..a.cols {
            at_b_row(out.row_mut(i), i, a, b);
        }
    } else {
        out.data
            .par_chunks_mut(b.cols)
            .enumerate()
            .for_each(|(i, row)| at_b_row(row, i, a, b));
    }
    Ok(out)
}

/// `a · bᵀ`, parallel over output rows.
pub fn matmul_a_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner(a, b, "matmul_a_bt", a.cols, b.cols)?;
    let mut out = Matrix::zeros(a.rows, b.rows);
    let fill = |i: usize, row: &mut [f64]| {
        let ar = a.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ar, b.row(j));
        }
    };
    if a.rows * b.rows < PAR_THRESHOLD || b.rows == 0 {
        for i in 0..a.rows {
            let row = &mut out.data[i * b.rows..(i + 1) * b.rows];
            fill(i, row);
        }
    } else {
        out.data
            .par_chunks_mut(b.rows)
            .enumerate()
            .for_each(|(i, row)| fill(i, row));
    }
    Ok(out)
}

fn check_logits(logits: &[f64], temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(NumericsError::Contract(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(NumericsError::Contract("softmax of an empty vector".into()));
    }
    Ok(())
}

/// Max-subtracted softmax of `logits / temperature`. All entries must be finite.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_logits(logits, temperature)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite("softmax logits"));
    }
    masked_softmax(logits, temperature)
}

/// Softmax that treats `-inf` entries as masked out (probability 0).
///
/// NaN or `+inf` entries, or a vector with no finite entry, are errors.
pub fn masked_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let lse = log_sum_exp(logits, temperature)?;
    Ok(logits
        .iter()
        .map(|&l| {
            if l == f64::NEG_INFINITY {
                0.0
            } else {
                (l / temperature - lse).exp()
            }
        })
        .collect())
}

/// `log Σ exp(logits / temperature)` with `-inf` entries skipped.
pub fn log_sum_exp(logits: &[f64], temperature: f64) -> Result<f64> {
    check_logits(logits, temperature)?;
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        if l.is_nan() || l == f64::INFINITY {
            return Err(NumericsError::NonFinite("softmax logits"));
        }
        max = max.max(l / temperature);
    }
    if max == f64::NEG_INFINITY {
        return Err(NumericsError::Contract(
            "softmax needs at least one finite logit".into(),
        ));
    }
    let mut sum = 0.0;
    for &l in logits {
        if l != f64::NEG_INFINITY {
            sum += (l / temperature - max).exp();
        }
    }
    Ok(max + sum.ln())
}

/// Log-softmax with the same masking rules as [`masked_softmax`].
pub fn log_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let lse = log_sum_exp(logits, temperature)?;
    Ok(logits.iter().map(|&l| l / temperature - lse).collect())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x · σ(x)`.
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `d/dx [x · σ(x)] = σ(x) + x σ(x) (1 − σ(x))`.
#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// Weights of one gated SwiGLU block, stored for right-multiplication:
/// `y = (silu(x · gate) ⊙ (x · up)) · down`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwiGluParams {
    /// `d × w`
    pub gate: Matrix,
    /// `d × w`
    pub up: Matrix,
    /// `w × d`
    pub down: Matrix,
    /// Bumped on every in-place update so stale caches can be detected.
    pub version: u64,
}

impl SwiGluParams {
    pub fn zeros(d: usize, w: usize) -> Self {
        Self {
            gate: Matrix::zeros(d, w),
            up: Matrix::zeros(d, w),
            down: Matrix::zeros(w, d),
            version: 0,
        }
    }

    pub fn input_width(&self) -> usize {
        self.gate.rows()
    }

    pub fn inner_width(&self) -> usize {
        self.gate.cols()
    }

    pub fn param_count(&self) -> usize {
        self.gate.as_slice().len() + self.up.as_slice().len() + self.down.as_slice().len()
    }

    fn check(&self) -> Result<()> {
        let (d, w) = self.gate.shape();
        if self.up.shape() != (d, w) || self.down.shape() != (w, d) {
            return Err(NumericsError::Shape(format!(
                "inconsistent SwiGLU params: gate {:?}, up {:?}, down {:?}",
                self.gate.shape(),
                self.up.shape(),
                self.down.shape()
            )));
        }
        Ok(())
    }
}

/// Activations retained by [`gated_swiglu_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct SwiGluCache {
    x: Matrix,
    gate_pre: Matrix,
    up_pre: Matrix,
    act: Matrix,
    version: u64,
    dims: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwiGluGrads {
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
}

/// Forward pass of a gated SwiGLU block over a batch `x` (`B × d`).
pub fn gated_swiglu_forward(x: &Matrix, p: &SwiGluParams) -> Result<(Matrix, SwiGluCache)> {
    p.check()?;
    if x.cols() != p.input_width() {
        return Err(NumericsError::Shape(format!(
            "SwiGLU input width {} but block expects {}",
            x.cols(),
            p.input_width()
        )));
    }
    let gate_pre = matmul_par(x, &p.gate)?;
    let up_pre = matmul_par(x, &p.up)?;
    let mut act = Matrix::zeros(x.rows(), p.inner_width());
    for ((a, &g), &u) in act.data.iter_mut().zip(&gate_pre.data).zip(&up_pre.data) {
        *a = silu(g) * u;
    }
    let y = matmul_par(&act, &p.down)?;
    let cache = SwiGluCache {
        x: x.clone(),
        gate_pre,
        up_pre,
        act,
        version: p.version,
        dims: (p.input_width(), p.inner_width()),
    };
    Ok((y, cache))
}

/// Single-vector SwiGLU evaluation without a cache. Bit-identical to the
/// corresponding row of [`gated_swiglu_forward`].
pub fn gated_swiglu_apply(x: &[f64], p: &SwiGluParams) -> Result<Vec<f64>> {
    p.check()?;
    if x.len() != p.input_width() {
        return Err(NumericsError::Shape(format!(
            "SwiGLU input width {} but block expects {}",
            x.len(),
            p.input_width()
        )));
    }
    let w = p.inner_width();
    let mut g = vec![0.0; w];
    let mut u = vec![0.0; w];
    matmul_row(&mut g, x, &p.gate);
    matmul_row(&mut u, x, &p.up);
    for (gi, ui) in g.iter_mut().zip(&u) {
        *gi = silu(*gi) * ui;
    }
    let mut y = vec![0.0; p.input_width()];
    matmul_row(&mut y, &g, &p.down);
    Ok(y)
}

/// Exact gradients of a SwiGLU block given `∂L/∂y`.
pub fn gated_swiglu_backward(
    grad_y: &Matrix,
    cache: &SwiGluCache,
    p: &SwiGluParams,
) -> Result<(Matrix, SwiGluGrads)> {
    if cache.version != p.version || cache.dims != (p.input_width(), p.inner_width()) {
        return Err(NumericsError::Contract(
            "SwiGLU cache does not belong to these parameters".into(),
        ));
    }
    if grad_y.shape() != (cache.x.rows(), p.input_width()) {
        return Err(NumericsError::Shape(format!(
            "grad_y is {:?}, forward output was {:?}",
            grad_y.shape(),
            (cache.x.rows(), p.input_width())
        )));
    }
    let grad_down = matmul_at_b(&cache.act, grad_y)?;
    let grad_act = matmul_a_bt(grad_y, &p.down)?;
    let mut grad_gate_pre = Matrix::zeros(grad_act.rows(), grad_act.cols());
    let mut grad_up_pre = Matrix::zeros(grad_act.rows(), grad_act.cols());
    for i in 0..grad_act.data.len() {
        let g = cache.gate_pre.data[i];
        let u = cache.up_pre.data[i];
        let da = grad_act.data[i];
        grad_gate_pre.data[i] = da * u * silu_grad(g);
        grad_up_pre.data[i] = da * silu(g);
    }
    let grad_gate = matmul_at_b(&cache.x, &grad_gate_pre)?;
    let grad_up = matmul_at_b(&cache.x, &grad_up_pre)?;
    let mut grad_x = matmul_a_bt(&grad_gate_pre, &p.gate)?;
    let gx_up = matmul_a_bt(&grad_up_pre, &p.up)?;
    for (a, b) in grad_x.data.iter_mut().zip(&gx_up.data) {
        *a += b;
    }
    Ok((
        grad_x,
        SwiGluGrads {
            gate: grad_gate,
            up: grad_up,
            down: grad_down,
        },
    ))
}

/// Hyperparameters of the Adam update with global-norm clipping.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            eps: 1e-4,
            clip_norm: 0.5,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

/// First/second moment buffers for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor the gradients were multiplied by (1 when no clipping happened).
    pub clip_scale: f64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam step after clipping the global gradient norm.
///
/// Non-finite gradients leave parameters and state untouched.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
) -> Result<AdamReport> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumericsError::Shape(format!(
            "adam: {} parameter tensors, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(NumericsError::Shape(format!(
                "adam tensor {i}: param {}, grad {}, moments {}",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    let mut sq = 0.0;
    for g in grads {
        for &x in g.iter() {
            sq += x * x;
        }
    }
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(NumericsError::NonFinite("gradients"));
    }
    let c = state.config;
    let clip_scale = if grad_norm > c.clip_norm {
        c.clip_norm / grad_norm
    } else {
        1.0
    };
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.len() {
            let gj = g[j] * clip_scale;
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(AdamReport {
        grad_norm,
        clip_scale,
    })
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn sym_eigenvalues(k: &Matrix) -> Result<Vec<f64>> {
    let n = k.rows();
    if k.cols() != n {
        return Err(NumericsError::Shape(format!(
            "eigenvalues of a non-square {}x{} matrix",
            n,
            k.cols()
        )));
    }
    if !k.is_finite() {
        return Err(NumericsError::NonFinite("eigenvalue input"));
    }
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((k.get(i, j) - k.get(j, i)).abs());
        }
    }
    if asym > 1e-9 {
        return Err(NumericsError::NotSymmetric(asym));
    }
    let mut a = k.clone();
    // symmetrize exactly so rotations act on a truly symmetric matrix
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, m);
            a.set(j, i, m);
        }
    }
    let fro: f64 = a.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = 1e-12 * fro.max(f64::MIN_POSITIVE);
    let off = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.get(i, j) * a.get(i, j);
                }
            }
        }
        s.sqrt()
    };
    for _sweep in 0..100 {
        if off(&a) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let arp = a.get(r, p);
                    let arq = a.get(r, q);
                    a.set(r, p, c * arp - s * arq);
                    a.set(r, q, s * arp + c * arq);
                }
                for r in 0..n {
                    let apr = a.get(p, r);
                    let aqr = a.get(q, r);
                    a.set(p, r, c * apr - s * aqr);
                    a.set(q, r, s * apr + c * aqr);
                }
            }
        }
    }
    if off(&a) > tol {
        return Err(NumericsError::Contract(format!(
            "Jacobi did not converge (off-diagonal norm {:e})",
            off(&a)
        )));
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

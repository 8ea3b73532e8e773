//! Dense symmetric matrices and symmetric third-order tensors.
//!
//! Both types store every entry densely and keep exact (bitwise) symmetry:
//! each mutation computes one value per index orbit and writes it to every
//! permutation of that index.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Symmetric real matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    inner: DMatrix<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { inner: DMatrix::zeros(dim, dim) }
    }

    pub fn identity(dim: usize) -> Self {
        Self { inner: DMatrix::identity(dim, dim) }
    }

    /// Builds from `f(i, j)` evaluated on the upper triangle only.
    pub fn from_upper_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut inner = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in i..dim {
                let x = f(i, j);
                inner[(i, j)] = x;
                inner[(j, i)] = x;
            }
        }
        Self { inner }
    }

    /// Symmetric part `(M + Mᵀ)/2` of a square matrix.
    pub fn symmetrize(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "expected square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self::from_upper_fn(m.nrows(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)])))
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.inner
    }

    /// `self += weight · x xᵀ`.
    pub fn add_outer(&mut self, weight: f64, x: &[f64]) {
        let n = self.dim();
        assert_eq!(x.len(), n, "outer product dimension");
        for i in 0..n {
            for j in i..n {
                let v = self.inner[(i, j)] + weight * x[i] * x[j];
                self.inner[(i, j)] = v;
                self.inner[(j, i)] = v;
            }
        }
    }

    pub fn add_diagonal(&mut self, shift: f64) {
        for i in 0..self.dim() {
            self.inner[(i, i)] += shift;
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { inner: &self.inner * c }
    }

    /// Quadratic form `xᵀ M x`.
    pub fn quad(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.inner * x))
    }
}

/// Eigenvalues sorted descending with column-orthonormal eigenvectors.
#[derive(Clone, Debug)]
pub struct EigPairs {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `Σ λ_c v_c v_cᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let n = self.vectors.nrows();
        let mut out = DMatrix::zeros(n, n);
        for (c, &lam) in self.values.iter().enumerate() {
            let v = self.vectors.column(c);
            out += lam * &v * v.transpose();
        }
        out
    }
}

const QL_MAX_SWEEPS: usize = 60;

/// The `k` algebraically largest eigenpairs of a symmetric matrix.
///
/// Householder tridiagonalization followed by implicit QL; deterministic for a
/// fixed input. Each eigenvector has its first nonzero coordinate positive.
pub fn sym_eig_topk(m: &SymMatrix, k: usize) -> Result<EigPairs> {
    let n = m.dim();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in 1..={n}")));
    }
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| m.inner.row(i).iter().copied().collect()).collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    tridiagonal_ql(&mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));

    let mut values = Vec::with_capacity(k);
    let mut vectors = DMatrix::zeros(n, k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        values.push(d[idx]);
        let mut col: Vec<f64> = (0..n).map(|r| v[r][idx]).collect();
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        col.iter_mut().for_each(|x| *x /= norm);
        if let Some(first) = col.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
        }
        for r in 0..n {
            vectors[(r, c)] = col[r];
        }
    }

    let pairs = EigPairs { values, vectors };
    for c in 0..k {
        let vc = pairs.vectors.column(c).into_owned();
        let resid = (m.as_matrix() * &vc - pairs.values[c] * &vc).norm();
        if resid > 1e-8 * pairs.values[c].abs().max(1.0) {
            return Err(Error::EigNoConvergence { iterations: QL_MAX_SWEEPS, residual: resid });
        }
    }
    Ok(pairs)
}

/// Householder reduction to tridiagonal form; `v` is overwritten with the
/// accumulated orthogonal transform, `d`/`e` receive diagonal/subdiagonal.
fn tridiagonalize(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[n - 1][j];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for j in 0..i {
                e[j] = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[j][i] = f;
                g = e[j] + v[j][j] * f;
                for k in (j + 1)..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n.saturating_sub(1) {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[k][i + 1] * v[k][j];
                }
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[k][i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL iterations on the tridiagonal `(d, e)`, rotating `v`.
fn tridiagonal_ql(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > QL_MAX_SWEEPS {
                    return Err(Error::EigNoConvergence { iterations: iter, residual: e[l].abs() });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        let hk = row[i + 1];
                        row[i + 1] = s * row[i] + c * hk;
                        row[i] = c * row[i] - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Symmetric third-order tensor with dense `d³` storage.
#[derive(Clone, Debug, PartialEq)]
pub struct SymTensor3 {
    dim: usize,
    data: Vec<f64>,
}

impl SymTensor3 {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim * dim] }
    }

    /// `weight · x⊗x⊗x`.
    pub fn rank_one(weight: f64, x: &[f64]) -> Self {
        let mut t = Self::zeros(x.len());
        t.add_rank_one(weight, x);
        t
    }

    /// Symmetrizes raw `d³` row-major data by averaging each index orbit.
    pub fn symmetrize(dim: usize, raw: &[f64]) -> Result<Self> {
        if raw.len() != dim * dim * dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {} entries for dim {dim}, got {}",
                dim * dim * dim,
                raw.len()
            )));
        }
        let mut t = Self { dim, data: raw.to_vec() };
        t.symmetrize_in_place();
        Ok(t)
    }

    /// Builds from `f(i, j, k)` evaluated once per orbit (`i ≤ j ≤ k`).
    pub fn from_sorted_fn(dim: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                for k in j..dim {
                    t.set_orbit(i, j, k, f(i, j, k));
                }
            }
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dim + j) * self.dim + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx(i, j, k)]
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn set_orbit(&mut self, i: usize, j: usize, k: usize, x: f64) {
        for (a, b, c) in [(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
            let p = self.idx(a, b, c);
            self.data[p] = x;
        }
    }

    fn symmetrize_in_place(&mut self) {
        let d = self.dim;
        for i in 0..d {
            for j in i..d {
                for k in j..d {
                    let s = self.get(i, j, k)
                        + self.get(i, k, j)
                        + self.get(j, i, k)
                        + self.get(j, k, i)
                        + self.get(k, i, j)
                        + self.get(k, j, i);
                    self.set_orbit(i, j, k, s / 6.0);
                }
            }
        }
    }

    /// `self += weight · x⊗x⊗x`.
    pub fn add_rank_one(&mut self, weight: f64, x: &[f64]) {
        assert_eq!(x.len(), self.dim, "rank-one update dimension");
        let d = self.dim;
        for i in 0..d {
            for j in i..d {
                let wij = weight * x[i] * x[j];
                for k in j..d {
                    let v = self.get(i, j, k) + wij * x[k];
                    self.set_orbit(i, j, k, v);
                }
            }
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { dim: self.dim, data: self.data.iter().map(|x| c * x).collect() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch(format!(
                "tensor dims {} and {}",
                self.dim, other.dim
            )));
        }
        Ok(Self {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Frobenius norm of the entries.
    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// `T(W, W, W)`: contracts every mode of `t` (dim a) with `w` (a × b).
pub fn multilinear_map(t: &SymTensor3, w: &DMatrix<f64>) -> Result<SymTensor3> {
    let a = t.dim();
    if w.nrows() != a {
        return Err(Error::DimensionMismatch(format!(
            "tensor dim {a} but map has {} rows",
            w.nrows()
        )));
    }
    let b = w.ncols();
    // Mode-1: x1[i1, j2, j3] over j1.
    let mut x1 = vec![0.0; b * a * a];
    for j1 in 0..a {
        let slab = &t.data[j1 * a * a..(j1 + 1) * a * a];
        for i1 in 0..b {
            let wv = w[(j1, i1)];
            if wv == 0.0 {
                continue;
            }
            let dst = &mut x1[i1 * a * a..(i1 + 1) * a * a];
            for (dv, sv) in dst.iter_mut().zip(slab) {
                *dv += wv * sv;
            }
        }
    }
    // Mode-2: x2[i1, i2, j3] over j2.
    let mut x2 = vec![0.0; b * b * a];
    for i1 in 0..b {
        for j2 in 0..a {
            let src = &x1[(i1 * a + j2) * a..(i1 * a + j2 + 1) * a];
            for i2 in 0..b {
                let wv = w[(j2, i2)];
                let dst = &mut x2[(i1 * b + i2) * a..(i1 * b + i2 + 1) * a];
                for (dv, sv) in dst.iter_mut().zip(src) {
                    *dv += wv * sv;
                }
            }
        }
    }
    // Mode-3 and exact symmetrization.
    let mut raw = vec![0.0; b * b * b];
    for i12 in 0..b * b {
        let src = &x2[i12 * a..(i12 + 1) * a];
        for i3 in 0..b {
            raw[i12 * b + i3] = src.iter().enumerate().map(|(j3, x)| x * w[(j3, i3)]).sum();
        }
    }
    SymTensor3::symmetrize(b, &raw)
}

/// Returns `(T(I, θ, θ), T(θ, θ, θ))`.
pub fn tensor_contract(t: &SymTensor3, theta: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let d = t.dim();
    if theta.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "tensor dim {d} but vector has length {}",
            theta.len()
        )));
    }
    let mut out = DVector::zeros(d);
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            let row = &t.data[(i * d + j) * d..(i * d + j + 1) * d];
            let inner: f64 = row.iter().zip(theta.iter()).map(|(x, y)| x * y).sum();
            acc += theta[j] * inner;
        }
        out[i] = acc;
    }
    let scalar = theta.dot(&out);
    Ok((out, scalar))
}

pub const OP_NORM_RESTARTS: usize = 20;
const OP_NORM_MAX_ITERS: usize = 200;
const OP_NORM_TOL: f64 = 1e-10;
const OP_NORM_SEED: u64 = 0x0b5e_55ed_7e45_0a11;

/// Lower bound on `max_{‖θ‖=1} |T(θ,θ,θ)|` by multi-start power iteration.
///
/// Each start climbs both `T(θ,θ,θ)` and `-T(θ,θ,θ)` with the shifted power
/// map `θ ← (±T(I,θ,θ) + αθ)/‖·‖`, `α = 2‖T‖_F`, which increases the objective
/// monotonically. Start `r` always comes from the same stream, so adding
/// restarts can only raise the estimate.
pub fn tensor_op_norm(t: &SymTensor3, restarts: usize) -> f64 {
    let d = t.dim();
    let shift = 2.0 * t.frobenius();
    if d == 0 || shift == 0.0 {
        return 0.0;
    }
    let mut best: f64 = 0.0;
    for r in 0..restarts.max(1) {
        let mut rng = rng::stream(OP_NORM_SEED, Purpose::Other(OP_NORM_SEED), r as u64);
        let Some(start) = rng::unit_sphere(&mut rng, d) else { continue };
        for sign in [1.0, -1.0] {
            let mut theta = start.clone();
            for _ in 0..OP_NORM_MAX_ITERS {
                let (g, val) = tensor_contract(t, &theta).expect("dimension checked");
                best = best.max(val.abs());
                let step = sign * g + shift * &theta;
                let next = &step / step.norm();
                let moved = (&next - &theta).norm();
                theta = next;
                if moved < OP_NORM_TOL {
                    break;
                }
            }
            let (_, val) = tensor_contract(t, &theta).expect("dimension checked");
            best = best.max(val.abs());
        }
    }
    best
}

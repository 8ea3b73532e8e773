//! OFUL over a finite arm set, plus the quantities that say how much
//! feature error it tolerates.
//!
//! The optimistic choice `argmax_a max_{v ∈ C_{t-1}} ū_aᵀv` over the
//! ellipsoid `C_{t-1} = {v : ‖v − v̂‖_V ≤ D}` has the closed form
//! `ū_aᵀv̂ + D‖ū_a‖_{V⁻¹}`, which is what [`OfulState::select`] scores.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig_topk, SymMatrix};
use crate::rng::{self, Purpose};

/// Smallest gram eigenvalue accepted as an invertible design.
const DESIGN_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OfulMode {
    /// Ridge regression with `V = λI + Σ ūūᵀ`.
    Regularized,
    /// Least squares on `G = Σ ūūᵀ` with the finite-arm radius
    /// `√(4R²(A log t + log(A/δ)))`.
    Unregularized,
    /// Least squares with the radius for general arm sets, which needs a
    /// lower bound `λ₀` on `λ_min(G)` and the feature norm bound `R_X`.
    UnregularizedGeneral { lambda0: f64, r_x: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfulParams {
    pub lambda: f64,
    pub r_theta: f64,
    pub r_noise: f64,
    pub delta: f64,
    pub mode: OfulMode,
}

impl Default for OfulParams {
    fn default() -> Self {
        Self { lambda: 1.0, r_theta: 1.0, r_noise: 0.1, delta: 0.1, mode: OfulMode::Regularized }
    }
}

impl OfulParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta = {} outside (0, 1)", self.delta)));
        }
        if !(self.r_theta > 0.0 && self.r_noise > 0.0) {
            return Err(Error::InvalidArgument("r_theta and r_noise must be positive".into()));
        }
        match self.mode {
            OfulMode::Regularized if !(self.lambda > 0.0) => {
                Err(Error::InvalidArgument("regularized OFUL needs lambda > 0".into()))
            }
            OfulMode::UnregularizedGeneral { lambda0, r_x } if !(lambda0 > 0.0 && r_x > 0.0) => {
                Err(Error::InvalidArgument("lambda0 and r_x must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Whether `λ ≥ max{1, R_X², 1/(4R_Θ²)}`, the ridge level under which
    /// the robustness guarantee is stated.
    pub fn robust_lambda_ok(&self, r_x: f64) -> bool {
        self.lambda >= 1f64.max(r_x * r_x).max(1.0 / (4.0 * self.r_theta * self.r_theta))
    }

    fn ridge(&self) -> f64 {
        match self.mode {
            OfulMode::Regularized => self.lambda,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfulState {
    pub gram: SymMatrix,
    pub xy_sum: DVector<f64>,
    pub t: u64,
    pub v_hat: DVector<f64>,
}

impl OfulState {
    pub fn new(dim: usize, params: &OfulParams) -> Self {
        let mut gram = SymMatrix::zeros(dim);
        gram.add_diagonal(params.ridge());
        Self { gram, xy_sum: DVector::zeros(dim), t: 0, v_hat: DVector::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.xy_sum.len()
    }

    pub fn update(&mut self, feature: &[f64], reward: f64) -> Result<()> {
        if feature.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "feature of length {} for a dimension-{} state",
                feature.len(),
                self.dim()
            )));
        }
        self.gram.add_outer(1.0, feature);
        for (s, x) in self.xy_sum.iter_mut().zip(feature) {
            *s += reward * x;
        }
        self.t += 1;
        // Before the design has full rank (unregularized modes) v̂ stays at 0.
        if let Some(chol) = self.gram.as_matrix().clone().cholesky() {
            self.v_hat = chol.solve(&self.xy_sum);
        }
        Ok(())
    }

    /// Confidence radius `D_{t-1}` of the current ellipsoid.
    pub fn radius(&self, params: &OfulParams, arms: usize) -> Result<f64> {
        let r = params.r_noise;
        let c = self.dim() as f64;
        match params.mode {
            OfulMode::Regularized => {
                let log_det = self.log_det()?;
                let inner = 0.5 * log_det - 0.5 * c * params.lambda.ln() - params.delta.ln();
                Ok(r * (2.0 * inner.max(0.0)).sqrt() + params.lambda.sqrt() * params.r_theta)
            }
            OfulMode::Unregularized => {
                let a = arms as f64;
                let t = (self.t.max(1)) as f64;
                Ok((4.0 * r * r * (a * t.ln() + (a / params.delta).ln())).sqrt())
            }
            OfulMode::UnregularizedGeneral { lambda0, r_x } => {
                let t = (self.t.max(2)) as f64;
                let k = 36.0 * r_x * r_x / lambda0;
                let d = 16.0 * r * r
                    * (1.0 + (1.0 + k).ln())
                    * (c * (k * t).ln() + (1.0 / params.delta).ln())
                    * t.ln();
                Ok(d.max(0.0).sqrt())
            }
        }
    }

    fn log_det(&self) -> Result<f64> {
        let eig = sym_eig_topk(&self.gram, self.dim())?;
        Ok(eig.values.iter().map(|v| v.ln()).sum())
    }

    fn gram_inverse(&self) -> Result<DMatrix<f64>> {
        if self.dim() == 0 {
            return Ok(DMatrix::zeros(0, 0));
        }
        let eig = sym_eig_topk(&self.gram, self.dim())?;
        if !(eig.values[self.dim() - 1] > DESIGN_FLOOR) {
            return Err(Error::UninitializedDesign);
        }
        self.gram
            .as_matrix()
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(Error::UninitializedDesign)
    }

    /// Optimistic scores `ū_aᵀv̂ + D‖ū_a‖_{V⁻¹}` for every row of `features`.
    pub fn scores(&self, features: &DMatrix<f64>, params: &OfulParams) -> Result<Vec<f64>> {
        if features.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "features have {} columns for a dimension-{} state",
                features.ncols(),
                self.dim()
            )));
        }
        let inv = self.gram_inverse()?;
        let d = self.radius(params, features.nrows())?;
        Ok((0..features.nrows())
            .map(|a| {
                let u = features.row(a).transpose();
                let mean = u.dot(&self.v_hat);
                let width = (u.dot(&(&inv * &u))).max(0.0).sqrt();
                mean + d * width
            })
            .collect())
    }

    /// The optimistic arm; ties go to the lowest index.
    pub fn select(&self, features: &DMatrix<f64>, params: &OfulParams) -> Result<usize> {
        if features.nrows() == 1 {
            return Ok(0);
        }
        Ok(argmax(&self.scores(features, params)?))
    }

    /// Whether `v` lies in the current confidence ellipsoid.
    pub fn covers(&self, v: &DVector<f64>, params: &OfulParams, arms: usize) -> Result<bool> {
        let diff = &self.v_hat - v;
        Ok(self.gram.quad(&diff).max(0.0).sqrt() <= self.radius(params, arms)?)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `[ū; I_C]` stacked row-wise.
fn stacked(features: &DMatrix<f64>) -> DMatrix<f64> {
    let (a, c) = features.shape();
    DMatrix::from_fn(a + c, c, |i, j| {
        if i < a {
            features[(i, j)]
        } else if i - a == j {
            1.0
        } else {
            0.0
        }
    })
}

/// `‖A_J⁻¹‖₂` for the rows `rows` of `a`, or `None` if `A_J` is singular.
fn inverse_norm(a: &DMatrix<f64>, rows: &[usize]) -> Option<f64> {
    let c = a.ncols();
    let sub = DMatrix::from_fn(c, c, |i, j| a[(rows[i], j)]);
    let scale = sub.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let lu = sub.lu();
    let det = lu.determinant();
    if !(det.abs() > 1e-12 * scale.max(1.0).powi(c as i32)) {
        return None;
    }
    let inv = lu.try_inverse()?;
    let gram = SymMatrix::symmetrize(&(inv.transpose() * &inv)).ok()?;
    let top = sym_eig_topk(&gram, 1).ok()?;
    Some(top.values[0].max(0.0).sqrt())
}

/// Default cap on `C` for exhaustive `α` enumeration.
pub const ALPHA_EXACT_CAP: usize = 4;

/// `α(Ū) = max_J ‖A_J⁻¹‖₂` over the invertible `C×C` row subsets `J` of
/// `A = [Ū; I_C]`, by exhaustive enumeration (refused for `C > cap`).
pub fn alpha_of(features: &DMatrix<f64>, cap: usize) -> Result<f64> {
    let c = features.ncols();
    if c > cap {
        return Err(Error::AlphaCapExceeded { c, cap });
    }
    if c == 0 {
        return Ok(0.0);
    }
    let a = stacked(features);
    let n = a.nrows();
    let mut best: f64 = 0.0;
    let mut rows: Vec<usize> = (0..c).collect();
    loop {
        if let Some(norm) = inverse_norm(&a, &rows) {
            best = best.max(norm);
        }
        // Next combination in lexicographic order.
        let mut i = c;
        loop {
            if i == 0 {
                return Ok(best);
            }
            i -= 1;
            if rows[i] < n - c + i {
                break;
            }
        }
        rows[i] += 1;
        for j in i + 1..c {
            rows[j] = rows[j - 1] + 1;
        }
    }
}

/// Lower bound on `α(Ū)` from `samples` random row subsets (plus the
/// identity block). For class counts past the exhaustive cap.
pub fn alpha_sampled(features: &DMatrix<f64>, samples: usize, seed: u64) -> f64 {
    let c = features.ncols();
    if c == 0 {
        return 0.0;
    }
    let a = stacked(features);
    let n = a.nrows();
    let identity: Vec<usize> = (n - c..n).collect();
    let mut best = inverse_norm(&a, &identity).unwrap_or(0.0);
    let mut rng = rng::stream(seed, Purpose::Other(0xa1fa), 0);
    let mut pool: Vec<usize> = (0..n).collect();
    for _ in 0..samples {
        for i in 0..c {
            let j = rng.random_range(i..n);
            pool.swap(i, j);
        }
        let mut rows = pool[..c].to_vec();
        rows.sort_unstable();
        if let Some(norm) = inverse_norm(&a, &rows) {
            best = best.max(norm);
        }
    }
    best
}

/// The unique optimal arm of `features · v_circ`.
pub fn unique_best(features: &DMatrix<f64>, v_circ: &DVector<f64>) -> Result<usize> {
    let values: Vec<f64> = (features * v_circ).iter().copied().collect();
    let best = argmax(&values);
    if values.iter().enumerate().any(|(a, &x)| a != best && x >= values[best]) {
        return Err(Error::TiedOptimum);
    }
    Ok(best)
}

/// Largest `‖ε‖` (deviation of the true means from `Ū v°`) under which the
/// optimal arm of every parameter within `α‖ε‖` of `v°` is still `a*`:
/// `min_{a≠a*} (ū_{a*} − ū_a)ᵀv° / (2α‖ū_{a*} − ū_a‖)`.
pub fn critical_radius(features: &DMatrix<f64>, v_circ: &DVector<f64>, alpha: f64) -> Result<f64> {
    let best = unique_best(features, v_circ)?;
    let top = features.row(best);
    let mut radius = f64::INFINITY;
    for a in 0..features.nrows() {
        if a == best {
            continue;
        }
        let diff = top - features.row(a);
        let gap = diff.dot(&v_circ.transpose());
        radius = radius.min(gap / (2.0 * alpha * diff.norm()));
    }
    Ok(radius)
}

/// `ρ′ = max{1, max_{a≠a*} (m_{a*} − m_a)/((ū_{a*} − ū_a)ᵀv°)}`, with `a*`
/// the optimal arm of the linear approximation.
pub fn rho_prime(m: &[f64], features: &DMatrix<f64>, v_circ: &DVector<f64>) -> Result<f64> {
    if m.len() != features.nrows() {
        return Err(Error::DimensionMismatch("m and features disagree on A".into()));
    }
    let best = unique_best(features, v_circ)?;
    let approx: Vec<f64> = (features * v_circ).iter().copied().collect();
    let mut rho: f64 = 1.0;
    for a in 0..m.len() {
        if a == best {
            continue;
        }
        let denom = approx[best] - approx[a];
        if !(denom > 0.0) {
            return Err(Error::OutsideRobustRegime(format!("approximate gap of arm {a} is {denom}")));
        }
        rho = rho.max((m[best] - m[a]) / denom);
    }
    Ok(rho)
}

/// `v⁺ = v° + V⁻¹ Σ_a f_a ū_a ε_a`: the parameter the ridge estimate is
/// centred on when arm `a` has been played `f_a` times and its mean reward
/// deviates from `ū_aᵀv°` by `ε_a`.
pub fn parameter_bias(
    features: &DMatrix<f64>,
    counts: &[f64],
    eps: &[f64],
    v_circ: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    let (a, c) = features.shape();
    if counts.len() != a || eps.len() != a || v_circ.len() != c {
        return Err(Error::DimensionMismatch("parameter_bias inputs disagree".into()));
    }
    let mut gram = DMatrix::identity(c, c) * lambda;
    let mut rhs = DVector::zeros(c);
    for i in 0..a {
        let u = features.row(i).transpose();
        gram += counts[i] * &u * u.transpose();
        rhs += counts[i] * eps[i] * &u;
    }
    let shift = gram.cholesky().ok_or(Error::UninitializedDesign)?.solve(&rhs);
    Ok(v_circ + shift)
}

/// Outcome of a single-user OFUL run on fixed arm features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearRun {
    /// Cumulative regret after each step.
    pub regret: Vec<f64>,
    /// Whether `v_cover` stayed inside the confidence ellipsoid at every step.
    pub covered: bool,
    pub plays: Vec<usize>,
}

/// Runs OFUL for `horizon` steps on arms `features` whose true mean rewards
/// are `means` (Gaussian noise of scale `params.r_noise`). Unregularized
/// modes open with one pull of each arm. `v_cover` is the parameter whose
/// membership in the ellipsoid is tracked.
pub fn simulate_linear(
    features: &DMatrix<f64>,
    means: &[f64],
    v_cover: &DVector<f64>,
    params: &OfulParams,
    horizon: usize,
    seed: u64,
) -> Result<LinearRun> {
    params.validate()?;
    let arms = features.nrows();
    if means.len() != arms {
        return Err(Error::DimensionMismatch("means and features disagree on A".into()));
    }
    let best = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut noise = rng::stream(seed, Purpose::Noise, 0);
    let mut state = OfulState::new(features.ncols(), params);
    let mut covered = true;
    let mut total = 0.0;
    let mut regret = Vec::with_capacity(horizon);
    let mut plays = Vec::with_capacity(horizon);
    for step in 0..horizon {
        let arm = if params.mode != OfulMode::Regularized && step < arms {
            step
        } else {
            if !state.covers(v_cover, params, arms)? {
                covered = false;
            }
            state.select(features, params)?
        };
        let feature: Vec<f64> = features.row(arm).iter().copied().collect();
        let reward = means[arm] + params.r_noise * rng::gaussian(&mut noise);
        state.update(&feature, reward)?;
        total += best - means[arm];
        regret.push(total);
        plays.push(arm);
    }
    Ok(LinearRun { regret, covered, plays })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> OfulParams {
        OfulParams { lambda: 1.0, r_theta: 1.0, r_noise: 0.5, delta: 0.1, mode: OfulMode::Regularized }
    }

    #[test]
    fn single_arm_is_always_chosen() {
        let s = OfulState::new(2, &params());
        let f = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert_eq!(s.select(&f, &params()).unwrap(), 0);
    }

    #[test]
    fn first_pick_is_largest_norm() {
        let s = OfulState::new(2, &params());
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 0.0]);
        assert_eq!(s.select(&f, &params()).unwrap(), 1);
    }

    #[test]
    fn one_dimensional_hand_computation() {
        let p = params();
        let mut s = OfulState::new(1, &p);
        s.update(&[1.0], 1.0).unwrap();
        assert!((s.v_hat[0] - 0.5).abs() < 1e-15);
        assert!((s.gram.get(0, 0) - 2.0).abs() < 1e-15);
        let d = p.r_noise * (2.0 * (2f64.sqrt() / p.delta).ln()).sqrt() + p.r_theta;
        assert!((s.radius(&p, 2).unwrap() - d).abs() < 1e-12);
        let f = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
        let scores = s.scores(&f, &p).unwrap();
        assert!((scores[0] - (0.5 + d / 2f64.sqrt())).abs() < 1e-12);
        assert!((scores[1] - (0.25 + 0.5 * d / 2f64.sqrt())).abs() < 1e-12);
        assert_eq!(s.select(&f, &p).unwrap(), 0);
    }

    #[test]
    fn ridge_closed_form_and_zero_update() {
        let p = params();
        let mut s = OfulState::new(1, &p);
        s.update(&[1.0], 2.0).unwrap();
        assert!((s.v_hat[0] - 1.0).abs() < 1e-15);
        let before = s.v_hat.clone();
        s.update(&[0.0], 5.0).unwrap();
        assert_eq!(s.v_hat, before);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        let s = OfulState::new(2, &params());
        let f = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(s.select(&f, &params()).unwrap(), 0);
    }

    #[test]
    fn unregularized_requires_full_design() {
        let p = OfulParams { mode: OfulMode::Unregularized, ..params() };
        let mut s = OfulState::new(2, &p);
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(s.select(&f, &p), Err(Error::UninitializedDesign)));
        s.update(&[1.0, 0.0], 1.0).unwrap();
        assert!(matches!(s.select(&f, &p), Err(Error::UninitializedDesign)));
        s.update(&[0.0, 1.0], 0.0).unwrap();
        assert!(s.select(&f, &p).is_ok());
        assert!((s.v_hat[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_small_cases() {
        let empty = DMatrix::<f64>::zeros(0, 2);
        assert!((alpha_of(&empty, 4).unwrap() - 1.0).abs() < 1e-12);
        let eye = DMatrix::<f64>::identity(2, 2);
        assert!((alpha_of(&eye, 4).unwrap() - 1.0).abs() < 1e-12);
        let wide = DMatrix::<f64>::zeros(2, 5);
        assert!(matches!(alpha_of(&wide, 4), Err(Error::AlphaCapExceeded { c: 5, cap: 4 })));
        assert!(alpha_sampled(&DMatrix::identity(3, 3), 50, 1) >= 1.0 - 1e-12);
    }

    #[test]
    fn critical_radius_example() {
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let v = DVector::from_vec(vec![1.0, 0.0]);
        let alpha = alpha_of(&f, 4).unwrap();
        let r = critical_radius(&f, &v, alpha).unwrap();
        assert!((r - 1.0 / (2.0 * 2f64.sqrt())).abs() < 1e-12);

        let tied = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(critical_radius(&tied, &v, 1.0), Err(Error::TiedOptimum)));
    }

    #[test]
    fn rho_prime_examples() {
        let f = DMatrix::from_row_slice(3, 1, &[1.0, 0.5, 0.2]);
        let v = DVector::from_vec(vec![1.0]);
        assert_eq!(rho_prime(&[1.0, 0.5, 0.2], &f, &v).unwrap(), 1.0);
        let doubled = [1.0, 0.0, -0.6];
        assert!((rho_prime(&doubled, &f, &v).unwrap() - 2.0).abs() < 1e-12);
    }
}

//! Class feature recovery from the estimated moments, and the constants
//! that control how accurate that recovery is.
//!
//! With `M̂₂ ≈ Û D̂ Ûᵀ` (top `C` eigenpairs) the whitener `Ŵ = Û D̂^{-1/2}`
//! maps `M̂₃` to a `C×C×C` tensor whose robust eigenpairs `(λ̂_c, φ̂_c)`
//! un-whiten to class columns `ū_c = λ̂_c Û D̂^{1/2} φ̂_c` with weights
//! `v̄_c = λ̂_c⁻²`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{multilinear_map, sym_eig_topk, SymMatrix, SymTensor3};
use crate::moments::MomentEstimates;
use crate::rtp::{rtp_decompose, RtpConfig};

/// Second-moment eigenvalues at or below this are treated as missing rank.
pub const RANK_FLOOR: f64 = 1e-12;
/// Robust eigenvalues at or below this give an invalid (zeroed) column.
pub const LAMBDA_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEstimate {
    pub n: u64,
    pub lambda: Vec<f64>,
    #[serde(with = "crate::serde_rows")]
    pub u_bar: DMatrix<f64>,
    pub v_bar: Vec<f64>,
    /// Robust eigenvectors as columns, matching `lambda`.
    #[serde(with = "crate::serde_rows")]
    pub phi: DMatrix<f64>,
    #[serde(with = "crate::serde_rows")]
    pub whitener: DMatrix<f64>,
    /// `false` where `λ̂_c ≤ LAMBDA_FLOOR`; that column of `u_bar` is zero.
    pub valid: Vec<bool>,
}

impl FeatureEstimate {
    pub fn classes(&self) -> usize {
        self.lambda.len()
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }
}

/// Recovers `C` class columns from running moment estimates.
pub fn estimate_features(
    moments: &MomentEstimates,
    classes: usize,
    cfg: &RtpConfig,
) -> Result<FeatureEstimate> {
    if moments.sessions() == 0 {
        return Err(Error::InvalidArgument("no sessions ingested".into()));
    }
    decompose(&moments.m2(), |w| moments.m3_whitened(w), classes, cfg, moments.sessions())
}

/// Same as [`estimate_features`] for moments given directly.
pub fn features_from_moments(
    m2: &SymMatrix,
    m3: &SymTensor3,
    classes: usize,
    cfg: &RtpConfig,
) -> Result<FeatureEstimate> {
    if m2.dim() != m3.dim() {
        return Err(Error::DimensionMismatch(format!(
            "M2 is {0}x{0} but M3 has dimension {1}",
            m2.dim(),
            m3.dim()
        )));
    }
    decompose(m2, |w| multilinear_map(m3, w), classes, cfg, 0)
}

fn decompose(
    m2: &SymMatrix,
    whiten_m3: impl FnOnce(&DMatrix<f64>) -> Result<SymTensor3>,
    classes: usize,
    cfg: &RtpConfig,
    n: u64,
) -> Result<FeatureEstimate> {
    let eig = sym_eig_topk(m2, classes)?;
    if let Some((index, &value)) =
        eig.values.iter().enumerate().find(|(_, &v)| !(v > RANK_FLOOR))
    {
        return Err(Error::RankDeficient { index, value });
    }
    let sqrt_d: Vec<f64> = eig.values.iter().map(|v| v.sqrt()).collect();
    let whitener = DMatrix::from_fn(m2.dim(), classes, |i, j| eig.vectors[(i, j)] / sqrt_d[j]);
    let unwhitener = DMatrix::from_fn(m2.dim(), classes, |i, j| eig.vectors[(i, j)] * sqrt_d[j]);

    let t_hat = whiten_m3(&whitener)?;
    let rtp_cfg = RtpConfig { factors: classes, ..cfg.clone() };
    let pairs = rtp_decompose(&t_hat, &rtp_cfg)?;

    let a = m2.dim();
    let mut u_bar = DMatrix::zeros(a, classes);
    let mut phi = DMatrix::zeros(classes, classes);
    let mut lambda = Vec::with_capacity(classes);
    let mut v_bar = Vec::with_capacity(classes);
    let mut valid = Vec::with_capacity(classes);
    for (c, pair) in pairs.iter().enumerate() {
        phi.set_column(c, &pair.phi);
        lambda.push(pair.lambda);
        if pair.lambda > LAMBDA_FLOOR {
            let col: DVector<f64> = pair.lambda * (&unwhitener * &pair.phi);
            u_bar.set_column(c, &col);
            v_bar.push(pair.lambda.powi(-2));
            valid.push(true);
        } else {
            v_bar.push(0.0);
            valid.push(false);
        }
    }
    Ok(FeatureEstimate { n, lambda, u_bar, v_bar, phi, whitener, valid })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// `perm[c]` is the estimated column matched to true column `c`.
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
    pub max_err: f64,
}

/// Largest class count handled by exhaustive permutation search.
pub const MAX_ENUMERATED_CLASSES: usize = 8;

/// Best column matching of `u_est` onto `u_true` up to permutation and sign,
/// minimizing the worst column error. Exhaustive, so limited to
/// `C ≤ MAX_ENUMERATED_CLASSES`; see [`align_columns_assignment`] beyond.
pub fn align_columns(u_true: &DMatrix<f64>, u_est: &DMatrix<f64>) -> Result<Alignment> {
    let (dist, sign) = column_distances(u_true, u_est)?;
    let c = dist.nrows();
    if c > MAX_ENUMERATED_CLASSES {
        return Err(Error::AlignmentTooLarge(c));
    }
    let mut best = (f64::INFINITY, (0..c).collect::<Vec<_>>());
    let mut current = Vec::with_capacity(c);
    let mut used = vec![false; c];
    search(&dist, &mut current, &mut used, 0.0, &mut best);
    let (max_err, perm) = best;
    let signs = perm.iter().enumerate().map(|(i, &j)| sign[(i, j)]).collect();
    Ok(Alignment { perm, signs, max_err: if c == 0 { 0.0 } else { max_err } })
}

fn search(
    dist: &DMatrix<f64>,
    current: &mut Vec<usize>,
    used: &mut [bool],
    worst: f64,
    best: &mut (f64, Vec<usize>),
) {
    let c = dist.nrows();
    if worst >= best.0 && !best.0.is_infinite() {
        return;
    }
    if current.len() == c {
        if worst < best.0 {
            *best = (worst, current.clone());
        }
        return;
    }
    let row = current.len();
    for j in 0..c {
        if used[j] {
            continue;
        }
        used[j] = true;
        current.push(j);
        search(dist, current, used, worst.max(dist[(row, j)]), best);
        current.pop();
        used[j] = false;
    }
}

/// Column matching by minimum-total-distance assignment (Hungarian method).
/// Polynomial in `C`; the reported `max_err` is the worst column of that
/// assignment, which can exceed the exhaustive optimum.
pub fn align_columns_assignment(u_true: &DMatrix<f64>, u_est: &DMatrix<f64>) -> Result<Alignment> {
    let (dist, sign) = column_distances(u_true, u_est)?;
    let perm = hungarian(&dist);
    let signs = perm.iter().enumerate().map(|(i, &j)| sign[(i, j)]).collect();
    let max_err = perm.iter().enumerate().map(|(i, &j)| dist[(i, j)]).fold(0.0, f64::max);
    Ok(Alignment { perm, signs, max_err })
}

/// Pairwise `min_s ‖u_true[:,i] − s·u_est[:,j]‖` and the minimizing sign
/// (`+1` on ties).
fn column_distances(
    u_true: &DMatrix<f64>,
    u_est: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if u_true.shape() != u_est.shape() {
        return Err(Error::DimensionMismatch(format!(
            "true columns {:?} vs estimated {:?}",
            u_true.shape(),
            u_est.shape()
        )));
    }
    let c = u_true.ncols();
    let mut dist = DMatrix::zeros(c, c);
    let mut sign = DMatrix::from_element(c, c, 1.0);
    for i in 0..c {
        for j in 0..c {
            let plus = (u_true.column(i) - u_est.column(j)).norm();
            let minus = (u_true.column(i) + u_est.column(j)).norm();
            if minus < plus {
                dist[(i, j)] = minus;
                sign[(i, j)] = -1.0;
            } else {
                dist[(i, j)] = plus;
            }
        }
    }
    Ok((dist, sign))
}

/// Min-cost perfect matching on a square cost matrix (potentials form).
fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // 1-based arrays with a sentinel column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    perm
}

/// Problem constants entering the recovery and threshold formulas.
///
/// `gamma` is the smallest gap between the `σ_c = √λ_c(M₂)`; it is
/// `f64::INFINITY` for a single class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    pub v_min: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub gamma: f64,
    pub u_max: f64,
    pub c1: f64,
}

impl ModelConstants {
    /// Constants of the model `(U, V, β)` with `V` the B×C mixture matrix.
    pub fn from_model(u: &DMatrix<f64>, v: &DMatrix<f64>, beta: &[f64], c1: f64) -> Result<Self> {
        let classes = u.ncols();
        if v.ncols() != classes || v.nrows() != beta.len() {
            return Err(Error::DimensionMismatch("U, V and beta disagree".into()));
        }
        let v_beta: Vec<f64> =
            (0..classes).map(|c| (0..beta.len()).map(|b| v[(b, c)] * beta[b]).sum()).collect();
        let (m2, _) = crate::moments::population_moments(u, &v_beta)?;
        let eig = sym_eig_topk(&m2, classes)?;
        let sigmas: Vec<f64> = eig.values.iter().map(|x| x.max(0.0).sqrt()).collect();
        let gamma = sigmas.windows(2).map(|w| (w[0] - w[1]).abs()).fold(f64::INFINITY, f64::min);
        Ok(Self {
            v_min: v.iter().copied().fold(f64::INFINITY, f64::min),
            sigma_min: sigmas.iter().copied().fold(f64::INFINITY, f64::min),
            sigma_max: sigmas.iter().copied().fold(0.0, f64::max),
            gamma,
            u_max: u.iter().fold(0.0, |m: f64, x| m.max(x.abs())),
            c1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.v_min, self.sigma_min, self.sigma_max, self.gamma, self.u_max, self.c1]
            .iter()
            .all(|&x| x > 0.0);
        if !positive {
            return Err(Error::InvalidArgument(format!("model constants must be positive: {self:?}")));
        }
        if self.sigma_min > self.sigma_max {
            return Err(Error::InvalidArgument("sigma_min exceeds sigma_max".into()));
        }
        Ok(())
    }

    /// `min{Γ, σ_min}`.
    pub fn m(&self) -> f64 {
        self.gamma.min(self.sigma_min)
    }

    /// `ℵ = 1 + 10(1/Γ + 1/σ_min)(1 + u_max³)`.
    pub fn aleph(&self) -> f64 {
        1.0 + 10.0 * (1.0 / self.gamma + 1.0 / self.sigma_min) * (1.0 + self.u_max.powi(3))
    }

    /// The recovery constant `◇`.
    pub fn diamond(&self, arms: usize, classes: usize) -> f64 {
        let (a, c) = (arms as f64, classes as f64);
        let (smin, smax, g, m) = (self.sigma_min, self.sigma_max, self.gamma, self.m());
        let aleph = self.aleph();
        let head = (c * a / smin).powf(1.5)
            * (13.0 * smax.sqrt()
                + 4.0 * (2.0 * m).sqrt()
                + 5.0 * (smax / g + 1.0 / (2.0 * smax)) * m)
            * aleph;
        let weights = (2.0 * smax / g + 1.0 / smax) / self.v_min.powi(2);
        let tail = 5.0 * (3.0f64 / 8.0).sqrt()
            * (smax.sqrt() + (m / 2.0).sqrt())
            * (2.0 * c * a / smin).powi(3)
            * aleph.powi(2)
            * m;
        head + weights + tail
    }

    /// The leading-order constant `Δ` of the asymptotic recovery bound.
    pub fn delta_asymptotic(&self, arms: usize, classes: usize) -> f64 {
        let (a, c) = (arms as f64, classes as f64);
        13.0 * self.sigma_max.sqrt() * (c * a / self.sigma_min).powf(1.5) * self.aleph()
            + (2.0 * self.sigma_max / self.gamma + 1.0 / self.sigma_max) / self.v_min.powi(2)
    }
}

/// `√(Σγᵢ⁻² · C · log(4A³/δ) / (2n²))`, the rate shared by the bounds below.
fn recovery_rate(classes: usize, n: usize, gammas: &[f64], delta: f64, arms: usize) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta = {delta} outside (0, 1)")));
    }
    if n == 0 || gammas.len() < n || gammas[..n].iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
        return Err(Error::InvalidArgument("need n >= 1 gammas in (0, 1]".into()));
    }
    let inv_sq: f64 = gammas[..n].iter().map(|g| g.powi(-2)).sum();
    let a = arms as f64;
    Ok((inv_sq * classes as f64 * (4.0 * a.powi(3) / delta).ln() / (2.0 * (n as f64).powi(2)))
        .sqrt())
}

/// High-probability bound on the aligned column error of the recovered
/// class matrix after `n` sessions.
pub fn recovery_bound(
    mc: &ModelConstants,
    arms: usize,
    classes: usize,
    n: usize,
    gammas: &[f64],
    delta: f64,
) -> Result<f64> {
    mc.validate()?;
    let rate = recovery_rate(classes, n, gammas, delta, arms)?;
    Ok(mc.diamond(arms, classes) * (arms as f64).powi(3) * rate)
}

/// Leading-order form of [`recovery_bound`] using `Δ` in place of `◇`.
pub fn recovery_bound_asymptotic(
    mc: &ModelConstants,
    arms: usize,
    classes: usize,
    n: usize,
    gammas: &[f64],
    delta: f64,
) -> Result<f64> {
    mc.validate()?;
    let rate = recovery_rate(classes, n, gammas, delta, arms)?;
    Ok(mc.delta_asymptotic(arms, classes) * (arms as f64).powi(3) * rate)
}

/// The two branches of the exploration threshold `⬡_{b,δ}` and their max.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hexagon {
    pub moment_branch: f64,
    pub robustness_branch: f64,
    pub value: f64,
}

/// Number of effective exploration sessions `n²/Σγᵢ⁻²` after which the
/// recovered features of user `b` are accurate enough for per-user OFUL to
/// keep its logarithmic regret.
///
/// `v_b` is the user's mixture row, `g_b` the gap between its best and
/// second-best expected action and `alpha_star` the conditioning constant
/// of the recovered features.
pub fn hexagon_threshold(
    mc: &ModelConstants,
    arms: usize,
    classes: usize,
    delta: f64,
    v_b: &[f64],
    g_b: f64,
    alpha_star: f64,
) -> Result<Hexagon> {
    mc.validate()?;
    if !(g_b > 0.0) {
        return Err(Error::NoUniqueOptimum);
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta = {delta} outside (0, 1)")));
    }
    let (a, c) = (arms as f64, classes as f64);
    let log2 = (4.0 * a * a / delta).ln();
    let log3 = (4.0 * a.powi(3) / delta).ln();
    let vb_sq: f64 = v_b.iter().map(|x| x * x).sum();
    let moment_branch = 2.0 * a.powi(6) * log2 / mc.m().powi(2);
    let tensor = a.powi(9) * mc.aleph().powi(2) * c.powi(5) * log3
        / (2.0 * mc.c1.powi(2) * mc.sigma_min.powi(3));
    let recovery = mc.diamond(arms, classes).powi(2) * a.powi(6) * c * c * log3;
    let robust = (2.0 * alpha_star.powi(2))
        .max(8.0 * a * vb_sq / g_b.powi(2))
        .max(128.0 * alpha_star.powi(2) * c * mc.u_max.powi(2) * vb_sq / g_b.powi(2) + 0.5);
    let robustness_branch = tensor * recovery * robust;
    Ok(Hexagon { moment_branch, robustness_branch, value: moment_branch.max(robustness_branch) })
}

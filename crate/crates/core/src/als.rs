//! Alternating least squares on the partially observed user × action
//! mean-reward table, used as a feature-learning baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Ridge added when a normal-equation system turns out singular.
pub const RIDGE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlsConfig {
    /// Factorization rank; the class count when absent.
    pub rank: Option<usize>,
    pub iterations: usize,
    pub ridge: f64,
    /// Standard deviation of the Gaussian initialization.
    pub init_scale: f64,
}

impl Default for AlsConfig {
    fn default() -> Self {
        Self { rank: None, iterations: 20, ridge: 1e-3, init_scale: 0.1 }
    }
}

/// Running per-cell reward means and the current factorization
/// `table ≈ V̂ Ûᵀ` (users × actions).
#[derive(Clone, Debug, PartialEq)]
pub struct AlsState {
    sums: DMatrix<f64>,
    counts: DMatrix<f64>,
    pub u_hat: DMatrix<f64>,
    pub v_hat: DMatrix<f64>,
}

impl AlsState {
    pub fn new(arms: usize, users: usize, rank: usize, cfg: &AlsConfig, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("ALS rank must be positive".into()));
        }
        let mut rng = rng::stream(seed, Purpose::Other(0xa15), 0);
        let mut init = |r: usize, c: usize| {
            DMatrix::from_fn(r, c, |_, _| cfg.init_scale * rng::gaussian(&mut rng))
        };
        let u_hat = init(arms, rank);
        let v_hat = init(users, rank);
        Ok(Self {
            sums: DMatrix::zeros(users, arms),
            counts: DMatrix::zeros(users, arms),
            u_hat,
            v_hat,
        })
    }

    pub fn observe(&mut self, user: usize, action: usize, reward: f64) {
        self.sums[(user, action)] += reward;
        self.counts[(user, action)] += 1.0;
    }

    /// Runs `cfg.iterations` alternating sweeps from the current factors.
    pub fn fit(&mut self, cfg: &AlsConfig) {
        let (users, arms) = self.sums.shape();
        let means = DMatrix::from_fn(users, arms, |b, a| {
            let n = self.counts[(b, a)];
            if n > 0.0 { self.sums[(b, a)] / n } else { 0.0 }
        });
        let observed = self.counts.map(|n| n > 0.0);
        for _ in 0..cfg.iterations {
            for b in 0..users {
                let row = solve_side(&self.u_hat, |a| observed[(b, a)].then(|| means[(b, a)]), cfg.ridge);
                if let Some(row) = row {
                    self.v_hat.set_row(b, &row.transpose());
                }
            }
            for a in 0..arms {
                let row = solve_side(&self.v_hat, |b| observed[(b, a)].then(|| means[(b, a)]), cfg.ridge);
                if let Some(row) = row {
                    self.u_hat.set_row(a, &row.transpose());
                }
            }
        }
    }

    /// `V̂ Ûᵀ`.
    pub fn reconstruction(&self) -> DMatrix<f64> {
        &self.v_hat * self.u_hat.transpose()
    }
}

/// Ridge regression of the observed targets on the rows of `factors`;
/// `None` when nothing is observed.
fn solve_side(
    factors: &DMatrix<f64>,
    target: impl Fn(usize) -> Option<f64>,
    ridge: f64,
) -> Option<DVector<f64>> {
    let k = factors.ncols();
    let mut gram = DMatrix::identity(k, k) * ridge;
    let mut rhs = DVector::zeros(k);
    let mut any = false;
    for i in 0..factors.nrows() {
        if let Some(y) = target(i) {
            let f = factors.row(i).transpose();
            gram += &f * f.transpose();
            rhs += y * &f;
            any = true;
        }
    }
    if !any {
        return None;
    }
    if let Some(chol) = gram.clone().cholesky() {
        return Some(chol.solve(&rhs));
    }
    gram += DMatrix::identity(k, k) * RIDGE_FLOOR;
    gram.cholesky().map(|c| c.solve(&rhs))
}

//! Robust tensor power method with random restarts and deflation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{tensor_contract, SymTensor3};
use crate::rng::{self, Purpose};

/// Below this norm a power-iterate is treated as the zero vector.
const ZERO_ITERATE: f64 = 1e-14;
/// Fresh starts drawn for a restart whose iterate collapsed to zero.
const START_REDRAWS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RtpConfig {
    pub restarts: usize,
    pub power_iters: usize,
    pub factors: usize,
    pub seed: u64,
    pub convergence_tol: f64,
}

impl Default for RtpConfig {
    fn default() -> Self {
        Self { restarts: 100, power_iters: 100, factors: 1, seed: 0, convergence_tol: 1e-12 }
    }
}

impl RtpConfig {
    pub fn with_factors(factors: usize) -> Self {
        Self { factors, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.power_iters == 0 || self.factors == 0 {
            return Err(Error::InvalidArgument(
                "restarts, power_iters and factors must be positive".into(),
            ));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidArgument("convergence_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustEigPair {
    pub lambda: f64,
    pub phi: DVector<f64>,
}

/// Extracts `cfg.factors` robust eigenpairs of `t`, sorted by eigenvalue,
/// largest first.
///
/// Restart `r` of round `k` draws from its own stream, so the output is a
/// pure function of `(t, cfg)`.
pub fn rtp_decompose(t: &SymTensor3, cfg: &RtpConfig) -> Result<Vec<RobustEigPair>> {
    cfg.validate()?;
    let dim = t.dim();
    if cfg.factors > dim {
        return Err(Error::InvalidArgument(format!(
            "asked for {} factors of a dimension-{dim} tensor",
            cfg.factors
        )));
    }
    let mut residual = t.clone();
    let mut pairs = Vec::with_capacity(cfg.factors);
    for round in 0..cfg.factors {
        let mut best: Option<(f64, DVector<f64>)> = None;
        for restart in 0..cfg.restarts {
            let index = ((round as u64) << 32) | restart as u64;
            let mut rng = rng::stream(cfg.seed, Purpose::Rtp, index);
            for _ in 0..START_REDRAWS {
                let Some(start) = rng::unit_sphere(&mut rng, dim) else { continue };
                if let Some(theta) = power_iterate(&residual, start, cfg)? {
                    let (_, value) = tensor_contract(&residual, &theta)?;
                    if best.as_ref().is_none_or(|(b, _)| value > *b) {
                        best = Some((value, theta));
                    }
                    break;
                }
            }
        }
        let (_, candidate) = best.ok_or(Error::TensorNumericallyZero)?;
        let theta = power_iterate(&residual, candidate.clone(), cfg)?.unwrap_or(candidate);
        let (_, lambda) = tensor_contract(&residual, &theta)?;
        let coords: Vec<f64> = theta.iter().copied().collect();
        residual.add_rank_one(-lambda, &coords);
        pairs.push(RobustEigPair { lambda, phi: theta });
    }
    pairs.sort_by(|a, b| b.lambda.total_cmp(&a.lambda));
    Ok(pairs)
}

/// Up to `power_iters` steps of `θ ← T(I,θ,θ)/‖T(I,θ,θ)‖`; `None` if an
/// iterate vanishes.
fn power_iterate(
    t: &SymTensor3,
    mut theta: DVector<f64>,
    cfg: &RtpConfig,
) -> Result<Option<DVector<f64>>> {
    for _ in 0..cfg.power_iters {
        let (g, _) = tensor_contract(t, &theta)?;
        let norm = g.norm();
        if norm < ZERO_ITERATE {
            return Ok(None);
        }
        let next = g / norm;
        let moved = (&next - &theta).norm();
        theta = next;
        if moved < cfg.convergence_tol {
            break;
        }
    }
    Ok(Some(theta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn rank_one_exact() {
        let t = SymTensor3::rank_one(2.0, &basis(3, 0));
        let pairs = rtp_decompose(&t, &RtpConfig::with_factors(1)).unwrap();
        assert_eq!(pairs.len(), 1);
        assert!((pairs[0].lambda - 2.0).abs() < 1e-10);
        assert!((pairs[0].phi[0].abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_tensor_is_an_error() {
        let t = SymTensor3::zeros(3);
        let err = rtp_decompose(&t, &RtpConfig::with_factors(1)).unwrap_err();
        assert!(matches!(err, Error::TensorNumericallyZero));
    }

    #[test]
    fn rejects_bad_config() {
        let t = SymTensor3::rank_one(1.0, &basis(2, 0));
        assert!(rtp_decompose(&t, &RtpConfig::with_factors(3)).is_err());
        let cfg = RtpConfig { restarts: 0, ..RtpConfig::with_factors(1) };
        assert!(rtp_decompose(&t, &cfg).is_err());
        let cfg = RtpConfig { convergence_tol: 0.0, ..RtpConfig::with_factors(1) };
        assert!(rtp_decompose(&t, &cfg).is_err());
    }

    #[test]
    fn output_is_sorted_and_deterministic() {
        let mut t = SymTensor3::rank_one(1.0, &basis(3, 1));
        t.add_rank_one(4.0, &basis(3, 2));
        t.add_rank_one(2.5, &basis(3, 0));
        let cfg = RtpConfig { seed: 11, ..RtpConfig::with_factors(3) };
        let a = rtp_decompose(&t, &cfg).unwrap();
        let b = rtp_decompose(&t, &cfg).unwrap();
        assert_eq!(a, b);
        let lambdas: Vec<f64> = a.iter().map(|p| p.lambda).collect();
        for (got, want) in lambdas.iter().zip([4.0, 2.5, 1.0]) {
            assert!((got - want).abs() < 1e-10);
        }
    }
}

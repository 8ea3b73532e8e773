use lbl_core::linalg::{tensor_op_norm, SymTensor3, OP_NORM_RESTARTS};
use lbl_core::rng::{self, Purpose};
use lbl_core::rtp::{rtp_decompose, RtpConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

/// Orthogonal tensor `Σ λ_j q_j⊗q_j⊗q_j` with a random orthonormal basis.
fn orthogonal_tensor(c: usize, seed: u64) -> (SymTensor3, Vec<f64>, DMatrix<f64>) {
    let mut rng = rng::stream(seed, Purpose::Other(21), 0);
    let q = DMatrix::from_fn(c, c, |_, _| rng::gaussian(&mut rng)).qr().q();
    let lambdas: Vec<f64> = (0..c).map(|_| rng.random_range(1.0..3.0)).collect();
    let mut t = SymTensor3::zeros(c);
    for j in 0..c {
        let col: Vec<f64> = q.column(j).iter().copied().collect();
        t.add_rank_one(lambdas[j], &col);
    }
    (t, lambdas, q)
}

fn noise(c: usize, eps: f64, seed: u64) -> (SymTensor3, f64) {
    let mut rng = rng::stream(seed, Purpose::Other(22), 0);
    let raw = SymTensor3::from_sorted_fn(c, |_, _, _| rng::gaussian(&mut rng));
    let e = raw.scaled(eps / tensor_op_norm(&raw, OP_NORM_RESTARTS));
    let measured = tensor_op_norm(&e, OP_NORM_RESTARTS);
    (e, measured)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn eigenvalues_scale_with_the_tensor(c in 1usize..5, k in 0.1f64..10.0, seed in any::<u64>()) {
        let (clean, _, _) = orthogonal_tensor(c, seed);
        let (e, _) = noise(c, 0.01, seed);
        let t = clean.add(&e).unwrap();
        let cfg = RtpConfig { seed, restarts: 20, ..RtpConfig::with_factors(c) };
        let base = rtp_decompose(&t, &cfg).unwrap();
        let scaled = rtp_decompose(&t.scaled(k), &cfg).unwrap();
        for (p, q) in base.iter().zip(&scaled) {
            prop_assert!((q.lambda - k * p.lambda).abs() <= 1e-9 * k * p.lambda.abs());
            prop_assert!((&q.phi - &p.phi).norm() <= 1e-9);
        }
    }

    #[test]
    fn output_is_bit_deterministic(c in 1usize..5, seed in any::<u64>()) {
        let (t, _, _) = orthogonal_tensor(c, seed);
        let cfg = RtpConfig { seed, restarts: 10, ..RtpConfig::with_factors(c) };
        let a = rtp_decompose(&t, &cfg).unwrap();
        let b = rtp_decompose(&t, &cfg).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert_eq!(p.lambda.to_bits(), q.lambda.to_bits());
            prop_assert!(p.phi.iter().zip(q.phi.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn perturbed_decomposition_stays_within_its_guarantee(c in 2usize..5, seed in any::<u64>()) {
        let (clean, lambdas, _) = orthogonal_tensor(c, seed);
        let lambda_min = lambdas.iter().copied().fold(f64::INFINITY, f64::min);
        let (e, eps) = noise(c, 0.01 * lambda_min / c as f64, seed);
        let t = clean.add(&e).unwrap();
        let pairs = rtp_decompose(&t, &RtpConfig { seed, ..RtpConfig::with_factors(c) }).unwrap();
        let mut residual = t.clone();
        for p in &pairs {
            let phi: Vec<f64> = p.phi.iter().copied().collect();
            residual.add_rank_one(-p.lambda, &phi);
            // Each recovered eigenvalue is within 5ε of some true one.
            let closest = lambdas.iter().map(|l| (l - p.lambda).abs()).fold(f64::INFINITY, f64::min);
            prop_assert!(closest <= 5.0 * eps, "eigenvalue off by {closest}, eps {eps}");
        }
        let r = tensor_op_norm(&residual, 5 * OP_NORM_RESTARTS);
        prop_assert!(r <= 55.0 * eps, "residual {r} vs eps {eps}");
    }
}

#[test]
fn exact_orthogonal_tensor_is_recovered() {
    for seed in 0..10 {
        let (t, lambdas, q) = orthogonal_tensor(3, seed);
        let pairs = rtp_decompose(&t, &RtpConfig { seed, ..RtpConfig::with_factors(3) }).unwrap();
        for p in &pairs {
            let j = (0..3)
                .min_by(|&a, &b| (lambdas[a] - p.lambda).abs().total_cmp(&(lambdas[b] - p.lambda).abs()))
                .unwrap();
            assert!((lambdas[j] - p.lambda).abs() < 1e-9);
            assert!((&p.phi - q.column(j)).norm() < 1e-6);
        }
    }
}

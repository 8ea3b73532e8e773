use lbl_core::linalg::{
    multilinear_map, sym_eig_topk, tensor_contract, tensor_op_norm, SymMatrix, SymTensor3, OP_NORM_RESTARTS,
};
use lbl_core::rng::{self, Purpose};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn random_sym(dim: usize, seed: u64) -> SymMatrix {
    let mut rng = rng::stream(seed, Purpose::Other(11), 0);
    SymMatrix::from_upper_fn(dim, |_, _| rng::gaussian(&mut rng))
}

fn random_tensor(dim: usize, seed: u64) -> SymTensor3 {
    let mut rng = rng::stream(seed, Purpose::Other(12), 0);
    SymTensor3::from_sorted_fn(dim, |_, _, _| rng::gaussian(&mut rng))
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng::stream(seed, Purpose::Other(13), 0);
    DMatrix::from_fn(rows, cols, |_, _| rng::gaussian(&mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn eigenpairs_reconstruct_the_matrix(dim in 1usize..9, seed in any::<u64>()) {
        let m = random_sym(dim, seed);
        let eig = sym_eig_topk(&m, dim).unwrap();
        let scale = m.as_matrix().norm().max(1.0);
        prop_assert!((eig.reconstruct() - m.as_matrix()).amax() <= 1e-7 * scale);
        let gram = eig.vectors.transpose() * &eig.vectors;
        prop_assert!((gram - DMatrix::identity(dim, dim)).amax() <= 1e-10);
        prop_assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn top_k_is_a_prefix_of_the_full_spectrum(dim in 2usize..9, seed in any::<u64>()) {
        let m = random_sym(dim, seed);
        let full = sym_eig_topk(&m, dim).unwrap();
        let k = 1 + (seed as usize) % dim;
        let top = sym_eig_topk(&m, k).unwrap();
        for (a, b) in top.values.iter().zip(&full.values) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        // Independent route: nalgebra's symmetric eigensolver.
        let mut reference: Vec<f64> = m.as_matrix().clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        reference.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in full.values.iter().zip(&reference) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn multilinear_maps_compose(a in 1usize..6, b in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let t = random_tensor(a, seed);
        let w1 = random_matrix(a, b, seed ^ 1);
        let w2 = random_matrix(b, c, seed ^ 2);
        let nested = multilinear_map(&multilinear_map(&t, &w1).unwrap(), &w2).unwrap();
        let direct = multilinear_map(&t, &(&w1 * &w2)).unwrap();
        let scale = direct.frobenius().max(1.0);
        prop_assert!(nested.max_abs_diff(&direct) <= 1e-10 * scale);
    }

    #[test]
    fn contraction_is_consistent(a in 1usize..7, seed in any::<u64>()) {
        let t = random_tensor(a, seed);
        let mut rng = rng::stream(seed, Purpose::Other(14), 0);
        let theta = DVector::from_fn(a, |_, _| rng::gaussian(&mut rng));
        let (v, s) = tensor_contract(&t, &theta).unwrap();
        prop_assert!((theta.dot(&v) - s).abs() <= 1e-10 * (1.0 + s.abs()));
    }

    #[test]
    fn op_norm_is_homogeneous(a in 1usize..6, c in -10.0f64..10.0, seed in any::<u64>()) {
        prop_assume!(c.abs() > 1e-3);
        let t = random_tensor(a, seed);
        let base = tensor_op_norm(&t, OP_NORM_RESTARTS);
        let scaled = tensor_op_norm(&t.scaled(c), OP_NORM_RESTARTS);
        prop_assert!((scaled - c.abs() * base).abs() <= 1e-8 * c.abs() * base.max(1.0));
    }

    #[test]
    fn op_norm_sits_between_rank_one_value_and_frobenius(a in 1usize..6, seed in any::<u64>()) {
        let t = random_tensor(a, seed);
        let norm = tensor_op_norm(&t, OP_NORM_RESTARTS);
        prop_assert!(norm <= t.frobenius() * (1.0 + 1e-12));
        for i in 0..a {
            prop_assert!(norm >= t.get(i, i, i).abs() - 1e-12);
        }
    }
}

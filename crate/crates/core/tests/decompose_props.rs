use nalgebra::DMatrix;
use proptest::prelude::*;
use slip_core::decompose::{parameter_density, spectral_profile, split, LayerType, SplitOptions, SplitPlan, Triplet};
use slip_core::linalg::{relative_frobenius, Matrix};
use slip_core::models::toy_transformer;

fn matrix(max_dim: usize) -> impl Strategy<Value = Matrix> {
    (2..=max_dim, 2..=max_dim).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1.0f64..1.0, r * c).prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

fn oracle_singular_values(w: &Matrix) -> Vec<f64> {
    let m = DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_parts_add_up(w in matrix(24), k_frac in 0.0f64..1.0) {
        let k = 2 + ((w.rows().min(w.cols()) - 2) as f64 * k_frac) as usize;
        let d = split(&w, k, SplitOptions::default()).unwrap();
        prop_assert!(relative_frobenius(&d.reconstruct(), &w) < 1e-10);
        prop_assert_eq!(d.k(), k);
    }

    #[test]
    fn residual_keeps_the_tail_of_the_spectrum(w in matrix(24), k_frac in 0.0f64..1.0) {
        let k = 2 + ((w.rows().min(w.cols()) - 2) as f64 * k_frac) as usize;
        let full = oracle_singular_values(&w);
        let d = split(&w, k, SplitOptions::default()).unwrap();
        let rest = oracle_singular_values(&d.david);
        for (i, s) in full[k..].iter().enumerate() {
            prop_assert!((rest[i] - s).abs() < 1e-8, "sigma_{} {} vs {}", k + i + 1, rest[i], s);
        }
        prop_assert!(rest[full.len() - k..].iter().all(|s| s.abs() < 1e-8));
        for (a, b) in d.charlie.sigma.iter().zip(&full) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn own_svd_matches_oracle_spectrum(w in matrix(32)) {
        let ours = spectral_profile(&w).unwrap();
        let theirs = oracle_singular_values(&w);
        prop_assert_eq!(ours.len(), theirs.len());
        for (a, b) in ours.iter().zip(&theirs) {
            prop_assert!((a - b).abs() < 1e-9 * theirs[0].max(1.0));
        }
    }

    #[test]
    fn residual_norm_shrinks_with_k(w in matrix(16)) {
        let r = w.rows().min(w.cols());
        let norms: Vec<f64> = (2..=r).map(|k| split(&w, k, SplitOptions::default()).unwrap().david.frobenius_norm()).collect();
        for pair in norms.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn split_is_deterministic(w in matrix(16)) {
        let k = 2;
        let a = split(&w, k, SplitOptions::default()).unwrap();
        let b = split(&w.clone(), k, SplitOptions::default()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn density_identity(blocks in 2u32..6, edge in 0u32..3, k in 2usize..8) {
        let model = toy_transformer(1, blocks as usize, 8, 16, 2);
        let plan = SplitPlan::edge_blocks(&model, edge, k);
        let r = parameter_density(&plan, &model).unwrap();
        prop_assert_eq!((r.eta * r.total_params as f64).round() as u64, r.charlie_params);
    }
}

#[test]
fn repeated_singular_values_keep_column_order() {
    let w = Matrix::diag(&[1.0, 2.0, 2.0, 1.0]);
    let s = slip_core::linalg::svd(&w).unwrap();
    assert_eq!(s.sigma, vec![2.0, 2.0, 1.0, 1.0]);
    assert_eq!(s.u.column(0), vec![0.0, 1.0, 0.0, 0.0]);
    assert_eq!(s.u.column(1), vec![0.0, 0.0, 1.0, 0.0]);
    assert_eq!(s.u.column(2), vec![1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn generic_plan_on_transformer_is_rejected_cleanly() {
    let model = toy_transformer(1, 2, 8, 16, 2);
    let plan = SplitPlan::new(vec![Triplet { block: 0, layer_type: LayerType::Generic, k: 2 }]).unwrap();
    assert!(slip_core::decompose::plan_decomposition(&model, &plan).is_err());
}

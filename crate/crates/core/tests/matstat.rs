use nalgebra::{DMatrix, SymmetricEigen};
use otcr::matstat::{orthonormalize_columns, pairwise_sq_dist, svd_thin, Matrix, SeededRng};
use proptest::prelude::*;

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn naive_sq_dist(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        let mut s = 0.0;
        for c in 0..a.cols() {
            let d = a[(i, c)] - b[(j, c)];
            s += d * d;
        }
        s
    })
}

#[test]
fn sq_dist_examples() {
    let a = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
    let b = Matrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
    let d = pairwise_sq_dist(&a, &b).unwrap();
    assert_eq!(d, Matrix::from_rows(&[vec![0.0, 4.0], vec![1.0, 1.0]]).unwrap());
    let p = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
    assert_eq!(pairwise_sq_dist(&p, &p).unwrap()[(0, 0)], 0.0);
    assert!(pairwise_sq_dist(&a, &p).is_err());
}

#[test]
fn sq_dist_matches_double_loop() {
    let mut rng = SeededRng::new(11);
    let a = rng.normal_matrix(3, 2);
    let b = rng.normal_matrix(4, 2);
    let d = pairwise_sq_dist(&a, &b).unwrap();
    assert!(d.max_abs_diff(&naive_sq_dist(&a, &b)) < 1e-12);
}

#[test]
fn svd_examples() {
    let a = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let s = svd_thin(&a).unwrap().s;
    assert!((s[0] - 3.0).abs() < 1e-14 && (s[1] - 1.0).abs() < 1e-14);
    let z = svd_thin(&Matrix::zeros(4, 3)).unwrap();
    assert!(z.s.iter().all(|&x| x == 0.0));
    let mut bad = Matrix::zeros(2, 2);
    bad[(0, 1)] = f64::NAN;
    assert!(svd_thin(&bad).is_err());
}

#[test]
fn singular_values_match_gram_eigenvalues() {
    let mut rng = SeededRng::new(12);
    let a = rng.normal_matrix(10, 4);
    let s = svd_thin(&a).unwrap().s;
    let gram = to_na(&a).transpose() * to_na(&a);
    let mut ev: Vec<f64> = SymmetricEigen::new(gram).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    for (sv, e) in s.iter().zip(&ev) {
        assert!((sv * sv - e).abs() < 1e-8 * (1.0 + e));
    }
}

#[test]
fn svd_contract_on_random_matrices() {
    let mut rng = SeededRng::new(13);
    for case in 0..100 {
        let n = 1 + rng.below(12);
        let d = 1 + rng.below(12);
        let mut a = rng.normal_matrix(n, d);
        if case % 5 == 0 && n > 1 {
            // Duplicate a row to force rank deficiency.
            let first = a.row(0).to_vec();
            a.row_mut(n - 1).copy_from_slice(&first);
        }
        let svd = svd_thin(&a).unwrap();
        let r = n.min(d);
        assert_eq!(svd.s.len(), r);
        assert_eq!(svd.u.shape(), (n, r));
        assert_eq!(svd.v.shape(), (d, r));
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(svd.s.iter().all(|&x| x >= 0.0));
        let err = svd.reconstruct().max_abs_diff(&a);
        assert!(err <= 1e-8 * a.frobenius_norm(), "case {case}: {err}");
        let utu = svd.u.t_matmul(&svd.u).unwrap();
        let vtv = svd.v.t_matmul(&svd.v).unwrap();
        assert!(utu.max_abs_diff(&Matrix::identity(r)) < 1e-10, "case {case}");
        assert!(vtv.max_abs_diff(&Matrix::identity(r)) < 1e-10, "case {case}");

        let gram = to_na(&a).transpose() * to_na(&a);
        let mut ev: Vec<f64> = SymmetricEigen::new(gram).eigenvalues.iter().copied().collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        let scale = 1.0 + ev[0];
        for (sv, e) in svd.s.iter().zip(&ev) {
            assert!((sv * sv - e).abs() < 1e-8 * scale, "case {case}");
        }
    }
}

#[test]
fn rng_streams_are_reproducible() {
    let mut a = SeededRng::new(42);
    let mut b = SeededRng::new(42);
    let xs: Vec<f64> = (0..16).map(|_| a.normal()).collect();
    let ys: Vec<f64> = (0..16).map(|_| b.normal()).collect();
    assert_eq!(xs, ys);
    let mut c = SeededRng::derive(42, 1);
    let zs: Vec<f64> = (0..16).map(|_| c.normal()).collect();
    assert_ne!(xs, zs);
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn self_distance_is_symmetric_with_zero_diagonal(a in (1usize..8, 1usize..5).prop_flat_map(|(n, d)| matrix(n, d))) {
        let d = pairwise_sq_dist(&a, &a).unwrap();
        for i in 0..a.rows() {
            prop_assert!(d[(i, i)].abs() < 1e-12);
            for j in 0..a.rows() {
                prop_assert!((d[(i, j)] - d[(j, i)]).abs() < 1e-12);
                prop_assert!(d[(i, j)] >= 0.0);
            }
        }
    }

    #[test]
    fn distances_invariant_under_rotation(
        (a, b, q) in (1usize..5).prop_flat_map(|d| (matrix(4, d), matrix(3, d), matrix(d, d)))
    ) {
        let u = orthonormalize_columns(&q);
        prop_assume!(u.t_matmul(&u).unwrap().max_abs_diff(&Matrix::identity(u.cols())) < 1e-10);
        let base = pairwise_sq_dist(&a, &b).unwrap();
        let rot = pairwise_sq_dist(&a.matmul(&u).unwrap(), &b.matmul(&u).unwrap()).unwrap();
        prop_assert!(base.max_abs_diff(&rot) < 1e-8);
    }
}

use mixtd_core::rng::stream;
use mixtd_core::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn random(shape: &[usize], seed: u64) -> DenseTensor {
    DenseTensor::random_uniform(shape, -1.0, 1.0, &mut stream(&[seed])).unwrap()
}

fn to_na(a: &DenseTensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
}

fn rel(a: &DenseTensor, b: &DenseTensor) -> f64 {
    a.distance(b).unwrap() / b.frobenius_norm().max(f64::MIN_POSITIVE)
}

#[test]
fn contraction_matches_loop_nest() {
    let a = random(&[3, 4, 5], 1);
    let b = random(&[5, 2], 2);
    let c = contract(&a, &b, &[2], &[0]).unwrap();
    assert_eq!(c.shape(), &[3, 4, 2]);
    for i in 0..3 {
        for j in 0..4 {
            for l in 0..2 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.get(&[i, j, k]) * b.get(&[k, l]);
                }
                assert!((c.get(&[i, j, l]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn singular_values_match_gram_eigenvalues() {
    let a = random(&[8, 5], 3);
    let svd = truncated_svd(&a, 5).unwrap();
    let gram = to_na(&a).transpose() * to_na(&a);
    let mut eig: Vec<f64> = gram
        .symmetric_eigenvalues()
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    for (s, e) in svd.s.iter().zip(&eig) {
        assert!((s - e).abs() < 1e-10, "{s} vs {e}");
    }
    assert!(a.distance(&svd.reconstruct()).unwrap() <= 1e-10);
}

#[test]
fn least_squares_matches_normal_equations() {
    let a = random(&[6, 3], 4);
    let b = random(&[6, 1], 5);
    let x = solve_least_squares(&a, &b).unwrap();
    let (na, nb) = (to_na(&a), to_na(&b));
    let oracle = (na.transpose() * &na).try_inverse().unwrap() * na.transpose() * nb;
    for i in 0..3 {
        assert!((x.get(&[i, 0]) - oracle[(i, 0)]).abs() < 1e-9);
    }
}

#[test]
fn cp_unfolding_identity() {
    let (i, j, k, r) = (4, 3, 5, 3);
    let a1 = random(&[i, r], 6);
    let a2 = random(&[j, r], 7);
    let a3 = random(&[k, r], 8);
    let x = DenseTensor::from_fn(&[i, j, k], |ix| {
        (0..r)
            .map(|q| a1.get(&[ix[0], q]) * a2.get(&[ix[1], q]) * a3.get(&[ix[2], q]))
            .sum()
    })
    .unwrap();
    // Mode-1 unfolding with the last index varying slowest across columns.
    let unfold =
        DenseTensor::from_fn(&[i, j * k], |ix| x.get(&[ix[0], ix[1] % j, ix[1] / j])).unwrap();
    let kr = khatri_rao(&[&a3, &a2]).unwrap();
    let rhs = a1.matmul(&kr.transpose().unwrap()).unwrap();
    assert!(unfold.distance(&rhs).unwrap() < 1e-12);
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..5, 1usize..5, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frobenius_is_permutation_and_reshape_invariant((p, q, r) in dims(), seed in any::<u64>()) {
        let t = random(&[p, q, r], seed);
        let n = t.frobenius_norm();
        for axes in [[0, 1, 2], [2, 0, 1], [1, 2, 0], [2, 1, 0]] {
            prop_assert!((t.permute(&axes).unwrap().frobenius_norm() - n).abs() <= 1e-12 * n.max(1.0));
        }
        prop_assert!((t.reshape(&[p * q, r]).unwrap().frobenius_norm() - n).abs() <= 1e-12 * n.max(1.0));
    }

    #[test]
    fn full_rank_svd_reconstructs(m in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let a = random(&[m, n], seed);
        let svd = truncated_svd(&a, m.min(n)).unwrap();
        prop_assert!(rel(&svd.reconstruct(), &a) <= 1e-8);
    }

    #[test]
    fn truncation_error_is_monotone(m in 2usize..9, n in 2usize..9, seed in any::<u64>()) {
        let a = random(&[m, n], seed);
        let errs: Vec<f64> = (1..=m.min(n))
            .map(|r| a.distance(&truncated_svd(&a, r).unwrap().reconstruct()).unwrap())
            .collect();
        for w in errs.windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-10);
        }
    }

    #[test]
    fn contract_is_bilinear((p, q, r) in dims(), alpha in -3.0f64..3.0, seed in any::<u64>()) {
        let a = random(&[p, q], seed);
        let b = random(&[q, r], seed ^ 1);
        let lhs = contract(&a.scale(alpha), &b, &[1], &[0]).unwrap();
        let rhs = contract(&a, &b, &[1], &[0]).unwrap().scale(alpha);
        prop_assert!(lhs.distance(&rhs).unwrap() <= 1e-12 * (1.0 + rhs.frobenius_norm()));
        let lhs = contract(&a, &b.scale(alpha), &[1], &[0]).unwrap();
        prop_assert!(lhs.distance(&rhs).unwrap() <= 1e-12 * (1.0 + rhs.frobenius_norm()));
    }
}

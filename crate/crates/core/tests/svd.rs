use kgrec::svd::{
    cache_path, init_embeddings, interaction_matrix, load_factors, normalized_filter, save_factors,
    spectral_filter, truncated_svd, SvdFactors, SvdInitParams,
};
use kgrec::{Csr, InteractionDataset, Matrix};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sparse(m: usize, n: usize, density: f64, seed: u64) -> Csr<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trip = Vec::new();
    for i in 0..m {
        for j in 0..n {
            if rng.random::<f64>() < density {
                trip.push((i, j, 1.0));
            }
        }
    }
    Csr::from_triplets(m, n, &trip).unwrap()
}

fn to_dense(r: &Csr<f64>) -> DMatrix<f64> {
    let d = r.to_dense();
    DMatrix::from_fn(d.rows(), d.cols(), |i, j| d[(i, j)])
}

fn max_gram_error(m: &Matrix<f64>) -> f64 {
    let g = m.transpose().matmul(m).unwrap();
    let mut worst = 0.0f64;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

#[test]
fn singular_values_and_residual_match_dense_oracle() {
    for seed in 0..5 {
        let r = random_sparse(50, 40, 0.15, seed);
        let k = 8;
        let f = truncated_svd(&r, k, seed).unwrap();
        let dense = to_dense(&r);
        let mut exact: Vec<f64> = dense.clone().svd(false, false).singular_values.iter().copied().collect();
        exact.sort_by(|a, b| b.partial_cmp(a).unwrap());

        let norm = dense.norm();
        let opt = exact[k..].iter().map(|s| s * s).sum::<f64>().sqrt() / norm;
        let rec = f.reconstruct();
        let approx = DMatrix::from_fn(rec.rows(), rec.cols(), |i, j| rec[(i, j)]);
        let got = (&dense - approx).norm() / norm;
        assert!(got <= 1.05 * opt, "seed {seed}: residual {got} vs optimum {opt}");

        assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
        for (a, b) in f.sigma.iter().zip(&exact) {
            assert!((a - b).abs() <= 1e-2 * b, "seed {seed}: {a} vs {b}");
        }
        assert!(max_gram_error(&f.u) < 1e-6);
        assert!(max_gram_error(&f.v) < 1e-6);
    }
}

#[test]
fn factors_are_deterministic_under_seed() {
    let r = random_sparse(30, 20, 0.2, 9);
    assert_eq!(truncated_svd(&r, 5, 4).unwrap(), truncated_svd(&r, 5, 4).unwrap());
}

#[test]
fn interaction_matrix_is_binary_train_matrix() {
    let ds = InteractionDataset::new(3, 4, vec![(0, 1), (2, 3), (1, 0), (2, 1)]).unwrap();
    let r = interaction_matrix::<f64>(&ds).to_dense();
    for u in 0..3 {
        for i in 0..4 {
            let expected = ds.train().contains(&(u as u32, i as u32)) as u8 as f64;
            assert_eq!(r[(u, i)], expected);
        }
    }
}

fn dense_init(f: &SvdFactors<f64>, p: &SvdInitParams<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let top = f.sigma.iter().copied().fold(0.0, f64::max);
    let filt = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        f.rank(),
        f.sigma.iter().map(|s| (p.beta * s / top).exp()),
    ));
    let fs = DMatrix::from_fn(p.f_s.rows(), p.f_s.cols(), |i, j| p.f_s[(i, j)]);
    let u = DMatrix::from_fn(f.u.rows(), f.u.cols(), |i, j| f.u[(i, j)]);
    let v = DMatrix::from_fn(f.v.rows(), f.v.cols(), |i, j| f.v[(i, j)]);
    (&u * &filt * &fs, &v * &filt * &fs)
}

proptest! {
    #[test]
    fn init_embeddings_match_dense_evaluation(seed in 0u64..500, beta in 0.0f64..3.0) {
        let r = random_sparse(12, 9, 0.3, seed);
        prop_assume!(r.nnz() > 0);
        let f = truncated_svd(&r, 4, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = SvdInitParams::init(4, 6, beta, &mut rng);
        let (hu, hi) = init_embeddings(&f, &p).unwrap();
        let (du, di) = dense_init(&f, &p);
        for (got, want) in [(&hu, &du), (&hi, &di)] {
            prop_assert_eq!((got.rows(), got.cols()), want.shape());
            for i in 0..got.rows() {
                for j in 0..got.cols() {
                    prop_assert!((got[(i, j)] - want[(i, j)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn filter_is_monotone_for_nonnegative_beta(
        mut sigma in prop::collection::vec(0.0f64..1.0, 1..10),
        beta in 0.0f64..20.0,
    ) {
        sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let f = spectral_filter(&sigma, beta).unwrap();
        prop_assert!(f.windows(2).all(|w| w[0] >= w[1]));
        let g = normalized_filter(&sigma, beta).unwrap();
        prop_assert!(g.iter().all(|x| x.is_finite() && *x >= 1.0));
    }
}

#[test]
fn neutral_filter_with_identity_projection_returns_u() {
    let r = random_sparse(10, 8, 0.3, 2);
    let f = truncated_svd(&r, 3, 0).unwrap();
    let p = SvdInitParams {
        f_s: Matrix::identity(3),
        beta: 0.0,
    };
    let (hu, hi) = init_embeddings(&f, &p).unwrap();
    assert_eq!(hu, f.u);
    assert_eq!(hi, f.v);
}

#[test]
fn overflow_guard_rejects_large_exponents() {
    assert!(spectral_filter(&[2.0, 1.0], 20.0).is_err());
    assert!(normalized_filter(&[200.0, 100.0], 30.0).is_ok());
}

#[test]
fn cache_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let r = random_sparse(15, 12, 0.25, 5);
    let f = truncated_svd(&r, 4, 1).unwrap();
    let path = cache_path(dir.path(), 0xabc, 4, 1);
    save_factors(&path, &f).unwrap();
    assert_eq!(load_factors::<f64>(&path).unwrap(), f);
    std::fs::write(&path, b"junk").unwrap();
    assert!(load_factors::<f64>(&path).is_err());
}

use num_complex::Complex64;
use phylink::detection::{kbest_detect, lmmse_equalize, ml_detect, zf_equalize};
use phylink::linalg::CMatrix;
use phylink::modulation::QamConstellation;
use phylink::rng::{complex_gaussian, derive_seed, rng_from_seed};
use rand::Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> CMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    CMatrix::from_fn(rows, cols, |_, _| complex_gaussian(&mut rng, 1.0))
}

fn random_vec(n: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| complex_gaussian(&mut rng, 1.0)).collect()
}

#[test]
fn lmmse_trivial_cases() {
    let y = random_vec(4, 1);
    let out = lmmse_equalize(&CMatrix::identity(4), &y, 0.0).unwrap();
    for (a, b) in out.x_hat.iter().zip(&y) {
        assert!((a - b).norm() < 1e-14);
    }
    let out = lmmse_equalize(&CMatrix::from_diag(&[2.0; 4]), &y, 0.0).unwrap();
    for (a, b) in out.x_hat.iter().zip(&y) {
        assert!((a - b / 2.0).norm() < 1e-14);
    }
}

#[test]
fn lmmse_matches_literal_formula() {
    for seed in 0..20 {
        let h = random_matrix(4, 4, seed);
        let y = random_vec(4, seed + 100);
        let s2 = 0.5;
        // x = H^H (H H^H + s2 I)^-1 y ; E = I - H^H (H H^H + s2 I)^-1 H
        let a = h.matmul(&h.adjoint()).unwrap().add_diag(s2);
        let w = a.solve(&CMatrix::column_vector(&y)).unwrap();
        let x = h.adjoint().matmul(&w).unwrap();
        let e = CMatrix::identity(4).sub(&h.adjoint().matmul(&a.solve(&h).unwrap()).unwrap());
        let out = lmmse_equalize(&h, &y, s2).unwrap();
        for i in 0..4 {
            assert!((out.x_hat[i] - x[(i, 0)]).norm() < 1e-10);
            let sinr = 1.0 / e[(i, i)].re - 1.0;
            assert!((out.post_sinr[i] - sinr).abs() < 1e-10 * sinr.max(1.0));
        }
    }
}

#[test]
fn lmmse_sinr_is_non_increasing_in_noise() {
    for seed in 0..10 {
        let h = random_matrix(4, 2, seed);
        let y = random_vec(4, seed);
        let mut prev = vec![f64::INFINITY; 2];
        for s2 in [1e-3, 1e-2, 0.1, 0.5, 1.0, 3.0, 10.0] {
            let out = lmmse_equalize(&h, &y, s2).unwrap();
            for i in 0..2 {
                assert!(out.post_sinr[i] <= prev[i] + 1e-12);
                assert!(out.post_sinr[i] >= 0.0);
            }
            prev = out.post_sinr;
        }
    }
}

#[test]
fn zf_inverts_noiseless_channels_and_agrees_with_noiseless_lmmse() {
    for seed in 0..20 {
        let h = random_matrix(4, 3, seed);
        let x = random_vec(3, seed + 7);
        let y = h.mul_vec(&x);
        let zf = zf_equalize(&h, &y, 0.1).unwrap();
        let lm = lmmse_equalize(&h, &y, 0.0).unwrap();
        for i in 0..3 {
            assert!((zf.x_hat[i] - x[i]).norm() < 1e-10);
            assert!((zf.x_hat[i] - lm.x_hat[i]).norm() < 1e-10);
        }
    }
    assert!(zf_equalize(&random_matrix(2, 3, 1), &random_vec(2, 1), 0.1).is_err());
}

#[test]
fn kbest_single_layer_is_slicing() {
    let c = QamConstellation::<f64>::new(4).unwrap();
    for seed in 0..50 {
        let h = random_matrix(2, 1, seed);
        let y = random_vec(2, seed + 1);
        // nearest point to the matched-filter estimate
        let hn = h.column(0).iter().map(|z| z.norm_sqr()).sum::<f64>();
        let mf = h.adjoint().mul_vec(&y)[0] / hn;
        for k in [1, 3, 16] {
            assert_eq!(kbest_detect(&h, &y, &c, k, 0.1).unwrap().labels[0], c.slice(mf));
        }
    }
}

#[test]
fn exhaustive_kbest_is_ml() {
    let c = QamConstellation::<f64>::new(2).unwrap();
    for trial in 0..1000u64 {
        let h = random_matrix(2, 2, derive_seed(5, 1, trial));
        let mut rng = rng_from_seed(derive_seed(5, 2, trial));
        let x: Vec<Complex64> = (0..2).map(|_| c.points()[rng.random_range(0..4)]).collect();
        let n = random_vec(2, derive_seed(5, 3, trial));
        let y: Vec<Complex64> = h.mul_vec(&x).iter().zip(&n).map(|(a, b)| a + b * 0.5).collect();
        let kb = kbest_detect(&h, &y, &c, 16, 0.25).unwrap();
        let (ml, d) = ml_detect(&h, &y, &c).unwrap();
        assert_eq!(kb.labels, ml, "trial {trial}");
        assert!((kb.metric - d).abs() < 1e-9);
    }
}

#[test]
fn greedy_list_is_no_better_than_full_list() {
    let c = QamConstellation::<f64>::new(4).unwrap();
    let (mut err1, mut err16) = (0, 0);
    for trial in 0..500u64 {
        let h = random_matrix(2, 2, derive_seed(6, 1, trial));
        let mut rng = rng_from_seed(derive_seed(6, 2, trial));
        let lab: Vec<usize> = (0..2).map(|_| rng.random_range(0..16)).collect();
        let x: Vec<Complex64> = lab.iter().map(|&l| c.points()[l]).collect();
        let n = random_vec(2, derive_seed(6, 3, trial));
        let y: Vec<Complex64> = h.mul_vec(&x).iter().zip(&n).map(|(a, b)| a + b * 0.3).collect();
        let mut prev = f64::INFINITY;
        for k in [1, 2, 4, 8, 16, 64, 256] {
            let out = kbest_detect(&h, &y, &c, k, 0.09).unwrap();
            assert!(out.metric <= prev + 1e-12, "trial {trial} k {k}");
            prev = out.metric;
            if k == 1 && out.labels != lab {
                err1 += 1;
            }
            if k == 16 && out.labels != lab {
                err16 += 1;
            }
        }
    }
    assert!(err1 >= err16, "{err1} {err16}");
}

#[test]
fn kbest_llr_signs_and_clipping() {
    let c = QamConstellation::<f64>::new(2).unwrap();
    let h = CMatrix::identity(2);
    let x = c.modulate(&[0, 1, 1, 0]).unwrap();
    let out = kbest_detect(&h, &x, &c, 1, 0.1).unwrap();
    assert_eq!(out.llrs, vec![15.0, -15.0, -15.0, 15.0]);
    let out = kbest_detect(&h, &x, &c, 16, 0.1).unwrap();
    for (l, b) in out.llrs.iter().zip([0, 1, 1, 0]) {
        assert_eq!(*l > 0.0, b == 0);
    }
}

#[test]
fn wide_system_uses_regularized_search() {
    let c = QamConstellation::<f64>::new(2).unwrap();
    let h = random_matrix(1, 2, 3);
    let y = random_vec(1, 4);
    let out = kbest_detect(&h, &y, &c, 16, 0.2).unwrap();
    assert_eq!(out.labels.len(), 2);
    assert_eq!(out.llrs.len(), 4);
}

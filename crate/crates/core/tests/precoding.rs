use num_complex::Complex64;
use phylink::channel::{ChannelRealization, Numerology, ResourceGrid};
use phylink::csi::{extract_csi_with_eigenvalues, CsiMatrix};
use phylink::detection::lmmse_equalize;
use phylink::linalg::CMatrix;
use phylink::precoding::{apply_precoding, eigen_precoder, normalize_power, Precoder};
use phylink::rng::{complex_gaussian, rng_from_seed};

fn gaussian(rows: usize, cols: usize, seed: u64) -> CMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    CMatrix::from_fn(rows, cols, |_, _| complex_gaussian(&mut rng, 1.0))
}

fn num(n_tx: usize, n_sc: usize, n_sb: usize) -> Numerology {
    Numerology { n_subcarriers: n_sc, n_symbols: 2, n_tx, n_rx: 2, n_subbands: n_sb, subcarrier_spacing_hz: 30e3 }
}

#[test]
fn eigen_precoder_columns_are_orthonormal_eigenvectors() {
    let nm = num(6, 8, 2);
    let h = ChannelRealization::constant(nm, gaussian(2, 6, 1), 0.0).unwrap();
    let (w, _) = extract_csi_with_eigenvalues(&h, 2).unwrap();
    let p = eigen_precoder(&w);
    for (k, m) in p.per_subband.iter().enumerate() {
        assert_eq!(m.column(0), w.eigenvector(k, 0));
        let g = m.adjoint().matmul(m).unwrap();
        assert!(g.sub(&CMatrix::identity(2)).max_abs() < 1e-9);
    }
}

#[test]
fn rank_one_beamforming_beats_random_directions() {
    let u = gaussian(2, 1, 2).column(0);
    let g = gaussian(4, 1, 3).column(0);
    let hm = CMatrix::from_fn(2, 4, |r, c| u[r] * g[c].conj());
    let h = ChannelRealization::constant(num(4, 4, 1), hm.clone(), 0.0).unwrap();
    let (w, _) = extract_csi_with_eigenvalues(&h, 1).unwrap();
    let p = eigen_precoder(&w).per_subband[0].column(0);
    let gain = |v: &[Complex64]| hm.mul_vec(v).iter().map(|z| z.norm_sqr()).sum::<f64>();
    let best = gain(&p);
    for seed in 0..100 {
        let mut v = gaussian(4, 1, 100 + seed).column(0);
        let n = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        v.iter_mut().for_each(|z| *z /= n);
        assert!(best >= gain(&v) - 1e-12);
    }
}

#[test]
fn identity_precoder_passes_symbols_through() {
    let nm = num(2, 4, 1);
    let p = Precoder::new(vec![CMatrix::identity(2)]).unwrap();
    let s: Vec<Complex64> = (0..nm.n_res() * 2).map(|i| Complex64::new(i as f64, 1.0)).collect();
    assert_eq!(apply_precoding(&p, &s, &nm).unwrap().as_slice(), &s[..]);
}

#[test]
fn subbands_route_to_their_own_precoder() {
    let nm = num(3, 6, 2);
    let p = Precoder::new(vec![
        CMatrix::from_fn(3, 1, |r, _| Complex64::new((r == 0) as u8 as f64, 0.0)),
        CMatrix::from_fn(3, 1, |r, _| Complex64::new((r == 2) as u8 as f64, 0.0)),
    ])
    .unwrap();
    let s = vec![Complex64::new(1.0, 0.0); nm.n_res()];
    let x = apply_precoding(&p, &s, &nm).unwrap();
    for f in 0..6 {
        let port = if nm.subband_of(f) == 0 { 0 } else { 2 };
        for t in 0..2 {
            for q in 0..3 {
                assert_eq!(x.get(q, f, t).re, (q == port) as u8 as f64, "f {f} port {q}");
            }
        }
    }
}

#[test]
fn precoding_matches_naive_product() {
    let nm = num(4, 6, 3);
    let p = Precoder::new((0..3).map(|k| gaussian(4, 2, 10 + k)).collect()).unwrap();
    let s = gaussian(nm.n_res() * 2, 1, 5).column(0);
    let x = apply_precoding(&p, &s, &nm).unwrap();
    for f in 0..nm.n_subcarriers {
        for t in 0..nm.n_symbols {
            let re = f * nm.n_symbols + t;
            let pk = &p.per_subband[f / 2];
            for q in 0..4 {
                let want = pk[(q, 0)] * s[2 * re] + pk[(q, 1)] * s[2 * re + 1];
                assert!((x.get(q, f, t) - want).norm() < 1e-12);
            }
        }
    }
}

#[test]
fn power_normalization_examples() {
    let g = ResourceGrid::from_vec(1, 4, 2, vec![Complex64::new(0.0, 2.0); 8]).unwrap();
    let n = normalize_power(&g).unwrap();
    assert!(n.as_slice().iter().all(|z| (z.norm() - 1.0).abs() < 1e-15));

    let data = gaussian(3 * 12, 1, 9).column(0);
    let g = ResourceGrid::from_vec(3, 6, 2, data).unwrap();
    let n = normalize_power(&g).unwrap();
    assert!((n.mean_re_power() - 1.0).abs() < 1e-12);
    let again = normalize_power(&n).unwrap();
    for (a, b) in again.as_slice().iter().zip(n.as_slice()) {
        assert!((a - b).norm() < 1e-12);
    }
    let mut scaled = g.clone();
    scaled.as_mut_slice().iter_mut().for_each(|z| *z *= 7.5);
    for (a, b) in normalize_power(&scaled).unwrap().as_slice().iter().zip(n.as_slice()) {
        assert!((a - b).norm() < 1e-12);
    }
    assert!(normalize_power(&ResourceGrid::zeros(2, 2, 2)).is_err());
}

#[test]
fn post_sinr_follows_eigenvalue_order() {
    // H = U diag(s) V^H with separated singular values
    let (u, _) = gaussian(3, 3, 1).qr().unwrap();
    let (v, _) = gaussian(4, 3, 2).qr().unwrap();
    let s = [3.0, 1.5, 0.5];
    let hm = u.matmul(&CMatrix::from_diag(&s)).unwrap().matmul(&v.adjoint()).unwrap();
    let nm = Numerology { n_subcarriers: 4, n_symbols: 1, n_tx: 4, n_rx: 3, n_subbands: 1, subcarrier_spacing_hz: 30e3 };
    let h = ChannelRealization::constant(nm, hm.clone(), 0.0).unwrap();
    let (w, vals): (CsiMatrix, _) = extract_csi_with_eigenvalues(&h, 3).unwrap();
    assert!(vals[0].windows(2).all(|p| p[0] > p[1]));
    let heq = hm.matmul(&eigen_precoder(&w).per_subband[0]).unwrap();
    let out = lmmse_equalize(&heq, &[Complex64::new(0.0, 0.0); 3], 0.1).unwrap();
    assert!(out.post_sinr.windows(2).all(|p| p[0] > p[1]), "{:?}", out.post_sinr);
}

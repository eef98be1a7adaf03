use phylink::ldpc::{LdpcCode, DEFAULT_MAX_ITER, STANDARD_SEED};
use phylink::rng::{derived_rng, random_bits, rng_from_seed};
use rand::Rng;
use rand_distr::StandardNormal;

const BUNDLED: [(usize, usize, &str); 5] = [
    (384, 192, "n384_k192"),
    (576, 192, "n576_k192"),
    (768, 192, "n768_k192"),
    (672, 336, "n672_k336"),
    (1344, 672, "n1344_k672"),
];

/// Writes the bundled parity matrices. Run with `--ignored` after changing
/// the construction.
#[test]
#[ignore]
fn regenerate_bundled_alist() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/ldpc");
    for (n, k, name) in BUNDLED {
        let code = LdpcCode::generate(n, k, STANDARD_SEED).unwrap();
        std::fs::write(dir.join(format!("{name}.alist")), code.to_alist()).unwrap();
    }
}

#[test]
fn bundled_matrices_match_the_construction() {
    for (n, k, _) in BUNDLED {
        let bundled = LdpcCode::standard(n, k).unwrap();
        assert_eq!(*bundled, LdpcCode::generate(n, k, STANDARD_SEED).unwrap(), "({n},{k})");
        assert_eq!(bundled.k(), k);
    }
}

#[test]
fn alist_round_trip() {
    let code = LdpcCode::generate(96, 48, 5).unwrap();
    assert_eq!(LdpcCode::from_alist(&code.to_alist()).unwrap(), code);
}

#[test]
fn encode_properties() {
    let code = LdpcCode::standard(384, 192).unwrap();
    assert_eq!(code.encode(&vec![0; 192]).unwrap(), vec![0; 384]);
    assert!(code.encode(&[0; 10]).is_err());
    let mut rng = rng_from_seed(1);
    for _ in 0..100 {
        let a = random_bits(&mut rng, 192);
        let b = random_bits(&mut rng, 192);
        let ca = code.encode(&a).unwrap();
        let cb = code.encode(&b).unwrap();
        assert!(code.syndrome_is_zero(&ca));
        let ab: Vec<u8> = a.iter().zip(&b).map(|(x, y)| x ^ y).collect();
        let cab: Vec<u8> = ca.iter().zip(&cb).map(|(x, y)| x ^ y).collect();
        assert_eq!(code.encode(&ab).unwrap(), cab);
    }
}

fn to_llr(cw: &[u8], mag: f64) -> Vec<f64> {
    cw.iter().map(|&b| if b == 0 { mag } else { -mag }).collect()
}

#[test]
fn noiseless_decoding_converges_in_one_iteration() {
    let code = LdpcCode::standard(1344, 672).unwrap();
    let mut rng = rng_from_seed(2);
    for _ in 0..20 {
        let info = random_bits(&mut rng, 672);
        let r = code.decode(&to_llr(&code.encode(&info).unwrap(), 30.0), DEFAULT_MAX_ITER).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert_eq!(r.info, info);
    }
}

#[test]
fn single_flipped_bit_is_corrected() {
    let code = LdpcCode::standard(672, 336).unwrap();
    let mut rng = rng_from_seed(3);
    let info = random_bits(&mut rng, 336);
    let cw = code.encode(&info).unwrap();
    for pos in [0, 100, 671] {
        let mut llr = to_llr(&cw, 10.0);
        llr[pos] = -llr[pos] * 0.5;
        let r = code.decode(&llr, DEFAULT_MAX_ITER).unwrap();
        assert!(r.converged);
        assert_eq!(r.codeword, cw);
    }
}

#[test]
fn all_zero_llrs_do_not_converge() {
    let code = LdpcCode::standard(384, 192).unwrap();
    let r = code.decode(&[0.0; 384], DEFAULT_MAX_ITER).unwrap();
    assert!(!r.converged);
    assert!(code.decode(&[0.0; 10], 5).is_err());
}

/// BLER of the rate-1/2, n = 1344 code with Gray QPSK (equivalently BPSK per
/// dimension) on AWGN.
fn awgn_bler(ebn0_db: f64, trials: u64) -> f64 {
    let code = LdpcCode::standard(1344, 672).unwrap();
    let rate = 0.5;
    // BPSK per real dimension: Es = 1, N0/2 = 1/(2 R Eb/N0)
    let sigma = (1.0 / (2.0 * rate * 10f64.powf(ebn0_db / 10.0))).sqrt();
    let mut errors = 0;
    for t in 0..trials {
        let mut rng = derived_rng(44, 5, t);
        let info = random_bits(&mut rng, 672);
        let cw = code.encode(&info).unwrap();
        let llr: Vec<f64> = cw
            .iter()
            .map(|&b| {
                let s = if b == 0 { 1.0 } else { -1.0 };
                let n: f64 = rng.sample(StandardNormal);
                2.0 * (s + sigma * n) / (sigma * sigma)
            })
            .collect();
        if code.decode(&llr, DEFAULT_MAX_ITER).unwrap().info != info {
            errors += 1;
        }
    }
    errors as f64 / trials as f64
}

#[test]
fn waterfall_envelope() {
    assert!(awgn_bler(3.0, 1000) < 1e-2);
    assert!(awgn_bler(-2.0, 1000) > 0.9);
}

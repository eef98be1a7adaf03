use num_complex::Complex64;
use phylink::capacity::{
    bce_capacity_consistency, bicm_capacity_mc, empirical_min_distance, llr_ratio, qam_cube_power, shaping_gain_ratio,
    sphere_min_distance, sphere_power, ConstellationSet, SHAPING_GAIN_LIMIT,
};
use phylink::modulation::QamConstellation;
use phylink::rng::{complex_gaussian, rng_from_seed};

mod common;
use common::{qpsk_quadrature, sigma2_for};

fn qam(bits: usize, layers: usize) -> ConstellationSet<f64> {
    ConstellationSet::from_qam(&QamConstellation::new(bits).unwrap(), layers).unwrap()
}

#[test]
fn qpsk_capacity_matches_quadrature() {
    let cs = qam(2, 1);
    for db in [0.0, 5.0, 10.0] {
        let s2 = sigma2_for(db);
        let mc = bicm_capacity_mc(&cs, s2, 100_000, 1).unwrap();
        let oracle = qpsk_quadrature(s2);
        assert!((mc.capacity - oracle).abs() < 0.02, "{db} dB: {} vs {oracle}", mc.capacity);
    }
}

#[test]
fn capacity_limits() {
    let cs = qam(2, 1);
    assert!(bicm_capacity_mc(&cs, 1e-6, 10_000, 2).unwrap().capacity > 1.99);
    assert!(bicm_capacity_mc(&cs, 1e6, 10_000, 2).unwrap().capacity < 0.01);
    assert!(bicm_capacity_mc(&cs, 0.0, 10, 2).is_err());
}

#[test]
fn capacity_is_non_increasing_in_noise() {
    let cs = qam(2, 1);
    let grid: Vec<f64> = (0..10).map(|i| sigma2_for(12.0 - 2.0 * i as f64)).collect();
    let est: Vec<_> = grid.iter().map(|&s| bicm_capacity_mc(&cs, s, 100_000, 3).unwrap()).collect();
    for w in est.windows(2) {
        let margin = 3.0 * (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
        assert!(w[1].capacity <= w[0].capacity + margin, "{w:?}");
    }
}

#[test]
fn estimator_stays_in_range_for_random_constellations() {
    let mut rng = rng_from_seed(4);
    for trial in 0..100 {
        let pts: Vec<Vec<Complex64>> = (0..16).map(|_| (0..2).map(|_| complex_gaussian(&mut rng, 0.5)).collect()).collect();
        let cs = ConstellationSet::new(pts).unwrap();
        let s2 = [0.01, 0.1, 1.0][trial % 3];
        let c = bicm_capacity_mc(&cs, s2, 10_000, trial as u64).unwrap().capacity;
        assert!((0.0..=4.0).contains(&c), "{trial}: {c}");
    }
}

#[test]
fn estimate_is_reproducible() {
    let cs = qam(4, 1);
    assert_eq!(bicm_capacity_mc(&cs, 0.1, 20_000, 9).unwrap(), bicm_capacity_mc(&cs, 0.1, 20_000, 9).unwrap());
}

#[test]
fn likelihood_ratio_matches_naive_sum() {
    let cs = qam(4, 1);
    let mut rng = rng_from_seed(5);
    let s2 = 0.2;
    for _ in 0..50 {
        let y = complex_gaussian(&mut rng, 1.0);
        for i in 0..4 {
            for b in 0..2 {
                let (mut num, mut den) = (0.0, 0.0);
                for (p, x) in cs.points().iter().enumerate() {
                    let l = (-(y - x[0]).norm_sqr() / (2.0 * s2)).exp();
                    if (p >> (3 - i)) & 1 == b {
                        den += l;
                    } else {
                        num += l;
                    }
                }
                let r = llr_ratio(&cs, &[y], i, b, s2);
                assert!((r - num / den).abs() <= 1e-10 * (num / den), "{r} {}", num / den);
            }
        }
    }
}

#[test]
fn likelihood_ratio_limits() {
    let cs = qam(2, 1);
    let y = cs.points()[0].clone();
    assert!(llr_ratio(&cs, &y, 0, 0, 1e-4) < 1e-100);
    let boundary = [Complex64::new(0.0, 0.3)];
    assert!((llr_ratio(&cs, &boundary, 0, 0, 0.5) - 1.0).abs() < 1e-15);
}

#[test]
fn bce_and_definition_agree() {
    for (cs, s2) in [(qam(2, 1), 0.1), (qam(4, 1), 0.05), (qam(2, 2), 0.2)] {
        let (a, b) = bce_capacity_consistency(&cs, s2, 20_000, 6).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} {b}");
    }
    let (a, b) = bce_capacity_consistency(&qam(2, 1), 1e-4, 10_000, 6).unwrap();
    assert!(a > 1.99 && b > 1.99);
}

#[test]
fn sphere_and_cube_formulas() {
    assert!((sphere_min_distance(1, 4) - 0.5f64.sqrt()).abs() < 1e-12);
    assert!((sphere_min_distance(1, 16) - 2f64.sqrt() / 4.0).abs() < 1e-12);
    // sqrt(5) * 16^(-1/8) = sqrt(5) * 2^(-1/2)
    assert!((sphere_min_distance(4, 16) - 2.5f64.sqrt()).abs() < 1e-12);
    assert!((sphere_power(2f64.sqrt(), 1) - 1.0).abs() < 1e-12);
    assert!((qam_cube_power(6f64.sqrt()) - 0.5).abs() < 1e-12);
    assert!((sphere_power(1.0, 4) - 0.2).abs() < 1e-12);
}

#[test]
fn shaping_gain_values_and_shape() {
    assert!((shaping_gain_ratio(1) - std::f64::consts::PI / 3.0).abs() < 1e-12);
    let direct4 = std::f64::consts::PI * 5.0 / (6.0 * 24f64.powf(0.25));
    assert!((shaping_gain_ratio(4) - direct4).abs() < 1e-12);
    assert!((SHAPING_GAIN_LIMIT - 1.4232898).abs() < 1e-6);
    let mut prev = 0.0;
    for n in 1..=170 {
        let r = shaping_gain_ratio(n);
        assert!(r > prev && r <= SHAPING_GAIN_LIMIT + 1e-9, "{n}: {r}");
        prev = r;
    }
}

#[test]
fn empirical_min_distances() {
    assert!((empirical_min_distance(&qam(4, 1)) - 2.0 / 10f64.sqrt()).abs() < 1e-12);
    assert!((empirical_min_distance(&qam(2, 1)) - 2f64.sqrt()).abs() < 1e-12);
    let mut pts = qam(2, 1).points().to_vec();
    pts[3] = pts[0].clone();
    assert_eq!(empirical_min_distance(&ConstellationSet::new(pts).unwrap()), 0.0);
}

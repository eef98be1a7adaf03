use num_complex::Complex64;
use phylink::modulation::{all_patterns, CrossLayerModulator, ModemDims, QamConstellation};

#[test]
fn qam_has_unit_power_and_expected_min_distance() {
    // d_min of square M-QAM at unit power is 2 / sqrt(2 (M - 1) / 3)
    for (bits, norm) in [(2usize, 2f64), (4, 10.0), (6, 42.0), (8, 170.0)] {
        let c = QamConstellation::<f64>::new(bits).unwrap();
        assert!((c.mean_power() - 1.0).abs() < 1e-12, "{bits}");
        assert!((c.min_distance() - 2.0 / norm.sqrt()).abs() < 1e-12, "{bits}");
    }
}

#[test]
fn qpsk_and_16qam_points_follow_3gpp_table() {
    let q = QamConstellation::<f64>::new(2).unwrap();
    let s = 1.0 / 2f64.sqrt();
    assert_eq!(q.modulate(&[0, 0]).unwrap()[0], Complex64::new(s, s));
    assert_eq!(q.modulate(&[1, 0]).unwrap()[0], Complex64::new(-s, s));
    assert_eq!(q.modulate(&[0, 1]).unwrap()[0], Complex64::new(s, -s));

    // 16QAM: I = (1-2b0)(2-(1-2b2)), Q = (1-2b1)(2-(1-2b3)), over sqrt(10)
    let c = QamConstellation::<f64>::new(4).unwrap();
    for p in 0..16usize {
        let b: Vec<u8> = (0..4).map(|i| ((p >> (3 - i)) & 1) as u8).collect();
        let f = |x: u8| 1.0 - 2.0 * x as f64;
        let want = Complex64::new(f(b[0]) * (2.0 - f(b[2])), f(b[1]) * (2.0 - f(b[3]))) / 10f64.sqrt();
        assert!((c.modulate(&b).unwrap()[0] - want).norm() < 1e-12);
    }
}

#[test]
fn neighbours_differ_in_one_bit() {
    for bits in [2, 4, 6, 8] {
        let c = QamConstellation::<f64>::new(bits).unwrap();
        let d = c.min_distance();
        for (i, a) in c.points().iter().enumerate() {
            for (j, b) in c.points().iter().enumerate() {
                if i != j && ((a - b).norm() - d).abs() < 1e-9 {
                    assert_eq!((i ^ j).count_ones(), 1, "{bits} bits: labels {i} {j}");
                }
            }
        }
    }
}

#[test]
fn max_log_matches_brute_force_oracle() {
    let c = QamConstellation::<f64>::new(4).unwrap();
    let (gain, sigma2) = (0.8, 0.3);
    for k in 0..50 {
        let y = Complex64::new((k as f64 * 0.37).sin() * 1.3, (k as f64 * 0.91).cos() * 1.1);
        let llr = c.demap_max_log(y, gain, sigma2);
        for i in 0..4 {
            let mut m = [f64::INFINITY; 2];
            for p in 0..16usize {
                let b = (p >> (3 - i)) & 1;
                let d = (y - gain * c.points()[p]).norm_sqr() / sigma2;
                m[b] = m[b].min(d);
            }
            assert_eq!(llr[i], m[1] - m[0]);
        }
    }
}

#[test]
fn noiseless_demap_signs_recover_bits() {
    let c = QamConstellation::<f64>::new(6).unwrap();
    let bits = all_patterns(6);
    let llr = c.demodulate(&c.modulate(&bits).unwrap(), 1.0, 0.1);
    for (b, l) in bits.iter().zip(&llr) {
        assert_eq!(*b == 0, *l > 0.0);
    }
}

#[test]
fn parameter_counts_match_reference_sizes() {
    for (bits, want) in [(2usize, 200_200usize), (32, 207_880)] {
        let g = phylink::modulation::modulator_graph(bits, 4, ModemDims::PAPER);
        assert_eq!(g.num_params(), want, "modulator {bits}");
    }
    for (bits, want) in [(2usize, 533_250usize), (8, 534_792), (32, 540_960)] {
        let g = phylink::modulation::demodulator_graph(bits, 4, ModemDims::PAPER);
        assert_eq!(g.num_params(), want, "demodulator {bits}");
    }
}

#[test]
fn learned_constellation_has_unit_power() {
    let m = CrossLayerModulator::new(4, 2, ModemDims::DESK, 7);
    let pts = m.constellation().unwrap();
    assert_eq!(pts.len(), 16);
    let p: f64 = pts.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>() / (16.0 * 2.0);
    assert!((p - 1.0).abs() < 1e-9, "{p}");
    let csv = m.constellation_csv().unwrap();
    assert_eq!(csv.lines().count(), 17);
    assert!(csv.starts_with("pattern,l0_re,l0_im,l1_re,l1_im"));
}

#[test]
fn learned_modem_round_trips_through_disk() {
    let m = CrossLayerModulator::new(4, 2, ModemDims::DESK, 3);
    let dir = std::env::temp_dir().join(format!("phylink-modem-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("modem");
    m.save(&path).unwrap();
    let back = CrossLayerModulator::load(&path).unwrap();
    let bits = all_patterns(4);
    assert_eq!(m.modulate(&bits).unwrap(), back.modulate(&bits).unwrap());
    let x = m.modulate(&bits).unwrap();
    assert_eq!(m.demodulate(&x).unwrap(), back.demodulate(&x).unwrap());
    std::fs::remove_dir_all(dir).ok();
}

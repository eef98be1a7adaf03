use phylink::channel::Numerology;
use phylink::sim::{
    config_hash, goodput_matrix, ideal_link_adaptation, parse_snr_grid, run_sweep, scenario_preset, summarize, CsiScheme,
    LinkConfig, LinkModels, ModulationScheme, PrecodingScheme, Scale, SimError,
};
use proptest::prelude::*;

fn desk(bits: usize, layers: usize) -> (LinkConfig, LinkModels) {
    (LinkConfig::baseline(Numerology::desk(), bits, layers), LinkModels::default())
}

#[test]
fn impossible_link_loses_every_block() {
    let r = run_sweep(&[desk(8, 2)], &[-20.0], 100, 1).unwrap();
    assert_eq!(r.rows[0].point.bler, 1.0);
    assert_eq!(r.rows[0].point.goodput, 0.0);
    assert_eq!(r.rows[0].point.ci_half_width, 0.0);
}

#[test]
fn same_root_seed_gives_identical_sweeps() {
    let links = [desk(2, 2), desk(4, 2)];
    let a = run_sweep(&links, &[0.0, 6.0], 100, 11).unwrap();
    let b = run_sweep(&links, &[0.0, 6.0], 100, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_csv(), b.to_csv());
    let c = run_sweep(&links, &[0.0, 6.0], 100, 12).unwrap();
    assert_ne!(a.rows, c.rows);
}

#[test]
fn siso_awgn_qpsk_half_rate_is_reliable_at_6db() {
    let num = Numerology { n_tx: 1, n_rx: 1, ..Numerology::desk() };
    let mut c = LinkConfig::baseline(num, 2, 1);
    c.channel = "awgn".into();
    // QPSK at rate 1/2 carries one information bit per symbol, so Eb/N0 = Es/N0.
    let r = run_sweep(&[(c, LinkModels::default())], &[-4.0, 6.0], 200, 3).unwrap();
    let (low, high) = (&r.rows[0].point, &r.rows[1].point);
    assert!(high.bler < 0.05, "{high:?}");
    assert!(low.bler > high.bler, "{low:?} {high:?}");
}

#[test]
fn sweep_preconditions() {
    assert!(matches!(run_sweep(&[desk(2, 1)], &[0.0], 99, 1), Err(SimError::Config(_))));
    assert!(matches!(run_sweep(&[desk(2, 1)], &[], 100, 1), Err(SimError::Config(_))));

    let mut bad = LinkConfig::baseline(Numerology::desk(), 4, 2);
    bad.name = "mismatched".into();
    bad.payload_bits_per_re = 6;
    let err = run_sweep(&[desk(2, 1), (bad, LinkModels::default())], &[0.0], 100, 1).unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("mismatched"), "{err}");

    let mut learned = LinkConfig::baseline(Numerology::desk(), 2, 2);
    learned.modulation = ModulationScheme::Learned;
    assert!(run_sweep(&[(learned, LinkModels::default())], &[0.0], 100, 1).unwrap_err().is_config());
}

#[test]
fn confidence_interval_and_csv() {
    let r = run_sweep(&[desk(4, 2)], &[0.0, 3.0], 100, 4).unwrap();
    for row in &r.rows {
        let p = row.point.bler;
        assert!((0.0..=1.0).contains(&p));
        assert!((row.point.ci_half_width - 1.959_964 * (p * (1.0 - p) / 100.0).sqrt()).abs() < 1e-6);
        assert_eq!(row.config_hash, config_hash(&LinkConfig::baseline(Numerology::desk(), 4, 2)));
        assert_eq!(row.seed, 4);
        assert_eq!(row.point.trials, 100);
    }
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("config,config_hash,seed,dl_snr_db,ul_snr_db,trials,block_errors,bler,goodput,ci_half_width"));
    assert_ne!(config_hash(&desk(2, 1).0), config_hash(&desk(2, 2).0));
}

#[test]
fn ideal_adaptation_properties() {
    let snr = [0.0, 8.0];
    let one = ideal_link_adaptation(&[desk(2, 2)], &snr, 30, 5).unwrap();
    for p in &one {
        assert_eq!(p.ideal, p.per_candidate[0]);
    }
    let two = ideal_link_adaptation(&[desk(2, 2), desk(4, 2)], &snr, 30, 5).unwrap();
    let three = ideal_link_adaptation(&[desk(2, 2), desk(4, 2), desk(6, 2)], &snr, 30, 5).unwrap();
    for ((a, b), c) in one.iter().zip(&two).zip(&three) {
        assert!(b.per_candidate.iter().all(|&g| b.ideal >= g));
        assert!(b.ideal >= a.ideal && c.ideal >= b.ideal);
        assert_eq!(b.per_candidate[0], a.per_candidate[0]);
    }
    assert!(ideal_link_adaptation(&[], &snr, 30, 5).unwrap_err().is_config());
    let g = goodput_matrix(&[desk(2, 2), desk(4, 2)], 8.0, 30, 5).unwrap();
    assert_eq!(summarize(8.0, &g), two[1]);
}

fn names(v: &[LinkConfig]) -> Vec<String> {
    v.iter().map(|c| c.name.clone()).collect()
}

#[test]
fn baseline_preset_enumerates_factorizations() {
    let paper = scenario_preset("baseline5g", Scale::Paper, 8, None).unwrap();
    assert_eq!(names(&paper), ["QPSKx4", "16QAMx2", "256QAMx1"]);
    for c in &paper {
        assert_eq!(c.numerology, Numerology::paper());
        assert!(matches!(c.csi, CsiScheme::Quantized { .. }));
        assert_eq!(c.precoding, PrecodingScheme::Eigen);
        let ModulationScheme::Qam { bits } = c.modulation else { panic!("{}", c.name) };
        assert_eq!(bits * c.n_layer, 8);
    }
    assert_eq!(names(&scenario_preset("baseline5g", Scale::Desk, 8, None).unwrap()), ["16QAMx2", "256QAMx1"]);
    assert_eq!(names(&scenario_preset("BASELINE5G", Scale::Desk, 2, None).unwrap()), ["QPSKx1"]);
    assert!(scenario_preset("baseline5g", Scale::Desk, 32, None).unwrap_err().is_config());
    assert!(matches!(scenario_preset("cmo4", Scale::Desk, 4, None), Err(SimError::Config(_))));
}

#[test]
fn learned_presets_need_artifacts_and_wire_feedback_forms() {
    let dir = tempfile::tempdir().unwrap();
    match scenario_preset("cmo2", Scale::Desk, 4, Some(dir.path())) {
        Err(SimError::MissingModels(files)) => {
            assert_eq!(files, vec![dir.path().join("modem.json"), dir.path().join("codec.json")]);
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(scenario_preset("cmo1", Scale::Desk, 4, None), Err(SimError::MissingModels(_))));

    std::fs::write(dir.path().join("modem.json"), "{}").unwrap();
    std::fs::write(dir.path().join("codec.json"), "{}").unwrap();
    for (name, scale, layers, csi) in [
        ("cmo1", Scale::Desk, 2, CsiScheme::LearnedBits),
        ("cmo2", Scale::Paper, 4, CsiScheme::LearnedBits),
        ("cmo3", Scale::Desk, 2, CsiScheme::LearnedSymbols),
        ("cmo3", Scale::Paper, 4, CsiScheme::LearnedSymbols),
    ] {
        let c = scenario_preset(name, scale, 8, Some(dir.path())).unwrap().remove(0);
        assert_eq!(c.n_layer, layers);
        assert_eq!(c.csi, csi);
        assert_eq!(c.modulation, ModulationScheme::Learned);
        assert_eq!(c.precoding, PrecodingScheme::Learned);
        assert_eq!(c.payload_bits_per_re, 8);
    }
}

#[test]
fn snr_grid_parsing() {
    assert_eq!(parse_snr_grid("-4:2:16").unwrap(), (0..=10).map(|i| -4.0 + 2.0 * i as f64).collect::<Vec<_>>());
    assert_eq!(parse_snr_grid("1, 2.5,-3").unwrap(), vec![1.0, 2.5, -3.0]);
    assert_eq!(parse_snr_grid("0:3:7").unwrap(), vec![0.0, 3.0, 6.0]);
    for bad in ["", "a", "0:0:4", "4:1:0", "1,,2"] {
        assert!(parse_snr_grid(bad).is_err(), "{bad:?}");
    }
}

proptest! {
    #[test]
    fn range_grids_are_inclusive_and_evenly_spaced(lo in -30i32..30, step10 in 1u32..50, n in 0usize..25) {
        let step = step10 as f64 / 10.0;
        let hi = lo as f64 + n as f64 * step;
        let g = parse_snr_grid(&format!("{lo}:{step}:{hi}")).unwrap();
        prop_assert_eq!(g.len(), n + 1);
        prop_assert_eq!(g[0], lo as f64);
        for w in g.windows(2) {
            prop_assert!((w[1] - w[0] - step).abs() < 1e-9);
        }
    }

    #[test]
    fn genie_mean_dominates_every_candidate(g in prop::collection::vec(prop::collection::vec(0.0f64..8.0, 3), 1..40)) {
        let p = summarize(0.0, &g);
        for &c in &p.per_candidate {
            prop_assert!(p.ideal >= c - 1e-12);
        }
        let best_row_max = g.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).fold(0.0, f64::max);
        prop_assert!(p.ideal <= best_row_max + 1e-12);
    }
}

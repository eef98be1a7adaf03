use phylink::channel::{sample_channel, Numerology, TdlProfile, DEFAULT_DELAY_SPREAD_S};
use phylink::csi::extract_csi;
use phylink::precoding::eigen_precoder;
use phylink::sim::{LinkConfig, LinkModels};
use phylink::training::{bce_nats, evaluate_end_to_end, loss_combined, TrainConfig, TrainError, Trainer};

mod common;
use common::{composite_chain_error, tiny_train_config};

fn planted_csi() -> phylink::csi::CsiMatrix {
    let profile = TdlProfile::by_name("cdl-c", DEFAULT_DELAY_SPREAD_S).unwrap();
    extract_csi(&sample_channel(&profile, &Numerology::desk(), 3).unwrap(), 2).unwrap()
}

#[test]
fn loss_reference_values() {
    let w = planted_csi();
    let p = eigen_precoder(&w);
    let bits: Vec<u8> = (0..64).map(|i| (i % 3 == 0) as u8).collect();
    let perfect: Vec<f64> = bits.iter().map(|&b| if b == 0 { 30.0 } else { -30.0 }).collect();
    assert!(loss_combined(&bits, &perfect, &w, &p, 1.0).unwrap() < 1e-12);
    assert!((loss_combined(&bits, &perfect, &w, &p, 0.0).unwrap() + 1.0).abs() < 1e-12);
    let zeros = vec![0.0; bits.len()];
    assert!((loss_combined(&bits, &zeros, &w, &p, 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(loss_combined(&bits, &zeros, &w, &p, 1.5).is_err());
    assert!(loss_combined(&bits, &zeros[1..], &w, &p, 0.5).is_err());
}

#[test]
fn loss_is_affine_in_lambda() {
    let w = planted_csi();
    let other = eigen_precoder(&extract_csi(
        &sample_channel(&TdlProfile::by_name("cdl-c", DEFAULT_DELAY_SPREAD_S).unwrap(), &Numerology::desk(), 4).unwrap(),
        2,
    )
    .unwrap());
    let bits: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
    let llrs: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
    let l = |lam| loss_combined(&bits, &llrs, &w, &other, lam).unwrap();
    assert!((l(0.5) - 0.5 * (l(0.0) + l(1.0))).abs() < 1e-12);
    assert!((l(1.0) - bce_nats(&bits, &llrs)).abs() < 1e-15);

    let mut t = Trainer::new(tiny_train_config()).unwrap();
    let (a, b, c) = (t.validate(0.0).unwrap(), t.validate(1.0).unwrap(), t.validate(0.5).unwrap());
    assert!((c.loss - 0.5 * (a.loss + b.loss)).abs() < 1e-12, "{a:?} {b:?} {c:?}");
    assert_eq!(a.bce, b.bce);
    assert_eq!(a.sgcs, c.sgcs);
}

#[test]
fn gradient_flows_through_the_whole_link() {
    let err = composite_chain_error(1e-4).unwrap();
    assert!(err < 1e-3, "relative error {err:e}");
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        TrainConfig { lambda: phylink::training::LambdaSchedule { phase1: 1.5, phase2: 1.0 }, ..tiny_train_config() },
        TrainConfig { dl_snr_db: [10.0, 0.0], ..tiny_train_config() },
        TrainConfig { n_layer: 3, ..tiny_train_config() },
        TrainConfig { batch: 0, ..tiny_train_config() },
        TrainConfig { channel: "nope".into(), ..tiny_train_config() },
    ];
    for c in bad {
        assert!(Trainer::new(c).is_err());
    }
}

#[test]
fn same_seed_gives_identical_runs() {
    let run = || {
        let mut t = Trainer::new(tiny_train_config()).unwrap();
        let r = t.train_phase1().unwrap();
        (r.trace, t.parameter_vector())
    };
    let (ta, pa) = run();
    let (tb, pb) = run();
    assert_eq!(ta, tb);
    assert_eq!(pa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), pb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert!(ta.iter().all(|r| r.loss.is_finite()));

    let mut other = Trainer::new(TrainConfig { seed: 2, ..tiny_train_config() }).unwrap();
    assert_ne!(other.train_phase1().unwrap().trace, ta);
}

#[test]
fn lambda_override_reproduces_phase_one() {
    let cfg = tiny_train_config();
    let mut a = Trainer::new(cfg.clone()).unwrap();
    let ra = a.train_phase1().unwrap();

    let mut over = cfg;
    over.lambda.phase2 = over.lambda.phase1;
    over.steps_phase2 = over.steps_phase1;
    let mut b = Trainer::new(over).unwrap();
    let rb = b.train_phase2().unwrap();
    assert_eq!(ra.trace, rb.trace);
    assert_eq!(ra.final_, rb.final_);
    assert_eq!(a.parameter_vector(), b.parameter_vector());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut whole = Trainer::new(tiny_train_config()).unwrap();
    whole.train_phase1().unwrap();
    let r_whole = whole.train_phase2().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(tiny_train_config()).unwrap();
    first.train_phase1().unwrap();
    first.save(dir.path()).unwrap();
    drop(first);
    let mut resumed = Trainer::load(dir.path()).unwrap();
    let r_resumed = resumed.train_phase2().unwrap();

    assert_eq!(r_whole.trace, r_resumed.trace);
    assert_eq!(whole.parameter_vector(), resumed.parameter_vector());
    assert_eq!(resumed.reports.len(), 2);
    assert_eq!(resumed.reports[0].phase, 1);
}

#[test]
fn phase_report_has_consistent_trace() {
    let mut t = Trainer::new(tiny_train_config()).unwrap();
    let r = t.train_phase1().unwrap();
    assert_eq!(r.phase, 1);
    assert_eq!(r.lambda, 0.5);
    assert_eq!(r.steps_run, r.trace.len());
    assert_eq!(r.steps_run, 6);
    assert!(!r.early_stopped);
    let csv = r.trace_csv();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("step,loss,bce,sgcs"));
    assert!(matches!(t.train_phase(1, 2.0, 1), Err(TrainError::Config(_))));
}

#[test]
fn noiseless_baselines_decode_every_block() {
    let none = LinkModels::default();
    for (bits, layers) in [(2, 1), (2, 2), (4, 2), (6, 2), (8, 1)] {
        let c = LinkConfig::baseline(Numerology::desk(), bits, layers);
        let p = evaluate_end_to_end(&c, &none, f64::INFINITY, 20, 1).unwrap();
        assert_eq!(p.block_errors, 0, "{}", c.name);
        assert!((p.goodput - c.info_bits() as f64 / Numerology::desk().n_res() as f64).abs() < 1e-12);
    }
}

#[test]
fn baseline_qpsk_is_clean_at_high_snr() {
    let c = LinkConfig::baseline(Numerology::desk(), 2, 1);
    let p = evaluate_end_to_end(&c, &LinkModels::default(), 20.0, 1000, 5).unwrap();
    assert!(p.bler < 0.01, "{p:?}");
}

#[test]
fn failed_blocks_carry_no_goodput() {
    let c = LinkConfig::baseline(Numerology::desk(), 8, 2);
    let p = evaluate_end_to_end(&c, &LinkModels::default(), -20.0, 20, 2).unwrap();
    assert_eq!(p.bler, 1.0);
    assert_eq!(p.goodput, 0.0);
}

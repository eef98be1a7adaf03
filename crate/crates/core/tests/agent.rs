use phylink::agent::{
    argmax_lowest, generate_labels, run_agent_phase, AgentDataset, AgentModel, AgentPhaseConfig, AgentTrainConfig, QamCandidate,
};
use phylink::channel::Numerology;
use phylink::rng::{derive_seed, rng_from_seed};
use phylink::sim::{LinkConfig, LinkModels};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn names(j: usize) -> Vec<String> {
    (0..j).map(|i| format!("c{i}")).collect()
}

/// Interleaved Gaussian clusters in 2-D SINR space, `per` rows each.
fn clusters(centres: &[[f64; 2]], labels: &[usize], per: usize, seed: u64) -> AgentDataset {
    let mut rng = rng_from_seed(seed);
    let (mut f, mut l) = (Vec::new(), Vec::new());
    for _ in 0..per {
        for (c, &lab) in centres.iter().zip(labels) {
            f.push(c.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect());
            l.push(lab);
        }
    }
    AgentDataset::new(centres.len().max(labels.iter().max().unwrap() + 1), f, l).unwrap()
}

fn quick() -> AgentTrainConfig {
    AgentTrainConfig { epochs: 40, batch: 32, learning_rate: 1e-2, seed: 3 }
}

#[test]
fn argmax_rule() {
    assert_eq!(argmax_lowest(&[0.1, 0.7, 0.2]), 1);
    assert_eq!(argmax_lowest(&[0.4, 0.4, 0.2]), 0);
    assert_eq!(argmax_lowest(&[0.2, 0.4, 0.4]), 1);
}

#[test]
fn tied_outputs_select_the_first_candidate() {
    let mut a = AgentModel::new(2, names(3), 1).unwrap();
    let out = a.graph.param_names().iter().position(|n| n.starts_with("out")).unwrap();
    for (i, p) in a.graph.params_mut().into_iter().enumerate() {
        if i >= out {
            p.data_mut().fill(0.0);
        }
    }
    assert_eq!(a.select_scheme(&[3.0, -1.0]).unwrap(), 0);
    let p = &a.probabilities(&[vec![3.0, -1.0]]).unwrap()[0];
    assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn needs_two_candidates_and_matching_inputs() {
    assert!(AgentModel::new(2, names(1), 1).is_err());
    let a = AgentModel::new(2, names(2), 1).unwrap();
    assert!(a.select_scheme(&[1.0]).is_err());
    assert!(AgentDataset::new(2, vec![vec![1.0]], vec![2]).is_err());
    assert!(AgentDataset::new(2, vec![vec![1.0], vec![1.0, 2.0]], vec![0, 1]).is_err());
    assert!(AgentDataset::new(2, vec![vec![f64::NAN]], vec![0]).is_err());
}

proptest! {
    #[test]
    fn selection_ignores_monotone_maps(v in prop::collection::vec(1e-6f64..1.0, 2..8)) {
        let i = argmax_lowest(&v);
        prop_assert_eq!(argmax_lowest(&v.iter().map(|x| x.ln()).collect::<Vec<_>>()), i);
        prop_assert_eq!(argmax_lowest(&v.iter().map(|x| x * x * x + 2.0 * x).collect::<Vec<_>>()), i);
        prop_assert_eq!(argmax_lowest(&v.iter().map(|x| (3.0 * x).exp() - 7.0).collect::<Vec<_>>()), i);
    }
}

#[test]
fn separable_clusters_are_learned() {
    let data = clusters(&[[-6.0, -6.0], [6.0, 6.0]], &[0, 1], 200, 1);
    let (train, val) = data.split(0.25);
    let mut a = AgentModel::new(2, names(2), 2).unwrap();
    let losses = a.train(&train, &val, &quick()).unwrap();
    assert!(a.validation_accuracy >= 0.95, "{}", a.validation_accuracy);
    assert!(losses.last().unwrap() < &losses[0]);
    assert_eq!(a.accuracy(&val).unwrap(), a.validation_accuracy);
}

#[test]
fn single_class_data_is_fit_exactly() {
    let data = clusters(&[[0.0, 0.0]], &[1], 120, 4);
    let data = AgentDataset::new(3, data.features, data.labels).unwrap();
    let mut a = AgentModel::new(2, names(3), 5).unwrap();
    let losses = a.train(&data, &data, &quick()).unwrap();
    assert_eq!(a.train_accuracy, 1.0);
    assert!(*losses.last().unwrap() < 0.05 * losses[0], "{losses:?}");
}

#[test]
fn permuted_labels_give_the_permuted_policy() {
    let centres = [[-8.0, 0.0], [0.0, 8.0], [8.0, 0.0]];
    let perm = [2, 0, 1];
    for labels in [[0, 1, 2], perm] {
        let data = clusters(&centres, &labels, 150, 6);
        let (train, val) = data.split(0.2);
        let mut a = AgentModel::new(2, names(3), 7).unwrap();
        a.train(&train, &val, &AgentTrainConfig { epochs: 60, ..quick() }).unwrap();
        assert!(a.validation_accuracy >= 0.95, "{labels:?}: {}", a.validation_accuracy);
        for (c, &l) in centres.iter().zip(&labels) {
            assert_eq!(a.select_scheme(c).unwrap(), l);
        }
    }
}

#[test]
fn dataset_and_model_round_trip() {
    let data = clusters(&[[-3.0, 1.0], [2.0, 4.0]], &[0, 1], 10, 8);
    assert_eq!(AgentDataset::from_csv(&data.to_csv()).unwrap(), data);
    assert!(data.to_csv().starts_with("sinr_0,sinr_1,v_0,v_1\n"));
    assert!(AgentDataset::from_csv("sinr_0,v_0,v_1\n1.0,1,1\n").is_err());
    assert!(AgentDataset::from_csv("sinr_0,v_0,v_1\nx,1,0\n").is_err());

    let mut a = AgentModel::new(2, names(2), 9).unwrap();
    a.train(&data, &data, &quick()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent");
    a.save(&path).unwrap();
    let b = AgentModel::load(&path).unwrap();
    assert_eq!(a.probabilities(&data.features).unwrap(), b.probabilities(&data.features).unwrap());
    assert_eq!(b.candidates, a.candidates);
    assert_eq!(b.validation_accuracy, a.validation_accuracy);
}

fn links(pairs: &[(usize, usize)]) -> Vec<(LinkConfig, LinkModels)> {
    pairs.iter().map(|&(b, l)| (LinkConfig::baseline(Numerology::desk(), b, l), LinkModels::default())).collect()
}

fn seeds(n: u64, root: u64) -> Vec<u64> {
    (0..n).map(|i| derive_seed(root, 99, i)).collect()
}

#[test]
fn dominant_candidate_takes_every_label() {
    // 256QAM on two layers cannot close at -2..2 dB even with full beamforming
    // gain; on a faded slot where QPSK fails too, the tie goes to QPSK.
    let d = generate_labels(&links(&[(2, 1), (8, 2)]), &seeds(30, 1), [-2.0, 2.0], 2).unwrap();
    assert!(d.labels.iter().all(|&l| l == 0), "{:?}", d.labels);
    assert_eq!(d.width(), 2);
}

#[test]
fn label_flips_across_the_snr_range() {
    let cands = links(&[(2, 1), (4, 2)]);
    let count = |snr: f64| {
        let d = generate_labels(&cands, &seeds(30, 2), [snr, snr], 2).unwrap();
        d.labels.iter().filter(|&&l| l == 1).count()
    };
    let (low, high) = (count(-2.0), count(20.0));
    assert!(low < 15 && high > 15, "{low} {high}");
}

#[test]
fn agent_phase_is_deterministic() {
    let cfg = AgentPhaseConfig {
        candidates: vec![QamCandidate { qam_bits: 2, layers: 1 }, QamCandidate { qam_bits: 4, layers: 2 }],
        realizations: 24,
        trials_per_realization: 1,
        train: AgentTrainConfig { epochs: 5, ..quick() },
        ..AgentPhaseConfig::default()
    };
    let (a, da, ra) = run_agent_phase(&cfg).unwrap();
    let (b, db, rb) = run_agent_phase(&cfg).unwrap();
    assert_eq!(da, db);
    assert_eq!(ra, rb);
    assert_eq!(a.probabilities(&da.features).unwrap(), b.probabilities(&db.features).unwrap());
    assert_eq!(ra.label_counts.iter().sum::<usize>(), 24);
    assert_eq!(ra.train_rows + ra.validation_rows, 24);
    assert!(run_agent_phase(&AgentPhaseConfig { candidates: cfg.candidates[..1].to_vec(), ..cfg.clone() }).is_err());
}

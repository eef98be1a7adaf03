//! Link-adaptation agent: maps per-layer SINR to one of `J` candidate links.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{load_bundle, save_bundle, Activation, Adam, AutodiffError, Graph, ModelBundle, Mode, Tape, Tensor};
use crate::channel::snr_to_noise_variance;
use crate::rng::{derive_seed, derived_rng, rng_from_seed, stream};
use crate::sim::{
    reference_sinr_db, run_trial_on, summarize, trial_channels, trial_seed, AdaptationPoint, LinkConfig, LinkModels, Scale, SimError,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("agent needs at least two candidates, got {0}")]
    Candidates(usize),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("loss became non-finite at epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Index of the largest value; ties and NaN-free equal values go to the
/// lowest index.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// SINR features with their best-candidate labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDataset {
    pub n_classes: usize,
    /// Per-layer SINR in dB.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl AgentDataset {
    pub fn new(n_classes: usize, features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self, AgentError> {
        if features.len() != labels.len() {
            return Err(AgentError::Dataset(format!("{} feature rows, {} labels", features.len(), labels.len())));
        }
        let width = features.first().map(|f| f.len()).unwrap_or(0);
        if features.iter().any(|f| f.len() != width || f.iter().any(|v| !v.is_finite())) {
            return Err(AgentError::Dataset("feature rows must be finite and equally long".into()));
        }
        if labels.iter().any(|&l| l >= n_classes) {
            return Err(AgentError::Dataset(format!("label outside 0..{n_classes}")));
        }
        Ok(Self { n_classes, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.first().map(|f| f.len()).unwrap_or(0)
    }

    /// Splits off the last `fraction` of rows.
    pub fn split(&self, fraction: f64) -> (Self, Self) {
        let n_val = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - n_val.min(self.len());
        let part = |r: std::ops::Range<usize>| Self {
            n_classes: self.n_classes,
            features: self.features[r.clone()].to_vec(),
            labels: self.labels[r].to_vec(),
        };
        (part(0..cut), part(cut..self.len()))
    }

    /// `sinr_0,..,v_0,..` with one-hot labels.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> =
            (0..self.width()).map(|i| format!("sinr_{i}")).chain((0..self.n_classes).map(|j| format!("v_{j}"))).collect();
        out += &header.join(",");
        out.push('\n');
        for (f, &l) in self.features.iter().zip(&self.labels) {
            let cells: Vec<String> =
                f.iter().map(|v| v.to_string()).chain((0..self.n_classes).map(|j| ((j == l) as u8).to_string())).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, AgentError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| AgentError::Dataset("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let width = cols.iter().filter(|c| c.starts_with("sinr_")).count();
        let n_classes = cols.iter().filter(|c| c.starts_with("v_")).count();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| AgentError::Dataset(format!("row {i}: not numeric")))?;
            if vals.len() != width + n_classes {
                return Err(AgentError::Dataset(format!("row {i}: {} columns", vals.len())));
            }
            let hot: Vec<usize> = (0..n_classes).filter(|&j| vals[width + j] == 1.0).collect();
            if hot.len() != 1 || vals[width..].iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(AgentError::Dataset(format!("row {i}: label is not one-hot")));
            }
            features.push(vals[..width].to_vec());
            labels.push(hot[0]);
        }
        Self::new(n_classes, features, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for AgentTrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch: 64, learning_rate: 1e-2, seed: 1 }
    }
}

/// `Dense(4 n_layer, ReLU) -> BatchNorm -> Dense(J) -> Softmax` over
/// standardized SINR features.
#[derive(Debug, Clone)]
pub struct AgentModel {
    pub graph: Graph,
    pub n_layer: usize,
    pub candidates: Vec<String>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
}

impl AgentModel {
    pub fn new(n_layer: usize, candidates: Vec<String>, seed: u64) -> Result<Self, AgentError> {
        if candidates.len() < 2 {
            return Err(AgentError::Candidates(candidates.len()));
        }
        let mut g = Graph::new(vec![n_layer]);
        let h = g.dense("hidden", 0, 4 * n_layer);
        let a = g.activation("relu", h, Activation::Relu);
        let b = g.batch_norm("bn", a);
        let o = g.dense("out", b, candidates.len());
        g.activation("softmax", o, Activation::Softmax);
        g.init_weights(seed);
        Ok(Self {
            graph: g,
            n_layer,
            candidates,
            feature_mean: vec![0.0; n_layer],
            feature_std: vec![1.0; n_layer],
            train_accuracy: 0.0,
            validation_accuracy: 0.0,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.candidates.len()
    }

    fn standardize(&self, rows: &[Vec<f64>]) -> Result<Tensor, AgentError> {
        let data = rows
            .iter()
            .flat_map(|r| r.iter().zip(self.feature_mean.iter().zip(&self.feature_std)).map(|(v, (m, s))| (v - m) / s))
            .collect();
        Ok(Tensor::new(vec![rows.len(), self.n_layer], data)?)
    }

    /// Softmax outputs for a batch of SINR vectors.
    pub fn probabilities(&self, q: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, AgentError> {
        if q.iter().any(|r| r.len() != self.n_layer) {
            return Err(AgentError::Dataset(format!("SINR vectors must have {} entries", self.n_layer)));
        }
        if q.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.graph.infer(&self.standardize(q)?)?;
        Ok(out.data().chunks(self.n_classes()).map(|c| c.to_vec()).collect())
    }

    /// Candidate index for per-layer SINR `q` (dB).
    pub fn select_scheme(&self, q: &[f64]) -> Result<usize, AgentError> {
        Ok(argmax_lowest(&self.probabilities(&[q.to_vec()])?[0]))
    }

    pub fn accuracy(&self, data: &AgentDataset) -> Result<f64, AgentError> {
        if data.is_empty() {
            return Ok(1.0);
        }
        let p = self.probabilities(&data.features)?;
        let hits = p.iter().zip(&data.labels).filter(|(p, &l)| argmax_lowest(p) == l).count();
        Ok(hits as f64 / data.len() as f64)
    }

    /// Minimizes categorical cross-entropy `-(1/J) sum_j v_j ln p_j`,
    /// averaged over rows; records train and validation accuracy.
    pub fn train(&mut self, train: &AgentDataset, validation: &AgentDataset, cfg: &AgentTrainConfig) -> Result<Vec<f64>, AgentError> {
        if train.is_empty() || train.width() != self.n_layer || train.n_classes != self.n_classes() {
            return Err(AgentError::Dataset("training set does not match the agent".into()));
        }
        let n = train.len() as f64;
        for i in 0..self.n_layer {
            let m = train.features.iter().map(|f| f[i]).sum::<f64>() / n;
            let v = train.features.iter().map(|f| (f[i] - m).powi(2)).sum::<f64>() / n;
            self.feature_mean[i] = m;
            self.feature_std[i] = if v > 1e-12 { v.sqrt() } else { 1.0 };
        }
        let x = self.standardize(&train.features)?;
        let j = self.n_classes();
        let mut opt = Adam::new(cfg.learning_rate);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = rng_from_seed(derive_seed(cfg.seed, stream::AGENT, 0));
        let mut losses = Vec::with_capacity(cfg.epochs);
        self.graph.set_mode(Mode::Train);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch.max(2)) {
                // Batch norm needs two rows; a lone trailing row rides along
                // with the next epoch instead.
                if chunk.len() < 2 && train.len() >= 2 {
                    continue;
                }
                let rows: Vec<f64> = chunk.iter().flat_map(|&r| x.data()[r * self.n_layer..(r + 1) * self.n_layer].to_vec()).collect();
                let mut hot = vec![0.0; chunk.len() * j];
                for (i, &r) in chunk.iter().enumerate() {
                    hot[i * j + train.labels[r]] = 1.0;
                }
                let mut tape = Tape::new();
                let xin = tape.input(Tensor::new(vec![chunk.len(), self.n_layer], rows)?);
                let (p, params) = self.graph.forward_on(&mut tape, xin)?;
                let eps = tape.constant(Tensor::filled(&[chunk.len(), j], 1e-300));
                let p = tape.add(p, eps)?;
                let lp = tape.ln(p);
                let v = tape.constant(Tensor::new(vec![chunk.len(), j], hot)?);
                let prod = tape.mul(lp, v)?;
                let m = tape.mean_all(prod);
                let loss = tape.scale(m, -1.0);
                let lv = tape.value(loss).data()[0];
                if !lv.is_finite() {
                    return Err(AgentError::Diverged(epoch));
                }
                let mut grads = tape.backward(loss)?;
                let g: Vec<Tensor> = params.iter().map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)))).collect();
                self.graph.apply_gradients(&mut opt, &g)?;
                epoch_loss += lv;
                batches += 1;
            }
            losses.push(epoch_loss / batches.max(1) as f64);
        }
        self.graph.set_mode(Mode::Infer);
        self.train_accuracy = self.accuracy(train)?;
        self.validation_accuracy = self.accuracy(validation)?;
        Ok(losses)
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let mut b = ModelBundle::default();
        b.graphs.insert("agent".into(), self.graph.clone());
        b.meta = serde_json::json!({
            "kind": "control-agent",
            "n_layer": self.n_layer,
            "candidates": self.candidates,
            "feature_mean": self.feature_mean,
            "feature_std": self.feature_std,
            "train_accuracy": self.train_accuracy,
            "validation_accuracy": self.validation_accuracy,
        });
        Ok(save_bundle(&b, path)?)
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let mut b = load_bundle(path)?;
        fn get<T: serde::de::DeserializeOwned>(meta: &serde_json::Value, k: &str) -> Result<T, AgentError> {
            serde_json::from_value(meta[k].clone()).map_err(|_| AgentError::Dataset(format!("agent file lacks {k}")))
        }
        let n_layer: usize = get(&b.meta, "n_layer")?;
        let candidates: Vec<String> = get(&b.meta, "candidates")?;
        let feature_mean: Vec<f64> = get(&b.meta, "feature_mean")?;
        let feature_std: Vec<f64> = get(&b.meta, "feature_std")?;
        let train_accuracy: f64 = get(&b.meta, "train_accuracy")?;
        let validation_accuracy: f64 = get(&b.meta, "validation_accuracy")?;
        let mut graph = b.graphs.remove("agent").ok_or_else(|| AgentError::Dataset("agent file lacks its graph".into()))?;
        graph.set_mode(Mode::Infer);
        Ok(Self { graph, n_layer, candidates, feature_mean, feature_std, train_accuracy, validation_accuracy })
    }
}

/// Feature width: the largest layer count among the candidates.
pub fn feature_layers(candidates: &[(LinkConfig, LinkModels)]) -> usize {
    candidates.iter().map(|(c, _)| c.n_layer).max().unwrap_or(1)
}

/// One labelled realization: the channel of `seed` at an SNR drawn from
/// `snr_db`, each candidate's goodput averaged over `trials` noise draws.
fn label_one(
    candidates: &[(LinkConfig, LinkModels)],
    seed: u64,
    snr_db: [f64; 2],
    trials: usize,
    n_feat: usize,
) -> Result<(Vec<f64>, usize), AgentError> {
    let snr = derived_rng(seed, stream::SNR, 0).random_range(snr_db[0]..=snr_db[1]);
    let (dl, ul) = trial_channels(&candidates[0].0, seed)?;
    let q = reference_sinr_db(&dl, n_feat, snr_to_noise_variance(snr, 1.0))?;
    let mut goodput = vec![0.0; candidates.len()];
    for t in 0..trials {
        let ts = derive_seed(seed, stream::EVAL, t as u64);
        for (g, (c, m)) in goodput.iter_mut().zip(candidates) {
            *g += run_trial_on(c, m, &dl, ul.as_ref(), snr, ts)?.goodput(&c.numerology);
        }
    }
    Ok((q, argmax_lowest(&goodput)))
}

/// Labels each channel seed with the candidate of highest mean goodput
/// (lowest index on ties) and the scheme-independent per-layer SINR.
pub fn generate_labels(
    candidates: &[(LinkConfig, LinkModels)],
    channel_seeds: &[u64],
    snr_db: [f64; 2],
    trials_per_seed: usize,
) -> Result<AgentDataset, AgentError> {
    if candidates.is_empty() {
        return Err(AgentError::Candidates(0));
    }
    for (c, m) in candidates {
        c.validate(m)?;
    }
    let n_feat = feature_layers(candidates);
    let rows: Vec<(Vec<f64>, usize)> = channel_seeds
        .par_iter()
        .map(|&s| label_one(candidates, s, snr_db, trials_per_seed.max(1), n_feat))
        .collect::<Result<_, _>>()?;
    let (features, labels) = rows.into_iter().unzip();
    AgentDataset::new(candidates.len(), features, labels)
}

/// Agent, per-candidate and genie goodput at one SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPoint {
    pub agent: f64,
    #[serde(flatten)]
    pub reference: AdaptationPoint,
}

/// Throughput of agent-driven selection against every fixed candidate and
/// genie selection, on the same trials.
pub fn agent_throughput(
    agent: &AgentModel,
    candidates: &[(LinkConfig, LinkModels)],
    snr_grid: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<AgentPoint>, AgentError> {
    let n_feat = feature_layers(candidates);
    snr_grid
        .iter()
        .map(|&snr| {
            let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..trials)
                .into_par_iter()
                .map(|t| -> Result<_, AgentError> {
                    let ts = trial_seed(seed, t);
                    let (dl, ul) = trial_channels(&candidates[0].0, ts)?;
                    let q = reference_sinr_db(&dl, n_feat, snr_to_noise_variance(snr, 1.0))?;
                    let g = candidates
                        .iter()
                        .map(|(c, m)| Ok(run_trial_on(c, m, &dl, ul.as_ref(), snr, ts)?.goodput(&c.numerology)))
                        .collect::<Result<Vec<f64>, AgentError>>()?;
                    Ok((q, g))
                })
                .collect::<Result<_, _>>()?;
            let (qs, gs): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
            let picks = agent.probabilities(&qs)?;
            let agent_mean = gs.iter().zip(&picks).map(|(g, p)| g[argmax_lowest(p)]).sum::<f64>() / trials.max(1) as f64;
            Ok(AgentPoint { agent: agent_mean, reference: summarize(snr, &gs) })
        })
        .collect()
}

/// QAM baseline candidate `(bits per symbol, layers)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QamCandidate {
    pub qam_bits: usize,
    pub layers: usize,
}

/// Settings of the agent training phase: label generation and fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentPhaseConfig {
    pub scale: Scale,
    pub candidates: Vec<QamCandidate>,
    /// Channel realizations labelled for the dataset.
    pub realizations: usize,
    /// Noise draws averaged per realization when labelling.
    pub trials_per_realization: usize,
    pub dl_snr_db: [f64; 2],
    pub validation_fraction: f64,
    pub train: AgentTrainConfig,
    pub seed: u64,
}

impl Default for AgentPhaseConfig {
    fn default() -> Self {
        Self {
            scale: Scale::Desk,
            candidates: [(2, 1), (2, 2), (4, 2), (6, 2)].iter().map(|&(qam_bits, layers)| QamCandidate { qam_bits, layers }).collect(),
            realizations: 600,
            trials_per_realization: 4,
            dl_snr_db: [-10.0, 20.0],
            validation_fraction: 0.25,
            train: AgentTrainConfig::default(),
            seed: 1,
        }
    }
}

impl AgentPhaseConfig {
    pub fn links(&self) -> Vec<(LinkConfig, LinkModels)> {
        let num = self.scale.numerology();
        self.candidates.iter().map(|c| (LinkConfig::baseline(num, c.qam_bits, c.layers), LinkModels::default())).collect()
    }

    /// Channel seeds of the labelled realizations, disjoint from the
    /// evaluation trial seeds.
    pub fn channel_seeds(&self) -> Vec<u64> {
        (0..self.realizations as u64).map(|i| derive_seed(self.seed, stream::AGENT, 1 + i)).collect()
    }
}

/// Outcome of [`run_agent_phase`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPhaseReport {
    pub candidates: Vec<String>,
    pub train_rows: usize,
    pub validation_rows: usize,
    /// Label counts per candidate over the whole dataset.
    pub label_counts: Vec<usize>,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
}

/// Labels realizations with the genie-best candidate and fits the agent.
pub fn run_agent_phase(cfg: &AgentPhaseConfig) -> Result<(AgentModel, AgentDataset, AgentPhaseReport), AgentError> {
    if !(0.0..1.0).contains(&cfg.validation_fraction) || cfg.realizations < 2 {
        return Err(AgentError::Dataset("need at least two realizations and a validation fraction in [0, 1)".into()));
    }
    let links = cfg.links();
    if links.len() < 2 {
        return Err(AgentError::Candidates(links.len()));
    }
    let data = generate_labels(&links, &cfg.channel_seeds(), cfg.dl_snr_db, cfg.trials_per_realization)?;
    let (train, val) = data.split(cfg.validation_fraction);
    let names: Vec<String> = links.iter().map(|(c, _)| c.name.clone()).collect();
    let mut agent = AgentModel::new(feature_layers(&links), names.clone(), cfg.seed)?;
    let val_ref = if val.is_empty() { &train } else { &val };
    let epoch_losses = agent.train(&train, val_ref, &cfg.train)?;
    let mut label_counts = vec![0; names.len()];
    for &l in &data.labels {
        label_counts[l] += 1;
    }
    let report = AgentPhaseReport {
        candidates: names,
        train_rows: train.len(),
        validation_rows: val.len(),
        label_counts,
        epoch_losses,
        train_accuracy: agent.train_accuracy,
        validation_accuracy: agent.validation_accuracy,
    };
    Ok((agent, data, report))
}

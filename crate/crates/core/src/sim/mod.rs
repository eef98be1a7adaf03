//! Monte-Carlo link evaluation: single slots, BLER/goodput sweeps, genie
//! link adaptation and the scenario presets.

mod link;
mod preset;

pub use link::{
    baseline_budget, effective_channels, feedback_precoder, mean_sinr_db, reference_sinr_db, run_trial, run_trial_on, trial_channels,
    CsiScheme, LinkConfig, LinkModels, ModulationScheme, PrecodingScheme, TrialOutcome, CODEC_FILE, DL_CODE_RATE, MODEM_FILE,
};
pub use preset::{scenario_preset, Scale};

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::ChannelError;
use crate::csi::CsiError;
use crate::detection::DetectionError;
use crate::ldpc::LdpcError;
use crate::modulation::ModulationError;
use crate::precoding::PrecodingError;
use crate::rng::{derive_seed, stream};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing model files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingModels(Vec<PathBuf>),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Csi(#[from] CsiError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Ldpc(#[from] LdpcError),
    #[error(transparent)]
    Modulation(#[from] ModulationError),
    #[error(transparent)]
    Precoding(#[from] PrecodingError),
}

impl SimError {
    /// Whether the error is a configuration problem rather than a numerical
    /// failure during simulation.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_) | Self::MissingModels(_))
    }
}

/// Smallest trial count a sweep accepts.
pub const MIN_SWEEP_TRIALS: usize = 100;

/// z-score of a two-sided 95% normal interval.
const Z95: f64 = 1.959_963_984_540_054;

/// Seed of trial `t`: shared by every configuration and SNR point so
/// comparisons see the same channels.
pub fn trial_seed(root: u64, t: usize) -> u64 {
    derive_seed(root, stream::EVAL, t as u64)
}

/// Aggregate of one configuration at one SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub trials: usize,
    pub block_errors: usize,
    pub bler: f64,
    /// Mean delivered information bits per RE.
    pub goodput: f64,
    /// Half-width of the 95% normal-approximation interval on BLER.
    pub ci_half_width: f64,
}

impl PointResult {
    fn from_counts(trials: usize, block_errors: usize, info_bits_per_re: f64) -> Self {
        let bler = block_errors as f64 / trials.max(1) as f64;
        Self {
            trials,
            block_errors,
            bler,
            goodput: info_bits_per_re * (1.0 - bler),
            ci_half_width: Z95 * (bler * (1.0 - bler) / trials.max(1) as f64).sqrt(),
        }
    }
}

/// BLER and goodput of `config` at one downlink SNR over `trials` trials.
pub fn evaluate_point(config: &LinkConfig, models: &LinkModels, dl_snr_db: f64, trials: usize, seed: u64) -> Result<PointResult, SimError> {
    config.validate(models)?;
    let errors = (0..trials)
        .into_par_iter()
        .map(|t| run_trial(config, models, dl_snr_db, trial_seed(seed, t)).map(|o| o.block_error as usize))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum();
    Ok(PointResult::from_counts(trials, errors, config.info_bits() as f64 / config.numerology.n_res() as f64))
}

/// One row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config: String,
    /// SHA-256 of the configuration's JSON form.
    pub config_hash: String,
    pub seed: u64,
    pub dl_snr_db: f64,
    pub ul_snr_db: Option<f64>,
    #[serde(flatten)]
    pub point: PointResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Points whose confidence interval is wider than half the BLER change
    /// to the neighbouring SNR point.
    pub warnings: Vec<String>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,config_hash,seed,dl_snr_db,ul_snr_db,trials,block_errors,bler,goodput,ci_half_width\n");
        for r in &self.rows {
            out += &format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.config,
                r.config_hash,
                r.seed,
                r.dl_snr_db,
                r.ul_snr_db.map(|v| v.to_string()).unwrap_or_default(),
                r.point.trials,
                r.point.block_errors,
                r.point.bler,
                r.point.goodput,
                r.point.ci_half_width
            );
        }
        out
    }
}

pub fn config_hash(config: &LinkConfig) -> String {
    let json = serde_json::to_string(config).expect("link configurations always serialize");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `lo:step:hi` (inclusive) or a comma-separated list of dB values.
pub fn parse_snr_grid(spec: &str) -> Result<Vec<f64>, SimError> {
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| SimError::Config(format!("bad SNR value {s:?}")));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() == 3 {
        let (lo, step, hi) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || !(lo <= hi) {
            return Err(SimError::Config(format!("bad SNR range {spec:?}")));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| lo + i as f64 * step).collect());
    }
    spec.split(',').map(num).collect()
}

/// Sweeps every configuration over the SNR grid. All configurations are
/// validated before anything is simulated.
pub fn run_sweep(links: &[(LinkConfig, LinkModels)], snr_grid: &[f64], trials: usize, seed: u64) -> Result<SweepResult, SimError> {
    if trials < MIN_SWEEP_TRIALS {
        return Err(SimError::Config(format!("{trials} trials per point; at least {MIN_SWEEP_TRIALS} required")));
    }
    if snr_grid.is_empty() {
        return Err(SimError::Config("empty SNR grid".into()));
    }
    for (c, m) in links {
        c.validate(m)?;
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (c, m) in links {
        let hash = config_hash(c);
        let mut prev: Option<f64> = None;
        for &snr in snr_grid {
            let point = evaluate_point(c, m, snr, trials, seed)?;
            if let Some(p) = prev {
                let effect = (point.bler - p).abs();
                if effect > 0.0 && point.ci_half_width > 0.5 * effect {
                    warnings.push(format!("{} at {snr} dB: interval ±{:.4} vs BLER change {:.4}", c.name, point.ci_half_width, effect));
                }
            }
            prev = Some(point.bler);
            rows.push(SweepRow { config: c.name.clone(), config_hash: hash.clone(), seed, dl_snr_db: snr, ul_snr_db: c.ul_snr_db, point });
        }
    }
    Ok(SweepResult { rows, warnings })
}

/// Goodput of every candidate on every trial at one SNR, `[trial][candidate]`.
pub fn goodput_matrix(candidates: &[(LinkConfig, LinkModels)], dl_snr_db: f64, trials: usize, seed: u64) -> Result<Vec<Vec<f64>>, SimError> {
    for (c, m) in candidates {
        c.validate(m)?;
    }
    (0..trials)
        .into_par_iter()
        .map(|t| {
            candidates
                .iter()
                .map(|(c, m)| run_trial(c, m, dl_snr_db, trial_seed(seed, t)).map(|o| o.goodput(&c.numerology)))
                .collect()
        })
        .collect()
}

/// Mean goodput per candidate and of the per-trial best candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationPoint {
    pub dl_snr_db: f64,
    pub per_candidate: Vec<f64>,
    pub ideal: f64,
}

/// Genie link adaptation: on each trial the best candidate is chosen with
/// knowledge of every outcome.
pub fn ideal_link_adaptation(
    candidates: &[(LinkConfig, LinkModels)],
    snr_grid: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<AdaptationPoint>, SimError> {
    if candidates.is_empty() {
        return Err(SimError::Config("ideal link adaptation needs at least one candidate".into()));
    }
    snr_grid
        .iter()
        .map(|&snr| {
            let g = goodput_matrix(candidates, snr, trials, seed)?;
            Ok(summarize(snr, &g))
        })
        .collect()
}

/// Means of a `[trial][candidate]` goodput matrix.
pub fn summarize(dl_snr_db: f64, g: &[Vec<f64>]) -> AdaptationPoint {
    let n = g.len().max(1) as f64;
    let j = g.first().map(|r| r.len()).unwrap_or(0);
    let per_candidate = (0..j).map(|c| g.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let ideal = g.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / n;
    AdaptationPoint { dl_snr_db, per_candidate, ideal }
}

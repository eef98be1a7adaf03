//! One downlink slot end to end: CSI feedback round trip, LDPC-coded
//! payload, precoding, channel, detection and decoding.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::channel::{sample_channel, snr_to_noise_variance, transmit, ChannelRealization, Numerology, TdlProfile, DEFAULT_DELAY_SPREAD_S};
use crate::csi::{
    dequantize_feedback, extract_csi, quantized_feedback, uplink_feedback, CsiCodec, CsiMatrix, FeedbackForm, FeedbackPayload,
    QuantizerBits, UplinkScheme, UPLINK_RES,
};
use crate::detection::{kbest_detect, lmmse_equalize, zf_equalize, Detector, DEFAULT_K};
use crate::ldpc::{LdpcCode, DEFAULT_MAX_ITER};
use crate::linalg::CMatrix;
use crate::modulation::{CrossLayerModulator, QamConstellation};
use crate::precoding::{apply_precoding, eigen_precoder, normalize_power, Precoder};
use crate::rng::{derive_seed, derived_rng, random_bits, stream};

/// Floor on the per-layer noise handed to the QAM demapper.
const MIN_DEMAP_NOISE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModulationScheme {
    /// Gray QAM with `bits` bits per layer symbol.
    Qam { bits: usize },
    /// The trained cross-layer modem.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecodingScheme {
    Eigen,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CsiScheme {
    /// Exact eigenvectors at the transmitter.
    Ideal,
    /// Scalar-quantized eigenvectors within `budget` bits.
    Quantized { budget: usize },
    /// Learned codec with a sign-quantized bottleneck.
    LearnedBits,
    /// Learned codec sending symbols straight onto uplink REs.
    LearnedSymbols,
}

impl CsiScheme {
    pub fn is_learned(&self) -> bool {
        matches!(self, Self::LearnedBits | Self::LearnedSymbols)
    }
}

/// One physical-layer link: the modulation, precoding and CSI choices plus
/// everything needed to simulate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub name: String,
    pub numerology: Numerology,
    pub n_layer: usize,
    pub modulation: ModulationScheme,
    pub precoding: PrecodingScheme,
    pub csi: CsiScheme,
    /// Coded bits per RE summed over layers.
    pub payload_bits_per_re: usize,
    pub code_rate: f64,
    pub detector: Detector,
    #[serde(default = "default_k")]
    pub kbest_k: usize,
    /// Fading profile name, or `awgn` for an identity channel.
    pub channel: String,
    #[serde(default = "default_delay_spread")]
    pub delay_spread_s: f64,
    /// Uplink SNR for the feedback; `None` delivers feedback error-free.
    pub ul_snr_db: Option<f64>,
    #[serde(default = "default_ul_rx")]
    pub ul_rx: usize,
    /// Directory holding `modem.json` and/or `codec.json` for learned parts.
    #[serde(default)]
    pub models: Option<PathBuf>,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_delay_spread() -> f64 {
    DEFAULT_DELAY_SPREAD_S
}

fn default_ul_rx() -> usize {
    8
}

/// The standard feedback overhead when it leaves at least two bits per
/// coefficient, otherwise four bits per coefficient.
pub fn baseline_budget(num: &Numerology, n_layer: usize) -> usize {
    let count = num.n_subbands * num.n_tx * n_layer;
    if crate::csi::CSI_BITS / count.max(1) >= 2 {
        crate::csi::CSI_BITS
    } else {
        4 * count
    }
}

/// Supported downlink code rate and block lengths.
pub const DL_CODE_RATE: f64 = 0.5;
const DL_BLOCKS: [usize; 2] = [1344, 672];

impl LinkConfig {
    /// Quantized-CSI, eigen-precoded QAM link with LMMSE detection.
    pub fn baseline(numerology: Numerology, qam_bits: usize, n_layer: usize) -> Self {
        Self {
            name: format!("{}x{n_layer}", crate::modulation::qam_name(qam_bits)),
            numerology,
            n_layer,
            modulation: ModulationScheme::Qam { bits: qam_bits },
            precoding: PrecodingScheme::Eigen,
            csi: CsiScheme::Quantized { budget: baseline_budget(&numerology, n_layer) },
            payload_bits_per_re: qam_bits * n_layer,
            code_rate: DL_CODE_RATE,
            detector: Detector::Lmmse,
            kbest_k: DEFAULT_K,
            channel: "cdl-c".into(),
            delay_spread_s: DEFAULT_DELAY_SPREAD_S,
            ul_snr_db: None,
            ul_rx: default_ul_rx(),
            models: None,
        }
    }

    /// Coded bits per slot.
    pub fn coded_bits(&self) -> usize {
        self.numerology.n_res() * self.payload_bits_per_re
    }

    /// LDPC block length used to segment the slot.
    pub fn block_len(&self) -> Result<usize, SimError> {
        DL_BLOCKS
            .into_iter()
            .find(|n| self.coded_bits() % n == 0)
            .ok_or_else(|| SimError::Config(format!("{}: {} coded bits do not split into LDPC blocks", self.name, self.coded_bits())))
    }

    /// Information bits per slot.
    pub fn info_bits(&self) -> usize {
        (self.coded_bits() as f64 * self.code_rate).round() as usize
    }

    /// Checks everything that can be checked without simulating.
    pub fn validate(&self, models: &LinkModels) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(format!("{}: {m}", self.name)));
        self.numerology.validate()?;
        let num = &self.numerology;
        if self.n_layer == 0 || self.n_layer > num.n_tx.min(num.n_rx) {
            return bad(format!("{} layers on a {}x{} channel", self.n_layer, num.n_rx, num.n_tx));
        }
        if (self.code_rate - DL_CODE_RATE).abs() > 1e-12 {
            return bad(format!("code rate {} unsupported (only {DL_CODE_RATE})", self.code_rate));
        }
        self.block_len()?;
        if self.channel != "awgn" {
            TdlProfile::by_name(&self.channel, self.delay_spread_s)?;
        } else if num.n_rx < num.n_tx {
            return bad("the awgn channel needs at least as many receive as transmit antennas".into());
        }
        if self.kbest_k == 0 {
            return bad("K-Best list size must be positive".into());
        }
        match self.modulation {
            ModulationScheme::Qam { bits } => {
                QamConstellation::<f64>::new(bits).map_err(|e| SimError::Config(format!("{}: {e}", self.name)))?;
                if bits * self.n_layer != self.payload_bits_per_re {
                    return bad(format!("{bits} bits x {} layers != payload {}", self.n_layer, self.payload_bits_per_re));
                }
            }
            ModulationScheme::Learned => {
                let m = models.modem.as_ref().ok_or_else(|| SimError::MissingModels(self.required_files()))?;
                if m.bits_per_re != self.payload_bits_per_re || m.n_layer != self.n_layer {
                    return bad(format!("modem is {} bits x {} layers", m.bits_per_re, m.n_layer));
                }
                if self.detector == Detector::Kbest {
                    return bad("K-Best needs a QAM constellation".into());
                }
            }
        }
        if self.csi.is_learned() != (self.precoding == PrecodingScheme::Learned) {
            return bad("learned precoding goes with learned CSI feedback and only with it".into());
        }
        match self.csi {
            CsiScheme::Ideal => {}
            CsiScheme::Quantized { budget } => {
                let count = num.n_subbands * num.n_tx * self.n_layer;
                let q = QuantizerBits::for_budget(budget, count).map_err(|e| SimError::Config(format!("{}: {e}", self.name)))?;
                if self.ul_snr_db.is_some() && q.per_coefficient() * count != crate::csi::CSI_BITS {
                    return bad(format!("{} feedback bits cannot ride the coded uplink", q.per_coefficient() * count));
                }
            }
            CsiScheme::LearnedBits | CsiScheme::LearnedSymbols => {
                let c = models.codec.as_ref().ok_or_else(|| SimError::MissingModels(self.required_files()))?;
                if c.n_sb != num.n_subbands || c.n_tx != num.n_tx || c.n_layer != self.n_layer {
                    return bad(format!("codec is {} subbands x {} ports x {} layers", c.n_sb, c.n_tx, c.n_layer));
                }
                match (self.csi, c.form) {
                    (CsiScheme::LearnedBits, FeedbackForm::Bits(n)) if self.ul_snr_db.is_none() || n == crate::csi::CSI_BITS => {}
                    (CsiScheme::LearnedSymbols, FeedbackForm::Symbols(n)) if n <= UPLINK_RES => {}
                    _ => return bad(format!("codec feedback form {:?} does not fit", c.form)),
                }
            }
        }
        if self.ul_rx == 0 {
            return bad("uplink needs a receive antenna".into());
        }
        Ok(())
    }

    /// Model files this configuration reads.
    pub fn required_files(&self) -> Vec<PathBuf> {
        let dir = self.models.clone().unwrap_or_else(|| PathBuf::from("."));
        let mut v = Vec::new();
        if self.modulation == ModulationScheme::Learned {
            v.push(dir.join(MODEM_FILE));
        }
        if self.csi.is_learned() {
            v.push(dir.join(CODEC_FILE));
        }
        v
    }
}

pub const MODEM_FILE: &str = "modem.json";
pub const CODEC_FILE: &str = "codec.json";

/// Trained networks a link may use.
#[derive(Debug, Clone, Default)]
pub struct LinkModels {
    pub modem: Option<CrossLayerModulator>,
    pub codec: Option<CsiCodec>,
}

impl LinkModels {
    /// Loads whatever `config` needs from its model directory.
    pub fn load_for(config: &LinkConfig) -> Result<Self, SimError> {
        let missing: Vec<PathBuf> = config.required_files().into_iter().filter(|p| !p.exists()).collect();
        if !missing.is_empty() {
            return Err(SimError::MissingModels(missing));
        }
        let dir = config.models.clone().unwrap_or_else(|| PathBuf::from("."));
        Self::load_dir(&dir, config.modulation == ModulationScheme::Learned, config.csi.is_learned())
    }

    pub fn load_dir(dir: &Path, modem: bool, codec: bool) -> Result<Self, SimError> {
        Ok(Self {
            modem: if modem { Some(CrossLayerModulator::load(&dir.join(MODEM_FILE))?) } else { None },
            codec: if codec { Some(CsiCodec::load(&dir.join(CODEC_FILE))?) } else { None },
        })
    }
}

/// Result of one simulated slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub block_error: bool,
    pub info_bits: usize,
    /// Slot-average post-LMMSE SINR per layer of the link as configured, dB.
    pub sinr_db: Vec<f64>,
}

impl TrialOutcome {
    /// Correctly delivered information bits per RE.
    pub fn goodput(&self, num: &Numerology) -> f64 {
        if self.block_error {
            0.0
        } else {
            self.info_bits as f64 / num.n_res() as f64
        }
    }
}

/// Channel realizations of one trial, shared by every candidate link so
/// comparisons use common random numbers.
pub fn trial_channels(config: &LinkConfig, trial_seed: u64) -> Result<(ChannelRealization, Option<ChannelRealization>), SimError> {
    let num = &config.numerology;
    let dl = if config.channel == "awgn" {
        let h = CMatrix::from_fn(num.n_rx, num.n_tx, |i, j| if i == j { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) });
        ChannelRealization::constant(*num, h, 0.0)?
    } else {
        let profile = TdlProfile::by_name(&config.channel, config.delay_spread_s)?;
        sample_channel(&profile, num, derive_seed(trial_seed, stream::CHANNEL_DL, 0))?
    };
    let ul = match config.ul_snr_db {
        Some(snr) => {
            let profile = if config.channel == "awgn" { TdlProfile::flat() } else { TdlProfile::by_name(&config.channel, config.delay_spread_s)? };
            let ul = sample_channel(&profile, &Numerology::uplink(config.ul_rx), derive_seed(trial_seed, stream::CHANNEL_UL, 0))?;
            Some(ul.with_noise_variance(snr_to_noise_variance(snr, 1.0)))
        }
        None => None,
    };
    Ok((dl, ul))
}

fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        snr_to_noise_variance(snr_db, 1.0)
    }
}

/// Precoder the transmitter ends up with after the feedback round trip.
pub fn feedback_precoder(
    config: &LinkConfig,
    models: &LinkModels,
    w: &CsiMatrix,
    ul: Option<&ChannelRealization>,
    seed: u64,
) -> Result<Precoder, SimError> {
    let num = &config.numerology;
    let carry = |payload: FeedbackPayload, scheme: UplinkScheme| -> Result<FeedbackPayload, SimError> {
        match ul {
            Some(ul) => Ok(uplink_feedback(&payload, ul, scheme, seed)?),
            None => Ok(payload),
        }
    };
    Ok(match config.csi {
        CsiScheme::Ideal => eigen_precoder(w),
        CsiScheme::Quantized { budget } => {
            let (bits, recon) = quantized_feedback(w, budget)?;
            if ul.is_some() {
                let FeedbackPayload::Bits(rx) = carry(FeedbackPayload::Bits(bits), UplinkScheme::RATE_HALF_16QAM)? else {
                    unreachable!("coded uplink returns bits")
                };
                eigen_precoder(&dequantize_feedback(&rx, num.n_subbands, num.n_tx, config.n_layer, budget)?)
            } else {
                eigen_precoder(&recon)
            }
        }
        CsiScheme::LearnedBits | CsiScheme::LearnedSymbols => {
            let codec = models.codec.as_ref().ok_or_else(|| SimError::MissingModels(config.required_files()))?;
            let payload = codec.encode(w)?;
            let scheme = if config.csi == CsiScheme::LearnedBits { UplinkScheme::RATE_HALF_16QAM } else { UplinkScheme::Symbols };
            codec.decode(&carry(payload, scheme)?)?
        }
    })
}

/// Effective per-RE channels `H P_k / alpha` for a unit-power slot.
pub fn effective_channels(h: &ChannelRealization, p: &Precoder, alpha: f64) -> Vec<CMatrix<f64>> {
    let num = &h.numerology;
    let per_sb: Vec<CMatrix<f64>> = p.per_subband.iter().map(|pk| pk.scale_real(1.0 / alpha)).collect();
    (0..num.n_res())
        .map(|i| {
            let k = num.subband_of(i / num.n_symbols);
            h.re(i).matmul(&per_sb[k]).expect("precoder rows match transmit ports")
        })
        .collect()
}

/// Slot-average LMMSE SINR per layer in dB for effective channels `heq`.
pub fn mean_sinr_db(heq: &[CMatrix<f64>], sigma2: f64) -> Result<Vec<f64>, SimError> {
    let l = heq.first().map(|m| m.cols()).unwrap_or(0);
    let mut acc = vec![0.0; l];
    let zero = vec![Complex64::new(0.0, 0.0); heq.first().map(|m| m.rows()).unwrap_or(0)];
    for g in heq {
        let eq = lmmse_equalize(g, &zero, sigma2)?;
        for (a, s) in acc.iter_mut().zip(&eq.post_sinr) {
            *a += s;
        }
    }
    Ok(acc.into_iter().map(|s| 10.0 * (s / heq.len().max(1) as f64).log10()).collect())
}

/// Per-layer SINR (dB) of the ideal-CSI eigen precoder with equal power
/// per layer: a scheme-independent description of a realization.
pub fn reference_sinr_db(h: &ChannelRealization, n_layer: usize, sigma2: f64) -> Result<Vec<f64>, SimError> {
    let p = eigen_precoder(&extract_csi(h, n_layer)?);
    let heq = effective_channels(h, &p, (n_layer as f64).sqrt());
    mean_sinr_db(&heq, sigma2)
}

/// Simulates one slot of `config` at `dl_snr_db` (`+inf` for a noiseless
/// downlink). All randomness derives from `trial_seed`.
pub fn run_trial(config: &LinkConfig, models: &LinkModels, dl_snr_db: f64, trial_seed: u64) -> Result<TrialOutcome, SimError> {
    let (dl, ul) = trial_channels(config, trial_seed)?;
    run_trial_on(config, models, &dl, ul.as_ref(), dl_snr_db, trial_seed)
}

/// As [`run_trial`] on given channel realizations.
pub fn run_trial_on(
    config: &LinkConfig,
    models: &LinkModels,
    dl: &ChannelRealization,
    ul: Option<&ChannelRealization>,
    dl_snr_db: f64,
    trial_seed: u64,
) -> Result<TrialOutcome, SimError> {
    let num = &config.numerology;
    let l = config.n_layer;
    let sigma2 = noise_variance(dl_snr_db);
    let dl = dl.clone().with_noise_variance(sigma2);

    let w = extract_csi(&dl, l)?;
    let p = feedback_precoder(config, models, &w, ul, derive_seed(trial_seed, stream::NOISE_UL, 0))?;

    let block = config.block_len()?;
    let code: Arc<LdpcCode> = LdpcCode::standard(block, (block as f64 * config.code_rate).round() as usize)?;
    let n_blocks = config.coded_bits() / block;
    let info = random_bits(&mut derived_rng(trial_seed, stream::BITS, 0), n_blocks * code.k());
    let mut coded = Vec::with_capacity(config.coded_bits());
    for chunk in info.chunks(code.k()) {
        coded.extend(code.encode(chunk)?);
    }

    let qam = match config.modulation {
        ModulationScheme::Qam { bits } => Some(QamConstellation::<f64>::new(bits)?),
        ModulationScheme::Learned => None,
    };
    let s = match &qam {
        Some(q) => q.modulate(&coded)?,
        None => models.modem.as_ref().ok_or_else(|| SimError::MissingModels(config.required_files()))?.modulate(&coded)?,
    };
    let x = apply_precoding(&p, &s, num)?;
    let alpha = x.mean_re_power().sqrt();
    let x = normalize_power(&x)?;
    let y = transmit(&dl, &x, derive_seed(trial_seed, stream::NOISE_DL, 0))?;
    let heq = effective_channels(&dl, &p, alpha);

    let mut llr = Vec::with_capacity(coded.len());
    let mut x_hat = Vec::with_capacity(num.n_res() * l);
    let mut sinr_acc = vec![0.0; l];
    for (i, g) in heq.iter().enumerate() {
        let yi = y.re(i);
        match (config.detector, &qam) {
            (Detector::Kbest, Some(q)) => {
                let out = kbest_detect(g, yi, q, config.kbest_k, sigma2)?;
                llr.extend(out.llrs);
                let eq = lmmse_equalize(g, yi, sigma2)?;
                sinr_acc.iter_mut().zip(&eq.post_sinr).for_each(|(a, s)| *a += s);
            }
            (det, _) => {
                let eq = if det == Detector::Zf { zf_equalize(g, yi, sigma2)? } else { lmmse_equalize(g, yi, sigma2)? };
                if det == Detector::Lmmse {
                    sinr_acc.iter_mut().zip(&eq.post_sinr).for_each(|(a, s)| *a += s);
                } else {
                    let lm = lmmse_equalize(g, yi, sigma2)?;
                    sinr_acc.iter_mut().zip(&lm.post_sinr).for_each(|(a, s)| *a += s);
                }
                match &qam {
                    Some(q) => {
                        for (li, z) in eq.x_hat.iter().enumerate() {
                            llr.extend(q.demap_max_log(*z, eq.gain[li], eq.effective_noise(li).max(MIN_DEMAP_NOISE)));
                        }
                    }
                    None => x_hat.extend_from_slice(&eq.x_hat),
                }
            }
        }
    }
    if qam.is_none() {
        llr = models.modem.as_ref().ok_or_else(|| SimError::MissingModels(config.required_files()))?.demodulate(&x_hat)?;
    }

    let mut block_error = false;
    for (b, chunk) in llr.chunks(block).enumerate() {
        let dec = code.decode(chunk, DEFAULT_MAX_ITER)?;
        if dec.info[..] != info[b * code.k()..(b + 1) * code.k()] {
            block_error = true;
            break;
        }
    }
    let n_res = num.n_res() as f64;
    Ok(TrialOutcome {
        block_error,
        info_bits: info.len(),
        sinr_db: sinr_acc.into_iter().map(|s| 10.0 * (s / n_res).log10()).collect(),
    })
}

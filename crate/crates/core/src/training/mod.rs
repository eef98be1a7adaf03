//! Joint training of the CSI codec and the cross-layer modem through the
//! differentiable downlink, in two phases: a weighted BCE/SGCS objective,
//! then pure BCE.

mod chain;

pub use chain::{cadjoint, downlink_on_tape, precoder_gather_index, sgcs_on_tape, ChainInputs};

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{write_cmatrix, Adam, AutodiffError, Graph, Mode, Tape, Tensor, Var};
use crate::channel::{sample_channel, snr_to_noise_variance, ChannelError, Numerology, TdlProfile, DEFAULT_DELAY_SPREAD_S};
use crate::csi::{csi_to_tensor, extract_csi, sgcs, CodecDims, CsiCodec, CsiError, CsiMatrix, FeedbackForm, CSI_BITS};
use crate::modulation::{bits_to_input, CrossLayerModulator, ModemDims, ModulationError};
use crate::precoding::Precoder;
use crate::rng::{complex_gaussian, derive_seed, derived_rng, random_bits, stream};
use crate::sim::{evaluate_point, LinkConfig, LinkModels, PointResult, SimError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("loss became non-finite in phase {phase} at step {step}")]
    Diverged { phase: u8, step: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Csi(#[from] CsiError),
    #[error(transparent)]
    Modulation(#[from] ModulationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub phase1: f64,
    pub phase2: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self { phase1: 0.5, phase2: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub numerology: Numerology,
    pub n_layer: usize,
    pub bits_per_re: usize,
    pub feedback: FeedbackForm,
    pub modem_dims: ModemDims,
    pub codec_dims: CodecDims,
    pub channel: String,
    pub delay_spread_s: f64,
    /// Trials per step.
    pub batch: usize,
    pub steps_phase1: usize,
    pub steps_phase2: usize,
    pub lambda: LambdaSchedule,
    /// Downlink SNR drawn uniformly from this range per trial, dB.
    pub dl_snr_db: [f64; 2],
    /// Uplink SNR range for symbol-form feedback, dB.
    pub ul_snr_db: [f64; 2],
    pub ul_rx: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Trials in the fixed validation batch behind the reported BCE/SGCS.
    pub validation_trials: usize,
    /// Stop a phase when the smoothed loss has not improved for this many
    /// steps.
    pub plateau_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            numerology: Numerology::desk(),
            n_layer: 2,
            bits_per_re: 4,
            feedback: FeedbackForm::Bits(CSI_BITS),
            modem_dims: ModemDims::DESK,
            codec_dims: CodecDims::DESK,
            channel: "cdl-c".into(),
            delay_spread_s: DEFAULT_DELAY_SPREAD_S,
            batch: 64,
            steps_phase1: 20_000,
            steps_phase2: 20_000,
            lambda: LambdaSchedule::default(),
            dl_snr_db: [-4.0, 16.0],
            ul_snr_db: [-20.0, 0.0],
            ul_rx: 8,
            learning_rate: 1e-3,
            seed: 1,
            validation_trials: 16,
            plateau_steps: 2_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.numerology.validate()?;
        for (name, l) in [("phase1", self.lambda.phase1), ("phase2", self.lambda.phase2)] {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("lambda.{name} = {l} outside [0, 1]"));
            }
        }
        for (name, r) in [("dl_snr_db", self.dl_snr_db), ("ul_snr_db", self.ul_snr_db)] {
            if !(r[0] <= r[1]) {
                return bad(format!("{name} range {r:?} is empty"));
            }
        }
        if self.n_layer == 0 || self.n_layer > self.numerology.n_tx.min(self.numerology.n_rx) {
            return bad(format!("{} layers on {}x{}", self.n_layer, self.numerology.n_rx, self.numerology.n_tx));
        }
        if self.bits_per_re == 0 || self.batch == 0 || self.validation_trials == 0 || self.ul_rx == 0 {
            return bad("bits_per_re, batch, validation_trials and ul_rx must be positive".into());
        }
        if let FeedbackForm::Symbols(n) = self.feedback {
            if n > crate::csi::UPLINK_RES {
                return bad(format!("{n} feedback symbols exceed {} uplink REs", crate::csi::UPLINK_RES));
            }
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive".into());
        }
        TdlProfile::by_name(&self.channel, self.delay_spread_s)?;
        Ok(())
    }
}

/// Combined objective and its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub loss: f64,
    /// Natural-log binary cross-entropy per bit.
    pub bce: f64,
    pub sgcs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub bce: f64,
    pub sgcs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: u8,
    pub lambda: f64,
    pub seed: u64,
    pub steps_run: usize,
    pub early_stopped: bool,
    pub trace: Vec<StepRecord>,
    /// Validation-batch losses before the first and after the last step.
    pub initial: LossParts,
    #[serde(rename = "final")]
    pub final_: LossParts,
    pub wall_clock_s: f64,
}

impl PhaseReport {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,loss,bce,sgcs\n");
        for r in &self.trace {
            out += &format!("{},{},{},{}\n", r.step, r.loss, r.bce, r.sgcs);
        }
        out
    }
}

/// `lambda * BCE(c, llr) - (1 - lambda) * SGCS(w, p)` with BCE in nats per
/// bit and LLRs positive for bit 0.
pub fn loss_combined(bits: &[u8], llrs: &[f64], w: &CsiMatrix, p: &Precoder, lambda: f64) -> Result<f64, TrainError> {
    if bits.len() != llrs.len() {
        return Err(TrainError::Config(format!("{} bits, {} LLRs", bits.len(), llrs.len())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TrainError::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(lambda * bce_nats(bits, llrs) - (1.0 - lambda) * sgcs(w, p)?)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy in nats; an empty input scores zero.
pub fn bce_nats(bits: &[u8], llrs: &[f64]) -> f64 {
    if bits.is_empty() {
        return 0.0;
    }
    let s: f64 = bits.iter().zip(llrs).map(|(&c, &l)| if c & 1 == 1 { softplus(l) } else { softplus(-l) }).sum();
    s / bits.len() as f64
}

/// One sampled training trial.
struct Trial {
    h: Vec<f64>,
    noise: Vec<f64>,
    sigma2: f64,
    w: CsiMatrix,
    ul_noise: Vec<f64>,
    bits: Vec<u8>,
}

fn sample_trial(cfg: &TrainConfig, profile: &TdlProfile, root: u64, index: u64) -> Result<Trial, TrainError> {
    let num = &cfg.numerology;
    let res = num.n_res();
    let ch = sample_channel(profile, num, derive_seed(root, stream::CHANNEL_DL, index))?;
    let w = extract_csi(&ch, cfg.n_layer)?;
    let mut snr_rng = derived_rng(root, stream::SNR, index);
    let dl_snr = snr_rng.random_range(cfg.dl_snr_db[0]..=cfg.dl_snr_db[1]);
    let ul_snr = snr_rng.random_range(cfg.ul_snr_db[0]..=cfg.ul_snr_db[1]);
    let sigma2 = snr_to_noise_variance(dl_snr, 1.0);

    let mut h = vec![0.0; res * num.n_rx * num.n_tx * 2];
    for (i, chunk) in h.chunks_mut(num.n_rx * num.n_tx * 2).enumerate() {
        write_cmatrix(ch.re(i), chunk);
    }
    let mut nrng = derived_rng(root, stream::NOISE_DL, index);
    let noise = (0..res * num.n_rx).flat_map(|_| {
        let z = complex_gaussian(&mut nrng, sigma2);
        [z.re, z.im]
    });
    let noise = noise.collect();

    let ul_noise = match cfg.feedback {
        FeedbackForm::Symbols(n) => {
            let ul = sample_channel(profile, &Numerology::uplink(cfg.ul_rx), derive_seed(root, stream::CHANNEL_UL, index))?;
            let s2 = snr_to_noise_variance(ul_snr, 1.0);
            let mut urng = derived_rng(root, stream::NOISE_UL, index);
            (0..n)
                .flat_map(|i| {
                    let g: f64 = ul.re(i).as_slice().iter().map(|z| z.norm_sqr()).sum();
                    let z = if g > 0.0 { complex_gaussian(&mut urng, s2 / g) } else { Complex64::new(0.0, 0.0) };
                    [z.re, z.im]
                })
                .collect()
        }
        FeedbackForm::Bits(_) => Vec::new(),
    };
    let bits = random_bits(&mut derived_rng(root, stream::BITS, index), res * cfg.bits_per_re);
    Ok(Trial { h, noise, sigma2, w, ul_noise, bits })
}

/// A batch of trials in tensor form.
struct Batch {
    csi: Tensor,
    w_flat: Vec<f64>,
    chain: ChainInputs,
    ul_noise: Option<Tensor>,
    bits: Arc<[u8]>,
}

fn build_batch(cfg: &TrainConfig, profile: &TdlProfile, root: u64, first: u64, n: usize) -> Result<Batch, TrainError> {
    let trials: Vec<Trial> =
        (0..n as u64).into_par_iter().map(|i| sample_trial(cfg, profile, root, first + i)).collect::<Result<_, _>>()?;
    let num = &cfg.numerology;
    let res = num.n_res();
    let ws: Vec<CsiMatrix> = trials.iter().map(|t| t.w.clone()).collect();
    let csi = csi_to_tensor(&ws)?;
    let w_flat = csi.data().to_vec();
    let h = Tensor::new(vec![n * res, num.n_rx, num.n_tx, 2], trials.iter().flat_map(|t| t.h.iter().copied()).collect())?;
    let noise = Tensor::new(vec![n * res, num.n_rx, 1, 2], trials.iter().flat_map(|t| t.noise.iter().copied()).collect())?;
    let ul_noise = match cfg.feedback {
        FeedbackForm::Symbols(_) => Some(Tensor::new(
            vec![n, cfg.feedback.width()],
            trials.iter().flat_map(|t| t.ul_noise.iter().copied()).collect(),
        )?),
        FeedbackForm::Bits(_) => None,
    };
    let bits: Arc<[u8]> = trials.iter().flat_map(|t| t.bits.iter().copied()).collect();
    let chain = ChainInputs {
        trials: n,
        res,
        n_rx: num.n_rx,
        n_tx: num.n_tx,
        n_layer: cfg.n_layer,
        h,
        noise,
        sigma2: trials.iter().map(|t| t.sigma2).collect(),
    };
    Ok(Batch { csi, w_flat, chain, ul_noise, bits })
}

struct Forward {
    loss: Var,
    parts: LossParts,
    params: [Vec<Var>; 4],
}

/// Serializable optimizer and progress state.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerState {
    config: TrainConfig,
    optimizers: [Adam; 4],
    reports: Vec<PhaseReport>,
}

/// Models, optimizers and phase history of one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub modem: CrossLayerModulator,
    pub codec: CsiCodec,
    /// Encoder, decoder, modulator, demodulator.
    optimizers: [Adam; 4],
    pub reports: Vec<PhaseReport>,
    profile: TdlProfile,
    gather: Arc<[usize]>,
    gather_val: Arc<[usize]>,
}

const SMOOTHING_WINDOW: usize = 50;
const MODEM_FILE: &str = "modem.json";
const CODEC_FILE: &str = "codec.json";
/// Optimizer state and phase history inside a checkpoint directory.
pub const STATE_FILE: &str = "trainer.json";

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let num = config.numerology;
        let modem = CrossLayerModulator::new(
            config.bits_per_re,
            config.n_layer,
            config.modem_dims,
            derive_seed(config.seed, stream::INIT, 0),
        );
        let codec = CsiCodec::new(
            num.n_subbands,
            num.n_tx,
            config.n_layer,
            config.feedback,
            config.codec_dims,
            derive_seed(config.seed, stream::INIT, 1),
        );
        let lr = config.learning_rate;
        Self::assemble(config, modem, codec, std::array::from_fn(|_| Adam::new(lr)), Vec::new())
    }

    fn assemble(
        config: TrainConfig,
        modem: CrossLayerModulator,
        codec: CsiCodec,
        optimizers: [Adam; 4],
        reports: Vec<PhaseReport>,
    ) -> Result<Self, TrainError> {
        let profile = TdlProfile::by_name(&config.channel, config.delay_spread_s)?;
        let gather = precoder_gather_index(&config.numerology, config.n_layer, config.batch);
        let gather_val = precoder_gather_index(&config.numerology, config.n_layer, config.validation_trials);
        Ok(Self { config, modem, codec, optimizers, reports, profile, gather, gather_val })
    }

    fn graphs_mut(&mut self) -> [&mut Graph; 4] {
        [&mut self.codec.encoder, &mut self.codec.decoder, &mut self.modem.modulator, &mut self.modem.demodulator]
    }

    fn set_mode(&mut self, mode: Mode) {
        for g in self.graphs_mut() {
            g.set_mode(mode);
        }
    }

    fn forward(&mut self, tape: &mut Tape, batch: &Batch, lambda: f64, gather: Arc<[usize]>) -> Result<Forward, TrainError> {
        let (nt, l) = (self.config.numerology.n_tx, self.config.n_layer);
        let rows = batch.chain.rows();

        let csi = tape.input(batch.csi.clone());
        let (code, p_enc) = self.codec.encoder.forward_on(tape, csi)?;
        let rx = match &batch.ul_noise {
            Some(n) => {
                let n = tape.constant(n.clone());
                tape.add(code, n)?
            }
            None => code,
        };
        let (dec, p_dec) = self.codec.decoder.forward_on(tape, rx)?;
        let rho = sgcs_on_tape(tape, dec, &batch.w_flat)?;
        let pre = tape.gather(dec, vec![rows, nt, l, 2], gather, None)?;

        let bits_in = tape.input(bits_to_input(&batch.bits, self.config.bits_per_re)?);
        let (s, p_mod) = self.modem.modulator.forward_on(tape, bits_in)?;
        let s = tape.reshape(s, vec![rows, l, 1, 2])?;
        let x_hat = downlink_on_tape(tape, s, pre, &batch.chain)?;
        let (llr, p_demod) = self.modem.demodulator.forward_on(tape, x_hat)?;
        let bce = tape.bce_logits(llr, batch.bits.clone())?;

        let a = tape.scale(bce, lambda);
        let b = tape.scale(rho, 1.0 - lambda);
        let loss = tape.sub(a, b)?;
        let parts = LossParts {
            loss: tape.value(loss).data()[0],
            bce: tape.value(bce).data()[0],
            sgcs: tape.value(rho).data()[0],
        };
        Ok(Forward { loss, parts, params: [p_enc, p_dec, p_mod, p_demod] })
    }

    fn validation_batch(&self) -> Result<Batch, TrainError> {
        let root = derive_seed(self.config.seed, stream::EVAL, 0);
        build_batch(&self.config, &self.profile, root, 0, self.config.validation_trials)
    }

    /// Loss terms on the fixed validation batch with inference-mode
    /// normalization statistics.
    pub fn validate(&mut self, lambda: f64) -> Result<LossParts, TrainError> {
        let batch = self.validation_batch()?;
        self.modem.calibrate()?;
        self.set_mode(Mode::Infer);
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &batch, lambda, self.gather_val.clone());
        self.set_mode(Mode::Train);
        Ok(out?.parts)
    }

    /// One optimizer step on the batch drawn for `(phase, step)`.
    fn step(&mut self, phase: u8, step: usize, lambda: f64) -> Result<LossParts, TrainError> {
        let b = self.config.batch;
        let batch = build_batch(&self.config, &self.profile, self.config.seed, (step * b) as u64, b)?;
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &batch, lambda, self.gather.clone())?;
        if !fwd.parts.loss.is_finite() {
            return Err(TrainError::Diverged { phase, step });
        }
        let mut grads = tape.backward(fwd.loss)?;
        let grads: Vec<Vec<Tensor>> = fwd
            .params
            .iter()
            .map(|vs| vs.iter().map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)))).collect())
            .collect();
        let graphs = [&mut self.codec.encoder, &mut self.codec.decoder, &mut self.modem.modulator, &mut self.modem.demodulator];
        for ((g, opt), gr) in graphs.into_iter().zip(self.optimizers.iter_mut()).zip(&grads) {
            g.apply_gradients(opt, gr).map_err(|e| match e {
                AutodiffError::NonFiniteGradient(_) => TrainError::Diverged { phase, step },
                other => other.into(),
            })?;
        }
        Ok(fwd.parts)
    }

    /// Runs `steps` updates at weight `lambda`. Batches are indexed by the
    /// step within the phase, so a phase's data does not depend on what ran
    /// before it.
    pub fn train_phase(&mut self, phase: u8, lambda: f64, steps: usize) -> Result<PhaseReport, TrainError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(TrainError::Config(format!("lambda {lambda} outside [0, 1]")));
        }
        let start = Instant::now();
        self.set_mode(Mode::Train);
        let initial = self.validate(lambda)?;
        let mut trace = Vec::with_capacity(steps);
        let mut best = f64::INFINITY;
        let mut best_step = 0;
        let mut early_stopped = false;
        for step in 0..steps {
            let p = self.step(phase, step, lambda)?;
            trace.push(StepRecord { step, loss: p.loss, bce: p.bce, sgcs: p.sgcs });
            if trace.len() >= SMOOTHING_WINDOW {
                let avg = trace[trace.len() - SMOOTHING_WINDOW..].iter().map(|r| r.loss).sum::<f64>() / SMOOTHING_WINDOW as f64;
                if avg < best {
                    best = avg;
                    best_step = step;
                } else if self.config.plateau_steps > 0 && step - best_step >= self.config.plateau_steps {
                    early_stopped = true;
                    break;
                }
            }
        }
        self.modem.calibrate()?;
        let final_ = self.validate(lambda)?;
        let report = PhaseReport {
            phase,
            lambda,
            seed: self.config.seed,
            steps_run: trace.len(),
            early_stopped,
            trace,
            initial,
            final_,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        self.reports.push(report.clone());
        Ok(report)
    }

    /// Joint pre-convergence at `lambda.phase1`.
    pub fn train_phase1(&mut self) -> Result<PhaseReport, TrainError> {
        self.train_phase(1, self.config.lambda.phase1, self.config.steps_phase1)
    }

    /// Continuation at `lambda.phase2`, keeping the optimizer state.
    pub fn train_phase2(&mut self) -> Result<PhaseReport, TrainError> {
        self.train_phase(2, self.config.lambda.phase2, self.config.steps_phase2)
    }

    pub fn models(&self) -> LinkModels {
        LinkModels { modem: Some(self.modem.clone()), codec: Some(self.codec.clone()) }
    }

    /// All trainable parameters, flattened in a fixed order.
    pub fn parameter_vector(&self) -> Vec<f64> {
        [&self.codec.encoder, &self.codec.decoder, &self.modem.modulator, &self.modem.demodulator]
            .iter()
            .flat_map(|g| g.params().into_iter().flat_map(|t| t.data().to_vec()))
            .collect()
    }

    /// Writes models, optimizer state and reports into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        self.modem.save(&dir.join(MODEM_FILE))?;
        self.codec.save(&dir.join(CODEC_FILE))?;
        let state = TrainerState { config: self.config.clone(), optimizers: self.optimizers.clone(), reports: self.reports.clone() };
        fs::write(dir.join(STATE_FILE), serde_json::to_string(&state)?)?;
        Ok(())
    }

    /// Resumes from a directory written by [`Trainer::save`].
    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let state: TrainerState = serde_json::from_str(&fs::read_to_string(dir.join(STATE_FILE))?)?;
        let modem = CrossLayerModulator::load(&dir.join(MODEM_FILE))?;
        let codec = CsiCodec::load(&dir.join(CODEC_FILE))?;
        Self::assemble(state.config, modem, codec, state.optimizers, state.reports)
    }
}

/// Block error rate and goodput of `config` at one downlink SNR, over
/// `trials` independent trials.
pub fn evaluate_end_to_end(
    config: &LinkConfig,
    models: &LinkModels,
    dl_snr_db: f64,
    trials: usize,
    seed: u64,
) -> Result<PointResult, SimError> {
    evaluate_point(config, models, dl_snr_db, trials, seed)
}

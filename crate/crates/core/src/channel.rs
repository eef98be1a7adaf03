//! Block-fading tapped-delay-line MIMO channel on the OFDM grid.
//!
//! Each tap carries a Kronecker-correlated complex Gaussian gain matrix
//! `sqrt(p_l) * L_rx W L_tx^T` (exponential correlation, `W` i.i.d.
//! CN(0,1)). The frequency response at subcarrier `f` is
//! `H(f) = sum_l G_l exp(-j 2 pi f df tau_l)`, held constant over the slot.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::CMatrix;
use crate::rng::{complex_gaussian, rng_from_seed};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid numerology: {0}")]
    Numerology(String),
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("grid shape mismatch: {0}")]
    Shape(String),
    #[error("profile file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Numerology {
    pub n_subcarriers: usize,
    pub n_symbols: usize,
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_subbands: usize,
    pub subcarrier_spacing_hz: f64,
}

impl Numerology {
    /// Desk-scale downlink used for training and acceptance runs.
    pub fn desk() -> Self {
        Self { n_subcarriers: 24, n_symbols: 14, n_tx: 8, n_rx: 2, n_subbands: 3, subcarrier_spacing_hz: 30e3 }
    }

    /// Full-size downlink: 144 subcarriers at 15 kHz, 32x4 antennas.
    pub fn paper() -> Self {
        Self { n_subcarriers: 144, n_symbols: 14, n_tx: 32, n_rx: 4, n_subbands: 3, subcarrier_spacing_hz: 15e3 }
    }

    /// Uplink feedback grid: 96 REs on one symbol, single-antenna UE.
    pub fn uplink(n_rx: usize) -> Self {
        Self { n_subcarriers: 96, n_symbols: 1, n_tx: 1, n_rx, n_subbands: 1, subcarrier_spacing_hz: 30e3 }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let dims = [self.n_subcarriers, self.n_symbols, self.n_tx, self.n_rx, self.n_subbands];
        if dims.contains(&0) {
            return Err(ChannelError::Numerology(format!("zero dimension in {self:?}")));
        }
        if self.n_subcarriers % self.n_subbands != 0 {
            return Err(ChannelError::Numerology(format!(
                "{} subcarriers do not split into {} subbands",
                self.n_subcarriers, self.n_subbands
            )));
        }
        if !(self.subcarrier_spacing_hz > 0.0) {
            return Err(ChannelError::Numerology("subcarrier spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn n_res(&self) -> usize {
        self.n_subcarriers * self.n_symbols
    }

    pub fn subband_width(&self) -> usize {
        self.n_subcarriers / self.n_subbands
    }

    pub fn subband_of(&self, subcarrier: usize) -> usize {
        subcarrier / self.subband_width()
    }

    /// Flat RE index, subcarrier-major.
    pub fn re_index(&self, subcarrier: usize, symbol: usize) -> usize {
        subcarrier * self.n_symbols + symbol
    }
}

/// On-disk profile description (normalized delays, powers in dB).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProfileFile {
    name: String,
    normalized_delays: Vec<f64>,
    powers_db: Vec<f64>,
    rician_k_db: Option<f64>,
    tx_correlation: f64,
    rx_correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdlProfile {
    pub name: String,
    /// Seconds.
    pub delays: Vec<f64>,
    /// Linear, summing to one.
    pub powers: Vec<f64>,
    /// Linear Rician factor of the first tap; zero for pure Rayleigh.
    pub rician_k: f64,
    /// Exponential correlation coefficient between adjacent antennas.
    pub tx_correlation: f64,
    pub rx_correlation: f64,
}

pub const DEFAULT_DELAY_SPREAD_S: f64 = 300e-9;

const CDL_A: &str = include_str!("../data/profiles/cdl_a.json");
const CDL_C: &str = include_str!("../data/profiles/cdl_c.json");

impl TdlProfile {
    /// Normalizes `powers` to unit sum.
    pub fn new(
        name: &str,
        delays: Vec<f64>,
        powers: Vec<f64>,
        rician_k: f64,
        tx_correlation: f64,
        rx_correlation: f64,
    ) -> Result<Self, ChannelError> {
        if delays.is_empty() || delays.len() != powers.len() {
            return Err(ChannelError::Profile(format!("{} delays, {} powers", delays.len(), powers.len())));
        }
        if delays.iter().any(|d| !(*d >= 0.0)) || powers.iter().any(|p| !(*p >= 0.0)) {
            return Err(ChannelError::Profile("delays and powers must be non-negative".into()));
        }
        let total: f64 = powers.iter().sum();
        if !(total > 0.0) {
            return Err(ChannelError::Profile("total power is zero".into()));
        }
        for c in [tx_correlation, rx_correlation] {
            if !(0.0..1.0).contains(&c) {
                return Err(ChannelError::Profile(format!("correlation {c} outside [0, 1)")));
            }
        }
        if !(rician_k >= 0.0) {
            return Err(ChannelError::Profile("Rician factor must be non-negative".into()));
        }
        Ok(Self {
            name: name.into(),
            delays,
            powers: powers.iter().map(|p| p / total).collect(),
            rician_k,
            tx_correlation,
            rx_correlation,
        })
    }

    /// Single unit tap at zero delay without spatial correlation.
    pub fn flat() -> Self {
        Self::new("flat", vec![0.0], vec![1.0], 0.0, 0.0, 0.0).expect("valid")
    }

    pub fn from_json(text: &str, delay_spread_s: f64) -> Result<Self, ChannelError> {
        let f: ProfileFile = serde_json::from_str(text).map_err(|e| ChannelError::Profile(e.to_string()))?;
        Self::new(
            &f.name,
            f.normalized_delays.iter().map(|d| d * delay_spread_s).collect(),
            f.powers_db.iter().map(|p| 10f64.powf(p / 10.0)).collect(),
            f.rician_k_db.map(|k| 10f64.powf(k / 10.0)).unwrap_or(0.0),
            f.tx_correlation,
            f.rx_correlation,
        )
    }

    pub fn load(path: &Path, delay_spread_s: f64) -> Result<Self, ChannelError> {
        Self::from_json(&std::fs::read_to_string(path)?, delay_spread_s)
    }

    pub fn cdl_a(delay_spread_s: f64) -> Self {
        Self::from_json(CDL_A, delay_spread_s).expect("bundled profile is valid")
    }

    pub fn cdl_c(delay_spread_s: f64) -> Self {
        Self::from_json(CDL_C, delay_spread_s).expect("bundled profile is valid")
    }

    /// Looks up a bundled profile by name (`cdl-a`, `cdl-c`, `flat`).
    pub fn by_name(name: &str, delay_spread_s: f64) -> Result<Self, ChannelError> {
        match name.to_ascii_lowercase().as_str() {
            "cdl-a" | "cdl_a" => Ok(Self::cdl_a(delay_spread_s)),
            "cdl-c" | "cdl_c" => Ok(Self::cdl_c(delay_spread_s)),
            "flat" => Ok(Self::flat()),
            other => Err(ChannelError::Profile(format!("unknown profile {other:?}"))),
        }
    }
}

/// Complex grid over (port x subcarrier x symbol), stored RE-major: the
/// `ports` values of one RE are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceGrid {
    pub ports: usize,
    pub n_subcarriers: usize,
    pub n_symbols: usize,
    data: Vec<Complex64>,
}

impl ResourceGrid {
    pub fn zeros(ports: usize, n_subcarriers: usize, n_symbols: usize) -> Self {
        Self { ports, n_subcarriers, n_symbols, data: vec![Complex64::new(0.0, 0.0); ports * n_subcarriers * n_symbols] }
    }

    pub fn from_vec(ports: usize, n_subcarriers: usize, n_symbols: usize, data: Vec<Complex64>) -> Result<Self, ChannelError> {
        if data.len() != ports * n_subcarriers * n_symbols {
            return Err(ChannelError::Shape(format!(
                "{} values for {ports}x{n_subcarriers}x{n_symbols}",
                data.len()
            )));
        }
        Ok(Self { ports, n_subcarriers, n_symbols, data })
    }

    pub fn n_res(&self) -> usize {
        self.n_subcarriers * self.n_symbols
    }

    pub fn re(&self, re: usize) -> &[Complex64] {
        &self.data[re * self.ports..(re + 1) * self.ports]
    }

    pub fn re_mut(&mut self, re: usize) -> &mut [Complex64] {
        &mut self.data[re * self.ports..(re + 1) * self.ports]
    }

    pub fn get(&self, port: usize, subcarrier: usize, symbol: usize) -> Complex64 {
        self.data[(subcarrier * self.n_symbols + symbol) * self.ports + port]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Mean over REs of the power summed across ports.
    pub fn mean_re_power(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.n_res().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub numerology: Numerology,
    /// One `n_rx x n_tx` matrix per RE, in [`Numerology::re_index`] order.
    h: Vec<CMatrix<f64>>,
    pub noise_variance: f64,
}

impl ChannelRealization {
    pub fn from_matrices(numerology: Numerology, h: Vec<CMatrix<f64>>, noise_variance: f64) -> Result<Self, ChannelError> {
        numerology.validate()?;
        if h.len() != numerology.n_res() || h.iter().any(|m| m.rows() != numerology.n_rx || m.cols() != numerology.n_tx) {
            return Err(ChannelError::Shape("per-RE matrices do not match the numerology".into()));
        }
        Ok(Self { numerology, h, noise_variance })
    }

    /// The same matrix on every RE.
    pub fn constant(numerology: Numerology, h: CMatrix<f64>, noise_variance: f64) -> Result<Self, ChannelError> {
        let n = numerology.n_res();
        Self::from_matrices(numerology, vec![h; n], noise_variance)
    }

    pub fn at(&self, subcarrier: usize, symbol: usize) -> &CMatrix<f64> {
        &self.h[self.numerology.re_index(subcarrier, symbol)]
    }

    pub fn re(&self, re: usize) -> &CMatrix<f64> {
        &self.h[re]
    }

    pub fn matrices(&self) -> &[CMatrix<f64>] {
        &self.h
    }

    pub fn get(&self, rx: usize, tx: usize, subcarrier: usize, symbol: usize) -> Complex64 {
        self.at(subcarrier, symbol)[(rx, tx)]
    }

    pub fn with_noise_variance(mut self, noise_variance: f64) -> Self {
        self.noise_variance = noise_variance;
        self
    }
}

/// Lower Cholesky factor of the exponential correlation matrix `rho^|i-j|`.
fn exp_correlation_factor(n: usize, rho: f64) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let r = rho.powi((i - j) as i32);
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                l[i * n + j] = (r - s).max(0.0).sqrt();
            } else {
                l[i * n + j] = (r - s) / l[j * n + j];
            }
        }
    }
    l
}

fn ula_steering(n: usize, sin_theta: f64) -> Vec<Complex64> {
    (0..n).map(|k| Complex64::from_polar(1.0, PI * k as f64 * sin_theta)).collect()
}

/// Draws one block-fading realization (noise variance left at zero).
pub fn sample_channel(profile: &TdlProfile, num: &Numerology, seed: u64) -> Result<ChannelRealization, ChannelError> {
    num.validate()?;
    let mut rng = rng_from_seed(seed);
    let (nr, nt) = (num.n_rx, num.n_tx);
    let lr = exp_correlation_factor(nr, profile.rx_correlation);
    let lt = exp_correlation_factor(nt, profile.tx_correlation);
    let mut taps = Vec::with_capacity(profile.delays.len());
    for (l, &p) in profile.powers.iter().enumerate() {
        let w: Vec<Complex64> = (0..nr * nt).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
        // L_rx W L_tx^T
        let mut lw = vec![Complex64::new(0.0, 0.0); nr * nt];
        for i in 0..nr {
            for k in 0..=i {
                let f = lr[i * nr + k];
                for j in 0..nt {
                    lw[i * nt + j] += w[k * nt + j] * f;
                }
            }
        }
        let mut g = CMatrix::from_fn(nr, nt, |i, j| {
            (0..=j).map(|k| lw[i * nt + k] * lt[j * nt + k]).sum::<Complex64>() * p.sqrt()
        });
        if l == 0 && profile.rician_k > 0.0 {
            let k = profile.rician_k;
            let a_r = ula_steering(nr, rng.random_range(-1.0..1.0));
            let a_t = ula_steering(nt, rng.random_range(-1.0..1.0));
            let phase = Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI));
            let los = (p * k / (k + 1.0)).sqrt();
            let nlos = (1.0 / (k + 1.0)).sqrt();
            g = CMatrix::from_fn(nr, nt, |i, j| g[(i, j)] * nlos + a_r[i] * a_t[j].conj() * phase * los);
        }
        taps.push(g);
    }
    let mut h = Vec::with_capacity(num.n_res());
    for f in 0..num.n_subcarriers {
        let freq = f as f64 * num.subcarrier_spacing_hz;
        let mut hf = CMatrix::zeros(nr, nt);
        for (g, &tau) in taps.iter().zip(&profile.delays) {
            let rot = Complex64::from_polar(1.0, -2.0 * PI * freq * tau);
            hf = hf.add(&g.scale(rot));
        }
        for _ in 0..num.n_symbols {
            h.push(hf.clone());
        }
    }
    ChannelRealization::from_matrices(*num, h, 0.0)
}

/// `y = H x + n` per RE with `n ~ CN(0, noise_variance I)`.
pub fn transmit(h: &ChannelRealization, x: &ResourceGrid, seed: u64) -> Result<ResourceGrid, ChannelError> {
    let num = &h.numerology;
    if x.ports != num.n_tx || x.n_subcarriers != num.n_subcarriers || x.n_symbols != num.n_symbols {
        return Err(ChannelError::Shape(format!(
            "grid {}x{}x{} vs channel tx={} sc={} sym={}",
            x.ports, x.n_subcarriers, x.n_symbols, num.n_tx, num.n_subcarriers, num.n_symbols
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut y = ResourceGrid::zeros(num.n_rx, num.n_subcarriers, num.n_symbols);
    for re in 0..num.n_res() {
        let hx = h.re(re).mul_vec(x.re(re));
        for (o, v) in y.re_mut(re).iter_mut().zip(hx) {
            *o = v;
            if h.noise_variance > 0.0 {
                *o += complex_gaussian(&mut rng, h.noise_variance);
            }
        }
    }
    Ok(y)
}

/// Noise variance for a given SNR in dB.
pub fn snr_to_noise_variance(snr_db: f64, signal_power: f64) -> f64 {
    signal_power / 10f64.powf(snr_db / 10.0)
}

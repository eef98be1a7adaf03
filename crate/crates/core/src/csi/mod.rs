//! CSI extraction, the SGCS metric, scalar-quantized feedback, the learned
//! codec and the uplink that carries its payload.

mod codec;
mod uplink;

pub use codec::{csi_to_tensor, CodecDims, CsiCodec, FeedbackForm, FeedbackPayload, CSI_BITS, CSI_SYMBOLS};
pub use uplink::{mrc_combine, uplink_feedback, UplinkScheme, UPLINK_RES};

use num_complex::Complex64;
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::channel::{ChannelError, ChannelRealization};
use crate::ldpc::LdpcError;
use crate::linalg::{fix_phase, hermitian_eig, CMatrix, LinalgError};
use crate::precoding::Precoder;

#[derive(Debug, Error)]
pub enum CsiError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("zero vector in subband {0}")]
    ZeroVector(usize),
    #[error("bit budget {budget} leaves fewer than 2 bits for each of {coefficients} coefficients")]
    Budget { budget: usize, coefficients: usize },
    #[error("payload needs {needed} REs, uplink has {available}")]
    Overflow { needed: usize, available: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Ldpc(#[from] LdpcError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Per subband, the top `n_layer` eigenvectors of the transmit covariance,
/// concatenated layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiMatrix {
    pub n_tx: usize,
    pub n_layer: usize,
    /// One row of `n_tx * n_layer` entries per subband.
    pub rows: Vec<Vec<Complex64>>,
}

impl CsiMatrix {
    pub fn new(n_tx: usize, n_layer: usize, rows: Vec<Vec<Complex64>>) -> Result<Self, CsiError> {
        if rows.is_empty() || rows.iter().any(|r| r.len() != n_tx * n_layer) {
            return Err(CsiError::Shape(format!("rows must hold {n_tx} x {n_layer} entries")));
        }
        Ok(Self { n_tx, n_layer, rows })
    }

    pub fn n_subbands(&self) -> usize {
        self.rows.len()
    }

    pub fn eigenvector(&self, subband: usize, layer: usize) -> &[Complex64] {
        &self.rows[subband][layer * self.n_tx..(layer + 1) * self.n_tx]
    }
}

/// Transmit covariance `R_k = mean_{f in k, t} H^H H` per subband.
pub fn subband_covariances(h: &ChannelRealization) -> Vec<CMatrix<f64>> {
    let num = &h.numerology;
    let mut acc = vec![CMatrix::zeros(num.n_tx, num.n_tx); num.n_subbands];
    let mut count = vec![0usize; num.n_subbands];
    for f in 0..num.n_subcarriers {
        let k = num.subband_of(f);
        for t in 0..num.n_symbols {
            let hm = h.at(f, t);
            let g = hm.adjoint().matmul(hm).expect("H^H H is always conformant");
            acc[k] = acc[k].add(&g);
            count[k] += 1;
        }
    }
    acc.into_iter().zip(count).map(|(r, c)| r.scale_real(1.0 / c.max(1) as f64)).collect()
}

/// Eigen-based CSI: top `n_layer` phase-fixed eigenvectors of each
/// subband covariance.
pub fn extract_csi(h: &ChannelRealization, n_layer: usize) -> Result<CsiMatrix, CsiError> {
    let (rows, _) = extract_csi_with_eigenvalues(h, n_layer)?;
    Ok(rows)
}

/// As [`extract_csi`], also returning each subband's top eigenvalues.
pub fn extract_csi_with_eigenvalues(h: &ChannelRealization, n_layer: usize) -> Result<(CsiMatrix, Vec<Vec<f64>>), CsiError> {
    let num = &h.numerology;
    if n_layer == 0 || n_layer > num.n_tx.min(num.n_rx) {
        return Err(CsiError::Shape(format!("{n_layer} layers on a {}x{} channel", num.n_rx, num.n_tx)));
    }
    let mut rows = Vec::with_capacity(num.n_subbands);
    let mut vals = Vec::with_capacity(num.n_subbands);
    for r in subband_covariances(h) {
        let eig = hermitian_eig(&r)?;
        let mut row = Vec::with_capacity(num.n_tx * n_layer);
        for l in 0..n_layer {
            let mut v = eig.eigenvectors.column(l);
            fix_phase(&mut v);
            row.extend(v);
        }
        rows.push(row);
        vals.push(eig.eigenvalues[..n_layer].to_vec());
    }
    Ok((CsiMatrix { n_tx: num.n_tx, n_layer, rows }, vals))
}

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Squared generalized cosine similarity of two equal-length vectors.
pub fn cosine_sq(w: &[Complex64], p: &[Complex64]) -> Option<f64> {
    let (nw, np) = (norm(w), norm(p));
    if nw == 0.0 || np == 0.0 {
        return None;
    }
    let dot: Complex64 = w.iter().zip(p).map(|(a, b)| a.conj() * b).sum();
    Some((dot.norm() / (nw * np)).powi(2).min(1.0))
}

/// Mean over subbands of `(|w_k^H p_k| / (|w_k| |p_k|))^2`, with the
/// precoder columns concatenated in the same layer order as `w`.
pub fn sgcs(w: &CsiMatrix, p: &Precoder) -> Result<f64, CsiError> {
    if w.n_subbands() != p.n_subbands() || w.n_tx != p.n_tx() || w.n_layer != p.n_layer() {
        return Err(CsiError::Shape("CSI and precoder dimensions differ".into()));
    }
    let mut acc = 0.0;
    for k in 0..w.n_subbands() {
        acc += cosine_sq(&w.rows[k], &p.flat(k)).ok_or(CsiError::ZeroVector(k))?;
    }
    Ok(acc / w.n_subbands() as f64)
}

/// Per-coefficient split of a scalar-quantization budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizerBits {
    pub magnitude: usize,
    pub phase: usize,
}

impl QuantizerBits {
    pub fn for_budget(budget: usize, coefficients: usize) -> Result<Self, CsiError> {
        let b = budget / coefficients.max(1);
        if b < 2 {
            return Err(CsiError::Budget { budget, coefficients });
        }
        let phase = b.div_ceil(2);
        Ok(Self { magnitude: b - phase, phase })
    }

    pub fn per_coefficient(&self) -> usize {
        self.magnitude + self.phase
    }
}

fn push_bits(out: &mut Vec<u8>, value: usize, width: usize) {
    out.extend((0..width).rev().map(|i| ((value >> i) & 1) as u8));
}

fn read_bits(bits: &[u8]) -> usize {
    bits.iter().fold(0, |acc, &b| (acc << 1) | (b & 1) as usize)
}

/// Magnitude-phase scalar quantization of every eigenvector coefficient.
///
/// Magnitudes are taken relative to the largest entry of their eigenvector
/// and rounded to `2^mb` uniform levels on `[0, 1]`; phases to `2^pb`
/// uniform levels. Returns the bit stream (magnitude bits then phase bits,
/// MSB first, per coefficient) and the unit-norm reconstruction.
pub fn quantized_feedback(w: &CsiMatrix, bit_budget: usize) -> Result<(Vec<u8>, CsiMatrix), CsiError> {
    let count = w.n_subbands() * w.n_tx * w.n_layer;
    let q = QuantizerBits::for_budget(bit_budget, count)?;
    let mag_levels = (1usize << q.magnitude) - 1;
    let phase_levels = 1usize << q.phase;
    let mut bits = Vec::with_capacity(count * q.per_coefficient());
    for k in 0..w.n_subbands() {
        for l in 0..w.n_layer {
            let v = w.eigenvector(k, l);
            let peak = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
            for z in v {
                let m = if peak > 0.0 { z.norm() / peak } else { 0.0 };
                let mi = (m * mag_levels as f64).round() as usize;
                let ph = z.arg().rem_euclid(std::f64::consts::TAU);
                let pi = (ph / std::f64::consts::TAU * phase_levels as f64).round() as usize % phase_levels;
                push_bits(&mut bits, mi, q.magnitude);
                push_bits(&mut bits, pi, q.phase);
            }
        }
    }
    let recon = dequantize_feedback(&bits, w.n_subbands(), w.n_tx, w.n_layer, bit_budget)?;
    Ok((bits, recon))
}

/// Inverse of [`quantized_feedback`]; each eigenvector is renormalized to
/// unit norm (left at zero if every magnitude quantized to zero).
pub fn dequantize_feedback(bits: &[u8], n_sb: usize, n_tx: usize, n_layer: usize, bit_budget: usize) -> Result<CsiMatrix, CsiError> {
    let count = n_sb * n_tx * n_layer;
    let q = QuantizerBits::for_budget(bit_budget, count)?;
    let per = q.per_coefficient();
    if bits.len() != count * per {
        return Err(CsiError::Shape(format!("{} feedback bits, expected {}", bits.len(), count * per)));
    }
    let mag_levels = ((1usize << q.magnitude) - 1) as f64;
    let phase_levels = (1usize << q.phase) as f64;
    let mut rows = Vec::with_capacity(n_sb);
    let mut chunks = bits.chunks(per);
    for _ in 0..n_sb {
        let mut row = Vec::with_capacity(n_tx * n_layer);
        for _ in 0..n_layer {
            let mut v: Vec<Complex64> = (0..n_tx)
                .map(|_| {
                    let c = chunks.next().expect("length checked above");
                    let m = read_bits(&c[..q.magnitude]) as f64 / mag_levels;
                    let ph = read_bits(&c[q.magnitude..]) as f64 / phase_levels * std::f64::consts::TAU;
                    Complex64::from_polar(m, ph)
                })
                .collect();
            let n = norm(&v);
            if n > 0.0 {
                v.iter_mut().for_each(|z| *z /= n);
            }
            row.extend(v);
        }
        rows.push(row);
    }
    CsiMatrix::new(n_tx, n_layer, rows)
}

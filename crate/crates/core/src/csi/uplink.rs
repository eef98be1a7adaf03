use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{CsiError, FeedbackPayload};
use crate::channel::{transmit, ChannelRealization, ResourceGrid};
use crate::ldpc::{LdpcCode, DEFAULT_MAX_ITER};
use crate::linalg::CMatrix;
use crate::modulation::QamConstellation;

/// Uplink REs reserved for CSI feedback.
pub const UPLINK_RES: usize = 96;

/// Floor on the post-combining noise variance used for demapping.
const MIN_DEMAP_NOISE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "scheme")]
pub enum UplinkScheme {
    /// One feedback symbol per RE, no coding.
    Symbols,
    /// LDPC codeword of `code_n` bits carried on `qam_bits`-bit QAM.
    Coded { code_n: usize, qam_bits: usize },
}

impl UplinkScheme {
    /// Rate 1/4 on 256QAM.
    pub const RATE_QUARTER_256QAM: Self = Self::Coded { code_n: 768, qam_bits: 8 };
    /// Rate 1/3 on 64QAM.
    pub const RATE_THIRD_64QAM: Self = Self::Coded { code_n: 576, qam_bits: 6 };
    /// Rate 1/2 on 16QAM.
    pub const RATE_HALF_16QAM: Self = Self::Coded { code_n: 384, qam_bits: 4 };

    /// REs occupied by a payload of `payload_len` bits or symbols.
    pub fn res_needed(&self, payload_len: usize) -> usize {
        match *self {
            Self::Symbols => payload_len,
            Self::Coded { code_n, qam_bits } => code_n.div_ceil(qam_bits),
        }
    }
}

/// Maximum-ratio combining of a single-stream SIMO observation: returns the
/// unit-gain estimate `h^H y / |h|^2` and the combining gain `|h|^2`.
pub fn mrc_combine(h: &CMatrix<f64>, y: &[Complex64]) -> (Complex64, f64) {
    let g: f64 = h.as_slice().iter().map(|z| z.norm_sqr()).sum();
    let dot: Complex64 = h.as_slice().iter().zip(y).map(|(a, b)| a.conj() * b).sum();
    if g > 0.0 {
        (dot / g, g)
    } else {
        (Complex64::new(0.0, 0.0), 0.0)
    }
}

fn send(symbols: &[Complex64], ul: &ChannelRealization, seed: u64) -> Result<Vec<(Complex64, f64)>, CsiError> {
    let num = &ul.numerology;
    if num.n_tx != 1 {
        return Err(CsiError::Shape(format!("uplink must be single-stream, got {} ports", num.n_tx)));
    }
    if symbols.len() > num.n_res() {
        return Err(CsiError::Overflow { needed: symbols.len(), available: num.n_res() });
    }
    let mut x = ResourceGrid::zeros(1, num.n_subcarriers, num.n_symbols);
    for (re, s) in symbols.iter().enumerate() {
        x.re_mut(re)[0] = *s;
    }
    let y = transmit(ul, &x, seed)?;
    Ok((0..symbols.len()).map(|re| mrc_combine(ul.re(re), y.re(re))).collect())
}

/// Carries a feedback payload over the SIMO uplink and returns what the
/// base station recovers: combined symbols for the symbol form, decoded
/// bits for the coded form.
pub fn uplink_feedback(
    payload: &FeedbackPayload,
    ul: &ChannelRealization,
    scheme: UplinkScheme,
    seed: u64,
) -> Result<FeedbackPayload, CsiError> {
    match (payload, scheme) {
        (FeedbackPayload::Symbols(s), UplinkScheme::Symbols) => {
            Ok(FeedbackPayload::Symbols(send(s, ul, seed)?.into_iter().map(|(z, _)| z).collect()))
        }
        (FeedbackPayload::Bits(bits), UplinkScheme::Coded { code_n, qam_bits }) => {
            let code = LdpcCode::standard(code_n, bits.len())?;
            let qam = QamConstellation::<f64>::new(qam_bits).map_err(|e| CsiError::Shape(e.to_string()))?;
            let cw = code.encode(bits)?;
            let mut padded = cw.clone();
            padded.resize(scheme.res_needed(bits.len()) * qam_bits, 0);
            let tx = qam.modulate(&padded).map_err(|e| CsiError::Shape(e.to_string()))?;
            let mut llr = Vec::with_capacity(padded.len());
            for (z, g) in send(&tx, ul, seed)? {
                let s2 = if g > 0.0 { (ul.noise_variance / g).max(MIN_DEMAP_NOISE) } else { f64::INFINITY };
                llr.extend(qam.demap_max_log(z, 1.0, s2));
            }
            llr.truncate(cw.len());
            Ok(FeedbackPayload::Bits(code.decode(&llr, DEFAULT_MAX_ITER)?.info))
        }
        _ => Err(CsiError::Shape("payload form does not match uplink scheme".into())),
    }
}

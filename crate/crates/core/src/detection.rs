//! Linear equalizers and K-Best tree search for the per-RE MIMO link
//! `y = H x + n`, `n ~ CN(0, sigma2 I)`.

use num_complex::Complex;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{CMatrix, LinalgError, Real};
use crate::modulation::QamConstellation;

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("received vector has {got} entries, channel has {expected} rows")]
    Length { expected: usize, got: usize },
    #[error("negative noise variance {0}")]
    NoiseVariance(f64),
    #[error("list size must be at least 1")]
    ListSize,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Upper bound on reported post-equalization SINR (linear); reached only on
/// noiseless links.
pub const MAX_SINR: f64 = 1e12;

/// LLR magnitude assigned when a K-Best list holds no counter-hypothesis.
pub const KBEST_LLR_CLIP: f64 = 15.0;

pub const DEFAULT_K: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detector {
    Lmmse,
    Zf,
    Kbest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EqualizerOutput<T> {
    pub x_hat: Vec<Complex<T>>,
    /// Per-layer post-equalization SINR, linear.
    pub post_sinr: Vec<T>,
    /// Per-layer bias `mu` of `x_hat_i = mu x_i + interference + noise`
    /// (1 for zero-forcing).
    pub gain: Vec<T>,
}

impl<T: Real> EqualizerOutput<T> {
    /// Noise-plus-interference variance on layer `i`: `gain^2 / sinr`.
    pub fn effective_noise(&self, i: usize) -> T {
        let s = self.post_sinr[i].max(T::lit(1.0 / MAX_SINR));
        self.gain[i] * self.gain[i] / s
    }
}

fn check(heq: &CMatrix<impl Real>, y_len: usize, sigma2: f64) -> Result<(), DetectionError> {
    if heq.rows() != y_len {
        return Err(DetectionError::Length { expected: heq.rows(), got: y_len });
    }
    if !(sigma2 >= 0.0) {
        return Err(DetectionError::NoiseVariance(sigma2));
    }
    Ok(())
}

fn sinr_from_error<T: Real>(e: T) -> T {
    let floor = T::lit(1.0 / (1.0 + MAX_SINR));
    let e = e.max(floor).min(T::one());
    T::one() / e - T::one()
}

/// LMMSE estimate `H^H (H H^H + sigma2 I)^-1 y`, evaluated in the
/// equivalent form `(H^H H + sigma2 I)^-1 H^H y` so that noiseless tall
/// systems stay well posed. The error covariance is
/// `E = sigma2 (H^H H + sigma2 I)^-1` and `sinr_i = 1 / e_ii - 1`.
pub fn lmmse_equalize<T: Real>(heq: &CMatrix<T>, y: &[Complex<T>], sigma2: T) -> Result<EqualizerOutput<T>, DetectionError> {
    check(heq, y.len(), sigma2.to_f64().unwrap_or(f64::NAN))?;
    let n = heq.cols();
    let hh = heq.adjoint();
    let gram = hh.matmul(heq)?.add_diag(sigma2);
    let hy = hh.mul_vec(y);
    let rhs = CMatrix::from_fn(n, n + 1, |r, c| {
        if c < n {
            if r == c {
                Complex::one()
            } else {
                Complex::zero()
            }
        } else {
            hy[r]
        }
    });
    let sol = gram.solve(&rhs)?;
    let x_hat: Vec<Complex<T>> = (0..n).map(|i| sol[(i, n)]).collect();
    let mut post_sinr = Vec::with_capacity(n);
    let mut gain = Vec::with_capacity(n);
    for i in 0..n {
        let e = sol[(i, i)].re * sigma2;
        post_sinr.push(sinr_from_error(e));
        gain.push((T::one() - e).max(T::zero()));
    }
    Ok(EqualizerOutput { x_hat, post_sinr, gain })
}

/// Zero-forcing estimate `(H^H H)^-1 H^H y`. `sigma2` only enters the
/// reported SINR `1 / (sigma2 [(H^H H)^-1]_ii)`.
pub fn zf_equalize<T: Real>(heq: &CMatrix<T>, y: &[Complex<T>], sigma2: T) -> Result<EqualizerOutput<T>, DetectionError> {
    check(heq, y.len(), sigma2.to_f64().unwrap_or(f64::NAN))?;
    let n = heq.cols();
    if heq.rows() < n {
        return Err(LinalgError::Singular.into());
    }
    let hh = heq.adjoint();
    let gram = hh.matmul(heq)?;
    let inv = gram.inverse()?;
    let x_hat = inv.mul_vec(&hh.mul_vec(y));
    let post_sinr = (0..n)
        .map(|i| {
            let d = inv[(i, i)].re * sigma2;
            if d > T::lit(1.0 / MAX_SINR) {
                (T::one() / d).min(T::lit(MAX_SINR))
            } else {
                T::lit(MAX_SINR)
            }
        })
        .collect();
    Ok(EqualizerOutput { x_hat, post_sinr, gain: vec![T::one(); n] })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KBestOutput<T> {
    /// Point label per layer.
    pub labels: Vec<usize>,
    pub symbols: Vec<Complex<T>>,
    /// Layer-major max-log LLRs, positive favours bit 0.
    pub llrs: Vec<T>,
    /// `|z - R s|^2` of the selected path.
    pub metric: T,
}

/// Breadth-first K-Best search on the QR-decomposed system, detecting the
/// last layer first. With `k >= order^n_layer` the result is exhaustive ML.
///
/// Wide systems (fewer receive antennas than layers) are searched on the
/// regularized stack `[H; sqrt(sigma2) I]`, `[y; 0]`.
pub fn kbest_detect<T: Real>(
    heq: &CMatrix<T>,
    y: &[Complex<T>],
    constellation: &QamConstellation<T>,
    k: usize,
    sigma2: T,
) -> Result<KBestOutput<T>, DetectionError> {
    check(heq, y.len(), sigma2.to_f64().unwrap_or(f64::NAN))?;
    if k == 0 {
        return Err(DetectionError::ListSize);
    }
    let n = heq.cols();
    let (h, y) = if heq.rows() < n {
        let rows = heq.rows();
        let s = Complex::new(sigma2.sqrt(), T::zero());
        let h = CMatrix::from_fn(rows + n, n, |r, c| {
            if r < rows {
                heq[(r, c)]
            } else if r - rows == c {
                s
            } else {
                Complex::zero()
            }
        });
        let mut ya = y.to_vec();
        ya.resize(rows + n, Complex::zero());
        (h, ya)
    } else {
        (heq.clone(), y.to_vec())
    };
    let (q, r) = h.qr()?;
    let z = q.adjoint().mul_vec(&y);
    let points = constellation.points();

    // Each path holds labels for layers level..n, stored last layer first.
    let mut paths: Vec<(T, Vec<usize>)> = vec![(T::zero(), Vec::new())];
    for level in (0..n).rev() {
        let mut next = Vec::with_capacity(paths.len() * points.len());
        for (metric, labels) in &paths {
            let mut interf = z[level];
            for (depth, &lab) in labels.iter().enumerate() {
                let j = n - 1 - depth;
                interf = interf - r[(level, j)] * points[lab];
            }
            for (lab, p) in points.iter().enumerate() {
                let d = (interf - r[(level, level)] * *p).norm_sqr();
                let mut l = labels.clone();
                l.push(lab);
                next.push((*metric + d, l));
            }
        }
        next.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        next.truncate(k);
        paths = next;
    }

    let to_layers = |l: &[usize]| -> Vec<usize> { l.iter().rev().copied().collect() };
    let (best_metric, best) = (paths[0].0, to_layers(&paths[0].1));
    let bits = constellation.bits_per_symbol();
    let clip = T::lit(KBEST_LLR_CLIP);
    let mut llrs = Vec::with_capacity(n * bits);
    for layer in 0..n {
        for b in 0..bits {
            let mut m = [T::infinity(); 2];
            for (metric, l) in &paths {
                let lab = l[n - 1 - layer];
                let v = constellation.label_bit(lab, b) as usize;
                if *metric < m[v] {
                    m[v] = *metric;
                }
            }
            let llr = match (m[0].is_finite(), m[1].is_finite()) {
                (true, true) => (m[1] - m[0]) / sigma2,
                (true, false) => clip,
                _ => -clip,
            };
            llrs.push(llr);
        }
    }
    Ok(KBestOutput { symbols: best.iter().map(|&l| points[l]).collect(), labels: best, llrs, metric: best_metric })
}

/// Exhaustive ML over all `order^n_layer` hypotheses, for reference.
pub fn ml_detect<T: Real>(heq: &CMatrix<T>, y: &[Complex<T>], constellation: &QamConstellation<T>) -> Result<(Vec<usize>, T), DetectionError> {
    check(heq, y.len(), 0.0)?;
    let n = heq.cols();
    let m = constellation.order();
    let mut best = (Vec::new(), T::infinity());
    for idx in 0..m.pow(n as u32) {
        let labels: Vec<usize> = (0..n).map(|i| (idx / m.pow(i as u32)) % m).collect();
        let x: Vec<Complex<T>> = labels.iter().map(|&l| constellation.points()[l]).collect();
        let hx = heq.mul_vec(&x);
        let d = y.iter().zip(&hx).fold(T::zero(), |a, (u, v)| a + (*u - *v).norm_sqr());
        if d < best.1 {
            best = (labels, d);
        }
    }
    Ok(best)
}

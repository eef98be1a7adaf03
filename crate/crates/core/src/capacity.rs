//! BICM capacity estimation and the sphere-packing comparison between
//! high-dimensional and QAM constellations.
//!
//! Noise variances here are per real dimension.

use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::Real;
use crate::modulation::{CrossLayerModulator, ModulationError, QamConstellation};
use crate::rng::{derived_rng, stream};

#[derive(Debug, Error)]
pub enum CapacityError {
    #[error("{0} points is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("{0} points exceeds the enumeration cap of {MAX_POINTS}")]
    TooLarge(usize),
    #[error("points must all have {0} complex coordinates")]
    Dimension(usize),
    #[error("noise variance must be positive, got {0}")]
    NoiseVariance(f64),
    #[error("need at least one sample")]
    NoSamples,
    #[error(transparent)]
    Modulation(#[from] ModulationError),
}

/// Largest constellation handled by exhaustive likelihood sums.
pub const MAX_POINTS: usize = 4096;

/// Monte-Carlo samples per shard; shard `s` draws from its own derived seed.
pub const SHARD_SAMPLES: usize = 4096;

/// Exponent clip for likelihood ratios.
const EXP_CLIP: f64 = 700.0;

/// `M = 2^m` labelled points in `N` complex dimensions. Point `p` carries
/// the bits of `p`, first bit most significant.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstellationSet<T> {
    dim: usize,
    bits: usize,
    points: Vec<Vec<Complex<T>>>,
}

impl<T: Real> ConstellationSet<T> {
    pub fn new(points: Vec<Vec<Complex<T>>>) -> Result<Self, CapacityError> {
        let m = points.len();
        if m < 2 || !m.is_power_of_two() {
            return Err(CapacityError::NotPowerOfTwo(m));
        }
        if m > MAX_POINTS {
            return Err(CapacityError::TooLarge(m));
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(CapacityError::Dimension(dim));
        }
        Ok(Self { dim, bits: m.trailing_zeros() as usize, points })
    }

    /// `layers` independent copies of a QAM constellation, bits taken
    /// layer by layer.
    pub fn from_qam(qam: &QamConstellation<T>, layers: usize) -> Result<Self, CapacityError> {
        let q = qam.order();
        let total = q.checked_pow(layers as u32).filter(|&t| t <= MAX_POINTS).ok_or(CapacityError::TooLarge(usize::MAX))?;
        let points = (0..total)
            .map(|p| (0..layers).map(|l| qam.points()[(p / q.pow((layers - 1 - l) as u32)) % q]).collect())
            .collect();
        Self::new(points)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn order(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Vec<Complex<T>>] {
        &self.points
    }

    pub fn bit(&self, point: usize, i: usize) -> usize {
        (point >> (self.bits - 1 - i)) & 1
    }

    /// Mean of `|x|^2` over points (summed over complex coordinates).
    pub fn mean_power(&self) -> T {
        let s = self.points.iter().flatten().fold(T::zero(), |a, z| a + z.norm_sqr());
        s / T::lit(self.points.len() as f64)
    }

    /// Log-likelihood (up to a constant) of every point for observation `y`.
    fn log_likelihoods(&self, y: &[Complex<T>], sigma2: T) -> Vec<T> {
        let scale = T::lit(2.0) * sigma2;
        self.points
            .iter()
            .map(|x| -x.iter().zip(y).fold(T::zero(), |a, (p, q)| a + (*q - *p).norm_sqr()) / scale)
            .collect()
    }

    /// `ln sum_{x in X_b^i} exp(ll_x)` for both `b`.
    fn subset_lse(&self, ll: &[T], i: usize) -> [T; 2] {
        let mut mx = [T::neg_infinity(); 2];
        for (p, &l) in ll.iter().enumerate() {
            let b = self.bit(p, i);
            mx[b] = mx[b].max(l);
        }
        let mut acc = [T::zero(); 2];
        for (p, &l) in ll.iter().enumerate() {
            let b = self.bit(p, i);
            acc[b] = acc[b] + (l - mx[b]).exp();
        }
        [mx[0] + acc[0].ln(), mx[1] + acc[1].ln()]
    }
}

impl ConstellationSet<f64> {
    /// The learned constellation of a cross-layer modulator.
    pub fn from_learned(m: &CrossLayerModulator) -> Result<Self, CapacityError> {
        Self::new(m.constellation()?)
    }
}

/// `l_b^(i)(y) = sum_{X_{b'}^i} p(y|x) / sum_{X_b^i} p(y|x)` for AWGN with
/// per-real-dimension variance `sigma2`, evaluated in the log domain.
pub fn llr_ratio<T: Real>(cs: &ConstellationSet<T>, y: &[Complex<T>], bit: usize, b: usize, sigma2: T) -> T {
    let lse = cs.subset_lse(&cs.log_likelihoods(y, sigma2), bit);
    let e = (lse[1 - b] - lse[b]).max(T::lit(-EXP_CLIP)).min(T::lit(EXP_CLIP));
    e.exp()
}

/// `log2(1 + e^x)` without overflow.
fn log2_1p_exp<T: Real>(x: T) -> T {
    let sp = if x > T::zero() { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    sp / T::lit(std::f64::consts::LN_2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityEstimate {
    /// Bits per channel use (per constellation point).
    pub capacity: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// One Monte-Carlo draw: transmitted point index and received vector.
fn draw<T: Real, R: Rng>(cs: &ConstellationSet<T>, sigma2: T, rng: &mut R) -> (usize, Vec<Complex<T>>) {
    let p = rng.random_range(0..cs.order());
    let sd = sigma2.sqrt();
    let y = cs.points[p]
        .iter()
        .map(|x| {
            let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            *x + Complex::new(T::lit(a) * sd, T::lit(b) * sd)
        })
        .collect();
    (p, y)
}

fn check_args(sigma2: f64, samples: usize) -> Result<(), CapacityError> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(CapacityError::NoiseVariance(sigma2));
    }
    if samples == 0 {
        return Err(CapacityError::NoSamples);
    }
    Ok(())
}

/// Runs `per_sample` on every draw, sharded in parallel, and returns the
/// per-shard results in shard order.
fn sharded<T: Real, F, A>(cs: &ConstellationSet<T>, sigma2: T, samples: usize, seed: u64, per_sample: F) -> Vec<A>
where
    F: Fn(usize, &[Complex<T>], &mut A) + Sync,
    A: Default + Send,
{
    let shards = samples.div_ceil(SHARD_SAMPLES);
    (0..shards)
        .into_par_iter()
        .map(|s| {
            let n = SHARD_SAMPLES.min(samples - s * SHARD_SAMPLES);
            let mut rng = derived_rng(seed, stream::CAPACITY, s as u64);
            let mut acc = A::default();
            for _ in 0..n {
                let (p, y) = draw(cs, sigma2, &mut rng);
                per_sample(p, &y, &mut acc);
            }
            acc
        })
        .collect()
}

/// Monte-Carlo BICM capacity
/// `m - (1/S) sum_s sum_i log2(1 + l_{b_i}^(i)(y_s))`, with `b_i` the bits
/// of the transmitted point of each draw (equiprobable points, so each bit
/// value has probability 1/2).
pub fn bicm_capacity_mc<T: Real>(cs: &ConstellationSet<T>, sigma2: T, samples: usize, seed: u64) -> Result<CapacityEstimate, CapacityError> {
    check_args(sigma2.to_f64().unwrap_or(f64::NAN), samples)?;
    let m = cs.bits as f64;
    let parts: Vec<(f64, f64)> = sharded(cs, sigma2, samples, seed, |p, y, acc: &mut (f64, f64)| {
        let ll = cs.log_likelihoods(y, sigma2);
        let mut loss = 0.0;
        for i in 0..cs.bits {
            let lse = cs.subset_lse(&ll, i);
            let b = cs.bit(p, i);
            loss += log2_1p_exp(lse[1 - b] - lse[b]).to_f64().unwrap_or(f64::NAN);
        }
        let v = m - loss;
        acc.0 += v;
        acc.1 += v * v;
    });
    Ok(summarize(&parts, samples))
}

fn summarize(parts: &[(f64, f64)], samples: usize) -> CapacityEstimate {
    let (s, sq) = parts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let n = samples as f64;
    let mean = s / n;
    let var = if samples > 1 { ((sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    CapacityEstimate { capacity: mean, std_error: (var / n).sqrt(), samples }
}

/// Capacity computed two ways on the same draws: `m` minus the binary
/// cross-entropy (base 2) of the exact bit posteriors, and the direct
/// likelihood-ratio estimate of [`bicm_capacity_mc`].
pub fn bce_capacity_consistency(cs: &ConstellationSet<f64>, sigma2: f64, samples: usize, seed: u64) -> Result<(f64, f64), CapacityError> {
    check_args(sigma2, samples)?;
    let m = cs.bits as f64;
    let parts: Vec<(f64, f64)> = sharded(cs, sigma2, samples, seed, |p, y, acc: &mut (f64, f64)| {
        let ll = cs.log_likelihoods(y, sigma2);
        for i in 0..cs.bits {
            let lse = cs.subset_lse(&ll, i);
            // posterior of bit 1, kept as a logit to stay accurate near 0 and 1
            let logit = lse[1] - lse[0];
            let (ln_p1, ln_p0) = (ln_sigmoid(logit), ln_sigmoid(-logit));
            let c = cs.bit(p, i) as f64;
            let bce = -(c * ln_p1 + (1.0 - c) * ln_p0);
            acc.0 += bce / std::f64::consts::LN_2;

            let b = cs.bit(p, i);
            acc.1 += log2_1p_exp(lse[1 - b] - lse[b]);
        }
    });
    let n = samples as f64;
    let (bce, direct) = parts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    Ok((m - bce / n, m - direct / n))
}

fn ln_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Minimum distance from sphere packing: `sqrt(N + 1) M^(-1/(2N))`.
pub fn sphere_min_distance(n: usize, m: usize) -> f64 {
    ((n + 1) as f64).sqrt() * (m as f64).powf(-1.0 / (2.0 * n as f64))
}

/// Mean power of a uniform `2N`-ball of radius `r`: `r^2 / (N + 1)`.
pub fn sphere_power(r: f64, n: usize) -> f64 {
    r * r / (n + 1) as f64
}

/// Mean power per real dimension of a uniform cube of side `r`: `r^2 / 12`.
pub fn qam_cube_power(r: f64) -> f64 {
    r * r / 12.0
}

/// Squared minimum-distance ratio of sphere over cube packing,
/// `pi (N + 1) / (6 (N!)^(1/N))`.
pub fn shaping_gain_ratio(n: usize) -> f64 {
    let ln_fact: f64 = (1..=n).map(|k| (k as f64).ln()).sum();
    std::f64::consts::PI * (n + 1) as f64 / (6.0 * (ln_fact / n as f64).exp())
}

/// Large-`N` limit of [`shaping_gain_ratio`], `pi e / 6`.
pub const SHAPING_GAIN_LIMIT: f64 = std::f64::consts::PI * std::f64::consts::E / 6.0;

/// Smallest pairwise Euclidean distance in the `2N` real dimensions.
pub fn empirical_min_distance<T: Real>(cs: &ConstellationSet<T>) -> T {
    let mut best = T::infinity();
    for (i, a) in cs.points.iter().enumerate() {
        for b in &cs.points[i + 1..] {
            let d = a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + (*x - *y).norm_sqr());
            best = best.min(d);
        }
    }
    best.sqrt()
}

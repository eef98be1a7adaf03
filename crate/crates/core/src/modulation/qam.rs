use num_complex::Complex;

use super::ModulationError;
use crate::linalg::Real;

/// Square Gray-labelled QAM with unit average power.
///
/// Bits are taken in transmission order `b0 b1 b2 ...`; even-indexed bits
/// select the in-phase level and odd-indexed bits the quadrature level, each
/// through the reflected-binary amplitude map
/// `f(g0 g1 ...) = (1 - 2 g0) (2^(k-1) - f(g1 ...))`.
#[derive(Debug, Clone, PartialEq)]
pub struct QamConstellation<T> {
    bits: usize,
    /// Indexed by label, with `b0` as the most significant bit.
    points: Vec<Complex<T>>,
}

fn pam_level(bits: &[u8]) -> i64 {
    match bits.split_first() {
        None => 0,
        Some((&g0, rest)) => (1 - 2 * g0 as i64) * ((1i64 << rest.len()) - pam_level(rest)),
    }
}

pub fn qam_name(bits: usize) -> &'static str {
    match bits {
        2 => "QPSK",
        4 => "16QAM",
        6 => "64QAM",
        8 => "256QAM",
        _ => "QAM",
    }
}

impl<T: Real> QamConstellation<T> {
    pub fn new(bits: usize) -> Result<Self, ModulationError> {
        if ![2, 4, 6, 8].contains(&bits) {
            return Err(ModulationError::Order(bits));
        }
        let m = 1usize << bits;
        let norm = (2.0 * (m as f64 - 1.0) / 3.0).sqrt();
        let points = (0..m)
            .map(|label| {
                let b: Vec<u8> = (0..bits).map(|i| ((label >> (bits - 1 - i)) & 1) as u8).collect();
                let (i_bits, q_bits) = split_iq(&b);
                Complex::new(T::lit(pam_level(&i_bits) as f64 / norm), T::lit(pam_level(&q_bits) as f64 / norm))
            })
            .collect();
        Ok(Self { bits, points })
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits
    }

    pub fn order(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Complex<T>] {
        &self.points
    }

    /// Bit `i` (transmission order) of a point label.
    pub fn label_bit(&self, label: usize, i: usize) -> u8 {
        ((label >> (self.bits - 1 - i)) & 1) as u8
    }

    pub fn label_of(&self, bits: &[u8]) -> usize {
        bits.iter().fold(0, |acc, &b| (acc << 1) | (b & 1) as usize)
    }

    pub fn modulate(&self, bits: &[u8]) -> Result<Vec<Complex<T>>, ModulationError> {
        if bits.len() % self.bits != 0 {
            return Err(ModulationError::Length { len: bits.len(), multiple: self.bits });
        }
        Ok(bits.chunks(self.bits).map(|c| self.points[self.label_of(c)]).collect())
    }

    /// Max-log LLRs (positive favours bit 0) of `y = gain * s + n` with
    /// `n ~ CN(0, sigma2)`:
    /// `(min_{s: b=1} |y - gain s|^2 - min_{s: b=0} |y - gain s|^2) / sigma2`.
    pub fn demap_max_log(&self, y: Complex<T>, gain: T, sigma2: T) -> Vec<T> {
        let mut best = vec![[T::infinity(), T::infinity()]; self.bits];
        for (label, p) in self.points.iter().enumerate() {
            let d = (y - *p * gain).norm_sqr() / sigma2;
            for (i, slot) in best.iter_mut().enumerate() {
                let b = self.label_bit(label, i) as usize;
                if d < slot[b] {
                    slot[b] = d;
                }
            }
        }
        best.iter().map(|[d0, d1]| *d1 - *d0).collect()
    }

    pub fn demodulate(&self, ys: &[Complex<T>], gain: T, sigma2: T) -> Vec<T> {
        ys.iter().flat_map(|&y| self.demap_max_log(y, gain, sigma2)).collect()
    }

    /// Label of the nearest point to `y`.
    pub fn slice(&self, y: Complex<T>) -> usize {
        let mut best = (0, T::infinity());
        for (label, p) in self.points.iter().enumerate() {
            let d = (y - *p).norm_sqr();
            if d < best.1 {
                best = (label, d);
            }
        }
        best.0
    }

    pub fn mean_power(&self) -> T {
        let s = self.points.iter().fold(T::zero(), |acc, p| acc + p.norm_sqr());
        s / T::lit(self.points.len() as f64)
    }

    pub fn min_distance(&self) -> T {
        let mut best = T::infinity();
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                let d = (*a - *b).norm();
                if d < best {
                    best = d;
                }
            }
        }
        best
    }
}

fn split_iq(bits: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let i = bits.iter().step_by(2).copied().collect();
    let q = bits.iter().skip(1).step_by(2).copied().collect();
    (i, q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pam_levels_are_gray() {
        let levels: Vec<i64> = [[0, 0], [0, 1], [1, 1], [1, 0]].iter().map(|b| pam_level(b)).collect();
        assert_eq!(levels, vec![1, 3, -3, -1]);
    }

    #[test]
    fn rejects_unsupported_order() {
        assert!(QamConstellation::<f64>::new(3).is_err());
    }
}

//! Binary LDPC codes: progressive-edge-growth construction, alist I/O,
//! systematic encoding via GF(2) elimination, and a normalized min-sum
//! decoder. LLRs are positive when bit 0 is more likely.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::seq::IndexedRandom;
use thiserror::Error;

use crate::rng::rng_from_seed;

pub const LLR_CLIP: f64 = 30.0;
pub const DEFAULT_MAX_ITER: usize = 25;
pub const MIN_SUM_NORMALIZATION: f64 = 0.8;
const DEFAULT_VAR_DEGREE: usize = 3;

#[derive(Debug, Error)]
pub enum LdpcError {
    #[error("expected {expected} bits, got {got}")]
    Length { expected: usize, got: usize },
    #[error("code construction: {0}")]
    Construction(String),
    #[error("alist: {0}")]
    Alist(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdpcCode {
    n: usize,
    m: usize,
    /// Variable indices of each check.
    checks: Vec<Vec<usize>>,
    /// Codeword positions carrying the information bits, in order.
    info_positions: Vec<usize>,
    /// `(position, mask over info bits)`: each parity bit is the XOR of the
    /// masked information bits.
    parity_eqs: Vec<(usize, Vec<u64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub info: Vec<u8>,
    pub codeword: Vec<u8>,
    /// Zero syndrome with every posterior LLR nonzero.
    pub converged: bool,
    pub iterations: usize,
}

fn words(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl LdpcCode {
    /// Builds a code from check-node adjacency. The matrix must have full
    /// row rank.
    pub fn from_checks(n: usize, checks: Vec<Vec<usize>>) -> Result<Self, LdpcError> {
        let m = checks.len();
        if m == 0 || m >= n {
            return Err(LdpcError::Construction(format!("need 0 < m < n, got m={m}, n={n}")));
        }
        for (c, row) in checks.iter().enumerate() {
            if row.iter().any(|&v| v >= n) {
                return Err(LdpcError::Construction(format!("check {c} references a variable beyond {n}")));
            }
        }
        let w = words(n);
        let mut rows: Vec<Vec<u64>> = checks
            .iter()
            .map(|row| {
                let mut r = vec![0u64; w];
                for &v in row {
                    r[v / 64] ^= 1 << (v % 64);
                }
                r
            })
            .collect();
        // reduced row echelon form
        let mut pivots = Vec::with_capacity(m);
        let mut rank = 0;
        for col in 0..n {
            if rank == m {
                break;
            }
            let (wi, bit) = (col / 64, 1u64 << (col % 64));
            let Some(p) = (rank..m).find(|&r| rows[r][wi] & bit != 0) else { continue };
            rows.swap(rank, p);
            let pivot_row = rows[rank].clone();
            for (r, row) in rows.iter_mut().enumerate() {
                if r != rank && row[wi] & bit != 0 {
                    row.iter_mut().zip(&pivot_row).for_each(|(a, b)| *a ^= b);
                }
            }
            pivots.push(col);
            rank += 1;
        }
        if rank < m {
            return Err(LdpcError::Construction(format!("parity matrix has rank {rank} < {m}")));
        }
        let mut is_pivot = vec![false; n];
        pivots.iter().for_each(|&p| is_pivot[p] = true);
        let info_positions: Vec<usize> = (0..n).filter(|&c| !is_pivot[c]).collect();
        let k = n - m;
        let parity_eqs = pivots
            .iter()
            .zip(&rows)
            .map(|(&p, row)| {
                let mut mask = vec![0u64; words(k)];
                for (i, &pos) in info_positions.iter().enumerate() {
                    if row[pos / 64] >> (pos % 64) & 1 == 1 {
                        mask[i / 64] |= 1 << (i % 64);
                    }
                }
                (p, mask)
            })
            .collect();
        Ok(Self { n, m, checks, info_positions, parity_eqs })
    }

    /// One progressive-edge-growth attempt with variable degree `dv`.
    pub fn peg(n: usize, m: usize, dv: usize, seed: u64) -> Result<Self, LdpcError> {
        if dv == 0 || dv > m {
            return Err(LdpcError::Construction(format!("variable degree {dv} with {m} checks")));
        }
        let mut rng = rng_from_seed(seed);
        let mut check_adj: Vec<Vec<usize>> = vec![Vec::new(); m];
        let mut var_adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for j in 0..n {
            for _ in 0..dv {
                let mut reached = vec![false; m];
                let mut count = 0;
                for &c in &var_adj[j] {
                    if !reached[c] {
                        reached[c] = true;
                        count += 1;
                    }
                }
                if count > 0 {
                    loop {
                        let mut next = reached.clone();
                        let mut next_count = count;
                        for c in (0..m).filter(|&c| reached[c]) {
                            for &v in &check_adj[c] {
                                for &c2 in &var_adj[v] {
                                    if !next[c2] {
                                        next[c2] = true;
                                        next_count += 1;
                                    }
                                }
                            }
                        }
                        if next_count == m || next_count == count {
                            break;
                        }
                        reached = next;
                        count = next_count;
                    }
                }
                let candidates: Vec<usize> = (0..m).filter(|&c| !reached[c]).collect();
                let min_deg = candidates.iter().map(|&c| check_adj[c].len()).min().expect("some check unreached");
                let best: Vec<usize> = candidates.into_iter().filter(|&c| check_adj[c].len() == min_deg).collect();
                let c = *best.choose(&mut rng).expect("non-empty");
                check_adj[c].push(j);
                var_adj[j].push(c);
            }
        }
        for row in &mut check_adj {
            row.sort_unstable();
        }
        Self::from_checks(n, check_adj)
    }

    /// PEG construction retried over derived seeds until full rank.
    pub fn generate(n: usize, k: usize, seed: u64) -> Result<Self, LdpcError> {
        if k == 0 || k >= n {
            return Err(LdpcError::Construction(format!("invalid dimensions n={n}, k={k}")));
        }
        let mut last = None;
        for attempt in 0..64 {
            match Self::peg(n, n - k, DEFAULT_VAR_DEGREE.min(n - k), seed.wrapping_add(attempt)) {
                Ok(code) => return Ok(code),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    /// Process-wide cached code for `(n, k)`: a bundled matrix when one
    /// exists, otherwise a PEG construction with a fixed seed.
    pub fn standard(n: usize, k: usize) -> Result<Arc<Self>, LdpcError> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<LdpcCode>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(code) = cache.lock().expect("cache lock").get(&(n, k)) {
            return Ok(code.clone());
        }
        let code = match bundled_alist(n, k) {
            Some(text) => Self::from_alist(text)?,
            None => Self::generate(n, k, STANDARD_SEED)?,
        };
        let code = Arc::new(code);
        cache.lock().expect("cache lock").insert((n, k), code.clone());
        Ok(code)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.n - self.m
    }

    pub fn rate(&self) -> f64 {
        self.k() as f64 / self.n as f64
    }

    pub fn checks(&self) -> &[Vec<usize>] {
        &self.checks
    }

    pub fn info_positions(&self) -> &[usize] {
        &self.info_positions
    }

    pub fn encode(&self, info: &[u8]) -> Result<Vec<u8>, LdpcError> {
        let k = self.k();
        if info.len() != k {
            return Err(LdpcError::Length { expected: k, got: info.len() });
        }
        let mut packed = vec![0u64; words(k)];
        for (i, &b) in info.iter().enumerate() {
            if b & 1 == 1 {
                packed[i / 64] |= 1 << (i % 64);
            }
        }
        let mut cw = vec![0u8; self.n];
        for (&pos, &b) in self.info_positions.iter().zip(info) {
            cw[pos] = b & 1;
        }
        for (pos, mask) in &self.parity_eqs {
            let ones: u32 = mask.iter().zip(&packed).map(|(a, b)| (a & b).count_ones()).sum();
            cw[*pos] = (ones & 1) as u8;
        }
        Ok(cw)
    }

    pub fn syndrome_is_zero(&self, cw: &[u8]) -> bool {
        self.checks.iter().all(|row| row.iter().fold(0u8, |acc, &v| acc ^ (cw[v] & 1)) == 0)
    }

    /// Flooding normalized min-sum.
    pub fn decode(&self, llr: &[f64], max_iter: usize) -> Result<DecodeResult, LdpcError> {
        if llr.len() != self.n {
            return Err(LdpcError::Length { expected: self.n, got: llr.len() });
        }
        let ch: Vec<f64> = llr.iter().map(|l| if l.is_nan() { 0.0 } else { l.clamp(-LLR_CLIP, LLR_CLIP) }).collect();
        let n_edges: usize = self.checks.iter().map(Vec::len).sum();
        let mut c2v = vec![0.0; n_edges];
        let mut v2c = vec![0.0; n_edges];
        let mut post = ch.clone();
        let mut hard = vec![0u8; self.n];
        let mut converged = false;
        let mut iterations = 0;
        for it in 1..=max_iter {
            iterations = it;
            let mut e = 0;
            for row in &self.checks {
                for &v in row {
                    v2c[e] = post[v] - c2v[e];
                    e += 1;
                }
            }
            let mut e = 0;
            for row in &self.checks {
                let d = row.len();
                let msgs = &v2c[e..e + d];
                let (mut min1, mut min2, mut arg) = (f64::INFINITY, f64::INFINITY, 0);
                let mut sign = 1.0;
                for (i, &m) in msgs.iter().enumerate() {
                    let a = m.abs();
                    if m < 0.0 {
                        sign = -sign;
                    }
                    if a < min1 {
                        min2 = min1;
                        min1 = a;
                        arg = i;
                    } else if a < min2 {
                        min2 = a;
                    }
                }
                for i in 0..d {
                    let own = if msgs[i] < 0.0 { -1.0 } else { 1.0 };
                    let mag = if i == arg { min2 } else { min1 };
                    c2v[e + i] = MIN_SUM_NORMALIZATION * sign * own * mag;
                }
                e += d;
            }
            post.copy_from_slice(&ch);
            let mut e = 0;
            for row in &self.checks {
                for &v in row {
                    post[v] += c2v[e];
                    e += 1;
                }
            }
            for (h, p) in hard.iter_mut().zip(&post) {
                *h = u8::from(*p < 0.0);
            }
            if post.iter().all(|p| *p != 0.0) && self.syndrome_is_zero(&hard) {
                converged = true;
                break;
            }
        }
        let info = self.info_positions.iter().map(|&p| hard[p]).collect();
        Ok(DecodeResult { info, codeword: hard, converged, iterations })
    }

    pub fn to_alist(&self) -> String {
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); self.n];
        for (c, row) in self.checks.iter().enumerate() {
            for &v in row {
                cols[v].push(c);
            }
        }
        let max_col = cols.iter().map(Vec::len).max().unwrap_or(0);
        let max_row = self.checks.iter().map(Vec::len).max().unwrap_or(0);
        let line = |v: &[usize], width: usize| {
            let mut items: Vec<String> = v.iter().map(|x| (x + 1).to_string()).collect();
            items.resize(width, "0".into());
            items.join(" ")
        };
        let mut out = format!("{} {}\n{} {}\n", self.n, self.m, max_col, max_row);
        out += &cols.iter().map(|c| c.len().to_string()).collect::<Vec<_>>().join(" ");
        out += "\n";
        out += &self.checks.iter().map(|c| c.len().to_string()).collect::<Vec<_>>().join(" ");
        out += "\n";
        for c in &cols {
            out += &line(c, max_col);
            out += "\n";
        }
        for r in &self.checks {
            out += &line(r, max_row);
            out += "\n";
        }
        out
    }

    pub fn from_alist(text: &str) -> Result<Self, LdpcError> {
        let mut nums = text.split_whitespace().map(|t| t.parse::<usize>().map_err(|e| LdpcError::Alist(format!("{t:?}: {e}"))));
        let mut next = || nums.next().unwrap_or_else(|| Err(LdpcError::Alist("truncated".into())));
        let (n, m) = (next()?, next()?);
        let (max_col, max_row) = (next()?, next()?);
        let col_deg: Vec<usize> = (0..n).map(|_| next()).collect::<Result<_, _>>()?;
        let row_deg: Vec<usize> = (0..m).map(|_| next()).collect::<Result<_, _>>()?;
        // column lists are redundant with the row lists; read and cross-check
        let mut edges_from_cols = 0;
        for &d in &col_deg {
            let entries: Vec<usize> = (0..max_col).map(|_| next()).collect::<Result<_, _>>()?;
            edges_from_cols += entries.iter().filter(|&&e| e != 0).count();
            if entries.iter().filter(|&&e| e != 0).count() != d {
                return Err(LdpcError::Alist("column degree mismatch".into()));
            }
        }
        let mut checks = Vec::with_capacity(m);
        for &d in &row_deg {
            let entries: Vec<usize> = (0..max_row).map(|_| next()).collect::<Result<_, _>>()?;
            let row: Vec<usize> = entries.into_iter().filter(|&e| e != 0).map(|e| e - 1).collect();
            if row.len() != d {
                return Err(LdpcError::Alist("row degree mismatch".into()));
            }
            checks.push(row);
        }
        if edges_from_cols != checks.iter().map(Vec::len).sum::<usize>() {
            return Err(LdpcError::Alist("row and column lists disagree".into()));
        }
        Self::from_checks(n, checks)
    }
}

/// Seed used for the bundled parity matrices and on-demand constructions.
pub const STANDARD_SEED: u64 = 0x1d9c;

fn bundled_alist(n: usize, k: usize) -> Option<&'static str> {
    Some(match (n, k) {
        (384, 192) => include_str!("../data/ldpc/n384_k192.alist"),
        (576, 192) => include_str!("../data/ldpc/n576_k192.alist"),
        (768, 192) => include_str!("../data/ldpc/n768_k192.alist"),
        (672, 336) => include_str!("../data/ldpc/n672_k336.alist"),
        (1344, 672) => include_str!("../data/ldpc/n1344_k672.alist"),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_hamming_like_code() {
        let checks = vec![vec![0, 1, 2, 4], vec![1, 2, 3, 5], vec![0, 2, 3, 6]];
        let code = LdpcCode::from_checks(7, checks).unwrap();
        assert_eq!(code.k(), 4);
        for word in 0..16u8 {
            let info: Vec<u8> = (0..4).map(|i| word >> i & 1).collect();
            let cw = code.encode(&info).unwrap();
            assert!(code.syndrome_is_zero(&cw));
            let got: Vec<u8> = code.info_positions().iter().map(|&p| cw[p]).collect();
            assert_eq!(got, info);
        }
    }

    #[test]
    fn rank_deficient_rejected() {
        let checks = vec![vec![0, 1], vec![0, 1], vec![2, 3]];
        assert!(LdpcCode::from_checks(5, checks).is_err());
    }
}

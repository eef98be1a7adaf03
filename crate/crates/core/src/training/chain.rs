//! The differentiable downlink recorded on a tape: precoding, slot power
//! normalization, the sampled channel with frozen noise, and LMMSE
//! equalization.

use std::sync::Arc;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::channel::Numerology;

/// Per-RE constants of a batch of trials. Rows are trial-major: row
/// `b * res + i` is RE `i` of trial `b`.
#[derive(Debug, Clone)]
pub struct ChainInputs {
    pub trials: usize,
    pub res: usize,
    pub n_rx: usize,
    pub n_tx: usize,
    pub n_layer: usize,
    /// `[trials * res, n_rx, n_tx, 2]`.
    pub h: Tensor,
    /// `[trials * res, n_rx, 1, 2]`, already scaled to each trial's variance.
    pub noise: Tensor,
    /// Per-trial noise variance.
    pub sigma2: Vec<f64>,
}

impl ChainInputs {
    pub fn rows(&self) -> usize {
        self.trials * self.res
    }
}

/// Source index that expands decoder output `[B, n_sb, 2 n_tx n_layer]`
/// (entry `l * n_tx + tx`, interleaved re/im) into per-RE precoders
/// `[B * res, n_tx, n_layer, 2]`.
pub fn precoder_gather_index(num: &Numerology, n_layer: usize, trials: usize) -> Arc<[usize]> {
    let (nt, nsb, res) = (num.n_tx, num.n_subbands, num.n_res());
    let feat = 2 * nt * n_layer;
    let mut src = Vec::with_capacity(trials * res * feat);
    for b in 0..trials {
        for i in 0..res {
            let k = num.subband_of(i / num.n_symbols);
            let base = (b * nsb + k) * feat;
            for tx in 0..nt {
                for l in 0..n_layer {
                    let e = l * nt + tx;
                    src.push(base + 2 * e);
                    src.push(base + 2 * e + 1);
                }
            }
        }
    }
    src.into()
}

/// Conjugate transpose of a batch `[N, r, c, 2] -> [N, c, r, 2]`.
pub fn cadjoint(tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[3] != 2 {
        return Err(AutodiffError::Shape { node: "cadjoint".into(), detail: format!("{s:?}") });
    }
    let (n, r, c) = (s[0], s[1], s[2]);
    let mut src = Vec::with_capacity(n * r * c * 2);
    let mut sign = Vec::with_capacity(n * r * c * 2);
    for b in 0..n {
        for j in 0..c {
            for i in 0..r {
                let o = ((b * r + i) * c + j) * 2;
                src.extend([o, o + 1]);
                sign.extend([1.0, -1.0]);
            }
        }
    }
    tape.gather(x, vec![n, c, r, 2], src.into(), Some(sign.into()))
}

/// `x_hat = (G^H G + sigma2 I)^-1 G^H y` with `G = H P / alpha` and
/// `y = G s + n`, where `alpha^2` is the trial's mean per-RE transmit power
/// `|P s|^2`. `s` is `[N, n_layer, 1, 2]`, `pre` is `[N, n_tx, n_layer, 2]`;
/// returns `[N, 2 n_layer]`.
pub fn downlink_on_tape(tape: &mut Tape, s: Var, pre: Var, ch: &ChainInputs) -> Result<Var, AutodiffError> {
    let (n, l, nr) = (ch.rows(), ch.n_layer, ch.n_rx);
    let x = tape.cbmm(pre, s)?;
    let x = tape.reshape(x, vec![ch.trials, ch.res * ch.n_tx * 2])?;
    let x2 = tape.pow(x, 2.0);
    let pw = tape.sum_last(x2);
    let pw = tape.scale(pw, 1.0 / ch.res as f64);
    let inv_alpha = tape.pow(pw, -0.5);

    let h = tape.constant(ch.h.clone());
    let g = tape.cbmm(h, pre)?;
    let g = tape.reshape(g, vec![ch.trials, ch.res * nr * l * 2])?;
    let g = tape.mul_rows(g, inv_alpha)?;
    let g = tape.reshape(g, vec![n, nr, l, 2])?;

    let gs = tape.cbmm(g, s)?;
    let noise = tape.constant(ch.noise.clone());
    let y = tape.add(gs, noise)?;

    let gh = cadjoint(tape, g)?;
    let gram = tape.cbmm(gh, g)?;
    let mut reg = vec![0.0; n * l * l * 2];
    for (row, chunk) in reg.chunks_mut(l * l * 2).enumerate() {
        let s2 = ch.sigma2[row / ch.res];
        for d in 0..l {
            chunk[(d * l + d) * 2] = s2;
        }
    }
    let reg = tape.constant(Tensor::new(vec![n, l, l, 2], reg)?);
    let a = tape.add(gram, reg)?;
    let rhs = tape.cbmm(gh, y)?;
    let x_hat = tape.csolve(a, rhs)?;
    tape.reshape(x_hat, vec![n, 2 * l])
}

/// Mean SGCS between decoder output `dec` (`[B, n_sb, feat]`) and the
/// interleaved target eigenvectors `w` of the same shape.
pub fn sgcs_on_tape(tape: &mut Tape, dec: Var, w: &[f64]) -> Result<Var, AutodiffError> {
    let s = tape.shape(dec).to_vec();
    let feat = *s.last().unwrap_or(&0);
    let rows = tape.value(dec).len() / feat.max(1);
    if w.len() != rows * feat {
        return Err(AutodiffError::Shape { node: "sgcs".into(), detail: format!("{} targets for {s:?}", w.len()) });
    }
    let mut w1 = Vec::with_capacity(w.len());
    let mut w2 = Vec::with_capacity(w.len());
    let mut inv_wn = Vec::with_capacity(rows);
    for row in w.chunks(feat) {
        for c in row.chunks(2) {
            w1.extend([c[0], c[1]]);
            w2.extend([-c[1], c[0]]);
        }
        let n2: f64 = row.iter().map(|v| v * v).sum();
        inv_wn.push(if n2 > 0.0 { 1.0 / n2 } else { 0.0 });
    }
    let p = tape.reshape(dec, vec![rows, feat])?;
    let w1 = tape.constant(Tensor::new(vec![rows, feat], w1)?);
    let w2 = tape.constant(Tensor::new(vec![rows, feat], w2)?);
    let re = tape.mul(p, w1)?;
    let re = tape.sum_last(re);
    let im = tape.mul(p, w2)?;
    let im = tape.sum_last(im);
    let re2 = tape.pow(re, 2.0);
    let im2 = tape.pow(im, 2.0);
    let num = tape.add(re2, im2)?;
    let p2 = tape.pow(p, 2.0);
    let pn = tape.sum_last(p2);
    let inv_pn = tape.pow(pn, -1.0);
    let rho = tape.mul(num, inv_pn)?;
    let inv_wn = tape.constant(Tensor::new(vec![rows], inv_wn)?);
    let rho = tape.mul(rho, inv_wn)?;
    Ok(tape.mean_all(rho))
}

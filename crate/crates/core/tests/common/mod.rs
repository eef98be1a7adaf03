//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use num_complex::Complex64;
use phylink::autodiff::{gradient_check, random_tensor, Activation, AutodiffError, Graph, Mode, PowerScope, Tensor};
use phylink::channel::Numerology;
use phylink::linalg::CMatrix;
use phylink::modulation::{demodulator_graph, modulator_graph, ModemDims};
use phylink::rng::{complex_gaussian, rng_from_seed};
use phylink::training::{downlink_on_tape, ChainInputs, TrainConfig};

/// Es/N0 in dB to per-real-dimension noise variance for unit-energy symbols.
pub fn sigma2_for(esn0_db: f64) -> f64 {
    1.0 / (2.0 * 10f64.powf(esn0_db / 10.0))
}

/// BICM capacity of Gray QPSK by midpoint quadrature over the 2-D Gaussian,
/// with likelihood sums taken directly.
pub fn qpsk_quadrature(sigma2: f64) -> f64 {
    let a = 1.0 / 2f64.sqrt();
    // points by label b0 b1: I from b0, Q from b1
    let pts = [(a, a), (a, -a), (-a, a), (-a, -a)];
    let sd = sigma2.sqrt();
    let (n, span) = (600, 9.0);
    let h = 2.0 * span * sd / n as f64;
    let mut total = 0.0;
    for (label, &(xi, xq)) in pts.iter().enumerate() {
        for u in 0..n {
            let yi = xi - span * sd + (u as f64 + 0.5) * h;
            for v in 0..n {
                let yq = xq - span * sd + (v as f64 + 0.5) * h;
                let dens = (-((yi - xi).powi(2) + (yq - xq).powi(2)) / (2.0 * sigma2)).exp() / (2.0 * std::f64::consts::PI * sigma2);
                let lik: Vec<f64> =
                    pts.iter().map(|&(pi, pq)| (-((yi - pi).powi(2) + (yq - pq).powi(2)) / (2.0 * sigma2)).exp()).collect();
                let mut loss = 0.0;
                for bit in 0..2 {
                    let b = (label >> (1 - bit)) & 1;
                    let (mut same, mut other) = (0.0, 0.0);
                    for (p, l) in lik.iter().enumerate() {
                        if (p >> (1 - bit)) & 1 == b {
                            same += l;
                        } else {
                            other += l;
                        }
                    }
                    loss += (1.0 + other / same).log2();
                }
                total += 0.25 * dens * h * h * (2.0 - loss);
            }
        }
    }
    total
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> CMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    CMatrix::from_fn(rows, cols, |_, _| complex_gaussian(&mut rng, 1.0))
}

pub fn random_vec(n: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| complex_gaussian(&mut rng, 1.0)).collect()
}

/// Exhaustive ML search over `points^layers`: labels and `|y - H x|^2`.
pub fn brute_force_ml(h: &CMatrix<f64>, y: &[Complex64], points: &[Complex64]) -> (Vec<usize>, f64) {
    let (nr, nl, m) = (h.rows(), h.cols(), points.len());
    let mut best = (Vec::new(), f64::INFINITY);
    for idx in 0..m.pow(nl as u32) {
        let labels: Vec<usize> = (0..nl).map(|l| (idx / m.pow(l as u32)) % m).collect();
        let d: f64 = (0..nr)
            .map(|r| {
                let hx: Complex64 = (0..nl).map(|l| h[(r, l)] * points[labels[l]]).sum();
                (y[r] - hx).norm_sqr()
            })
            .sum();
        if d < best.1 {
            best = (labels, d);
        }
    }
    best
}

/// Max-log LLRs from the two nearest points per bit value, positive for 0.
pub fn two_minima_llrs(points: &[Complex64], bits: usize, y: Complex64, gain: f64, sigma2: f64) -> Vec<f64> {
    (0..bits)
        .map(|i| {
            let mut m = [f64::INFINITY; 2];
            for (p, x) in points.iter().enumerate() {
                let b = (p >> (bits - 1 - i)) & 1;
                m[b] = m[b].min((y - gain * x).norm_sqr() / sigma2);
            }
            m[1] - m[0]
        })
        .collect()
}

/// One graph per layer type with a matching random input.
pub fn layer_cases() -> Vec<(&'static str, Graph, Tensor)> {
    let mut cases: Vec<(&str, Graph, Tensor)> = vec![
        ("dense+relu", {
            let mut g = Graph::new(vec![4]);
            let d = g.dense("d", 0, 3);
            g.activation("r", d, Activation::Relu);
            g
        }, random_tensor(&[5, 4], 0.1, 30)),
        ("conv1x1", {
            let mut g = Graph::new(vec![3, 4]);
            g.conv1x1("c", 0, 2);
            g
        }, random_tensor(&[2, 3, 4], 0.1, 31)),
        ("batch_norm", {
            let mut g = Graph::new(vec![3]);
            g.batch_norm("bn", 0);
            g
        }, random_tensor(&[6, 3], 0.1, 32)),
        ("layer_norm", {
            let mut g = Graph::new(vec![5]);
            g.layer_norm("ln", 0);
            g
        }, random_tensor(&[3, 5], 0.1, 33)),
        ("attention", {
            let mut g = Graph::new(vec![3, 4]);
            g.attention("mha", 0, 2);
            g
        }, random_tensor(&[2, 3, 4], 0.1, 34)),
        ("residual+softmax", {
            let mut g = Graph::new(vec![4]);
            let d = g.dense("d", 0, 4);
            let r = g.residual_add("r", 0, d);
            g.activation("s", r, Activation::Softmax);
            g
        }, random_tensor(&[3, 4], 0.1, 35)),
        ("dense+sigmoid", {
            let mut g = Graph::new(vec![4]);
            let d = g.dense("d", 0, 3);
            g.activation("s", d, Activation::Sigmoid);
            g
        }, random_tensor(&[3, 4], 0.5, 41)),
        ("reshape", {
            let mut g = Graph::new(vec![2, 3]);
            let r = g.reshape("r", 0, vec![6]);
            g.dense("d", r, 2);
            g
        }, random_tensor(&[2, 2, 3], 0.1, 36)),
        ("unit_power_item", {
            let mut g = Graph::new(vec![4]);
            g.unit_power("p", 0, PowerScope::PerItem);
            g
        }, random_tensor(&[3, 4], 0.1, 37)),
        ("unit_power_batch", {
            let mut g = Graph::new(vec![4]);
            g.unit_power("p", 0, PowerScope::Batch);
            g
        }, random_tensor(&[3, 4], 0.1, 38)),
        ("transformer_block", {
            let mut g = Graph::new(vec![3, 4]);
            g.transformer_block("blk", 0, 2);
            g
        }, random_tensor(&[2, 3, 4], 0.1, 39)),
    ];
    for (_, g, _) in &mut cases {
        g.init_weights(40);
        // move norm gains/shifts away from 1/0 so their gradients are exercised
        for p in g.params_mut() {
            for (i, v) in p.data_mut().iter_mut().enumerate() {
                *v += 0.05 * ((i % 7) as f64 - 3.0) / 3.0;
            }
        }
    }
    cases
}

/// Worst relative finite-difference error through
/// modulator -> precoding -> fixed channel -> LMMSE -> demodulator, with
/// respect to the modulator input and the precoder.
pub fn composite_chain_error(step: f64) -> Result<f64, AutodiffError> {
    let (trials, res, n_rx, n_tx, n_layer, bits) = (2, 3, 2, 3, 2, 2);
    let rows = trials * res;
    let dims = ModemDims { dense_units: 6, n_dense: 1, filters: 6, n_res: 1 };
    let mut modg = modulator_graph(bits, n_layer, dims);
    modg.init_weights(11);
    let mut demod = demodulator_graph(bits, n_layer, dims);
    demod.init_weights(12);
    modg.set_mode(Mode::Train);
    demod.set_mode(Mode::Train);

    let h = random_tensor(&[rows, n_rx, n_tx, 2], 0.7, 13);
    let noise = random_tensor(&[rows, n_rx, 1, 2], 0.05, 14);
    let chain = ChainInputs { trials, res, n_rx, n_tx, n_layer, h, noise, sigma2: vec![0.1, 0.2] };
    let bits_in = random_tensor(&[rows, bits], 1.0, 15);
    let pre = random_tensor(&[rows, n_tx, n_layer, 2], 0.5, 16);

    gradient_check(
        |tape, v| {
            let (mut m, mut d) = (modg.clone(), demod.clone());
            let (s, _) = m.forward_on(tape, v[0])?;
            let s = tape.reshape(s, vec![rows, n_layer, 1, 2])?;
            let x_hat = downlink_on_tape(tape, s, v[1], &chain)?;
            Ok(d.forward_on(tape, x_hat)?.0)
        },
        &[bits_in, pre],
        step,
    )
}

/// Small but complete training configuration for fast pipeline tests.
pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        numerology: Numerology { n_subcarriers: 6, n_symbols: 2, n_tx: 4, n_rx: 2, n_subbands: 3, subcarrier_spacing_hz: 30e3 },
        n_layer: 2,
        bits_per_re: 2,
        modem_dims: ModemDims { dense_units: 12, n_dense: 2, filters: 12, n_res: 1 },
        codec_dims: phylink::csi::CodecDims { embedding: 8, heads: 2, blocks: 1 },
        batch: 4,
        steps_phase1: 6,
        steps_phase2: 4,
        validation_trials: 4,
        ..TrainConfig::default()
    }
}

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::ModulationError;
use crate::autodiff::{load_bundle, save_bundle, Activation, Graph, ModelBundle, NodeId, PowerScope, Tensor};

/// Widths of the modulator and demodulator networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModemDims {
    /// Units of each hidden dense layer of the modulator.
    pub dense_units: usize,
    /// Hidden dense layers of the modulator.
    pub n_dense: usize,
    /// Filters of the demodulator convolutions.
    pub filters: usize,
    /// Residual blocks of the demodulator.
    pub n_res: usize,
}

impl ModemDims {
    /// Full-size networks.
    pub const PAPER: Self = Self { dense_units: 256, n_dense: 4, filters: 256, n_res: 4 };
    /// Reduced widths for single-core training runs.
    pub const DESK: Self = Self { dense_units: 64, n_dense: 4, filters: 64, n_res: 2 };
}

/// Modulator: `bits_per_re` inputs, `n_dense` ReLU dense layers, a dense
/// output of `2 * n_layer` reals and batch unit-power normalization.
pub fn modulator_graph(bits_per_re: usize, n_layer: usize, dims: ModemDims) -> Graph {
    let mut g = Graph::new(vec![bits_per_re]);
    let mut x: NodeId = 0;
    for i in 0..dims.n_dense {
        let d = g.dense(&format!("dense{i}"), x, dims.dense_units);
        x = g.activation(&format!("relu{i}"), d, Activation::Relu);
    }
    let out = g.dense("out", x, 2 * n_layer);
    g.unit_power("norm", out, PowerScope::Batch);
    g
}

/// Demodulator: 1x1 input convolution, residual blocks of
/// `[BN, ReLU, conv, BN, ReLU, conv] + skip`, and a 1x1 output convolution
/// to one LLR per bit.
pub fn demodulator_graph(bits_per_re: usize, n_layer: usize, dims: ModemDims) -> Graph {
    let mut g = Graph::new(vec![2 * n_layer]);
    let mut x = g.conv1x1("conv_in", 0, dims.filters);
    for r in 0..dims.n_res {
        let b1 = g.batch_norm(&format!("res{r}.bn1"), x);
        let a1 = g.activation(&format!("res{r}.relu1"), b1, Activation::Relu);
        let c1 = g.conv1x1(&format!("res{r}.conv1"), a1, dims.filters);
        let b2 = g.batch_norm(&format!("res{r}.bn2"), c1);
        let a2 = g.activation(&format!("res{r}.relu2"), b2, Activation::Relu);
        let c2 = g.conv1x1(&format!("res{r}.conv2"), a2, dims.filters);
        x = g.residual_add(&format!("res{r}.add"), x, c2);
    }
    g.conv1x1("conv_out", x, bits_per_re);
    g
}

/// Maps bits to network inputs (`0 -> +1`, `1 -> -1`).
pub fn bits_to_input(bits: &[u8], bits_per_re: usize) -> Result<Tensor, ModulationError> {
    if bits.len() % bits_per_re != 0 {
        return Err(ModulationError::Length { len: bits.len(), multiple: bits_per_re });
    }
    let data = bits.iter().map(|&b| 1.0 - 2.0 * (b & 1) as f64).collect();
    Tensor::new(vec![bits.len() / bits_per_re, bits_per_re], data).map_err(|e| ModulationError::Shape(e.to_string()))
}

/// Every bit pattern of `bits` bits, pattern `p` with its first bit as MSB.
pub fn all_patterns(bits: usize) -> Vec<u8> {
    (0..1usize << bits).flat_map(|p| (0..bits).map(move |i| ((p >> (bits - 1 - i)) & 1) as u8)).collect()
}

/// Learned multi-layer modulator/demodulator pair.
#[derive(Debug, Clone)]
pub struct CrossLayerModulator {
    pub bits_per_re: usize,
    pub n_layer: usize,
    pub dims: ModemDims,
    pub modulator: Graph,
    pub demodulator: Graph,
}

/// Largest payload whose full pattern set is enumerated for calibration.
pub const MAX_ENUMERABLE_BITS: usize = 16;

impl CrossLayerModulator {
    pub fn new(bits_per_re: usize, n_layer: usize, dims: ModemDims, seed: u64) -> Self {
        let mut modulator = modulator_graph(bits_per_re, n_layer, dims);
        let mut demodulator = demodulator_graph(bits_per_re, n_layer, dims);
        modulator.init_weights(seed);
        demodulator.init_weights(seed ^ 0xde);
        let mut m = Self { bits_per_re, n_layer, dims, modulator, demodulator };
        m.calibrate().expect("fresh graphs accept their own input shape");
        m
    }

    /// Freezes the modulator's power normalization to the exact average over
    /// all bit patterns (a no-op for payloads too large to enumerate, which
    /// keep the running estimate).
    pub fn calibrate(&mut self) -> Result<(), ModulationError> {
        if self.bits_per_re > MAX_ENUMERABLE_BITS {
            return Ok(());
        }
        let input = bits_to_input(&all_patterns(self.bits_per_re), self.bits_per_re)?;
        self.modulator.calibrate_power(&input).map_err(|e| ModulationError::Shape(e.to_string()))
    }

    /// Per-RE layer symbols, `n_layer` per RE, for concatenated per-RE bits.
    pub fn modulate(&self, bits: &[u8]) -> Result<Vec<Complex64>, ModulationError> {
        let input = bits_to_input(bits, self.bits_per_re)?;
        let out = self.modulator.infer(&input).map_err(|e| ModulationError::Shape(e.to_string()))?;
        Ok(out.data().chunks(2).map(|c| Complex64::new(c[0], c[1])).collect())
    }

    /// LLRs (positive favours bit 0) from equalized per-RE layer vectors.
    pub fn demodulate(&self, x_hat: &[Complex64]) -> Result<Vec<f64>, ModulationError> {
        if x_hat.len() % self.n_layer != 0 {
            return Err(ModulationError::Length { len: x_hat.len(), multiple: self.n_layer });
        }
        let data: Vec<f64> = x_hat.iter().flat_map(|z| [z.re, z.im]).collect();
        let input = Tensor::new(vec![x_hat.len() / self.n_layer, 2 * self.n_layer], data)
            .map_err(|e| ModulationError::Shape(e.to_string()))?;
        let out = self.demodulator.infer(&input).map_err(|e| ModulationError::Shape(e.to_string()))?;
        Ok(out.into_data())
    }

    /// The learned constellation: for each bit pattern (first bit MSB), its
    /// `n_layer` complex coordinates.
    pub fn constellation(&self) -> Result<Vec<Vec<Complex64>>, ModulationError> {
        if self.bits_per_re > MAX_ENUMERABLE_BITS {
            return Err(ModulationError::TooLarge(self.bits_per_re));
        }
        let symbols = self.modulate(&all_patterns(self.bits_per_re))?;
        Ok(symbols.chunks(self.n_layer).map(|c| c.to_vec()).collect())
    }

    /// CSV dump: `pattern,l0_re,l0_im,l1_re,...`.
    pub fn constellation_csv(&self) -> Result<String, ModulationError> {
        let mut out = String::from("pattern");
        for l in 0..self.n_layer {
            out += &format!(",l{l}_re,l{l}_im");
        }
        out.push('\n');
        for (p, pts) in self.constellation()?.iter().enumerate() {
            out += &format!("{p:0width$b}", width = self.bits_per_re);
            for z in pts {
                out += &format!(",{},{}", z.re, z.im);
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_bundle(&self) -> ModelBundle {
        let mut b = ModelBundle::default();
        b.graphs.insert("modulator".into(), self.modulator.clone());
        b.graphs.insert("demodulator".into(), self.demodulator.clone());
        b.meta = serde_json::json!({
            "kind": "cross-layer-modem",
            "bits_per_re": self.bits_per_re,
            "n_layer": self.n_layer,
            "dims": self.dims,
        });
        b
    }

    pub fn from_bundle(mut b: ModelBundle) -> Result<Self, ModulationError> {
        let bad = |what: &str| ModulationError::Shape(format!("model bundle lacks {what}"));
        let bits_per_re = b.meta["bits_per_re"].as_u64().ok_or_else(|| bad("bits_per_re"))? as usize;
        let n_layer = b.meta["n_layer"].as_u64().ok_or_else(|| bad("n_layer"))? as usize;
        let dims: ModemDims = serde_json::from_value(b.meta["dims"].clone()).map_err(|_| bad("dims"))?;
        let modulator = b.graphs.remove("modulator").ok_or_else(|| bad("modulator"))?;
        let demodulator = b.graphs.remove("demodulator").ok_or_else(|| bad("demodulator"))?;
        Ok(Self { bits_per_re, n_layer, dims, modulator, demodulator })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModulationError> {
        save_bundle(&self.to_bundle(), path).map_err(|e| ModulationError::Shape(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ModulationError> {
        Self::from_bundle(load_bundle(path).map_err(|e| ModulationError::Shape(e.to_string()))?)
    }
}

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{CsiError, CsiMatrix};
use crate::autodiff::{load_bundle, save_bundle, Graph, ModelBundle, PowerScope, Tensor};
use crate::linalg::CMatrix;
use crate::precoding::Precoder;

/// Bit-form feedback overhead.
pub const CSI_BITS: usize = 192;
/// Symbol-form feedback length, one complex symbol per uplink RE.
pub const CSI_SYMBOLS: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecDims {
    pub embedding: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl CodecDims {
    pub const PAPER: Self = Self { embedding: 256, heads: 4, blocks: 6 };
    pub const DESK: Self = Self { embedding: 64, heads: 4, blocks: 2 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "form", content = "length")]
pub enum FeedbackForm {
    /// Sign-quantized bottleneck of this many bits.
    Bits(usize),
    /// Unit-power complex symbols sent straight onto uplink REs.
    Symbols(usize),
}

impl FeedbackForm {
    /// Real width of the bottleneck.
    pub fn width(&self) -> usize {
        match *self {
            Self::Bits(n) => n,
            Self::Symbols(n) => 2 * n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedbackPayload {
    Bits(Vec<u8>),
    Symbols(Vec<Complex64>),
}

impl FeedbackPayload {
    /// Real-valued decoder input: `1 - 2b` for bits, `(re, im)` pairs for
    /// symbols.
    pub fn to_reals(&self) -> Vec<f64> {
        match self {
            Self::Bits(b) => b.iter().map(|&b| 1.0 - 2.0 * (b & 1) as f64).collect(),
            Self::Symbols(s) => s.iter().flat_map(|z| [z.re, z.im]).collect(),
        }
    }

    /// Hex dump for bits, CSV `re,im` lines for symbols.
    pub fn dump(&self) -> String {
        match self {
            Self::Bits(b) => b
                .chunks(8)
                .map(|c| {
                    let byte = c.iter().enumerate().fold(0u8, |acc, (i, &x)| acc | ((x & 1) << (7 - i)));
                    format!("{byte:02x}")
                })
                .collect(),
            Self::Symbols(s) => s.iter().map(|z| format!("{},{}\n", z.re, z.im)).collect(),
        }
    }
}

/// Per-subband real features: interleaved `(re, im)` of the concatenated
/// eigenvectors, batched as `[B, n_sb, 2 n_tx n_layer]`.
pub fn csi_to_tensor(ws: &[CsiMatrix]) -> Result<Tensor, CsiError> {
    let first = ws.first().ok_or_else(|| CsiError::Shape("empty CSI batch".into()))?;
    let (n_sb, width) = (first.n_subbands(), 2 * first.n_tx * first.n_layer);
    let mut data = Vec::with_capacity(ws.len() * n_sb * width);
    for w in ws {
        if w.n_subbands() != n_sb || 2 * w.n_tx * w.n_layer != width {
            return Err(CsiError::Shape("CSI batch items differ in shape".into()));
        }
        data.extend(w.rows.iter().flatten().flat_map(|z| [z.re, z.im]));
    }
    Ok(Tensor::new(vec![ws.len(), n_sb, width], data)?)
}

/// Transformer encoder/decoder pair mapping eigenvector CSI to feedback and
/// feedback to precoders.
#[derive(Debug, Clone)]
pub struct CsiCodec {
    pub n_sb: usize,
    pub n_tx: usize,
    pub n_layer: usize,
    pub form: FeedbackForm,
    pub dims: CodecDims,
    pub encoder: Graph,
    pub decoder: Graph,
}

fn encoder_graph(n_sb: usize, feat: usize, form: FeedbackForm, dims: CodecDims) -> Graph {
    let mut g = Graph::new(vec![n_sb, feat]);
    let mut x = g.dense("embed", 0, dims.embedding);
    for b in 0..dims.blocks {
        x = g.transformer_block(&format!("block{b}"), x, dims.heads);
    }
    let n = g.layer_norm("ln_out", x);
    let p = g.dense("proj", n, feat);
    let flat = g.reshape("flatten", p, vec![n_sb * feat]);
    let head = g.dense("head", flat, form.width());
    match form {
        FeedbackForm::Bits(_) => g.sign_quantize("quantize", head),
        FeedbackForm::Symbols(_) => g.unit_power("normalize", head, PowerScope::PerItem),
    };
    g
}

fn decoder_graph(n_sb: usize, feat: usize, form: FeedbackForm, dims: CodecDims) -> Graph {
    let mut g = Graph::new(vec![form.width()]);
    let e = g.dense("expand", 0, n_sb * feat);
    let r = g.reshape("unflatten", e, vec![n_sb, feat]);
    let mut x = g.dense("embed", r, dims.embedding);
    for b in 0..dims.blocks {
        x = g.transformer_block(&format!("block{b}"), x, dims.heads);
    }
    let n = g.layer_norm("ln_out", x);
    g.dense("out", n, feat);
    g
}

impl CsiCodec {
    pub fn new(n_sb: usize, n_tx: usize, n_layer: usize, form: FeedbackForm, dims: CodecDims, seed: u64) -> Self {
        let feat = 2 * n_tx * n_layer;
        let mut encoder = encoder_graph(n_sb, feat, form, dims);
        let mut decoder = decoder_graph(n_sb, feat, form, dims);
        encoder.init_weights(seed);
        decoder.init_weights(seed ^ 0xc5);
        Self { n_sb, n_tx, n_layer, form, dims, encoder, decoder }
    }

    pub fn encode(&self, w: &CsiMatrix) -> Result<FeedbackPayload, CsiError> {
        if w.n_subbands() != self.n_sb || w.n_tx != self.n_tx || w.n_layer != self.n_layer {
            return Err(CsiError::Shape("CSI does not match codec dimensions".into()));
        }
        let out = self.encoder.infer(&csi_to_tensor(std::slice::from_ref(w))?)?;
        Ok(self.payload_from_reals(out.data()))
    }

    pub fn payload_from_reals(&self, v: &[f64]) -> FeedbackPayload {
        match self.form {
            FeedbackForm::Bits(_) => FeedbackPayload::Bits(v.iter().map(|&x| (x < 0.0) as u8).collect()),
            FeedbackForm::Symbols(_) => FeedbackPayload::Symbols(v.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect()),
        }
    }

    pub fn decode(&self, payload: &FeedbackPayload) -> Result<Precoder, CsiError> {
        let reals = payload.to_reals();
        if reals.len() != self.form.width() {
            return Err(CsiError::Shape(format!("payload width {} vs {}", reals.len(), self.form.width())));
        }
        let out = self.decoder.infer(&Tensor::new(vec![1, reals.len()], reals)?)?;
        Ok(self.precoders_from_reals(out.data()).remove(0))
    }

    /// Splits decoder output `[B, n_sb, 2 n_tx n_layer]` into precoders.
    pub fn precoders_from_reals(&self, v: &[f64]) -> Vec<Precoder> {
        let feat = 2 * self.n_tx * self.n_layer;
        v.chunks(self.n_sb * feat)
            .map(|item| {
                let per_subband = item
                    .chunks(feat)
                    .map(|sb| CMatrix::from_fn(self.n_tx, self.n_layer, |tx, l| {
                        let e = l * self.n_tx + tx;
                        Complex64::new(sb[2 * e], sb[2 * e + 1])
                    }))
                    .collect();
                Precoder { per_subband }
            })
            .collect()
    }

    pub fn to_bundle(&self) -> ModelBundle {
        let mut b = ModelBundle::default();
        b.graphs.insert("encoder".into(), self.encoder.clone());
        b.graphs.insert("decoder".into(), self.decoder.clone());
        b.meta = serde_json::json!({
            "kind": "csi-codec",
            "n_sb": self.n_sb,
            "n_tx": self.n_tx,
            "n_layer": self.n_layer,
            "form": self.form,
            "dims": self.dims,
        });
        b
    }

    pub fn from_bundle(mut b: ModelBundle) -> Result<Self, CsiError> {
        let bad = |what: &str| CsiError::Shape(format!("model bundle lacks {what}"));
        let get = |k: &str| b.meta[k].as_u64().map(|v| v as usize).ok_or_else(|| bad(k));
        let (n_sb, n_tx, n_layer) = (get("n_sb")?, get("n_tx")?, get("n_layer")?);
        let form = serde_json::from_value(b.meta["form"].clone()).map_err(|_| bad("form"))?;
        let dims = serde_json::from_value(b.meta["dims"].clone()).map_err(|_| bad("dims"))?;
        let encoder = b.graphs.remove("encoder").ok_or_else(|| bad("encoder"))?;
        let decoder = b.graphs.remove("decoder").ok_or_else(|| bad("decoder"))?;
        Ok(Self { n_sb, n_tx, n_layer, form, dims, encoder, decoder })
    }

    pub fn save(&self, path: &Path) -> Result<(), CsiError> {
        Ok(save_bundle(&self.to_bundle(), path)?)
    }

    pub fn load(path: &Path) -> Result<Self, CsiError> {
        Self::from_bundle(load_bundle(path)?)
    }
}

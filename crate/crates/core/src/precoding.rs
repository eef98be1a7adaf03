//! Per-subband precoders, the eigenvector baseline and slot power
//! normalization.

use num_complex::Complex64;
use thiserror::Error;

use crate::channel::{Numerology, ResourceGrid};
use crate::csi::CsiMatrix;
use crate::linalg::CMatrix;

#[derive(Debug, Error)]
pub enum PrecodingError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot normalize an all-zero grid")]
    ZeroGrid,
}

/// Column-norm threshold below which a layer counts as switched off.
pub const PRUNED_LAYER_NORM: f64 = 1e-6;

/// One `n_tx x n_layer` matrix per subband.
#[derive(Debug, Clone, PartialEq)]
pub struct Precoder {
    pub per_subband: Vec<CMatrix<f64>>,
}

impl Precoder {
    pub fn new(per_subband: Vec<CMatrix<f64>>) -> Result<Self, PrecodingError> {
        let first = per_subband.first().ok_or_else(|| PrecodingError::Shape("no subbands".into()))?;
        let (r, c) = (first.rows(), first.cols());
        if per_subband.iter().any(|p| p.rows() != r || p.cols() != c) {
            return Err(PrecodingError::Shape("subband precoders differ in shape".into()));
        }
        if per_subband.iter().any(|p| !p.is_finite()) {
            return Err(PrecodingError::Shape("non-finite precoder entry".into()));
        }
        Ok(Self { per_subband })
    }

    pub fn n_subbands(&self) -> usize {
        self.per_subband.len()
    }

    pub fn n_tx(&self) -> usize {
        self.per_subband[0].rows()
    }

    pub fn n_layer(&self) -> usize {
        self.per_subband[0].cols()
    }

    /// Columns of subband `k` concatenated layer by layer.
    pub fn flat(&self, k: usize) -> Vec<Complex64> {
        let p = &self.per_subband[k];
        (0..p.cols()).flat_map(|l| p.column(l)).collect()
    }

    /// Layers whose column norm stays below [`PRUNED_LAYER_NORM`] in every
    /// subband.
    pub fn pruned_layers(&self) -> Vec<usize> {
        (0..self.n_layer())
            .filter(|&l| {
                self.per_subband
                    .iter()
                    .all(|p| p.column(l).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt() < PRUNED_LAYER_NORM)
            })
            .collect()
    }
}

/// Uses each subband's fed-back eigenvectors directly as its precoder.
pub fn eigen_precoder(w: &CsiMatrix) -> Precoder {
    let per_subband = (0..w.n_subbands())
        .map(|k| {
            let mut p = CMatrix::zeros(w.n_tx, w.n_layer);
            for l in 0..w.n_layer {
                p.set_column(l, w.eigenvector(k, l));
            }
            p
        })
        .collect();
    Precoder { per_subband }
}

/// `x_{f,t} = P_{subband(f)} s_{f,t}` with `s` holding `n_layer` symbols
/// per RE in RE order.
pub fn apply_precoding(p: &Precoder, s: &[Complex64], num: &Numerology) -> Result<ResourceGrid, PrecodingError> {
    let n_layer = p.n_layer();
    if s.len() != num.n_res() * n_layer {
        return Err(PrecodingError::Shape(format!("{} symbols for {} REs x {n_layer} layers", s.len(), num.n_res())));
    }
    if p.n_subbands() != num.n_subbands || p.n_tx() != num.n_tx {
        return Err(PrecodingError::Shape(format!(
            "precoder is {} subbands x {} ports, numerology {} x {}",
            p.n_subbands(),
            p.n_tx(),
            num.n_subbands,
            num.n_tx
        )));
    }
    let mut grid = ResourceGrid::zeros(num.n_tx, num.n_subcarriers, num.n_symbols);
    for f in 0..num.n_subcarriers {
        let pk = &p.per_subband[num.subband_of(f)];
        for t in 0..num.n_symbols {
            let re = num.re_index(f, t);
            let x = pk.mul_vec(&s[re * n_layer..(re + 1) * n_layer]);
            grid.re_mut(re).copy_from_slice(&x);
        }
    }
    Ok(grid)
}

/// Scales the grid to unit mean per-RE transmit power summed over ports.
pub fn normalize_power(x: &ResourceGrid) -> Result<ResourceGrid, PrecodingError> {
    let p = x.mean_re_power();
    if !(p > 0.0) || !p.is_finite() {
        return Err(PrecodingError::ZeroGrid);
    }
    let s = 1.0 / p.sqrt();
    let mut out = x.clone();
    out.as_mut_slice().iter_mut().for_each(|z| *z *= s);
    Ok(out)
}

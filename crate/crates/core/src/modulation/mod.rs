//! Classical Gray QAM and the learned cross-layer modulator/demodulator.

mod learned;
mod qam;

pub use learned::{
    all_patterns, bits_to_input, demodulator_graph, modulator_graph, CrossLayerModulator, ModemDims,
    MAX_ENUMERABLE_BITS,
};
pub use qam::{qam_name, QamConstellation};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModulationError {
    #[error("unsupported QAM order: {0} bits per symbol")]
    Order(usize),
    #[error("input length {len} is not a multiple of {multiple}")]
    Length { len: usize, multiple: usize },
    #[error("{0} bits per RE is too many to enumerate")]
    TooLarge(usize),
    #[error("model shape: {0}")]
    Shape(String),
}

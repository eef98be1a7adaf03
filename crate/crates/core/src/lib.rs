//! Link-level MIMO-OFDM simulation with learned cross-layer modulation,
//! precoding and CSI feedback.
//!
//! Numerical modules are generic over the scalar type (`f32` or `f64`);
//! the aliases below fix it to `f64`, which every learned component uses.

pub mod agent;
pub mod autodiff;
pub mod capacity;
pub mod channel;
pub mod csi;
pub mod detection;
pub mod ldpc;
pub mod linalg;
pub mod modulation;
pub mod precoding;
pub mod rng;
pub mod sim;
pub mod training;

pub use num_complex::Complex64;

pub type CMatrix64 = linalg::CMatrix<f64>;
pub type Qam64 = modulation::QamConstellation<f64>;
pub type ConstellationSet64 = capacity::ConstellationSet<f64>;
pub type EqualizerOutput64 = detection::EqualizerOutput<f64>;
pub type KBestOutput64 = detection::KBestOutput<f64>;

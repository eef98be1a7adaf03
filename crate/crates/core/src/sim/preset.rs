use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CsiScheme, LinkConfig, ModulationScheme, PrecodingScheme, SimError, CODEC_FILE, MODEM_FILE};
use crate::channel::Numerology;

/// Numerology and layer cap of a preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 8x2 antennas, 24 subcarriers, at most 2 layers.
    Desk,
    /// 32x4 antennas, 144 subcarriers, at most 4 layers.
    Paper,
}

impl Scale {
    pub fn numerology(&self) -> Numerology {
        match self {
            Self::Desk => Numerology::desk(),
            Self::Paper => Numerology::paper(),
        }
    }

    pub fn max_layers(&self) -> usize {
        match self {
            Self::Desk => 2,
            Self::Paper => 4,
        }
    }
}

const QAM_ORDERS: [usize; 4] = [2, 4, 6, 8];

/// Candidate links of a named scenario at `payload` bits per RE.
///
/// `baseline5g` enumerates every QAM order and layer count with
/// `bits * layers = payload`. The `cmo` presets use the learned modem and
/// codec from `models` (bit-form feedback for `cmo1`/`cmo2`, symbol-form
/// for `cmo3`) at the scale's maximum layer count.
pub fn scenario_preset(name: &str, scale: Scale, payload: usize, models: Option<&Path>) -> Result<Vec<LinkConfig>, SimError> {
    let num = scale.numerology();
    let name = name.to_ascii_lowercase();
    match name.as_str() {
        "baseline5g" => {
            let v: Vec<LinkConfig> = QAM_ORDERS
                .iter()
                .filter(|&&m| payload % m == 0 && payload / m >= 1 && payload / m <= scale.max_layers())
                .map(|&m| LinkConfig::baseline(num, m, payload / m))
                .collect();
            if v.is_empty() {
                return Err(SimError::Config(format!("no QAM factorization of {payload} bits/RE")));
            }
            Ok(v)
        }
        "cmo1" | "cmo2" | "cmo3" => {
            let dir = models.ok_or_else(|| SimError::MissingModels(vec![MODEM_FILE.into(), CODEC_FILE.into()]))?;
            let missing: Vec<_> = [MODEM_FILE, CODEC_FILE].iter().map(|f| dir.join(f)).filter(|p| !p.exists()).collect();
            if !missing.is_empty() {
                return Err(SimError::MissingModels(missing));
            }
            let l = scale.max_layers();
            let mut c = LinkConfig::baseline(num, 2, l);
            c.name = format!("{name}-{payload}b");
            c.modulation = ModulationScheme::Learned;
            c.precoding = PrecodingScheme::Learned;
            c.csi = if name == "cmo3" { CsiScheme::LearnedSymbols } else { CsiScheme::LearnedBits };
            c.payload_bits_per_re = payload;
            c.models = Some(dir.to_path_buf());
            Ok(vec![c])
        }
        other => Err(SimError::Config(format!("unknown preset {other:?} (expected cmo1, cmo2, cmo3 or baseline5g)"))),
    }
}

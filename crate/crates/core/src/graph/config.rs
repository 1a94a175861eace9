use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How many earlier levels a dense block fuses, or the multi-scale special
/// case (multi-input on the encoder, multi-output on the decoder).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DenseDegree {
    Degree(usize),
    Multi,
}

impl DenseDegree {
    pub const NONE: DenseDegree = DenseDegree::Degree(0);

    pub fn is_none(&self) -> bool {
        *self == Self::NONE
    }
}

impl Default for DenseDegree {
    fn default() -> Self {
        Self::NONE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CrossMode {
    #[default]
    Skip,
    Upper,
    Lower,
    Cross3,
    Cross5,
}

impl CrossMode {
    pub const ALL: [CrossMode; 5] = [
        CrossMode::Skip,
        CrossMode::Upper,
        CrossMode::Lower,
        CrossMode::Cross3,
        CrossMode::Cross5,
    ];

    /// Encoder levels feeding the skip site of decoder level `level`, clamped
    /// to the non-bottleneck encoder levels `1..=depth-1`.
    pub fn source_levels(&self, level: usize, depth: usize) -> Vec<usize> {
        let (lo, hi) = match self {
            CrossMode::Skip => (level, level),
            CrossMode::Upper => (level, level + 2),
            CrossMode::Lower => (level.saturating_sub(2), level),
            CrossMode::Cross3 => (level.saturating_sub(1), level + 1),
            CrossMode::Cross5 => (level.saturating_sub(2), level + 2),
        };
        (lo.max(1)..=hi.min(depth - 1)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum UpsampleMode {
    #[default]
    TransposedConv2,
    NearestUp2,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub enc_dense: DenseDegree,
    pub dec_dense: DenseDegree,
    pub cross_mode: CrossMode,
    pub upsample_mode: UpsampleMode,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            base_channels: 32,
            input_channels: 1,
            num_classes: 2,
            enc_dense: DenseDegree::NONE,
            dec_dense: DenseDegree::NONE,
            cross_mode: CrossMode::Skip,
            upsample_mode: UpsampleMode::TransposedConv2,
        }
    }
}

impl ArchConfig {
    pub fn unet(depth: usize, base_channels: usize) -> Self {
        Self {
            depth,
            base_channels,
            ..Self::default()
        }
    }

    pub fn with_dense(mut self, enc: DenseDegree, cross: CrossMode, dec: DenseDegree) -> Self {
        self.enc_dense = enc;
        self.cross_mode = cross;
        self.dec_dense = dec;
        self
    }

    pub fn is_baseline(&self) -> bool {
        self.enc_dense.is_none() && self.dec_dense.is_none() && self.cross_mode == CrossMode::Skip
    }

    /// Same backbone with every dense family switched off.
    pub fn baseline(&self) -> Self {
        self.clone()
            .with_dense(DenseDegree::NONE, CrossMode::Skip, DenseDegree::NONE)
    }

    /// Feature channels of encoder/decoder level `level` (1-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth < 2 {
            return bad(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.base_channels == 0 || self.input_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.base_channels.checked_shl(self.depth as u32 - 1).is_none() || self.depth > 16 {
            return bad(format!("depth {} is too large", self.depth));
        }
        for (name, d) in [("enc_dense", self.enc_dense), ("dec_dense", self.dec_dense)] {
            if let DenseDegree::Degree(n) = d {
                if n > self.depth - 1 {
                    return bad(format!(
                        "{name} = {n} exceeds depth - 1 = {}",
                        self.depth - 1
                    ));
                }
            }
        }
        if self.cross_mode == CrossMode::Cross5 && self.depth < 3 {
            return bad("cross5 requires depth >= 3".into());
        }
        Ok(())
    }

    /// Name in the `encoder_n-cross_k-decoder_n` style; `unet` for the baseline.
    pub fn variant_name(&self) -> String {
        if self.is_baseline() {
            return "unet".into();
        }
        let enc = match self.enc_dense {
            DenseDegree::Multi => "Min".to_string(),
            DenseDegree::Degree(0) => "∅".to_string(),
            DenseDegree::Degree(n) => format!("encoder_{n}"),
        };
        let cross = match self.cross_mode {
            CrossMode::Skip => "∅",
            CrossMode::Upper => "upper",
            CrossMode::Lower => "lower",
            CrossMode::Cross3 => "cross_3",
            CrossMode::Cross5 => "cross_5",
        };
        let dec = match self.dec_dense {
            DenseDegree::Multi => "Mout".to_string(),
            DenseDegree::Degree(0) => "∅".to_string(),
            DenseDegree::Degree(n) => format!("decoder_{n}"),
        };
        format!("{enc}-{cross}-{dec}")
    }
}

impl fmt::Display for DenseDegree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenseDegree::Degree(n) => write!(f, "{n}"),
            DenseDegree::Multi => write!(f, "multi"),
        }
    }
}

impl FromStr for DenseDegree {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "min" | "mout" | "multi" => Ok(DenseDegree::Multi),
            other => other
                .parse::<usize>()
                .map(DenseDegree::Degree)
                .map_err(|_| format!("expected a degree or min/mout, got {s:?}")),
        }
    }
}

impl fmt::Display for CrossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrossMode::Skip => "skip",
            CrossMode::Upper => "upper",
            CrossMode::Lower => "lower",
            CrossMode::Cross3 => "cross3",
            CrossMode::Cross5 => "cross5",
        })
    }
}

impl FromStr for CrossMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        CrossMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown cross mode {s:?}"))
    }
}

impl fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleMode::TransposedConv2 => "transposed_conv2",
            UpsampleMode::NearestUp2 => "nearest_up2",
        })
    }
}

impl FromStr for UpsampleMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "transposed_conv2" => Ok(UpsampleMode::TransposedConv2),
            "nearest_up2" => Ok(UpsampleMode::NearestUp2),
            _ => Err(format!("unknown upsample mode {s:?}")),
        }
    }
}

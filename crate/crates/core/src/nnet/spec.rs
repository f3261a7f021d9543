use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// The classifier head: two hidden dense layers of 512 and 128 units.
pub const DENSE_UNITS: [usize; 2] = [512, 128];

/// Miniature conv-net: `conv_channels.len()` blocks of 3x3 same-padded
/// convolution, ReLU and 2x2 max-pool, then the fixed dense head with dropout
/// and a single sigmoid output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_size: usize,
    pub conv_channels: Vec<usize>,
    pub dense_units: Vec<usize>,
    /// Drop probability on the hidden dense layers (training only).
    pub dropout_rate: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { input_size: 32, conv_channels: vec![8, 16, 32], dense_units: DENSE_UNITS.to_vec(), dropout_rate: 0.8 }
    }
}

impl ModelSpec {
    pub fn with_channels(input_size: usize, conv_channels: Vec<usize>) -> Self {
        Self { input_size, conv_channels, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "conv_channels must be non-empty and positive, got {:?}",
                self.conv_channels
            )));
        }
        let reduction = 1usize << self.conv_channels.len();
        if self.input_size == 0 || self.input_size > 256 || self.input_size % reduction != 0 {
            return Err(Error::InvalidArgument(format!(
                "input_size {} must be in 1..=256 and divisible by {reduction}",
                self.input_size
            )));
        }
        if self.dense_units != DENSE_UNITS {
            return Err(Error::InvalidArgument(format!(
                "dense head must be {DENSE_UNITS:?}, got {:?}",
                self.dense_units
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!("dropout_rate must be in [0,1), got {}", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.conv_channels.len()
    }

    /// Spatial side length entering conv block `b`.
    pub fn side_at(&self, b: usize) -> usize {
        self.input_size >> b
    }

    /// Input channels of conv block `b`.
    pub fn cin_at(&self, b: usize) -> usize {
        if b == 0 {
            3
        } else {
            self.conv_channels[b - 1]
        }
    }

    /// Length of the flattened conv output.
    pub fn flat_dim(&self) -> usize {
        let side = self.side_at(self.blocks());
        side * side * self.conv_channels[self.blocks() - 1]
    }

    pub fn input_len(&self) -> usize {
        self.input_size * self.input_size * 3
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex_string(&Sha256::digest(bytes))
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

//! Layer descriptions and receptive-field arithmetic.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NeuralError, Result};

/// One layer of a network description.
///
/// Convolutions are unpadded ("valid") with stride 1. `Dense` flattens every
/// non-batch axis of its input. `Concat` only appears in architecture
/// descriptions: joining branches is done by the owning network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, dilation: usize },
    MaxPool2d { pool: usize, stride: usize },
    Dense { inputs: usize, units: usize },
    Elu,
    Softmax,
    Dropout { p: f64 },
    BatchNorm { channels: usize },
    Concat { branches: usize },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self::Conv2d { in_channels, out_channels, kernel, dilation }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Conv2d { .. } => "conv2d",
            Self::MaxPool2d { .. } => "maxpool2d",
            Self::Dense { .. } => "dense",
            Self::Elu => "elu",
            Self::Softmax => "softmax",
            Self::Dropout { .. } => "dropout",
            Self::BatchNorm { .. } => "batchnorm",
            Self::Concat { .. } => "concat",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NeuralError::InvalidSpec(msg));
        match *self {
            Self::Conv2d { in_channels, out_channels, kernel, dilation } => {
                if kernel == 0 {
                    return bad("conv kernel size must be >= 1".into());
                }
                if dilation == 0 {
                    return bad("conv dilation must be >= 1".into());
                }
                if in_channels == 0 || out_channels == 0 {
                    return bad("conv channel counts must be >= 1".into());
                }
            }
            Self::MaxPool2d { pool, stride } => {
                if pool == 0 || stride == 0 {
                    return bad("pool size and stride must be >= 1".into());
                }
            }
            Self::Dense { inputs, units } => {
                if inputs == 0 || units == 0 {
                    return bad("dense layer needs >= 1 input and unit".into());
                }
            }
            Self::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return bad(format!("drop probability {p} outside [0, 1)"));
                }
            }
            Self::BatchNorm { channels } => {
                if channels == 0 {
                    return bad("batchnorm needs >= 1 channel".into());
                }
            }
            Self::Concat { branches } => {
                if branches == 0 {
                    return bad("concat needs >= 1 branch".into());
                }
            }
            Self::Elu | Self::Softmax => {}
        }
        Ok(())
    }

    /// `(effective kernel, stride)` for spatial layers, `None` for pointwise ones.
    pub fn spatial_extent(&self) -> Option<(usize, usize)> {
        match *self {
            Self::Conv2d { kernel, dilation, .. } => Some((dilation * (kernel - 1) + 1, 1)),
            Self::MaxPool2d { pool, stride } => Some((pool, stride)),
            _ => None,
        }
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        match *self {
            Self::Conv2d { in_channels, out_channels, kernel, .. } => {
                out_channels * in_channels * kernel * kernel + out_channels
            }
            Self::Dense { inputs, units } => inputs * units + units,
            Self::BatchNorm { channels } => 2 * channels,
            _ => 0,
        }
    }
}

/// Receptive field size and cumulative stride ("jump") of a layer stack.
///
/// Walks `rf <- rf + (k_eff - 1) * jump; jump <- jump * stride` with
/// `k_eff = dilation * (k - 1) + 1`. Pointwise layers leave both unchanged;
/// `Dense` is treated as pointwise since its coverage depends on the input
/// size rather than the layer itself.
pub fn receptive_field(specs: &[LayerSpec]) -> (usize, usize) {
    specs.iter().fold((1, 1), |(rf, jump), spec| match spec.spatial_extent() {
        Some((k_eff, stride)) => (rf + (k_eff - 1) * jump, jump * stride),
        None => (rf, jump),
    })
}

/// Stable hex digest of an architecture description.
pub fn fingerprint<T: Serialize>(architecture: &T) -> String {
    let canonical = serde_json::to_vec(architecture).expect("architecture serializes");
    let digest = Sha256::digest(&canonical);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ladder(dilations: &[usize]) -> Vec<LayerSpec> {
        dilations
            .iter()
            .flat_map(|&d| [LayerSpec::conv(32, 32, 3, d), LayerSpec::Elu])
            .collect()
    }

    #[test]
    fn published_receptive_fields() {
        assert_eq!(receptive_field(&ladder(&[1, 1, 2, 4, 8, 16, 32, 1])).0, 131);
        assert_eq!(receptive_field(&ladder(&[1, 1, 2, 4, 8, 1])).0, 35);
        assert_eq!(receptive_field(&ladder(&[1, 1, 2, 4, 8, 16, 1])).0, 67);
        assert_eq!(receptive_field(&ladder(&[1, 1, 2, 4, 8, 16, 32, 64, 1])).0, 259);
    }

    #[test]
    fn single_pointwise_conv() {
        assert_eq!(receptive_field(&[LayerSpec::conv(1, 1, 1, 1)]), (1, 1));
    }

    #[test]
    fn pooling_multiplies_jump() {
        let specs = [
            LayerSpec::conv(1, 1, 3, 1),
            LayerSpec::MaxPool2d { pool: 2, stride: 2 },
            LayerSpec::conv(1, 1, 3, 1),
        ];
        // 3 -> 4 (pool) -> 4 + 2 * 2 = 8
        assert_eq!(receptive_field(&specs), (8, 2));
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(LayerSpec::conv(1, 1, 3, 0).validate().is_err());
        assert!(LayerSpec::conv(1, 1, 0, 1).validate().is_err());
        assert!(LayerSpec::Dropout { p: 1.0 }.validate().is_err());
        assert!(LayerSpec::Dropout { p: 0.0 }.validate().is_ok());
        assert!(LayerSpec::MaxPool2d { pool: 0, stride: 1 }.validate().is_err());
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let a = ladder(&[1, 2, 1]);
        let b = ladder(&[1, 2, 2]);
        assert_eq!(fingerprint(&a), fingerprint(&a.clone()));
        assert_ne!(fingerprint(&a), fingerprint(&b));
    }

    proptest! {
        #[test]
        fn receptive_field_concatenation(
            a in proptest::collection::vec((1usize..4, 1usize..9), 0..6),
            b in proptest::collection::vec((1usize..4, 1usize..9), 0..6),
        ) {
            let to_specs = |v: &[(usize, usize)]| -> Vec<LayerSpec> {
                v.iter().map(|&(k, d)| LayerSpec::conv(1, 1, 2 * k - 1, d)).collect()
            };
            let sa = to_specs(&a);
            let sb = to_specs(&b);
            let joined: Vec<LayerSpec> = sa.iter().chain(sb.iter()).cloned().collect();
            let (ra, _) = receptive_field(&sa);
            let (rb, _) = receptive_field(&sb);
            prop_assert_eq!(receptive_field(&joined).0, ra + rb - 1);
        }
    }
}

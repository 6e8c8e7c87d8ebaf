//! Masked multi-view self-supervised representation learning for multivariate time series.
//!
//! The crate carries its own reverse-mode tensor engine, a convolutional patch tokenizer
//! feeding a transformer encoder, the occlusion-invariant pretraining objective with a
//! coding-rate regularizer, and the probing and fine-tuning harness around it.

pub mod autograd;
pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod linalg;
pub mod model;
pub mod params;
pub mod ssl;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::Model;
pub use tensor::{DType, Scalar, Tensor};

#[cfg(test)]
pub(crate) mod testutil {
    use crate::backbone::{ModelConfig, PatcherConfig};
    use crate::layers::TransformerConfig;
    use crate::model::Model;
    use crate::params::ParamKind;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Replaces every trainable parameter with N(0, 0.5²) draws so gradient checks see
    /// gradients well above finite-difference round-off; default initialization leaves
    /// attention projections with gradients near 1e-8.
    pub fn randomize(model: &mut Model<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            if model.params.entry(id).kind != ParamKind::Buffer {
                let shape = model.params.get(id).shape().to_vec();
                *model.params.get_mut(id) = Tensor::randn(&shape, 0.5, &mut rng);
            }
        }
    }

    /// Two channels of length 32 into 4 patches of width 8.
    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            patcher: PatcherConfig {
                first_kernel: 8,
                first_stride: 1,
                channel_widths: [4, 8, 8, 8],
                input_channels: 2,
            },
            encoder: TransformerConfig {
                model_dim: 8,
                heads: 2,
                depth: 1,
                ffn_multiplier: 2,
                dropout: 0.0,
                pre_norm: true,
            },
            decoder_depth: 1,
            series_length: 32,
            class_count: 3,
            bn_momentum: 0.1,
        }
    }
}

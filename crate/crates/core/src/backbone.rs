//! The representation network: convolutional patch tokenizer, fixed sinusoidal
//! positions, transformer encoder, mean pooling and a linear head.

use rand::Rng;

use crate::autograd::{conv_out_len, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Linear, Transformer, TransformerConfig};
use crate::params::{ParamId, ParamKind, ParamStore, Pass};
use crate::tensor::{lit, Scalar, Tensor};

/// Kernel and stride of the three fixed downsampling convolutions.
pub const FIXED_KERNEL: usize = 8;
pub const FIXED_STRIDE: usize = 2;
pub const FIXED_PAD: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatcherConfig {
    pub first_kernel: usize,
    pub first_stride: usize,
    /// Output widths; the fourth conv keeps the third width and the final 1x1 conv
    /// maps to `channel_widths[3]`, the model dimension.
    pub channel_widths: [usize; 4],
    pub input_channels: usize,
}

impl Default for PatcherConfig {
    fn default() -> Self {
        Self {
            first_kernel: 8,
            first_stride: 1,
            channel_widths: [32, 64, 128, 64],
            input_channels: 2,
        }
    }
}

/// Geometry of one conv layer in the tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.first_kernel == 0 || self.first_stride == 0 || self.input_channels == 0 {
            return Err(Error::config("patcher kernel, stride and input channels must be positive"));
        }
        if self.channel_widths.contains(&0) {
            return Err(Error::config("patcher channel widths must be positive"));
        }
        Ok(())
    }

    pub fn model_dim(&self) -> usize {
        self.channel_widths[3]
    }

    /// The five convolutions in order.
    pub fn layers(&self) -> [ConvLayer; 5] {
        let [w0, w1, w2, w3] = self.channel_widths;
        let fixed = |c_in, c_out| ConvLayer {
            c_in,
            c_out,
            kernel: FIXED_KERNEL,
            stride: FIXED_STRIDE,
            pad: FIXED_PAD,
        };
        [
            ConvLayer {
                c_in: self.input_channels,
                c_out: w0,
                kernel: self.first_kernel,
                stride: self.first_stride,
                pad: self.first_kernel / 2,
            },
            fixed(w0, w1),
            fixed(w1, w2),
            fixed(w2, w2),
            ConvLayer {
                c_in: w2,
                c_out: w3,
                kernel: 1,
                stride: 1,
                pad: 0,
            },
        ]
    }
}

/// Number of tokens produced from a length-`t` series.
pub fn patch_count(t: usize, cfg: &PatcherConfig) -> Result<usize> {
    let mut len = t;
    for (i, l) in cfg.layers().iter().enumerate() {
        len = conv_out_len(len, l.kernel, l.stride, l.pad)
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::InputTooShort {
                layer: format!("patcher.conv{i}"),
                length: len,
            })?;
    }
    Ok(len)
}

/// Fixed sinusoidal table: `P[i,2j] = sin(i/10000^(2j/d))`, `P[i,2j+1] = cos(..)`.
pub fn positional_encoding<T: Scalar>(p: usize, d: usize) -> Result<Tensor<T>> {
    if !d.is_multiple_of(2) {
        return Err(Error::config(format!("positional encoding needs an even dimension, got {d}")));
    }
    let mut data = Vec::with_capacity(p * d);
    for i in 0..p {
        for j in 0..d / 2 {
            let angle = i as f64 / 10000f64.powf(2.0 * j as f64 / d as f64);
            data.push(lit(angle.sin()));
            data.push(lit(angle.cos()));
        }
    }
    Tensor::new(&[p, d], data)
}

#[derive(Debug, Clone)]
pub struct Patcher {
    pub cfg: PatcherConfig,
    convs: Vec<(ParamId, ParamId, ConvLayer)>,
    norms: Vec<BatchNorm>,
}

impl Patcher {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamStore<T>,
        cfg: PatcherConfig,
        bn_momentum: f64,
        rng: &mut R,
    ) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for (i, l) in cfg.layers().into_iter().enumerate() {
            let fan_in = (l.c_in * l.kernel) as f64;
            let w = ps.add(
                format!("patcher.conv{i}.weight"),
                Tensor::uniform(&[l.c_out, l.c_in, l.kernel], 1.0 / fan_in.sqrt(), rng),
                ParamKind::Weight,
            );
            let b = ps.add(format!("patcher.conv{i}.bias"), Tensor::zeros(&[l.c_out]), ParamKind::NoDecay);
            convs.push((w, b, l));
            if i < 4 {
                norms.push(BatchNorm::new(ps, &format!("patcher.bn{i}"), l.c_out, bn_momentum));
            }
        }
        Self { cfg, convs, norms }
    }

    /// `x: [b, m, t]` to tokens `[b, p, d]`.
    pub fn forward<T: Scalar>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let s = pass.graph.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.cfg.input_channels {
            return Err(Error::shape("patchify", &s, &[self.cfg.input_channels]));
        }
        let mut h = x;
        for (i, &(w, b, l)) in self.convs.iter().enumerate() {
            let len = *pass.graph.shape(h).last().unwrap();
            if conv_out_len(len, l.kernel, l.stride, l.pad).is_none() {
                return Err(Error::InputTooShort {
                    layer: format!("patcher.conv{i}"),
                    length: len,
                });
            }
            let wv = pass.param(w);
            let bv = pass.param(b);
            h = pass.graph.conv1d(h, wv, Some(bv), l.stride, l.pad)?;
            if let Some(bn) = self.norms.get(i) {
                h = bn.forward(pass, h)?;
                h = pass.graph.gelu(h);
            }
        }
        pass.graph.transpose(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub patcher: PatcherConfig,
    pub encoder: TransformerConfig,
    pub decoder_depth: usize,
    pub series_length: usize,
    pub class_count: usize,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patcher: PatcherConfig::default(),
            encoder: TransformerConfig {
                model_dim: 64,
                heads: 4,
                depth: 4,
                ffn_multiplier: 4,
                dropout: 0.1,
                pre_norm: true,
            },
            decoder_depth: 4,
            series_length: 128,
            class_count: 3,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.patcher.validate()?;
        self.encoder.validate()?;
        if self.patcher.model_dim() != self.encoder.model_dim {
            return Err(Error::config(format!(
                "last patcher width {} must equal model dim {}",
                self.patcher.model_dim(),
                self.encoder.model_dim
            )));
        }
        if !self.encoder.model_dim.is_multiple_of(2) {
            return Err(Error::config("model dim must be even for positional encoding"));
        }
        if self.class_count == 0 {
            return Err(Error::config("class count must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("batchnorm momentum must lie in [0, 1]"));
        }
        patch_count(self.series_length, &self.patcher)?;
        Ok(())
    }

    pub fn model_dim(&self) -> usize {
        self.encoder.model_dim
    }

    pub fn patches(&self) -> usize {
        patch_count(self.series_length, &self.patcher).expect("validated config")
    }

    pub fn decoder(&self) -> TransformerConfig {
        TransformerConfig {
            depth: self.decoder_depth,
            ..self.encoder
        }
    }
}

/// Patcher, encoder and classifier head.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: ModelConfig,
    pub patcher: Patcher,
    pub encoder: Transformer,
    pub head: Linear,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, cfg: ModelConfig, rng: &mut R) -> Self {
        let patcher = Patcher::new(ps, cfg.patcher, cfg.bn_momentum, rng);
        let encoder = Transformer::new(ps, "encoder", cfg.encoder, rng);
        let head = Linear::new(ps, "head", cfg.model_dim(), cfg.class_count, rng);
        Self {
            cfg,
            patcher,
            encoder,
            head,
        }
    }

    /// Adds the positional table to `tokens: [b, p, d]`.
    pub fn add_positions<T: Scalar>(&self, pass: &mut Pass<'_, T>, tokens: Var) -> Result<Var> {
        let s = pass.graph.shape(tokens).to_vec();
        let pe = positional_encoding::<T>(s[s.len() - 2], s[s.len() - 1])?;
        let pe = pass.input(pe);
        pass.graph.add(tokens, pe)
    }

    /// Tokens with positions, `[b, p, d]`.
    pub fn embed<T: Scalar>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let tokens = self.patcher.forward(pass, x)?;
        self.add_positions(pass, tokens)
    }

    /// Pooled representations `[b, d]` of `x: [b, m, t]`.
    pub fn represent<T: Scalar>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let tokens = self.embed(pass, x)?;
        let z = self.encoder.forward(pass, tokens, None)?;
        pass.graph.mean_axis(z, 1)
    }

    pub fn classify<T: Scalar>(&self, pass: &mut Pass<'_, T>, z: Var) -> Result<Var> {
        self.head.forward(pass, z)
    }
}

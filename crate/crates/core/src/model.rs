//! Complete learnable state: backbone, decoder and mask token in one parameter store.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, ModelConfig, PatcherConfig};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::layers::TransformerConfig;
use crate::params::{Checkpoint, ParamKind, ParamStore, Pass};
use crate::ssl::Decoder;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub backbone: Backbone,
    pub decoder: Decoder,
    /// Input normalization fitted on the pretraining split, if any.
    pub norm: Option<NormStats>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_recon(cfg, seed, false)
    }

    pub fn with_recon(cfg: ModelConfig, seed: u64, recon_head: bool) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, cfg, &mut rng);
        let decoder = Decoder::new(&mut params, &cfg, recon_head, &mut rng);
        Ok(Self {
            cfg,
            params,
            backbone,
            decoder,
            norm: None,
        })
    }

    pub fn pass(&mut self, train: bool, seed: u64) -> Pass<'_, T> {
        Pass::new(&mut self.params, train, seed)
    }

    /// Zeroes the classifier head.
    pub fn reset_head(&mut self) {
        for id in [self.backbone.head.weight, self.backbone.head.bias] {
            let t = self.params.get_mut(id);
            *t = Tensor::zeros(t.shape());
        }
    }

    /// Replaces the classifier head with a zeroed one over `classes` outputs.
    pub fn set_head_classes(&mut self, classes: usize) -> Result<()> {
        if classes == 0 {
            return Err(Error::config("class count must be positive"));
        }
        let d = self.cfg.model_dim();
        *self.params.get_mut(self.backbone.head.weight) = Tensor::zeros(&[classes, d]);
        *self.params.get_mut(self.backbone.head.bias) = Tensor::zeros(&[classes]);
        self.cfg.class_count = classes;
        self.backbone.cfg.class_count = classes;
        Ok(())
    }

    /// Eval-mode pooled representations of `x: [b, m, t]`, no graph retained.
    pub fn embed(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let backbone = self.backbone.clone();
        let mut pass = Pass::frozen(&mut self.params, false, 0);
        let xv = pass.input(x.clone());
        let z = backbone.represent(&mut pass, xv)?;
        Ok(pass.graph.value(z).clone())
    }

    /// Eval-mode logits.
    pub fn logits(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let backbone = self.backbone.clone();
        let mut pass = Pass::frozen(&mut self.params, false, 0);
        let xv = pass.input(x.clone());
        let z = backbone.represent(&mut pass, xv)?;
        let y = backbone.classify(&mut pass, z)?;
        Ok(pass.graph.value(y).clone())
    }

    fn meta(&self) -> Vec<(String, Tensor<f64>)> {
        let c = &self.cfg;
        let scalar = |k: &str, v: f64| (format!("meta.{k}"), Tensor::scalar(v));
        let mut out = vec![
            scalar("input_channels", c.patcher.input_channels as f64),
            scalar("series_length", c.series_length as f64),
            scalar("first_kernel", c.patcher.first_kernel as f64),
            scalar("first_stride", c.patcher.first_stride as f64),
            (
                "meta.channel_widths".into(),
                Tensor::new(&[4], c.patcher.channel_widths.iter().map(|&w| w as f64).collect())
                    .expect("4 widths"),
            ),
            scalar("model_dim", c.encoder.model_dim as f64),
            scalar("heads", c.encoder.heads as f64),
            scalar("depth", c.encoder.depth as f64),
            scalar("ffn_multiplier", c.encoder.ffn_multiplier as f64),
            scalar("dropout", c.encoder.dropout),
            scalar("pre_norm", if c.encoder.pre_norm { 1.0 } else { 0.0 }),
            scalar("decoder_depth", c.decoder_depth as f64),
            scalar("class_count", c.class_count as f64),
            scalar("bn_momentum", c.bn_momentum),
            scalar("recon_head", if self.decoder.recon.is_some() { 1.0 } else { 0.0 }),
        ];
        if let Some(n) = &self.norm {
            let m = n.mean.len();
            out.push(("meta.norm_mean".into(), Tensor::new(&[m], n.mean.clone()).expect("norm")));
            out.push(("meta.norm_std".into(), Tensor::new(&[m], n.std.clone()).expect("norm")));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.params.write_checkpoint(&mut buf, &self.meta())?;
        Ok(buf)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ckpt.scalar(&format!("meta.{k}"))
                .ok_or_else(|| Error::config(format!("checkpoint lacks meta.{k}")))
        };
        let u = |k: &str| get(k).map(|v| v as usize);
        let widths = ckpt
            .get("meta.channel_widths")
            .ok_or_else(|| Error::config("checkpoint lacks meta.channel_widths"))?;
        if widths.numel() != 4 {
            return Err(Error::config("meta.channel_widths must hold 4 values"));
        }
        let w = widths.data();
        let cfg = ModelConfig {
            patcher: PatcherConfig {
                first_kernel: u("first_kernel")?,
                first_stride: u("first_stride")?,
                channel_widths: [w[0] as usize, w[1] as usize, w[2] as usize, w[3] as usize],
                input_channels: u("input_channels")?,
            },
            encoder: TransformerConfig {
                model_dim: u("model_dim")?,
                heads: u("heads")?,
                depth: u("depth")?,
                ffn_multiplier: u("ffn_multiplier")?,
                dropout: get("dropout")?,
                pre_norm: get("pre_norm")? != 0.0,
            },
            decoder_depth: u("decoder_depth")?,
            series_length: u("series_length")?,
            class_count: u("class_count")?,
            bn_momentum: get("bn_momentum")?,
        };
        let mut model = Self::with_recon(cfg, 0, get("recon_head")? != 0.0)?;
        model.params.load_from(ckpt)?;
        if let (Some(m), Some(s)) = (ckpt.get("meta.norm_mean"), ckpt.get("meta.norm_std")) {
            model.norm = Some(NormStats {
                mean: m.data().to_vec(),
                std: s.data().to_vec(),
            });
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read_path(path)?)
    }

    /// Names of every trainable parameter outside the classifier head.
    pub fn body_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, e)| e.kind != ParamKind::Buffer && !e.name.starts_with("head."))
            .map(|(_, e)| e.name.clone())
            .collect()
    }
}

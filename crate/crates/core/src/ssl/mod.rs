//! Occlusion-invariant pretraining objective.
//!
//! Every sample is viewed once in full and `N` times through distinct masks.
//! A masked view encodes only its visible tokens, then a decoder fills the hidden
//! slots with one shared learnable token and the pooled decoder output is pulled
//! toward the pooled full view by negative cosine similarity. The total coding rate
//! of each batch of masked views is maximized so the representations cannot collapse.

pub mod mask;

use rand::Rng;

use crate::autograd::Var;
use crate::backbone::{Backbone, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{Linear, Transformer, PROJ_INIT_STD};
use crate::params::{ParamId, ParamKind, ParamStore, Pass};
use crate::tensor::{lit, Scalar, Tensor};

pub use mask::{sample_masks, Mask, MaskConfig, MaskSet};

/// Which term the balance weight `lambda` multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Balance {
    /// `lambda·L_sim − L_TCR`
    Similarity,
    /// `L_sim − lambda·L_TCR`
    CodingRate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TcrConfig {
    /// Distortion `ε`.
    pub epsilon: f64,
    pub lambda: f64,
    pub balance: Balance,
    /// Drops the coding-rate term entirely (collapse ablation).
    pub disabled: bool,
}

impl Default for TcrConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2f64.sqrt(),
            lambda: 100.0,
            balance: Balance::Similarity,
            disabled: false,
        }
    }
}

impl TcrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Transformer decoder with the shared mask token and an optional token-space
/// reconstruction head.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub transformer: Transformer,
    pub mask_token: ParamId,
    pub recon: Option<Linear>,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamStore<T>,
        cfg: &ModelConfig,
        with_recon: bool,
        rng: &mut R,
    ) -> Self {
        let d = cfg.model_dim();
        let transformer = Transformer::new(ps, "decoder", cfg.decoder(), rng);
        let mask_token = ps.add(
            "decoder.mask_token",
            Tensor::trunc_normal(&[d], PROJ_INIT_STD, rng),
            ParamKind::NoDecay,
        );
        let recon = with_recon.then(|| Linear::new(ps, "decoder.recon", d, d, rng));
        Self {
            transformer,
            mask_token,
            recon,
        }
    }
}

fn check_sets(sets: &[MaskSet], batch: usize, p: usize) -> Result<(usize, usize)> {
    if sets.len() != batch || sets.is_empty() {
        return Err(Error::config(format!("{} mask sets for a batch of {batch}", sets.len())));
    }
    let (n, v) = (sets[0].count(), sets[0].visible());
    for s in sets {
        if s.count() != n || s.visible() != v || s.patches() != p {
            return Err(Error::config("mask sets in a batch must agree on count, length and visible size"));
        }
    }
    if v == 0 {
        return Err(Error::config("a mask must leave at least one visible patch"));
    }
    Ok((n, v))
}

/// Encodes only the visible rows of `tokens: [b, p, d]` (positions already added)
/// for every mask of every sample; returns `[b·N, v, d]` in sample-major order.
pub fn encode_visible<T: Scalar>(
    pass: &mut Pass<'_, T>,
    backbone: &Backbone,
    tokens: Var,
    sets: &[MaskSet],
) -> Result<Var> {
    let s = pass.graph.shape(tokens).to_vec();
    let (b, p, d) = (s[0], s[1], s[2]);
    let (n, v) = check_sets(sets, b, p)?;
    let idx: Vec<usize> = sets
        .iter()
        .enumerate()
        .flat_map(|(bi, set)| {
            set.masks
                .iter()
                .flat_map(move |m| m.visible_indices.iter().map(move |&i| bi * p + i))
        })
        .collect();
    let flat = pass.graph.reshape(tokens, &[b * p, d])?;
    let vis = pass.graph.gather_rows(flat, idx)?;
    let vis = pass.graph.reshape(vis, &[b * n, v, d])?;
    backbone.encoder.forward(pass, vis, None)
}

/// Scatters encoded visible rows back to their positions, fills hidden slots with the
/// mask token, adds positions and runs the decoder; returns `[b·N, p, d]`.
pub fn decode_full<T: Scalar>(
    pass: &mut Pass<'_, T>,
    backbone: &Backbone,
    dec: &Decoder,
    z_vis: Var,
    sets: &[MaskSet],
) -> Result<Var> {
    let s = pass.graph.shape(z_vis).to_vec();
    let (rows, v, d) = (s[0], s[1], s[2]);
    let p = sets[0].patches();
    let (n, vv) = check_sets(sets, sets.len(), p)?;
    if vv != v || rows != sets.len() * n {
        return Err(Error::shape("decode_full", &s, &[sets.len() * n, vv, d]));
    }
    let token_row = rows * v;
    let mut idx = Vec::with_capacity(rows * p);
    for (bi, set) in sets.iter().enumerate() {
        for (mi, m) in set.masks.iter().enumerate() {
            let base = (bi * n + mi) * v;
            let mut rank = 0;
            for &h in &m.hidden {
                if h {
                    idx.push(token_row);
                } else {
                    idx.push(base + rank);
                    rank += 1;
                }
            }
        }
    }
    let flat = pass.graph.reshape(z_vis, &[rows * v, d])?;
    let token = pass.param(dec.mask_token);
    let pool = pass.graph.concat_rows(&[flat, token])?;
    let full = pass.graph.gather_rows(pool, idx)?;
    let full = pass.graph.reshape(full, &[rows, p, d])?;
    let full = backbone.add_positions(pass, full)?;
    dec.transformer.forward(pass, full, None)
}

/// Pooled masked-view representations `[b·N, d]`.
pub fn masked_view_representations<T: Scalar>(
    pass: &mut Pass<'_, T>,
    backbone: &Backbone,
    dec: &Decoder,
    tokens: Var,
    sets: &[MaskSet],
) -> Result<Var> {
    let z = encode_visible(pass, backbone, tokens, sets)?;
    let out = decode_full(pass, backbone, dec, z, sets)?;
    pass.graph.mean_axis(out, 1)
}

/// `−mean_b (1/N) Σᵢ ⟨ẑ_b/‖ẑ_b‖, ẑ_bi/‖ẑ_bi‖⟩` for `full: [b, d]`, `views: [b·N, d]`.
pub fn sim_loss<T: Scalar>(pass: &mut Pass<'_, T>, full: Var, views: Var) -> Result<Var> {
    let cos = cosines(pass, full, views)?;
    let m = pass.graph.mean(cos);
    Ok(pass.graph.scale(m, -T::one()))
}

/// Cosine of every view with its sample's full view, `[b, N, 1]`.
pub fn cosines<T: Scalar>(pass: &mut Pass<'_, T>, full: Var, views: Var) -> Result<Var> {
    let fs = pass.graph.shape(full).to_vec();
    let vs = pass.graph.shape(views).to_vec();
    if fs.len() != 2 || vs.len() != 2 || fs[1] != vs[1] || fs[0] == 0 || !vs[0].is_multiple_of(fs[0]) {
        return Err(Error::shape("sim_loss", &fs, &vs));
    }
    let (b, d) = (fs[0], fs[1]);
    let n = vs[0] / b;
    let f = pass.graph.l2_normalize(full);
    let f = pass.graph.reshape(f, &[b, 1, d])?;
    let v = pass.graph.l2_normalize(views);
    let v = pass.graph.reshape(v, &[b, n, d])?;
    pass.graph.matmul_t(v, f, false, true)
}

/// `½ log det(I + d/(b ε²) ZᵀZ)` over l2-normalized rows of `z: [.., b, d]`; one value
/// per leading index.
pub fn tcr_loss<T: Scalar>(pass: &mut Pass<'_, T>, z: Var, epsilon: f64) -> Result<Var> {
    let s = pass.graph.shape(z).to_vec();
    if s.len() < 2 || s[s.len() - 2] == 0 {
        return Err(Error::shape("tcr_loss", &s, &[]));
    }
    if !pass.graph.value(z).is_finite() {
        return Err(Error::Numeric("non-finite representation entering coding rate".into()));
    }
    let (b, d) = (s[s.len() - 2], s[s.len() - 1]);
    let zn = pass.graph.l2_normalize(z);
    let gram = pass.graph.matmul_t(zn, zn, true, false)?;
    let gram = pass.graph.scale(gram, lit(d as f64 / (b as f64 * epsilon * epsilon)));
    let eye = pass.input(Tensor::eye(d));
    let a = pass.graph.add(gram, eye)?;
    let ld = pass.graph.logdet_psd(a)?;
    Ok(pass.graph.scale(ld, lit(0.5)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LofMetrics {
    pub total: f64,
    pub sim: f64,
    pub tcr_mean: f64,
    pub cos_mean: f64,
    pub cos_min: f64,
    pub cos_max: f64,
}

/// Full pretraining loss for `x: [b, m, t]` with one mask set per sample.
pub fn lof_loss<T: Scalar>(
    pass: &mut Pass<'_, T>,
    backbone: &Backbone,
    dec: &Decoder,
    x: Var,
    sets: &[MaskSet],
    cfg: &TcrConfig,
) -> Result<(Var, LofMetrics)> {
    let b = pass.graph.shape(x)[0];
    let tokens = backbone.embed(pass, x)?;
    let z = backbone.encoder.forward(pass, tokens, None)?;
    let full = pass.graph.mean_axis(z, 1)?;
    let views = masked_view_representations(pass, backbone, dec, tokens, sets)?;
    let n = sets[0].count();
    let d = backbone.cfg.model_dim();

    let cos = cosines(pass, full, views)?;
    let cos_vals = pass.graph.value(cos).to_f64();
    let m = pass.graph.mean(cos);
    let sim = pass.graph.scale(m, -T::one());

    // regroup views from sample-major to mask-major: [N, b, d]
    let idx: Vec<usize> = (0..n).flat_map(|i| (0..b).map(move |bi| bi * n + i)).collect();
    let by_mask = pass.graph.gather_rows(views, idx)?;
    let by_mask = pass.graph.reshape(by_mask, &[n, b, d])?;
    let tcr = tcr_loss(pass, by_mask, cfg.epsilon)?;
    let tcr = pass.graph.mean(tcr);

    let total = if cfg.disabled {
        match cfg.balance {
            Balance::Similarity => pass.graph.scale(sim, lit(cfg.lambda)),
            Balance::CodingRate => sim,
        }
    } else {
        match cfg.balance {
            Balance::Similarity => {
                let s = pass.graph.scale(sim, lit(cfg.lambda));
                pass.graph.sub(s, tcr)?
            }
            Balance::CodingRate => {
                let t = pass.graph.scale(tcr, lit(cfg.lambda));
                pass.graph.sub(sim, t)?
            }
        }
    };
    let f = |v: Var, g: &crate::autograd::Graph<T>| g.value(v).item().to_f64().unwrap_or(f64::NAN);
    let metrics = LofMetrics {
        total: f(total, &pass.graph),
        sim: f(sim, &pass.graph),
        tcr_mean: f(tcr, &pass.graph),
        cos_mean: cos_vals.iter().sum::<f64>() / cos_vals.len() as f64,
        cos_min: cos_vals.iter().copied().fold(f64::INFINITY, f64::min),
        cos_max: cos_vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    if !metrics.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite pretraining loss {}", metrics.total)));
    }
    Ok((total, metrics))
}

/// Masked-token reconstruction baseline: squared error between the reconstruction head
/// output and the (constant) patcher tokens, averaged over hidden entries only.
pub fn mae_recon_loss<T: Scalar>(
    pass: &mut Pass<'_, T>,
    backbone: &Backbone,
    dec: &Decoder,
    x: Var,
    sets: &[MaskSet],
) -> Result<Var> {
    let recon = dec
        .recon
        .as_ref()
        .ok_or_else(|| Error::config("masked reconstruction needs a decoder reconstruction head"))?;
    let raw = backbone.patcher.forward(pass, x)?;
    let target = pass.graph.value(raw).clone();
    let tokens = backbone.add_positions(pass, raw)?;
    let z = encode_visible(pass, backbone, tokens, sets)?;
    let out = decode_full(pass, backbone, dec, z, sets)?;
    let pred = recon.forward(pass, out)?;

    let (b, p, d) = (target.shape()[0], target.shape()[1], target.shape()[2]);
    let n = sets[0].count();
    let mut tgt = Vec::with_capacity(b * n * p * d);
    let mut weight = Vec::with_capacity(b * n * p * d);
    let mut hidden_entries = 0usize;
    for (bi, set) in sets.iter().enumerate() {
        for m in &set.masks {
            for (pos, &h) in m.hidden.iter().enumerate() {
                tgt.extend_from_slice(&target.data()[(bi * p + pos) * d..][..d]);
                let w = if h { T::one() } else { T::zero() };
                weight.extend(std::iter::repeat_n(w, d));
                if h {
                    hidden_entries += d;
                }
            }
        }
    }
    let shape = [b * n, p, d];
    let tgt = pass.input(Tensor::new(&shape, tgt)?);
    let w = pass.input(Tensor::new(&shape, weight)?);
    let diff = pass.graph.sub(pred, tgt)?;
    let diff = pass.graph.mul(diff, w)?;
    let sq = pass.graph.mul(diff, diff)?;
    let s = pass.graph.sum(sq);
    Ok(pass.graph.scale(s, lit(1.0 / hidden_entries.max(1) as f64)))
}

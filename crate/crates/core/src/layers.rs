//! Parameterized building blocks shared by the encoder and decoder.

use rand::Rng;

use crate::autograd::{BatchNormMode, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore, Pass};
use crate::tensor::{lit, Scalar, Tensor};

pub const PROJ_INIT_STD: f64 = 0.02;

/// `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: ps.add(
                format!("{name}.weight"),
                Tensor::trunc_normal(&[output, input], PROJ_INIT_STD, rng),
                ParamKind::Weight,
            ),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[output]), ParamKind::NoDecay),
        }
    }

    pub fn zeroed<T: Scalar>(ps: &mut ParamStore<T>, name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: ps.add(format!("{name}.weight"), Tensor::zeros(&[output, input]), ParamKind::Weight),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[output]), ParamKind::NoDecay),
        }
    }

    pub fn forward<T: Scalar>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let w = pass.param(self.weight);
        let b = pass.param(self.bias);
        let y = pass.graph.matmul_t(x, w, false, true)?;
        pass.graph.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            scale: ps.add(format!("{name}.weight"), Tensor::ones(&[dim]), ParamKind::NoDecay),
            shift: ps.add(format!("{name}.bias"), Tensor::zeros(&[dim]), ParamKind::NoDecay),
        }
    }

    pub fn layer_norm<T: Scalar>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let g = pass.param(self.scale);
        let b = pass.param(self.shift);
        pass.graph.layer_norm(x, g, b)
    }
}

/// Batchnorm with running statistics stored as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub affine: Norm,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, channels: usize, momentum: f64) -> Self {
        Self {
            affine: Norm::new(ps, name, channels),
            running_mean: ps.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: ps.add(
                format!("{name}.running_var"),
                Tensor::ones(&[channels]),
                ParamKind::Buffer,
            ),
            momentum,
        }
    }

    /// Train mode normalizes with batch statistics and updates the running ones.
    pub fn forward<T: Scalar>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let g = pass.param(self.affine.scale);
        let b = pass.param(self.affine.shift);
        if pass.train {
            let (y, stats) = pass.graph.batch_norm(x, g, b, BatchNormMode::Train)?;
            let stats = stats.expect("train mode reports stats");
            let m = lit::<T>(self.momentum);
            let keep = T::one() - m;
            for (r, s) in pass.params.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + m * *s;
            }
            for (r, s) in pass.params.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
                *r = keep * *r + m * *s;
            }
            Ok(y)
        } else {
            let mean = pass.params.get(self.running_mean).data().to_vec();
            let var = pass.params.get(self.running_var).data().to_vec();
            let (y, _) = pass.graph.batch_norm(
                x,
                g,
                b,
                BatchNormMode::Eval {
                    running_mean: &mean,
                    running_var: &var,
                },
            )?;
            Ok(y)
        }
    }
}

/// Inverted dropout; identity outside train mode or at rate 0.
pub fn dropout<T: Scalar>(pass: &mut Pass<'_, T>, x: Var, rate: f64) -> Result<Var> {
    if !pass.train || rate <= 0.0 {
        return Ok(x);
    }
    let shape = pass.graph.shape(x).to_vec();
    let keep = 1.0 - rate;
    let n: usize = shape.iter().product();
    let scale = lit::<T>(1.0 / keep);
    let mask: Vec<T> = (0..n)
        .map(|_| if pass.rng.random::<f64>() < keep { scale } else { T::zero() })
        .collect();
    let m = pass.input(Tensor::new(&shape, mask)?);
    pass.graph.mul(x, m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_multiplier: usize,
    pub dropout: f64,
    /// `x + f(LN(x))` when true, `LN(x + f(x))` otherwise.
    pub pre_norm: bool,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.ffn_multiplier == 0 {
            return Err(Error::config("ffn multiplier must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    blocks: Vec<Block>,
}

impl Transformer {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        cfg: TransformerConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.model_dim;
        let f = d * cfg.ffn_multiplier;
        let blocks = (0..cfg.depth)
            .map(|l| {
                let p = format!("{name}.layers.{l}");
                Block {
                    norm1: Norm::new(ps, &format!("{p}.norm1"), d),
                    q: Linear::new(ps, &format!("{p}.attn.q"), d, d, rng),
                    k: Linear::new(ps, &format!("{p}.attn.k"), d, d, rng),
                    v: Linear::new(ps, &format!("{p}.attn.v"), d, d, rng),
                    out: Linear::new(ps, &format!("{p}.attn.out"), d, d, rng),
                    norm2: Norm::new(ps, &format!("{p}.norm2"), d),
                    ff1: Linear::new(ps, &format!("{p}.ffn.fc1"), d, f, rng),
                    ff2: Linear::new(ps, &format!("{p}.ffn.fc2"), f, d, rng),
                }
            })
            .collect();
        Self { cfg, blocks }
    }

    /// Runs every block on `x: [b, len, d]`. Attention weight nodes are appended to
    /// `attn` when given.
    pub fn forward<T: Scalar>(
        &self,
        pass: &mut Pass<'_, T>,
        mut x: Var,
        mut attn: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let rate = self.cfg.dropout;
        for blk in &self.blocks {
            if self.cfg.pre_norm {
                let h = blk.norm1.layer_norm(pass, x)?;
                let h = self.multi_head(pass, blk, h, attn.as_deref_mut())?;
                let h = dropout(pass, h, rate)?;
                x = pass.graph.add(x, h)?;
                let h = blk.norm2.layer_norm(pass, x)?;
                let h = self.feed_forward(pass, blk, h)?;
                let h = dropout(pass, h, rate)?;
                x = pass.graph.add(x, h)?;
            } else {
                let h = self.multi_head(pass, blk, x, attn.as_deref_mut())?;
                let h = dropout(pass, h, rate)?;
                let s = pass.graph.add(x, h)?;
                x = blk.norm1.layer_norm(pass, s)?;
                let h = self.feed_forward(pass, blk, x)?;
                let h = dropout(pass, h, rate)?;
                let s = pass.graph.add(x, h)?;
                x = blk.norm2.layer_norm(pass, s)?;
            }
        }
        Ok(x)
    }

    fn multi_head<T: Scalar>(
        &self,
        pass: &mut Pass<'_, T>,
        blk: &Block,
        x: Var,
        attn: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let h = self.cfg.heads;
        let q = blk.q.forward(pass, x)?;
        let k = blk.k.forward(pass, x)?;
        let v = blk.v.forward(pass, x)?;
        let q = pass.graph.split_heads(q, h)?;
        let k = pass.graph.split_heads(k, h)?;
        let v = pass.graph.split_heads(v, h)?;
        let (o, w) = scaled_dot_product_attention(pass, q, k, v)?;
        if let Some(sink) = attn {
            sink.push(w);
        }
        let o = pass.graph.merge_heads(o, h)?;
        blk.out.forward(pass, o)
    }

    fn feed_forward<T: Scalar>(&self, pass: &mut Pass<'_, T>, blk: &Block, x: Var) -> Result<Var> {
        let h = blk.ff1.forward(pass, x)?;
        let h = pass.graph.gelu(h);
        blk.ff2.forward(pass, h)
    }
}

/// `softmax(Q Kᵀ / √d_k) V` over `[batch, len, d_k]`; returns the output and the weights.
pub fn scaled_dot_product_attention<T: Scalar>(
    pass: &mut Pass<'_, T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let dk = *pass.graph.shape(q).last().unwrap_or(&1);
    let scores = pass.graph.matmul_t(q, k, false, true)?;
    let scores = pass.graph.scale(scores, lit(1.0 / (dk as f64).sqrt()));
    let axis = pass.graph.shape(scores).len() - 1;
    let w = pass.graph.softmax(scores, axis)?;
    let o = pass.graph.matmul(w, v)?;
    Ok((o, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn attend(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut ps = ParamStore::<f64>::new();
        let mut pass = Pass::new(&mut ps, false, 0);
        let (qv, kv, vv) = (pass.input(q.clone()), pass.input(k.clone()), pass.input(v.clone()));
        let (o, w) = scaled_dot_product_attention(&mut pass, qv, kv, vv).unwrap();
        (pass.graph.value(o).data().to_vec(), pass.graph.value(w).data().to_vec())
    }

    #[test]
    fn single_position_returns_values() {
        let q = Tensor::randn(&[1, 1, 4], 1.0, &mut rng(1));
        let k = Tensor::randn(&[1, 1, 4], 1.0, &mut rng(2));
        let v = Tensor::randn(&[1, 1, 4], 1.0, &mut rng(3));
        assert_eq!(attend(&q, &k, &v).0, v.data());
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor::randn(&[1, 3, 2], 1.0, &mut rng(4));
        let k = Tensor::from_f64(&[1, 3, 2], &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        let v = Tensor::randn(&[1, 3, 2], 1.0, &mut rng(5));
        let out = attend(&q, &k, &v).0;
        let vd = v.data();
        let mean = [(vd[0] + vd[2] + vd[4]) / 3.0, (vd[1] + vd[3] + vd[5]) / 3.0];
        for r in 0..3 {
            assert!((out[2 * r] - mean[0]).abs() < 1e-12 && (out[2 * r + 1] - mean[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let (p, dk) = (3, 2);
        let q = Tensor::randn(&[1, p, dk], 1.0, &mut rng(6));
        let k = Tensor::randn(&[1, p, dk], 1.0, &mut rng(7));
        let v = Tensor::randn(&[1, p, dk], 1.0, &mut rng(8));
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut expect = vec![0.0; p * dk];
        for i in 0..p {
            let s: Vec<f64> = (0..p)
                .map(|j| (0..dk).map(|c| qd[i * dk + c] * kd[j * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for j in 0..p {
                for c in 0..dk {
                    expect[i * dk + c] += s[j].exp() / z * vd[j * dk + c];
                }
            }
        }
        let got = attend(&q, &k, &v).0;
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn cfg(depth: usize) -> TransformerConfig {
        TransformerConfig {
            model_dim: 8,
            heads: 2,
            depth,
            ffn_multiplier: 2,
            dropout: 0.0,
            pre_norm: true,
        }
    }

    #[test]
    fn empty_stack_is_identity() {
        let mut ps = ParamStore::<f64>::new();
        let t = Transformer::new(&mut ps, "enc", cfg(0), &mut rng(9));
        let x0 = Tensor::randn(&[2, 5, 8], 1.0, &mut rng(10));
        let mut pass = Pass::new(&mut ps, true, 0);
        let x = pass.input(x0.clone());
        let y = t.forward(&mut pass, x, None).unwrap();
        assert_eq!(pass.graph.value(y).data(), x0.data());
    }

    #[test]
    fn permuting_rows_permutes_output() {
        for pre_norm in [true, false] {
            let mut ps = ParamStore::<f64>::new();
            let t = Transformer::new(&mut ps, "enc", TransformerConfig { pre_norm, ..cfg(2) }, &mut rng(11));
            let x0 = Tensor::randn(&[1, 5, 8], 1.0, &mut rng(12));
            let perm = [3, 0, 4, 1, 2];
            let mut xp = Vec::new();
            for &i in &perm {
                xp.extend_from_slice(x0.row(i));
            }
            let mut pass = Pass::new(&mut ps, false, 0);
            let x = pass.input(x0);
            let y = t.forward(&mut pass, x, None).unwrap();
            let xpv = pass.input(Tensor::new(&[1, 5, 8], xp).unwrap());
            let yp = t.forward(&mut pass, xpv, None).unwrap();
            let (y, yp) = (pass.graph.value(y), pass.graph.value(yp));
            for (r, &i) in perm.iter().enumerate() {
                for (a, b) in yp.row(r).iter().zip(y.row(i)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        let mut ps = ParamStore::<f64>::new();
        let t = Transformer::new(&mut ps, "enc", cfg(3), &mut rng(13));
        let mut pass = Pass::new(&mut ps, false, 0);
        let x = pass.input(Tensor::randn(&[2, 6, 8], 1.0, &mut rng(14)));
        let mut hook = Vec::new();
        t.forward(&mut pass, x, Some(&mut hook)).unwrap();
        assert_eq!(hook.len(), 3);
        for w in hook {
            let w = pass.graph.value(w);
            assert_eq!(w.shape(), &[4, 6, 6]);
            for r in 0..w.numel() / 6 {
                let row = w.row(r);
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let mut ps = ParamStore::<f64>::new();
        let x0 = Tensor::ones(&[1000]);
        let mut pass = Pass::new(&mut ps, false, 1);
        let x = pass.input(x0.clone());
        let y = dropout(&mut pass, x, 0.5).unwrap();
        assert_eq!(pass.graph.value(y).data(), x0.data());
        let mut pass = Pass::new(&mut ps, true, 1);
        let x = pass.input(x0);
        let y = dropout(&mut pass, x, 0.5).unwrap();
        let v = pass.graph.value(y).data();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        let kept = v.iter().filter(|&&e| e > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        assert!(TransformerConfig { heads: 3, ..cfg(1) }.validate().is_err());
        assert!(TransformerConfig { dropout: 1.0, ..cfg(1) }.validate().is_err());
    }
}

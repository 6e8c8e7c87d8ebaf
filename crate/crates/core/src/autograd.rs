//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! already topologically sorted; `backward` walks it once in reverse.

use crate::error::{Error, Result};
use crate::linalg::{cholesky_inverse, gemm, logdet_spd};
use crate::tensor::{lit, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const NORM_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        batch: usize,
        shared_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        n: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        length: usize,
        train: bool,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        x: Var,
        n: usize,
        norms: Vec<T>,
    },
    LogDet {
        x: Var,
        n: usize,
        inv: Vec<T>,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum(Var),
    Mean(Var),
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
        head_dim: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
        head_dim: usize,
    },
    TransposeLast2 {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        n: usize,
    },
    Concat0(Vec<Var>),
    CrossEntropy {
        x: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    len_out: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batchnorm statistics observed in train mode, for updating running stats.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

/// Selects batchnorm behavior.
pub enum BatchNormMode<'a, T> {
    Train,
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient after `backward`. Leaves that require grad but were not reached get zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape();
        Some(match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a + b`, where `b`'s shape equals `a`'s or a trailing suffix of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let bv = self.value(b).data();
        let n = bv.len().max(1);
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o += y;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv) {
            *o -= y;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv) {
            *o *= y;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched `op(a) · op(b)` over the last two axes. `b` may be rank 2 and
    /// shared across every batch entry of `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if k != kb || (!shared_b && sb[..sb.len() - 2] != *lead) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut batch: usize = lead.iter().product();
        let mut mm = m;
        // a shared rank-2 rhs lets the batch fold into the row dimension
        if shared_b && !trans_a {
            mm = batch * m;
            batch = 1;
        }
        let mut out = vec![T::zero(); batch * mm * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let bs = if shared_b { bv } else { &bv[i * k * n..(i + 1) * k * n] };
                gemm(
                    &av[i * mm * k..(i + 1) * mm * k],
                    bs,
                    &mut out[i * mm * n..(i + 1) * mm * n],
                    mm,
                    k,
                    n,
                    trans_a,
                    trans_b,
                    T::zero(),
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                shared_b,
                m: mm,
                k,
                n,
            },
            rg,
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * gaussian_cdf(v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(d[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (d[at(j)] - mx).exp();
                    d[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    d[at(j)] /= s;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalizes each slice along the last axis, then applies `gamma`/`beta` of that extent.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let rows = xv.numel() / n;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        let nf = lit::<T>(n as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + lit(NORM_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                n,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Batch normalization of `x: [b, c, t]` per channel over batch and time.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("batch_norm", &shape, &[3]));
        }
        let (b, c, t) = (shape[0], shape[1], shape[2]);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let train = matches!(mode, BatchNormMode::Train);
        if train && b * t <= 1 {
            return Err(Error::DegenerateBatch {
                batch: b,
                length: t,
            });
        }
        let xv = self.value(x).data();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let cnt = b * t;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        match mode {
            BatchNormMode::Train => {
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        s += xv[(bi * c + ch) * t..(bi * c + ch + 1) * t].iter().copied().sum::<T>();
                    }
                    let mu = s / lit(cnt as f64);
                    let mut v = T::zero();
                    for bi in 0..b {
                        for &val in &xv[(bi * c + ch) * t..(bi * c + ch + 1) * t] {
                            v += (val - mu) * (val - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = v / lit(cnt as f64);
                }
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => {
                mean.copy_from_slice(running_mean);
                var.copy_from_slice(running_var);
            }
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + lit(NORM_EPS)).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * t;
                for i in base..base + t {
                    let h = (xv[i] - mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    out[i] = h * g[ch] + be[ch];
                }
            }
        }
        let stats = train.then(|| BatchStats {
            var: var
                .iter()
                .map(|&v| v * lit(cnt as f64) / lit((cnt - 1) as f64))
                .collect(),
            mean,
        });
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                channels: c,
                length: t,
                train,
                xhat,
                rstd,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Rows along the last axis divided by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let rows = xv.numel() / n.max(1);
        let mut out = xv.clone();
        let mut norms = vec![T::zero(); rows];
        for (r, chunk) in out.data_mut().chunks_mut(n).enumerate() {
            let nrm = chunk.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[r] = nrm;
            let den = nrm.max(lit(L2_EPS));
            for v in chunk.iter_mut() {
                *v /= den;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::L2Normalize { x, n, norms }, rg)
    }

    /// `log det` of each SPD matrix in `[.., n, n]`, via Cholesky.
    pub fn logdet_psd(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(Error::shape("logdet_psd", &shape, &[]));
        }
        let n = shape[r - 1];
        let batch: usize = shape[..r - 2].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(batch);
        let mut inv = Vec::with_capacity(batch * n * n);
        for i in 0..batch {
            let (ld, l) = logdet_spd(&xv[i * n * n..(i + 1) * n * n], n)?;
            out.push(ld);
            inv.extend(cholesky_inverse(&l, n));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&shape[..r - 2], out)?,
            Op::LogDet { x, n, inv },
            rg,
        ))
    }

    /// Arithmetic mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("mean_axis", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::one() / lit(len as f64);
        for o in 0..outer {
            for j in 0..len {
                let src = &xv[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / lit(v.numel().max(1) as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Cross-correlation of `x: [b, c_in, t]` with `w: [c_out, c_in, k]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || stride == 0 {
            return Err(Error::shape("conv1d", &xs, &ws));
        }
        let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
        let (c_out, kernel) = (ws[0], ws[2]);
        if let Some(b) = bias {
            if self.value(b).numel() != c_out {
                return Err(Error::shape("conv1d", &ws, self.shape(b)));
            }
        }
        let len_out = conv_out_len(len, kernel, stride, pad).ok_or_else(|| Error::InputTooShort {
            layer: "conv1d".into(),
            length: len,
        })?;
        let g = ConvGeom {
            batch,
            c_in,
            len,
            c_out,
            kernel,
            stride,
            pad,
            len_out,
        };
        let xv = self.value(x).data();
        let ck = c_in * kernel;
        let mut cols = vec![T::zero(); batch * ck * len_out];
        for bi in 0..batch {
            for ci in 0..c_in {
                let xrow = &xv[(bi * c_in + ci) * len..(bi * c_in + ci + 1) * len];
                for kk in 0..kernel {
                    let crow = &mut cols[(bi * ck + ci * kernel + kk) * len_out..][..len_out];
                    for (o, c) in crow.iter_mut().enumerate() {
                        let pos = (o * stride + kk) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < len {
                            *c = xrow[pos as usize];
                        }
                    }
                }
            }
        }
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); batch * c_out * len_out];
        for bi in 0..batch {
            gemm(
                wv,
                &cols[bi * ck * len_out..(bi + 1) * ck * len_out],
                &mut out[bi * c_out * len_out..(bi + 1) * c_out * len_out],
                c_out,
                ck,
                len_out,
                false,
                false,
                T::zero(),
            );
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for bi in 0..batch {
                for co in 0..c_out {
                    for v in &mut out[(bi * c_out + co) * len_out..][..len_out] {
                        *v += bv[co];
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        let rg = self.rg(&parents);
        Ok(self.push(
            Tensor::new(&[batch, c_out, len_out], out)?,
            Op::Conv1d {
                x,
                w,
                bias,
                geom: g,
                cols,
            },
            rg,
        ))
    }

    /// `[b, p, h·dk] -> [b·h, p, dk]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", &s, &[heads]));
        }
        let (batch, len, dm) = (s[0], s[1], s[2]);
        let hd = dm / heads;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for i in 0..len {
                for h in 0..heads {
                    let src = &xv[(b * len + i) * dm + h * hd..][..hd];
                    out[((b * heads + h) * len + i) * hd..][..hd].copy_from_slice(src);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[batch * heads, len, hd], out)?,
            Op::SplitHeads {
                x,
                batch,
                len,
                heads,
                head_dim: hd,
            },
            rg,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(Error::shape("merge_heads", &s, &[heads]));
        }
        let (batch, len, hd) = (s[0] / heads, s[1], s[2]);
        let dm = hd * heads;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for i in 0..len {
                for h in 0..heads {
                    let src = &xv[((b * heads + h) * len + i) * hd..][..hd];
                    out[(b * len + i) * dm + h * hd..][..hd].copy_from_slice(src);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[batch, len, dm], out)?,
            Op::MergeHeads {
                x,
                batch,
                len,
                heads,
                head_dim: hd,
            },
            rg,
        ))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, rows, cols) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::shape("transpose", &s, &[])),
        };
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        transpose_into(xv, &mut out, batch, rows, cols);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::TransposeLast2 {
                x,
                batch,
                rows,
                cols,
            },
            rg,
        ))
    }

    /// Rows of `x` (viewed as `[rows, last_dim]`) picked by `idx`, giving `[idx.len(), last_dim]`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let rows = xv.numel() / n.max(1);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", xv.shape(), &[bad]));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            out.extend_from_slice(xv.row(i));
        }
        let shape = [idx.len(), n];
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::GatherRows { x, idx, n }, rg))
    }

    /// Stacks the rows of each part (viewed as `[rows, last_dim]`).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).last_dim();
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).last_dim() != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / n;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&[rows, n], out)?, Op::Concat0(parts.to_vec()), rg))
    }

    /// Mean softmax cross-entropy of `logits: [b, c]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let c = s[1];
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            loss += lse - row[y];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        loss /= lit(labels.len().max(1) as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                x: logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Accumulates d`loss`/d`v` for every reachable node. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Rank(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, gout: &[T]) {
        let mut pending: Vec<(Var, Vec<T>)> = Vec::with_capacity(3);
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(*a) {
                    pending.push((*a, gout.to_vec()));
                }
                if rg(*b) {
                    let n = self.nodes[b.0].value.numel().max(1);
                    let mut gb = vec![T::zero(); n];
                    for chunk in gout.chunks(n) {
                        for (d, &s) in gb.iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                    pending.push((*b, gb));
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    pending.push((*a, gout.to_vec()));
                }
                if rg(*b) {
                    pending.push((*b, gout.iter().map(|&g| -g).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if rg(*a) {
                    pending.push((*a, gout.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
                }
                if rg(*b) {
                    pending.push((*b, gout.iter().zip(av).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Scale(a, s) => pending.push((*a, gout.iter().map(|&g| g * *s).collect())),
            Op::Reshape(a) => pending.push((*a, gout.to_vec())),
            &Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                shared_b,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if rg(a) {
                    let mut ga = vec![T::zero(); av.len()];
                    for bi in 0..batch {
                        let bs = if shared_b { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
                        let gc = &gout[bi * m * n..(bi + 1) * m * n];
                        let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if trans_a {
                            gemm(bs, gc, dst, k, n, m, trans_b, true, T::zero());
                        } else {
                            gemm(gc, bs, dst, m, n, k, false, !trans_b, T::zero());
                        }
                    }
                    pending.push((a, ga));
                }
                if rg(b) {
                    let mut gb = vec![T::zero(); bv.len()];
                    for bi in 0..batch {
                        let asl = &av[bi * m * k..(bi + 1) * m * k];
                        let gc = &gout[bi * m * n..(bi + 1) * m * n];
                        let (dst, beta) = if shared_b {
                            (&mut gb[..], if bi == 0 { T::zero() } else { T::one() })
                        } else {
                            (&mut gb[bi * k * n..(bi + 1) * k * n], T::zero())
                        };
                        if trans_b {
                            gemm(gc, asl, dst, n, m, k, true, trans_a, beta);
                        } else {
                            gemm(asl, gc, dst, k, m, n, !trans_a, false, beta);
                        }
                    }
                    pending.push((b, gb));
                }
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.data();
                let inv_sqrt_2pi = lit::<T>(0.398_942_280_401_432_7);
                let half = lit::<T>(0.5);
                let g = gout
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| g * (gaussian_cdf(v) + v * inv_sqrt_2pi * (-(v * v) * half).exp()))
                    .collect();
                pending.push((*x, g));
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let mut g = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let dot: T = (0..len).map(|j| gout[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            g[at(j)] = y[at(j)] * (gout[at(j)] - dot);
                        }
                    }
                }
                pending.push((x, g));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                n,
                xhat,
                rstd,
            } => {
                let n = *n;
                let gv = self.nodes[gamma.0].value.data();
                let rows = xhat.len() / n;
                let nf = lit::<T>(n as f64);
                if rg(*x) {
                    let mut gx = vec![T::zero(); xhat.len()];
                    for r in 0..rows {
                        let go = &gout[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let d = go[j] * gv[j];
                            s1 += d;
                            s2 += d * xh[j];
                        }
                        s1 /= nf;
                        s2 /= nf;
                        for j in 0..n {
                            gx[r * n + j] = rstd[r] * (go[j] * gv[j] - s1 - xh[j] * s2);
                        }
                    }
                    pending.push((*x, gx));
                }
                if rg(*gamma) || rg(*beta) {
                    let mut gg = vec![T::zero(); n];
                    let mut gb = vec![T::zero(); n];
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += gout[r * n + j] * xhat[r * n + j];
                            gb[j] += gout[r * n + j];
                        }
                    }
                    pending.push((*gamma, gg));
                    pending.push((*beta, gb));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                channels,
                length,
                train,
                xhat,
                rstd,
            } => {
                let (c, t) = (*channels, *length);
                let b = xhat.len() / (c * t);
                let gv = self.nodes[gamma.0].value.data();
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * t;
                        for i in base..base + t {
                            gg[ch] += gout[i] * xhat[i];
                            gb[ch] += gout[i];
                        }
                    }
                }
                if rg(*x) {
                    let mut gx = vec![T::zero(); xhat.len()];
                    let cnt = lit::<T>((b * t) as f64);
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * t;
                            let scale = gv[ch] * rstd[ch];
                            for i in base..base + t {
                                gx[i] = if *train {
                                    scale * (gout[i] - gb[ch] / cnt - xhat[i] * gg[ch] / cnt)
                                } else {
                                    scale * gout[i]
                                };
                            }
                        }
                    }
                    pending.push((*x, gx));
                }
                pending.push((*gamma, gg));
                pending.push((*beta, gb));
            }
            Op::L2Normalize { x, n, norms } => {
                let n = *n;
                let y = node.value.data();
                let mut g = vec![T::zero(); y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let go = &gout[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    if nrm > lit(L2_EPS) {
                        let dot: T = go.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] = (go[j] - yr[j] * dot) / nrm;
                        }
                    } else {
                        for j in 0..n {
                            g[r * n + j] = go[j] / lit(L2_EPS);
                        }
                    }
                }
                pending.push((*x, g));
            }
            Op::LogDet { x, n, inv } => {
                let nn = n * n;
                let g = inv
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * gout[i / nn])
                    .collect();
                pending.push((*x, g));
            }
            &Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let inv = T::one() / lit(len as f64);
                let mut g = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let src = &gout[o * inner..(o + 1) * inner];
                    for j in 0..len {
                        for (d, &s) in g[(o * len + j) * inner..][..inner].iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                pending.push((x, g));
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                pending.push((*x, vec![gout[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                pending.push((*x, vec![gout[0] / lit(n.max(1) as f64); n]));
            }
            Op::Conv1d {
                x,
                w,
                bias,
                geom: g,
                cols,
            } => {
                let ck = g.c_in * g.kernel;
                let lo = g.len_out;
                if rg(*w) {
                    let mut gw = vec![T::zero(); g.c_out * ck];
                    for bi in 0..g.batch {
                        gemm(
                            &gout[bi * g.c_out * lo..(bi + 1) * g.c_out * lo],
                            &cols[bi * ck * lo..(bi + 1) * ck * lo],
                            &mut gw,
                            g.c_out,
                            lo,
                            ck,
                            false,
                            true,
                            if bi == 0 { T::zero() } else { T::one() },
                        );
                    }
                    pending.push((*w, gw));
                }
                if let Some(b) = bias {
                    if rg(*b) {
                        let mut gb = vec![T::zero(); g.c_out];
                        for bi in 0..g.batch {
                            for co in 0..g.c_out {
                                gb[co] += gout[(bi * g.c_out + co) * lo..][..lo].iter().copied().sum();
                            }
                        }
                        pending.push((*b, gb));
                    }
                }
                if rg(*x) {
                    let wv = self.nodes[w.0].value.data();
                    let mut gcols = vec![T::zero(); ck * lo];
                    let mut gx = vec![T::zero(); g.batch * g.c_in * g.len];
                    for bi in 0..g.batch {
                        gemm(
                            wv,
                            &gout[bi * g.c_out * lo..(bi + 1) * g.c_out * lo],
                            &mut gcols,
                            ck,
                            g.c_out,
                            lo,
                            true,
                            false,
                            T::zero(),
                        );
                        for ci in 0..g.c_in {
                            let xrow = &mut gx[(bi * g.c_in + ci) * g.len..][..g.len];
                            for kk in 0..g.kernel {
                                let crow = &gcols[(ci * g.kernel + kk) * lo..][..lo];
                                for (o, &c) in crow.iter().enumerate() {
                                    let pos = (o * g.stride + kk) as isize - g.pad as isize;
                                    if pos >= 0 && (pos as usize) < g.len {
                                        xrow[pos as usize] += c;
                                    }
                                }
                            }
                        }
                    }
                    pending.push((*x, gx));
                }
            }
            &Op::SplitHeads {
                x,
                batch,
                len,
                heads,
                head_dim: hd,
            } => {
                let dm = heads * hd;
                let mut g = vec![T::zero(); gout.len()];
                for b in 0..batch {
                    for i in 0..len {
                        for h in 0..heads {
                            g[(b * len + i) * dm + h * hd..][..hd]
                                .copy_from_slice(&gout[((b * heads + h) * len + i) * hd..][..hd]);
                        }
                    }
                }
                pending.push((x, g));
            }
            &Op::MergeHeads {
                x,
                batch,
                len,
                heads,
                head_dim: hd,
            } => {
                let dm = heads * hd;
                let mut g = vec![T::zero(); gout.len()];
                for b in 0..batch {
                    for i in 0..len {
                        for h in 0..heads {
                            g[((b * heads + h) * len + i) * hd..][..hd]
                                .copy_from_slice(&gout[(b * len + i) * dm + h * hd..][..hd]);
                        }
                    }
                }
                pending.push((x, g));
            }
            &Op::TransposeLast2 {
                x,
                batch,
                rows,
                cols,
            } => {
                let mut g = vec![T::zero(); gout.len()];
                transpose_into(gout, &mut g, batch, cols, rows);
                pending.push((x, g));
            }
            Op::GatherRows { x, idx, n } => {
                let mut g = vec![T::zero(); self.nodes[x.0].value.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for (d, &s) in g[src * n..(src + 1) * n].iter_mut().zip(&gout[r * n..(r + 1) * n]) {
                        *d += s;
                    }
                }
                pending.push((*x, g));
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if rg(p) {
                        pending.push((p, gout[off..off + len].to_vec()));
                    }
                    off += len;
                }
            }
            Op::CrossEntropy { x, labels, probs } => {
                let c = probs.len() / labels.len().max(1);
                let scale = gout[0] / lit(labels.len().max(1) as f64);
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    g[r * c + y] -= scale;
                }
                pending.push((*x, g));
            }
        }
        for (v, g) in pending {
            self.accumulate(v, g);
        }
    }
}

fn transpose_into<T: Copy>(src: &[T], dst: &mut [T], batch: usize, rows: usize, cols: usize) {
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let d = &mut dst[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
}

pub fn gaussian_cdf<T: Scalar>(x: T) -> T {
    lit::<T>(0.5) * (T::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Output length of a 1-D convolution, `None` when the input is too short.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_op;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const UNIT_TOL: f64 = 1e-4;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut rng(seed))
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    fn spd(n: usize, seed: u64) -> Tensor<f64> {
        let m = randn(&[n, n], seed);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| m.data()[k * n + i] * m.data()[k * n + j]).sum::<f64>()
                    + if i == j { n as f64 } else { 0.0 };
            }
        }
        t(&[n, n], &a)
    }

    /// Gauss-Jordan inverse, independent of the Cholesky path.
    fn inverse(a: &[f64], n: usize) -> Vec<f64> {
        let mut m = a.to_vec();
        let mut inv: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| m[i * n + c].abs().total_cmp(&m[j * n + c].abs())).unwrap();
            for k in 0..n {
                m.swap(c * n + k, p * n + k);
                inv.swap(c * n + k, p * n + k);
            }
            let d = m[c * n + c];
            for k in 0..n {
                m[c * n + k] /= d;
                inv[c * n + k] /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = m[r * n + c];
                    for k in 0..n {
                        m[r * n + k] -= f * m[c * n + k];
                        inv[r * n + k] -= f * inv[c * n + k];
                    }
                }
            }
        }
        inv
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (b, ci, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let lo = conv_out_len(len, k, stride, pad).unwrap();
        let mut out = vec![0.0; b * co * lo];
        for n in 0..b {
            for o in 0..co {
                for j in 0..lo {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for q in 0..k {
                            let pos = (j * stride + q) as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < len {
                                s += x.data()[(n * ci + c) * len + pos as usize] * w.data()[(o * ci + c) * k + q];
                            }
                        }
                    }
                    out[(n * co + o) * lo + j] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_closed_form_and_shape_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.constant(t(&[3, 2], &[7., 8., 9., 10., 11., 12.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[58., 64., 139., 154.]);
        assert!(matches!(g.matmul(a, a), Err(Error::Shape { .. })));
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::<f64>::new();
        let x = randn(&[4, 4], 1);
        let a = g.constant(x.clone());
        let i = g.constant(Tensor::eye(4));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), x.data());
    }

    #[test]
    fn matmul_gradients() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = randn(if ta { &[3, 2] } else { &[2, 3] }, 2);
            let b = randn(if tb { &[4, 3] } else { &[3, 4] }, 3);
            let err = check_op(&[a, b], |g, v| g.matmul_t(v[0], v[1], ta, tb)).unwrap();
            assert!(err < UNIT_TOL, "({ta},{tb}) {err}");
        }
        // batched lhs against a shared rank-2 rhs
        let err = check_op(&[randn(&[2, 3, 4], 4), randn(&[5, 4], 5)], |g, v| g.matmul_t(v[0], v[1], false, true))
            .unwrap();
        assert!(err < UNIT_TOL, "{err}");
        let err = check_op(&[randn(&[2, 3, 4], 6), randn(&[2, 4, 2], 7)], |g, v| g.matmul(v[0], v[1])).unwrap();
        assert!(err < UNIT_TOL, "{err}");
    }

    #[test]
    fn conv_impulse_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = randn(&[2, 3, 7], 8);
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let xv = g.constant(x.clone());
        let wv = g.constant(t(&[3, 3, 1], &w));
        let y = g.conv1d(xv, wv, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn conv_matches_naive_loop() {
        let x = randn(&[2, 3, 11], 9);
        let w = randn(&[4, 3, 5], 10);
        for (s, p) in [(1, 0), (2, 2), (3, 1)] {
            let mut g = Graph::<f64>::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv1d(xv, wv, None, s, p).unwrap();
            close(g.value(y).data(), &naive_conv(&x, &w, s, p), 1e-12);
        }
    }

    #[test]
    fn conv_too_short_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3]));
        let w = g.constant(Tensor::zeros(&[1, 1, 8]));
        assert!(matches!(g.conv1d(x, w, None, 2, 0), Err(Error::InputTooShort { .. })));
    }

    #[test]
    fn conv_gradients() {
        let err = check_op(&[randn(&[2, 3, 9], 11), randn(&[4, 3, 4], 12), randn(&[4], 13)], |g, v| {
            g.conv1d(v[0], v[1], Some(v[2]), 2, 3)
        })
        .unwrap();
        assert!(err < UNIT_TOL, "{err}");
    }

    #[test]
    fn batch_norm_train_standardizes_channels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[4, 3, 5], 14));
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let (y, stats) = g.batch_norm(x, gamma, beta, BatchNormMode::Train).unwrap();
        assert!(stats.is_some());
        let v = g.value(y).data();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| (0..5).map(move |j| (b, j))).map(|(b, j)| v[(b * 3 + c) * 5 + j]).collect();
            let m = vals.iter().sum::<f64>() / 20.0;
            let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 20.0;
            assert!(m.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_gradients() {
        let inputs = [randn(&[3, 2, 4], 15), randn(&[2], 16), randn(&[2], 17)];
        let err = check_op(&inputs, |g, v| Ok(g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train)?.0)).unwrap();
        assert!(err < UNIT_TOL, "{err}");
        let (rm, rv) = ([0.3, -0.2], [1.5, 0.7]);
        let err = check_op(&inputs, |g, v| {
            let mode = BatchNormMode::Eval {
                running_mean: &rm,
                running_var: &rv,
            };
            Ok(g.batch_norm(v[0], v[1], v[2], mode)?.0)
        })
        .unwrap();
        assert!(err < UNIT_TOL, "{err}");
    }

    #[test]
    fn gelu_values_and_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, 6.0, -6.0]));
        let y = g.gelu(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 6.0).abs() < 1e-6);
        assert!(v[2].abs() < 1e-6);
        let err = check_op(&[randn(&[10], 18)], |g, v| Ok(g.gelu(v[0]))).unwrap();
        assert!(err < UNIT_TOL, "{err}");
    }

    #[test]
    fn softmax_closed_form_and_shift() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        close(g.value(y).data(), &[0.25, 0.75], 1e-12);
        let base = randn(&[2, 5], 19);
        let shifted = base.map(|v| v + 100.0);
        let a = g.constant(base);
        let b = g.constant(shifted);
        let ya = g.softmax(a, 1).unwrap();
        let yb = g.softmax(b, 1).unwrap();
        close(g.value(ya).data(), g.value(yb).data(), 1e-12);
    }

    #[test]
    fn softmax_gradients() {
        for axis in 0..3 {
            let err = check_op(&[randn(&[2, 3, 4], 20)], |g, v| g.softmax(v[0], axis)).unwrap();
            assert!(err < UNIT_TOL, "axis {axis}: {err}");
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[3, 6], 21));
        let gamma = g.constant(Tensor::ones(&[6]));
        let beta = g.constant(Tensor::zeros(&[6]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for r in 0..3 {
            let row = g.value(y).row(r);
            let m = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-10 && (var - 1.0).abs() < 1e-3);
        }
        let err = check_op(&[randn(&[3, 6], 22), randn(&[6], 23), randn(&[6], 24)], |g, v| g.layer_norm(v[0], v[1], v[2]))
            .unwrap();
        assert!(err < UNIT_TOL, "{err}");
    }

    #[test]
    fn l2_normalize_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[3.0, 4.0]));
        let z = g.constant(Tensor::zeros(&[3]));
        let ya = g.l2_normalize(a);
        let yz = g.l2_normalize(z);
        close(g.value(ya).data(), &[0.6, 0.8], 1e-15);
        assert_eq!(g.value(yz).data(), &[0.0; 3]);
        let r = g.constant(randn(&[4, 7], 25));
        let yr = g.l2_normalize(r);
        for i in 0..4 {
            let n = g.value(yr).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let err = check_op(&[randn(&[4, 7], 26)], |g, v| Ok(g.l2_normalize(v[0]))).unwrap();
        assert!(err < UNIT_TOL, "{err}");
    }

    #[test]
    fn logdet_values() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::eye(4));
        let d = g.constant(t(&[2, 2], &[2.0, 0.0, 0.0, 3.0]));
        let li = g.logdet_psd(i).unwrap();
        let ld = g.logdet_psd(d).unwrap();
        assert_eq!(g.value(li).item(), 0.0);
        assert!((g.value(ld).item() - 6f64.ln()).abs() < 1e-12);
        let bad = g.constant(t(&[2, 2], &[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(g.logdet_psd(bad), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn logdet_gradient_on_spd() {
        // the factorization reads one triangle, so differentiate through a symmetrization
        let a = spd(5, 27);
        let err = check_op(&[a], |g, v| {
            let at = g.transpose(v[0])?;
            let s = g.add(v[0], at)?;
            let s = g.scale(s, 0.5);
            g.logdet_psd(s)
        })
        .unwrap();
        assert!(err < UNIT_TOL, "{err}");
    }

    #[test]
    fn mean_axis_cases() {
        let mut g = Graph::<f64>::new();
        let one = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let m1 = g.mean_axis(one, 0).unwrap();
        assert_eq!(g.value(m1).data(), &[1.0, 2.0, 3.0]);
        let x = g.leaf(t(&[2, 2], &[1.0, 1.0, 3.0, 3.0]));
        let m = g.mean_axis(x, 0).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 2.0]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.5; 4]);
        let err = check_op(&[randn(&[2, 3, 4], 28)], |g, v| g.mean_axis(v[0], 1)).unwrap();
        assert!(err < UNIT_TOL, "{err}");
    }

    #[test]
    fn backward_closed_forms_and_errors() {
        let x0 = randn(&[5], 29);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(x0.clone());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 5]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(x0.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        close(g.grad(x).unwrap().data(), &x0.map(|v| 2.0 * v).into_data(), 1e-15);
        for _ in 0..3 {
            assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
        }

        let mut g = Graph::<f64>::new();
        let x = g.leaf(x0);
        assert!(matches!(g.backward(x), Err(Error::Rank(_))));
    }

    #[test]
    fn structural_op_gradients() {
        let cases: Vec<(Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>)> = vec![
            (vec![randn(&[2, 3, 4], 30), randn(&[4], 31)], Box::new(|g, v| g.add(v[0], v[1]))),
            (vec![randn(&[3, 4], 32), randn(&[3, 4], 33)], Box::new(|g, v| g.sub(v[0], v[1]))),
            (vec![randn(&[3, 4], 34)], Box::new(|g, v| Ok(g.scale(v[0], -2.5)))),
            (vec![randn(&[3, 4], 35)], Box::new(|g, v| g.reshape(v[0], &[2, 6]))),
            (vec![randn(&[2, 3, 8], 36)], Box::new(|g, v| g.split_heads(v[0], 2))),
            (vec![randn(&[4, 3, 4], 37)], Box::new(|g, v| g.merge_heads(v[0], 2))),
            (vec![randn(&[2, 3, 4], 38)], Box::new(|g, v| g.transpose(v[0]))),
            (vec![randn(&[5, 3], 39)], Box::new(|g, v| g.gather_rows(v[0], vec![4, 0, 0, 2]))),
            (vec![randn(&[2, 3], 40), randn(&[3], 41)], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
            (vec![randn(&[4, 3], 42)], Box::new(|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]))),
            (vec![randn(&[6], 43)], Box::new(|g, v| Ok(g.mean(v[0])))),
        ];
        for (i, (inputs, f)) in cases.iter().enumerate() {
            let err = check_op(inputs, |g, v| f(g, v)).unwrap();
            assert!(err < UNIT_TOL, "case {i}: {err}");
        }
    }

    #[test]
    fn split_merge_round_trip() {
        let mut g = Graph::<f64>::new();
        let x0 = randn(&[2, 3, 8], 44);
        let x = g.constant(x0.clone());
        let s = g.split_heads(x, 4).unwrap();
        assert_eq!(g.shape(s), &[8, 3, 2]);
        let m = g.merge_heads(s, 4).unwrap();
        assert_eq!(g.value(m).data(), x0.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn conv_length_formula(len in 1usize..40, k in 1usize..9, s in 1usize..5, pad in 0usize..4) {
            prop_assume!(len + 2 * pad >= k);
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::zeros(&[1, 1, len]));
            let w = g.constant(Tensor::zeros(&[1, 1, k]));
            let y = g.conv1d(x, w, None, s, pad).unwrap();
            prop_assert_eq!(g.shape(y)[2], (len + 2 * pad - k) / s + 1);
        }

        #[test]
        fn softmax_rows_are_distributions(v in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let mut g = Graph::<f64>::new();
            let x = g.constant(t(&[3, 4], &v));
            let y = g.softmax(x, 1).unwrap();
            for r in 0..3 {
                let row = g.value(y).row(r);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn logdet_of_inverse_cancels(seed in 0u64..1000, n in 1usize..7) {
            let a = spd(n, seed);
            let inv = inverse(a.data(), n);
            let mut g = Graph::<f64>::new();
            let av = g.constant(a);
            let iv = g.constant(t(&[n, n], &inv));
            let la = g.logdet_psd(av).unwrap();
            let li = g.logdet_psd(iv).unwrap();
            prop_assert!((g.value(la).item() + g.value(li).item()).abs() < 1e-8);
        }

        #[test]
        fn unit_op_gradients_randomized(seed in 0u64..10_000) {
            let x = randn(&[3, 5], seed);
            let w = randn(&[2, 5], seed + 1);
            prop_assert!(check_op(std::slice::from_ref(&x), |g, v| Ok(g.gelu(v[0]))).unwrap() < UNIT_TOL);
            prop_assert!(check_op(std::slice::from_ref(&x), |g, v| g.softmax(v[0], 1)).unwrap() < UNIT_TOL);
            prop_assert!(check_op(std::slice::from_ref(&x), |g, v| Ok(g.l2_normalize(v[0]))).unwrap() < UNIT_TOL);
            prop_assert!(check_op(&[x, w], |g, v| g.matmul_t(v[0], v[1], false, true)).unwrap() < UNIT_TOL);
        }
    }
}

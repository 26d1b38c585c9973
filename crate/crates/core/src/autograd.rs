//! A small reverse-mode autodiff tape covering the ops the denoiser, text
//! encoder and autoencoder need. Layout is NCHW throughout.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Scale(Var, T),
    /// `x[N,C,H,W] + v[N,C]` broadcast over space.
    AddChannel(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        in_hw: (usize, usize),
        cols: Vec<T>,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// `a[B,M,K] * b[B,N,K]^T`.
    BmmNt(Var, Var),
    /// `a[B,M,K] * b[B,K,N]`.
    Bmm(Var, Var),
    Softmax(Var),
    ToTokens(Var),
    FromTokens(Var),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Parameter gradients keyed by id, in id order.
#[derive(Debug, Default)]
pub struct Gradients<T: Real> {
    pub by_param: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.by_param.get_mut(&id)
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

fn im2col<T: Real>(
    x: &[T],
    c: usize,
    (h, w): (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    (h, w): (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that keeps no backward state; `backward` on it fails.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = self.grad_enabled
            && match op {
                Op::Input => false,
                Op::Param(_) => true,
                _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
            };
        let op = if self.grad_enabled {
            op
        } else {
            // Drop saved activations; only the value is kept.
            match op {
                Op::Param(id) => Op::Param(id),
                _ => Op::Input,
            }
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, &[])
    }

    /// Registers (once per graph) a trainable leaf for `id`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), &[]);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(v) != [xs[0], xs[1]] {
            return Err(Error::ShapeMismatch(format!(
                "add_channel: {xs:?} vs {:?}",
                self.shape(v)
            )));
        }
        let hw = xs[2] * xs[3];
        let mut out = self.value(x).clone();
        let vv = self.value(v).data();
        for (nc, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let b = vv[nc];
            chunk.iter_mut().for_each(|e| *e += b);
        }
        Ok(self.push(out, Op::AddChannel(x, v), &[x, v]))
    }

    /// 2-D convolution; `w` is `[Co, Ci, k, k]`, `b` is `[Co]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::ShapeMismatch(format!("conv2d: x {xs:?}, w {ws:?}")));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::ShapeMismatch(format!("conv2d: kernel {k} larger than input")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let kk = ci * k * k;
        let hw_out = ho * wo;
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let keep_cols = self.grad_enabled && !pointwise;
        let mut cols_all: Vec<T> = if keep_cols {
            vec![T::zero(); n * kk * hw_out]
        } else {
            Vec::new()
        };
        let mut scratch = if pointwise || keep_cols {
            Vec::new()
        } else {
            vec![T::zero(); kk * hw_out]
        };
        let mut out = vec![T::zero(); n * co * hw_out];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for i in 0..n {
                let xi = &xv[i * ci * h * wd..(i + 1) * ci * h * wd];
                let cols: &[T] = if pointwise {
                    xi
                } else {
                    let dst = if keep_cols {
                        &mut cols_all[i * kk * hw_out..(i + 1) * kk * hw_out]
                    } else {
                        &mut scratch[..]
                    };
                    im2col(xi, ci, (h, wd), k, stride, pad, (ho, wo), dst);
                    dst
                };
                gemm(
                    co,
                    kk,
                    hw_out,
                    wv,
                    false,
                    cols,
                    false,
                    &mut out[i * co * hw_out..(i + 1) * co * hw_out],
                    false,
                );
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                if bv.len() != co {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d bias has {} entries for {co} channels",
                        bv.len()
                    )));
                }
                for (idx, chunk) in out.chunks_mut(hw_out).enumerate() {
                    let bias = bv[idx % co];
                    chunk.iter_mut().for_each(|e| *e += bias);
                }
            }
        }
        let value = Tensor::from_vec(&[n, co, ho, wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                in_hw: (h, wd),
                cols: cols_all,
            },
            &parents,
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch(format!("upsample2x: {xs:?}")));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[xs[0], xs[1], 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x(x), &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch(format!("concat: {sa:?} vs {sb:?}")));
        }
        let hw = sa[2] * sa[3];
        let (la, lb) = (sa[1] * hw, sb[1] * hw);
        let mut out = Vec::with_capacity(sa[0] * (la + lb));
        for i in 0..sa[0] {
            out.extend_from_slice(&self.value(a).data()[i * la..(i + 1) * la]);
            out.extend_from_slice(&self.value(b).data()[i * lb..(i + 1) * lb]);
        }
        let value = Tensor::from_vec(&[sa[0], sa[1] + sb[1], sa[2], sa[3]], out)?;
        Ok(self.push(value, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[1] % groups != 0 {
            return Err(Error::ShapeMismatch(format!(
                "group_norm: {xs:?} with {groups} groups"
            )));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let cg = c / groups;
        let m = cg * hw;
        let eps = T::of(1e-5);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); n * groups];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for gi in 0..groups {
                let off = (i * c + gi * cg) * hw;
                let block = &xv[off..off + m];
                let mean = block.iter().copied().sum::<T>() / T::of(m as f64);
                let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>()
                    / T::of(m as f64);
                let r = T::one() / (var + eps).sqrt();
                rstd[i * groups + gi] = r;
                for (j, &v) in block.iter().enumerate() {
                    let ch = gi * cg + j / hw;
                    let xh = (v - mean) * r;
                    xhat[off + j] = xh;
                    out[off + j] = xh * g[ch] + bt[ch];
                }
            }
        }
        let value = Tensor::from_vec(&xs, out)?;
        let keep = self.grad_enabled;
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat: if keep { xhat } else { Vec::new() },
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| v / (T::one() + (-v).exp()));
        self.push(out, Op::Silu(x), &[x])
    }

    /// `x[M,K] * w[K,N] + b[N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch(format!("linear: x {xs:?}, w {ws:?}")));
        }
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != n {
                return Err(Error::ShapeMismatch("linear bias".into()));
            }
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::ShapeMismatch(format!("bmm_nt: {sa:?} vs {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                false,
                &self.value(b).data()[i * n * k..(i + 1) * n * k],
                true,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::from_vec(&[bs, m, n], out)?;
        Ok(self.push(value, Op::BmmNt(a, b), &[a, b]))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch(format!("bmm: {sa:?} vs {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                false,
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::from_vec(&[bs, m, n], out)?;
        Ok(self.push(value, Op::Bmm(a, b), &[a, b]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().expect("non-empty shape");
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(last) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// `[N,C,H,W] -> [N,H*W,C]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch(format!("to_tokens: {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for i in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(i * hw + p) * c + ch] = src[(i * c + ch) * hw + p];
                }
            }
        }
        let value = Tensor::from_vec(&[n, hw, c], out)?;
        Ok(self.push(value, Op::ToTokens(x), &[x]))
    }

    /// `[N,H*W,C] -> [N,C,H,W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != h * w {
            return Err(Error::ShapeMismatch(format!("from_tokens: {xs:?} to {h}x{w}")));
        }
        let (n, hw, c) = (xs[0], xs[1], xs[2]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for i in 0..n {
            for p in 0..hw {
                for ch in 0..c {
                    out[(i * c + ch) * hw + p] = src[(i * hw + p) * c + ch];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::FromTokens(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Row gather `table[ids]` producing `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::ShapeMismatch(format!("embedding table {ts:?}")));
        }
        let (v, d) = (ts[0], ts[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} out of range for vocabulary of {v}"
                )));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(&[ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean of squared differences, as a `[1]` tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).expect_shape(self.shape(b))?;
        let n = self.value(a).numel().max(1);
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(s / T::of(n as f64));
        Ok(self.push(value, Op::Mse(a, b), &[a, b]))
    }

    /// Reverse pass from a scalar node; returns gradients of every parameter
    /// leaf that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::InvalidArgument(
                "backward on an inference graph".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    out.by_param.insert(*id, g);
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|v| v * s));
                }
                Op::AddChannel(x, v) => {
                    if self.rg(*v) {
                        let vs = self.shape(*v).to_vec();
                        let hw = g.numel() / (vs[0] * vs[1]);
                        let data = g.data().chunks(hw).map(|c| c.iter().copied().sum()).collect();
                        accumulate(&mut grads, *v, Tensor::from_vec(&vs, data)?);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    in_hw,
                    cols,
                } => {
                    let xs = self.shape(*x).to_vec();
                    let ws = self.shape(*w).to_vec();
                    let (n, ci) = (xs[0], xs[1]);
                    let (co, k) = (ws[0], ws[2]);
                    let gs = g.shape();
                    let (ho, wo) = (gs[2], gs[3]);
                    let hw_out = ho * wo;
                    let kk = ci * k * k;
                    let pointwise = k == 1 && *stride == 1 && *pad == 0;
                    let gd = g.data();
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let mut db = vec![T::zero(); co];
                            for (idx, chunk) in gd.chunks(hw_out).enumerate() {
                                db[idx % co] += chunk.iter().copied().sum::<T>();
                            }
                            accumulate(&mut grads, *b, Tensor::from_vec(&[co], db)?);
                        }
                    }
                    let xv = self.value(*x).data();
                    if self.rg(*w) {
                        let mut dw = vec![T::zero(); co * kk];
                        for i in 0..n {
                            let cols_i: &[T] = if pointwise {
                                &xv[i * kk * hw_out..(i + 1) * kk * hw_out]
                            } else {
                                &cols[i * kk * hw_out..(i + 1) * kk * hw_out]
                            };
                            gemm(
                                co,
                                hw_out,
                                kk,
                                &gd[i * co * hw_out..(i + 1) * co * hw_out],
                                false,
                                cols_i,
                                true,
                                &mut dw,
                                true,
                            );
                        }
                        accumulate(&mut grads, *w, Tensor::from_vec(&ws, dw)?);
                    }
                    if self.rg(*x) {
                        let wv = self.value(*w).data();
                        let (h, wd) = *in_hw;
                        let mut dx = vec![T::zero(); xv.len()];
                        let mut dcols = vec![T::zero(); kk * hw_out];
                        for i in 0..n {
                            let gi = &gd[i * co * hw_out..(i + 1) * co * hw_out];
                            let dxi = &mut dx[i * ci * h * wd..(i + 1) * ci * h * wd];
                            if pointwise {
                                gemm(kk, co, hw_out, wv, true, gi, false, dxi, false);
                            } else {
                                gemm(kk, co, hw_out, wv, true, gi, false, &mut dcols, false);
                                col2im(&dcols, ci, (h, wd), k, *stride, *pad, (ho, wo), dxi);
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_vec(&xs, dx)?);
                    }
                }
                Op::Upsample2x(x) => {
                    let xs = self.shape(*x).to_vec();
                    let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                    let gd = g.data();
                    let mut dx = vec![T::zero(); nc * h * w];
                    for p in 0..nc {
                        let s = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let d = &mut dx[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(y / 2) * w + xx / 2] += s[y * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&xs, dx)?);
                }
                Op::ConcatChannels(a, b) => {
                    let sa = self.shape(*a).to_vec();
                    let sb = self.shape(*b).to_vec();
                    let hw = sa[2] * sa[3];
                    let (la, lb) = (sa[1] * hw, sb[1] * hw);
                    let gd = g.data();
                    let mut da = Vec::with_capacity(sa[0] * la);
                    let mut db = Vec::with_capacity(sa[0] * lb);
                    for i in 0..sa[0] {
                        let base = i * (la + lb);
                        da.extend_from_slice(&gd[base..base + la]);
                        db.extend_from_slice(&gd[base + la..base + la + lb]);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, Tensor::from_vec(&sa, da)?);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, Tensor::from_vec(&sb, db)?);
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let xs = self.shape(*x).to_vec();
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let groups = *groups;
                    let cg = c / groups;
                    let m = cg * hw;
                    let gam = self.value(*gamma).data();
                    let gd = g.data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    let mut dx = vec![T::zero(); gd.len()];
                    for i in 0..n {
                        for gi in 0..groups {
                            let off = (i * c + gi * cg) * hw;
                            let r = rstd[i * groups + gi];
                            let mut sum_d = T::zero();
                            let mut sum_dx = T::zero();
                            for j in 0..m {
                                let ch = gi * cg + j / hw;
                                let dy = gd[off + j];
                                let xh = xhat[off + j];
                                dgamma[ch] += dy * xh;
                                dbeta[ch] += dy;
                                let dxh = dy * gam[ch];
                                sum_d += dxh;
                                sum_dx += dxh * xh;
                            }
                            let mf = T::of(m as f64);
                            for j in 0..m {
                                let ch = gi * cg + j / hw;
                                let dxh = gd[off + j] * gam[ch];
                                dx[off + j] =
                                    r / mf * (mf * dxh - sum_d - xhat[off + j] * sum_dx);
                            }
                        }
                    }
                    if self.rg(*gamma) {
                        accumulate(&mut grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                    }
                    if self.rg(*beta) {
                        accumulate(&mut grads, *beta, Tensor::from_vec(&[c], dbeta)?);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, Tensor::from_vec(&xs, dx)?);
                    }
                }
                Op::Silu(x) => {
                    let dx = g.zip_map(self.value(*x), |dy, v| dy * silu_grad(v))?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let xs = self.shape(*x).to_vec();
                    let ws = self.shape(*w).to_vec();
                    let (m, k, n) = (xs[0], xs[1], ws[1]);
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let mut db = vec![T::zero(); n];
                            for row in g.data().chunks(n) {
                                db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                            }
                            accumulate(&mut grads, *b, Tensor::from_vec(&[n], db)?);
                        }
                    }
                    if self.rg(*w) {
                        let mut dw = vec![T::zero(); k * n];
                        gemm(k, m, n, self.value(*x).data(), true, g.data(), false, &mut dw, false);
                        accumulate(&mut grads, *w, Tensor::from_vec(&ws, dw)?);
                    }
                    if self.rg(*x) {
                        let mut dx = vec![T::zero(); m * k];
                        gemm(m, n, k, g.data(), false, self.value(*w).data(), true, &mut dx, false);
                        accumulate(&mut grads, *x, Tensor::from_vec(&xs, dx)?);
                    }
                }
                Op::BmmNt(a, b) => {
                    let sa = self.shape(*a).to_vec();
                    let sb = self.shape(*b).to_vec();
                    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
                    let gd = g.data();
                    if self.rg(*a) {
                        let mut da = vec![T::zero(); bs * m * k];
                        for i in 0..bs {
                            gemm(
                                m,
                                n,
                                k,
                                &gd[i * m * n..(i + 1) * m * n],
                                false,
                                &self.value(*b).data()[i * n * k..(i + 1) * n * k],
                                false,
                                &mut da[i * m * k..(i + 1) * m * k],
                                false,
                            );
                        }
                        accumulate(&mut grads, *a, Tensor::from_vec(&sa, da)?);
                    }
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); bs * n * k];
                        for i in 0..bs {
                            gemm(
                                n,
                                m,
                                k,
                                &gd[i * m * n..(i + 1) * m * n],
                                true,
                                &self.value(*a).data()[i * m * k..(i + 1) * m * k],
                                false,
                                &mut db[i * n * k..(i + 1) * n * k],
                                false,
                            );
                        }
                        accumulate(&mut grads, *b, Tensor::from_vec(&sb, db)?);
                    }
                }
                Op::Bmm(a, b) => {
                    let sa = self.shape(*a).to_vec();
                    let sb = self.shape(*b).to_vec();
                    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    let gd = g.data();
                    if self.rg(*a) {
                        let mut da = vec![T::zero(); bs * m * k];
                        for i in 0..bs {
                            gemm(
                                m,
                                n,
                                k,
                                &gd[i * m * n..(i + 1) * m * n],
                                false,
                                &self.value(*b).data()[i * k * n..(i + 1) * k * n],
                                true,
                                &mut da[i * m * k..(i + 1) * m * k],
                                false,
                            );
                        }
                        accumulate(&mut grads, *a, Tensor::from_vec(&sa, da)?);
                    }
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); bs * k * n];
                        for i in 0..bs {
                            gemm(
                                k,
                                m,
                                n,
                                &self.value(*a).data()[i * m * k..(i + 1) * m * k],
                                true,
                                &gd[i * m * n..(i + 1) * m * n],
                                false,
                                &mut db[i * k * n..(i + 1) * k * n],
                                false,
                            );
                        }
                        accumulate(&mut grads, *b, Tensor::from_vec(&sb, db)?);
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let last = *y.shape().last().expect("shape");
                    let mut dx = g.clone();
                    for (drow, yrow) in dx.data_mut().chunks_mut(last).zip(y.data().chunks(last)) {
                        let dot: T = drow.iter().zip(yrow).map(|(&d, &v)| d * v).sum();
                        drow.iter_mut()
                            .zip(yrow)
                            .for_each(|(d, &v)| *d = v * (*d - dot));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ToTokens(x) => {
                    let xs = self.shape(*x).to_vec();
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let gd = g.data();
                    let mut dx = vec![T::zero(); gd.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                dx[(i * c + ch) * hw + p] = gd[(i * hw + p) * c + ch];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&xs, dx)?);
                }
                Op::FromTokens(x) => {
                    let xs = self.shape(*x).to_vec();
                    let (n, hw, c) = (xs[0], xs[1], xs[2]);
                    let gd = g.data();
                    let mut dx = vec![T::zero(); gd.len()];
                    for i in 0..n {
                        for p in 0..hw {
                            for ch in 0..c {
                                dx[(i * hw + p) * c + ch] = gd[(i * c + ch) * hw + p];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&xs, dx)?);
                }
                Op::Reshape(x) => {
                    let xs = self.shape(*x).to_vec();
                    accumulate(&mut grads, *x, g.reshape(&xs)?);
                }
                Op::Embedding { table, ids } => {
                    let ts = self.shape(*table).to_vec();
                    let d = ts[1];
                    let mut dt = Tensor::zeros(&ts);
                    {
                        let dd = dt.data_mut();
                        for (row, &id) in g.data().chunks(d).zip(ids) {
                            dd[id * d..(id + 1) * d]
                                .iter_mut()
                                .zip(row)
                                .for_each(|(o, &v)| *o += v);
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Mse(a, b) => {
                    let scale = g.data()[0] * T::of(2.0) / T::of(self.value(*a).numel().max(1) as f64);
                    let diff = self.value(*a).zip_map(self.value(*b), |x, y| (x - y) * scale)?;
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, diff.map(|v| -v));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, diff);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    //! Each op is checked against central finite differences in f64.
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Builds a scalar from params via `f`, then compares analytic and
    /// finite-difference gradients for every parameter entry.
    fn check(store: ParamStore<f64>, f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var) {
        let mut g = Graph::new();
        let loss = f(&mut g, &store);
        let grads = g.backward(loss).unwrap();
        let h = 1e-5;
        let mut num = 0.0;
        let mut den = 0.0;
        for id in store.ids() {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
            for j in 0..store.get(id).numel() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[j] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[j] -= h;
                let mut gp = Graph::new();
                let lp = f(&mut gp, &plus);
                let mut gm = Graph::new();
                let lm = f(&mut gm, &minus);
                let fd = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
                let a = analytic.data()[j];
                num += (a - fd).powi(2);
                den += fd.powi(2);
            }
        }
        let rel = (num / den.max(1e-30)).sqrt();
        assert!(rel < 1e-6, "relative gradient error {rel}");
    }

    fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for (name, shape) in shapes {
            s.insert(name, Tensor::randn(shape, 0.7, &mut rng)).unwrap();
        }
        s
    }

    fn target(g: &mut Graph<f64>, like: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(g.shape(like), 1.0, &mut rng);
        g.input(t)
    }

    #[test]
    fn conv2d_gradients() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            let s = store_with(&[("x", &[2, 3, 5, 4]), ("w", &[4, 3, k, k]), ("b", &[4])], 1);
            check(s, |g, s| {
                let x = g.param(s, s.id("x").unwrap());
                let w = g.param(s, s.id("w").unwrap());
                let b = g.param(s, s.id("b").unwrap());
                let y = g.conv2d(x, w, Some(b), stride, pad).unwrap();
                let t = target(g, y, 9);
                g.mse(y, t).unwrap()
            });
        }
    }

    #[test]
    fn norm_activation_and_resampling_gradients() {
        let s = store_with(
            &[("x", &[2, 4, 3, 3]), ("gamma", &[4]), ("beta", &[4]), ("v", &[2, 4]), ("y", &[2, 2, 3, 3])],
            2,
        );
        check(s, |g, s| {
            let x = g.param(s, s.id("x").unwrap());
            let ga = g.param(s, s.id("gamma").unwrap());
            let be = g.param(s, s.id("beta").unwrap());
            let v = g.param(s, s.id("v").unwrap());
            let y = g.param(s, s.id("y").unwrap());
            let h = g.group_norm(x, ga, be, 2).unwrap();
            let h = g.silu(h);
            let h = g.add_channel(h, v).unwrap();
            let h = g.concat_channels(h, y).unwrap();
            let h = g.upsample2x(h).unwrap();
            let h = g.scale(h, 0.5);
            let t = target(g, h, 3);
            g.mse(h, t).unwrap()
        });
    }

    #[test]
    fn attention_path_gradients() {
        let s = store_with(
            &[
                ("x", &[2, 3, 2, 2]),
                ("table", &[5, 3]),
                ("wq", &[3, 3]),
                ("wk", &[3, 3]),
                ("wv", &[3, 3]),
                ("bo", &[3]),
            ],
            4,
        );
        check(s, |g, s| {
            let x = g.param(s, s.id("x").unwrap());
            let table = g.param(s, s.id("table").unwrap());
            let wq = g.param(s, s.id("wq").unwrap());
            let wk = g.param(s, s.id("wk").unwrap());
            let wv = g.param(s, s.id("wv").unwrap());
            let bo = g.param(s, s.id("bo").unwrap());
            let tok = g.to_tokens(x).unwrap();
            let flat = g.reshape(tok, &[8, 3]).unwrap();
            let q = g.linear(flat, wq, None).unwrap();
            let q = g.reshape(q, &[2, 4, 3]).unwrap();
            let e = g.embedding(table, &[1, 4, 4, 0, 2, 1]).unwrap();
            let k = g.linear(e, wk, None).unwrap();
            let k = g.reshape(k, &[2, 3, 3]).unwrap();
            let v = g.linear(e, wv, Some(bo)).unwrap();
            let v = g.reshape(v, &[2, 3, 3]).unwrap();
            let sc = g.bmm_nt(q, k).unwrap();
            let p = g.softmax(sc);
            let o = g.bmm(p, v).unwrap();
            let o = g.from_tokens(o, 2, 2).unwrap();
            let o = g.add(o, x).unwrap();
            let t = target(g, o, 5);
            g.mse(o, t).unwrap()
        });
    }

    #[test]
    fn embedding_gradient_is_zero_for_unused_rows() {
        let s = store_with(&[("table", &[4, 2])], 6);
        let mut g = Graph::new();
        let t = g.param(&s, s.id("table").unwrap());
        let e = g.embedding(t, &[1, 1, 3]).unwrap();
        let tgt = target(&mut g, e, 1);
        let l = g.mse(e, tgt).unwrap();
        let grads = g.backward(l).unwrap();
        let d = grads.get(s.id("table").unwrap()).unwrap().data();
        assert_eq!(&d[0..2], &[0.0, 0.0]);
        assert_eq!(&d[4..6], &[0.0, 0.0]);
        assert!(d[2] != 0.0 && d[6] != 0.0);
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let s = store_with(&[("x", &[1, 1, 2, 2])], 0);
        let mut g = Graph::inference();
        let x = g.param(&s, s.id("x").unwrap());
        let y = g.mse(x, x).unwrap();
        assert!(g.backward(y).is_err());
    }
}

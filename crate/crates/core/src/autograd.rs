//! Tape-based reverse-mode differentiation over tensor operations.
//!
//! A [`Graph`] records every operation applied to its variables in creation
//! order, so node indices are already a topological order and the backward
//! sweep is a single reverse pass. Parameter leaves borrow their tensors from
//! the model, which lets many per-sample graphs share one parameter set.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{Real, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Added under the square root when differentiating the signed square root,
/// whose exact derivative is unbounded at zero.
pub const SSQRT_GRAD_EPS: f64 = 1e-12;

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a particular graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AutogradError {
    #[error("variable is not recorded on this graph")]
    ForeignVar,
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("seed gradient has shape {seed:?}, output has shape {output:?}")]
    SeedShape {
        seed: Vec<usize>,
        output: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> AutogradError {
    AutogradError::Shape {
        op,
        detail: detail.into(),
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    GroupNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        input: usize,
    },
    Encode {
        features: usize,
        codewords: usize,
        log_smoothing: usize,
        assign: Vec<T>,
    },
    L2Normalize {
        input: usize,
        norm: T,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    GlobalAvgPool {
        input: usize,
    },
    Bilinear {
        left: usize,
        right: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
    SumSquares {
        input: usize,
    },
    Reshape {
        input: usize,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Graph<'a, T: Real> {
    id: u64,
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize, AutogradError> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(AutogradError::ForeignVar);
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Trainable leaf owning its value.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>, AutogradError> {
        Ok(self.val(self.idx(v)?))
    }

    /// 2-D convolution of a `C×H×W` input with an `O×C×k×k` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, AutogradError> {
        let (xi, wi, bi) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let x = self.val(xi);
        let w = self.val(wi);
        let b = self.val(bi);
        let (&[c, h, wd], &[o, wc, k, k2]) = (x.shape(), w.shape()) else {
            return Err(shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}", x.shape(), w.shape()),
            ));
        };
        if wc != c || k != k2 || b.len() != o || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", "kernel larger than padded input"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let plane = ho * wo;
        let ckk = c * k * k;
        let cols = im2col(x.data(), c, h, wd, k, stride, pad, ho, wo);
        let mut out = vec![T::zero(); o * plane];
        for (oc, row) in out.chunks_mut(plane).enumerate() {
            row.fill(b.data()[oc]);
        }
        T::gemm(
            o,
            ckk,
            plane,
            T::one(),
            w.data(),
            (ckk, 1),
            &cols,
            (plane, 1),
            T::one(),
            &mut out,
            (plane, 1),
        );
        let needs = self.needs(xi) || self.needs(wi) || self.needs(bi);
        let value = Tensor::from_vec(&[o, ho, wo], out).expect("conv output shape");
        Ok(self.push(
            Cow::Owned(value),
            Op::Conv2d {
                input: xi,
                weight: wi,
                bias: bi,
                stride,
                pad,
                cols,
            },
            needs,
        ))
    }

    /// Group normalization over `C×H×W` with per-channel affine parameters.
    pub fn group_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
    ) -> Result<Var, AutogradError> {
        let (xi, gi, bi) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let x = self.val(xi);
        let &[c, h, w] = x.shape() else {
            return Err(shape_err("group_norm", format!("input {:?}", x.shape())));
        };
        if groups == 0 || c % groups != 0 || self.val(gi).len() != c || self.val(bi).len() != c {
            return Err(shape_err(
                "group_norm",
                format!("{c} channels, {groups} groups"),
            ));
        }
        let gamma_v = self.val(gi).data();
        let beta_v = self.val(bi).data();
        let plane = h * w;
        let m = (c / groups) * plane;
        let eps = T::of(GROUP_NORM_EPS);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(groups);
        for (gx, gh) in x.data().chunks(m).zip(xhat.chunks_mut(m)) {
            let mean = gx.iter().copied().sum::<T>() / T::of(m as f64);
            let var = gx.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of(m as f64);
            let inv = T::one() / (var + eps).sqrt();
            for (o, &v) in gh.iter_mut().zip(gx) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let mut out = xhat.clone();
        for (ch, row) in out.chunks_mut(plane).enumerate() {
            for v in row {
                *v = *v * gamma_v[ch] + beta_v[ch];
            }
        }
        let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
        let value = Tensor::from_vec(&[c, h, w], out).expect("norm shape");
        Ok(self.push(
            Cow::Owned(value),
            Op::GroupNorm {
                input: xi,
                gamma: gi,
                beta: bi,
                groups,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, AutogradError> {
        let xi = self.idx(input)?;
        let x = self.val(xi);
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::from_vec(x.shape(), data).expect("relu shape");
        let needs = self.needs(xi);
        Ok(self.push(Cow::Owned(value), Op::Relu { input: xi }, needs))
    }

    /// Residual soft-assignment encoding of a `D×H×W` feature map against
    /// `K×D` codewords with smoothing `exp(log_smoothing)`. Output is `K×D`.
    pub fn encode(
        &mut self,
        features: Var,
        codewords: Var,
        log_smoothing: Var,
    ) -> Result<Var, AutogradError> {
        let (fi, ci, si) = (
            self.idx(features)?,
            self.idx(codewords)?,
            self.idx(log_smoothing)?,
        );
        let x = self.val(fi);
        let cw = self.val(ci);
        let (&[d, h, w], &[k, cd]) = (x.shape(), cw.shape()) else {
            return Err(shape_err(
                "encode",
                format!("features {:?}, codewords {:?}", x.shape(), cw.shape()),
            ));
        };
        if cd != d || self.val(si).len() != k || k == 0 {
            return Err(shape_err(
                "encode",
                format!("features {:?}, codewords {:?}", x.shape(), cw.shape()),
            ));
        }
        let n = h * w;
        let smoothing: Vec<T> = self.val(si).data().iter().map(|v| v.exp()).collect();
        let assign = soft_assign(x.data(), cw.data(), &smoothing, d, n, k);
        let xd = x.data();
        let cd = cw.data();
        let mut out = vec![T::zero(); k * d];
        for kk in 0..k {
            for dd in 0..d {
                let ck = cd[kk * d + dd];
                let mut acc = T::zero();
                for i in 0..n {
                    acc += assign[i * k + kk] * (xd[dd * n + i] - ck);
                }
                out[kk * d + dd] = acc;
            }
        }
        let needs = self.needs(fi) || self.needs(ci) || self.needs(si);
        let value = Tensor::from_vec(&[k, d], out).expect("encode shape");
        Ok(self.push(
            Cow::Owned(value),
            Op::Encode {
                features: fi,
                codewords: ci,
                log_smoothing: si,
                assign,
            },
            needs,
        ))
    }

    /// `x / ‖x‖`, with the zero vector mapped to zero.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var, AutogradError> {
        let xi = self.idx(input)?;
        let x = self.val(xi);
        let norm = x.sum_squares().sqrt();
        let data = if norm > T::zero() {
            x.data().iter().map(|&v| v / norm).collect()
        } else {
            vec![T::zero(); x.len()]
        };
        let value = Tensor::from_vec(x.shape(), data).expect("normalize shape");
        let needs = self.needs(xi);
        Ok(self.push(Cow::Owned(value), Op::L2Normalize { input: xi, norm }, needs))
    }

    /// `W·x + b` with `W` of shape `out×in`; `x` is read flat.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, AutogradError> {
        let (xi, wi, bi) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let x = self.val(xi);
        let w = self.val(wi);
        let b = self.val(bi);
        let &[o, inp] = w.shape() else {
            return Err(shape_err("linear", format!("weight {:?}", w.shape())));
        };
        if x.len() != inp || b.len() != o {
            return Err(shape_err(
                "linear",
                format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let mut out = b.data().to_vec();
        T::gemm(
            o,
            inp,
            1,
            T::one(),
            w.data(),
            (inp, 1),
            x.data(),
            (1, 1),
            T::one(),
            &mut out,
            (1, 1),
        );
        let needs = self.needs(xi) || self.needs(wi) || self.needs(bi);
        let value = Tensor::from_vec(&[o], out).expect("linear shape");
        Ok(self.push(
            Cow::Owned(value),
            Op::Linear {
                input: xi,
                weight: wi,
                bias: bi,
            },
            needs,
        ))
    }

    /// Per-channel mean of a `D×H×W` map.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, AutogradError> {
        let xi = self.idx(input)?;
        let x = self.val(xi);
        let &[d, h, w] = x.shape() else {
            return Err(shape_err("global_avg_pool", format!("input {:?}", x.shape())));
        };
        let n = T::of((h * w) as f64);
        let data = x
            .data()
            .chunks(h * w)
            .map(|row| row.iter().copied().sum::<T>() / n)
            .collect();
        let value = Tensor::from_vec(&[d], data).expect("pool shape");
        let needs = self.needs(xi);
        Ok(self.push(Cow::Owned(value), Op::GlobalAvgPool { input: xi }, needs))
    }

    /// Signed square root of the flattened outer product `left·rightᵀ`.
    pub fn bilinear_ssqrt(&mut self, left: Var, right: Var) -> Result<Var, AutogradError> {
        let (li, ri) = (self.idx(left)?, self.idx(right)?);
        let l = self.val(li).data();
        let r = self.val(ri).data();
        let mut out = Vec::with_capacity(l.len() * r.len());
        for &a in l {
            for &b in r {
                out.push(signed_sqrt(a * b));
            }
        }
        let value = Tensor::from_vec(&[l.len() * r.len()], out).expect("bilinear shape");
        let needs = self.needs(li) || self.needs(ri);
        Ok(self.push(
            Cow::Owned(value),
            Op::Bilinear {
                left: li,
                right: ri,
            },
            needs,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, sub: bool) -> Result<Var, AutogradError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (self.val(ai), self.val(bi));
        if x.shape() != y.shape() {
            return Err(shape_err(
                if sub { "sub" } else { "add" },
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| if sub { p - q } else { p + q })
            .collect();
        let value = Tensor::from_vec(x.shape(), data).expect("binary shape");
        let needs = self.needs(ai) || self.needs(bi);
        let op = if sub {
            Op::Sub { a: ai, b: bi }
        } else {
            Op::Add { a: ai, b: bi }
        };
        Ok(self.push(Cow::Owned(value), op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.binary(a, b, false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.binary(a, b, true)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var, AutogradError> {
        let xi = self.idx(input)?;
        let x = self.val(xi);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::from_vec(x.shape(), data).expect("scale shape");
        let needs = self.needs(xi);
        Ok(self.push(Cow::Owned(value), Op::Scale { input: xi, factor }, needs))
    }

    /// `Σ x²` as a one-element tensor.
    pub fn sum_squares(&mut self, input: Var) -> Result<Var, AutogradError> {
        let xi = self.idx(input)?;
        let value = Tensor::scalar(self.val(xi).sum_squares());
        let needs = self.needs(xi);
        Ok(self.push(Cow::Owned(value), Op::SumSquares { input: xi }, needs))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, AutogradError> {
        let xi = self.idx(input)?;
        let value = self
            .val(xi)
            .clone()
            .reshape(shape)
            .map_err(|e| shape_err("reshape", e.to_string()))?;
        let needs = self.needs(xi);
        Ok(self.push(Cow::Owned(value), Op::Reshape { input: xi }, needs))
    }

    /// Gradients of a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, AutogradError> {
        let oi = self.idx(output)?;
        let shape = self.val(oi).shape();
        if self.val(oi).len() != 1 {
            return Err(AutogradError::NonScalar(shape.to_vec()));
        }
        self.backward_with(output, Tensor::full(shape, T::one()))
    }

    /// Vector-Jacobian product seeded with `seed = ∂L/∂output`.
    pub fn backward_with(
        &self,
        output: Var,
        seed: Tensor<T>,
    ) -> Result<Gradients<T>, AutogradError> {
        let oi = self.idx(output)?;
        if seed.shape() != self.val(oi).shape() {
            return Err(AutogradError::SeedShape {
                seed: seed.shape().to_vec(),
                output: self.val(oi).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs(oi) {
            grads[oi] = Some(seed);
        }
        for i in (0..=oi).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, gy, &mut grads);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
        if !self.needs(idx) {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, gy: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => grads[i] = Some(gy),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            } => {
                let x = self.val(*input);
                let w = self.val(*weight);
                let &[c, h, wd] = x.shape() else { unreachable!() };
                let &[o, _, k, _] = w.shape() else { unreachable!() };
                let ckk = c * k * k;
                let plane = gy.len() / o;
                let g = gy.data();
                if self.needs(*weight) {
                    let mut dw = vec![T::zero(); o * ckk];
                    T::gemm(
                        o,
                        plane,
                        ckk,
                        T::one(),
                        g,
                        (plane, 1),
                        cols,
                        (1, plane),
                        T::zero(),
                        &mut dw,
                        (ckk, 1),
                    );
                    self.accum(grads, *weight, Tensor::from_vec(w.shape(), dw).unwrap());
                }
                if self.needs(*bias) {
                    let db = g.chunks(plane).map(|r| r.iter().copied().sum()).collect();
                    self.accum(grads, *bias, Tensor::from_vec(&[o], db).unwrap());
                }
                if self.needs(*input) {
                    let mut dcols = vec![T::zero(); ckk * plane];
                    T::gemm(
                        ckk,
                        o,
                        plane,
                        T::one(),
                        w.data(),
                        (1, ckk),
                        g,
                        (plane, 1),
                        T::zero(),
                        &mut dcols,
                        (plane, 1),
                    );
                    let (ho, wo) = (gy.shape()[1], gy.shape()[2]);
                    let dx = col2im(&dcols, c, h, wd, k, *stride, *pad, ho, wo);
                    self.accum(grads, *input, Tensor::from_vec(x.shape(), dx).unwrap());
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let x = self.val(*input);
                let &[c, h, w] = x.shape() else { unreachable!() };
                let plane = h * w;
                let gamma_v = self.val(*gamma).data();
                let g = gy.data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for ch in 0..c {
                        for p in 0..plane {
                            let j = ch * plane + p;
                            dg[ch] += g[j] * xhat[j];
                            db[ch] += g[j];
                        }
                    }
                    self.accum(grads, *gamma, Tensor::from_vec(&[c], dg).unwrap());
                    self.accum(grads, *beta, Tensor::from_vec(&[c], db).unwrap());
                }
                if self.needs(*input) {
                    let m = (c / groups) * plane;
                    let mf = T::of(m as f64);
                    let mut dx = vec![T::zero(); x.len()];
                    for (gidx, inv) in inv_std.iter().enumerate() {
                        let range = gidx * m..(gidx + 1) * m;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        let dxhat: Vec<T> = range
                            .clone()
                            .map(|j| g[j] * gamma_v[j / plane])
                            .collect();
                        for (t, j) in range.clone().enumerate() {
                            s1 += dxhat[t];
                            s2 += dxhat[t] * xhat[j];
                        }
                        for (t, j) in range.enumerate() {
                            dx[j] = *inv / mf * (mf * dxhat[t] - s1 - xhat[j] * s2);
                        }
                    }
                    self.accum(grads, *input, Tensor::from_vec(x.shape(), dx).unwrap());
                }
            }
            Op::Relu { input } => {
                let x = self.val(*input);
                let dx = x
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accum(grads, *input, Tensor::from_vec(x.shape(), dx).unwrap());
            }
            Op::Encode {
                features,
                codewords,
                log_smoothing,
                assign,
            } => {
                let x = self.val(*features);
                let cw = self.val(*codewords);
                let &[d, h, w] = x.shape() else { unreachable!() };
                let k = cw.shape()[0];
                let n = h * w;
                let xd = x.data();
                let cd = cw.data();
                let s: Vec<T> = self
                    .val(*log_smoothing)
                    .data()
                    .iter()
                    .map(|v| v.exp())
                    .collect();
                let g = gy.data();
                let two = T::of(2.0);
                let mut dx = vec![T::zero(); d * n];
                let mut dc = vec![T::zero(); k * d];
                let mut dw = vec![T::zero(); k];
                let mut r = vec![T::zero(); k * d];
                let mut ga = vec![T::zero(); k];
                let mut dist = vec![T::zero(); k];
                for i in 0..n {
                    for kk in 0..k {
                        let mut gsum = T::zero();
                        let mut dsum = T::zero();
                        for dd in 0..d {
                            let rv = xd[dd * n + i] - cd[kk * d + dd];
                            r[kk * d + dd] = rv;
                            gsum += g[kk * d + dd] * rv;
                            dsum += rv * rv;
                        }
                        ga[kk] = gsum;
                        dist[kk] = dsum;
                    }
                    let a = &assign[i * k..(i + 1) * k];
                    let mean_g: T = (0..k).map(|kk| a[kk] * ga[kk]).sum();
                    for kk in 0..k {
                        let hk = a[kk] * (ga[kk] - mean_g);
                        let q = s[kk] * hk;
                        dw[kk] -= q * dist[kk];
                        for dd in 0..d {
                            let dr = a[kk] * g[kk * d + dd] - two * q * r[kk * d + dd];
                            dx[dd * n + i] += dr;
                            dc[kk * d + dd] -= dr;
                        }
                    }
                }
                self.accum(grads, *features, Tensor::from_vec(x.shape(), dx).unwrap());
                self.accum(grads, *codewords, Tensor::from_vec(cw.shape(), dc).unwrap());
                self.accum(grads, *log_smoothing, Tensor::from_vec(&[k], dw).unwrap());
            }
            Op::L2Normalize { input, norm } => {
                let x = self.val(*input);
                if *norm > T::zero() {
                    let y = self.val(i).data();
                    let dot: T = y.iter().zip(gy.data()).map(|(&a, &b)| a * b).sum();
                    let dx = y
                        .iter()
                        .zip(gy.data())
                        .map(|(&yv, &g)| (g - yv * dot) / *norm)
                        .collect();
                    self.accum(grads, *input, Tensor::from_vec(x.shape(), dx).unwrap());
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.val(*input);
                let w = self.val(*weight);
                let &[o, inp] = w.shape() else { unreachable!() };
                let g = gy.data();
                if self.needs(*weight) {
                    let mut dw = vec![T::zero(); o * inp];
                    T::gemm(
                        o,
                        1,
                        inp,
                        T::one(),
                        g,
                        (1, 1),
                        x.data(),
                        (inp, 1),
                        T::zero(),
                        &mut dw,
                        (inp, 1),
                    );
                    self.accum(grads, *weight, Tensor::from_vec(&[o, inp], dw).unwrap());
                }
                self.accum(grads, *bias, gy.clone());
                if self.needs(*input) {
                    let mut dx = vec![T::zero(); inp];
                    T::gemm(
                        inp,
                        o,
                        1,
                        T::one(),
                        w.data(),
                        (1, inp),
                        g,
                        (1, 1),
                        T::zero(),
                        &mut dx,
                        (1, 1),
                    );
                    self.accum(grads, *input, Tensor::from_vec(x.shape(), dx).unwrap());
                }
            }
            Op::GlobalAvgPool { input } => {
                let x = self.val(*input);
                let &[_, h, w] = x.shape() else { unreachable!() };
                let n = T::of((h * w) as f64);
                let mut dx = Vec::with_capacity(x.len());
                for &g in gy.data() {
                    dx.extend(std::iter::repeat_n(g / n, h * w));
                }
                self.accum(grads, *input, Tensor::from_vec(x.shape(), dx).unwrap());
            }
            Op::Bilinear { left, right } => {
                let l = self.val(*left);
                let r = self.val(*right);
                let (ld, rd) = (l.data(), r.data());
                let eps = T::of(SSQRT_GRAD_EPS);
                let half = T::of(0.5);
                let mut dl = vec![T::zero(); ld.len()];
                let mut dr = vec![T::zero(); rd.len()];
                let g = gy.data();
                for (a, &lv) in ld.iter().enumerate() {
                    for (b, &rv) in rd.iter().enumerate() {
                        let v = lv * rv;
                        let dv = g[a * rd.len() + b] * half / (v.abs() + eps).sqrt();
                        dl[a] += dv * rv;
                        dr[b] += dv * lv;
                    }
                }
                self.accum(grads, *left, Tensor::from_vec(l.shape(), dl).unwrap());
                self.accum(grads, *right, Tensor::from_vec(r.shape(), dr).unwrap());
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, gy.clone());
                self.accum(grads, *b, gy);
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, gy.clone());
                let neg = gy.data().iter().map(|&v| -v).collect();
                self.accum(grads, *b, Tensor::from_vec(gy.shape(), neg).unwrap());
            }
            Op::Scale { input, factor } => {
                let dx = gy.data().iter().map(|&v| v * *factor).collect();
                self.accum(grads, *input, Tensor::from_vec(gy.shape(), dx).unwrap());
            }
            Op::SumSquares { input } => {
                let x = self.val(*input);
                let g = gy.data()[0] * T::of(2.0);
                let dx = x.data().iter().map(|&v| v * g).collect();
                self.accum(grads, *input, Tensor::from_vec(x.shape(), dx).unwrap());
            }
            Op::Reshape { input } => {
                let shape = self.val(*input).shape().to_vec();
                self.accum(grads, *input, gy.reshape(&shape).unwrap());
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients<T: Real> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; zero when the output does not depend on it.
    pub fn get(&self, v: Var) -> Result<Tensor<T>, AutogradError> {
        let slot = self.slot(v)?;
        Ok(match &self.grads[slot] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[slot]),
        })
    }

    /// Like [`Gradients::get`] but moves the gradient out.
    pub fn take(&mut self, v: Var) -> Result<Tensor<T>, AutogradError> {
        let slot = self.slot(v)?;
        Ok(self.grads[slot]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[slot])))
    }

    fn slot(&self, v: Var) -> Result<usize, AutogradError> {
        if v.graph != self.graph || v.index >= self.grads.len() {
            return Err(AutogradError::ForeignVar);
        }
        Ok(v.index)
    }
}

pub fn signed_sqrt<T: Real>(v: T) -> T {
    if v < T::zero() {
        -(-v).sqrt()
    } else {
        v.sqrt()
    }
}

/// Soft-assignment weights `a[i*k + kk]` for `n` positions of a `d×n` map.
pub(crate) fn soft_assign<T: Real>(
    x: &[T],
    codewords: &[T],
    smoothing: &[T],
    d: usize,
    n: usize,
    k: usize,
) -> Vec<T> {
    let mut assign = vec![T::zero(); n * k];
    let mut logits = vec![T::zero(); k];
    for i in 0..n {
        for kk in 0..k {
            let mut dist = T::zero();
            for dd in 0..d {
                let r = x[dd * n + i] - codewords[kk * d + dd];
                dist += r * r;
            }
            logits[kk] = -smoothing[kk] * dist;
        }
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for kk in 0..k {
            let e = (logits[kk] - max).exp();
            assign[i * k + kk] = e;
            total += e;
        }
        for kk in 0..k {
            assign[i * k + kk] /= total;
        }
    }
    assign
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let plane = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * plane];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = ci * h * w + iy as usize * w;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let plane = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = ci * h * w + iy as usize * w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[dst + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

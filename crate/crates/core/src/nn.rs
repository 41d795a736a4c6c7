//! Minimal reverse-mode autodiff for small convolutional networks.
//!
//! A [`Graph`] records the forward pass of one sample as a list of nodes that
//! reference parameters in a [`ParamSet`] by id. [`Graph::backward`] walks the
//! nodes in reverse and accumulates parameter gradients into [`Grads`].
//! Everything runs single threaded, so results are bit-reproducible.
//!
//! Tensors are `channels x height x width`, row-major. Vectors are stored as
//! `len x 1 x 1`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point scalar the networks run on (`f32` for training, `f64` for
/// gradient checks).
pub trait Real: Float + Default + Debug + Sum + Send + Sync + 'static {
    /// `C (m x n) = A (m x k) * B (k x n) [+ C]`, row-major storage. With
    /// `a_t`, `a` holds `A^T` (k x m); with `b_t`, `b` holds `B^T` (n x k).
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], acc: bool);

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                acc: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if acc { 1.0 } else { 0.0 };
                // SAFETY: bounds checked above; strides describe the stored layouts.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::param(format!(
                "tensor data length {} does not match {c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Tensor { c, h, w, data })
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            c: data.len(),
            h: 1,
            w: 1,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// A named parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Vec<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            specs: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.specs.push(ParamSpec {
            name: name.into(),
            shape,
        });
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform `U(-bound, bound)` initialization.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| T::from_f64(rng.random_range(-bound..=bound)))
            .collect();
        self.add(name, shape, value)
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// All values concatenated in registration order.
    pub fn flatten(&self) -> Vec<T> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(Error::param(format!(
                "expected {} parameters, got {}",
                self.n_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        for v in &mut self.values {
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads(self.values.iter().map(|v| vec![T::zero(); v.len()]).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            specs: self.specs.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| U::from_f64(x.as_f64())).collect())
                .collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T>(pub Vec<Vec<T>>);

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.0[id.0]
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.0 {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn clear(&mut self) {
        for g in &mut self.0 {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Adaptive-moment optimizer with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, clip_norm: Option<f64>) -> Self {
        let zeros = params.zero_grads().0;
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) {
        self.step += 1;
        let scale = match self.clip_norm {
            Some(max) => {
                let n = grads.norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, value) in params.values.iter_mut().enumerate() {
            let g = &grads.0[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..value.len() {
                let gj = g[j].as_f64() * scale;
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let upd = self.lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                value[j] = T::from_f64(value[j].as_f64() - upd);
            }
        }
    }
}

pub type NodeId = usize;

#[derive(Debug)]
enum Op<T> {
    Input,
    Conv {
        x: NodeId,
        w: ParamId,
        b: ParamId,
        k: usize,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    Linear {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Silu(NodeId),
    Add(NodeId, NodeId),
    AddChannel {
        x: NodeId,
        v: NodeId,
    },
    Upsample2(NodeId),
    Concat(NodeId, NodeId),
    /// Forward value is supplied externally; the gradient passes to `x` unchanged.
    StraightThrough(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records one forward pass.
pub struct Graph<'p, T> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn im2col<T: Real>(x: &Tensor<T>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<T> {
    let p = ho * wo;
    let mut cols = vec![T::zero(); x.c * k * k * p];
    for ci in 0..x.c {
        let plane = &x.data[ci * x.h * x.w..(ci + 1) * x.h * x.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k * k + ky * k + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < x.w as isize {
                            *d = src[ix as usize];
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
    out: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k * k + ky * k + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + s;
                        }
                    }
                }
            }
        }
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[id].value, Tensor::zeros(0, 0, 0))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// 2D convolution; weight shape `[cout, cin, k, k]`, bias `[cout]`.
    pub fn conv(&mut self, x: NodeId, w: ParamId, b: ParamId, k: usize, stride: usize, pad: usize) -> NodeId {
        let input = &self.nodes[x].value;
        let weight = self.params.value(w);
        let bias = self.params.value(b);
        let cout = bias.len();
        let ckk = input.c * k * k;
        debug_assert_eq!(weight.len(), cout * ckk);
        let ho = (input.h + 2 * pad - k) / stride + 1;
        let wo = (input.w + 2 * pad - k) / stride + 1;
        let p = ho * wo;
        let cols = if k == 1 && stride == 1 && pad == 0 {
            input.data.clone()
        } else {
            im2col(input, k, stride, pad, ho, wo)
        };
        let mut out = Tensor::zeros(cout, ho, wo);
        for (co, chunk) in out.data.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[co]);
        }
        T::gemm(cout, ckk, p, weight, false, &cols, false, &mut out.data, true);
        self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                k,
                stride,
                pad,
                cols,
            },
        )
    }

    /// Dense layer on a vector node; weight shape `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let input = &self.nodes[x].value;
        let weight = self.params.value(w);
        let bias = self.params.value(b);
        let n_out = bias.len();
        let mut out = bias.to_vec();
        T::gemm(n_out, input.len(), 1, weight, false, &input.data, false, &mut out, true);
        self.push(Tensor::vector(out), Op::Linear { x, w, b })
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let input = &self.nodes[x].value;
        let data = input
            .data
            .iter()
            .map(|&v| {
                let f = v.as_f64();
                T::from_f64(f * sigmoid(f))
            })
            .collect();
        let out = Tensor {
            c: input.c,
            h: input.h,
            w: input.w,
            data,
        };
        self.push(out, Op::Silu(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x + y).collect();
        let out = Tensor {
            c: va.c,
            h: va.h,
            w: va.w,
            data,
        };
        self.push(out, Op::Add(a, b))
    }

    /// Adds `v[c]` to every pixel of channel `c` of `x`.
    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (vx, vv) = (&self.nodes[x].value, &self.nodes[v].value);
        assert_eq!(vx.c, vv.len(), "add_channel: channel mismatch");
        let p = vx.h * vx.w;
        let mut out = vx.clone();
        for (c, chunk) in out.data.chunks_mut(p).enumerate() {
            let b = vv.data[c];
            chunk.iter_mut().for_each(|e| *e = *e + b);
        }
        self.push(out, Op::AddChannel { x, v })
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let (c, h, w) = vx.shape();
        let mut out = Tensor::zeros(c, 2 * h, 2 * w);
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.data[(ci * 2 * h + y) * 2 * w + xx] = vx.data[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample2(x))
    }

    /// Channel concatenation `[a; b]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((va.h, va.w), (vb.h, vb.w), "concat: spatial mismatch");
        let mut data = va.data.clone();
        data.extend_from_slice(&vb.data);
        let out = Tensor {
            c: va.c + vb.c,
            h: va.h,
            w: va.w,
            data,
        };
        self.push(out, Op::Concat(a, b))
    }

    /// Node whose value is `value` but whose gradient flows straight into `x`.
    pub fn straight_through(&mut self, x: NodeId, value: Tensor<T>) -> NodeId {
        assert_eq!(self.nodes[x].value.shape(), value.shape());
        self.push(value, Op::StraightThrough(x))
    }

    /// Back-propagates the seeded output gradients; parameter gradients are
    /// added into `grads`. Returns the gradient of every node (inputs included).
    pub fn backward(&self, seeds: Vec<(NodeId, Vec<T>)>, grads: &mut Grads<T>) -> Vec<Option<Vec<T>>> {
        let mut g: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            assert_eq!(seed.len(), self.nodes[id].value.len(), "seed gradient shape");
            accumulate(&mut g[id], seed);
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(dy) = g[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {
                    g[id] = Some(dy);
                    continue;
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    k,
                    stride,
                    pad,
                    cols,
                } => {
                    let input = &self.nodes[*x].value;
                    let out = &node.value;
                    let cout = out.c;
                    let p = out.h * out.w;
                    let ckk = input.c * k * k;
                    let gw = &mut grads.0[w.0];
                    T::gemm(cout, p, ckk, &dy, false, cols, true, gw, true);
                    let gb = &mut grads.0[b.0];
                    for (co, chunk) in dy.chunks(p).enumerate() {
                        gb[co] = gb[co] + chunk.iter().copied().sum::<T>();
                    }
                    let mut dcols = vec![T::zero(); ckk * p];
                    T::gemm(ckk, cout, p, self.params.value(*w), true, &dy, false, &mut dcols, false);
                    let dx = if *k == 1 && *stride == 1 && *pad == 0 {
                        dcols
                    } else {
                        let mut dx = vec![T::zero(); input.len()];
                        col2im(&dcols, input.c, input.h, input.w, *k, *stride, *pad, out.h, out.w, &mut dx);
                        dx
                    };
                    accumulate(&mut g[*x], dx);
                }
                Op::Linear { x, w, b } => {
                    let input = &self.nodes[*x].value;
                    let n_in = input.len();
                    let n_out = dy.len();
                    let gw = &mut grads.0[w.0];
                    T::gemm(n_out, 1, n_in, &dy, false, &input.data, false, gw, true);
                    let gb = &mut grads.0[b.0];
                    for (gbi, &d) in gb.iter_mut().zip(&dy) {
                        *gbi = *gbi + d;
                    }
                    let mut dx = vec![T::zero(); n_in];
                    T::gemm(n_in, n_out, 1, self.params.value(*w), true, &dy, false, &mut dx, false);
                    accumulate(&mut g[*x], dx);
                }
                Op::Silu(x) => {
                    let input = &self.nodes[*x].value;
                    let dx = input
                        .data
                        .iter()
                        .zip(&dy)
                        .map(|(&v, &d)| {
                            let f = v.as_f64();
                            let s = sigmoid(f);
                            T::from_f64(d.as_f64() * s * (1.0 + f * (1.0 - s)))
                        })
                        .collect();
                    accumulate(&mut g[*x], dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g[*a], dy.clone());
                    accumulate(&mut g[*b], dy);
                }
                Op::AddChannel { x, v } => {
                    let p = node.value.h * node.value.w;
                    let dv = dy.chunks(p).map(|c| c.iter().copied().sum::<T>()).collect();
                    accumulate(&mut g[*v], dv);
                    accumulate(&mut g[*x], dy);
                }
                Op::Upsample2(x) => {
                    let input = &self.nodes[*x].value;
                    let (c, h, w) = input.shape();
                    let mut dx = vec![T::zero(); input.len()];
                    for ci in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let src = (ci * h + y / 2) * w + xx / 2;
                                dx[src] = dx[src] + dy[(ci * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(&mut g[*x], dx);
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[*a].value.len();
                    accumulate(&mut g[*a], dy[..na].to_vec());
                    accumulate(&mut g[*b], dy[na..].to_vec());
                }
                Op::StraightThrough(x) => accumulate(&mut g[*x], dy),
            }
        }
        g
    }

    /// Like [`Graph::backward`] but returns only the gradient reaching `input`.
    pub fn backward_to_input(&self, seeds: Vec<(NodeId, Vec<T>)>, grads: &mut Grads<T>, input: NodeId) -> Vec<T> {
        self.backward(seeds, grads)
            .swap_remove(input)
            .unwrap_or_else(|| vec![T::zero(); self.nodes[input].value.len()])
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        _ => *slot = Some(g),
    }
}

/// Convolution layer handle.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Registers a `k x k` convolution with default uniform fan-in init,
    /// optionally scaling the weights by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let bound = fan_in.sqrt().recip();
        let w = params.add_uniform(format!("{name}.weight"), vec![cout, cin, k, k], bound * gain, rng);
        let b = params.add_uniform(format!("{name}.bias"), vec![cout], bound * gain, rng);
        Conv2d {
            w,
            b,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        g.conv(x, self.w, self.b, self.k, self.stride, self.pad)
    }
}

/// Dense layer handle.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (n_in as f64).sqrt().recip();
        let w = params.add_uniform(format!("{name}.weight"), vec![n_out, n_in], bound, rng);
        let b = params.add_uniform(format!("{name}.bias"), vec![n_out], bound, rng);
        Linear { w, b }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        g.linear(x, self.w, self.b)
    }
}

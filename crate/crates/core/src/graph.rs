//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the computed value. [`Graph::backward`] walks the tape in reverse from a
//! scalar root, visiting only nodes that both lead to the root and depend on
//! a leaf that requires a gradient.
//!
//! Shape errors inside the graph are programming errors and panic; the
//! network constructors validate user-facing shapes before building a graph.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::{bilinear_taps, Tap};
use crate::kernels::{gemm, ConvGeom, Mat};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics grouping for [`Graph::normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per channel over batch and space.
    Batch,
    /// Per sample and channel over space.
    Instance,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    AddScalar {
        x: Var,
    },
    Square {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    AvgPool2 {
        x: Var,
    },
    UpsampleNearest2 {
        x: Var,
    },
    ResizeBilinear {
        x: Var,
    },
    Normalize {
        x: Var,
        kind: NormKind,
        inv_std: Vec<f64>,
    },
    NormalizeFixed {
        x: Var,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a [`NormKind::Batch`] normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never tracks gradients (inference).
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that tracks gradients when the graph does.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D convolution. `w` is `[Co, Ci, k, k]`, `b` is `[1, Co, 1, 1]`; zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let [n, ci, h, wd] = self.shape(x);
        let [co, wci, k, k2] = self.shape(w);
        assert!(
            wci == ci && k == k2,
            "conv2d weight {:?} vs input {:?}",
            self.shape(w),
            self.shape(x)
        );
        let geom =
            ConvGeom::new(ci, h, wd, k, stride, pad).expect("conv2d input smaller than kernel");
        let p = geom.col_cols();
        let rows = geom.col_rows();
        let mut out = Tensor::zeros([n, co, geom.out_h, geom.out_w]);
        let mut col = vec![0.0; rows * geom.tile_cols()];
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            for s in 0..n {
                for tile in geom.row_tiles() {
                    let cols = tile.len() * geom.out_w;
                    let off = tile.start * geom.out_w;
                    geom.im2col(xv.sample(s), tile, &mut col[..rows * cols]);
                    let dst = &mut out.sample_mut(s)[off..];
                    gemm(
                        co,
                        rows,
                        cols,
                        Mat::new(wv, rows),
                        Mat::new(&col, cols),
                        dst,
                        p,
                        0.0,
                    );
                }
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.nodes[b.0].value.data());
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_rg(&deps);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Transposed convolution. `w` is `[Ci, Co, k, k]`; output side is `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let [n, ci, h, wd] = self.shape(x);
        let [wci, co, k, k2] = self.shape(w);
        assert!(
            wci == ci && k == k2,
            "conv_transpose2d weight {:?} vs input {:?}",
            self.shape(w),
            self.shape(x)
        );
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let geom = ConvGeom::new(co, oh, ow, k, stride, pad).expect("conv_transpose2d geometry");
        debug_assert_eq!((geom.out_h, geom.out_w), (h, wd));
        let rows = geom.col_rows();
        let hw = h * wd;
        let mut out = Tensor::zeros([n, co, oh, ow]);
        let mut col = vec![0.0; rows * geom.tile_cols()];
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            for s in 0..n {
                for tile in geom.row_tiles() {
                    let cols = tile.len() * wd;
                    let off = tile.start * wd;
                    let src = &xv.sample(s)[off..];
                    gemm(
                        rows,
                        ci,
                        cols,
                        Mat::t(wv, rows),
                        Mat::new(src, hw),
                        &mut col[..rows * cols],
                        cols,
                        0.0,
                    );
                    geom.col2im(&col[..rows * cols], tile, out.sample_mut(s));
                }
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.nodes[b.0].value.data());
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_rg(&deps);
        self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v * slope });
        let rg = self.any_rg(&[x]);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::tanh);
        let rg = self.any_rg(&[x]);
        self.push(out, Op::Tanh { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data);
        let rg = self.any_rg(&[a, b]);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data);
        let rg = self.any_rg(&[a, b]);
        self.push(out, Op::Sub { a, b }, rg)
    }

    /// Elementwise product. `b` may have a single channel, broadcast over `a`'s channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert!(
            sa == sb || (sb[1] == 1 && sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3]),
            "mul shape {sa:?} vs {sb:?}"
        );
        let av = self.value(a);
        let bv = self.value(b);
        let out = if sa == sb {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| x * y)
                .collect();
            Tensor::from_vec(sa, data)
        } else {
            let plane = sa[2] * sa[3];
            let mut out = av.clone();
            for n in 0..sa[0] {
                let m = bv.sample(n);
                for chunk in out.sample_mut(n).chunks_exact_mut(plane) {
                    for (o, f) in chunk.iter_mut().zip(m) {
                        *o *= f;
                    }
                }
            }
            out
        };
        let rg = self.any_rg(&[a, b]);
        self.push(out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        let rg = self.any_rg(&[x]);
        self.push(out, Op::Scale { x, k }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.any_rg(&[x]);
        self.push(out, Op::AddScalar { x }, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.any_rg(&[x]);
        self.push(out, Op::Square { x }, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let rg = self.any_rg(&[x]);
        self.push(out, Op::Abs { x }, rg)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&tensors);
        let rg = self.any_rg(parts);
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    /// 2x2 average pooling with stride 2 (odd trailing rows/columns are dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "avg_pool2 on {h}x{w}");
        let xv = self.value(x);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for (src, dst) in xv
            .data()
            .chunks_exact(h * w)
            .zip(out.data_mut().chunks_exact_mut(oh * ow))
        {
            for i in 0..oh {
                for j in 0..ow {
                    let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                    let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = 0.25 * (a + b);
                }
            }
        }
        let rg = self.any_rg(&[x]);
        self.push(out, Op::AvgPool2 { x }, rg)
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let xv = self.value(x);
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for (src, dst) in xv
            .data()
            .chunks_exact(h * w)
            .zip(out.data_mut().chunks_exact_mut(4 * h * w))
        {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.any_rg(&[x]);
        self.push(out, Op::UpsampleNearest2 { x }, rg)
    }

    /// Bilinear resize with half-pixel centers (same convention as [`crate::Image::resize_bilinear`]).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let [n, c, h, w] = self.shape(x);
        let mut out = Tensor::zeros([n, c, out_h, out_w]);
        for (src, dst) in self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .zip(out.data_mut().chunks_exact_mut(out_h * out_w))
        {
            crate::image::resize_plane_bilinear(src, w, h, dst, out_w, out_h);
        }
        let rg = self.any_rg(&[x]);
        self.push(out, Op::ResizeBilinear { x }, rg)
    }

    /// Zero-mean, unit-variance normalization (no affine part).
    ///
    /// Returns the batch statistics when `kind` is [`NormKind::Batch`] so the
    /// caller can maintain running estimates.
    pub fn normalize(&mut self, x: Var, kind: NormKind, eps: f64) -> (Var, Option<BatchStats>) {
        let [n, c, h, w] = self.shape(x);
        let plane = h * w;
        let xv = self.value(x);
        let mut out = xv.clone();
        let (inv_std, stats) = match kind {
            NormKind::Instance => {
                let mut inv = Vec::with_capacity(n * c);
                for chunk in out.data_mut().chunks_exact_mut(plane) {
                    let mean = chunk.iter().sum::<f64>() / plane as f64;
                    let var =
                        chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
                    let r = 1.0 / math::sqrt(var + eps);
                    for v in chunk.iter_mut() {
                        *v = (*v - mean) * r;
                    }
                    inv.push(r);
                }
                (inv, None)
            }
            NormKind::Batch => {
                let m = (n * plane) as f64;
                let mut means = vec![0.0; c];
                let mut vars = vec![0.0; c];
                let mut inv = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xv.sample(b)[ch * plane..(ch + 1) * plane]
                            .iter()
                            .sum::<f64>();
                    }
                    let mean = s / m;
                    let mut v = 0.0;
                    for b in 0..n {
                        v += xv.sample(b)[ch * plane..(ch + 1) * plane]
                            .iter()
                            .map(|x| (x - mean) * (x - mean))
                            .sum::<f64>();
                    }
                    let var = v / m;
                    means[ch] = mean;
                    vars[ch] = var;
                    inv[ch] = 1.0 / math::sqrt(var + eps);
                }
                for b in 0..n {
                    for (ch, chunk) in out.sample_mut(b).chunks_exact_mut(plane).enumerate() {
                        for v in chunk.iter_mut() {
                            *v = (*v - means[ch]) * inv[ch];
                        }
                    }
                }
                (
                    inv,
                    Some(BatchStats {
                        mean: means,
                        var: vars,
                    }),
                )
            }
        };
        let rg = self.any_rg(&[x]);
        (
            self.push(out, Op::Normalize { x, kind, inv_std }, rg),
            stats,
        )
    }

    /// `(x - mean_c) / sqrt(var_c + eps)` with fixed per-channel statistics.
    pub fn normalize_fixed(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let [n, c, h, w] = self.shape(x);
        assert!(mean.len() == c && var.len() == c, "normalize_fixed stats");
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let mut out = self.value(x).clone();
        for b in 0..n {
            for (ch, chunk) in out.sample_mut(b).chunks_exact_mut(h * w).enumerate() {
                for v in chunk.iter_mut() {
                    *v = (*v - mean[ch]) * inv[ch];
                }
            }
        }
        let rg = self.any_rg(&[x]);
        self.push(out, Op::NormalizeFixed { x, inv_std: inv }, rg)
    }

    /// `x * gamma_c + beta_c`, with `gamma`, `beta` shaped `[1, C, 1, 1]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        assert!(
            self.shape(gamma) == [1, c, 1, 1] && self.shape(beta) == [1, c, 1, 1],
            "channel_affine params"
        );
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut out = self.value(x).clone();
        for b in 0..n {
            for (ch, chunk) in out.sample_mut(b).chunks_exact_mut(h * w).enumerate() {
                for v in chunk.iter_mut() {
                    *v = *v * g[ch] + bt[ch];
                }
            }
        }
        let rg = self.any_rg(&[x, gamma, beta]);
        self.push(out, Op::ChannelAffine { x, gamma, beta }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.any_rg(&[x]);
        self.push(out, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.any_rg(&[x]);
        self.push(out, Op::Mean { x }, rg)
    }

    /// Sum of scalar nodes; `None` for an empty list.
    pub fn add_all(&mut self, terms: &[Var]) -> Option<Var> {
        let (&first, rest) = terms.split_first()?;
        Some(rest.iter().fold(first, |acc, &t| self.add(acc, t)))
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let [n, ci, h, wd] = xv.shape();
                let [co, _, k, _] = wv.shape();
                let geom = ConvGeom::new(ci, h, wd, k, stride, pad).unwrap();
                let p = geom.col_cols();
                let rows = geom.col_rows();
                let mut col = vec![0.0; rows * geom.tile_cols()];
                if self.wants(w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    for s in 0..n {
                        for tile in geom.row_tiles() {
                            let cols = tile.len() * geom.out_w;
                            let off = tile.start * geom.out_w;
                            geom.im2col(xv.sample(s), tile, &mut col[..rows * cols]);
                            let g = Mat::new(&dy.sample(s)[off..], p);
                            gemm(
                                co,
                                cols,
                                rows,
                                g,
                                Mat::t(&col, cols),
                                dw.data_mut(),
                                rows,
                                1.0,
                            );
                        }
                    }
                    accumulate(grads, w, dw);
                }
                if self.wants(x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    for s in 0..n {
                        for tile in geom.row_tiles() {
                            let cols = tile.len() * geom.out_w;
                            let off = tile.start * geom.out_w;
                            let g = Mat::new(&dy.sample(s)[off..], p);
                            gemm(
                                rows,
                                co,
                                cols,
                                Mat::t(wv.data(), rows),
                                g,
                                &mut col[..rows * cols],
                                cols,
                                0.0,
                            );
                            geom.col2im(&col[..rows * cols], tile, dx.sample_mut(s));
                        }
                    }
                    accumulate(grads, x, dx);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    accumulate(grads, b, channel_sums(dy));
                }
            }
            &Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let [n, ci, h, wd] = xv.shape();
                let [_, co, k, _] = wv.shape();
                let [_, _, oh, ow] = dy.shape();
                let geom = ConvGeom::new(co, oh, ow, k, stride, pad).unwrap();
                let rows = geom.col_rows();
                let hw = h * wd;
                let mut col = vec![0.0; rows * geom.tile_cols()];
                let need_w = self.wants(w);
                let need_x = self.wants(x);
                let mut dw = need_w.then(|| Tensor::zeros(wv.shape()));
                let mut dx = need_x.then(|| Tensor::zeros(xv.shape()));
                if need_w || need_x {
                    for s in 0..n {
                        for tile in geom.row_tiles() {
                            let cols = tile.len() * wd;
                            let off = tile.start * wd;
                            geom.im2col(dy.sample(s), tile, &mut col[..rows * cols]);
                            let dcol = Mat::new(&col[..rows * cols], cols);
                            if let Some(dw) = dw.as_mut() {
                                let xs = Mat::new(&xv.sample(s)[off..], hw);
                                gemm(
                                    ci,
                                    cols,
                                    rows,
                                    xs,
                                    Mat::t(&col[..rows * cols], cols),
                                    dw.data_mut(),
                                    rows,
                                    1.0,
                                );
                            }
                            if let Some(dx) = dx.as_mut() {
                                gemm(
                                    ci,
                                    rows,
                                    cols,
                                    Mat::new(wv.data(), rows),
                                    dcol,
                                    &mut dx.sample_mut(s)[off..],
                                    hw,
                                    0.0,
                                );
                            }
                        }
                    }
                }
                if let Some(dw) = dw {
                    accumulate(grads, w, dw);
                }
                if let Some(dx) = dx {
                    accumulate(grads, x, dx);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    accumulate(grads, b, channel_sums(dy));
                }
            }
            &Op::LeakyRelu { x, slope } => {
                let xv = self.value(x);
                let data = dy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { g * slope })
                    .collect();
                accumulate(grads, x, Tensor::from_vec(xv.shape(), data));
            }
            &Op::Tanh { x } => {
                let data = dy
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                accumulate(grads, x, Tensor::from_vec(dy.shape(), data));
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    accumulate(grads, a, dy.clone());
                }
                if self.wants(b) {
                    accumulate(grads, b, dy.clone());
                }
            }
            &Op::Sub { a, b } => {
                if self.wants(a) {
                    accumulate(grads, a, dy.clone());
                }
                if self.wants(b) {
                    accumulate(grads, b, dy.map(|v| -v));
                }
            }
            &Op::Mul { a, b } => {
                let av = self.value(a);
                let bv = self.value(b);
                let sa = av.shape();
                let broadcast = bv.shape() != sa;
                let plane = sa[2] * sa[3];
                if self.wants(a) {
                    let da = if broadcast {
                        let mut da = dy.clone();
                        for n in 0..sa[0] {
                            let m = bv.sample(n);
                            for chunk in da.sample_mut(n).chunks_exact_mut(plane) {
                                for (o, f) in chunk.iter_mut().zip(m) {
                                    *o *= f;
                                }
                            }
                        }
                        da
                    } else {
                        Tensor::from_vec(
                            sa,
                            dy.data()
                                .iter()
                                .zip(bv.data())
                                .map(|(g, v)| g * v)
                                .collect(),
                        )
                    };
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = if broadcast {
                        let mut db = Tensor::zeros(bv.shape());
                        for n in 0..sa[0] {
                            let out = db.sample_mut(n);
                            for (gc, ac) in dy
                                .sample(n)
                                .chunks_exact(plane)
                                .zip(av.sample(n).chunks_exact(plane))
                            {
                                for ((o, g), v) in out.iter_mut().zip(gc).zip(ac) {
                                    *o += g * v;
                                }
                            }
                        }
                        db
                    } else {
                        Tensor::from_vec(
                            sa,
                            dy.data()
                                .iter()
                                .zip(av.data())
                                .map(|(g, v)| g * v)
                                .collect(),
                        )
                    };
                    accumulate(grads, b, db);
                }
            }
            &Op::Scale { x, k } => accumulate(grads, x, dy.map(|v| v * k)),
            &Op::AddScalar { x } => accumulate(grads, x, dy.clone()),
            &Op::Square { x } => {
                let xv = self.value(x);
                let data = dy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, v)| 2.0 * g * v)
                    .collect();
                accumulate(grads, x, Tensor::from_vec(xv.shape(), data));
            }
            &Op::Abs { x } => {
                let xv = self.value(x);
                let data = dy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &v)| {
                        if v > 0.0 {
                            *g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, x, Tensor::from_vec(xv.shape(), data));
            }
            Op::Concat { parts } => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        accumulate(grads, p, dy.channels(start, c));
                    }
                    start += c;
                }
            }
            &Op::AvgPool2 { x } => {
                let [n, c, h, w] = self.shape(x);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = Tensor::zeros([n, c, h, w]);
                for (src, dst) in dy
                    .data()
                    .chunks_exact(oh * ow)
                    .zip(dx.data_mut().chunks_exact_mut(h * w))
                {
                    for i in 0..oh {
                        for j in 0..ow {
                            let g = 0.25 * src[i * ow + j];
                            dst[2 * i * w + 2 * j] += g;
                            dst[2 * i * w + 2 * j + 1] += g;
                            dst[(2 * i + 1) * w + 2 * j] += g;
                            dst[(2 * i + 1) * w + 2 * j + 1] += g;
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::UpsampleNearest2 { x } => {
                let [n, c, h, w] = self.shape(x);
                let mut dx = Tensor::zeros([n, c, h, w]);
                for (src, dst) in dy
                    .data()
                    .chunks_exact(4 * h * w)
                    .zip(dx.data_mut().chunks_exact_mut(h * w))
                {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::ResizeBilinear { x } => {
                let [n, c, h, w] = self.shape(x);
                let [_, _, oh, ow] = dy.shape();
                let yt = bilinear_taps(h, oh);
                let xt = bilinear_taps(w, ow);
                let mut dx = Tensor::zeros([n, c, h, w]);
                for (src, dst) in dy
                    .data()
                    .chunks_exact(oh * ow)
                    .zip(dx.data_mut().chunks_exact_mut(h * w))
                {
                    resize_adjoint(src, &yt, &xt, dst, w);
                }
                accumulate(grads, x, dx);
            }
            Op::Normalize { x, kind, inv_std } => {
                let x = *x;
                let [n, c, h, w] = self.shape(x);
                let plane = h * w;
                let xhat = &node.value;
                let mut dx = Tensor::zeros([n, c, h, w]);
                match kind {
                    NormKind::Instance => {
                        let groups = dy
                            .data()
                            .chunks_exact(plane)
                            .zip(xhat.data().chunks_exact(plane));
                        for (((g, xh), out), r) in groups
                            .zip(dx.data_mut().chunks_exact_mut(plane))
                            .zip(inv_std)
                        {
                            let m = plane as f64;
                            let sg: f64 = g.iter().sum();
                            let sgx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
                            for ((o, gi), xi) in out.iter_mut().zip(g).zip(xh) {
                                *o = r * (gi - sg / m - xi * sgx / m);
                            }
                        }
                    }
                    NormKind::Batch => {
                        let m = (n * plane) as f64;
                        for (ch, r) in inv_std.iter().enumerate() {
                            let mut sg = 0.0;
                            let mut sgx = 0.0;
                            for b in 0..n {
                                let g = &dy.sample(b)[ch * plane..(ch + 1) * plane];
                                let xh = &xhat.sample(b)[ch * plane..(ch + 1) * plane];
                                sg += g.iter().sum::<f64>();
                                sgx += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
                            }
                            for b in 0..n {
                                let range = ch * plane..(ch + 1) * plane;
                                let g = &dy.sample(b)[range.clone()];
                                let xh = &xhat.sample(b)[range.clone()];
                                let out = &mut dx.sample_mut(b)[range];
                                for ((o, gi), xi) in out.iter_mut().zip(g).zip(xh) {
                                    *o = r * (gi - sg / m - xi * sgx / m);
                                }
                            }
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            Op::NormalizeFixed { x, inv_std } => {
                let [n, _, h, w] = dy.shape();
                let mut dx = dy.clone();
                for b in 0..n {
                    for (chunk, r) in dx.sample_mut(b).chunks_exact_mut(h * w).zip(inv_std) {
                        for v in chunk.iter_mut() {
                            *v *= r;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            &Op::ChannelAffine { x, gamma, beta } => {
                let [n, c, h, w] = dy.shape();
                let plane = h * w;
                if self.wants(x) {
                    let g = self.value(gamma).data();
                    let mut dx = dy.clone();
                    for b in 0..n {
                        for (chunk, gc) in dx.sample_mut(b).chunks_exact_mut(plane).zip(g) {
                            for v in chunk.iter_mut() {
                                *v *= gc;
                            }
                        }
                    }
                    accumulate(grads, x, dx);
                }
                if self.wants(gamma) {
                    let xv = self.value(x);
                    let mut dg = Tensor::zeros([1, c, 1, 1]);
                    for b in 0..n {
                        for (ch, (gc, xc)) in dy
                            .sample(b)
                            .chunks_exact(plane)
                            .zip(xv.sample(b).chunks_exact(plane))
                            .enumerate()
                        {
                            dg.data_mut()[ch] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    accumulate(grads, gamma, dg);
                }
                if self.wants(beta) {
                    accumulate(grads, beta, channel_sums(dy));
                }
            }
            &Op::Sum { x } => {
                let g = dy.item();
                accumulate(grads, x, Tensor::filled(self.shape(x), g));
            }
            &Op::Mean { x } => {
                let shape = self.shape(x);
                let len: usize = shape.iter().product();
                accumulate(grads, x, Tensor::filled(shape, dy.item() / len as f64));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn add_channel_bias(out: &mut Tensor, bias: &[f64]) {
    let [n, c, h, w] = out.shape();
    assert_eq!(bias.len(), c, "bias length");
    for b in 0..n {
        for (chunk, bv) in out.sample_mut(b).chunks_exact_mut(h * w).zip(bias) {
            for v in chunk.iter_mut() {
                *v += bv;
            }
        }
    }
}

fn channel_sums(dy: &Tensor) -> Tensor {
    let [n, c, h, w] = dy.shape();
    let mut out = Tensor::zeros([1, c, 1, 1]);
    for b in 0..n {
        for (ch, chunk) in dy.sample(b).chunks_exact(h * w).enumerate() {
            out.data_mut()[ch] += chunk.iter().sum::<f64>();
        }
    }
    out
}

fn resize_adjoint(dy: &[f64], yt: &[Tap], xt: &[Tap], dx: &mut [f64], w: usize) {
    let ow = xt.len();
    for (y, ty) in yt.iter().enumerate() {
        for (x, tx) in xt.iter().enumerate() {
            let g = dy[y * ow + x];
            let top = g * (1.0 - ty.frac);
            let bot = g * ty.frac;
            dx[ty.lo * w + tx.lo] += top * (1.0 - tx.frac);
            dx[ty.lo * w + tx.hi] += top * tx.frac;
            dx[ty.hi * w + tx.lo] += bot * (1.0 - tx.frac);
            dx[ty.hi * w + tx.hi] += bot * tx.frac;
        }
    }
}

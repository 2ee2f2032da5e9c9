//! Parameter storage and the layers the networks are built from.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Gradients, Graph, NormKind, Var};
use crate::tensor::Tensor;

/// Index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named tensors: trainable parameters or running buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl ToString, value: Tensor) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces all values, checking names and shapes match.
    pub fn load(&mut self, names: &[String], values: Vec<Tensor>) -> Result<(), String> {
        if names != self.names.as_slice() {
            return Err("parameter names differ".into());
        }
        for (cur, new) in self.values.iter().zip(&values) {
            if cur.shape() != new.shape() {
                return Err(alloc::format!(
                    "parameter shape {:?} vs {:?}",
                    cur.shape(),
                    new.shape()
                ));
            }
        }
        self.values = values;
        Ok(())
    }

    /// FNV-1a over the raw bits, for cheap change detection.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for t in &self.values {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Graph leaves for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Loads every parameter as a leaf. Frozen bindings never receive gradients.
    pub fn new(g: &mut Graph, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .values()
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Self { vars }
    }

    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients, zero where the root does not depend on a parameter.
    pub fn grads(&self, g: &Graph, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
            })
            .collect()
    }
}

/// Train or eval behaviour for normalization layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a layer needs during a forward pass.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    pub params: &'a Binding,
    pub buffers: &'a mut ParamStore,
    pub mode: Mode,
}

const INIT_STD: f64 = 0.02;

fn normal_tensor<R: Rng>(rng: &mut R, shape: [usize; 4], mean: f64, std: f64) -> Tensor {
    let dist = Normal::new(mean, std).expect("valid normal");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            alloc::format!("{name}.weight"),
            normal_tensor(
                rng,
                [out_channels, in_channels, kernel, kernel],
                0.0,
                INIT_STD,
            ),
        );
        let bias = bias.then(|| {
            store.add(
                alloc::format!("{name}.bias"),
                Tensor::zeros([1, out_channels, 1, 1]),
            )
        });
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        g.conv2d(
            x,
            p.var(self.weight),
            self.bias.map(|b| p.var(b)),
            self.stride,
            self.pad,
        )
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            alloc::format!("{name}.weight"),
            normal_tensor(
                rng,
                [in_channels, out_channels, kernel, kernel],
                0.0,
                INIT_STD,
            ),
        );
        let bias = bias.then(|| {
            store.add(
                alloc::format!("{name}.bias"),
                Tensor::zeros([1, out_channels, 1, 1]),
            )
        });
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        g.conv_transpose2d(
            x,
            p.var(self.weight),
            self.bias.map(|b| p.var(b)),
            self.stride,
            self.pad,
        )
    }
}

/// Batch normalization with running statistics held in a buffer store.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Self {
        let gamma = params.add(
            alloc::format!("{name}.gamma"),
            normal_tensor(rng, [1, channels, 1, 1], 1.0, INIT_STD),
        );
        let beta = params.add(
            alloc::format!("{name}.beta"),
            Tensor::zeros([1, channels, 1, 1]),
        );
        let running_mean = buffers.add(
            alloc::format!("{name}.running_mean"),
            Tensor::zeros([1, channels, 1, 1]),
        );
        let running_var = buffers.add(
            alloc::format!("{name}.running_var"),
            Tensor::filled([1, channels, 1, 1], 1.0),
        );
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        let normalized = match cx.mode {
            Mode::Train => {
                let (y, stats) = cx.graph.normalize(x, NormKind::Batch, self.eps);
                let stats = stats.expect("batch statistics");
                let [n, _, h, w] = cx.graph.shape(x);
                let count = (n * h * w) as f64;
                let unbias = if count > 1.0 {
                    count / (count - 1.0)
                } else {
                    1.0
                };
                let m = self.momentum;
                for (r, s) in cx
                    .buffers
                    .get_mut(self.running_mean)
                    .data_mut()
                    .iter_mut()
                    .zip(&stats.mean)
                {
                    *r = (1.0 - m) * *r + m * s;
                }
                for (r, s) in cx
                    .buffers
                    .get_mut(self.running_var)
                    .data_mut()
                    .iter_mut()
                    .zip(&stats.var)
                {
                    *r = (1.0 - m) * *r + m * s * unbias;
                }
                y
            }
            Mode::Eval => {
                let mean = cx.buffers.get(self.running_mean).data().to_vec();
                let var = cx.buffers.get(self.running_var).data().to_vec();
                cx.graph.normalize_fixed(x, &mean, &var, self.eps)
            }
        };
        cx.graph.channel_affine(
            normalized,
            cx.params.var(self.gamma),
            cx.params.var(self.beta),
        )
    }
}

/// Instance normalization without affine parameters.
pub fn instance_norm(g: &mut Graph, x: Var) -> Var {
    g.normalize(x, NormKind::Instance, 1e-5).0
}

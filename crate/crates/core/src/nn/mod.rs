//! A small reverse-mode network engine for image classifiers.
//!
//! Parameters and running statistics live in flat named stores; layers hold
//! indices into them. `forward` never mutates the network, it returns a
//! [`Tape`] that `backward` consumes and that [`Network::commit_running_stats`]
//! uses to update batch-norm buffers after a training forward pass.

pub mod kernels;

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Real;
use kernels::{BnStats, ConvGeometry, BN_MOMENTUM};

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics.
    Train,
    /// Running statistics.
    Eval,
}

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorStore<T: Real> {
    pub names: Vec<String>,
    pub values: Vec<ArrayD<T>>,
}

impl<T: Real> TensorStore<T> {
    fn push(&mut self, name: String, value: ArrayD<T>) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> TensorStore<U> {
        TensorStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| U::of(x.as_f64()))).collect(),
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum()
    }
}

/// Parameter gradients aligned with [`Network::params`].
pub type Grads<T> = TensorStore<T>;

#[derive(Debug, Clone)]
pub enum Layer {
    /// Fixed per-channel `(x - mean) / std`.
    Normalize { mean: Vec<f64>, std: Vec<f64> },
    Conv { weight: usize, geom: ConvGeometry },
    BatchNorm {
        gamma: usize,
        beta: usize,
        running_mean: usize,
        running_var: usize,
    },
    Relu,
    GlobalAvgPool,
    Linear { weight: usize, bias: usize },
    PreActBlock(Box<PreActBlock>),
}

/// `relu(bn1(x))` feeds both the residual branch and, when present, the
/// projection shortcut; otherwise the identity shortcut carries `x`.
#[derive(Debug, Clone)]
pub struct PreActBlock {
    pub bn1: Layer,
    pub conv1: Layer,
    pub bn2: Layer,
    pub conv2: Layer,
    pub shortcut: Option<Layer>,
}

#[derive(Debug, Clone)]
pub enum Cache<T: Real> {
    Normalize,
    Conv { col: Array2<T>, in_shape: (usize, usize, usize, usize) },
    BatchNorm { xhat: Array4<T>, inv_std: Vec<T>, stats: Option<BnStats<T>> },
    Relu { y: Array4<T> },
    GlobalAvgPool { h: usize, w: usize },
    Linear { x: Array2<T> },
    Block(Box<BlockCache<T>>),
}

#[derive(Debug, Clone)]
pub struct BlockCache<T: Real> {
    bn1: Cache<T>,
    relu1: Cache<T>,
    shortcut: Option<Cache<T>>,
    conv1: Cache<T>,
    bn2: Cache<T>,
    relu2: Cache<T>,
    conv2: Cache<T>,
}

/// Record of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T: Real> {
    caches: Vec<Cache<T>>,
    mode: Mode,
}

impl<T: Real> Tape<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone)]
pub struct Network<T: Real> {
    pub layers: Vec<Layer>,
    pub params: TensorStore<T>,
    pub buffers: TensorStore<T>,
}

fn flat<T: Real>(a: &ArrayD<T>) -> &[T] {
    a.as_slice().expect("stores hold standard-layout arrays")
}

impl<T: Real> Network<T> {
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            layers: self.layers.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Runs the layers, returning the final activation flattened to `[N, K]`.
    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> (Array2<T>, Tape<T>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = Act::Spatial(x.clone());
        for layer in &self.layers {
            let (out, cache) = self.layer_forward(layer, act, mode);
            act = out;
            caches.push(cache);
        }
        let logits = match act {
            Act::Flat(a) => a,
            Act::Spatial(a) => {
                let n = a.shape()[0];
                let k = a.len() / n;
                a.into_shape_with_order((n, k)).expect("contiguous activation")
            }
        };
        (logits, Tape { caches, mode })
    }

    /// Back-propagates `dlogits`, returning the input gradient and adding
    /// parameter gradients into `grads` when given.
    pub fn backward(&self, tape: &Tape<T>, dlogits: &Array2<T>, mut grads: Option<&mut Grads<T>>) -> Array4<T> {
        let mut d = Act::Flat(dlogits.clone());
        for (layer, cache) in self.layers.iter().zip(&tape.caches).rev() {
            d = self.layer_backward(layer, cache, d, grads.as_deref_mut());
        }
        match d {
            Act::Spatial(a) => a,
            Act::Flat(_) => unreachable!("network input is spatial"),
        }
    }

    /// Folds the batch statistics recorded on `tape` into the running buffers.
    pub fn commit_running_stats(&mut self, tape: &Tape<T>) {
        if tape.mode != Mode::Train {
            return;
        }
        let layers = self.layers.clone();
        for (layer, cache) in layers.iter().zip(&tape.caches) {
            self.commit_layer(layer, cache);
        }
    }

    fn commit_layer(&mut self, layer: &Layer, cache: &Cache<T>) {
        match (layer, cache) {
            (
                Layer::BatchNorm {
                    running_mean,
                    running_var,
                    ..
                },
                Cache::BatchNorm { stats: Some(s), .. },
            ) => {
                let mom = T::of(BN_MOMENTUM);
                let unbias = if s.count > 1 {
                    T::of(s.count as f64 / (s.count - 1) as f64)
                } else {
                    T::one()
                };
                let rm = self.buffers.values[*running_mean].as_slice_mut().expect("contiguous");
                for (r, &m) in rm.iter_mut().zip(&s.mean) {
                    *r = (T::one() - mom) * *r + mom * m;
                }
                let rv = self.buffers.values[*running_var].as_slice_mut().expect("contiguous");
                for (r, &v) in rv.iter_mut().zip(&s.var) {
                    *r = (T::one() - mom) * *r + mom * v * unbias;
                }
            }
            (Layer::PreActBlock(b), Cache::Block(c)) => {
                self.commit_layer(&b.bn1, &c.bn1);
                self.commit_layer(&b.bn2, &c.bn2);
            }
            _ => {}
        }
    }

    fn layer_forward(&self, layer: &Layer, x: Act<T>, mode: Mode) -> (Act<T>, Cache<T>) {
        match layer {
            Layer::Normalize { mean, std } => {
                let mut a = x.spatial();
                for (ci, mut ch) in a.axis_iter_mut(Axis(1)).enumerate() {
                    let (m, s) = (T::of(mean[ci]), T::of(std[ci]));
                    ch.mapv_inplace(|v| (v - m) / s);
                }
                (Act::Spatial(a), Cache::Normalize)
            }
            Layer::Conv { weight, geom } => {
                let a = x.spatial();
                let w = kernels::as_matrix(&self.params.values[*weight]);
                let out = kernels::conv_forward(a.view(), w, geom);
                (
                    Act::Spatial(out.y),
                    Cache::Conv {
                        col: out.col,
                        in_shape: a.dim(),
                    },
                )
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                let a = x.spatial();
                let running = (mode == Mode::Eval).then(|| {
                    (
                        flat(&self.buffers.values[*running_mean]),
                        flat(&self.buffers.values[*running_var]),
                    )
                });
                let out = kernels::bn_forward(
                    a.view(),
                    flat(&self.params.values[*gamma]),
                    flat(&self.params.values[*beta]),
                    running,
                );
                (
                    Act::Spatial(out.y),
                    Cache::BatchNorm {
                        xhat: out.xhat,
                        inv_std: out.inv_std,
                        stats: out.stats,
                    },
                )
            }
            Layer::Relu => {
                let y = kernels::relu_forward(x.spatial());
                (Act::Spatial(y.clone()), Cache::Relu { y })
            }
            Layer::GlobalAvgPool => {
                let a = x.spatial();
                let (_, _, h, w) = a.dim();
                (Act::Flat(kernels::gap_forward(a.view())), Cache::GlobalAvgPool { h, w })
            }
            Layer::Linear { weight, bias } => {
                let a = x.flat();
                let w = kernels::as_matrix(&self.params.values[*weight]);
                let y = kernels::linear_forward(a.view(), w, flat(&self.params.values[*bias]));
                (Act::Flat(y), Cache::Linear { x: a })
            }
            Layer::PreActBlock(b) => {
                let (a1, bn1) = self.layer_forward(&b.bn1, x.clone(), mode);
                let (a1, relu1) = self.layer_forward(&Layer::Relu, a1, mode);
                let (short, sc_cache) = match &b.shortcut {
                    Some(sc) => {
                        let (s, c) = self.layer_forward(sc, a1.clone(), mode);
                        (s.spatial(), Some(c))
                    }
                    None => (x.spatial(), None),
                };
                let (h, conv1) = self.layer_forward(&b.conv1, a1, mode);
                let (h, bn2) = self.layer_forward(&b.bn2, h, mode);
                let (h, relu2) = self.layer_forward(&Layer::Relu, h, mode);
                let (h, conv2) = self.layer_forward(&b.conv2, h, mode);
                let out = h.spatial() + &short;
                (
                    Act::Spatial(out),
                    Cache::Block(Box::new(BlockCache {
                        bn1,
                        relu1,
                        shortcut: sc_cache,
                        conv1,
                        bn2,
                        relu2,
                        conv2,
                    })),
                )
            }
        }
    }

    fn layer_backward(&self, layer: &Layer, cache: &Cache<T>, d: Act<T>, mut grads: Option<&mut Grads<T>>) -> Act<T> {
        match (layer, cache) {
            (Layer::Normalize { std, .. }, Cache::Normalize) => {
                let mut a = d.spatial();
                for (ci, mut ch) in a.axis_iter_mut(Axis(1)).enumerate() {
                    let s = T::of(std[ci]);
                    ch.mapv_inplace(|v| v / s);
                }
                Act::Spatial(a)
            }
            (Layer::Conv { weight, geom }, Cache::Conv { col, in_shape }) => {
                let dy = d.spatial();
                let w = kernels::as_matrix(&self.params.values[*weight]);
                let (dx, dw) = kernels::conv_backward(dy.view(), col, w, geom, *in_shape, grads.is_some());
                if let (Some(g), Some(dw)) = (grads, dw) {
                    let dst = g.values[*weight].as_slice_mut().expect("contiguous");
                    for (o, v) in dst.iter_mut().zip(dw.iter()) {
                        *o += *v;
                    }
                }
                Act::Spatial(dx)
            }
            (Layer::BatchNorm { gamma, beta, .. }, Cache::BatchNorm { xhat, inv_std, stats }) => {
                let dy = d.spatial();
                let (dx, dg, db) = kernels::bn_backward(
                    dy.view(),
                    xhat,
                    inv_std,
                    flat(&self.params.values[*gamma]),
                    stats.is_some(),
                );
                if let Some(g) = grads {
                    add_into(&mut g.values[*gamma], &dg);
                    add_into(&mut g.values[*beta], &db);
                }
                Act::Spatial(dx)
            }
            (Layer::Relu, Cache::Relu { y }) => Act::Spatial(kernels::relu_backward(d.spatial(), y)),
            (Layer::GlobalAvgPool, Cache::GlobalAvgPool { h, w }) => {
                Act::Spatial(kernels::gap_backward(d.flat().view(), *h, *w))
            }
            (Layer::Linear { weight, bias }, Cache::Linear { x }) => {
                let dy = d.flat();
                let w = kernels::as_matrix(&self.params.values[*weight]);
                let (dx, pg) = kernels::linear_backward(dy.view(), x, w, grads.is_some());
                if let (Some(g), Some((dw, db))) = (grads, pg) {
                    let dst = g.values[*weight].as_slice_mut().expect("contiguous");
                    for (o, v) in dst.iter_mut().zip(dw.iter()) {
                        *o += *v;
                    }
                    add_into(&mut g.values[*bias], &db);
                }
                Act::Flat(dx)
            }
            (Layer::PreActBlock(b), Cache::Block(c)) => {
                let dout = d.spatial();
                let dh = self.layer_backward(&b.conv2, &c.conv2, Act::Spatial(dout.clone()), grads.as_deref_mut());
                let dh = self.layer_backward(&Layer::Relu, &c.relu2, dh, None);
                let dh = self.layer_backward(&b.bn2, &c.bn2, dh, grads.as_deref_mut());
                let da = self.layer_backward(&b.conv1, &c.conv1, dh, grads.as_deref_mut());
                match (&b.shortcut, &c.shortcut) {
                    (Some(sc), Some(scc)) => {
                        let dsc = self.layer_backward(sc, scc, Act::Spatial(dout), grads.as_deref_mut());
                        let da = Act::Spatial(da.spatial() + &dsc.spatial());
                        let da = self.layer_backward(&Layer::Relu, &c.relu1, da, None);
                        self.layer_backward(&b.bn1, &c.bn1, da, grads)
                    }
                    _ => {
                        let da = self.layer_backward(&Layer::Relu, &c.relu1, da, None);
                        let dx = self.layer_backward(&b.bn1, &c.bn1, da, grads);
                        Act::Spatial(dx.spatial() + &dout)
                    }
                }
            }
            _ => unreachable!("tape does not match network layers"),
        }
    }
}

fn add_into<T: Real>(dst: &mut ArrayD<T>, src: &[T]) {
    for (o, &v) in dst.as_slice_mut().expect("contiguous").iter_mut().zip(src) {
        *o += v;
    }
}

#[derive(Clone)]
enum Act<T: Real> {
    Spatial(Array4<T>),
    Flat(Array2<T>),
}

impl<T: Real> Act<T> {
    fn spatial(self) -> Array4<T> {
        match self {
            Act::Spatial(a) => a,
            Act::Flat(a) => {
                let (n, c) = a.dim();
                a.into_shape_with_order((n, c, 1, 1)).expect("contiguous")
            }
        }
    }

    fn flat(self) -> Array2<T> {
        match self {
            Act::Flat(a) => a,
            Act::Spatial(a) => {
                let n = a.shape()[0];
                let k = a.len() / n;
                a.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n, k))
                    .expect("contiguous")
            }
        }
    }
}

/// Allocates named parameters with PyTorch-style default initialization.
pub struct NetBuilder {
    rng: RngState,
    params: TensorStore<f32>,
    buffers: TensorStore<f32>,
}

impl NetBuilder {
    pub fn new(rng: RngState) -> Self {
        Self {
            rng,
            params: TensorStore::default(),
            buffers: TensorStore::default(),
        }
    }

    fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> ArrayD<f32> {
        let mut g = self.rng.derive(name, 0).generator();
        ArrayD::from_shape_fn(IxDyn(shape), |_| g.gen_range(-bound..bound) as f32)
    }

    pub fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Layer {
        let fan_in = in_ch * kernel * kernel;
        let key = format!("{name}.weight");
        let w = self.uniform(&key, &[out_ch, in_ch, kernel, kernel], 1.0 / (fan_in as f64).sqrt());
        let weight = self.params.push(key, w);
        Layer::Conv {
            weight,
            geom: ConvGeometry {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            },
        }
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Layer {
        let gamma = self.params.push(format!("{name}.weight"), ArrayD::ones(IxDyn(&[channels])));
        let beta = self.params.push(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[channels])));
        let running_mean = self
            .buffers
            .push(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[channels])));
        let running_var = self
            .buffers
            .push(format!("{name}.running_var"), ArrayD::ones(IxDyn(&[channels])));
        Layer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Layer {
        let bound = 1.0 / (inputs as f64).sqrt();
        let wk = format!("{name}.weight");
        let bk = format!("{name}.bias");
        let w = self.uniform(&wk, &[outputs, inputs], bound);
        let b = self.uniform(&bk, &[outputs], bound);
        let weight = self.params.push(wk, w);
        let bias = self.params.push(bk, b);
        Layer::Linear { weight, bias }
    }

    pub fn preact_block(&mut self, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Layer {
        let bn1 = self.batch_norm(&format!("{name}.bn1"), in_ch);
        let conv1 = self.conv(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1);
        let bn2 = self.batch_norm(&format!("{name}.bn2"), out_ch);
        let conv2 = self.conv(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1);
        let shortcut = (stride != 1 || in_ch != out_ch)
            .then(|| self.conv(&format!("{name}.shortcut"), in_ch, out_ch, 1, stride, 0));
        Layer::PreActBlock(Box::new(PreActBlock {
            bn1,
            conv1,
            bn2,
            conv2,
            shortcut,
        }))
    }

    pub fn finish(self, layers: Vec<Layer>) -> Network<f32> {
        Network {
            layers,
            params: self.params,
            buffers: self.buffers,
        }
    }
}

/// Checks that a stored tensor matches the layout the network expects.
pub fn check_shapes<T: Real>(expected: &TensorStore<T>, name: &str, got: &[usize]) -> Result<usize> {
    let idx = expected.index_of(name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
    if expected.values[idx].shape() != got {
        return Err(Error::ShapeMismatch {
            expected: format!("{name} {:?}", expected.values[idx].shape()),
            actual: format!("{got:?}"),
        });
    }
    Ok(idx)
}

/// Sum of a per-row vector, used by tests and losses.
pub fn row_sums<T: Real>(a: &Array2<T>) -> Array1<T> {
    a.sum_axis(Axis(1))
}

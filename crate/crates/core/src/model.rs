//! Classifiers `f_θ` producing logits over `K` classes.
//!
//! Architectures are registered by name. Inputs stay in `[0, 1]` pixel space:
//! any per-channel normalization is the network's first layer, so attacks
//! and their radii are defined on raw pixels.

use std::sync::Arc;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{Grads, Layer, Mode, NetBuilder, Network, Tape};
use crate::objective::attack_loss::{attack_objective, AttackLossKind};
use crate::objective::prob::argmax;
use crate::registry::Registry;
use crate::rng::RngState;
use crate::scalar::Real;

pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2471, 0.2435, 0.2616];

/// Parameter count of PreAct-ResNet-18 for 10 classes on 3x32x32 input
/// (including the final pre-pooling batch norm).
pub const PREACT_RESNET18_PARAMS: usize = 11_172_170;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: String,
    pub num_classes: usize,
    /// `(C, H, W)`.
    pub input_shape: (usize, usize, usize),
    /// Per-channel `(mean, std)` applied inside the network.
    pub normalization: Option<(Vec<f64>, Vec<f64>)>,
}

impl ModelSpec {
    pub fn new(arch: &str, num_classes: usize, input_shape: (usize, usize, usize)) -> Self {
        Self {
            arch: arch.to_string(),
            num_classes,
            input_shape,
            normalization: None,
        }
    }

    pub fn with_cifar_normalization(mut self) -> Self {
        self.normalization = Some((CIFAR10_MEAN.to_vec(), CIFAR10_STD.to_vec()));
        self
    }
}

pub trait Architecture: Send + Sync {
    fn name(&self) -> &'static str;

    /// Body layers; the builder owns parameter allocation.
    fn layers(&self, b: &mut NetBuilder, spec: &ModelSpec) -> Result<Vec<Layer>>;
}

/// conv3x3(16, stride 2)-BN-ReLU twice, global average pool, linear.
pub struct TinyCnn;

impl Architecture for TinyCnn {
    fn name(&self) -> &'static str {
        "tiny_cnn"
    }

    fn layers(&self, b: &mut NetBuilder, spec: &ModelSpec) -> Result<Vec<Layer>> {
        let c = spec.input_shape.0;
        Ok(vec![
            b.conv("conv1", c, 16, 3, 2, 1),
            b.batch_norm("bn1", 16),
            Layer::Relu,
            b.conv("conv2", 16, 16, 3, 2, 1),
            b.batch_norm("bn2", 16),
            Layer::Relu,
            Layer::GlobalAvgPool,
            b.linear("linear", 16, spec.num_classes),
        ])
    }
}

/// Pre-activation ResNet-18 (2-2-2-2 basic blocks, widths 64..512).
pub struct PreActResNet18;

impl Architecture for PreActResNet18 {
    fn name(&self) -> &'static str {
        "preact_resnet18"
    }

    fn layers(&self, b: &mut NetBuilder, spec: &ModelSpec) -> Result<Vec<Layer>> {
        let mut layers = vec![b.conv("conv1", spec.input_shape.0, 64, 3, 1, 1)];
        let mut in_ch = 64;
        for (stage, (width, stride)) in [(64, 1), (128, 2), (256, 2), (512, 2)].into_iter().enumerate() {
            for block in 0..2 {
                let s = if block == 0 { stride } else { 1 };
                layers.push(b.preact_block(&format!("layer{}.{block}", stage + 1), in_ch, width, s));
                in_ch = width;
            }
        }
        layers.push(b.batch_norm("bn", 512));
        layers.push(Layer::Relu);
        layers.push(Layer::GlobalAvgPool);
        layers.push(b.linear("linear", 512, spec.num_classes));
        Ok(layers)
    }
}

pub fn architectures() -> Registry<dyn Architecture> {
    Registry::new("architecture")
        .with("tiny_cnn", Arc::new(TinyCnn) as Arc<dyn Architecture>)
        .with("preact_resnet18", Arc::new(PreActResNet18) as Arc<dyn Architecture>)
}

#[derive(Debug, Clone)]
pub struct Classifier<T: Real = f32> {
    pub spec: ModelSpec,
    pub net: Network<T>,
}

impl Classifier<f32> {
    pub fn new(spec: ModelSpec, rng: RngState) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        let arch = architectures().get(&spec.arch)?;
        let mut b = NetBuilder::new(rng.derive("init", 0));
        let mut layers = Vec::new();
        if let Some((mean, std)) = &spec.normalization {
            if mean.len() != spec.input_shape.0 || std.len() != spec.input_shape.0 {
                return Err(Error::invalid("normalization must have one entry per channel"));
            }
            layers.push(Layer::Normalize {
                mean: mean.clone(),
                std: std.clone(),
            });
        }
        layers.extend(arch.layers(&mut b, &spec)?);
        Ok(Self {
            net: b.finish(layers),
            spec,
        })
    }
}

impl<T: Real> Classifier<T> {
    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier {
            spec: self.spec.clone(),
            net: self.net.cast(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn num_parameters(&self) -> usize {
        self.net.num_parameters()
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != self.spec.input_shape {
            return Err(Error::ShapeMismatch {
                expected: format!("[N, {}, {}, {}]", self.spec.input_shape.0, self.spec.input_shape.1, self.spec.input_shape.2),
                actual: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, batch: &ImageBatch<T>, mode: Mode) -> Result<Array2<T>> {
        self.forward_tape(batch.data(), mode).map(|(z, _)| z)
    }

    /// Forward pass on a raw array, keeping the tape for back-propagation.
    pub fn forward_tape(&self, x: &Array4<T>, mode: Mode) -> Result<(Array2<T>, Tape<T>)> {
        self.check_input(x)?;
        Ok(self.net.forward(x, mode))
    }

    pub fn backward(&self, tape: &Tape<T>, dlogits: &Array2<T>, grads: Option<&mut Grads<T>>) -> Array4<T> {
        self.net.backward(tape, dlogits, grads)
    }

    /// Eval-mode logits computed in chunks of `chunk` samples.
    pub fn logits_chunked(&self, batch: &ImageBatch<T>, chunk: usize) -> Result<Array2<T>> {
        let n = batch.len();
        let mut out = Array2::<T>::zeros((n, self.spec.num_classes));
        let chunk = chunk.max(1);
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let z = self.forward(&batch.slice(start, end), Mode::Eval)?;
            out.slice_mut(ndarray::s![start..end, ..]).assign(&z);
        }
        Ok(out)
    }

    pub fn predict(&self, batch: &ImageBatch<T>) -> Result<Vec<usize>> {
        let z = self.logits_chunked(batch, 256)?;
        Ok(z.rows().into_iter().map(|r| argmax(r.as_slice().expect("contiguous"))).collect())
    }

    /// Gradient of the batch-mean attack loss with respect to the input pixels.
    pub fn input_gradient(
        &self,
        batch: &ImageBatch<T>,
        labels: &[usize],
        loss: AttackLossKind,
        reference: Option<&Array2<T>>,
        mode: Mode,
    ) -> Result<Array4<T>> {
        let (z, tape) = self.forward_tape(batch.data(), mode)?;
        let (_, dz) = attack_objective::<T>(loss).evaluate(&z, labels, reference)?;
        Ok(self.backward(&tape, &dz, None))
    }

    /// Overwrites a named parameter with zeros.
    pub fn zero_parameter(&mut self, name: &str) -> Result<()> {
        let idx = self
            .net
            .params
            .index_of(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))?;
        self.net.params.values[idx].fill(T::zero());
        Ok(())
    }
}

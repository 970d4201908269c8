//! Parameter storage and the convolutional building blocks.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::autograd::{ConvGeometry, Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Outcome of [`ParamStore::load_overlapping`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TransferStats {
    pub exact: usize,
    pub partial: usize,
    pub missing: usize,
}

/// Named, ordered collection of model parameters.
///
/// Registration order is deterministic for a given architecture, so
/// parameters can be matched by name across checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut count = 0;
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            p.value.data_mut().fill(T::default());
            count += 1;
        }
        count
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut count = 0;
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            p.trainable = trainable;
            count += 1;
        }
        count
    }

    pub fn named_values(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Copies weights from `src` into same-named parameters (after
    /// `rename`), transferring the overlapping hyper-rectangle when shapes
    /// differ. Parameters without a counterpart keep their current values.
    pub fn load_overlapping(
        &mut self,
        src: &ParamStore<T>,
        rename: impl Fn(&str) -> Option<String>,
    ) -> TransferStats {
        let mut stats = TransferStats::default();
        for p in &mut self.params {
            let Some(from) = rename(&p.name).and_then(|n| src.find(&n)) else {
                stats.missing += 1;
                continue;
            };
            let from = &src.get(from).value;
            if from.shape() == p.value.shape() {
                p.value = from.clone();
                stats.exact += 1;
            } else {
                p.value.copy_overlap_from(from);
                stats.partial += 1;
            }
        }
        stats
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

fn uniform_tensor<T: Real>(shape: Shape, bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..shape.len())
        .map(|_| T::from_f64(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// 3-D convolution with cubic kernel and bias.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv3d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
    ) -> Self {
        let k = geom.kernel;
        let fan_in = in_channels * k * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = uniform_tensor(Shape::new(out_channels, in_channels, k, k, k), bound, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, out_channels, 1, 1, 1)),
        );
        Conv3d {
            weight,
            bias,
            geom,
            in_channels,
            out_channels,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv3d(x, w, b, self.geom)
    }
}

/// Kernel-2, stride-2 transposed convolution (upsampling by two).
#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvTranspose3d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let bound = (6.0 / in_channels as f64).sqrt();
        let w = uniform_tensor(Shape::new(in_channels, out_channels, 2, 2, 2), bound, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, out_channels, 1, 1, 1)),
        );
        ConvTranspose3d {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv_transpose2(x, w, b)
    }
}

/// Per-sample, per-channel feature normalization with learned affine.
#[derive(Clone, Debug)]
pub struct InstanceNorm3d {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm3d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1, 1);
        InstanceNorm3d {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(shape, T::ONE)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(shape)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.instance_norm(x, gamma, beta, NORM_EPS)
    }
}

/// Convolution, normalization and leaky rectifier.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv3d,
    pub norm: InstanceNorm3d,
}

impl ConvNormAct {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
    ) -> Self {
        ConvNormAct {
            conv: Conv3d::new(
                store,
                rng,
                &format!("{name}.conv"),
                in_channels,
                out_channels,
                geom,
            ),
            norm: InstanceNorm3d::new(store, &format!("{name}.norm"), out_channels),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.conv.forward(g, store, x);
        let h = self.norm.forward(g, store, h);
        g.leaky_relu(h, LEAKY_SLOPE)
    }
}

/// Two 3x3x3 convolutions with an identity (or 1x1x1 projected) shortcut.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv3d,
    pub norm1: InstanceNorm3d,
    pub conv2: Conv3d,
    pub norm2: InstanceNorm3d,
    pub shortcut: Option<Conv3d>,
}

impl ResidualBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let k3 = ConvGeometry::new(3, 1, 1);
        ResidualBlock {
            conv1: Conv3d::new(
                store,
                rng,
                &format!("{name}.conv1"),
                in_channels,
                out_channels,
                k3,
            ),
            norm1: InstanceNorm3d::new(store, &format!("{name}.norm1"), out_channels),
            conv2: Conv3d::new(
                store,
                rng,
                &format!("{name}.conv2"),
                out_channels,
                out_channels,
                k3,
            ),
            norm2: InstanceNorm3d::new(store, &format!("{name}.norm2"), out_channels),
            shortcut: (in_channels != out_channels).then(|| {
                Conv3d::new(
                    store,
                    rng,
                    &format!("{name}.shortcut"),
                    in_channels,
                    out_channels,
                    ConvGeometry::new(1, 1, 0),
                )
            }),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.conv1.forward(g, store, x);
        let h = self.norm1.forward(g, store, h);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv2.forward(g, store, h);
        let h = self.norm2.forward(g, store, h);
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(g, store, x),
            None => x,
        };
        let sum = g.add(h, skip);
        g.leaky_relu(sum, LEAKY_SLOPE)
    }
}

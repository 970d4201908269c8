//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that depends on a trainable parameter or on a
//! [`Graph::variable`]. Parameters marked frozen enter the graph as
//! constants, so no gradient is ever produced for them.

pub mod kernels;

use std::collections::HashMap;

pub use kernels::ConvGeometry;
use kernels::*;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    ConvTranspose2 {
        x: Var,
        w: Var,
        b: Var,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    SoftmaxChannels {
        x: Var,
    },
    WeightedSum {
        attn: Var,
        z: Var,
    },
    DiceBce {
        pred: Var,
        label: Tensor<T>,
    },
    Dot {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
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

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a stored parameter onto the tape; frozen parameters are constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Total number of tensor elements held by the tape.
    pub fn stored_elements(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Var {
        let out = conv3d_forward(self.value(x), self.value(w), self.value(b), geom);
        let rg = self.rg(&[x, w, b]);
        self.push(out, Op::Conv { x, w, b, geom }, rg)
    }

    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = conv_transpose2_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(&[x, w, b]);
        self.push(out, Op::ConvTranspose2 { x, w, b }, rg)
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (y, xhat, inv_std) = instance_norm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            T::from_f64(eps),
        );
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            y,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::from_f64(slope);
        let out = self
            .value(x)
            .map(|v| if v > T::ZERO { v } else { v * slope });
        let rg = self.rg(&[x]);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::ONE / (T::ONE + (-v).exp()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add { a, b }, rg)
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]);
        let n = first.batch();
        let s = first.spatial_len();
        let total_c: usize = parts.iter().map(|&p| self.shape(p).channels()).sum();
        for &p in parts {
            let sh = self.shape(p);
            assert_eq!(sh.batch(), n, "concat batch mismatch");
            assert_eq!(sh.spatial(), first.spatial(), "concat spatial mismatch");
        }
        let mut out = Tensor::zeros(first.with_channels(total_c));
        for ni in 0..n {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).item(ni);
                out.item_mut(ni)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
            debug_assert_eq!(off, total_c * s);
        }
        let rg = self.rg(parts);
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape { x }, rg)
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let out = softmax_channels(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxChannels { x }, rg)
    }

    /// Attention-weighted sum of `C` embeddings stacked along channels.
    pub fn weighted_sum(&mut self, attn: Var, z: Var) -> Var {
        let out = weighted_sum(self.value(attn), self.value(z));
        let rg = self.rg(&[attn, z]);
        self.push(out, Op::WeightedSum { attn, z }, rg)
    }

    /// Soft-Dice plus binary cross-entropy, as a scalar node.
    pub fn dice_bce(&mut self, pred: Var, label: Tensor<T>) -> Var {
        assert_eq!(self.shape(pred), label.shape(), "loss shape mismatch");
        let terms = dice_bce_forward(self.value(pred), &label);
        let rg = self.rg(&[pred]);
        self.push(
            Tensor::scalar(T::from_f64(terms.dice + terms.bce)),
            Op::DiceBce { pred, label },
            rg,
        )
    }

    /// Scalar `sum(x * weights)`.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Var {
        assert_eq!(self.shape(x), weights.shape());
        let v: T = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Dot { x, weights }, rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.shape(root).len(), 1, "backward requires a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::scalar(T::ONE));
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, _)| i)
            .collect::<Vec<_>>();
        let mut kept: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in leaves {
            kept[i] = grads[i].take();
        }
        Gradients {
            grads: kept,
            params: self.params.iter().map(|(&k, &v)| (k, v)).collect(),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let acc = |v: Var, t: Tensor<T>, grads: &mut [Option<Tensor<T>>]| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let wants_w = need(*w) || need(*b);
                let r =
                    conv3d_backward(self.value(*x), self.value(*w), *geom, g, need(*x), wants_w);
                if let Some(dx) = r.dx {
                    acc(*x, dx, grads);
                }
                if need(*w) {
                    acc(*w, r.dw.expect("weight grad"), grads);
                }
                if need(*b) {
                    acc(*b, r.db.expect("bias grad"), grads);
                }
            }
            Op::ConvTranspose2 { x, w, b } => {
                let wants_w = need(*w) || need(*b);
                let r =
                    conv_transpose2_backward(self.value(*x), self.value(*w), g, need(*x), wants_w);
                if let Some(dx) = r.dx {
                    acc(*x, dx, grads);
                }
                if need(*w) {
                    acc(*w, r.dw.expect("weight grad"), grads);
                }
                if need(*b) {
                    acc(*b, r.db.expect("bias grad"), grads);
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dgamma, dbeta) =
                    instance_norm_backward(xhat, inv_std, self.value(*gamma), g, need(*x));
                if let Some(dx) = dx {
                    acc(*x, dx, grads);
                }
                if need(*gamma) {
                    acc(*gamma, dgamma, grads);
                }
                if need(*beta) {
                    acc(*beta, dbeta, grads);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::ZERO {
                        *d *= *slope;
                    }
                }
                acc(*x, dx, grads);
            }
            Op::Sigmoid { x } => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (T::ONE - y);
                }
                acc(*x, dx, grads);
            }
            Op::Add { a, b } => {
                if need(*a) {
                    acc(*a, g.clone(), grads);
                }
                if need(*b) {
                    acc(*b, g.clone(), grads);
                }
            }
            Op::Concat { parts } => {
                let n = g.shape().batch();
                let mut off = vec![0usize; n];
                for &p in parts {
                    let sh = self.shape(p);
                    let len = sh.channels() * sh.spatial_len();
                    if need(p) {
                        let mut part = Tensor::zeros(sh);
                        for (ni, o) in off.iter().enumerate() {
                            part.item_mut(ni).copy_from_slice(&g.item(ni)[*o..*o + len]);
                        }
                        acc(p, part, grads);
                    }
                    for o in off.iter_mut() {
                        *o += len;
                    }
                }
            }
            Op::Reshape { x } => {
                acc(*x, g.clone().reshaped(self.shape(*x)), grads);
            }
            Op::SoftmaxChannels { x } => {
                acc(*x, softmax_channels_backward(&node.value, g), grads);
            }
            Op::WeightedSum { attn, z } => {
                let (da, dz) = weighted_sum_backward(self.value(*attn), self.value(*z), g);
                if need(*attn) {
                    acc(*attn, da, grads);
                }
                if need(*z) {
                    acc(*z, dz, grads);
                }
            }
            Op::DiceBce { pred, label } => {
                let up = g.data()[0];
                acc(
                    *pred,
                    dice_bce_backward(self.value(*pred), label, up),
                    grads,
                );
            }
            Op::Dot { x, weights } => {
                let up = g.data()[0];
                acc(*x, weights.map(|w| w * up), grads);
            }
        }
    }
}

/// Gradients produced by one reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when the leaf does not influence the root
    /// or is not differentiable.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a stored parameter, if it took part in the pass.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Moves out all parameter gradients, ordered by parameter id.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor<T>)> {
        self.params.sort_by_key(|(p, _)| *p);
        let mut out = Vec::new();
        for (p, v) in self.params {
            if let Some(g) = self.grads[v.0].take() {
                out.push((p, g));
            }
        }
        out
    }
}

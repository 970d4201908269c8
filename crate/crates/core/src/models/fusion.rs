//! Attention fusion of per-modality embeddings.

use rand::Rng;

use crate::autograd::{ConvGeometry, Graph, Var};
use crate::nn::{Conv3d, ParamStore, LEAKY_SLOPE};
use crate::tensor::{Real, Shape, Tensor};

/// Logit offset that removes an absent modality from the softmax.
const MASKED_LOGIT: f64 = -1e9;

/// Two stacked 3x3x3 convolutions producing one attention logit per
/// modality, a softmax across modalities, and the attention-weighted sum
/// of the embeddings.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub modalities: usize,
    pub width: usize,
    pub conv1: Conv3d,
    pub conv2: Conv3d,
}

/// Fused features and the attention maps that produced them.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub features: Var,
    pub attention: Var,
}

impl FusionBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        modalities: usize,
        width: usize,
    ) -> Self {
        let k3 = ConvGeometry::new(3, 1, 1);
        FusionBlock {
            modalities,
            width,
            conv1: Conv3d::new(
                store,
                rng,
                &format!("{name}.conv1"),
                modalities * width,
                width,
                k3,
            ),
            conv2: Conv3d::new(store, rng, &format!("{name}.conv2"), width, modalities, k3),
        }
    }

    /// `z` stacks the embeddings as `[N, C * F, ...]` with modality-major
    /// channels. With `absent` given, modalities marked absent receive zero
    /// attention instead of participating in the softmax.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        absent: Option<&[Vec<bool>]>,
    ) -> Fused {
        let h = self.conv1.forward(g, store, z);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let mut logits = self.conv2.forward(g, store, h);
        if let Some(absent) = absent {
            let shape = g.shape(logits);
            let s = shape.spatial_len();
            let mut mask = Tensor::zeros(shape);
            for (n, row) in absent.iter().enumerate() {
                for (c, &missing) in row.iter().enumerate() {
                    if missing {
                        mask.data_mut()[(n * self.modalities + c) * s..][..s]
                            .fill(T::from_f64(MASKED_LOGIT));
                    }
                }
            }
            let mask = g.constant(mask);
            logits = g.add(logits, mask);
        }
        let attention = g.softmax_channels(logits);
        let features = g.weighted_sum(attention, z);
        Fused {
            features,
            attention,
        }
    }
}

/// Stacks a `[N * C, F, ...]` per-modality batch into `[N, C * F, ...]`.
pub fn stack_modalities<T: Real>(g: &mut Graph<T>, x: Var, modalities: usize) -> Var {
    let s = g.shape(x);
    let [d, h, w] = s.spatial();
    g.reshape(
        x,
        Shape::new(s.batch() / modalities, modalities * s.channels(), d, h, w),
    )
}

/// Result of comparing analytic and finite-difference gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Number of scalar derivatives compared.
    pub checked: usize,
}

/// Checks a fusion block's gradients with respect to its parameters and its
/// input embeddings against central finite differences in double precision.
///
/// The block fuses `modalities` random embeddings of width `width` over a
/// cube of edge `edge`; the scalar objective is a fixed random projection of
/// the fused features.
pub fn fusion_gradient_check(
    modalities: usize,
    width: usize,
    edge: usize,
    step: f64,
    seed: u64,
) -> GradientCheck {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FLOOR: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let block = FusionBlock::new(&mut store, &mut rng, "fusion", modalities, width);
    // Nonzero biases so every parameter matters.
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for &id in &ids {
        for v in store.get_mut(id).value.data_mut() {
            if *v == 0.0 {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let zshape = Shape::new(2, modalities * width, edge, edge, edge);
    let z: Tensor<f64> = Tensor::from_vec(
        zshape,
        (0..zshape.len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    );
    let proj: Tensor<f64> = {
        let s = zshape.with_channels(width);
        Tensor::from_vec(s, (0..s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let objective = |store: &ParamStore<f64>, z: &Tensor<f64>| -> f64 {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = block.forward(&mut g, store, zv, None);
        let root = g.dot(out.features, proj.clone());
        g.value(root).data()[0]
    };

    let mut g = Graph::new();
    let zv = g.variable(z.clone());
    let out = block.forward(&mut g, &store, zv, None);
    let root = g.dot(out.features, proj.clone());
    let grads = g.backward(root);

    let mut worst = 0f64;
    let mut checked = 0;
    let mut compare = |a: f64, n: f64| {
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(FLOOR));
        checked += 1;
    };
    for &id in &ids {
        let analytic = grads.param(id).expect("parameter gradient").clone();
        for i in 0..analytic.len() {
            let mut plus = store.clone();
            plus.get_mut(id).value.data_mut()[i] += step;
            let mut minus = store.clone();
            minus.get_mut(id).value.data_mut()[i] -= step;
            let numeric = (objective(&plus, &z) - objective(&minus, &z)) / (2.0 * step);
            compare(analytic.data()[i], numeric);
        }
    }
    let dz = grads.get(zv).expect("input gradient");
    for i in 0..z.len() {
        let mut plus = z.clone();
        plus.data_mut()[i] += step;
        let mut minus = z.clone();
        minus.data_mut()[i] -= step;
        let numeric = (objective(&store, &plus) - objective(&store, &minus)) / (2.0 * step);
        compare(dz.data()[i], numeric);
    }
    GradientCheck {
        max_rel_error: worst,
        checked,
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            shape,
            (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn gradients_match_finite_differences() {
        let check = fusion_gradient_check(3, 2, 4, 1e-5, 17);
        assert!(check.checked > 800);
        assert!(check.max_rel_error <= 1e-4, "{check:?}");
    }

    #[test]
    fn permuting_modalities_and_slots_leaves_fusion_unchanged() {
        let (c, f) = (3, 2);
        let mut store = ParamStore::<f64>::new();
        let block = FusionBlock::new(&mut store, &mut ChaCha8Rng::seed_from_u64(4), "f", c, f);
        let z = random(Shape::new(1, c * f, 4, 4, 4), 5);
        let fused = |store: &ParamStore<f64>, z: &Tensor<f64>| {
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            let out = block.forward(&mut g, store, zv, None);
            g.value(out.features).clone()
        };
        let base = fused(&store, &z);
        // Swap modalities 0 and 2 in the input and in every weight slot.
        let perm = [2, 1, 0];
        let mut zp = z.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for k in 0..f {
                zp.channel_mut(0, dst * f + k)
                    .copy_from_slice(z.channel(0, src * f + k));
            }
        }
        let mut sp = store.clone();
        let w1 = store.get(block.conv1.weight).value.clone();
        let per_in = 27;
        for o in 0..f {
            for (dst, &src) in perm.iter().enumerate() {
                for k in 0..f {
                    let d0 = (o * c * f + dst * f + k) * per_in;
                    let s0 = (o * c * f + src * f + k) * per_in;
                    sp.get_mut(block.conv1.weight).value.data_mut()[d0..d0 + per_in]
                        .copy_from_slice(&w1.data()[s0..s0 + per_in]);
                }
            }
        }
        let w2 = store.get(block.conv2.weight).value.clone();
        let b2 = store.get(block.conv2.bias).value.clone();
        let per_out = f * 27;
        for (dst, &src) in perm.iter().enumerate() {
            sp.get_mut(block.conv2.weight).value.data_mut()[dst * per_out..][..per_out]
                .copy_from_slice(&w2.data()[src * per_out..][..per_out]);
            sp.get_mut(block.conv2.bias).value.data_mut()[dst] = b2.data()[src];
        }
        let permuted = fused(&sp, &zp);
        assert!(base.max_abs_diff(&permuted) < 1e-12);
    }

    #[test]
    fn single_modality_gets_all_attention() {
        let mut store = ParamStore::<f64>::new();
        let block = FusionBlock::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "f", 1, 3);
        let mut g = Graph::new();
        let z = g.constant(random(Shape::new(2, 3, 4, 4, 4), 1));
        let out = block.forward(&mut g, &store, z, None);
        assert!(g.value(out.attention).data().iter().all(|&a| a == 1.0));
        assert_eq!(g.value(out.features), g.value(z));
    }

    #[test]
    fn masked_modality_receives_no_attention() {
        let mut store = ParamStore::<f32>::new();
        let block = FusionBlock::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "f", 3, 2);
        let mut g = Graph::new();
        let z = g.constant(random(Shape::new(1, 6, 4, 4, 4), 2).cast());
        let out = block.forward(&mut g, &store, z, Some(&[vec![false, true, false]]));
        let a = g.value(out.attention);
        assert!(a.channel(0, 1).iter().all(|&v| v == 0.0));
        for i in 0..64 {
            let sum: f32 = (0..3).map(|c| a.channel(0, c)[i]).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }
}

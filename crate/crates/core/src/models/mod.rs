//! Architecture families built on the residual U-Net backbone.
//!
//! * [`MultiUnet`]: one backbone over all registry channels.
//! * [`LfUnet`]: one shared single-channel backbone per modality, fused by
//!   attention at the penultimate layer.
//! * [`MafUnet`]: per-modality encoders fused by attention at every scale,
//!   followed by a single decoder.
//! * [`Progressive`]: a frozen Multi-Unet column feeding a trainable column
//!   through lateral connections.

pub mod backbone;
pub mod fusion;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{BackboneConfig, Decoder, Encoder, LateralWidths, ResUnet, Taps};
pub use fusion::{Fused, FusionBlock};

use crate::autograd::{ConvGeometry, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv3d, ParamStore};
use crate::registry::ModalityRegistry;
use crate::rng::{substream, DOMAIN_INIT};
use crate::tensor::{Real, Shape, Tensor};
use fusion::stack_modalities;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MultiUnet,
    LfUnet,
    MafUnet,
    Progressive,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::MultiUnet,
        Family::LfUnet,
        Family::MafUnet,
        Family::Progressive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::MultiUnet => "multi_unet",
            Family::LfUnet => "lf_unet",
            Family::MafUnet => "maf_unet",
            Family::Progressive => "progressive",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model family `{s}`")))
    }
}

fn yes() -> bool {
    true
}

/// Everything needed to rebuild a network's topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub backbone: BackboneConfig,
    /// Channel semantics; its length is the number of input channels.
    pub registry: ModalityRegistry,
    /// Share one encoder across modalities (MAFUnet).
    #[serde(default = "yes")]
    pub shared_encoder: bool,
    /// Exclude absent modalities from the fusion softmax instead of feeding
    /// them as zero volumes (LFUnet, MAFUnet).
    #[serde(default)]
    pub mask_absent: bool,
    /// Input channels of the frozen column (progressive); the leading
    /// channels of the registry. Defaults to all of them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column1_channels: Option<usize>,
}

impl ModelSpec {
    pub fn new(family: Family, backbone: BackboneConfig, registry: ModalityRegistry) -> Self {
        ModelSpec {
            family,
            backbone,
            registry,
            shared_encoder: true,
            mask_absent: false,
            column1_channels: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.registry.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.registry.is_empty() {
            return Err(Error::Config("model registry is empty".into()));
        }
        if let Some(c1) = self.column1_channels {
            if self.family != Family::Progressive {
                return Err(Error::Config(
                    "column1_channels only applies to progressive models".into(),
                ));
            }
            if c1 == 0 || c1 > self.in_channels() {
                return Err(Error::Config(format!(
                    "frozen column takes {c1} channels, registry has {}",
                    self.in_channels()
                )));
            }
        }
        Ok(())
    }
}

/// Network outputs for one batch.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Per-voxel lesion probability, `[N, 1, D, H, W]`.
    pub prob: Var,
    /// Fusion attention maps `[N, C, ...]`, one per fusion block.
    pub attention: Vec<Var>,
}

fn head<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: &str,
    width: usize,
) -> Conv3d {
    Conv3d::new(store, rng, name, width, 1, ConvGeometry::new(1, 1, 0))
}

fn absent_of(presence: &[Vec<bool>]) -> Vec<Vec<bool>> {
    presence
        .iter()
        .map(|p| p.iter().map(|&v| !v).collect())
        .collect()
}

/// View `[N, C, ...]` as a batch of `N * C` single-channel volumes.
fn per_modality_batch<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let [d, h, w] = s.spatial();
    input
        .clone()
        .reshaped(Shape::new(s.batch() * s.channels(), 1, d, h, w))
}

/// Copies channel `c` of every item into a `[N, 1, ...]` tensor.
fn select_channel<T: Real>(input: &Tensor<T>, c: usize) -> Tensor<T> {
    select_channels(input, c..c + 1)
}

fn select_channels<T: Real>(input: &Tensor<T>, range: std::ops::Range<usize>) -> Tensor<T> {
    let s = input.shape();
    let mut out = Tensor::zeros(s.with_channels(range.len()));
    for n in 0..s.batch() {
        for (k, c) in range.clone().enumerate() {
            out.channel_mut(n, k).copy_from_slice(input.channel(n, c));
        }
    }
    out
}

/// Single backbone over all registry channels with a sigmoid head.
#[derive(Clone, Debug)]
pub struct MultiUnet {
    pub backbone: ResUnet,
    pub head: Conv3d,
}

impl MultiUnet {
    /// Parameters are named `{prefix}backbone.*` and `{prefix}head.*`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: &BackboneConfig,
        in_channels: usize,
    ) -> Self {
        MultiUnet {
            backbone: ResUnet::new(store, rng, &format!("{prefix}backbone"), cfg, in_channels),
            head: head(store, rng, &format!("{prefix}head"), cfg.width(0)),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: &Tensor<T>,
    ) -> ForwardOutput {
        let x = g.constant(input.clone());
        let feats = self.backbone.forward(g, store, x);
        let logits = self.head.forward(g, store, feats);
        ForwardOutput {
            prob: g.sigmoid(logits),
            attention: Vec::new(),
        }
    }
}

/// Late fusion: shared single-channel backbone per modality, attention
/// fusion of the penultimate embeddings, then the head.
#[derive(Clone, Debug)]
pub struct LfUnet {
    pub modalities: usize,
    pub backbone: ResUnet,
    pub fusion: FusionBlock,
    pub head: Conv3d,
}

impl LfUnet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        cfg: &BackboneConfig,
        modalities: usize,
    ) -> Self {
        LfUnet {
            modalities,
            backbone: ResUnet::new(store, rng, "backbone", cfg, 1),
            fusion: FusionBlock::new(store, rng, "fusion", modalities, cfg.width(0)),
            head: head(store, rng, "head", cfg.width(0)),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: &Tensor<T>,
        absent: Option<&[Vec<bool>]>,
    ) -> ForwardOutput {
        let x = g.constant(per_modality_batch(input));
        let z = self.backbone.forward(g, store, x);
        let z = stack_modalities(g, z, self.modalities);
        let fused = self.fusion.forward(g, store, z, absent);
        let logits = self.head.forward(g, store, fused.features);
        ForwardOutput {
            prob: g.sigmoid(logits),
            attention: vec![fused.attention],
        }
    }
}

/// Multi-scale attention fusion: per-modality encoders, one fusion block
/// per scale, and a single decoder over the fused features.
#[derive(Clone, Debug)]
pub struct MafUnet {
    pub modalities: usize,
    /// One shared encoder, or one per modality.
    pub encoders: Vec<Encoder>,
    pub fusions: Vec<FusionBlock>,
    pub decoder: Decoder,
    pub head: Conv3d,
}

impl MafUnet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        cfg: &BackboneConfig,
        modalities: usize,
        shared: bool,
    ) -> Self {
        let encoders = if shared {
            vec![Encoder::new(store, rng, "encoder", cfg, 1, &[])]
        } else {
            (0..modalities)
                .map(|c| Encoder::new(store, rng, &format!("encoder{c}"), cfg, 1, &[]))
                .collect()
        };
        let fusions = (0..cfg.levels)
            .map(|l| FusionBlock::new(store, rng, &format!("fusion{l}"), modalities, cfg.width(l)))
            .collect();
        MafUnet {
            modalities,
            encoders,
            fusions,
            decoder: Decoder::new(store, rng, "decoder", cfg, &[]),
            head: head(store, rng, "head", cfg.width(0)),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: &Tensor<T>,
        absent: Option<&[Vec<bool>]>,
    ) -> ForwardOutput {
        let stacked: Vec<Var> = if self.encoders.len() == 1 {
            let x = g.constant(per_modality_batch(input));
            self.encoders[0]
                .forward(g, store, x, None, None)
                .into_iter()
                .map(|f| stack_modalities(g, f, self.modalities))
                .collect()
        } else {
            let per: Vec<Vec<Var>> = self
                .encoders
                .iter()
                .enumerate()
                .map(|(c, enc)| {
                    let x = g.constant(select_channel(input, c));
                    enc.forward(g, store, x, None, None)
                })
                .collect();
            (0..self.fusions.len())
                .map(|l| {
                    let parts: Vec<Var> = per.iter().map(|f| f[l]).collect();
                    g.concat(&parts)
                })
                .collect()
        };
        let mut fused = Vec::with_capacity(stacked.len());
        let mut attention = Vec::with_capacity(stacked.len());
        for (block, &z) in self.fusions.iter().zip(&stacked) {
            let f = block.forward(g, store, z, absent);
            fused.push(f.features);
            attention.push(f.attention);
        }
        let feats = self.decoder.forward(g, store, &fused, None, None);
        let logits = self.head.forward(g, store, feats);
        ForwardOutput {
            prob: g.sigmoid(logits),
            attention,
        }
    }
}

/// Two-column progressive network.
///
/// Column 1 is a frozen Multi-Unet; the inputs of each of its down- and
/// upsampling layers pass through a 1x1x1 adapter and are concatenated onto
/// the matching layer inputs of column 2, whose head produces the output.
#[derive(Clone, Debug)]
pub struct Progressive {
    pub column1: MultiUnet,
    pub column1_channels: usize,
    pub adapters_down: Vec<Conv3d>,
    pub adapters_up: Vec<Conv3d>,
    /// Carries the first column's full-resolution features to the head.
    pub adapter_head: Conv3d,
    pub column2: ResUnet,
    pub head: Conv3d,
}

impl Progressive {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        cfg: &BackboneConfig,
        column1_channels: usize,
        in_channels: usize,
    ) -> Self {
        let column1 = MultiUnet::new(store, rng, "column1.", cfg, column1_channels);
        let taps = LateralWidths::taps_of(cfg);
        let k1 = ConvGeometry::new(1, 1, 0);
        let adapters_down = taps
            .down
            .iter()
            .enumerate()
            .map(|(i, &w)| Conv3d::new(store, rng, &format!("lateral.down{i}"), w, w, k1))
            .collect();
        let adapters_up = taps
            .up
            .iter()
            .enumerate()
            .map(|(i, &w)| Conv3d::new(store, rng, &format!("lateral.up{i}"), w, w, k1))
            .collect();
        let adapter_head = Conv3d::new(store, rng, "lateral.head", cfg.width(0), cfg.width(0), k1);
        let column2 =
            ResUnet::with_laterals(store, rng, "column2.backbone", cfg, in_channels, &taps);
        let head = head(store, rng, "column2.head", 2 * cfg.width(0));
        store.set_trainable_prefix("column1.", false);
        // Adapters start closed so the second column begins as a plain
        // network; their gradients still flow because column-1 features are
        // their inputs.
        store.zero_prefix("lateral.");
        Progressive {
            column1,
            column1_channels,
            adapters_down,
            adapters_up,
            adapter_head,
            column2,
            head,
        }
    }

    pub fn lateral_count(&self) -> usize {
        self.adapters_down.len() + self.adapters_up.len() + 1
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: &Tensor<T>,
    ) -> ForwardOutput {
        let x1 = if self.column1_channels == input.shape().channels() {
            input.clone()
        } else {
            select_channels(input, 0..self.column1_channels)
        };
        let x1 = g.constant(x1);
        let (out1, taps) = self.column1.backbone.forward_with_taps(g, store, x1);
        let lateral = Taps {
            down: taps
                .down
                .iter()
                .zip(&self.adapters_down)
                .map(|(&t, a)| a.forward(g, store, t))
                .collect(),
            up: taps
                .up
                .iter()
                .zip(&self.adapters_up)
                .map(|(&t, a)| a.forward(g, store, t))
                .collect(),
        };
        let x2 = g.constant(input.clone());
        let feats = self.column2.forward_lateral(g, store, x2, &lateral);
        let from_column1 = self.adapter_head.forward(g, store, out1);
        let feats = g.concat(&[feats, from_column1]);
        let logits = self.head.forward(g, store, feats);
        ForwardOutput {
            prob: g.sigmoid(logits),
            attention: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Network {
    MultiUnet(MultiUnet),
    LfUnet(LfUnet),
    MafUnet(MafUnet),
    Progressive(Progressive),
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub spec: ModelSpec,
    pub network: Network,
    pub store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Builds the network with parameters initialized from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = substream(seed, DOMAIN_INIT, 0);
        let mut store = ParamStore::new();
        let c = spec.in_channels();
        let cfg = &spec.backbone;
        let network = match spec.family {
            Family::MultiUnet => {
                Network::MultiUnet(MultiUnet::new(&mut store, &mut rng, "", cfg, c))
            }
            Family::LfUnet => Network::LfUnet(LfUnet::new(&mut store, &mut rng, cfg, c)),
            Family::MafUnet => Network::MafUnet(MafUnet::new(
                &mut store,
                &mut rng,
                cfg,
                c,
                spec.shared_encoder,
            )),
            Family::Progressive => Network::Progressive(Progressive::new(
                &mut store,
                &mut rng,
                cfg,
                spec.column1_channels.unwrap_or(c),
                c,
            )),
        };
        Ok(Model {
            spec,
            network,
            store,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.spec.in_channels()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    pub fn check_input(&self, input: &Tensor<T>, presence: &[Vec<bool>]) -> Result<()> {
        let s = input.shape();
        if s.channels() != self.in_channels() {
            return Err(Error::Shape(format!(
                "input has {} channels, model expects {}",
                s.channels(),
                self.in_channels()
            )));
        }
        if presence.len() != s.batch() || presence.iter().any(|p| p.len() != s.channels()) {
            return Err(Error::Shape(format!("presence does not match input {s}")));
        }
        self.spec.backbone.check_spatial(s.spatial())
    }

    /// Records the forward pass for `input` on `g`.
    ///
    /// `presence` is consulted only by fusion families with absent-modality
    /// masking enabled; otherwise absent channels act purely through their
    /// zero values.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        input: &Tensor<T>,
        presence: &[Vec<bool>],
    ) -> Result<ForwardOutput> {
        self.check_input(input, presence)?;
        let absent = self.spec.mask_absent.then(|| absent_of(presence));
        Ok(match &self.network {
            Network::MultiUnet(m) => m.forward(g, &self.store, input),
            Network::LfUnet(m) => m.forward(g, &self.store, input, absent.as_deref()),
            Network::MafUnet(m) => m.forward(g, &self.store, input, absent.as_deref()),
            Network::Progressive(m) => m.forward(g, &self.store, input),
        })
    }

    /// Probability map for `input`.
    pub fn predict(&self, input: &Tensor<T>, presence: &[Vec<bool>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input, presence)?;
        Ok(g.value(out.prob).clone())
    }

    /// Probability map and attention maps for `input`.
    pub fn predict_with_attention(
        &self,
        input: &Tensor<T>,
        presence: &[Vec<bool>],
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input, presence)?;
        let attn = out.attention.iter().map(|&a| g.value(a).clone()).collect();
        Ok((g.value(out.prob).clone(), attn))
    }

    /// Scalar elements held by the recorded graph for one forward pass over
    /// a single all-zero volume of `spatial` extent.
    pub fn activation_footprint(&self, spatial: [usize; 3]) -> Result<usize> {
        let [d, h, w] = spatial;
        let c = self.in_channels();
        let input = Tensor::zeros(Shape::new(1, c, d, h, w));
        let mut g = Graph::new();
        self.forward(&mut g, &input, &[vec![true; c]])?;
        Ok(g.stored_elements())
    }

    pub fn fusion_block_count(&self) -> usize {
        match &self.network {
            Network::LfUnet(_) => 1,
            Network::MafUnet(m) => m.fusions.len(),
            _ => 0,
        }
    }

    pub fn lateral_count(&self) -> usize {
        match &self.network {
            Network::Progressive(p) => p.lateral_count(),
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests;

//! Residual U-Net backbone shared by every architecture family.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeometry, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvNormAct, ConvTranspose3d, ParamStore, ResidualBlock};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Number of resolution scales, including the full-resolution one.
    pub levels: usize,
    /// Feature width at full resolution; doubles at every coarser scale.
    pub base_width: usize,
    /// Residual blocks per encoder and decoder stage.
    #[serde(default = "one")]
    pub blocks_per_level: usize,
}

fn one() -> usize {
    1
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            levels: 4,
            base_width: 16,
            blocks_per_level: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!(
                "backbone needs at least 2 levels, got {}",
                self.levels
            )));
        }
        if self.base_width == 0 || self.blocks_per_level == 0 {
            return Err(Error::Config(
                "backbone widths and block counts must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial extents must be divisible by this factor.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_spatial(&self, spatial: [usize; 3]) -> Result<()> {
        let d = self.divisor();
        if spatial.iter().any(|&s| s == 0 || s % d != 0) {
            return Err(Error::Shape(format!(
                "spatial shape {spatial:?} is not divisible by {d} ({} levels)",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Extra input widths concatenated in front of each resampling layer.
///
/// Used by the trainable column of a progressive network, which receives
/// the frozen column's activations at those positions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LateralWidths {
    /// Per downsampling layer, finest first.
    pub down: Vec<usize>,
    /// Per upsampling layer, in decoding order (coarsest first).
    pub up: Vec<usize>,
}

impl LateralWidths {
    /// Widths of the activations a backbone with `cfg` exposes as taps.
    pub fn taps_of(cfg: &BackboneConfig) -> Self {
        LateralWidths {
            down: (0..cfg.levels - 1).map(|l| cfg.width(l)).collect(),
            up: (0..cfg.levels - 1)
                .rev()
                .map(|l| cfg.width(l + 1))
                .collect(),
        }
    }
}

/// Activations feeding each resampling layer, in [`LateralWidths`] order.
#[derive(Clone, Debug, Default)]
pub struct Taps {
    pub down: Vec<Var>,
    pub up: Vec<Var>,
}

impl Taps {
    pub fn len(&self) -> usize {
        self.down.len() + self.up.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn stage(
    store: &mut ParamStore<impl Real>,
    rng: &mut impl Rng,
    name: &str,
    in_channels: usize,
    out_channels: usize,
    blocks: usize,
) -> Vec<ResidualBlock> {
    (0..blocks)
        .map(|b| {
            let cin = if b == 0 { in_channels } else { out_channels };
            ResidualBlock::new(store, rng, &format!("{name}.{b}"), cin, out_channels)
        })
        .collect()
}

fn run_stage<T: Real>(
    blocks: &[ResidualBlock],
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    mut x: Var,
) -> Var {
    for b in blocks {
        x = b.forward(g, store, x);
    }
    x
}

/// Encoder half: a residual stage per scale joined by stride-2 convolutions.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<Vec<ResidualBlock>>,
    pub downs: Vec<ConvNormAct>,
}

impl Encoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &BackboneConfig,
        in_channels: usize,
        lateral_down: &[usize],
    ) -> Self {
        let mut stages = vec![stage(
            store,
            rng,
            &format!("{name}.enc0"),
            in_channels,
            cfg.width(0),
            cfg.blocks_per_level,
        )];
        let mut downs = Vec::new();
        for l in 1..cfg.levels {
            let extra = lateral_down.get(l - 1).copied().unwrap_or(0);
            downs.push(ConvNormAct::new(
                store,
                rng,
                &format!("{name}.down{}", l - 1),
                cfg.width(l - 1) + extra,
                cfg.width(l),
                ConvGeometry::new(2, 2, 0),
            ));
            stages.push(stage(
                store,
                rng,
                &format!("{name}.enc{l}"),
                cfg.width(l),
                cfg.width(l),
                cfg.blocks_per_level,
            ));
        }
        Encoder { stages, downs }
    }

    /// Features at every scale, finest first; `taps` receives the inputs
    /// of each downsampling layer and `lateral` is concatenated onto them.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        lateral: Option<&[Var]>,
        taps: Option<&mut Vec<Var>>,
    ) -> Vec<Var> {
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut h = run_stage(&self.stages[0], g, store, x);
        let mut taps = taps;
        for (l, down) in self.downs.iter().enumerate() {
            feats.push(h);
            if let Some(t) = taps.as_deref_mut() {
                t.push(h);
            }
            let inp = match lateral {
                Some(lat) => g.concat(&[h, lat[l]]),
                None => h,
            };
            h = down.forward(g, store, inp);
            h = run_stage(&self.stages[l + 1], g, store, h);
        }
        feats.push(h);
        feats
    }
}

/// Decoder half: transposed-convolution upsampling, skip concatenation and
/// a residual stage per scale, ending at full-resolution features.
#[derive(Clone, Debug)]
pub struct Decoder {
    /// Indexed by the level they upsample into (0 = finest).
    pub ups: Vec<ConvTranspose3d>,
    pub stages: Vec<Vec<ResidualBlock>>,
}

impl Decoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &BackboneConfig,
        lateral_up: &[usize],
    ) -> Self {
        let mut ups = Vec::new();
        let mut stages = Vec::new();
        for l in 0..cfg.levels - 1 {
            // Decoding order runs coarsest first.
            let order = cfg.levels - 2 - l;
            let extra = lateral_up.get(order).copied().unwrap_or(0);
            ups.push(ConvTranspose3d::new(
                store,
                rng,
                &format!("{name}.up{l}"),
                cfg.width(l + 1) + extra,
                cfg.width(l),
            ));
            stages.push(stage(
                store,
                rng,
                &format!("{name}.dec{l}"),
                2 * cfg.width(l),
                cfg.width(l),
                cfg.blocks_per_level,
            ));
        }
        Decoder { ups, stages }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        skips: &[Var],
        lateral: Option<&[Var]>,
        taps: Option<&mut Vec<Var>>,
    ) -> Var {
        let levels = skips.len();
        let mut h = skips[levels - 1];
        let mut taps = taps;
        for (order, l) in (0..levels - 1).rev().enumerate() {
            if let Some(t) = taps.as_deref_mut() {
                t.push(h);
            }
            let inp = match lateral {
                Some(lat) => g.concat(&[h, lat[order]]),
                None => h,
            };
            let up = self.ups[l].forward(g, store, inp);
            let cat = g.concat(&[up, skips[l]]);
            h = run_stage(&self.stages[l], g, store, cat);
        }
        h
    }
}

/// Encoder plus decoder, producing full-resolution `base_width` features.
#[derive(Clone, Debug)]
pub struct ResUnet {
    pub config: BackboneConfig,
    pub in_channels: usize,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl ResUnet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &BackboneConfig,
        in_channels: usize,
    ) -> Self {
        Self::with_laterals(
            store,
            rng,
            name,
            cfg,
            in_channels,
            &LateralWidths::default(),
        )
    }

    pub fn with_laterals<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &BackboneConfig,
        in_channels: usize,
        lateral: &LateralWidths,
    ) -> Self {
        ResUnet {
            config: cfg.clone(),
            in_channels,
            encoder: Encoder::new(store, rng, name, cfg, in_channels, &lateral.down),
            decoder: Decoder::new(store, rng, name, cfg, &lateral.up),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let skips = self.encoder.forward(g, store, x, None, None);
        self.decoder.forward(g, store, &skips, None, None)
    }

    /// Forward pass recording the inputs of every resampling layer.
    pub fn forward_with_taps<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> (Var, Taps) {
        let mut taps = Taps::default();
        let skips = self
            .encoder
            .forward(g, store, x, None, Some(&mut taps.down));
        let out = self
            .decoder
            .forward(g, store, &skips, None, Some(&mut taps.up));
        (out, taps)
    }

    /// Forward pass concatenating `lateral` onto each resampling input.
    pub fn forward_lateral<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        lateral: &Taps,
    ) -> Var {
        let skips = self.encoder.forward(g, store, x, Some(&lateral.down), None);
        self.decoder
            .forward(g, store, &skips, Some(&lateral.up), None)
    }
}

//! Channel reassignment for modalities a pretrained model has never seen.
//!
//! A novel target modality first takes over a pretrained channel whose
//! modality the target does not provide (lowest channel first); once those
//! run out, further novel modalities get new input channels whose
//! first-layer filters are randomly initialized.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::registry::ModalityRegistry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRemap {
    /// Registry the weights were trained with.
    pub source: ModalityRegistry,
    /// Registry after reassignment and expansion.
    pub target: ModalityRegistry,
    /// Novel modality -> reused pretrained channel.
    pub reassigned: BTreeMap<String, usize>,
    /// Novel modalities given new channels, in channel order.
    pub expanded: Vec<String>,
}

impl ChannelRemap {
    /// Number of new first-layer input filters.
    pub fn expanded_filters(&self) -> usize {
        self.expanded.len()
    }

    pub fn is_identity(&self) -> bool {
        self.reassigned.is_empty() && self.expanded.is_empty()
    }

    /// Channel of every modality in the target registry.
    pub fn mapping(&self) -> BTreeMap<String, usize> {
        self.target
            .names()
            .iter()
            .enumerate()
            .map(|(c, n)| (n.clone(), c))
            .collect()
    }
}

/// Plans the reassignment of `target_modalities` onto `source`.
pub fn plan_remap<S: AsRef<str>>(
    source: &ModalityRegistry,
    target_modalities: &[S],
) -> Result<ChannelRemap> {
    if target_modalities.is_empty() {
        return Err(Error::Config("target declares no modalities".into()));
    }
    let targets: Vec<&str> = target_modalities.iter().map(|s| s.as_ref()).collect();
    let mut free = (0..source.len()).filter(|&c| !targets.contains(&source.name_of(c).unwrap()));
    let mut names: Vec<String> = source.names().to_vec();
    let mut reassigned = BTreeMap::new();
    let mut expanded = Vec::new();
    for &m in &targets {
        if source.contains(m) || reassigned.contains_key(m) || expanded.iter().any(|e| e == m) {
            continue;
        }
        match free.next() {
            Some(c) => {
                names[c] = m.to_string();
                reassigned.insert(m.to_string(), c);
            }
            None => {
                names.push(m.to_string());
                expanded.push(m.to_string());
            }
        }
    }
    Ok(ChannelRemap {
        source: source.clone(),
        target: ModalityRegistry::from_ordered(&names)?,
        reassigned,
        expanded,
    })
}

/// Rebuilds `model` for the remapped registry.
///
/// Reassigned channels keep the pretrained filters of the channel they take
/// over; expanded channels get fresh filters drawn from `seed`; every other
/// weight is copied unchanged.
pub fn remap_channels<S: AsRef<str>>(
    model: &Model<f32>,
    target_modalities: &[S],
    seed: u64,
) -> Result<(ChannelRemap, Model<f32>)> {
    let remap = plan_remap(&model.spec.registry, target_modalities)?;
    if remap.is_identity() {
        return Ok((remap, model.clone()));
    }
    let mut spec = model.spec.clone();
    spec.registry = remap.target.clone();
    if spec.column1_channels.is_none() && spec.family == crate::models::Family::Progressive {
        spec.column1_channels = Some(remap.source.len());
    }
    let mut out = Model::new(spec, seed)?;
    out.store
        .load_overlapping(&model.store, |n| Some(n.to_string()));
    let frozen: Vec<_> = out
        .store
        .iter()
        .filter(|(_, p)| {
            model
                .store
                .find(&p.name)
                .is_some_and(|i| !model.store.get(i).trainable)
        })
        .map(|(id, _)| id)
        .collect();
    for id in frozen {
        out.store.get_mut(id).trainable = false;
    }
    Ok((remap, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BackboneConfig, Family, ModelSpec};
    use crate::tensor::Shape;

    fn reg(names: &[&str]) -> ModalityRegistry {
        ModalityRegistry::from_ordered(names).unwrap()
    }

    #[test]
    fn novel_modality_takes_unused_channel() {
        let source = reg(&["PD", "FLAIR", "T1", "T1c", "T2", "DWI"]);
        let r = plan_remap(&source, &["FLAIR", "SWI", "T1", "T2"]).unwrap();
        assert_eq!(r.reassigned["SWI"], source.channel_of("PD").unwrap());
        assert_eq!(r.expanded_filters(), 0);
        assert_eq!(r.target.channel_of("SWI").unwrap(), 0);
        assert_eq!(r.target.len(), 6);
    }

    #[test]
    fn known_modalities_map_to_identity() {
        let source = reg(&["FLAIR", "T1", "T2"]);
        let r = plan_remap(&source, &["T2", "FLAIR"]).unwrap();
        assert!(r.is_identity());
        assert_eq!(r.target, source);
    }

    #[test]
    fn surplus_modalities_are_expanded() {
        let source = reg(&["FLAIR", "T1", "T2"]);
        let r = plan_remap(&source, &["FLAIR", "T1", "SWI", "DWI", "PD"]).unwrap();
        assert_eq!(r.reassigned.len(), 1);
        assert_eq!(r.reassigned["SWI"], 2);
        assert_eq!(r.expanded, ["DWI", "PD"]);
        assert_eq!(r.expanded_filters(), 2);
        assert_eq!(r.target.names(), ["FLAIR", "T1", "SWI", "DWI", "PD"]);
        // Injective: every target modality has its own channel.
        let m = r.mapping();
        let mut chans: Vec<_> = m.values().collect();
        chans.dedup();
        assert_eq!(chans.len(), 5);
    }

    #[test]
    fn weights_follow_the_remap() {
        let cfg = BackboneConfig {
            levels: 2,
            base_width: 2,
            blocks_per_level: 1,
        };
        let model = Model::<f32>::new(
            ModelSpec::new(Family::MultiUnet, cfg, reg(&["PD", "T1"])),
            1,
        )
        .unwrap();
        let (remap, out) = remap_channels(&model, &["SWI", "T1", "DWI"], 2).unwrap();
        assert_eq!(remap.reassigned["SWI"], 0);
        assert_eq!(remap.expanded, ["DWI"]);
        let name = "backbone.enc0.0.conv1.weight";
        let before = &model.store.get(model.store.find(name).unwrap()).value;
        let after = &out.store.get(out.store.find(name).unwrap()).value;
        assert_eq!(after.shape(), Shape::new(2, 3, 3, 3, 3));
        for o in 0..2 {
            for c in 0..2 {
                let k = 27;
                let b = &before.data()[(o * 2 + c) * k..][..k];
                let a = &after.data()[(o * 3 + c) * k..][..k];
                assert_eq!(a, b);
            }
        }
        let head = "head.weight";
        assert_eq!(
            model.store.get(model.store.find(head).unwrap()).value,
            out.store.get(out.store.find(head).unwrap()).value
        );
    }
}

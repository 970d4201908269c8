//! Adapting a pretrained model to a new database.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::remap::{plan_remap, remap_channels, ChannelRemap};
use crate::dataset::{CaseRecord, DatabaseManifest, Split};
use crate::error::{Error, Result};
use crate::models::{Family, Model, ModelSpec};
use crate::rng::{substream, DOMAIN_BUDGET};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Fresh weights, same architecture.
    Scratch,
    /// All pretrained weights, input channels remapped to the target.
    Finetune,
    /// Pretrained Multi-Unet frozen as the first column of a progressive net.
    Progressive,
}

impl FinetuneMode {
    pub const ALL: [FinetuneMode; 3] = [
        FinetuneMode::Scratch,
        FinetuneMode::Finetune,
        FinetuneMode::Progressive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneMode::Scratch => "scratch",
            FinetuneMode::Finetune => "finetune",
            FinetuneMode::Progressive => "progressive",
        }
    }
}

impl std::fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FinetuneMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fine-tuning mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    /// Number of target training cases to use; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
}

/// Restricts the train split of `db` to `budget` cases chosen by a seeded
/// shuffle. The same seed always selects the same cases, and smaller budgets
/// select prefixes of larger ones. Non-train cases are kept.
pub fn select_budget(
    db: &DatabaseManifest,
    budget: Option<usize>,
    seed: u64,
) -> Result<DatabaseManifest> {
    let Some(k) = budget else {
        return Ok(db.clone());
    };
    let mut train: Vec<&CaseRecord> = db.cases_in(Split::Train).collect();
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!(
            "budget {k} is outside 1..={} train cases of `{}`",
            train.len(),
            db.database_id
        )));
    }
    train.shuffle(&mut substream(seed, DOMAIN_BUDGET, 0));
    let keep: std::collections::BTreeSet<&str> =
        train[..k].iter().map(|c| c.case_id.as_str()).collect();
    let mut out = db.clone();
    out.cases
        .retain(|c| c.split != Split::Train || keep.contains(c.case_id.as_str()));
    Ok(out)
}

/// Builds the model to fine-tune on a database with `target_modalities`.
///
/// * `Scratch`: the pretrained architecture with fresh weights over the
///   remapped registry.
/// * `Finetune`: pretrained weights with the input layer remapped.
/// * `Progressive`: the pretrained Multi-Unet becomes a frozen first column
///   over its original channels; the second column and lateral adapters are
///   freshly initialised.
pub fn prepare_finetune<S: AsRef<str>>(
    source: &Model<f32>,
    target_modalities: &[S],
    mode: FinetuneMode,
    seed: u64,
) -> Result<(ChannelRemap, Model<f32>)> {
    match mode {
        FinetuneMode::Finetune => remap_channels(source, target_modalities, seed),
        FinetuneMode::Scratch => {
            let remap = plan_remap(&source.spec.registry, target_modalities)?;
            let mut spec = source.spec.clone();
            spec.registry = remap.target.clone();
            if spec.family == Family::Progressive && spec.column1_channels.is_some() {
                spec.column1_channels = spec.column1_channels.map(|c| c.min(remap.target.len()));
            }
            Ok((remap, Model::new(spec, seed)?))
        }
        FinetuneMode::Progressive => {
            if source.spec.family != Family::MultiUnet {
                return Err(Error::Config(format!(
                    "progressive fine-tuning needs a multi_unet source, got {}",
                    source.spec.family
                )));
            }
            let remap = plan_remap(&source.spec.registry, target_modalities)?;
            let mut spec = ModelSpec::new(
                Family::Progressive,
                source.spec.backbone.clone(),
                remap.target.clone(),
            );
            spec.column1_channels = Some(source.spec.in_channels());
            let mut model = Model::new(spec, seed)?;
            let stats = model.store.load_overlapping(&source.store, |n| {
                n.strip_prefix("column1.").map(str::to_string)
            });
            let column1 = model
                .store
                .iter()
                .filter(|(_, p)| p.name.starts_with("column1."))
                .count();
            if stats.exact != column1 || stats.partial != 0 {
                return Err(Error::Checkpoint(format!(
                    "source weights fill {} of {column1} first-column tensors",
                    stats.exact
                )));
            }
            Ok((remap, model))
        }
    }
}

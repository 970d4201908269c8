//! Joint multi-database training, fine-tuning and checkpointing.

pub mod checkpoint;
pub mod finetune;
pub mod optim;
pub mod remap;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::Checkpoint;
pub use finetune::{prepare_finetune, select_budget, FinetuneConfig, FinetuneMode};
pub use optim::{Adam, AdamConfig};
pub use remap::{plan_remap, remap_channels, ChannelRemap};

use crate::autograd::kernels::{dice_bce_forward, DiceBceTerms};
use crate::autograd::Graph;
use crate::dataset::{load_split, CaseRecord, CaseSample, DatabaseManifest, LoadOptions, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Confusion};
use crate::models::Model;
use crate::registry::ModalityRegistry;
use crate::sampler::Sampler;
use crate::tensor::{Real, Shape, Tensor};

/// The only supported objective: soft Dice plus binary cross-entropy,
/// equally weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpec {
    #[default]
    DiceBce,
}

/// Soft-Dice and cross-entropy terms of the training loss for a batch of
/// probability maps.
pub fn loss_terms<T: Real>(pred: &Tensor<T>, label: &Tensor<T>) -> Result<DiceBceTerms> {
    if pred.shape() != label.shape() {
        return Err(Error::Shape(format!(
            "prediction {} does not match label {}",
            pred.shape(),
            label.shape()
        )));
    }
    Ok(dice_bce_forward(pred, label))
}

/// Total loss: soft Dice plus cross-entropy.
pub fn loss<T: Real>(pred: &Tensor<T>, label: &Tensor<T>) -> Result<f64> {
    let t = loss_terms(pred, label)?;
    Ok(t.dice + t.bce)
}

fn default_batch_size() -> usize {
    2
}
fn default_epochs() -> usize {
    600
}
fn default_lr_initial() -> f64 {
    1e-3
}
fn default_lr_after_decay() -> f64 {
    1e-4
}
fn default_decay_epoch() -> usize {
    150
}
fn default_val_every() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr_initial")]
    pub lr_initial: f64,
    #[serde(default = "default_lr_after_decay")]
    pub lr_after_decay: f64,
    /// Last epoch trained at `lr_initial`.
    #[serde(default = "default_decay_epoch")]
    pub decay_epoch: usize,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    /// Stop after this many optimizer steps, even mid-epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    /// Validate on the eval split every this many epochs.
    #[serde(default = "default_val_every")]
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            lr_initial: default_lr_initial(),
            lr_after_decay: default_lr_after_decay(),
            decay_epoch: default_decay_epoch(),
            loss: LossSpec::DiceBce,
            optimizer: AdamConfig::default(),
            seed: 0,
            max_steps: None,
            val_every: default_val_every(),
        }
    }
}

impl TrainConfig {
    /// Learning rate for a 1-based epoch.
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch <= self.decay_epoch {
            self.lr_initial
        } else {
            self.lr_after_decay
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.val_every == 0 {
            return Err(Error::Config(
                "batch_size, epochs and val_every must be positive".into(),
            ));
        }
        if !(self.lr_initial > 0.0 && self.lr_after_decay > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 of a configuration text.
pub fn config_hash(text: &str) -> String {
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

/// Preprocessed training cases, indexed by database and case id.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub databases: Vec<DatabaseManifest>,
    cases: BTreeMap<(String, String), CaseSample>,
}

impl TrainingSet {
    /// Loads every train case of `databases`.
    pub fn load(
        databases: &[DatabaseManifest],
        root: &Path,
        registry: &ModalityRegistry,
        opts: &LoadOptions,
    ) -> Result<Self> {
        let samples = load_split(databases, root, Split::Train, registry, opts)?;
        Self::new(databases.to_vec(), samples)
    }

    pub fn new(databases: Vec<DatabaseManifest>, samples: Vec<CaseSample>) -> Result<Self> {
        let mut cases = BTreeMap::new();
        for s in samples {
            s.check_invariants()?;
            cases.insert((s.database_id.clone(), s.case_id.clone()), s);
        }
        for db in &databases {
            for c in db.cases_in(Split::Train) {
                if !cases.contains_key(&(db.database_id.clone(), c.case_id.clone())) {
                    return Err(Error::Data(format!(
                        "train case `{}` of `{}` was not loaded",
                        c.case_id, db.database_id
                    )));
                }
            }
        }
        Ok(TrainingSet { databases, cases })
    }

    /// Builds manifests directly from in-memory samples (all train split).
    pub fn from_samples(samples: Vec<CaseSample>, registry: &ModalityRegistry) -> Result<Self> {
        let mut dbs: Vec<DatabaseManifest> = Vec::new();
        for s in &samples {
            let mods: Vec<String> = s
                .present_channels()
                .iter()
                .map(|&c| registry.name_of(c).unwrap_or("?").to_string())
                .collect();
            match dbs.iter_mut().find(|d| d.database_id == s.database_id) {
                Some(db) => db
                    .cases
                    .push(CaseRecord::new(s.case_id.clone(), Split::Train)),
                None => dbs.push(DatabaseManifest {
                    database_id: s.database_id.clone(),
                    modalities: mods,
                    cases: vec![CaseRecord::new(s.case_id.clone(), Split::Train)],
                }),
            }
        }
        Self::new(dbs, samples)
    }

    pub fn get(&self, database_id: &str, case_id: &str) -> Result<&CaseSample> {
        self.cases
            .get(&(database_id.to_string(), case_id.to_string()))
            .ok_or_else(|| {
                Error::Data(format!("case `{case_id}` of `{database_id}` is not loaded"))
            })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}

/// Progress of one optimizer step, passed to the training hook.
#[derive(Clone, Debug)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Sum of squared gradients reaching frozen parameters.
    pub frozen_grad_sq: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub lr: f64,
    /// Running Dice of the training predictions per database.
    pub dice: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_dice: Option<f64>,
}

/// Where and how a run persists its artifacts.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub config_hash: String,
    pub provenance: BTreeMap<String, String>,
    pub remap: Option<ChannelRemap>,
}

impl RunOutput {
    pub const LOG_FILE: &'static str = "train_log.jsonl";
    pub const LAST: &'static str = "last.ckpt";
    pub const BEST: &'static str = "best.ckpt";

    pub fn new(dir: impl Into<PathBuf>, config_hash: String) -> Self {
        RunOutput {
            dir: dir.into(),
            config_hash,
            provenance: BTreeMap::new(),
            remap: None,
        }
    }

    fn checkpoint(
        &self,
        model: &Model<f32>,
        epoch: usize,
        step: usize,
        seed: u64,
        val: Option<f64>,
    ) -> Checkpoint {
        let mut ck = Checkpoint::new(model.clone(), epoch, step, self.config_hash.clone(), seed);
        ck.meta.validation_dice = val;
        ck.meta.remap = self.remap.clone();
        ck.meta.provenance = self.provenance.clone();
        ck
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub steps: usize,
    pub epochs_completed: usize,
    pub stopped_early: bool,
    /// Best validation Dice and the epoch it was reached.
    pub best: Option<(usize, f64)>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

/// Stacks augmented samples into a batch, zero-padding every item to a
/// common extent divisible by `div`.
pub fn assemble_batch(
    samples: &[CaseSample],
    div: usize,
) -> (Tensor<f32>, Tensor<f32>, Vec<Vec<bool>>) {
    let mut target = [0usize; 3];
    for s in samples {
        for (t, d) in target.iter_mut().zip(s.spatial()) {
            *t = (*t).max(d.div_ceil(div) * div);
        }
    }
    let vols: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| s.volume.pad_spatial(target))
        .collect();
    let labels: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| s.label.pad_spatial(target))
        .collect();
    let presence = samples.iter().map(|s| s.presence.clone()).collect();
    (
        Tensor::stack(&vols.iter().collect::<Vec<_>>()),
        Tensor::stack(&labels.iter().collect::<Vec<_>>()),
        presence,
    )
}

/// Runs training.
///
/// Each epoch draws the oversampled plan, augments every draw (patch, then
/// modality drop) and takes one Adam step per batch. `hook` sees every step
/// and may stop training early. With `output`, a JSONL log, the last
/// checkpoint and the best-validation checkpoint are written there.
pub fn train(
    model: &mut Model<f32>,
    data: &TrainingSet,
    eval: &[CaseSample],
    config: &TrainConfig,
    sampler: &Sampler,
    output: Option<&RunOutput>,
    hook: &mut dyn FnMut(&StepInfo, &Model<f32>) -> Control,
) -> Result<TrainSummary> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no training cases".into()));
    }
    let registry = model.spec.registry.clone();
    let mut log = match output {
        Some(out) => {
            std::fs::create_dir_all(&out.dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                out.dir.join(RunOutput::LOG_FILE),
            )?))
        }
        None => None,
    };
    let div = model.spec.backbone.divisor();
    let mut adam = Adam::new(config.optimizer);
    let mut summary = TrainSummary {
        history: Vec::new(),
        steps: 0,
        epochs_completed: 0,
        stopped_early: false,
        best: None,
        last_checkpoint: None,
        best_checkpoint: None,
    };
    let mut step = 0usize;
    'epochs: for epoch in 1..=config.epochs {
        let lr = config.lr(epoch);
        let plan = sampler.plan(&data.databases, epoch)?;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut dice_acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut stop = false;
        for (b, chunk) in plan.draws.chunks(config.batch_size).enumerate() {
            let samples = chunk
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let s = data.get(&d.database_id, &d.case_id)?;
                    sampler.augment(s, epoch, b * config.batch_size + i)
                })
                .collect::<Result<Vec<_>>>()?;
            let (input, label, presence) = assemble_batch(&samples, div);

            let mut g = Graph::new();
            let out = model.forward(&mut g, &input, &presence)?;
            let root = g.dice_bce(out.prob, label.clone());
            let loss = g.value(root).data()[0] as f64;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            let grads = g.backward(root).into_param_grads();
            let prob = g.value(out.prob);
            for (n, s) in samples.iter().enumerate() {
                let pred: Vec<bool> = prob
                    .item(n)
                    .iter()
                    .map(|&p| p >= crate::metrics::THRESHOLD)
                    .collect();
                let gt: Vec<bool> = label.item(n).iter().map(|&v| v > 0.5).collect();
                let e = dice_acc.entry(s.database_id.clone()).or_insert((0.0, 0));
                e.0 += Confusion::of(&pred, &gt)?.dice();
                e.1 += 1;
            }
            drop(g);

            let frozen_grad_sq = grads
                .iter()
                .filter(|(id, _)| !model.store.get(*id).trainable)
                .map(|(_, t)| t.sum_sq())
                .fold(0.0, |a, b| a + b);
            adam.step(&mut model.store, &grads, lr);
            loss_sum += loss;
            batches += 1;

            let info = StepInfo {
                epoch,
                step,
                loss,
                lr,
                frozen_grad_sq,
            };
            if hook(&info, model) == Control::Stop {
                summary.stopped_early = true;
                stop = true;
            }
            if config.max_steps.is_some_and(|m| step >= m) {
                stop = true;
            }
            if stop {
                break;
            }
        }

        let val_dice =
            if !eval.is_empty() && (epoch % config.val_every == 0 || epoch == config.epochs) {
                Some(evaluate(model, eval, &registry, None)?.overall.dice)
            } else {
                None
            };
        let record = EpochRecord {
            epoch,
            steps: batches,
            loss: if batches > 0 {
                loss_sum / batches as f64
            } else {
                0.0
            },
            lr,
            dice: dice_acc
                .into_iter()
                .map(|(k, (s, n))| (k, s / n as f64))
                .collect(),
            val_dice,
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        summary.history.push(record);
        summary.epochs_completed = epoch;
        if let Some(v) = val_dice {
            if summary.best.is_none_or(|(_, b)| v > b) {
                summary.best = Some((epoch, v));
                if let Some(out) = output {
                    let path = out.dir.join(RunOutput::BEST);
                    out.checkpoint(model, epoch, step, config.seed, Some(v))
                        .save(&path)?;
                    summary.best_checkpoint = Some(path);
                }
            }
        }
        if stop {
            break 'epochs;
        }
    }
    summary.steps = step;
    if let Some(out) = output {
        let path = out.dir.join(RunOutput::LAST);
        let val = summary.history.last().and_then(|r| r.val_dice);
        out.checkpoint(model, summary.epochs_completed, step, config.seed, val)
            .save(&path)?;
        summary.last_checkpoint = Some(path);
    }
    Ok(summary)
}

/// Runs [`train`] without a hook.
pub fn train_simple(
    model: &mut Model<f32>,
    data: &TrainingSet,
    eval: &[CaseSample],
    config: &TrainConfig,
    sampler: &Sampler,
    output: Option<&RunOutput>,
) -> Result<TrainSummary> {
    train(model, data, eval, config, sampler, output, &mut |_, _| {
        Control::Continue
    })
}

/// Identity batch of one sample, for callers that predict outside [`train`].
pub fn single_batch(sample: &CaseSample) -> (Tensor<f32>, Vec<Vec<bool>>) {
    let s: Shape = sample.volume.shape();
    debug_assert_eq!(s.batch(), 1);
    (sample.volume.clone(), vec![sample.presence.clone()])
}

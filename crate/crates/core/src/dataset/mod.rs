//! Case loading, preprocessing and synthetic data generation.

pub mod manifest;
pub mod nifti_io;
pub mod preprocess;
pub mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use manifest::{CaseRecord, DatabaseManifest, Manifest, Split, MANIFEST_FILE};
pub use nifti_io::Volume;
pub use preprocess::{zscore, NormMask};

use crate::error::{Error, Result};
use crate::registry::ModalityRegistry;
use crate::tensor::{Shape, Tensor};
use preprocess::{merge_labels, normalize_volume, resample, Interpolation};

/// One subject in registry channel order.
///
/// `volume` is `[1, C, D, H, W]`; channels whose `presence` entry is false
/// are exactly zero. `label` is `[1, 1, D, H, W]` with values in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseSample {
    pub database_id: String,
    pub case_id: String,
    pub volume: Tensor<f32>,
    pub presence: Vec<bool>,
    pub label: Tensor<f32>,
    pub spacing: [f64; 3],
}

impl CaseSample {
    pub fn spatial(&self) -> [usize; 3] {
        self.volume.shape().spatial()
    }

    pub fn channels(&self) -> usize {
        self.presence.len()
    }

    pub fn present_channels(&self) -> Vec<usize> {
        (0..self.presence.len())
            .filter(|&c| self.presence[c])
            .collect()
    }

    pub fn present_count(&self) -> usize {
        self.presence.iter().filter(|&&p| p).count()
    }

    /// Zero-fills a channel and marks it absent.
    pub fn zero_channel(&mut self, c: usize) {
        self.volume.channel_mut(0, c).fill(0.0);
        self.presence[c] = false;
    }

    /// Copy keeping only `channels`; every other channel becomes absent.
    pub fn restrict_to(&self, channels: &[usize]) -> CaseSample {
        let mut out = self.clone();
        for c in 0..out.presence.len() {
            if !channels.contains(&c) {
                out.zero_channel(c);
            }
        }
        out
    }

    /// Like [`CaseSample::restrict_to`] but by modality name; every
    /// requested modality must be present in this case.
    pub fn restrict_to_modalities<S: AsRef<str>>(
        &self,
        names: &[S],
        registry: &ModalityRegistry,
    ) -> Result<CaseSample> {
        let chans = registry.channels_of(names)?;
        for (c, n) in chans.iter().zip(names) {
            if !self.presence[*c] {
                return Err(Error::Data(format!(
                    "modality `{}` is not available for case `{}` of `{}`",
                    n.as_ref(),
                    self.case_id,
                    self.database_id
                )));
            }
        }
        Ok(self.restrict_to(&chans))
    }

    pub fn label_mask(&self) -> Vec<bool> {
        self.label.data().iter().map(|&v| v > 0.5).collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let vs = self.volume.shape();
        if vs.batch() != 1 || vs.channels() != self.presence.len() {
            return Err(Error::Shape(format!(
                "volume {vs} does not match {} presence entries",
                self.presence.len()
            )));
        }
        if self.label.shape() != vs.with_channels(1) {
            return Err(Error::Shape(format!(
                "label {} does not match volume {vs}",
                self.label.shape()
            )));
        }
        for c in 0..self.presence.len() {
            if !self.presence[c] && self.volume.channel(0, c).iter().any(|&v| v != 0.0) {
                return Err(Error::Data(format!(
                    "absent channel {c} is not zero-filled"
                )));
            }
        }
        if self.label.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("label is not binary".into()));
        }
        Ok(())
    }
}

/// Preprocessing options applied by [`load_case`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    #[serde(default)]
    pub norm_mask: NormMask,
    /// Voxel spacing to resample onto; `None` keeps the source grid.
    #[serde(default = "default_spacing")]
    pub target_spacing: Option<[f64; 3]>,
}

fn default_spacing() -> Option<[f64; 3]> {
    Some([1.0; 3])
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            norm_mask: NormMask::Nonzero,
            target_spacing: default_spacing(),
        }
    }
}

/// Unprocessed images of one case, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCase {
    pub database_id: String,
    pub case_id: String,
    pub modalities: Vec<(String, Volume)>,
    pub label: Volume,
}

pub fn read_raw_case(db: &DatabaseManifest, root: &Path, case_id: &str) -> Result<RawCase> {
    let case = db.case(case_id)?;
    let mut modalities = Vec::new();
    for m in db.case_modalities(case) {
        let vol = nifti_io::read_volume(&db.volume_path(root, case, m))?;
        modalities.push((m.clone(), vol));
    }
    let label = nifti_io::read_volume(&db.label_path(root, case))?;
    Ok(RawCase {
        database_id: db.database_id.clone(),
        case_id: case_id.to_string(),
        modalities,
        label,
    })
}

/// Resamples, z-scores and places each modality at its registry channel.
pub fn preprocess(
    raw: &RawCase,
    registry: &ModalityRegistry,
    opts: &LoadOptions,
) -> Result<CaseSample> {
    if raw.modalities.is_empty() {
        return Err(Error::Data(format!("case `{}` has no images", raw.case_id)));
    }
    let target = |v: &Volume| opts.target_spacing.unwrap_or(v.spacing);
    let label = resample(&raw.label, target(&raw.label), Interpolation::Nearest);
    let shape = label.shape;
    let c = registry.len();
    let mut volume = Tensor::zeros(Shape::new(1, c, shape[0], shape[1], shape[2]));
    let mut presence = vec![false; c];
    for (name, vol) in &raw.modalities {
        let ch = registry.channel_of(name)?;
        let vol = resample(vol, target(vol), Interpolation::Trilinear);
        if vol.shape != shape {
            return Err(Error::Shape(format!(
                "case `{}`: modality {name} has shape {:?}, label has {:?}",
                raw.case_id, vol.shape, shape
            )));
        }
        let normed = normalize_volume(&vol.data, opts.norm_mask).map_err(|e| match e {
            Error::ZeroVariance => Error::Data(format!(
                "case `{}`: modality {name} has zero variance",
                raw.case_id
            )),
            other => other,
        })?;
        volume.channel_mut(0, ch).copy_from_slice(&normed);
        presence[ch] = true;
    }
    let label = Tensor::from_vec(
        Shape::new(1, 1, shape[0], shape[1], shape[2]),
        merge_labels(&label.data),
    );
    Ok(CaseSample {
        database_id: raw.database_id.clone(),
        case_id: raw.case_id.clone(),
        volume,
        presence,
        label,
        spacing: label_spacing(&raw.label, opts),
    })
}

fn label_spacing(label: &Volume, opts: &LoadOptions) -> [f64; 3] {
    opts.target_spacing.unwrap_or(label.spacing)
}

/// Reads and preprocesses one case of a database.
pub fn load_case(
    db: &DatabaseManifest,
    root: &Path,
    case_id: &str,
    registry: &ModalityRegistry,
    opts: &LoadOptions,
) -> Result<CaseSample> {
    let raw = read_raw_case(db, root, case_id)?;
    preprocess(&raw, registry, opts)
}

/// Loads every case of `split` from each database.
pub fn load_split(
    dbs: &[DatabaseManifest],
    root: &Path,
    split: Split,
    registry: &ModalityRegistry,
    opts: &LoadOptions,
) -> Result<Vec<CaseSample>> {
    let mut out = Vec::new();
    for db in dbs {
        for case in db.cases_in(split) {
            out.push(load_case(db, root, &case.case_id, registry, opts)?);
        }
    }
    Ok(out)
}

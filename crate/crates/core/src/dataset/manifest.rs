//! Dataset manifests: which databases exist, which modalities each one
//! provides, and how its cases are split.
//!
//! On disk a manifest is a TOML file at the data root:
//!
//! ```toml
//! [[databases]]
//! database_id = "BRATS"
//! modalities = ["FLAIR", "T1", "T1c", "T2"]
//!
//! [[databases.cases]]
//! case_id = "case000"
//! split = "train"
//! ```
//!
//! Volumes live at `<root>/<database_id>/<case_id>/<MODALITY>.nii.gz` with
//! the label at `label.nii.gz`, unless a case lists explicit `files`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{normalize_modality_name, ModalitySet};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const LABEL_FILE: &str = "label.nii.gz";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub split: Split,
    /// Subset of the database modalities available for this case
    /// (eval cases only); absent means all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modalities: Option<Vec<String>>,
    /// Per-modality paths relative to the data root, overriding the layout.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub files: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

impl CaseRecord {
    pub fn new(case_id: impl Into<String>, split: Split) -> Self {
        CaseRecord {
            case_id: case_id.into(),
            split,
            modalities: None,
            files: BTreeMap::new(),
            label: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatabaseManifest {
    pub database_id: String,
    pub modalities: Vec<String>,
    #[serde(default)]
    pub cases: Vec<CaseRecord>,
}

impl DatabaseManifest {
    pub fn modality_set(&self) -> Result<ModalitySet> {
        ModalitySet::new(self.database_id.clone(), &self.modalities)
    }

    pub fn cases_in(&self, split: Split) -> impl Iterator<Item = &CaseRecord> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn train_count(&self) -> usize {
        self.cases_in(Split::Train).count()
    }

    pub fn case(&self, case_id: &str) -> Result<&CaseRecord> {
        self.cases
            .iter()
            .find(|c| c.case_id == case_id)
            .ok_or_else(|| {
                Error::Data(format!(
                    "case `{case_id}` not found in database `{}`",
                    self.database_id
                ))
            })
    }

    /// Modalities available for a case.
    pub fn case_modalities<'a>(&'a self, case: &'a CaseRecord) -> &'a [String] {
        case.modalities.as_deref().unwrap_or(&self.modalities)
    }

    pub fn volume_path(&self, root: &Path, case: &CaseRecord, modality: &str) -> PathBuf {
        match case.files.get(modality) {
            Some(p) => root.join(p),
            None => root
                .join(&self.database_id)
                .join(&case.case_id)
                .join(format!("{modality}.nii.gz")),
        }
    }

    pub fn label_path(&self, root: &Path, case: &CaseRecord) -> PathBuf {
        match &case.label {
            Some(p) => root.join(p),
            None => root
                .join(&self.database_id)
                .join(&case.case_id)
                .join(LABEL_FILE),
        }
    }

    /// Applies the modality spelling table to every name.
    pub fn normalize_names(&mut self) {
        for m in &mut self.modalities {
            *m = normalize_modality_name(m);
        }
        for c in &mut self.cases {
            if let Some(ms) = &mut c.modalities {
                for m in ms.iter_mut() {
                    *m = normalize_modality_name(m);
                }
            }
            c.files = std::mem::take(&mut c.files)
                .into_iter()
                .map(|(k, v)| (normalize_modality_name(&k), v))
                .collect();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.modality_set()?;
        let mut ids = BTreeSet::new();
        for c in &self.cases {
            if !ids.insert(&c.case_id) {
                return Err(Error::Data(format!(
                    "duplicate case `{}` in database `{}`",
                    c.case_id, self.database_id
                )));
            }
            if let Some(sub) = &c.modalities {
                if c.split == Split::Train && sub.len() != self.modalities.len() {
                    return Err(Error::Data(format!(
                        "train case `{}` of `{}` must provide every declared modality",
                        c.case_id, self.database_id
                    )));
                }
                if sub.is_empty() {
                    return Err(Error::Data(format!(
                        "case `{}` lists no modalities",
                        c.case_id
                    )));
                }
                for m in sub {
                    if !self.modalities.contains(m) {
                        return Err(Error::Data(format!(
                            "case `{}` lists modality `{m}` not declared by `{}`",
                            c.case_id, self.database_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// All databases available under one data root.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub databases: Vec<DatabaseManifest>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut m: Manifest = toml::from_str(&text)?;
        for db in &mut m.databases {
            db.normalize_names();
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for db in &self.databases {
            if !ids.insert(&db.database_id) {
                return Err(Error::Data(format!(
                    "duplicate database `{}`",
                    db.database_id
                )));
            }
            db.validate()?;
        }
        Ok(())
    }

    pub fn database(&self, id: &str) -> Result<&DatabaseManifest> {
        self.databases
            .iter()
            .find(|d| d.database_id == id)
            .ok_or_else(|| Error::Config(format!("unknown database `{id}`")))
    }

    /// The named databases, or all of them when `ids` is empty.
    pub fn select(&self, ids: &[String]) -> Result<Vec<DatabaseManifest>> {
        if ids.is_empty() {
            return Ok(self.databases.clone());
        }
        ids.iter().map(|id| self.database(id).cloned()).collect()
    }

    pub fn modality_sets(&self) -> Result<Vec<ModalitySet>> {
        self.databases.iter().map(|d| d.modality_set()).collect()
    }
}

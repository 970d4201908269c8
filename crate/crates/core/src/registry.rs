//! Global modality vocabulary and its mapping onto input channels.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical channel order for the well-known MRI contrasts.
pub const CANONICAL_MODALITIES: [&str; 7] = ["PD", "FLAIR", "SWI", "T1", "T1c", "T2", "DWI"];

/// Ordered, duplicate-free list of modality names. A modality's position is
/// its input channel in every model built from this registry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ModalityRegistry {
    modalities: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ModalityRegistry {
    /// Registry with exactly this channel order.
    pub fn from_ordered<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("modality registry must not be empty".into()));
        }
        let mut index = HashMap::new();
        let mut modalities = Vec::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            let n = n.as_ref().to_string();
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Config(format!(
                    "duplicate modality `{n}` in registry"
                )));
            }
            modalities.push(n);
        }
        Ok(ModalityRegistry { modalities, index })
    }

    /// The seven well-known modalities in canonical order.
    pub fn canonical() -> Self {
        Self::from_ordered(&CANONICAL_MODALITIES).expect("canonical registry is valid")
    }

    pub fn len(&self) -> usize {
        self.modalities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modalities.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.modalities
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn channel_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    pub fn name_of(&self, channel: usize) -> Option<&str> {
        self.modalities.get(channel).map(String::as_str)
    }

    /// Channel indices of `names`, in the order given.
    pub fn channels_of<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.channel_of(n.as_ref())).collect()
    }

    /// Presence mask of length `len()` with `true` at the channels of `names`.
    pub fn presence<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.len()];
        for c in self.channels_of(names)? {
            mask[c] = true;
        }
        Ok(mask)
    }
}

impl TryFrom<Vec<String>> for ModalityRegistry {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::from_ordered(&v)
    }
}

impl From<ModalityRegistry> for Vec<String> {
    fn from(r: ModalityRegistry) -> Self {
        r.modalities
    }
}

/// The modalities one database provides.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySet {
    pub database_id: String,
    pub present: Vec<String>,
}

impl ModalitySet {
    pub fn new<S: AsRef<str>>(database_id: impl Into<String>, present: &[S]) -> Result<Self> {
        let database_id = database_id.into();
        if present.is_empty() {
            return Err(Error::Config(format!(
                "database `{database_id}` declares no modalities"
            )));
        }
        let mut seen = BTreeSet::new();
        for m in present {
            if !seen.insert(m.as_ref()) {
                return Err(Error::Config(format!(
                    "database `{database_id}` declares modality `{}` twice",
                    m.as_ref()
                )));
            }
        }
        Ok(ModalitySet {
            database_id,
            present: present.iter().map(|s| s.as_ref().to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.present.iter().any(|m| m == name)
    }

    /// Checks every modality is known to `registry`.
    pub fn validate(&self, registry: &ModalityRegistry) -> Result<()> {
        for m in &self.present {
            registry.channel_of(m)?;
        }
        Ok(())
    }
}

/// Builds the channel union of several modality sets.
///
/// Canonical modalities come first in canonical order; any other names
/// follow in order of first appearance.
pub fn build_registry(sets: &[ModalitySet]) -> Result<ModalityRegistry> {
    if sets.is_empty() {
        return Err(Error::Config(
            "no databases given to build the registry".into(),
        ));
    }
    let mut union: Vec<&str> = Vec::new();
    for set in sets {
        if set.is_empty() {
            return Err(Error::Config(format!(
                "database `{}` declares no modalities",
                set.database_id
            )));
        }
        for m in &set.present {
            if !union.contains(&m.as_str()) {
                union.push(m);
            }
        }
    }
    let mut ordered: Vec<&str> = CANONICAL_MODALITIES
        .iter()
        .copied()
        .filter(|c| union.contains(c))
        .collect();
    ordered.extend(
        union
            .iter()
            .copied()
            .filter(|m| !CANONICAL_MODALITIES.contains(m)),
    );
    ModalityRegistry::from_ordered(&ordered)
}

/// Maps common spellings onto registry names; unknown names pass through.
pub fn normalize_modality_name(raw: &str) -> String {
    let key = raw.trim().to_ascii_lowercase().replace(['-', '_', ' '], "");
    let canonical = match key.as_str() {
        "pd" | "pdw" => "PD",
        "flair" | "t2flair" => "FLAIR",
        "swi" => "SWI",
        "t1" | "t1w" => "T1",
        "t1c" | "t1ce" | "t1gd" | "t1post" | "t1contrast" => "T1c",
        "t2" | "t2w" => "T2",
        "dwi" | "dw" => "DWI",
        _ => return raw.trim().to_string(),
    };
    canonical.to_string()
}

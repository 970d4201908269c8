//! Synthetic multi-modal "brain" phantoms with ellipsoidal lesions.
//!
//! Every modality of a case is a fixed affine transform of one shared
//! anatomy field inside an ellipsoidal brain mask, plus a
//! modality-specific lesion contrast and Gaussian noise. The background
//! outside the brain is exactly zero, mimicking skull-stripped data.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{CaseRecord, DatabaseManifest, Split};
use super::nifti_io::{write_label, write_volume, Volume};
use super::RawCase;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Smallest supported edge length.
pub const MIN_EDGE: usize = 16;

/// Lesion appearance and placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionModel {
    /// Inclusive range of lesions per case.
    pub count: (usize, usize),
    /// Range of ellipsoid semi-axes in voxels.
    pub radius: (f64, f64),
    /// Per-modality intensity shift inside lesions, in units of the tissue
    /// contrast; modalities not listed use [`default_contrast`].
    #[serde(default)]
    pub contrast: BTreeMap<String, f64>,
    /// Marks the inner half of each lesion with label 2.
    #[serde(default)]
    pub core_label: bool,
}

impl Default for LesionModel {
    fn default() -> Self {
        LesionModel {
            count: (1, 3),
            radius: (3.0, 6.0),
            contrast: BTreeMap::new(),
            core_label: true,
        }
    }
}

pub fn default_contrast(modality: &str) -> f64 {
    match modality {
        "FLAIR" => 1.6,
        "T2" => 1.4,
        "T1" => -1.2,
        "T1c" => 1.3,
        "PD" => 1.1,
        "SWI" => -1.3,
        "DWI" => 1.8,
        _ => 1.2,
    }
}

/// Tissue gain of the shared anatomy field per modality.
fn tissue_gain(modality: &str) -> f64 {
    match modality {
        "T1" | "T1c" => 1.0,
        "T2" | "PD" => -0.8,
        "FLAIR" => -0.5,
        "SWI" => 0.6,
        "DWI" => 0.3,
        other => {
            // Deterministic but distinct per unknown name.
            let h = other
                .bytes()
                .fold(7u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
            0.4 + (h % 7) as f64 * 0.1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub database_id: String,
    pub shape: [usize; 3],
    pub n_cases: usize,
    pub modalities: Vec<String>,
    #[serde(default)]
    pub lesion: LesionModel,
    pub seed: u64,
    /// Number of trailing cases assigned to the eval split.
    #[serde(default)]
    pub eval_cases: usize,
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    /// Noise standard deviation relative to the tissue contrast.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

fn default_noise() -> f64 {
    0.15
}

impl SyntheticSpec {
    pub fn new(
        database_id: impl Into<String>,
        shape: [usize; 3],
        n_cases: usize,
        modalities: &[&str],
        seed: u64,
    ) -> Self {
        SyntheticSpec {
            database_id: database_id.into(),
            shape,
            n_cases,
            modalities: modalities.iter().map(|s| s.to_string()).collect(),
            lesion: LesionModel::default(),
            seed,
            eval_cases: 0,
            spacing: unit_spacing(),
            noise: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 {
            return Err(Error::Config(
                "synthetic database needs at least one case".into(),
            ));
        }
        if self.eval_cases > self.n_cases {
            return Err(Error::Config(format!(
                "{} eval cases requested out of {}",
                self.eval_cases, self.n_cases
            )));
        }
        if self.shape.iter().any(|&s| s < MIN_EDGE) {
            return Err(Error::Config(format!(
                "synthetic shape {:?} below the minimum edge {MIN_EDGE}",
                self.shape
            )));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config(
                "synthetic database needs at least one modality".into(),
            ));
        }
        let (rmin, rmax) = self.lesion.radius;
        let half = *self.shape.iter().min().unwrap() as f64 / 2.0;
        if !(rmin > 0.0) || rmin > rmax {
            return Err(Error::Config(format!(
                "invalid lesion radius range {rmin}..{rmax}"
            )));
        }
        if rmax > half {
            return Err(Error::Config(format!(
                "lesion radius {rmax} exceeds half the volume edge ({half})"
            )));
        }
        let (cmin, cmax) = self.lesion.count;
        if cmin > cmax {
            return Err(Error::Config(format!(
                "invalid lesion count range {cmin}..{cmax}"
            )));
        }
        Ok(())
    }

    pub fn case_id(index: usize) -> String {
        format!("case{index:03}")
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index >= self.n_cases - self.eval_cases {
            Split::Eval
        } else {
            Split::Train
        }
    }

    fn contrast(&self, modality: &str) -> f64 {
        self.lesion
            .contrast
            .get(modality)
            .copied()
            .unwrap_or_else(|| default_contrast(modality))
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum()
    }
}

/// Generates one case in memory.
pub fn synthesize_case(spec: &SyntheticSpec, index: usize) -> Result<RawCase> {
    spec.validate()?;
    let mut rng: ChaCha8Rng = substream(spec.seed, 0x5EED_CA5E, index as u64);
    let [d, h, w] = spec.shape;
    let dims = [d as f64, h as f64, w as f64];
    let center = dims.map(|v| (v - 1.0) / 2.0);
    let brain = Ellipsoid {
        center,
        radii: dims.map(|v| v * 0.45),
    };

    // Low-frequency anatomy: sum of random plane waves in [0, 1].
    let waves: Vec<([f64; 3], f64)> = (0..4)
        .map(|_| {
            let k = [0, 1, 2].map(|i| rng.gen_range(0.5..2.5) * 2.0 * PI / dims[i]);
            (k, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();

    let (cmin, cmax) = spec.lesion.count;
    let n_lesions = rng.gen_range(cmin..=cmax);
    let (rmin, rmax) = spec.lesion.radius;
    let mut lesions = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        let radii = [0, 1, 2].map(|_| rng.gen_range(rmin..=rmax));
        // Keep lesions well inside the brain ellipsoid.
        let c = [0, 1, 2].map(|i| {
            let span = (brain.radii[i] - radii[i]).max(0.0) * 0.6;
            center[i] + rng.gen_range(-span..=span)
        });
        lesions.push(Ellipsoid { center: c, radii });
    }

    let n = d * h * w;
    let mut anatomy = vec![0f64; n];
    let mut inside = vec![false; n];
    let mut label = vec![0u8; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let p = [z as f64, y as f64, x as f64];
                if brain.level(p) > 1.0 {
                    continue;
                }
                inside[i] = true;
                let v: f64 = waves
                    .iter()
                    .map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).cos())
                    .sum::<f64>()
                    / waves.len() as f64;
                anatomy[i] = 0.5 + 0.5 * v;
                for l in &lesions {
                    let lv = l.level(p);
                    if lv <= 1.0 {
                        let cls = if spec.lesion.core_label && lv <= 0.25 {
                            2
                        } else {
                            1
                        };
                        label[i] = label[i].max(cls);
                    }
                }
            }
        }
    }

    let mut modalities = Vec::with_capacity(spec.modalities.len());
    for m in &spec.modalities {
        let gain = tissue_gain(m);
        let contrast = spec.contrast(m);
        let data: Vec<f32> = (0..n)
            .map(|i| {
                if !inside[i] {
                    return 0.0;
                }
                let lesion = if label[i] > 0 { contrast } else { 0.0 };
                let v =
                    100.0 + 40.0 * (gain * anatomy[i] + lesion + spec.noise * gaussian(&mut rng));
                // Stay strictly positive inside the brain mask.
                v.max(1.0) as f32
            })
            .collect();
        modalities.push((m.clone(), Volume::new(spec.shape, spec.spacing, data)));
    }

    Ok(RawCase {
        database_id: spec.database_id.clone(),
        case_id: SyntheticSpec::case_id(index),
        modalities,
        label: Volume::new(
            spec.shape,
            spec.spacing,
            label.iter().map(|&v| v as f32).collect(),
        ),
    })
}

/// Writes a synthetic database under `root` and returns its manifest entry.
pub fn generate_synthetic_database(root: &Path, spec: &SyntheticSpec) -> Result<DatabaseManifest> {
    spec.validate()?;
    let mut cases = Vec::with_capacity(spec.n_cases);
    for idx in 0..spec.n_cases {
        let raw = synthesize_case(spec, idx)?;
        let dir = root.join(&spec.database_id).join(&raw.case_id);
        std::fs::create_dir_all(&dir)?;
        for (m, vol) in &raw.modalities {
            write_volume(&dir.join(format!("{m}.nii.gz")), vol)?;
        }
        let labels: Vec<u8> = raw.label.data.iter().map(|&v| v as u8).collect();
        write_label(
            &dir.join(super::manifest::LABEL_FILE),
            spec.shape,
            spec.spacing,
            &labels,
        )?;
        cases.push(CaseRecord::new(raw.case_id, spec.split_of(idx)));
    }
    Ok(DatabaseManifest {
        database_id: spec.database_id.clone(),
        modalities: spec.modalities.clone(),
        cases,
    })
}

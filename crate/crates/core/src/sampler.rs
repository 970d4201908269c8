//! The training stream: per-epoch database oversampling, patch extraction
//! and random modality dropping.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CaseSample, DatabaseManifest, Split};
use crate::error::{Error, Result};
use crate::rng::{draw_index, substream, DOMAIN_DRAW, DOMAIN_PLAN};

/// Random modality-drop augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropPolicy {
    pub enabled: bool,
    /// Databases whose samples are never dropped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exempt: Vec<String>,
}

impl Default for DropPolicy {
    fn default() -> Self {
        DropPolicy {
            enabled: true,
            exempt: Vec::new(),
        }
    }
}

impl DropPolicy {
    pub fn disabled() -> Self {
        DropPolicy {
            enabled: false,
            exempt: Vec::new(),
        }
    }

    fn applies_to(&self, database_id: &str) -> bool {
        self.enabled && !self.exempt.iter().any(|e| e == database_id)
    }
}

/// Zeroes a random subset of the present modalities, never all of them.
///
/// The number dropped is uniform on `0..=C_i-1` where `C_i` is the number of
/// present channels; the dropped channels are then chosen uniformly without
/// replacement.
pub fn apply_drop(sample: &CaseSample, policy: &DropPolicy, rng: &mut impl Rng) -> CaseSample {
    let mut out = sample.clone();
    if !policy.applies_to(&sample.database_id) {
        return out;
    }
    let present = sample.present_channels();
    if present.len() <= 1 {
        return out;
    }
    let n = rng.gen_range(0..present.len());
    for i in index::sample(rng, present.len(), n) {
        out.zero_channel(present[i]);
    }
    out
}

/// One draw of an epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draw {
    pub database_id: String,
    pub case_id: String,
}

/// The ordered draws of one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub draws: Vec<Draw>,
    pub counts: BTreeMap<String, usize>,
}

impl EpochPlan {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Balances databases to the largest train split.
///
/// The largest databases contribute a permutation of their cases; smaller
/// ones draw that many cases uniformly with replacement. The combined list
/// is shuffled globally.
pub fn plan_epoch(dbs: &[DatabaseManifest], rng: &mut impl Rng) -> Result<EpochPlan> {
    let train: Vec<(&DatabaseManifest, Vec<&str>)> = dbs
        .iter()
        .map(|db| {
            (
                db,
                db.cases_in(Split::Train)
                    .map(|c| c.case_id.as_str())
                    .collect(),
            )
        })
        .collect();
    if let Some((db, _)) = train.iter().find(|(_, cases)| cases.is_empty()) {
        return Err(Error::Data(format!(
            "database `{}` has no train cases",
            db.database_id
        )));
    }
    let max_count = train
        .iter()
        .map(|(_, cases)| cases.len())
        .max()
        .ok_or_else(|| Error::Data("no databases to sample from".into()))?;

    let mut draws = Vec::with_capacity(max_count * train.len());
    let mut counts = BTreeMap::new();
    for (db, cases) in &train {
        let picked: Vec<&str> = if cases.len() == max_count {
            cases.clone()
        } else {
            (0..max_count)
                .map(|_| cases[rng.gen_range(0..cases.len())])
                .collect()
        };
        counts.insert(db.database_id.clone(), picked.len());
        draws.extend(picked.into_iter().map(|c| Draw {
            database_id: db.database_id.clone(),
            case_id: c.to_string(),
        }));
    }
    draws.shuffle(rng);
    Ok(EpochPlan { draws, counts })
}

/// A cropped sample and whether its centre was chosen on a lesion voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub sample: CaseSample,
    pub origin: [usize; 3],
    pub lesion_centered: bool,
}

/// Crops `shape` out of `sample`.
///
/// With probability `fg_bias` (when the case has any lesion) the centre is a
/// uniformly chosen lesion voxel, otherwise a uniformly chosen voxel. The
/// window is shifted as needed to stay inside the volume, so the chosen
/// centre voxel is always inside the patch.
pub fn extract_patch(
    sample: &CaseSample,
    shape: [usize; 3],
    rng: &mut impl Rng,
    fg_bias: f64,
) -> Result<Patch> {
    let dims = sample.spatial();
    if (0..3).any(|i| shape[i] > dims[i] || shape[i] == 0) {
        return Err(Error::Shape(format!(
            "patch {shape:?} does not fit volume {dims:?}"
        )));
    }
    let want_lesion = rng.gen_bool(fg_bias.clamp(0.0, 1.0));
    let mut lesion_centered = false;
    let mut centre = None;
    if want_lesion {
        let lesions: Vec<usize> = sample
            .label
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.5)
            .map(|(i, _)| i)
            .collect();
        if let Some(&flat) = lesions.get(rng.gen_range(0..lesions.len().max(1))) {
            let [_, h, w] = dims;
            centre = Some([flat / (h * w), flat / w % h, flat % w]);
            lesion_centered = true;
        }
    }
    let centre = centre.unwrap_or_else(|| [0, 1, 2].map(|i| rng.gen_range(0..dims[i])));
    let origin = [0, 1, 2].map(|i| {
        centre[i]
            .saturating_sub(shape[i] / 2)
            .min(dims[i] - shape[i])
    });
    let mut out = sample.clone();
    out.volume = sample.volume.crop_spatial(origin, shape);
    out.label = sample.label.crop_spatial(origin, shape);
    Ok(Patch {
        sample: out,
        origin,
        lesion_centered,
    })
}

/// Patch policy; `shape: None` trains on whole volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
    #[serde(default = "default_fg_bias")]
    pub fg_bias: f64,
}

fn default_fg_bias() -> f64 {
    0.5
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            shape: Some([96; 3]),
            fg_bias: default_fg_bias(),
        }
    }
}

impl PatchConfig {
    pub fn whole_volume() -> Self {
        PatchConfig {
            shape: None,
            fg_bias: default_fg_bias(),
        }
    }
}

/// Deterministic training stream keyed by seed.
///
/// Every draw owns a substream derived from `(seed, epoch, position)`, so a
/// draw's augmentation does not depend on which other draws were made or in
/// which order.
#[derive(Clone, Debug)]
pub struct Sampler {
    pub seed: u64,
    pub drop: DropPolicy,
    pub patch: PatchConfig,
}

impl Sampler {
    pub fn new(seed: u64, drop: DropPolicy, patch: PatchConfig) -> Self {
        Sampler { seed, drop, patch }
    }

    pub fn plan(&self, dbs: &[DatabaseManifest], epoch: usize) -> Result<EpochPlan> {
        plan_epoch(dbs, &mut substream(self.seed, DOMAIN_PLAN, epoch as u64))
    }

    /// Applies patch cropping, then modality dropping, to the sample drawn at
    /// `position` of `epoch`.
    pub fn augment(
        &self,
        sample: &CaseSample,
        epoch: usize,
        position: usize,
    ) -> Result<CaseSample> {
        let mut rng = substream(self.seed, DOMAIN_DRAW, draw_index(epoch, position));
        let cropped = match self.patch.shape {
            Some(shape) if shape != sample.spatial() => {
                // Patches never exceed the volume; small volumes train whole.
                let dims = sample.spatial();
                let fit = [0, 1, 2].map(|i| shape[i].min(dims[i]));
                extract_patch(sample, fit, &mut rng, self.patch.fg_bias)?.sample
            }
            _ => sample.clone(),
        };
        Ok(apply_drop(&cropped, &self.drop, &mut rng))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dataset::CaseRecord;
    use crate::tensor::{Shape, Tensor};

    fn sample(channels: usize, present: &[usize], dims: [usize; 3]) -> CaseSample {
        let shape = Shape::new(1, channels, dims[0], dims[1], dims[2]);
        let mut volume =
            Tensor::from_vec(shape, (0..shape.len()).map(|i| 1.0 + i as f32).collect());
        let mut presence = vec![true; channels];
        for c in 0..channels {
            if !present.contains(&c) {
                volume.channel_mut(0, c).fill(0.0);
                presence[c] = false;
            }
        }
        let mut label = Tensor::zeros(shape.with_channels(1));
        label.data_mut()[0] = 1.0;
        CaseSample {
            database_id: "db".into(),
            case_id: "c".into(),
            volume,
            presence,
            label,
            spacing: [1.0; 3],
        }
    }

    fn db(id: &str, n: usize) -> DatabaseManifest {
        DatabaseManifest {
            database_id: id.into(),
            modalities: vec!["T1".into()],
            cases: (0..n)
                .map(|i| CaseRecord::new(format!("{id}{i}"), Split::Train))
                .collect(),
        }
    }

    #[test]
    fn single_modality_is_never_dropped() {
        let s = sample(7, &[3], [2, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            assert_eq!(apply_drop(&s, &DropPolicy::default(), &mut rng), s);
        }
    }

    #[test]
    fn survival_rate_matches_expectation() {
        let s = sample(4, &[0, 1, 2, 3], [1, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut survived = 0usize;
        for _ in 0..draws {
            survived += apply_drop(&s, &DropPolicy::default(), &mut rng).presence[0] as usize;
        }
        let rate = survived as f64 / draws as f64;
        assert!((rate - 0.625).abs() <= 0.01, "rate {rate}");
    }

    #[test]
    fn two_channel_drop_flips_exactly_one_bit() {
        let s = sample(2, &[0, 1], [2, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen_drop = false;
        for _ in 0..50 {
            let out = apply_drop(&s, &DropPolicy::default(), &mut rng);
            let flipped = (0..2).filter(|&c| out.presence[c] != s.presence[c]).count();
            assert!(flipped <= 1);
            if flipped == 1 {
                seen_drop = true;
                let c = (0..2).find(|&c| !out.presence[c]).unwrap();
                assert!(out.volume.channel(0, c).iter().all(|&v| v == 0.0));
            }
        }
        assert!(seen_drop);
    }

    #[test]
    fn disabled_and_exempt_policies_are_identity() {
        let s = sample(4, &[0, 1, 2, 3], [2, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let exempt = DropPolicy {
            enabled: true,
            exempt: vec!["db".into()],
        };
        for _ in 0..50 {
            assert_eq!(apply_drop(&s, &DropPolicy::disabled(), &mut rng), s);
            assert_eq!(apply_drop(&s, &exempt, &mut rng), s);
        }
    }

    #[test]
    fn oversampling_balances_to_largest() {
        let dbs = [db("A", 100), db("B", 25)];
        let plan = plan_epoch(&dbs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(plan.len(), 200);
        assert_eq!(plan.counts["A"], 100);
        assert_eq!(plan.counts["B"], 100);
        assert_eq!(
            plan.draws.iter().filter(|d| d.database_id == "B").count(),
            100
        );
    }

    #[test]
    fn equal_sizes_visit_every_case_once() {
        let dbs = [db("A", 3), db("B", 3)];
        let plan = plan_epoch(&dbs, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut ids: Vec<_> = plan.draws.iter().map(|d| d.case_id.clone()).collect();
        ids.sort();
        assert_eq!(ids, ["A0", "A1", "A2", "B0", "B1", "B2"]);
    }

    #[test]
    fn empty_train_split_is_an_error() {
        assert!(plan_epoch(&[db("A", 0)], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(plan_epoch(&[], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn full_size_patch_is_identity() {
        let s = sample(2, &[0, 1], [4, 5, 6]);
        let p = extract_patch(&s, [4, 5, 6], &mut ChaCha8Rng::seed_from_u64(0), 0.5).unwrap();
        assert_eq!(p.sample, s);
        assert!(extract_patch(&s, [5, 5, 6], &mut ChaCha8Rng::seed_from_u64(0), 0.5).is_err());
    }

    #[test]
    fn full_bias_always_contains_lesion() {
        let mut s = sample(1, &[0], [16, 16, 16]);
        s.label.data_mut()[0] = 0.0;
        s.label.data_mut()[(9 * 16 + 12) * 16 + 3] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = extract_patch(&s, [4, 4, 4], &mut rng, 1.0).unwrap();
            assert!(p.lesion_centered);
            assert!(p.sample.label.data().contains(&1.0));
        }
    }

    #[test]
    fn half_bias_centres_half_the_patches_on_lesions() {
        let s = sample(1, &[0], [8, 8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| {
                extract_patch(&s, [4, 4, 4], &mut rng, 0.5)
                    .unwrap()
                    .lesion_centered
            })
            .count();
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "fraction {frac}");
    }

    #[test]
    fn augmentation_is_schedule_independent() {
        let s = sample(4, &[0, 1, 2, 3], [8, 8, 8]);
        let sampler = Sampler::new(
            9,
            DropPolicy::default(),
            PatchConfig {
                shape: Some([4, 4, 4]),
                fg_bias: 0.5,
            },
        );
        let forward: Vec<_> = (0..10)
            .map(|i| sampler.augment(&s, 2, i).unwrap())
            .collect();
        let backward: Vec<_> = (0..10)
            .rev()
            .map(|i| sampler.augment(&s, 2, i).unwrap())
            .collect();
        for (a, b) in forward.iter().zip(backward.iter().rev()) {
            assert_eq!(a, b);
        }
        assert_eq!(
            sampler.plan(&[db("A", 5)], 1).unwrap(),
            sampler.plan(&[db("A", 5)], 1).unwrap()
        );
    }

    proptest! {
        #[test]
        fn drop_keeps_one_channel_and_never_alters_survivors(
            mask in prop::collection::vec(any::<bool>(), 1..8),
            seed in any::<u64>(),
        ) {
            let present: Vec<usize> = (0..mask.len()).filter(|&c| mask[c]).collect();
            prop_assume!(!present.is_empty());
            let s = sample(mask.len(), &present, [2, 2, 2]);
            let out = apply_drop(&s, &DropPolicy::default(), &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(out.present_count() >= 1);
            prop_assert_eq!(&out.label, &s.label);
            for c in 0..mask.len() {
                if out.presence[c] {
                    prop_assert!(s.presence[c]);
                    prop_assert_eq!(out.volume.channel(0, c), s.volume.channel(0, c));
                } else {
                    prop_assert!(out.volume.channel(0, c).iter().all(|&v| v == 0.0));
                }
            }
        }

        #[test]
        fn plan_counts_match_largest(sizes in prop::collection::vec(1usize..20, 1..5), seed in any::<u64>()) {
            let dbs: Vec<_> = sizes.iter().enumerate().map(|(i, &n)| db(&format!("D{i}"), n)).collect();
            let plan = plan_epoch(&dbs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let max = *sizes.iter().max().unwrap();
            for d in &dbs {
                prop_assert_eq!(plan.counts[&d.database_id], max);
            }
            prop_assert_eq!(plan.len(), max * sizes.len());
        }
    }
}

//! Segmentation metrics, evaluation reports and the missing-modality sweep.

pub mod overlap;
pub mod surface;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use overlap::{binarize, dice, sensitivity_precision, Confusion, THRESHOLD};
pub use surface::assd;

use crate::dataset::CaseSample;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::registry::ModalityRegistry;
use crate::tensor::{Shape, Tensor};

/// Anything that maps a case to a lesion-probability map `[1, 1, D, H, W]`.
pub trait Predictor {
    fn predict_case(&self, sample: &CaseSample) -> Result<Tensor<f32>>;
}

impl Predictor for Model<f32> {
    /// Whole-volume inference; the volume is zero-padded up to the
    /// backbone's spatial divisor and the prediction cropped back.
    fn predict_case(&self, sample: &CaseSample) -> Result<Tensor<f32>> {
        let spatial = sample.spatial();
        let div = self.spec.backbone.divisor();
        let padded = spatial.map(|s| s.div_ceil(div) * div);
        let input = sample.volume.pad_spatial(padded);
        let prob = self.predict(&input, std::slice::from_ref(&sample.presence))?;
        Ok(prob.crop_spatial([0; 3], spatial))
    }
}

/// Metrics of one case under one modality subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub database_id: String,
    pub case_id: String,
    /// Modalities provided to the model.
    pub subset: Vec<String>,
    pub dice: f64,
    pub sensitivity: f64,
    pub precision: f64,
    /// Missing when either mask is empty.
    pub assd_mm: Option<f64>,
}

/// Scores a probability map against the sample's label.
pub fn score_case(
    sample: &CaseSample,
    prob: &Tensor<f32>,
    subset: Vec<String>,
) -> Result<CaseMetrics> {
    if prob.shape() != sample.label.shape() {
        return Err(Error::Shape(format!(
            "prediction {} does not match label {}",
            prob.shape(),
            sample.label.shape()
        )));
    }
    let pred = binarize(prob.data());
    let gt = sample.label_mask();
    let c = Confusion::of(&pred, &gt)?;
    let assd_mm = match assd(&pred, &gt, sample.spatial(), sample.spacing) {
        Ok(v) => Some(v),
        Err(Error::EmptyMask(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(CaseMetrics {
        database_id: sample.database_id.clone(),
        case_id: sample.case_id.clone(),
        subset,
        dice: c.dice(),
        sensitivity: c.sensitivity(),
        precision: c.precision(),
        assd_mm,
    })
}

/// Arithmetic means over a group of records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub cases: usize,
    pub dice: f64,
    pub sensitivity: f64,
    pub precision: f64,
    /// Mean over records with a defined ASSD.
    pub assd_mm: Option<f64>,
    /// Records excluded from the ASSD mean because a mask was empty.
    pub assd_excluded: usize,
}

impl Aggregate {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a CaseMetrics>) -> Self {
        let recs: Vec<&CaseMetrics> = records.into_iter().collect();
        let n = recs.len();
        if n == 0 {
            return Aggregate::default();
        }
        let mean =
            |f: &dyn Fn(&CaseMetrics) -> f64| recs.iter().map(|r| f(r)).sum::<f64>() / n as f64;
        let assd: Vec<f64> = recs.iter().filter_map(|r| r.assd_mm).collect();
        Aggregate {
            cases: n,
            dice: mean(&|r| r.dice),
            sensitivity: mean(&|r| r.sensitivity),
            precision: mean(&|r| r.precision),
            assd_mm: (!assd.is_empty()).then(|| assd.iter().sum::<f64>() / assd.len() as f64),
            assd_excluded: n - assd.len(),
        }
    }
}

/// Summary of a subset sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    /// Subsets evaluated per database.
    pub subsets: BTreeMap<String, usize>,
    /// Mean Dice per database and subset (subset names joined by `+`).
    pub subset_dice: BTreeMap<String, BTreeMap<String, f64>>,
    /// Mean of (subset Dice - full-set Dice) over all database/subset pairs.
    pub mean_dice_drop: f64,
    pub includes_full_set: bool,
}

/// Per-case records plus aggregates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<CaseMetrics>,
    pub per_database: BTreeMap<String, Aggregate>,
    /// Mean over all records.
    pub overall: Aggregate,
    /// Mean of the per-database Dice means.
    pub database_mean_dice: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSummary>,
}

impl MetricsReport {
    pub fn from_records(records: Vec<CaseMetrics>) -> Self {
        let mut groups: BTreeMap<String, Vec<&CaseMetrics>> = BTreeMap::new();
        for r in &records {
            groups.entry(r.database_id.clone()).or_default().push(r);
        }
        let per_database: BTreeMap<String, Aggregate> = groups
            .into_iter()
            .map(|(k, v)| (k, Aggregate::of(v)))
            .collect();
        let database_mean_dice = if per_database.is_empty() {
            0.0
        } else {
            per_database.values().map(|a| a.dice).sum::<f64>() / per_database.len() as f64
        };
        MetricsReport {
            overall: Aggregate::of(&records),
            per_database,
            database_mean_dice,
            records,
            sweep: None,
        }
    }

    /// Writes one CSV row per record.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record([
            "database_id",
            "case_id",
            "subset",
            "dice",
            "sensitivity",
            "precision",
            "assd_mm",
        ])
        .map_err(csv_error)?;
        for r in &self.records {
            w.write_record([
                r.database_id.clone(),
                r.case_id.clone(),
                r.subset.join("+"),
                r.dice.to_string(),
                r.sensitivity.to_string(),
                r.precision.to_string(),
                r.assd_mm.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes aggregates (without per-case records) as JSON.
    pub fn write_summary(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a> {
            per_database: &'a BTreeMap<String, Aggregate>,
            overall: &'a Aggregate,
            database_mean_dice: f64,
            #[serde(skip_serializing_if = "Option::is_none")]
            sweep: &'a Option<SweepSummary>,
        }
        let s = Summary {
            per_database: &self.per_database,
            overall: &self.overall,
            database_mean_dice: self.database_mean_dice,
            sweep: &self.sweep,
        };
        std::fs::write(path, serde_json::to_string_pretty(&s)?)?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn subset_names(registry: &ModalityRegistry, channels: &[usize]) -> Vec<String> {
    channels
        .iter()
        .map(|&c| registry.name_of(c).unwrap_or("?").to_string())
        .collect()
}

/// Evaluates every case with all of its present modalities, or with only
/// `modalities` (the rest zero-filled) when given.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    cases: &[CaseSample],
    registry: &ModalityRegistry,
    modalities: Option<&[String]>,
) -> Result<MetricsReport> {
    let mut records = Vec::with_capacity(cases.len());
    for case in cases {
        let input = match modalities {
            Some(m) => case.restrict_to_modalities(m, registry)?,
            None => case.clone(),
        };
        let prob = predictor.predict_case(&input)?;
        let names = subset_names(registry, &input.present_channels());
        records.push(score_case(case, &prob, names)?);
    }
    Ok(MetricsReport::from_records(records))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Largest modality count swept exhaustively.
    pub limit: usize,
    /// Count the full set (a zero drop) in the mean drop.
    pub include_full_set: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            limit: 6,
            include_full_set: false,
        }
    }
}

/// Non-empty subsets of `channels` in bitmask order; the last is the full set.
pub fn nonempty_subsets(channels: &[usize]) -> Vec<Vec<usize>> {
    (1u32..(1 << channels.len()))
        .map(|mask| {
            channels
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, &c)| c)
                .collect()
        })
        .collect()
}

/// One database/subset mean Dice entering the drop average.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetDice {
    pub database_id: String,
    pub full: bool,
    pub dice: f64,
}

/// Mean of (subset Dice - full-set Dice) across databases and subsets.
///
/// Only proper subsets count unless `include_full_set`; a database with a
/// single modality contributes nothing, and with no pairs at all the drop
/// is zero.
pub fn mean_dice_drop(entries: &[SubsetDice], include_full_set: bool) -> Result<f64> {
    let mut full: BTreeMap<&str, f64> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.full) {
        full.insert(&e.database_id, e.dice);
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for e in entries.iter().filter(|e| include_full_set || !e.full) {
        let base = full
            .get(e.database_id.as_str())
            .ok_or_else(|| Error::Data(format!("no full-set result for `{}`", e.database_id)))?;
        sum += e.dice - base;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Evaluates every non-empty subset of each database's modalities.
///
/// Cases of one database must share the same present modalities.
pub fn subset_sweep<P: Predictor + ?Sized>(
    predictor: &P,
    cases: &[CaseSample],
    registry: &ModalityRegistry,
    config: &SweepConfig,
) -> Result<MetricsReport> {
    let mut by_db: BTreeMap<&str, Vec<&CaseSample>> = BTreeMap::new();
    for c in cases {
        by_db.entry(&c.database_id).or_default().push(c);
    }
    let mut records = Vec::new();
    let mut entries = Vec::new();
    let mut subsets_per_db = BTreeMap::new();
    let mut subset_dice = BTreeMap::new();
    for (db, group) in by_db {
        let present = group[0].present_channels();
        if let Some(bad) = group.iter().find(|c| c.present_channels() != present) {
            return Err(Error::Data(format!(
                "case `{}` of `{db}` does not provide the database's full modality set",
                bad.case_id
            )));
        }
        if present.len() > config.limit {
            return Err(Error::Config(format!(
                "`{db}` has {} modalities, above the sweep limit {}",
                present.len(),
                config.limit
            )));
        }
        let subsets = nonempty_subsets(&present);
        subsets_per_db.insert(db.to_string(), subsets.len());
        let mut dice_by_subset = BTreeMap::new();
        for subset in &subsets {
            let names = subset_names(registry, subset);
            let mut sum = 0.0;
            for case in &group {
                let input = case.restrict_to(subset);
                let prob = predictor.predict_case(&input)?;
                let r = score_case(case, &prob, names.clone())?;
                sum += r.dice;
                records.push(r);
            }
            let mean = sum / group.len() as f64;
            dice_by_subset.insert(names.join("+"), mean);
            entries.push(SubsetDice {
                database_id: db.to_string(),
                full: subset.len() == present.len(),
                dice: mean,
            });
        }
        subset_dice.insert(db.to_string(), dice_by_subset);
    }
    let mut report = MetricsReport::from_records(records);
    report.sweep = Some(SweepSummary {
        subsets: subsets_per_db,
        subset_dice,
        mean_dice_drop: mean_dice_drop(&entries, config.include_full_set)?,
        includes_full_set: config.include_full_set,
    });
    Ok(report)
}

/// Thresholded full-volume prediction as a `{0, 1}` label tensor.
pub fn hard_prediction(prob: &Tensor<f32>) -> Tensor<f32> {
    let s: Shape = prob.shape();
    Tensor::from_vec(
        s,
        binarize(prob.data())
            .into_iter()
            .map(|b| b as u8 as f32)
            .collect(),
    )
}

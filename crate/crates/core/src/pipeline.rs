//! End-to-end workflows behind the command-line tool: synthesize data,
//! train, fine-tune, evaluate and predict.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{load_manifests, select_databases, RunConfig};
use crate::dataset::nifti_io::{read_volume, write_volume};
use crate::dataset::synth::{generate_synthetic_database, SyntheticSpec};
use crate::dataset::{
    load_split, preprocess, DatabaseManifest, LoadOptions, Manifest, RawCase, Split, Volume,
    MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate, hard_prediction, subset_sweep, MetricsReport, Predictor, SweepConfig,
};
use crate::models::Model;
use crate::registry::{build_registry, normalize_modality_name, ModalityRegistry};
use crate::training::{
    config_hash, prepare_finetune, select_budget, train, Checkpoint, Control, RunOutput, StepInfo,
    TrainSummary, TrainingSet,
};

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_SUMMARY: &str = "metrics.json";
pub const REGISTRY_FILE: &str = "registry.json";

/// Request for a set of synthetic databases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRequest {
    pub out_dir: PathBuf,
    /// One modality list per database.
    pub modalities: Vec<Vec<String>>,
    pub cases: usize,
    pub eval_cases: usize,
    pub shape: [usize; 3],
    pub seed: u64,
    /// Database ids are `{prefix}{index}`.
    pub prefix: String,
}

impl SynthRequest {
    /// Parses `"FLAIR,T1;T1"` into one modality list per database. A single
    /// list is repeated for every database.
    pub fn parse_modalities(text: &str, databases: usize) -> Result<Vec<Vec<String>>> {
        let lists: Vec<Vec<String>> = text
            .split(';')
            .map(|group| {
                group
                    .split(',')
                    .map(str::trim)
                    .filter(|m| !m.is_empty())
                    .map(normalize_modality_name)
                    .collect()
            })
            .collect();
        if lists.iter().any(Vec::is_empty) {
            return Err(Error::Config(format!("empty modality group in `{text}`")));
        }
        match (lists.len(), databases) {
            (_, 0) => Err(Error::Config("at least one database is required".into())),
            (1, n) => Ok(vec![lists[0].clone(); n]),
            (l, n) if l == n => Ok(lists),
            (l, n) => Err(Error::Config(format!(
                "{l} modality groups given for {n} databases"
            ))),
        }
    }
}

/// Writes synthetic databases and their manifest; returns the manifest.
pub fn synthesize(req: &SynthRequest) -> Result<Manifest> {
    if req.cases == 0 {
        return Err(Error::Config("--cases must be at least 1".into()));
    }
    if req.eval_cases >= req.cases {
        return Err(Error::Config(
            "eval cases must leave at least one training case".into(),
        ));
    }
    let mut manifest = Manifest::default();
    for (i, mods) in req.modalities.iter().enumerate() {
        let refs: Vec<&str> = mods.iter().map(String::as_str).collect();
        let mut spec = SyntheticSpec::new(
            format!("{}{i}", req.prefix),
            req.shape,
            req.cases,
            &refs,
            req.seed.wrapping_add(i as u64),
        );
        spec.eval_cases = req.eval_cases;
        manifest
            .databases
            .push(generate_synthetic_database(&req.out_dir, &spec)?);
    }
    manifest.validate()?;
    manifest.save(&req.out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// What a training or fine-tuning run produced.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub dir: PathBuf,
    pub summary: TrainSummary,
    /// Final evaluation on the eval split, when one exists.
    pub report: Option<MetricsReport>,
}

fn write_registry(dir: &Path, registry: &ModalityRegistry) -> Result<()> {
    std::fs::write(
        dir.join(REGISTRY_FILE),
        serde_json::to_string_pretty(registry)?,
    )?;
    Ok(())
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    report.write_csv(&dir.join(METRICS_CSV))?;
    report.write_summary(&dir.join(METRICS_SUMMARY))
}

/// Trains a model from scratch on the configured databases.
pub fn run_train(
    cfg: &RunConfig,
    hook: &mut dyn FnMut(&StepInfo, &Model<f32>) -> Control,
) -> Result<RunResult> {
    cfg.validate()?;
    let manifest = cfg.load_manifest()?;
    let dbs = manifest.select(&cfg.databases)?;
    let sets = dbs
        .iter()
        .map(|d| d.modality_set())
        .collect::<Result<Vec<_>>>()?;
    let registry = build_registry(&sets)?;
    let eval_dbs = select_databases(&manifest, &cfg.eval_databases, &dbs)?;
    // Load everything up front so data problems surface before training.
    let data = TrainingSet::load(&dbs, &cfg.data_root, &registry, &cfg.load)?;
    let eval = load_split(&eval_dbs, &cfg.data_root, Split::Eval, &registry, &cfg.load)?;
    let mut model = Model::new(cfg.model.spec(registry.clone()), cfg.seed)?;

    let text = cfg.write_resolved(&cfg.output_dir)?;
    write_registry(&cfg.output_dir, &registry)?;
    let mut out = RunOutput::new(&cfg.output_dir, config_hash(&text));
    out.provenance.insert("command".into(), "train".into());
    out.provenance.insert("databases".into(), ids(&dbs));
    out.provenance
        .insert("deterministic".into(), cfg.deterministic.to_string());
    run_and_report(&mut model, &data, &eval, cfg, &out, hook)
}

/// Adapts a pretrained checkpoint to `cfg.finetune.target_database`.
pub fn run_finetune(
    cfg: &RunConfig,
    hook: &mut dyn FnMut(&StepInfo, &Model<f32>) -> Control,
) -> Result<RunResult> {
    cfg.validate()?;
    let ft = cfg
        .finetune
        .as_ref()
        .ok_or_else(|| Error::Config("missing [finetune] section".into()))?;
    let source = Checkpoint::load(&ft.source)?;
    let manifest = cfg.load_manifest()?;
    let target = select_budget(manifest.database(&ft.target_database)?, ft.budget, cfg.seed)?;
    let (remap, mut model) =
        prepare_finetune(&source.model, &target.modalities, ft.mode, cfg.seed)?;
    let registry = model.spec.registry.clone();
    let dbs = vec![target];
    let data = TrainingSet::load(&dbs, &cfg.data_root, &registry, &cfg.load)?;
    let eval = load_split(&dbs, &cfg.data_root, Split::Eval, &registry, &cfg.load)?;

    let text = cfg.write_resolved(&cfg.output_dir)?;
    write_registry(&cfg.output_dir, &registry)?;
    let mut out = RunOutput::new(&cfg.output_dir, config_hash(&text));
    out.remap = Some(remap);
    out.provenance.insert("command".into(), "finetune".into());
    out.provenance
        .insert("source".into(), ft.source.display().to_string());
    out.provenance
        .insert("source_config_hash".into(), source.meta.config_hash.clone());
    out.provenance.insert("mode".into(), ft.mode.to_string());
    out.provenance.insert(
        "budget".into(),
        ft.budget
            .map_or_else(|| "all".to_string(), |b| b.to_string()),
    );
    out.provenance.insert("databases".into(), ids(&dbs));
    run_and_report(&mut model, &data, &eval, cfg, &out, hook)
}

fn ids(dbs: &[DatabaseManifest]) -> String {
    dbs.iter()
        .map(|d| d.database_id.as_str())
        .collect::<Vec<_>>()
        .join(",")
}

fn run_and_report(
    model: &mut Model<f32>,
    data: &TrainingSet,
    eval: &[crate::dataset::CaseSample],
    cfg: &RunConfig,
    out: &RunOutput,
    hook: &mut dyn FnMut(&StepInfo, &Model<f32>) -> Control,
) -> Result<RunResult> {
    let summary = train(
        model,
        data,
        eval,
        &cfg.train,
        &cfg.sampler(),
        Some(out),
        hook,
    )?;
    let report = if eval.is_empty() {
        None
    } else {
        let registry = model.spec.registry.clone();
        let r = evaluate(&*model, eval, &registry, None)?;
        write_report(&out.dir, &r)?;
        Some(r)
    };
    Ok(RunResult {
        dir: out.dir.clone(),
        summary,
        report,
    })
}

/// Request to score a checkpoint on manifest cases.
#[derive(Clone, Debug)]
pub struct EvaluateRequest {
    pub checkpoint: PathBuf,
    pub data_root: PathBuf,
    pub manifests: Vec<PathBuf>,
    /// Databases to evaluate; all when empty.
    pub databases: Vec<String>,
    pub split: Split,
    /// Evaluate with only these modalities (others zero-filled).
    pub modalities: Option<Vec<String>>,
    /// Sweep every modality subset instead.
    pub subset_sweep: bool,
    pub load: LoadOptions,
    /// Where to write the CSV and JSON reports.
    pub out_dir: Option<PathBuf>,
}

pub fn run_evaluate(req: &EvaluateRequest) -> Result<MetricsReport> {
    if req.subset_sweep && req.modalities.is_some() {
        return Err(Error::Config(
            "--subset-sweep and --modalities are mutually exclusive".into(),
        ));
    }
    let ck = Checkpoint::load(&req.checkpoint)?;
    let registry = ck.registry().clone();
    let manifest = load_manifests(&req.manifests)?;
    let dbs = manifest.select(&req.databases)?;
    let modalities = req.modalities.as_ref().map(|m| {
        m.iter()
            .map(|s| normalize_modality_name(s))
            .collect::<Vec<_>>()
    });
    if let Some(mods) = &modalities {
        for db in &dbs {
            if let Some(m) = mods.iter().find(|m| !db.modalities.contains(m)) {
                return Err(Error::Data(format!(
                    "modality {m} is not available in database `{}`",
                    db.database_id
                )));
            }
        }
    }
    let cases = load_split(&dbs, &req.data_root, req.split, &registry, &req.load)?;
    if cases.is_empty() {
        return Err(Error::Data(format!("no {:?} cases to evaluate", req.split)));
    }
    let report = if req.subset_sweep {
        subset_sweep(&ck.model, &cases, &registry, &SweepConfig::default())?
    } else {
        evaluate(&ck.model, &cases, &registry, modalities.as_deref())?
    };
    if let Some(dir) = &req.out_dir {
        std::fs::create_dir_all(dir)?;
        write_report(dir, &report)?;
    }
    Ok(report)
}

/// Request to segment one subject from image files.
#[derive(Clone, Debug)]
pub struct PredictRequest {
    pub checkpoint: PathBuf,
    /// `(modality, image path)` pairs.
    pub inputs: Vec<(String, PathBuf)>,
    pub output: PathBuf,
    /// Write the lesion probability instead of the binary mask.
    pub probabilities: bool,
}

/// Segments one subject on its native grid and writes the result as NIfTI.
pub fn run_predict(req: &PredictRequest) -> Result<Volume> {
    if req.inputs.is_empty() {
        return Err(Error::Config("no input images given".into()));
    }
    let ck = Checkpoint::load(&req.checkpoint)?;
    let registry = ck.registry();
    let mut modalities = Vec::new();
    let mut seen = BTreeMap::new();
    for (name, path) in &req.inputs {
        let name = normalize_modality_name(name);
        if seen.insert(name.clone(), ()).is_some() {
            return Err(Error::Config(format!("modality {name} given twice")));
        }
        modalities.push((name, read_volume(path)?));
    }
    let (shape, spacing) = (modalities[0].1.shape, modalities[0].1.spacing);
    let raw = RawCase {
        database_id: "input".into(),
        case_id: "input".into(),
        label: Volume::new(shape, spacing, vec![0.0; modalities[0].1.len()]),
        modalities,
    };
    let opts = LoadOptions {
        target_spacing: None,
        ..LoadOptions::default()
    };
    let sample = preprocess(&raw, registry, &opts)?;
    let prob = ck.model.predict_case(&sample)?;
    let values = if req.probabilities {
        prob
    } else {
        hard_prediction(&prob)
    };
    let out = Volume::new(shape, spacing, values.into_data());
    if let Some(dir) = req.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_volume(&req.output, &out)?;
    Ok(out)
}

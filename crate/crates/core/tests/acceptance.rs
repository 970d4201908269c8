//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run all criteria with `cargo test -p heteroseg --test acceptance`, or a
//! selection with `cargo test -p heteroseg --test acceptance -- 3 11`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use heteroseg::config::{FinetuneSection, RunConfig, RESOLVED_CONFIG_FILE};
use heteroseg::dataset::synth::{synthesize_case, SyntheticSpec};
use heteroseg::dataset::{preprocess, CaseRecord, DatabaseManifest, LoadOptions, Split};
use heteroseg::metrics::overlap::Confusion;
use heteroseg::metrics::surface::assd;
use heteroseg::metrics::{evaluate, subset_sweep, SweepConfig};
use heteroseg::models::fusion::fusion_gradient_check;
use heteroseg::models::{BackboneConfig, Family, Model, ModelSpec};
use heteroseg::pipeline::{
    run_evaluate, run_finetune, run_train, synthesize, EvaluateRequest, SynthRequest,
};
use heteroseg::rng::substream;
use heteroseg::sampler::{apply_drop, plan_epoch, DropPolicy, PatchConfig, Sampler};
use heteroseg::training::{
    plan_remap, remap_channels, train, Checkpoint, Control, FinetuneMode, TrainConfig, TrainingSet,
};
use heteroseg::{CaseSample, ModalityRegistry, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

/// Fails the outcome when it ran longer than `budget`.
fn within(budget: Duration, start: Instant, mut o: Outcome) -> Outcome {
    let took = start.elapsed();
    if took > budget {
        o.pass = false;
        o.detail = format!("{}; runtime {took:.1?} exceeds {budget:?}", o.detail);
    }
    o
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn backbone(levels: usize, base_width: usize) -> BackboneConfig {
    BackboneConfig {
        levels,
        base_width,
        blocks_per_level: 1,
    }
}

fn registry(names: &[&str]) -> ModalityRegistry {
    ModalityRegistry::from_ordered(names).unwrap()
}

fn random_tensor(shape: Shape, rng: &mut impl Rng) -> Tensor<f32> {
    Tensor::from_vec(
        shape,
        (0..shape.len()).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
}

fn synthetic_samples(
    db: &str,
    mods: &[&str],
    reg: &ModalityRegistry,
    edge: usize,
    n: usize,
    seed: u64,
) -> Vec<CaseSample> {
    let spec = SyntheticSpec::new(db, [edge; 3], n, mods, seed);
    (0..n)
        .map(|i| {
            preprocess(
                &synthesize_case(&spec, i).unwrap(),
                reg,
                &LoadOptions::default(),
            )
            .unwrap()
        })
        .collect()
}

// 1. Attention weights sum to one at every voxel.
fn fusion_normalization() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    let mut maps = 0;
    for family in [Family::LfUnet, Family::MafUnet] {
        for c in [2usize, 3, 7] {
            let names = &heteroseg::registry::CANONICAL_MODALITIES[..c];
            let model = Model::<f32>::new(
                ModelSpec::new(family, backbone(3, 4), registry(names)),
                c as u64,
            )
            .unwrap();
            let x = random_tensor(Shape::new(2, c, 8, 8, 8), &mut rng);
            let (_, attention) = model
                .predict_with_attention(&x, &vec![vec![true; c]; 2])
                .unwrap();
            for a in &attention {
                let s = a.shape();
                for n in 0..s.batch() {
                    for v in 0..s.spatial_len() {
                        let sum: f64 = (0..s.channels()).map(|k| a.channel(n, k)[v] as f64).sum();
                        worst = worst.max((sum - 1.0).abs());
                    }
                }
                maps += 1;
            }
        }
    }
    within(
        minutes(1),
        start,
        Outcome::new(
            maps > 0 && worst <= 1e-5,
            format!("{maps} attention maps, max |sum - 1| = {worst:.2e} (tolerance 1e-5)"),
        ),
    )
}

// 2. An absent modality is exactly a zeroed channel.
fn zero_fill_equivalence() -> Outcome {
    let reg = registry(&["FLAIR", "T1", "T2"]);
    let sample = synthetic_samples("db", &["FLAIR", "T1", "T2"], &reg, 16, 1, 3).remove(0);
    let model =
        Model::<f32>::new(ModelSpec::new(Family::MultiUnet, backbone(3, 4), reg), 5).unwrap();
    let mut identical = true;
    for m in 0..3 {
        let absent = sample.restrict_to(&(0..3).filter(|&c| c != m).collect::<Vec<_>>());
        let mut zeroed = sample.clone();
        zeroed.volume.channel_mut(0, m).fill(0.0);
        let a = model
            .predict(&absent.volume, std::slice::from_ref(&absent.presence))
            .unwrap();
        let b = model
            .predict(&zeroed.volume, &[zeroed.presence.clone()])
            .unwrap();
        identical &= !absent.presence[m] && zeroed.presence[m];
        identical &= a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
    }
    Outcome::new(
        identical,
        "outputs bit-identical for each of 3 modalities marked absent vs zeroed",
    )
}

// 3. Per-modality survival under the drop rule.
fn drop_statistics() -> Outcome {
    let start = Instant::now();
    let draws = 100_000;
    let shape = Shape::new(1, 4, 2, 2, 2);
    let sample = CaseSample {
        database_id: "db".into(),
        case_id: "c".into(),
        volume: Tensor::full(shape, 1.0),
        presence: vec![true; 4],
        label: Tensor::zeros(shape.with_channels(1)),
        spacing: [1.0; 3],
    };
    let policy = DropPolicy::default();
    let mut survived = [0usize; 4];
    let mut rng = substream(11, 0, 0);
    for _ in 0..draws {
        let out = apply_drop(&sample, &policy, &mut rng);
        for (c, s) in survived.iter_mut().enumerate() {
            *s += out.presence[c] as usize;
        }
    }
    let rates: Vec<f64> = survived.iter().map(|&s| s as f64 / draws as f64).collect();
    let four_ok = rates.iter().all(|r| (r - 0.625).abs() <= 0.01);

    let single = sample.restrict_to(&[2]);
    let mut never = true;
    for _ in 0..draws {
        never &= apply_drop(&single, &policy, &mut rng) == single;
    }
    let rates_text: Vec<String> = rates.iter().map(|r| format!("{r:.4}")).collect();
    within(
        minutes(1),
        start,
        Outcome::new(
            four_ok && never,
            format!(
                "C=4 survival [{}] (target 0.625 ± 0.01); C=1 unchanged in all {draws} draws: {never}",
                rates_text.join(", ")
            ),
        ),
    )
}

fn brute_overlap(p: &[bool], g: &[bool]) -> (f64, f64, f64) {
    let inter = p.iter().zip(g).filter(|(a, b)| **a && **b).count();
    let np = p.iter().filter(|&&v| v).count();
    let ng = g.iter().filter(|&&v| v).count();
    let dice = if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    };
    let sens = if ng == 0 {
        1.0
    } else {
        inter as f64 / ng as f64
    };
    let prec = if np == 0 {
        1.0
    } else {
        inter as f64 / np as f64
    };
    (dice, sens, prec)
}

fn brute_boundary(m: &[bool], shape: [usize; 3]) -> Vec<[usize; 3]> {
    let [d, h, w] = shape;
    let at = |z: isize, y: isize, x: isize| -> bool {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && m[(z as usize * h + y as usize) * w + x as usize]
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !m[(z * h + y) * w + x] {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let nbrs = [
                    (1, 0, 0),
                    (-1, 0, 0),
                    (0, 1, 0),
                    (0, -1, 0),
                    (0, 0, 1),
                    (0, 0, -1),
                ];
                if nbrs.iter().any(|(a, b, c)| !at(zi + a, yi + b, xi + c)) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn brute_assd(a: &[bool], b: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> f64 {
    let (ba, bb) = (brute_boundary(a, shape), brute_boundary(b, shape));
    let dist = |p: &[usize; 3], q: &[usize; 3]| -> f64 {
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * spacing[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
        let total: f64 = from
            .iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .sum();
        total / from.len() as f64
    };
    (directed(&ba, &bb) + directed(&bb, &ba)) / 2.0
}

fn random_mask(n: usize, density: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(density)).collect()
}

// 4. Metrics against brute-force oracles.
fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut overlap_mismatch = 0;
    for i in 0..200 {
        let shape = [
            rng.gen_range(1..=10),
            rng.gen_range(1..=10),
            rng.gen_range(1..=10),
        ];
        let n: usize = shape.iter().product();
        // Include empty masks in the mix to exercise the conventions.
        let (dp, dg) = match i % 10 {
            0 => (0.0, rng.gen_range(0.0..0.6)),
            1 => (rng.gen_range(0.0..0.6), 0.0),
            2 => (0.0, 0.0),
            _ => (rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6)),
        };
        let (p, g) = (random_mask(n, dp, &mut rng), random_mask(n, dg, &mut rng));
        let c = Confusion::of(&p, &g).unwrap();
        if (c.dice(), c.sensitivity(), c.precision()) != brute_overlap(&p, &g) {
            overlap_mismatch += 1;
        }
    }
    let mut worst = 0f64;
    let mut pairs = 0;
    while pairs < 50 {
        let shape = [
            rng.gen_range(2..=20),
            rng.gen_range(2..=20),
            rng.gen_range(2..=20),
        ];
        let n: usize = shape.iter().product();
        let spacing = if pairs % 2 == 0 {
            [1.0, 1.0, 1.0]
        } else {
            [
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
            ]
        };
        let (p, g) = (
            random_mask(n, rng.gen_range(0.05..0.5), &mut rng),
            random_mask(n, rng.gen_range(0.05..0.5), &mut rng),
        );
        if !p.contains(&true) || !g.contains(&true) {
            continue;
        }
        let fast = assd(&p, &g, shape, spacing).unwrap();
        worst = worst.max((fast - brute_assd(&p, &g, shape, spacing)).abs());
        pairs += 1;
    }
    within(
        minutes(5),
        start,
        Outcome::new(
            overlap_mismatch == 0 && worst <= 1e-9,
            format!("overlap mismatches {overlap_mismatch}/200 (exact); ASSD max error {worst:.2e} mm over 50 pairs (tolerance 1e-9)"),
        ),
    )
}

// 5. Oversampling balances databases of sizes {12, 3, 5}.
fn oversampling() -> Outcome {
    let db = |id: &str, n: usize| DatabaseManifest {
        database_id: id.into(),
        modalities: vec!["T1".into()],
        cases: (0..n)
            .map(|i| CaseRecord::new(format!("{id}{i}"), Split::Train))
            .collect(),
    };
    let dbs = [db("a", 12), db("b", 3), db("c", 5)];
    let mut ok = true;
    let mut seen = Vec::new();
    for epoch in 0..20 {
        let plan = plan_epoch(&dbs, &mut substream(5, 1, epoch)).unwrap();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for d in &plan.draws {
            *counts.entry(d.database_id.as_str()).or_default() += 1;
        }
        ok &= counts.len() == 3 && counts.values().all(|&c| c.abs_diff(12) <= 1);
        seen.push(counts.values().copied().collect::<Vec<_>>());
    }
    Outcome::new(
        ok,
        format!(
            "20 epochs, per-database draws {:?} (target 12 ± 1)",
            seen[0]
        ),
    )
}

fn tiny_synth(
    dir: &Path,
    modalities: &[&[&str]],
    cases: usize,
    eval_cases: usize,
    edge: usize,
    seed: u64,
    prefix: &str,
) {
    synthesize(&SynthRequest {
        out_dir: dir.to_path_buf(),
        modalities: modalities
            .iter()
            .map(|m| m.iter().map(|s| s.to_string()).collect())
            .collect(),
        cases,
        eval_cases,
        shape: [edge; 3],
        seed,
        prefix: prefix.into(),
    })
    .unwrap();
}

// 6. Learning-rate schedule and defaults, read back from a run directory.
fn schedule() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_synth(&data, &[&["FLAIR"]], 2, 0, 16, 1, "db");
    let mut cfg = RunConfig {
        data_root: data,
        output_dir: dir.path().join("run"),
        ..RunConfig::default()
    };
    cfg.model.backbone = backbone(2, 2);
    cfg.train.max_steps = Some(1);
    let cfg = cfg.resolved(None);
    run_train(&cfg, &mut |_, _| Control::Continue).unwrap();
    let back = RunConfig::load(&cfg.output_dir.join(RESOLVED_CONFIG_FILE)).unwrap();
    let t = &back.train;
    let ok = t.lr(150) == 0.001 && t.lr(151) == 0.0001 && t.epochs == 600 && t.batch_size == 2;
    Outcome::new(
        ok,
        format!(
            "lr(150) = {}, lr(151) = {}, epochs = {}, batch = {}",
            t.lr(150),
            t.lr(151),
            t.epochs,
            t.batch_size
        ),
    )
}

// 7. Each fusion family overfits two 48³ cases.
fn overfit_smoke() -> Outcome {
    let start = Instant::now();
    let reg = registry(&["FLAIR", "T1"]);
    let samples = synthetic_samples("toy", &["FLAIR", "T1"], &reg, 48, 2, 11);
    let set = TrainingSet::from_samples(samples.clone(), &reg).unwrap();
    let sampler = Sampler::new(0, DropPolicy::disabled(), PatchConfig::whole_volume());
    let cfg = TrainConfig {
        epochs: 300,
        max_steps: Some(300),
        ..TrainConfig::default()
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for family in [Family::MultiUnet, Family::LfUnet, Family::MafUnet] {
        let mut model =
            Model::<f32>::new(ModelSpec::new(family, backbone(3, 4), reg.clone()), 0).unwrap();
        let mut best = (0.0, 0);
        let summary = train(
            &mut model,
            &set,
            &[],
            &cfg,
            &sampler,
            None,
            &mut |info, m| {
                if info.step % 10 != 0 {
                    return Control::Continue;
                }
                let dice = evaluate(m, &samples, &reg, None).unwrap().overall.dice;
                if dice > best.0 {
                    best = (dice, info.step);
                }
                if dice >= 0.95 {
                    Control::Stop
                } else {
                    Control::Continue
                }
            },
        )
        .unwrap();
        let reached = best.0 >= 0.95 && summary.steps <= 300;
        ok &= reached;
        parts.push(format!("{family} Dice {:.4} at step {}", best.0, best.1));
    }
    within(
        minutes(15),
        start,
        Outcome::new(
            ok,
            format!("{} (target ≥ 0.95 within 300 steps)", parts.join("; ")),
        ),
    )
}

fn quick_run_config(data: &Path, out: &Path, seed: u64, steps: usize) -> RunConfig {
    let mut cfg = RunConfig {
        data_root: data.to_path_buf(),
        output_dir: out.to_path_buf(),
        seed,
        ..RunConfig::default()
    };
    cfg.model.backbone = backbone(3, 4);
    cfg.sampler.patch = PatchConfig::whole_volume();
    cfg.train.epochs = steps;
    cfg.train.max_steps = Some(steps);
    cfg.train.val_every = steps;
    cfg.resolved(None)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// 8. Modality dropping makes single-modality inference degrade less.
fn drop_reduces_missing_modality_loss() -> Outcome {
    let start = Instant::now();
    let mut drop_losses = Vec::new();
    let mut plain_losses = Vec::new();
    for seed in 0..3u64 {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        tiny_synth(&data, &[&["FLAIR", "T2"]], 12, 4, 24, 100 + seed, "db");
        for drop in [true, false] {
            let out = dir.path().join(if drop { "drop" } else { "all" });
            let mut cfg = quick_run_config(&data, &out, seed, 200);
            cfg.sampler.drop.enabled = drop;
            run_train(&cfg, &mut |_, _| Control::Continue).unwrap();
            let report = run_evaluate(&EvaluateRequest {
                checkpoint: out.join("last.ckpt"),
                data_root: data.clone(),
                manifests: cfg.manifest_paths(),
                databases: Vec::new(),
                split: Split::Eval,
                modalities: None,
                subset_sweep: true,
                load: cfg.load,
                out_dir: None,
            })
            .unwrap();
            // The sweep reports a signed change; the loss is its negation.
            let loss = -report.sweep.unwrap().mean_dice_drop;
            if drop {
                &mut drop_losses
            } else {
                &mut plain_losses
            }
            .push(loss);
        }
    }
    let (d, a) = (mean(&drop_losses), mean(&plain_losses));
    within(
        minutes(60),
        start,
        Outcome::new(
            d < a,
            format!(
                "mean single-modality Dice drop over 3 seeds: with drop {d:.4} {:?}, all modalities {a:.4} {:?}",
                rounded(&drop_losses),
                rounded(&plain_losses)
            ),
        ),
    )
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

// 9. Fine-tuning from a pretrained checkpoint beats training from scratch.
fn finetune_beats_scratch() -> Outcome {
    let start = Instant::now();
    let mut dice: BTreeMap<FinetuneMode, Vec<f64>> = BTreeMap::new();
    for seed in 0..3u64 {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        tiny_synth(
            &data,
            &[&["FLAIR", "T1"], &["T1", "T2"]],
            8,
            0,
            24,
            200 + seed,
            "src",
        );
        tiny_synth(
            &data.join("target"),
            &[&["FLAIR", "T2"]],
            20,
            4,
            24,
            300 + seed,
            "tgt",
        );
        let mut pre = quick_run_config(&data, &dir.path().join("pretrain"), seed, 300);
        pre.manifests = vec!["manifest.toml".into()];
        run_train(&pre, &mut |_, _| Control::Continue).unwrap();
        for mode in FinetuneMode::ALL {
            let mut cfg = quick_run_config(
                &data.join("target"),
                &dir.path().join(mode.as_str()),
                seed,
                40,
            );
            cfg.finetune = Some(FinetuneSection {
                source: dir.path().join("pretrain/last.ckpt"),
                target_database: "tgt0".into(),
                mode,
                budget: Some(8),
            });
            let result = run_finetune(&cfg, &mut |_, _| Control::Continue).unwrap();
            dice.entry(mode)
                .or_default()
                .push(result.report.unwrap().overall.dice);
        }
    }
    let m = |mode| mean(&dice[&mode]);
    let (scratch, tuned, progressive) = (
        m(FinetuneMode::Scratch),
        m(FinetuneMode::Finetune),
        m(FinetuneMode::Progressive),
    );
    within(
        minutes(60),
        start,
        Outcome::new(
            tuned > scratch && progressive > scratch,
            format!(
                "mean target Dice over 3 seeds with 8 labels: scratch {scratch:.4} {:?}, finetune {tuned:.4} {:?}, progressive {progressive:.4} {:?}",
                rounded(&dice[&FinetuneMode::Scratch]),
                rounded(&dice[&FinetuneMode::Finetune]),
                rounded(&dice[&FinetuneMode::Progressive])
            ),
        ),
    )
}

// 10. Progressive fine-tuning leaves the first column untouched.
fn progressive_freeze() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_synth(&data, &[&["FLAIR", "T1"]], 4, 1, 16, 7, "db");
    let pre = quick_run_config(&data, &dir.path().join("pretrain"), 0, 4);
    run_train(&pre, &mut |_, _| Control::Continue).unwrap();
    let source = Checkpoint::load(&dir.path().join("pretrain/last.ckpt")).unwrap();

    let mut cfg = quick_run_config(&data, &dir.path().join("progressive"), 0, 8);
    cfg.finetune = Some(FinetuneSection {
        source: dir.path().join("pretrain/last.ckpt"),
        target_database: "db0".into(),
        mode: FinetuneMode::Progressive,
        budget: None,
    });
    let mut max_grad = 0f64;
    let mut steps = 0;
    run_finetune(&cfg, &mut |info, _| {
        max_grad = max_grad.max(info.frozen_grad_sq.sqrt());
        steps += 1;
        Control::Continue
    })
    .unwrap();
    let tuned = Checkpoint::load(&dir.path().join("progressive/last.ckpt")).unwrap();
    let mut max_diff = 0f64;
    let mut column1 = 0;
    for (_, p) in tuned.model.store.iter() {
        if let Some(name) = p.name.strip_prefix("column1.") {
            let src = &source
                .model
                .store
                .get(source.model.store.find(name).unwrap())
                .value;
            max_diff = max_diff.max(p.value.max_abs_diff(src));
            column1 += 1;
        }
    }
    Outcome::new(
        column1 > 0 && max_diff == 0.0 && max_grad == 0.0 && steps == 8,
        format!("{column1} column-1 tensors, max abs diff {max_diff}, max column-1 gradient norm {max_grad} over {steps} steps"),
    )
}

// 11. Novel modalities reuse unused channels before expanding.
fn channel_remap() -> Outcome {
    let source = registry(&["PD", "FLAIR", "T1", "T1c", "T2", "DWI"]);
    let swi = plan_remap(&source, &["FLAIR", "T1", "T2", "SWI"]).unwrap();
    let swi_ok = swi.reassigned.get("SWI") == Some(&source.channel_of("PD").unwrap())
        && swi.expanded_filters() == 0;

    let small = registry(&["FLAIR", "T1", "T2"]);
    let three = plan_remap(&small, &["FLAIR", "T1", "SWI", "DWI", "PD"]).unwrap();
    let three_ok = three.reassigned.len() == 1 && three.expanded_filters() == 2;
    let model =
        Model::<f32>::new(ModelSpec::new(Family::MultiUnet, backbone(2, 2), small), 0).unwrap();
    let (_, remapped) = remap_channels(&model, &["FLAIR", "T1", "SWI", "DWI", "PD"], 1).unwrap();
    let widened = remapped.in_channels() == 5;
    Outcome::new(
        swi_ok && three_ok && widened,
        format!(
            "SWI -> channel {:?} (PD is {}), {} expanded; 3 novel with 1 free: {} reused, {} expanded; remapped input width {}",
            swi.reassigned.get("SWI"),
            source.channel_of("PD").unwrap(),
            swi.expanded_filters(),
            three.reassigned.len(),
            three.expanded_filters(),
            remapped.in_channels()
        ),
    )
}

// 12. Fusion-block gradients against finite differences.
fn gradient_check() -> Outcome {
    let check = fusion_gradient_check(3, 2, 4, 1e-5, 12);
    Outcome::new(
        check.max_rel_error <= 1e-4,
        format!(
            "{} derivatives, max relative error {:.2e} (tolerance 1e-4)",
            check.checked, check.max_rel_error
        ),
    )
}

// 13. Four modalities give fifteen subsets; the full one matches plain evaluation.
fn subset_sweep_count() -> Outcome {
    let mods = ["FLAIR", "T1", "T1c", "T2"];
    let reg = registry(&mods);
    let cases = synthetic_samples("db", &mods, &reg, 16, 3, 13);
    let model = Model::<f32>::new(
        ModelSpec::new(Family::MafUnet, backbone(3, 4), reg.clone()),
        2,
    )
    .unwrap();
    let sweep = subset_sweep(&model, &cases, &reg, &SweepConfig::default()).unwrap();
    let plain = evaluate(&model, &cases, &reg, None).unwrap();
    let count = sweep.sweep.as_ref().unwrap().subsets["db"];
    let full: Vec<_> = sweep
        .records
        .iter()
        .filter(|r| r.subset.len() == 4)
        .cloned()
        .collect();
    let bits = |r: &heteroseg::metrics::CaseMetrics| {
        (
            r.case_id.clone(),
            r.dice.to_bits(),
            r.sensitivity.to_bits(),
            r.precision.to_bits(),
            r.assd_mm.map(f64::to_bits),
        )
    };
    let equal = full.len() == plain.records.len()
        && full
            .iter()
            .zip(&plain.records)
            .all(|(a, b)| bits(a) == bits(b));
    Outcome::new(
        count == 15 && equal,
        format!("{count} subsets evaluated (target 15); full-subset rows bit-identical to plain evaluation: {equal}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("fusion normalization", fusion_normalization),
        ("zero-fill equivalence", zero_fill_equivalence),
        ("drop-rule statistics", drop_statistics),
        ("metric oracles", metric_oracles),
        ("oversampling", oversampling),
        ("schedule", schedule),
        ("overfit smoke", overfit_smoke),
        (
            "modality drop reduces missing-modality loss",
            drop_reduces_missing_modality_loss,
        ),
        ("fine-tuning beats scratch", finetune_beats_scratch),
        ("progressive freeze", progressive_freeze),
        ("channel remap", channel_remap),
        ("gradient check", gradient_check),
        ("subset sweep count", subset_sweep_count),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        println!(
            "{} criterion {n:>2} {name}: {} [{:.1?}]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed()
        );
        failed += !o.pass as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

//! The experiment stages and their orchestration. Every stage reads and
//! writes a fixed subdirectory of the run root and is skipped on rerun
//! when its checksum key matches.

use std::fs;
use std::path::PathBuf;

use acat_core::attention::{train_acat, AcatModel};
use acat_core::counterfactual::{
    difference_map, optimize_counterfactual, saliency_from_counterfactuals,
    CounterfactualConfig,
};
use acat_core::eval::{
    acat_accuracy, acat_preactivation_variance, baseline_accuracy, classification_metrics,
    dropout_control, fnv1a, iou_dice, pointing_game, preactivation_variance, run_ablation_suite,
    EvalReport, SeedWorld,
};
use acat_core::nets::{
    train_autoencoder, train_model, Autoencoder, ClassifierConfig, ModelGraph, TrainLog,
    VolumeBatch,
};
use acat_core::saliency::{attribution_map, AttributionConfig, SaliencyMap, SaliencyMethod};
use acat_core::synth::{
    generate_dataset, ClassLabel, DatasetSpec, Geometry, SizeTier, Split, SynthSample,
};
use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use crate::archive;
use crate::checkpoint;
use crate::config::{parse_method, RunConfig};
use crate::maps;
use crate::report;
use crate::stages::{run_stage, sha256_hex, Stage};

pub struct Ctx {
    pub root: PathBuf,
    pub config: RunConfig,
    pub threads: usize,
}

impl Ctx {
    pub fn new(root: PathBuf, config: RunConfig, threads: usize) -> Ctx {
        Ctx { root, config, threads }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn baseline_dir(&self) -> PathBuf {
        self.root.join("baseline")
    }

    pub fn ae_dir(&self) -> PathBuf {
        self.root.join("ae")
    }

    pub fn counterfactual_dir(&self) -> PathBuf {
        self.root.join("counterfactuals")
    }

    pub fn saliency_root(&self) -> PathBuf {
        self.root.join("saliency")
    }

    pub fn saliency_dir(&self, method: &str) -> PathBuf {
        self.saliency_root().join(method)
    }

    pub fn acat_dir(&self) -> PathBuf {
        self.root.join("acat")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.root.join("ablate")
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }
}

fn announce(name: &str, ran: bool) {
    if ran {
        println!("[{name}] done");
    } else {
        println!("[{name}] up to date");
    }
}

fn load_data(ctx: &Ctx) -> Result<(Vec<SynthSample>, Split, DatasetSpec)> {
    archive::read_dataset(&ctx.data_dir(), "run gen-data first")
}

fn load_baseline(ctx: &Ctx) -> Result<ModelGraph> {
    checkpoint::load_classifier(&ctx.baseline_dir(), "run train-baseline first")
}

fn load_ae(ctx: &Ctx) -> Result<Autoencoder> {
    checkpoint::load_autoencoder(&ctx.ae_dir(), "run train-ae first")
}

fn load_acat(ctx: &Ctx) -> Result<AcatModel> {
    checkpoint::load_acat(&ctx.acat_dir(), "run train-acat first")
}

fn split_batches(
    samples: &[SynthSample],
    split: &Split,
) -> Result<(VolumeBatch, VolumeBatch)> {
    let all = VolumeBatch::from_samples(samples)?;
    Ok((all.select(&split.train)?, all.select(&split.test)?))
}

fn select_maps(maps: &[SaliencyMap], indices: &[usize]) -> Result<Vec<SaliencyMap>> {
    indices
        .iter()
        .map(|&i| {
            maps.get(i).cloned().ok_or_else(|| {
                anyhow::anyhow!("map store has no entry {i} (holds {})", maps.len())
            })
        })
        .collect()
}

/// Maps for the given samples with the configured method; `ae` is only
/// consulted for the counterfactual method.
fn make_maps(
    f: &ModelGraph,
    ae: Option<&Autoencoder>,
    samples: &[SynthSample],
    indices: &[usize],
    method: SaliencyMethod,
    cf: &CounterfactualConfig,
    ig_steps: usize,
) -> Result<Vec<SaliencyMap>> {
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let x = &samples[i].volume;
        let map = match method {
            SaliencyMethod::Counterfactual => {
                let ae = ae.context("counterfactual maps need the autoencoder")?;
                saliency_from_counterfactuals(f, ae, x, cf)
                    .with_context(|| format!("sample {i}"))?
            }
            _ => {
                let mut acfg = AttributionConfig::new(method);
                acfg.steps = ig_steps;
                attribution_map(f, x, &acfg).with_context(|| format!("sample {i}"))?
            }
        };
        out.push(map);
    }
    Ok(out)
}

pub fn cmd_gen_data(ctx: &Ctx) -> Result<()> {
    let stage = Stage {
        name: "gen-data",
        dir: ctx.data_dir(),
        config: json!({"seed": ctx.seed(), "dataset": ctx.config.dataset}),
        seed: ctx.seed(),
        inputs: vec![],
    };
    let spec = DatasetSpec::standard(ctx.config.dataset.samples, ctx.seed());
    let ran = run_stage(&stage, || {
        let (samples, split) = generate_dataset(&spec)?;
        archive::write_dataset(&ctx.data_dir(), &samples, &split, &spec)
    })?;
    announce(stage.name, ran);
    Ok(())
}

#[derive(Serialize)]
struct FitSummary {
    test_accuracy: f32,
    log: TrainLog,
}

pub fn cmd_train_baseline(ctx: &Ctx) -> Result<()> {
    let stage = Stage {
        name: "train-baseline",
        dir: ctx.baseline_dir(),
        config: json!({"seed": ctx.seed(), "baseline": ctx.config.baseline}),
        seed: ctx.seed(),
        inputs: vec![ctx.data_dir()],
    };
    let ran = run_stage(&stage, || {
        let (samples, split, _) = load_data(ctx)?;
        let (train, test) = split_batches(&samples, &split)?;
        let f = ModelGraph::build(&ClassifierConfig::standard(ClassLabel::COUNT), ctx.seed())?;
        let log = train_model(&f, &train, &ctx.config.baseline.to_train_config(ctx.seed()))?;
        checkpoint::save_classifier(&ctx.baseline_dir(), &f)?;
        let summary = FitSummary { test_accuracy: baseline_accuracy(&f, &test)?, log };
        let json = serde_json::to_string_pretty(&summary)?;
        fs::write(ctx.baseline_dir().join("train_log.json"), json + "\n")?;
        Ok(())
    })?;
    announce(stage.name, ran);
    Ok(())
}

pub fn cmd_train_ae(ctx: &Ctx) -> Result<()> {
    let stage = Stage {
        name: "train-ae",
        dir: ctx.ae_dir(),
        config: json!({"seed": ctx.seed(), "autoencoder": ctx.config.autoencoder}),
        seed: ctx.seed(),
        inputs: vec![ctx.data_dir()],
    };
    let ran = run_stage(&stage, || {
        let (samples, split, spec) = load_data(ctx)?;
        let (train, _) = split_batches(&samples, &split)?;
        let ae = Autoencoder::build((1, spec.height, spec.width), ctx.seed())?;
        let log =
            train_autoencoder(&ae, &train, &ctx.config.autoencoder.to_train_config(ctx.seed()))?;
        checkpoint::save_autoencoder(&ctx.ae_dir(), &ae)?;
        let json = serde_json::to_string_pretty(&log)?;
        fs::write(ctx.ae_dir().join("recon_log.json"), json + "\n")?;
        Ok(())
    })?;
    announce(stage.name, ran);
    Ok(())
}

pub fn cmd_gen_counterfactuals(ctx: &Ctx) -> Result<()> {
    let stage = Stage {
        name: "gen-counterfactuals",
        dir: ctx.counterfactual_dir(),
        config: json!({"seed": ctx.seed(), "counterfactual": ctx.config.counterfactual}),
        seed: ctx.seed(),
        inputs: vec![ctx.data_dir(), ctx.baseline_dir(), ctx.ae_dir()],
    };
    let ran = run_stage(&stage, || {
        let (samples, split, _) = load_data(ctx)?;
        let f = load_baseline(ctx)?;
        let ae = load_ae(ctx)?;
        let cf = ctx.config.counterfactual.to_core();
        let dir = ctx.counterfactual_dir();
        fs::create_dir_all(dir.join("traces"))?;
        let mut index = Vec::new();
        for &i in &split.test {
            let s = &samples[i];
            if s.regions.is_empty() || s.label.index() == cf.target {
                continue;
            }
            let trace = optimize_counterfactual(&f, &ae, &s.volume, &cf)
                .with_context(|| format!("sample {i}"))?;
            maps::write_trace_jsonl(&dir.join(format!("traces/sample_{i:04}.jsonl")), &trace)?;
            let diff = difference_map(&s.volume, trace.final_image())?;
            maps::write_volume_images(&dir.join("diffs"), &format!("sample_{i:04}"), &diff)?;
            let last = trace.steps.last().expect("nonempty trace");
            index.push(json!({
                "sample": i,
                "label": s.label,
                "objective": last.objective,
                "target_prob": last.probs.to_vec()[cf.target],
            }));
        }
        if index.is_empty() {
            bail!("no test sample needs a counterfactual (none outside the target class)");
        }
        let json = serde_json::to_string_pretty(&index)?;
        fs::write(dir.join("index.json"), json + "\n")?;
        Ok(())
    })?;
    announce(stage.name, ran);
    Ok(())
}

pub fn cmd_gen_saliency(ctx: &Ctx) -> Result<()> {
    let method = parse_method(&ctx.config.saliency.method)?;
    let counterfactual = method == SaliencyMethod::Counterfactual;
    let mut config = json!({"seed": ctx.seed(), "saliency": ctx.config.saliency});
    let mut inputs = vec![ctx.data_dir(), ctx.baseline_dir()];
    if counterfactual {
        config["counterfactual"] = serde_json::to_value(&ctx.config.counterfactual)?;
        inputs.push(ctx.ae_dir());
    }
    let stage = Stage {
        name: "gen-saliency",
        dir: ctx.saliency_dir(method.name()),
        config,
        seed: ctx.seed(),
        inputs,
    };
    let config_sha = sha256_hex(&serde_json::to_vec(&stage.config)?);
    let ran = run_stage(&stage, || {
        let (samples, _, _) = load_data(ctx)?;
        let f = load_baseline(ctx)?;
        let ae = if counterfactual { Some(load_ae(ctx)?) } else { None };
        let all: Vec<usize> = (0..samples.len()).collect();
        let maps = make_maps(
            &f,
            ae.as_ref(),
            &samples,
            &all,
            method,
            &ctx.config.counterfactual.to_core(),
            ctx.config.saliency.steps,
        )?;
        maps::write_maps(&ctx.saliency_dir(method.name()), &maps, ctx.seed(), &config_sha)
    })?;
    announce(stage.name, ran);
    Ok(())
}

pub fn cmd_train_acat(ctx: &Ctx) -> Result<()> {
    let method = parse_method(&ctx.config.saliency.method)?;
    let stage = Stage {
        name: "train-acat",
        dir: ctx.acat_dir(),
        config: json!({"seed": ctx.seed(), "acat": ctx.config.acat}),
        seed: ctx.seed(),
        inputs: vec![
            ctx.data_dir(),
            ctx.baseline_dir(),
            ctx.saliency_dir(method.name()),
        ],
    };
    let ran = run_stage(&stage, || {
        let (samples, split, _) = load_data(ctx)?;
        let f = load_baseline(ctx)?;
        let (_, maps) =
            maps::read_maps(&ctx.saliency_dir(method.name()), "run gen-saliency first")?;
        if maps.len() != samples.len() {
            bail!("map store holds {} maps for {} samples", maps.len(), samples.len());
        }
        let (train, test) = split_batches(&samples, &split)?;
        let train_maps = select_maps(&maps, &split.train)?;
        let test_maps = select_maps(&maps, &split.test)?;
        let acat_config = ctx.config.acat.to_acat_config();
        let model = AcatModel::build(f, &acat_config, ctx.seed())?;
        let log = train_acat(
            &model,
            &train,
            &train_maps,
            &ctx.config.acat.to_train_config(ctx.seed()),
        )?;
        checkpoint::save_acat(&ctx.acat_dir(), &model, &acat_config)?;
        let summary = FitSummary {
            test_accuracy: acat_accuracy(&model, &test, &test_maps)?,
            log,
        };
        let json = serde_json::to_string_pretty(&summary)?;
        fs::write(ctx.acat_dir().join("train_log.json"), json + "\n")?;
        Ok(())
    })?;
    announce(stage.name, ran);
    Ok(())
}

fn method_stores(ctx: &Ctx) -> Result<Vec<(String, Vec<SaliencyMap>)>> {
    let root = ctx.saliency_root();
    if !root.exists() {
        bail!("missing saliency maps under {}; run gen-saliency first", root.display());
    }
    let mut names: Vec<String> = fs::read_dir(&root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut out = Vec::new();
    for name in names {
        let (_, maps) = maps::read_maps(&root.join(&name), "run gen-saliency first")?;
        out.push((name, maps));
    }
    if out.is_empty() {
        bail!("no saliency map stores under {}; run gen-saliency first", root.display());
    }
    Ok(out)
}

pub fn cmd_evaluate(ctx: &Ctx) -> Result<()> {
    let stage = Stage {
        name: "evaluate",
        dir: ctx.eval_dir(),
        config: json!({"seed": ctx.seed(), "eval": ctx.config.eval}),
        seed: ctx.seed(),
        inputs: vec![
            ctx.data_dir(),
            ctx.baseline_dir(),
            ctx.acat_dir(),
            ctx.saliency_root(),
        ],
    };
    let ran = run_stage(&stage, || evaluate(ctx))?;
    announce(stage.name, ran);
    Ok(())
}

fn evaluate(ctx: &Ctx) -> Result<()> {
    let seed = ctx.seed();
    let (samples, split, spec) = load_data(ctx)?;
    let f = load_baseline(ctx)?;
    let model = load_acat(ctx)?;
    let stores = method_stores(ctx)?;
    let configured = parse_method(&ctx.config.saliency.method)?;
    let (_, configured_maps) = stores
        .iter()
        .find(|(name, _)| name == configured.name())
        .with_context(|| {
            format!(
                "missing map store {}; run gen-saliency first",
                ctx.saliency_dir(configured.name()).display()
            )
        })?;
    let (_, test) = split_batches(&samples, &split)?;
    let tiers: Vec<Option<SizeTier>> = split.test.iter().map(|&i| samples[i].tier).collect();
    let test_maps = select_maps(configured_maps, &split.test)?;

    let hash = |name: &str| fnv1a(format!("eval;{name};seed={seed}").as_bytes());
    let single = |name: &str, value: f32| {
        EvalReport::from_runs(name, hash(name), vec![seed], vec![value])
    };
    let mut reports = Vec::new();

    let base_probs = f.forward_batch(&test, None)?;
    let base_metrics = classification_metrics(&base_probs, &test.labels, Some(&tiers))?;
    let acat_probs = model.forward_batch(&test, &test_maps, None)?;
    let acat_metrics = classification_metrics(&acat_probs, &test.labels, Some(&tiers))?;
    reports.push(single("accuracy[baseline]", base_metrics.accuracy)?);
    reports.push(single("accuracy[acat]", acat_metrics.accuracy)?);
    for (tag, m) in [("baseline", &base_metrics), ("acat", &acat_metrics)] {
        if let Some(v) = m.sensitivity {
            reports.push(single(&format!("sensitivity[{tag}]"), v)?);
        }
        if let Some(v) = m.specificity {
            reports.push(single(&format!("specificity[{tag}]"), v)?);
        }
    }

    let positives: Vec<usize> = (0..split.test.len())
        .filter(|&j| !samples[split.test[j]].regions.is_empty())
        .collect();
    if positives.is_empty() {
        bail!("test split has no positive samples to score maps on");
    }
    let geom = Geometry::new(spec.height, spec.width);
    for (name, maps) in &stores {
        let store_test = select_maps(maps, &split.test)?;
        let pos_maps: Vec<SaliencyMap> =
            positives.iter().map(|&j| store_test[j].clone()).collect();
        let pos_truth: Vec<_> =
            positives.iter().map(|&j| test.truth[j].clone()).collect();
        let score = pointing_game(&pos_maps, &pos_truth, &geom)?;
        reports.push(single(&format!("pointing[{name}]"), score)?);
        let mut iou_sum = 0.0f64;
        let mut dice_sum = 0.0f64;
        for &j in &positives {
            let (iou, dice) = iou_dice(&store_test[j], &samples[split.test[j]].mask)?;
            iou_sum += iou as f64;
            dice_sum += dice as f64;
        }
        let n = positives.len() as f64;
        reports.push(single(&format!("iou[{name}]"), (iou_sum / n) as f32)?);
        reports.push(single(&format!("dice[{name}]"), (dice_sum / n) as f32)?);
    }

    let sigma = ctx.config.eval.sigma;
    let base_var = preactivation_variance(&f, &test, sigma, seed)?;
    let acat_var = acat_preactivation_variance(&model, &test, &test_maps, sigma, seed)?;
    for (i, v) in base_var.iter().enumerate() {
        reports.push(single(&format!("preact_variance[baseline.layer{i}]"), *v)?);
    }
    for (i, v) in acat_var.iter().enumerate() {
        reports.push(single(&format!("preact_variance[acat.layer{i}]"), *v)?);
    }

    let dir = ctx.eval_dir();
    report::write_reports(&dir, &reports)?;
    report::write_confusion(&dir, "baseline", &base_metrics)?;
    report::write_confusion(&dir, "acat", &acat_metrics)?;
    let metrics = json!({"baseline": base_metrics, "acat": acat_metrics});
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)? + "\n",
    )?;
    Ok(())
}

/// One seed's full world for the multi-seed experiments: fresh dataset,
/// trained baseline and maps for both splits.
pub fn build_world(config: &RunConfig, seed: u64) -> Result<(SeedWorld, TrainLog)> {
    let spec = DatasetSpec::standard(config.dataset.samples, seed);
    let (samples, split) = generate_dataset(&spec)?;
    let (train, test) = split_batches(&samples, &split)?;
    let f = ModelGraph::build(&ClassifierConfig::standard(ClassLabel::COUNT), seed)?;
    let log = train_model(&f, &train, &config.baseline.to_train_config(seed))?;
    let method = parse_method(&config.saliency.method)?;
    let ae = if method == SaliencyMethod::Counterfactual {
        let ae = Autoencoder::build((1, spec.height, spec.width), seed)?;
        train_autoencoder(&ae, &train, &config.autoencoder.to_train_config(seed))?;
        Some(ae)
    } else {
        None
    };
    let cf = config.counterfactual.to_core();
    let train_maps = make_maps(
        &f,
        ae.as_ref(),
        &samples,
        &split.train,
        method,
        &cf,
        config.saliency.steps,
    )?;
    let test_maps = make_maps(
        &f,
        ae.as_ref(),
        &samples,
        &split.test,
        method,
        &cf,
        config.saliency.steps,
    )?;
    let world = SeedWorld::new(seed, train, test, train_maps, test_maps, f)?;
    Ok((world, log))
}

pub fn cmd_ablate(ctx: &Ctx) -> Result<()> {
    let stage = Stage {
        name: "ablate",
        dir: ctx.ablate_dir(),
        config: json!({
            "dataset": ctx.config.dataset,
            "baseline": ctx.config.baseline,
            "autoencoder": ctx.config.autoencoder,
            "counterfactual": ctx.config.counterfactual,
            "saliency": ctx.config.saliency,
            "acat": ctx.config.acat,
            "eval": ctx.config.eval,
        }),
        seed: ctx.seed(),
        inputs: vec![],
    };
    let ran = run_stage(&stage, || ablate(ctx))?;
    announce(stage.name, ran);
    Ok(())
}

fn ablate(ctx: &Ctx) -> Result<()> {
    let config = &ctx.config;
    let seeds = config.eval.seeds.clone();
    let mut worlds = Vec::with_capacity(seeds.len());
    let mut world_logs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        println!("[ablate] building world for seed {seed}");
        let (world, log) = build_world(config, seed).with_context(|| format!("seed {seed}"))?;
        world_logs.push(json!({
            "seed": seed,
            "baseline_test_accuracy": baseline_accuracy(&world.baseline, &world.test)?,
            "baseline_log": log,
        }));
        worlds.push(world);
    }
    let mut reports = Vec::new();
    let mut base_runs = Vec::with_capacity(worlds.len());
    for w in &worlds {
        base_runs.push(baseline_accuracy(&w.baseline, &w.test)?);
    }
    reports.push(EvalReport::from_runs(
        "accuracy[baseline]",
        fnv1a(b"ablate;baseline"),
        seeds.clone(),
        base_runs,
    )?);
    let tune = config.acat.to_train_config(0);
    reports.extend(run_ablation_suite(&worlds, &config.acat.to_acat_config(), &tune)?);
    reports.extend(dropout_control(&worlds, &config.eval.dropout_ps, &tune)?);
    let dir = ctx.ablate_dir();
    report::write_reports(&dir, &reports)?;
    fs::write(
        dir.join("worlds.json"),
        serde_json::to_string_pretty(&world_logs)? + "\n",
    )?;
    Ok(())
}

/// Everything in dependency order with checksum-based resume.
pub fn cmd_pipeline(ctx: &Ctx) -> Result<()> {
    cmd_gen_data(ctx)?;
    cmd_train_baseline(ctx)?;
    cmd_train_ae(ctx)?;
    cmd_gen_saliency(ctx)?;
    cmd_train_acat(ctx)?;
    cmd_evaluate(ctx)?;
    Ok(())
}

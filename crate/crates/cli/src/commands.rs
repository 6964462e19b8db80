use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use attzoom_core::autodiff::GradCheckOptions;
use attzoom_core::backbones::{Model, ModelSpec};
use attzoom_core::data::Dataset;
use attzoom_core::diagnostics::gradcheck_suite;
use attzoom_core::interpret::{
    attention_heatmap, grad_cam, max_normalize, render_saliency, resize_bilinear, warp_image,
    write_ppm, IndexEntry, SaliencyMap,
};
use attzoom_core::search::{run_search, SearchArm};
use attzoom_core::train::{evaluate, label_rank, train as train_model, Metrics};
use attzoom_core::Error;
use serde::Serialize;

use crate::config::{RunConfig, Splits};
use crate::{Arm, EvalSplit};

const BASELINE: &str = "baseline";
const ATTZOOM: &str = "attzoom";

fn arms(cfg: &RunConfig, arm: Arm) -> anyhow::Result<Vec<(&'static str, ModelSpec)>> {
    let wants_attzoom = matches!(arm, Arm::Attzoom | Arm::Both);
    if wants_attzoom && cfg.model.attzoom_insertions.is_empty() {
        return Err(Error::config(
            "model.attzoom_insertions",
            "the attzoom arm needs at least one insertion",
        )
        .into());
    }
    let mut out = Vec::new();
    if matches!(arm, Arm::Baseline | Arm::Both) {
        out.push((BASELINE, cfg.model.baseline()));
    }
    if wants_attzoom {
        out.push((ATTZOOM, cfg.model.clone()));
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Timestamps live only here so every other artifact is reproducible.
#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'a str,
    started_unix: u64,
    finished_unix: u64,
}

fn write_metadata(out: &Path, command: &str, started: u64) -> anyhow::Result<()> {
    write_json(
        &out.join("metadata.json"),
        &Metadata {
            command,
            version: env!("CARGO_PKG_VERSION"),
            started_unix: started,
            finished_unix: unix_now(),
        },
    )
}

fn report_split(splits: &Splits) -> (&'static str, &Dataset) {
    match &splits.test {
        Some(t) => ("test", t),
        None => ("val", &splits.val),
    }
}

#[derive(Serialize)]
struct SummaryRow {
    arm: String,
    split: String,
    top1: f64,
    top5: f64,
    best_epoch: usize,
    epochs_ran: usize,
    params: usize,
}

/// Two-row comparison table with a delta line when both arms are present.
fn comparison_table(architecture: &str, rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let split = rows.first().map_or("val", |r| r.split.as_str());
    let _ = writeln!(
        s,
        "{:<28} {:>10} {:>10}",
        format!("Model ({split})"),
        "Top-1 (%)",
        "Top-5 (%)"
    );
    for r in rows {
        let name = if r.arm == ATTZOOM {
            format!("{architecture} + AttZoom")
        } else {
            architecture.to_string()
        };
        let _ = writeln!(
            s,
            "{name:<28} {:>10.2} {:>10.2}",
            r.top1 * 100.0,
            r.top5 * 100.0
        );
    }
    if let [b, a] = rows {
        let _ = writeln!(
            s,
            "{:<28} {:>+10.2} {:>+10.2}",
            "Δ",
            (a.top1 - b.top1) * 100.0,
            (a.top5 - b.top5) * 100.0
        );
    }
    s
}

fn arch_name(spec: &ModelSpec) -> String {
    serde_json::to_value(spec.architecture)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{:?}", spec.architecture))
}

pub fn train(config: &Path, seed: Option<u64>, out: Option<&Path>, arm: Arm) -> anyhow::Result<u8> {
    let started = unix_now();
    let cfg = RunConfig::load(config, seed, out)?;
    let arms = arms(&cfg, arm)?;
    let splits = cfg.load_data()?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let (split_name, report_ds) = report_split(&splits);
    let mut rows = Vec::new();
    for (name, spec) in arms {
        let dir = out.join(name);
        create_dir(&dir)?;
        let mut model = Model::<f64>::build(&spec)?;
        log::info!("training {name}: {} parameters", model.param_count());
        let log = match train_model(&mut model, &splits.train, &splits.val, &cfg.train) {
            Ok(log) => log,
            Err(e @ Error::Divergence { .. }) => {
                model.save_checkpoint(dir.join("checkpoint_last_finite"))?;
                return Err(anyhow::Error::new(e).context(format!("training the {name} arm")));
            }
            Err(e) => return Err(e.into()),
        };
        model.save_checkpoint(dir.join("checkpoint"))?;
        log.write_jsonl(dir.join("train_log.jsonl"))?;
        let metrics = evaluate(&model, report_ds)?;
        write_json(&dir.join("metrics.json"), &metrics)?;
        rows.push(SummaryRow {
            arm: name.to_string(),
            split: split_name.to_string(),
            top1: metrics.top1,
            top5: metrics.top5,
            best_epoch: log.best_epoch,
            epochs_ran: log.epochs.len(),
            params: model.param_count(),
        });
    }
    let table = comparison_table(&arch_name(&cfg.model), &rows);
    print!("{table}");
    std::fs::write(out.join("summary.txt"), &table)?;
    write_json(&out.join("summary.json"), &rows)?;
    write_metadata(out, "train", started)?;
    Ok(0)
}

#[derive(Serialize)]
struct SearchMeta<'a> {
    sampler: &'a str,
    n_trials: usize,
    paired: bool,
    search_seed: u64,
    arms: Vec<&'a str>,
}

pub fn search(
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    arm: Arm,
    jobs: usize,
) -> anyhow::Result<u8> {
    let started = unix_now();
    let cfg = RunConfig::load(config, seed, out)?;
    let arms = arms(&cfg, arm)?;
    let splits = cfg.load_data()?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let opts = cfg.search_options(jobs);
    let search_arms: Vec<SearchArm> = arms
        .iter()
        .map(|(name, spec)| SearchArm {
            name: name.to_string(),
            spec: spec.clone(),
        })
        .collect();
    let outcome = run_search(
        &search_arms,
        &splits.train,
        &splits.val,
        &cfg.search.space,
        &cfg.train,
        &opts,
    )?;
    let sampler =
        "uniform random search: log-uniform lr and weight decay, uniform categorical choices";
    println!("# sampler: {sampler}");
    println!(
        "# trials: {} per arm, paired: {}",
        opts.n_trials, opts.paired
    );
    outcome.write_csv(out.join("leaderboard.csv"))?;
    write_json(
        &out.join("search_meta.json"),
        &SearchMeta {
            sampler,
            n_trials: opts.n_trials,
            paired: opts.paired,
            search_seed: opts.search_seed,
            arms: arms.iter().map(|(n, _)| *n).collect(),
        },
    )?;
    println!(
        "{:<10} {:>6} {:>10} {:>10} {:>10} {:>8} {:>10}",
        "arm", "trial", "lr", "wd", "optimizer", "batch", "top1 (%)"
    );
    for (name, _) in &arms {
        let Some(best) = outcome.best(name) else {
            continue;
        };
        let t = &best.config.train;
        println!(
            "{name:<10} {:>6} {:>10.3e} {:>10.3e} {:>10} {:>8} {:>10.2}",
            best.config.trial,
            t.learning_rate,
            t.weight_decay,
            t.optimizer.name(),
            t.batch_size,
            best.top1 * 100.0
        );
        if let Some(log) = &best.log {
            log.write_jsonl(out.join(format!("best_{name}_train_log.jsonl")))?;
        }
    }
    write_metadata(out, "search", started)?;
    Ok(0)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Model<f64>> {
    if !path.join("model.json").is_file() {
        bail!(
            "checkpoint not found: {} (expected model.json)",
            path.display()
        );
    }
    Model::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: String,
    split: &'a str,
    #[serde(flatten)]
    metrics: Metrics,
}

pub fn eval(
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    checkpoint: &Path,
    split: Option<EvalSplit>,
) -> anyhow::Result<u8> {
    let started = unix_now();
    let cfg = RunConfig::load(config, seed, out)?;
    let model = load_checkpoint(checkpoint)?;
    let splits = cfg.load_data()?;
    let (name, ds) = match split {
        Some(EvalSplit::Train) => ("train", &splits.train),
        Some(EvalSplit::Val) => ("val", &splits.val),
        Some(EvalSplit::Test) => (
            "test",
            splits.test.as_ref().context(
                "no test set configured (set data.test_path or data.synthetic_test_samples)",
            )?,
        ),
        None => report_split(&splits),
    };
    let report = EvalReport {
        checkpoint: checkpoint.display().to_string(),
        split: name,
        metrics: evaluate(&model, ds)?,
    };
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("metrics.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    write_metadata(&cfg.output_dir, "eval", started)?;
    Ok(0)
}

fn at_resolution(map: SaliencyMap, h: usize, w: usize) -> SaliencyMap {
    SaliencyMap {
        values: max_normalize(resize_bilinear(&map.values, h, w)),
        ..map
    }
}

pub fn visualize(
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    checkpoint: &Path,
    n: Option<usize>,
) -> anyhow::Result<u8> {
    let started = unix_now();
    let cfg = RunConfig::load(config, seed, out)?;
    let model = load_checkpoint(checkpoint)?;
    let splits = cfg.load_data()?;
    let ds = &splits.val;
    let n = n.unwrap_or(cfg.interpret.n_images).min(ds.len());
    let out = &cfg.output_dir;
    create_dir(out)?;
    let model_name = if model.attzoom_layers().next().is_some() {
        ATTZOOM
    } else {
        BASELINE
    };
    let [_, h, w] = model.spec.input_shape;
    let mut index = Vec::new();
    for i in 0..n {
        let image = ds.images.gather_batch(&[i]);
        let label = ds.labels[i];
        let (logits, records) = model.predict_with_attention(&image)?;
        let predicted = (0..logits.len())
            .find(|&c| label_rank(logits.data(), c) == 0)
            .unwrap_or(0);
        let target = if cfg.interpret.use_prediction {
            predicted
        } else {
            label
        };
        let mut emit = |kind: &str, img: &attzoom_core::Tensor<f64>| -> anyhow::Result<()> {
            let file = format!("sample{i:03}_{kind}.ppm");
            write_ppm(img, out.join(&file))?;
            index.push(IndexEntry {
                file,
                sample: i,
                class: target,
                model: model_name.to_string(),
                map_type: kind.to_string(),
            });
            Ok(())
        };
        let cam = grad_cam(&model, &image, target, cfg.interpret.layer.as_deref())?;
        emit("gradcam", &render_saliency(&cam))?;
        let attention = match records.first() {
            Some((_, rec)) => Some(at_resolution(attention_heatmap(rec, 0)?, h, w)),
            None => None,
        };
        if let Some(att) = &attention {
            emit("heatmap", &render_saliency(att))?;
        }
        let guide = attention.as_ref().unwrap_or(&cam);
        let (warped, _) = warp_image(&image, guide, cfg.interpret.lambda)?;
        emit("warp", &warped)?;
    }
    write_json(&out.join("index.json"), &index)?;
    println!(
        "wrote {} files for {n} images to {}",
        index.len(),
        out.display()
    );
    write_metadata(out, "visualize", started)?;
    Ok(0)
}

pub fn gradcheck(seed: u64, tolerance: f64) -> anyhow::Result<u8> {
    let opts = GradCheckOptions {
        tolerance,
        ..Default::default()
    };
    let entries = gradcheck_suite(seed, opts)?;
    println!(
        "{:<28} {:>9} {:>14}  status",
        "case", "elements", "max rel err"
    );
    let mut worst = 0.0f64;
    let mut failed = 0;
    for e in &entries {
        let ok = e.report.passed();
        failed += usize::from(!ok);
        worst = worst.max(e.report.max_rel_error);
        println!(
            "{:<28} {:>9} {:>14.3e}  {}",
            e.name,
            e.report.elements_checked,
            e.report.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        if let (false, Some(w)) = (ok, &e.report.worst) {
            println!(
                "    worst: {} [{}] analytic {:e} numeric {:e}",
                w.param, w.index, w.analytic, w.numeric
            );
        }
    }
    println!("max rel error: {worst:.3e} (tolerance {tolerance:e})");
    Ok(if failed == 0 { 0 } else { 1 })
}

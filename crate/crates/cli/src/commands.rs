use std::path::Path;

use ovaxai::data::{
    augment_dataset, generate_synthetic, image_to_tensor, load_image, load_tensors, scan_dataset, split_by_origin,
    split_train_test, DatasetManifest, Origin, SkippedFile, TensorSet, MANIFEST_FILE, PAPER_CLASSES,
};
use ovaxai::metrics::{evaluate, MetricsReport};
use ovaxai::network::predict;
use ovaxai::train::{
    load_checkpoint, probabilities, random_search, save_checkpoint, train_with, Checkpoint, SearchOutcome, StubObjective,
    TrainError, TrainingObjective,
};
use ovaxai::xai::{
    compare_explanations, fill_image, integrated_gradients, kernel_shap, lime_explain, render_overlay, segment_grid,
    Explanation, ExplanationParams, LimeOptions, Method, NetworkModel, ShapOptions,
};
use ovaxai::{seed, Arch, ModelParams, ModelSpec, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{RunConfig, SplitMode};
use crate::error::CliError;
use crate::io::{begin, same_dir, write};
use crate::table;

const PREDICT_CHUNK: usize = 32;
const SPLIT_STREAM: u64 = 0x5711;

fn warn_skipped(skipped: &[SkippedFile]) {
    for s in skipped {
        eprintln!("warning: skipped {}: {}", s.path.display(), s.reason);
    }
}

fn is_missing_or_empty(dir: &Path) -> bool {
    match std::fs::read_dir(dir) {
        Ok(mut it) => it.next().is_none(),
        Err(_) => !dir.exists(),
    }
}

/// The dataset under `data`, generating the synthetic fixture first when asked and the
/// directory is absent or empty.
fn dataset(config: &RunConfig, image_size: usize) -> Result<DatasetManifest, CliError> {
    let root = config.data_dir()?;
    if config.synthetic.enabled && is_missing_or_empty(root) {
        let size = config.synthetic.size.unwrap_or(image_size as u32);
        let counts = vec![config.synthetic.per_class; PAPER_CLASSES.len()];
        let m = generate_synthetic(root, &counts, size, config.seed)?;
        m.write_tsv(&root.join(MANIFEST_FILE))?;
        println!("generated synthetic fixture: {} images at {}", m.len(), root.display());
    }
    if !root.is_dir() {
        return Err(CliError::Validation(format!("dataset root `{}` does not exist", root.display())));
    }
    let listed = root.join(MANIFEST_FILE);
    let manifest = if listed.is_file() {
        DatasetManifest::read_tsv(root, &listed)?
    } else {
        let (m, report) = scan_dataset(root)?;
        warn_skipped(&report.skipped);
        for c in &report.empty_classes {
            eprintln!("warning: class directory `{c}` holds no decodable image");
        }
        m
    };
    if manifest.is_empty() {
        return Err(CliError::Validation(format!("no images found under `{}`", root.display())));
    }
    Ok(manifest)
}

fn check_classes(manifest: &DatasetManifest, spec: &ModelSpec) -> Result<(), CliError> {
    if manifest.classes.len() > spec.output_classes {
        return Err(CliError::Validation(format!(
            "dataset has {} classes but `{}` predicts {}",
            manifest.classes.len(),
            spec.name,
            spec.output_classes
        )));
    }
    Ok(())
}

fn split(config: &RunConfig, manifest: &DatasetManifest) -> Result<(DatasetManifest, DatasetManifest), CliError> {
    let s = seed::derive(config.seed, &[SPLIT_STREAM]);
    Ok(match config.split {
        SplitMode::Random => split_train_test(manifest, config.train_fraction, s)?,
        SplitMode::Origin => split_by_origin(manifest, config.train_fraction, s)?,
    })
}

fn tensors(manifest: &DatasetManifest, size: usize) -> Result<TensorSet, CliError> {
    let (set, skipped) = load_tensors(manifest, size)?;
    warn_skipped(&skipped);
    if set.is_empty() {
        return Err(CliError::Validation("no decodable images to load".into()));
    }
    Ok(set)
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

fn summary_table(report: &MetricsReport) -> String {
    table::render(
        &["accuracy", "precision", "recall", "f1"],
        &[vec![
            fmt4(report.accuracy),
            fmt4(report.precision_weighted),
            fmt4(report.recall_weighted),
            fmt4(report.f1_weighted),
        ]],
    )
}

fn class_table(report: &MetricsReport, classes: &[String]) -> String {
    let rows: Vec<Vec<String>> = report
        .per_class
        .iter()
        .map(|c| {
            vec![
                classes.get(c.class).cloned().unwrap_or_else(|| format!("class {}", c.class)),
                fmt4(c.precision),
                fmt4(c.recall),
                fmt4(c.f1),
                c.auc.map(fmt4).unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    table::render(&["class", "precision", "recall", "f1", "auc"], &rows)
}

fn write_report(out: &Path, report: &MetricsReport) -> Result<(), CliError> {
    write(&out.join("metrics.json"), serde_json::to_string_pretty(report).expect("report serialises"))?;
    write(&out.join("roc.csv"), report.roc_csv())
}

fn score(spec: &ModelSpec, params: &ModelParams, set: &TensorSet) -> Result<MetricsReport, CliError> {
    let probs = probabilities(spec, params, set, PREDICT_CHUNK)?;
    Ok(evaluate(&probs, &set.labels, spec.output_classes)?)
}

pub fn augment(config: &RunConfig) -> Result<(), CliError> {
    let out = config.out_dir()?;
    let policy = &config.augment;
    policy.validate()?;
    let size = config.image_size.unwrap_or(32);
    let manifest = dataset(config, size)?;
    if same_dir(&manifest.root, out) {
        return Err(CliError::Validation("the output directory must differ from the dataset root".into()));
    }
    let (out, _lock) = begin(config)?;
    let augmented = augment_dataset(&manifest, policy, &out)?;
    augmented.write_tsv(&out.join(MANIFEST_FILE))?;

    let mut rows = Vec::new();
    let mut totals = [0usize; 3];
    for (c, name) in augmented.classes.iter().enumerate() {
        let of = |o: Origin| augmented.samples.iter().filter(|s| s.class == c && s.origin == o).count();
        let (orig, aug) = (of(Origin::Original), of(Origin::Augmented));
        totals[0] += orig;
        totals[1] += aug;
        totals[2] += orig + aug;
        rows.push(vec![name.clone(), orig.to_string(), aug.to_string(), (orig + aug).to_string()]);
    }
    rows.push(vec!["total".into(), totals[0].to_string(), totals[1].to_string(), totals[2].to_string()]);
    print!("{}", table::render(&["class", "original", "augmented", "total"], &rows));
    println!("wrote {} images and {}", augmented.len(), out.join(MANIFEST_FILE).display());
    Ok(())
}

/// Metadata stored in the checkpoint sidecar.
#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    image_size: usize,
    classes: Vec<String>,
    run: RunConfig,
}

pub fn train(config: &RunConfig) -> Result<(), CliError> {
    let (_, size, spec) = config.model_spec()?;
    let tc = config.train_config(&spec)?;
    config.check_fraction()?;
    config.out_dir()?;
    let manifest = dataset(config, size)?;
    check_classes(&manifest, &spec)?;
    let (out, _lock) = begin(config)?;
    let (train_m, test_m) = split(config, &manifest)?;
    train_m.write_tsv(&out.join("train.tsv"))?;
    test_m.write_tsv(&out.join("test.tsv"))?;
    let train_set = tensors(&train_m, size)?;
    let test_set = tensors(&test_m, size)?;
    println!(
        "training {} on {} images, testing on {} ({} epochs, lr {})",
        spec.name,
        train_set.len(),
        test_set.len(),
        tc.epochs,
        tc.learning_rate
    );

    let params = ModelParams::init(&spec, config.seed)?;
    let epochs = tc.epochs;
    let (params, history) = train_with(&spec, params, &train_set, Some(&test_set), &tc, |r| {
        let test = r.test_acc.map(fmt4).unwrap_or_else(|| "-".into());
        println!(
            "epoch {:>3}/{epochs}  loss {:.4}  train {:.4}  test {test}",
            r.epoch + 1,
            r.train_loss,
            r.train_acc
        );
    })?;
    write(&out.join("history.jsonl"), history.to_jsonl())?;

    let meta = CheckpointMeta {
        image_size: size,
        classes: manifest.classes.clone(),
        run: config.clone(),
    };
    let meta = serde_json::to_value(&meta).expect("metadata serialises");
    let ck = Checkpoint::from_params(&spec, &params, epochs, meta)?;
    save_checkpoint(&ck, &out.join("model.ovck"))?;

    let report = score(&spec, &params, &test_set)?;
    write_report(&out, &report)?;
    print!("{}", class_table(&report, &manifest.classes));
    print!("{}", summary_table(&report));
    Ok(())
}

fn write_search(out: &Path, outcome: &SearchOutcome) -> Result<(), CliError> {
    write(&out.join("probe_log.csv"), outcome.probe_csv())?;
    let best = json!({
        "iteration": outcome.best_iteration,
        "lr": outcome.best_lr,
        "dropout": outcome.best_dropout,
        "test_acc": outcome.best_test_acc,
    });
    write(&out.join("best.json"), serde_json::to_string_pretty(&best).expect("json"))
}

pub fn search(config: &RunConfig) -> Result<(), CliError> {
    let range = config.search_range();
    range.validate()?;
    let result = match config.search.stub_peak {
        Some(peak) => {
            config.out_dir()?;
            let (out, lock) = begin(config)?;
            (random_search(&mut StubObjective { peak }, &range), out, lock)
        }
        None => {
            let (_, size, spec) = config.model_spec()?;
            let base = config.train_config(&spec)?;
            config.check_fraction()?;
            config.out_dir()?;
            let manifest = dataset(config, size)?;
            check_classes(&manifest, &spec)?;
            let (out, lock) = begin(config)?;
            let (train_m, test_m) = split(config, &manifest)?;
            let train_set = tensors(&train_m, size)?;
            let test_set = tensors(&test_m, size)?;
            let mut objective = TrainingObjective {
                spec: &spec,
                train_set: &train_set,
                test_set: &test_set,
                base,
            };
            (random_search(&mut objective, &range), out, lock)
        }
    };
    let (result, out, _lock) = result;
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::SearchDiverged { log }) => {
            let csv = SearchOutcome {
                best_iteration: 0,
                best_lr: f64::NAN,
                best_dropout: f64::NAN,
                best_test_acc: f64::NAN,
                log: log.clone(),
            }
            .probe_csv();
            write(&out.join("probe_log.csv"), csv)?;
            return Err(TrainError::SearchDiverged { log }.into());
        }
        Err(e) => return Err(e.into()),
    };
    write_search(&out, &outcome)?;
    let rows: Vec<Vec<String>> = outcome
        .log
        .iter()
        .map(|r| {
            let mark = if r.iteration == outcome.best_iteration { "*" } else { "" };
            vec![
                format!("{}{mark}", r.iteration),
                format!("{:.6}", r.lr),
                format!("{:.4}", r.dropout),
                r.test_acc.map(fmt4).unwrap_or_else(|| "diverged".into()),
            ]
        })
        .collect();
    print!("{}", table::render(&["iteration", "lr", "dropout", "test_acc"], &rows));
    println!(
        "best: iteration {} (lr {}, dropout {}), test accuracy {:.4}",
        outcome.best_iteration, outcome.best_lr, outcome.best_dropout, outcome.best_test_acc
    );
    Ok(())
}

/// Architecture, image size and class names for a checkpoint, preferring explicit settings.
fn restore(config: &RunConfig, path: &Path) -> Result<(ModelSpec, ModelParams, usize, Vec<String>), CliError> {
    let ck = load_checkpoint(path)?;
    let meta: Option<CheckpointMeta> = serde_json::from_value(ck.config.clone()).ok();
    let arch: Arch = match (&config.arch, ck.model.is_empty()) {
        (Some(a), _) => a.parse()?,
        (None, false) => ck.model.parse()?,
        (None, true) => config.parsed_arch()?,
    };
    let size = config
        .image_size
        .or(meta.as_ref().map(|m| m.image_size))
        .unwrap_or_else(|| arch.default_image_size());
    let resolved = RunConfig {
        arch: Some(arch.name().to_string()),
        image_size: Some(size),
        ..config.clone()
    };
    let (_, size, spec) = resolved.model_spec()?;
    let params = ck.into_params(&spec)?;
    let classes = meta.map(|m| m.classes).unwrap_or_default();
    Ok((spec, params, size, classes))
}

pub fn evaluate_cmd(config: &RunConfig, checkpoint: &Path, manifest_path: Option<&Path>) -> Result<(), CliError> {
    config.out_dir()?;
    let (spec, params, size, classes) = restore(config, checkpoint)?;
    let manifest = match manifest_path {
        Some(p) => DatasetManifest::read_tsv(config.data_dir()?, p)?,
        None => dataset(config, size)?,
    };
    check_classes(&manifest, &spec)?;
    if !classes.is_empty() && classes != manifest.classes {
        eprintln!("warning: dataset classes {:?} differ from the checkpoint's {:?}", manifest.classes, classes);
    }
    let (out, _lock) = begin(config)?;
    let set = tensors(&manifest, size)?;
    let report = score(&spec, &params, &set)?;
    write_report(&out, &report)?;
    print!("{}", class_table(&report, &manifest.classes));
    print!("{}", summary_table(&report));
    Ok(())
}

fn to_rgb(x: &Tensor, size: usize) -> image::RgbImage {
    let data = x.data();
    image::RgbImage::from_fn(size as u32, size as u32, |c, r| {
        let i = (r as usize * size + c as usize) * 3;
        let px = |k: usize| (data[i + k].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn explain(config: &RunConfig, checkpoint: &Path, image_path: &Path) -> Result<(), CliError> {
    config.out_dir()?;
    let methods = config.xai.parsed_methods()?;
    let fill_kind = config.xai.parsed_fill()?;
    let style = config.xai.parsed_overlay()?;
    let mean_baseline = match config.xai.ig_baseline.as_str() {
        "black" => false,
        "mean" => true,
        other => return Err(CliError::Validation(format!("unknown IG baseline `{other}` (expected black or mean)"))),
    };
    let (spec, params, size, classes) = restore(config, checkpoint)?;
    let img = load_image(image_path)?;
    let x32 = image_to_tensor(&img, size);
    let batch = Tensor::new(vec![1, size, size, 3], x32.data().to_vec()).expect("single-image batch");
    let probs = predict(&spec, &params, &batch).map_err(|e| CliError::Numeric(e.to_string()))?;
    let probs: Vec<f64> = probs.data().iter().map(|&p| p as f64).collect();
    let target = match config.xai.target {
        Some(t) if t >= spec.output_classes => {
            return Err(CliError::Validation(format!("target class {t} outside [0, {})", spec.output_classes)))
        }
        Some(t) => t,
        None => ovaxai::metrics::argmax(&probs),
    };
    let baseline = if mean_baseline && methods.contains(&Method::Ig) {
        let manifest = dataset(config, size)?;
        Some(tensors(&manifest, size)?.mean_image().cast::<f64>())
    } else {
        None
    };
    let (out, _lock) = begin(config)?;

    let x = x32.cast::<f64>();
    let mask = segment_grid(size, size, config.xai.grid)?;
    let fill = fill_image(&x, &mask, fill_kind, None)?;
    let model = NetworkModel::new(spec, params);
    let base_image = to_rgb(&x32, size);
    let label = classes.get(target).cloned().unwrap_or_else(|| format!("class {target}"));
    println!("explaining class {target} ({label}), p = {:.4}", probs[target]);

    let mut rows = Vec::new();
    for m in methods {
        let explanation = match m {
            Method::Ig => {
                let base = baseline.clone().unwrap_or_else(|| x.zeros_like());
                let map = integrated_gradients(&model, &x, &base, config.xai.ig_steps, target)?;
                let params = ExplanationParams {
                    steps: Some(config.xai.ig_steps),
                    baseline: Some(config.xai.ig_baseline.clone()),
                    ..ExplanationParams::default()
                };
                Explanation::new(&map, &mask, config.xai.top_k, params)?
            }
            Method::Lime => {
                let opts = LimeOptions {
                    n_samples: config.xai.lime_samples,
                    top_k: config.xai.top_k,
                    seed: config.seed,
                    kernel_width: config.xai.kernel_width,
                    ridge: config.xai.ridge,
                };
                let (mut e, _) = lime_explain(&model, &x, &mask, &fill, target, &opts)?;
                e.parameters.fill = Some(fill_kind.label());
                e
            }
            Method::Shap => {
                let opts = ShapOptions {
                    n_samples: config.xai.shap_samples,
                    seed: config.seed,
                };
                let map = kernel_shap(&model, &x, &mask, &fill, target, &opts)?;
                let params = ExplanationParams {
                    seed: Some(config.seed),
                    n_samples: Some(config.xai.shap_samples),
                    fill: Some(fill_kind.label()),
                    ..ExplanationParams::default()
                };
                Explanation::new(&map, &mask, config.xai.top_k, params)?
            }
        };
        write(&out.join(format!("explanation_{m}.json")), explanation.to_json())?;
        let overlay = render_overlay(&base_image, &explanation, &mask, style)?;
        if let Some(n) = &overlay.notice {
            eprintln!("note: {m} overlay: {n}");
        }
        let png = out.join(format!("explanation_{m}.png"));
        overlay
            .image
            .save_with_format(&png, image::ImageFormat::Png)
            .map_err(|e| CliError::io(&png, e))?;
        let top: Vec<String> = explanation.top_k.iter().take(3).map(|s| s.to_string()).collect();
        let total: f64 = explanation.segment_scores.iter().sum();
        rows.push(vec![m.to_string(), top.join(","), format!("{total:.4}")]);
    }
    print!("{}", table::render(&["method", "top segments", "score sum"], &rows));
    Ok(())
}

pub fn compare(config: &RunConfig, paths: &[std::path::PathBuf], k: Option<usize>) -> Result<(), CliError> {
    if paths.len() < 2 {
        return Err(CliError::Validation(format!(
            "comparison needs at least two explanation files, got {}",
            paths.len()
        )));
    }
    config.out_dir()?;
    let mut exps = Vec::with_capacity(paths.len());
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        let e: Explanation = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: not an explanation file: {e}", p.display())))?;
        exps.push(e);
    }
    let k = k.unwrap_or_else(|| config.xai.top_k.min(exps[0].mask.segments));
    let report = compare_explanations(&exps, k)?;
    let (out, _lock) = begin(config)?;
    write(&out.join("agreement.json"), serde_json::to_string_pretty(&report).expect("report serialises"))?;
    let names: Vec<String> = paths
        .iter()
        .zip(&report.methods)
        .map(|(p, m)| format!("{m} ({})", p.file_name().unwrap_or_default().to_string_lossy()))
        .collect();
    let matrix = |values: &[Vec<f64>]| {
        let rows: Vec<Vec<String>> = names
            .iter()
            .zip(values)
            .map(|(n, r)| std::iter::once(n.clone()).chain(r.iter().map(|v| fmt4(*v))).collect())
            .collect();
        let idx: Vec<String> = (0..names.len()).map(|i| format!("[{i}]")).collect();
        let mut headers = vec!["explanation"];
        headers.extend(idx.iter().map(String::as_str));
        table::render(&headers, &rows)
    };
    println!("top-{} Jaccard", report.k);
    print!("{}", matrix(&report.jaccard));
    println!("rank correlation");
    print!("{}", matrix(&report.rank_correlation));
    Ok(())
}

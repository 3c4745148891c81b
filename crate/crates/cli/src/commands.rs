//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use busnet::dataset::{
    load_manifest, save_manifest, scan_dataset, stratified_split, DatasetManifest, Split, SplitRatios,
    IMAGE_EXTENSIONS,
};
use busnet::metrics::{evaluate, EvaluationReport};
use busnet::models::{build_model, load_checkpoint, LoadOptions, Model, ModelError, ModelKind};
use busnet::preprocess::{assemble_batch, load_and_resize, InMemorySource, SplitSource};
use busnet::report::{compare, emit_report, read_report, COMPARISON_CSV, METRICS_JSON};
use busnet::training::{evaluate_split, train, TrainError, BEST_CHECKPOINT};

use crate::config::RUN_CONFIG_FILE;
use crate::{Cli, CliError, Command, CompareArgs, EvaluateArgs, PredictArgs, PrepareArgs, RunConfig, TrainArgs};
use crate::{EXIT_DIVERGED, EXIT_OK, EXIT_PARTIAL};

pub const PREDICTIONS_CSV: &str = "predictions.csv";

pub fn dispatch(cli: Cli) -> Result<i32, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = cli.work_dir {
        config.work_dir = dir;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match cli.command {
        Command::Prepare(args) => prepare(config, args),
        Command::Train(args) => train_model(config, args),
        Command::Evaluate(args) => evaluate_model(config, args),
        Command::Compare(args) => compare_models(config, args),
        Command::Predict(args) => predict(config, args),
    }
}

/// Plain-text per-class split table with a total row.
pub fn split_table(manifest: &DatasetManifest) -> String {
    let header = ["Class", "Images", "Train", "Validation", "Test"];
    let counts = manifest.split_counts();
    let mut rows: Vec<[String; 5]> = Vec::new();
    let mut total = [0usize; 4];
    for class in &manifest.class_names {
        let c = counts.get(class).copied().unwrap_or_default();
        let n = manifest.counts_per_class.get(class).copied().unwrap_or_default();
        for (t, v) in total.iter_mut().zip([n, c[0], c[1], c[2]]) {
            *t += v;
        }
        rows.push([class.clone(), n.to_string(), c[0].to_string(), c[1].to_string(), c[2].to_string()]);
    }
    rows.push(["Total".into(), total[0].to_string(), total[1].to_string(), total[2].to_string(), total[3].to_string()]);
    let widths: Vec<usize> = (0..5)
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap())
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        parts.join("  ") + "\n"
    };
    out += &line(header.to_vec());
    for r in &rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

fn prepare(mut config: RunConfig, args: PrepareArgs) -> Result<i32, CliError> {
    if let Some(root) = args.data_root {
        config.data_root = Some(root);
    }
    let s = &mut config.split;
    *s = SplitRatios {
        train: args.train_ratio.unwrap_or(s.train),
        validation: args.val_ratio.unwrap_or(s.validation),
        test: args.test_ratio.unwrap_or(s.test),
    };
    let root = config
        .data_root
        .clone()
        .ok_or_else(|| CliError::usage("--data-root is required (or set data_root in the config)"))?;
    let scanned = scan_dataset(&root).map_err(|e| CliError::usage(e.to_string()))?;
    let manifest = stratified_split(&scanned, config.split, config.seed).map_err(|e| CliError::usage(e.to_string()))?;
    fs::create_dir_all(&config.work_dir)
        .map_err(|e| CliError::failure(format!("cannot create {}: {e}", config.work_dir.display())))?;
    save_manifest(&manifest, &config.manifest_path()).map_err(|e| CliError::failure(e.to_string()))?;
    config.save(&config.work_dir.join(RUN_CONFIG_FILE))?;
    print!("{}", split_table(&manifest));
    eprintln!("wrote {}", config.manifest_path().display());
    Ok(EXIT_OK)
}

fn read_manifest(config: &RunConfig) -> Result<DatasetManifest, CliError> {
    let path = config.manifest_path();
    if !path.is_file() {
        return Err(CliError::usage(format!(
            "no manifest at {}; run `busnet prepare` first",
            path.display()
        )));
    }
    load_manifest(&path).map_err(|e| CliError::usage(e.to_string()))
}

fn model_error(e: ModelError) -> CliError {
    match e {
        ModelError::WeightsUnavailable { .. } => {
            CliError::usage(format!("{e}; pass --weights-cache or --random-init-backbone"))
        }
        other => CliError::usage(other.to_string()),
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Diverged { .. } => CliError {
            code: EXIT_DIVERGED,
            message: e.to_string(),
        },
        TrainError::InvalidConfig(_) => CliError::usage(e.to_string()),
        other => CliError::failure(other.to_string()),
    }
}

fn train_model(mut config: RunConfig, args: TrainArgs) -> Result<i32, CliError> {
    if let Some(kind) = args.model {
        config.model.kind = kind;
    }
    let t = &mut config.training;
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = args.learning_rate.unwrap_or(t.learning_rate);
    t.optimizer = args.optimizer.unwrap_or(t.optimizer);
    if args.class_weights.is_some() {
        t.class_weights = args.class_weights;
    }
    if args.no_freeze {
        config.model.freeze_backbone = false;
    }
    if args.head_units.is_some() {
        config.model.head_units = args.head_units;
    }
    if args.random_init_backbone {
        config.model.random_init_backbone = true;
    }
    if let Some(dir) = args.weights_cache {
        config.weights_cache = dir;
    }

    let manifest = read_manifest(&config)?;
    let spec = config.model_spec(manifest.num_classes());
    spec.validate().map_err(model_error)?;
    let train_config = config.train_config();
    train_config.validate(manifest.num_classes()).map_err(train_error)?;
    let mut model: Model<f32> = build_model(spec, &config.backbone_weights(), config.seed).map_err(model_error)?;
    model.set_class_names(manifest.class_names.clone()).map_err(model_error)?;

    let out_dir = config.model_dir(config.model.kind);
    config.save(&out_dir.join(RUN_CONFIG_FILE))?;
    let train_src = SplitSource::new(&manifest, Split::Train).map_err(|e| CliError::usage(e.to_string()))?;
    let val_src = SplitSource::new(&manifest, Split::Validation).map_err(|e| CliError::usage(e.to_string()))?;
    eprintln!(
        "training {} on {} images ({} trainable parameters)",
        config.model.kind,
        manifest.split_indices(Split::Train).len(),
        model.trainable_parameter_count()
    );
    let (_, history) = train(model, train_src, val_src, train_config).map_err(train_error)?;
    if let Some(best) = history.best() {
        println!(
            "best epoch {} val_accuracy={:.4} val_loss={:.4}",
            best.epoch, best.val_accuracy, best.val_loss
        );
    }
    println!("checkpoints in {}", out_dir.display());
    Ok(EXIT_OK)
}

/// Directory holding the report of `kind` on `split`.
pub fn report_dir(work_dir: &Path, kind: ModelKind, split: Split) -> PathBuf {
    work_dir.join(kind.name()).join(split.as_str())
}

fn load_options(config: &RunConfig, expected_classes: Option<usize>) -> LoadOptions {
    LoadOptions {
        weights_cache: Some(config.weights_cache.clone()),
        expected_classes,
    }
}

fn summary(report: &EvaluationReport) -> String {
    let mut out = format!(
        "samples={} accuracy={:.4} macro_precision={:.4} macro_recall={:.4} macro_f1={:.4}",
        report.num_samples, report.accuracy, report.macro_precision, report.macro_recall, report.macro_f1
    );
    if let Some(auc) = report.macro_auc {
        out += &format!(" macro_auc={auc:.4}");
    }
    out.push('\n');
    for m in &report.per_class {
        out += &format!(
            "  {}: precision={:.4} recall={:.4} f1={:.4} support={}",
            m.class_name, m.precision, m.recall, m.f1, m.support
        );
        if let Some(auc) = m.auc {
            out += &format!(" auc={auc:.4}");
        }
        out.push('\n');
    }
    out
}

fn evaluate_model(mut config: RunConfig, args: EvaluateArgs) -> Result<i32, CliError> {
    if let Some(kind) = args.model {
        config.model.kind = kind;
    }
    if let Some(dir) = args.weights_cache {
        config.weights_cache = dir;
    }
    let batch_size = args.batch_size.unwrap_or(config.training.batch_size);
    if args.split == Split::Train {
        eprintln!("warning: evaluating on the training split; these figures are not held-out estimates");
    }
    let manifest = read_manifest(&config)?;
    let ckpt = args
        .checkpoint
        .unwrap_or_else(|| config.model_dir(config.model.kind).join(BEST_CHECKPOINT));
    if !ckpt.is_dir() {
        return Err(CliError::usage(format!("no checkpoint at {}", ckpt.display())));
    }
    let model: Model<f32> =
        load_checkpoint(&ckpt, &load_options(&config, Some(manifest.num_classes()))).map_err(model_error)?;
    if model.class_names() != manifest.class_names.as_slice() {
        return Err(CliError::usage(format!(
            "checkpoint classes {:?} differ from manifest classes {:?}",
            model.class_names(),
            manifest.class_names
        )));
    }
    let source = SplitSource::new(&manifest, args.split).map_err(|e| CliError::usage(e.to_string()))?;
    let predictions = evaluate_split(&model, &source, batch_size).map_err(train_error)?;
    let out_dir = report_dir(&config.work_dir, model.spec().kind, args.split);
    fs::create_dir_all(&out_dir).map_err(|e| CliError::failure(format!("cannot create {}: {e}", out_dir.display())))?;
    predictions
        .write_csv(&out_dir.join(PREDICTIONS_CSV))
        .map_err(|e| CliError::failure(e.to_string()))?;
    let report = evaluate(&predictions.y_true, &predictions.y_score, &manifest.class_names)
        .map_err(|e| CliError::failure(e.to_string()))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    emit_report(&report, &out_dir).map_err(|e| CliError::failure(e.to_string()))?;
    print!("{}", summary(&report));
    println!("report in {}", out_dir.display());
    Ok(EXIT_OK)
}

fn compare_models(config: RunConfig, args: CompareArgs) -> Result<i32, CliError> {
    let explicit = args.models.is_some();
    let kinds = args.models.unwrap_or_else(|| ModelKind::ALL.to_vec());
    let mut reports = BTreeMap::new();
    let mut missing = Vec::new();
    for kind in kinds {
        let path = report_dir(&config.work_dir, kind, args.split).join(METRICS_JSON);
        if path.is_file() {
            let r = read_report(&path).map_err(|e| CliError::failure(e.to_string()))?;
            reports.insert(kind.name().to_string(), r);
        } else {
            missing.push(path);
        }
    }
    if reports.is_empty() {
        return Err(CliError::usage(format!(
            "no {} reports under {}; run `busnet evaluate` first",
            args.split,
            config.work_dir.display()
        )));
    }
    let table = compare(&reports).map_err(|e| CliError::usage(e.to_string()))?;
    let out = config.work_dir.join(COMPARISON_CSV);
    table.write_csv(&out).map_err(|e| CliError::failure(e.to_string()))?;
    print!("{table}");
    eprintln!("wrote {}", out.display());
    if explicit && !missing.is_empty() {
        for p in &missing {
            eprintln!("warning: missing report {}", p.display());
        }
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// `input` itself, or the image files directly inside it sorted by name.
pub fn prediction_inputs(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(CliError::usage(format!("input not found: {}", input.display())));
    }
    let entries = fs::read_dir(input).map_err(|e| CliError::usage(format!("cannot read {}: {e}", input.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_file() && has_image_extension(p))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if files.is_empty() {
        return Err(CliError::usage(format!("no images in {}", input.display())));
    }
    Ok(files)
}

fn predict(mut config: RunConfig, args: PredictArgs) -> Result<i32, CliError> {
    if let Some(dir) = args.weights_cache {
        config.weights_cache = dir;
    }
    if !args.checkpoint.is_dir() {
        return Err(CliError::usage(format!("no checkpoint at {}", args.checkpoint.display())));
    }
    let model: Model<f32> = load_checkpoint(&args.checkpoint, &load_options(&config, None)).map_err(model_error)?;
    let inputs = prediction_inputs(&args.input)?;
    let k = model.num_classes();
    let stdout = io::stdout();
    let mut w = csv::Writer::from_writer(stdout.lock());
    let io_err = |e: csv::Error| CliError::failure(format!("cannot write output: {e}"));
    let mut header = vec!["path".to_string()];
    header.extend(model.class_names().iter().cloned());
    header.push("error".into());
    w.write_record(&header).map_err(io_err)?;
    let mut failed = 0;
    for path in &inputs {
        let mut row = vec![path.to_string_lossy().into_owned()];
        match probabilities(&model, path) {
            Ok(probs) => {
                row.extend(probs.iter().map(|p| p.to_string()));
                row.push(String::new());
            }
            Err(message) => {
                failed += 1;
                row.extend(std::iter::repeat_n(String::new(), k));
                row.push(message);
            }
        }
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| CliError::failure(format!("cannot write output: {e}")))?;
    io::stdout().flush().ok();
    if failed > 0 {
        eprintln!("warning: {failed} of {} images could not be read", inputs.len());
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}

fn probabilities(model: &Model<f32>, path: &Path) -> Result<Vec<f32>, String> {
    let image = load_and_resize(path).map_err(|e| e.to_string())?;
    let source = InMemorySource::new(vec![image], vec![0], model.num_classes());
    let batch = assemble_batch(&source, &[0], Some(model.normalization())).map_err(|e| e.to_string())?;
    let probs = model.predict(&batch.images).map_err(|e| e.to_string())?;
    Ok(probs.item(0).to_vec())
}

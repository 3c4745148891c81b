use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use busnet::dataset::{scan_dataset, stratified_split, DatasetManifest, Split, SplitRatios};
use busnet::metrics::{evaluate, Predictions};
use busnet::models::{build_custom_cnn, load_checkpoint, LoadOptions, Model, ModelSpec};
use busnet::preprocess::SplitSource;
use busnet::report::{compare, emit_report, read_report, METRICS_JSON};
use busnet::training::{evaluate_split, train, TrainConfig, TrainHistory, BEST_CHECKPOINT};
use image::{Rgb, RgbImage};

fn write_corpus(root: &Path) {
    for (c, class) in ["benign", "malignant", "normal"].iter().enumerate() {
        let dir = root.join(class);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..7u8 {
            let mut rgb = [40, 40 + i, 40];
            rgb[c] = 210;
            RgbImage::from_pixel(36, 48, Rgb(rgb)).save(dir.join(format!("{i}.png"))).unwrap();
        }
    }
}

fn prepared(root: &Path) -> DatasetManifest {
    write_corpus(&root.join("data"));
    let scanned = scan_dataset(&root.join("data")).unwrap();
    stratified_split(&scanned, SplitRatios::default(), 3).unwrap()
}

fn run(manifest: &DatasetManifest, out: &Path) -> (Model<f32>, TrainHistory) {
    let mut model = build_custom_cnn(ModelSpec::custom_cnn(3), 1).unwrap();
    model.set_class_names(manifest.class_names.clone()).unwrap();
    let config = TrainConfig {
        epochs: 2,
        batch_size: 4,
        checkpoint_dir: out.to_path_buf(),
        ..TrainConfig::default()
    };
    let train_src = SplitSource::new(manifest, Split::Train).unwrap();
    let val_src = SplitSource::new(manifest, Split::Validation).unwrap();
    train(model, train_src, val_src, config).unwrap()
}

#[test]
fn same_seed_reproduces_training_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = prepared(dir.path());
    let (a, ha) = run(&manifest, &dir.path().join("a"));
    let (b, hb) = run(&manifest, &dir.path().join("b"));
    let strip = |h: &TrainHistory| h.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
    assert_eq!(strip(&ha), strip(&hb));
    for (p, q) in a.params().iter().zip(b.params()) {
        assert_eq!(p.value.data(), q.value.data(), "{}", p.name);
    }
}

#[test]
fn checkpoint_to_report_to_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = prepared(dir.path());
    let ckpt_dir = dir.path().join("custom_cnn");
    let (_, history) = run(&manifest, &ckpt_dir);
    assert_eq!(TrainHistory::read_json(&ckpt_dir.join("history.json")).unwrap(), history);

    let best: Model<f32> = load_checkpoint(&ckpt_dir.join(BEST_CHECKPOINT), &LoadOptions::default()).unwrap();
    assert_eq!(best.class_names(), manifest.class_names.as_slice());
    let test = SplitSource::new(&manifest, Split::Test).unwrap();
    let predictions = evaluate_split(&best, &test, 4).unwrap();
    assert_eq!(predictions.len(), manifest.split_indices(Split::Test).len());
    let csv = dir.path().join("predictions.csv");
    predictions.write_csv(&csv).unwrap();
    assert_eq!(Predictions::read_csv(&csv).unwrap(), predictions);

    let report = evaluate(&predictions.y_true, &predictions.y_score, &manifest.class_names).unwrap();
    let out = dir.path().join("report");
    emit_report(&report, &out).unwrap();
    let reread = read_report(&out.join(METRICS_JSON)).unwrap();
    assert_eq!(reread, report);

    let mut other = report.clone();
    other.accuracy = (report.accuracy - 0.1).max(0.0);
    let reports = BTreeMap::from([("custom_cnn".to_string(), report.clone()), ("other".to_string(), other)]);
    let table = compare(&reports).unwrap();
    assert_eq!(table.rows[0].model, "custom_cnn");
    assert_eq!(table.rows[0].accuracy, report.accuracy);
}

//! Class-foldered corpus discovery, stratified train/validation/test
//! assignment and the on-disk manifest (`manifest.csv` + `manifest.meta.json`).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::seeded_rng;

/// File extensions accepted as images (compared case-insensitively).
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Floors below this distance from an integer are treated as that integer,
/// so `0.7 * 10` yields 7 regardless of binary rounding.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root not found: {0}")]
    NotFound(PathBuf),
    #[error("no class directories under {0}")]
    EmptyDataset(PathBuf),
    #[error("class directory `{0}` contains no images")]
    EmptyClass(String),
    #[error("class `{class}` has {count} samples; at least 3 are required to split")]
    ClassTooSmall { class: String, count: usize },
    #[error("invalid split ratios: {0}")]
    BadRatios(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split `{other}` (expected train, validation or test)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub class_name: String,
    pub label: usize,
    /// `None` until [`stratified_split`] runs.
    pub split: Option<Split>,
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            validation: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self, DatasetError> {
        let r = Self {
            train,
            validation,
            test,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for (name, v) in [
            ("train", self.train),
            ("validation", self.validation),
            ("test", self.test),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(DatasetError::BadRatios(format!(
                    "{name} fraction {v} is outside (0, 1)"
                )));
            }
        }
        let sum = self.train + self.validation + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::BadRatios(format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// `(train, validation, test)` counts for a class of `n` samples.
    ///
    /// Train takes `floor(train * n)`; the remainder is divided between
    /// validation and test in proportion to their fractions, validation
    /// rounding down. With equal validation/test fractions this is
    /// `floor(r / 2)` / `r - floor(r / 2)`.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train * n as f64) + FLOOR_SLACK).floor() as usize;
        let train = train.min(n);
        let rest = n - train;
        let share = self.validation / (self.validation + self.test);
        let validation = ((share * rest as f64) + FLOOR_SLACK).floor() as usize;
        let validation = validation.min(rest);
        (train, validation, rest - validation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub counts_per_class: BTreeMap<String, usize>,
    pub seed: u64,
    /// Set once a split has been assigned.
    pub ratios: Option<SplitRatios>,
}

impl DatasetManifest {
    /// Builds a manifest from samples, deriving class order and counts.
    pub fn from_samples(samples: Vec<Sample>, class_names: Vec<String>, seed: u64, ratios: Option<SplitRatios>) -> Self {
        let mut counts_per_class: BTreeMap<String, usize> =
            class_names.iter().map(|c| (c.clone(), 0)).collect();
        for s in &samples {
            *counts_per_class.entry(s.class_name.clone()).or_default() += 1;
        }
        Self {
            samples,
            class_names,
            counts_per_class,
            seed,
            ratios,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices (in manifest order) of the samples assigned to `split`.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Per class: `[train, validation, test]` counts.
    pub fn split_counts(&self) -> BTreeMap<String, [usize; 3]> {
        let mut out: BTreeMap<String, [usize; 3]> =
            self.class_names.iter().map(|c| (c.clone(), [0; 3])).collect();
        for s in &self.samples {
            if let Some(split) = s.split {
                let slot = Split::ALL.iter().position(|&x| x == split).unwrap();
                out.entry(s.class_name.clone()).or_default()[slot] += 1;
            }
        }
        out
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
        .unwrap_or(false)
}

fn is_hidden(name: &str) -> bool {
    name.starts_with('.')
}

/// Enumerates `<root>/<class>/<image>`; labels follow sorted class-folder order.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::NotFound(root.to_path_buf()));
    }
    let mut classes = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_dir() && !is_hidden(&name) {
            classes.push(name);
        }
    }
    if classes.is_empty() {
        return Err(DatasetError::EmptyDataset(root.to_path_buf()));
    }
    classes.sort();

    let mut samples = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let dir = root.join(class);
        let mut files = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let path = entry.path();
            let name = entry.file_name().to_string_lossy().into_owned();
            if path.is_file() && !is_hidden(&name) && is_image(&path) {
                files.push(name);
            }
        }
        if files.is_empty() {
            return Err(DatasetError::EmptyClass(class.clone()));
        }
        files.sort();
        samples.extend(files.into_iter().map(|f| Sample {
            path: dir.join(f),
            class_name: class.clone(),
            label,
            split: None,
        }));
    }
    Ok(DatasetManifest::from_samples(samples, classes, 0, None))
}

/// Assigns every sample to a split, independently per class.
///
/// Each class's members are shuffled by an RNG keyed on `(seed, class name)`,
/// then the first `train` go to training, the next `validation` to
/// validation and the rest to test. Adding or removing a class never moves
/// samples of another class.
pub fn stratified_split(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    ratios.validate()?;
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        by_class.entry(s.class_name.as_str()).or_default().push(i);
    }
    let mut out = manifest.clone();
    for (class, mut members) in by_class {
        let n = members.len();
        if n < 3 {
            return Err(DatasetError::ClassTooSmall {
                class: class.to_string(),
                count: n,
            });
        }
        members.shuffle(&mut seeded_rng(seed, &format!("split/{class}")));
        let (train, validation, _) = ratios.counts(n);
        for (rank, idx) in members.into_iter().enumerate() {
            out.samples[idx].split = Some(if rank < train {
                Split::Train
            } else if rank < train + validation {
                Split::Validation
            } else {
                Split::Test
            });
        }
    }
    out.seed = seed;
    out.ratios = Some(ratios);
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ManifestMeta {
    class_names: Vec<String>,
    seed: u64,
    ratios: Option<SplitRatios>,
}

/// `manifest.csv` → `manifest.meta.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    csv_path.with_file_name(format!("{stem}.meta.json"))
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_to_io(e, path))?;
    writer
        .write_record(["path", "class_name", "label", "split"])
        .map_err(|e| csv_to_io(e, path))?;
    for s in &manifest.samples {
        let label = s.label.to_string();
        writer
            .write_record([
                s.path.to_string_lossy().as_ref(),
                s.class_name.as_str(),
                label.as_str(),
                s.split.map(Split::as_str).unwrap_or(""),
            ])
            .map_err(|e| csv_to_io(e, path))?;
    }
    writer.flush().map_err(io_err(path))?;

    let meta = ManifestMeta {
        class_names: manifest.class_names.clone(),
        seed: manifest.seed,
        ratios: manifest.ratios,
    };
    let meta_path = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).expect("manifest metadata serializes");
    fs::write(&meta_path, json + "\n").map_err(io_err(&meta_path))
}

fn csv_to_io(e: csv::Error, path: &Path) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e.to_string()),
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let meta_path = sidecar_path(path);
    let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: ManifestMeta = serde_json::from_str(&meta_text).map_err(|e| DatasetError::Parse {
        path: meta_path.clone(),
        line: e.line() as u64,
        message: e.to_string(),
    })?;
    if meta.class_names.is_empty() {
        return Err(DatasetError::Parse {
            path: meta_path,
            line: 1,
            message: "class_names is empty".into(),
        });
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_to_io(e, path))?;
    let parse_err = |line: u64, message: String| DatasetError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if headers != vec!["path", "class_name", "label", "split"] {
        return Err(parse_err(1, format!("unexpected header {headers:?}")));
    }

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, found {}", record.len())));
        }
        let class_name = record[1].to_string();
        let label: usize = record[2]
            .parse()
            .map_err(|_| parse_err(line, format!("invalid label `{}`", &record[2])))?;
        let expected = meta
            .class_names
            .iter()
            .position(|c| *c == class_name)
            .ok_or_else(|| parse_err(line, format!("unknown class `{class_name}`")))?;
        if expected != label {
            return Err(parse_err(
                line,
                format!("label {label} disagrees with class `{class_name}` (index {expected})"),
            ));
        }
        let split = match &record[3] {
            "" => None,
            token => Some(token.parse::<Split>().map_err(|m| parse_err(line, m))?),
        };
        samples.push(Sample {
            path: PathBuf::from(&record[0]),
            class_name,
            label,
            split,
        });
    }
    Ok(DatasetManifest::from_samples(
        samples,
        meta.class_names,
        meta.seed,
        meta.ratios,
    ))
}

//! File-driven experiments: config schema, dataset variant preparation, one
//! training run per seed, and model/variant comparison suites.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    augmented_variant, drop_classes, load_idx, permuted_variant, split, write_idx, AugmentMode, ImageDataset, Variant,
};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, atomic_write_json};
use crate::layers::IdentityMode;
use crate::symmetry::group_by_name;
use crate::tensor::RngState;
use crate::training::{
    build_model, evaluate, save_checkpoint, train, ModelKind, ModelSpec, PriorConfig, TrainConfig, TrainedModel,
    TrajectoryLog,
};

pub const DATA_DIR_ENV: &str = "SYMLEARN_DATA_DIR";

/// Classes removed from the rotated variant (6 and 9 are rotations of each
/// other).
pub const ROTATED_DROPPED_CLASSES: [usize; 2] = [6, 9];

const STREAM_SUBSET: u64 = 21;
const STREAM_INIT: u64 = 22;

fn default_train_images() -> String {
    "train-images-idx3-ubyte".into()
}
fn default_train_labels() -> String {
    "train-labels-idx1-ubyte".into()
}
fn default_test_images() -> String {
    "t10k-images-idx3-ubyte".into()
}
fn default_test_labels() -> String {
    "t10k-labels-idx1-ubyte".into()
}

/// IDX file locations. Relative names resolve against `dir`, which defaults to
/// `$SYMLEARN_DATA_DIR`. A missing file is retried with a `.gz` suffix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_train_images")]
    pub train_images: String,
    #[serde(default = "default_train_labels")]
    pub train_labels: String,
    #[serde(default = "default_test_images")]
    pub test_images: String,
    #[serde(default = "default_test_labels")]
    pub test_labels: String,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            dir: None,
            train_images: default_train_images(),
            train_labels: default_train_labels(),
            test_images: default_test_images(),
            test_labels: default_test_labels(),
        }
    }
}

impl DataPaths {
    pub fn root(&self) -> Option<PathBuf> {
        self.dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }

    fn resolve(&self, name: &str) -> PathBuf {
        let p = PathBuf::from(name);
        let p = match self.root() {
            Some(root) if p.is_relative() => root.join(p),
            _ => p,
        };
        if !p.exists() {
            let gz = PathBuf::from(format!("{}.gz", p.display()));
            if gz.exists() {
                return gz;
            }
        }
        p
    }

    pub fn load_train(&self) -> Result<ImageDataset> {
        load_idx(&self.resolve(&self.train_images), &self.resolve(&self.train_labels))
    }

    pub fn load_test(&self) -> Result<ImageDataset> {
        load_idx(&self.resolve(&self.test_images), &self.resolve(&self.test_labels))
    }
}

/// How the variant is built from the plain files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub variant: Variant,
    /// Seed of the pixel permutation or of the group element draws.
    #[serde(default)]
    pub seed: u64,
    /// Transform each training image independently instead of one element per
    /// class.
    #[serde(default)]
    pub per_image: bool,
}

impl VariantConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            seed,
            per_image: false,
        }
    }
}

/// A materialized variant: both splits plus what was done to them.
#[derive(Clone, Debug)]
pub struct PreparedVariant {
    pub train: ImageDataset,
    pub test: ImageDataset,
    pub manifest: VariantManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantManifest {
    pub variant: Variant,
    pub seed: u64,
    pub per_image: bool,
    pub dropped_classes: Vec<usize>,
    /// Original label of each class id in the prepared files.
    pub class_remap: Vec<usize>,
    pub train_count: usize,
    pub test_count: usize,
}

/// Builds the variant from the plain splits. Train and test share the
/// permutation (permuted); the test split gets an independent uniform group
/// element per image (rotated/flipped).
pub fn prepare_variant(train: &ImageDataset, test: &ImageDataset, cfg: &VariantConfig) -> Result<PreparedVariant> {
    let n = train.side();
    let train_mode = if cfg.per_image {
        AugmentMode::TrainPerImage
    } else {
        AugmentMode::TrainFixed
    };
    let (train, test, dropped) = match cfg.variant {
        Variant::Plain => (train.clone(), test.clone(), Vec::new()),
        Variant::Permuted => (permuted_variant(train, cfg.seed)?, permuted_variant(test, cfg.seed)?, Vec::new()),
        Variant::Flipped => {
            let g = group_by_name("flip", n)?;
            (
                augmented_variant(train, &g, train_mode, cfg.seed)?,
                augmented_variant(test, &g, AugmentMode::TestRandom, cfg.seed)?,
                Vec::new(),
            )
        }
        Variant::Rotated => {
            let g = group_by_name("rot90", n)?;
            let dropped = ROTATED_DROPPED_CLASSES.to_vec();
            let tr = drop_classes(train, &dropped)?;
            let te = drop_classes(test, &dropped)?;
            (
                augmented_variant(&tr, &g, train_mode, cfg.seed)?,
                augmented_variant(&te, &g, AugmentMode::TestRandom, cfg.seed)?,
                dropped,
            )
        }
    };
    let manifest = VariantManifest {
        variant: cfg.variant,
        seed: cfg.seed,
        per_image: cfg.per_image,
        dropped_classes: dropped,
        class_remap: train.source_classes().to_vec(),
        train_count: train.len(),
        test_count: test.len(),
    };
    Ok(PreparedVariant { train, test, manifest })
}

/// Writes `train-*`/`t10k-*` IDX files and `manifest.json` into `dir`.
pub fn write_prepared(prepared: &PreparedVariant, dir: &Path) -> Result<()> {
    let defaults = DataPaths::default();
    write_idx(
        &prepared.train,
        &dir.join(&defaults.train_images),
        &dir.join(&defaults.train_labels),
    )?;
    write_idx(
        &prepared.test,
        &dir.join(&defaults.test_images),
        &dir.join(&defaults.test_labels),
    )?;
    atomic_write_json(&dir.join("manifest.json"), &prepared.manifest)
}

fn default_hidden_width() -> usize {
    100
}
fn default_temperature() -> f64 {
    1.0
}

/// Model fields of a config; dimensions come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    #[serde(default)]
    pub groups: Option<Vec<String>>,
    #[serde(default)]
    pub identity_mode: IdentityMode,
    #[serde(default)]
    pub prior: Option<PriorConfig>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            hidden_width: default_hidden_width(),
            groups: None,
            identity_mode: IdentityMode::default(),
            prior: None,
            temperature: default_temperature(),
        }
    }

    pub fn spec(&self, input_dim: usize, class_count: usize, seed: u64) -> ModelSpec {
        let mut spec = ModelSpec::new(self.kind, input_dim, self.hidden_width, class_count);
        if let Some(groups) = &self.groups {
            spec.groups = groups.clone();
        }
        spec.identity_mode = self.identity_mode;
        spec.prior = self.prior.clone();
        spec.temperature = self.temperature;
        spec.seed = seed;
        spec
    }

    /// Run name: the kind, plus the groups when they are given explicitly.
    pub fn label(&self) -> String {
        match (&self.kind, &self.groups) {
            (ModelKind::InvariantNet, Some(groups)) => format!("{}-{}", self.kind, groups.join("+")),
            _ => self.kind.to_string(),
        }
    }
}

fn default_val_fraction() -> f64 {
    0.1
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataPaths,
    pub variant: VariantConfig,
    /// Use only this many (seeded, per-run) training images.
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} not in (0, 1)", self.val_fraction)));
        }
        if self.train_subset == Some(0) || self.test_subset == Some(0) {
            return Err(Error::Config("subset sizes must be positive".into()));
        }
        if self.training.batch_size == 0 || self.training.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        // Dimensions are placeholders here; the real ones are checked per run.
        self.model.spec(784, 10, 0).validate()
    }

    pub fn run_name(&self) -> String {
        format!("{}-{}", self.model.label(), self.variant.variant)
    }
}

/// Everything one seed produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub model: TrainedModel,
    pub log: TrajectoryLog,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: ModelKind,
    pub variant: Variant,
    pub seed: u64,
    pub test_accuracy: f64,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub final_pi: Option<Vec<f64>>,
}

fn seeded_subset(ds: &ImageDataset, n: Option<usize>, seed: u64) -> ImageDataset {
    match n {
        Some(n) if n < ds.len() => {
            let mut idx = RngState::with_stream(seed, STREAM_SUBSET).permutation(ds.len());
            idx.truncate(n);
            ds.subset(&idx)
        }
        _ => ds.clone(),
    }
}

/// Trains one seed on an already prepared variant and scores it on the test
/// split.
pub fn run_seed(cfg: &ExperimentConfig, prepared: &PreparedVariant, seed: u64) -> Result<RunOutcome> {
    let train_all = seeded_subset(&prepared.train, cfg.train_subset, seed);
    let test = match cfg.test_subset {
        Some(n) => prepared.test.take_first(n),
        None => prepared.test.clone(),
    };
    let parts = split(&train_all, cfg.val_fraction, seed)?;
    let train_set = train_all.subset(&parts.train);
    let val_set = train_all.subset(&parts.val);
    let spec = cfg.model.spec(train_all.dim(), train_all.class_count(), seed);
    let model = build_model(&spec, &mut RngState::with_stream(seed, STREAM_INIT))?;
    let training = TrainConfig {
        seed,
        ..cfg.training.clone()
    };
    let (model, log) = train(model, &train_set, &val_set, &training)?;
    let test_accuracy = evaluate(&model, &test)?;
    Ok(RunOutcome {
        seed,
        model,
        log,
        test_accuracy,
    })
}

impl RunOutcome {
    pub fn summary(&self, cfg: &ExperimentConfig) -> RunSummary {
        RunSummary {
            model: cfg.model.kind,
            variant: cfg.variant.variant,
            seed: self.seed,
            test_accuracy: self.test_accuracy,
            best_val_accuracy: self.log.best_val_accuracy().unwrap_or(f64::NAN),
            best_epoch: self.log.best_epoch,
            epochs_run: self.log.records.len(),
            final_pi: self.model.final_pi.clone(),
        }
    }
}

/// Output file paths of one seed.
pub fn run_paths(cfg: &ExperimentConfig, seed: u64) -> (PathBuf, PathBuf, PathBuf) {
    let stem = format!("{}-seed{seed}", cfg.run_name());
    let dir = &cfg.output_dir;
    (
        dir.join(format!("{stem}.checkpoint.json")),
        dir.join(format!("{stem}.trajectory.csv")),
        dir.join(format!("{stem}.summary.json")),
    )
}

pub fn write_run(cfg: &ExperimentConfig, outcome: &RunOutcome) -> Result<()> {
    let (ckpt, traj, summary) = run_paths(cfg, outcome.seed);
    save_checkpoint(&outcome.model, &ckpt)?;
    outcome.log.write_csv(&traj)?;
    atomic_write_json(&summary, &outcome.summary(cfg))
}

/// Loads data once and runs every seed, writing outputs as each finishes. On
/// a numeric failure the partial trajectory is written before returning.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let prepared = prepare_variant(&cfg.data.load_train()?, &cfg.data.load_test()?, &cfg.variant)?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        match run_seed(cfg, &prepared, seed) {
            Ok(outcome) => {
                write_run(cfg, &outcome)?;
                out.push(outcome);
            }
            Err(Error::NonFinite {
                epoch,
                batch,
                snapshot,
                partial_log,
            }) => {
                let (_, traj, _) = run_paths(cfg, seed);
                partial_log.write_csv(&traj)?;
                return Err(Error::NonFinite {
                    epoch,
                    batch,
                    snapshot,
                    partial_log,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Test-time transformation applied at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestTransform {
    None,
    Rot90,
    Flip,
}

impl TestTransform {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Self::None),
            "rot90" => Ok(Self::Rot90),
            "flip" => Ok(Self::Flip),
            other => Err(Error::Config(format!(
                "unknown transform '{other}', expected none, rot90 or flip"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Rot90 => "rot90",
            Self::Flip => "flip",
        }
    }

    /// Each image gets an independent uniform element of the group.
    pub fn apply(self, ds: &ImageDataset, seed: u64) -> Result<ImageDataset> {
        match self {
            Self::None => Ok(ds.clone()),
            other => augmented_variant(ds, &group_by_name(other.name(), ds.side())?, AugmentMode::TestRandom, seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n: usize,
    pub transform: String,
}

/// Accuracy of a model on `ds` after an optional test-time transform. Empty
/// data and dimension mismatches are usage errors.
pub fn evaluate_with_transform(
    model: &TrainedModel,
    ds: &ImageDataset,
    transform: TestTransform,
    seed: u64,
) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    if ds.dim() != model.spec().input_dim {
        return Err(Error::Config(format!(
            "dataset images have {} pixels, checkpoint expects {}",
            ds.dim(),
            model.spec().input_dim
        )));
    }
    if ds.class_count() > model.spec().class_count {
        return Err(Error::Config(format!(
            "dataset has {} classes, checkpoint predicts {}",
            ds.class_count(),
            model.spec().class_count
        )));
    }
    let data = transform.apply(ds, seed)?;
    Ok(EvalReport {
        accuracy: evaluate(model, &data)?,
        n: data.len(),
        transform: transform.name().to_string(),
    })
}

/// A grid of models x variants x seeds sharing data and training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default)]
    pub data: DataPaths,
    pub models: Vec<ModelConfig>,
    pub variants: Vec<VariantConfig>,
    /// Extra test-time transforms; the variant's own test split is always
    /// scored as `none`.
    #[serde(default)]
    pub test_transforms: Vec<TestTransform>,
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl SuiteConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("suite needs at least one model, variant and seed".into()));
        }
        for (m, v) in self.models.iter().zip(self.variants.iter().cycle()) {
            self.experiment(m, v).validate()?;
        }
        Ok(())
    }

    pub fn experiment(&self, model: &ModelConfig, variant: &VariantConfig) -> ExperimentConfig {
        ExperimentConfig {
            data: self.data.clone(),
            variant: variant.clone(),
            train_subset: self.train_subset,
            test_subset: self.test_subset,
            val_fraction: self.val_fraction,
            model: model.clone(),
            training: self.training.clone(),
            seeds: self.seeds.clone(),
            output_dir: self.output_dir.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub model: String,
    pub variant: Variant,
    pub test_transform: String,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub rows: Vec<CompareRow>,
    pub failures: usize,
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every cell of the suite; a failing run is recorded and the suite
/// continues.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteResult> {
    cfg.validate()?;
    let train_raw = cfg.data.load_train()?;
    let test_raw = cfg.data.load_test()?;
    let mut transforms = vec![TestTransform::None];
    transforms.extend(cfg.test_transforms.iter().copied().filter(|t| *t != TestTransform::None));
    let mut rows = Vec::new();
    let mut failures = 0;
    for variant in &cfg.variants {
        let prepared = prepare_variant(&train_raw, &test_raw, variant)?;
        for model in &cfg.models {
            let exp = cfg.experiment(model, variant);
            for &seed in &cfg.seeds {
                let result = run_seed(&exp, &prepared, seed).and_then(|outcome| {
                    write_run(&exp, &outcome)?;
                    let test = match exp.test_subset {
                        Some(n) => prepared.test.take_first(n),
                        None => prepared.test.clone(),
                    };
                    transforms
                        .iter()
                        .map(|&t| evaluate_with_transform(&outcome.model, &test, t, seed).map(|r| (t, r.accuracy)))
                        .collect::<Result<Vec<_>>>()
                });
                match result {
                    Ok(scores) => rows.extend(scores.into_iter().map(|(t, acc)| CompareRow {
                        model: model.label(),
                        variant: variant.variant,
                        test_transform: t.name().into(),
                        seed,
                        accuracy: Some(acc),
                        error: None,
                    })),
                    Err(e) => {
                        failures += 1;
                        rows.extend(transforms.iter().map(|t| CompareRow {
                            model: model.label(),
                            variant: variant.variant,
                            test_transform: t.name().into(),
                            seed,
                            accuracy: None,
                            error: Some(e.to_string()),
                        }));
                    }
                }
            }
        }
    }
    Ok(SuiteResult { rows, failures })
}

/// CSV `model,variant,test_transform,seed,accuracy,std`: one row per run,
/// then one summary row per (model, variant, transform) with `seed = mean`,
/// the mean accuracy and its sample standard deviation. Failed runs have an
/// empty accuracy and are left out of the summaries.
pub fn compare_csv(rows: &[CompareRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "variant", "test_transform", "seed", "accuracy", "std"])?;
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        let key = (r.model.clone(), r.variant.to_string(), r.test_transform.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        let entry = groups.entry(key).or_default();
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        if let Some(a) = r.accuracy {
            entry.push(a);
        }
        w.write_record([
            r.model.as_str(),
            &r.variant.to_string(),
            &r.test_transform,
            &r.seed.to_string(),
            &acc,
            "",
        ])?;
    }
    for key in order {
        let values = &groups[&key];
        let (mean, std) = if values.is_empty() {
            (String::new(), String::new())
        } else {
            let (m, s) = mean_std(values);
            (m.to_string(), s.to_string())
        };
        w.write_record([key.0.as_str(), &key.1, &key.2, "mean", &mean, &std])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_compare_csv(rows: &[CompareRow], path: &Path) -> Result<()> {
    let text = compare_csv(rows)?;
    atomic_write(path, |w| w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e)))
}

//! JSON experiment configuration. Every section is optional except
//! `output_dir`; unknown keys are rejected with their key path.

use crate::criteria::{KdCriterion, KdVariant, HKD_TEMPERATURE, LAMBDA_FEATURES, LAMBDA_LOGITS};
use crate::data::{load_idx, make_blobs_from, subsample, train_test_split, BlobSpec, Dataset, Splits};
use crate::error::{Error, Result};
use crate::incremental::{ClassOrder, IlConfig, IlMethod, SI_DAMPING};
use crate::optim::Schedule;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default = "ModelSpec::teacher")]
    pub teacher: ModelSpec,
    #[serde(default = "ModelSpec::student")]
    pub student: ModelSpec,
    #[serde(default)]
    pub criterion: CriterionSpec,
    #[serde(default)]
    pub schedule: Schedule,
    /// Teacher schedule; the student schedule when absent.
    #[serde(default)]
    pub teacher_schedule: Option<Schedule>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub teacher_seed: u64,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub incremental: IncrementalSection,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        dim: usize,
        n_per_class: usize,
        separation: f64,
        #[serde(default = "one")]
        std: f64,
        #[serde(default = "one_usize")]
        modes_per_class: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
    /// Uncompressed IDX files; relative paths resolve against the config
    /// file's directory. Without a test pair the train pair is split.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        /// Stratified cap on training items.
        #[serde(default)]
        max_train: Option<usize>,
        #[serde(default)]
        max_test: Option<usize>,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_train_fraction() -> f64 {
    0.8
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs {
            classes: 10,
            dim: 20,
            n_per_class: 200,
            separation: 4.0,
            std: 1.0,
            modes_per_class: 3,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

impl DatasetSpec {
    /// Builds standardized train/test splits; statistics come from the train
    /// split only.
    pub fn load(&self, base_dir: &Path) -> Result<Splits> {
        match self {
            DatasetSpec::Blobs {
                classes,
                dim,
                n_per_class,
                separation,
                std,
                modes_per_class,
                seed,
                train_fraction,
            } => {
                let ds = make_blobs_from(&BlobSpec {
                    classes: *classes,
                    dim: *dim,
                    n_per_class: *n_per_class,
                    separation: *separation,
                    std: *std,
                    modes_per_class: *modes_per_class,
                    seed: *seed,
                })?;
                let (train, test) = train_test_split(&ds, *train_fraction, seed ^ 0x5b1)?;
                Ok(Splits::standardized(train, test))
            }
            DatasetSpec::Idx {
                images,
                labels,
                test_images,
                test_labels,
                max_train,
                max_test,
                train_fraction,
                seed,
            } => {
                let abs = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                let all = load_idx(&abs(images), &abs(labels))?;
                let (train, test) = match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => (all, load_idx(&abs(ti), &abs(tl))?),
                    (None, None) => train_test_split(&all, *train_fraction, seed ^ 0x5b1)?,
                    _ => return Err(Error::invalid("test_images and test_labels must be given together")),
                };
                let cap = |ds: Dataset, n: Option<usize>, s: u64| match n {
                    Some(n) if n < ds.len() => subsample(&ds, n, s),
                    _ => ds,
                };
                let train = cap(train, *max_train, *seed);
                let test = cap(test, *max_test, seed.wrapping_add(1));
                Ok(Splits::standardized(train, test))
            }
        }
    }
}

/// MLP widths between the input and the penultimate features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub features: usize,
}

impl ModelSpec {
    pub fn teacher() -> Self {
        Self {
            hidden: vec![256, 256],
            features: 128,
        }
    }

    pub fn student() -> Self {
        Self {
            hidden: vec![64],
            features: 64,
        }
    }

    /// `[input, hidden…, features]`.
    pub fn widths(&self, input: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(&self.hidden);
        w.push(self.features);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriterionSpec {
    /// Overrides the per-variant default weight for every variant.
    pub lambda: Option<f64>,
    pub lambda_f: f64,
    pub lambda_l: f64,
    pub temperature: f64,
}

impl Default for CriterionSpec {
    fn default() -> Self {
        Self {
            lambda: None,
            lambda_f: LAMBDA_FEATURES,
            lambda_l: LAMBDA_LOGITS,
            temperature: HKD_TEMPERATURE,
        }
    }
}

impl CriterionSpec {
    pub fn criterion(&self, variant: KdVariant) -> Result<KdCriterion> {
        KdCriterion::with_coefficients(variant, self.lambda_f, self.lambda_l, self.temperature, self.lambda)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub widths: Vec<usize>,
    /// KD variants besides the vanilla and HKD baselines.
    pub variants: Vec<KdVariant>,
    /// λ grid for the single-pair tuning protocol; empty skips tuning.
    pub tuning_grid: Vec<f64>,
    /// Student feature width of the tuning pair.
    pub tuning_width: Option<usize>,
    pub tuning_holdout: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128, 256, 512],
            variants: vec![
                KdVariant::LogitsSe,
                KdVariant::WeightedEFeaturesSe,
                KdVariant::WeightedHFeaturesSe,
                KdVariant::FeaturesSe,
            ],
            tuning_grid: Vec::new(),
            tuning_width: None,
            tuning_holdout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncrementalSection {
    pub tasks: usize,
    /// Seed of the class permutation; identity order when absent.
    pub class_order_seed: Option<u64>,
    pub model: ModelSpec,
    /// Schedule per task; the top-level schedule when absent.
    pub schedule: Option<Schedule>,
    pub seeds: Vec<u64>,
    /// λ per method; methods not listed use `default_lambda`.
    pub lambda: BTreeMap<IlMethod, f64>,
    pub default_lambda: f64,
    /// When nonempty, λ is grid-searched on `grid_fraction` of the data and
    /// `lambda`/`default_lambda` are ignored.
    pub grid: Vec<f64>,
    pub grid_fraction: f64,
    pub si_damping: f64,
    pub importance_samples: usize,
}

impl Default for IncrementalSection {
    fn default() -> Self {
        Self {
            tasks: 5,
            class_order_seed: None,
            model: ModelSpec {
                hidden: vec![64],
                features: 8,
            },
            schedule: None,
            seeds: vec![0, 1, 2],
            lambda: BTreeMap::new(),
            default_lambda: 1.0,
            grid: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0],
            grid_fraction: 0.2,
            si_damping: SI_DAMPING,
            importance_samples: 256,
        }
    }
}

impl IncrementalSection {
    pub fn class_order(&self) -> ClassOrder {
        self.class_order_seed.map_or(ClassOrder::Identity, ClassOrder::Shuffled)
    }

    pub fn lambda_for(&self, method: IlMethod) -> f64 {
        match method {
            IlMethod::Vanilla | IlMethod::Joint => 0.0,
            m => self.lambda.get(&m).copied().unwrap_or(self.default_lambda),
        }
    }

    pub fn il_config(&self, fallback: &Schedule, input: usize, lambda: f64, seed: u64) -> IlConfig {
        IlConfig {
            schedule: self.schedule.clone().unwrap_or_else(|| fallback.clone()),
            widths: self.model.widths(input),
            lambda,
            si_damping: self.si_damping,
            importance_samples: self.importance_samples,
            seed,
        }
    }
}

impl ExperimentConfig {
    pub fn teacher_schedule(&self) -> &Schedule {
        self.teacher_schedule.as_ref().unwrap_or(&self.schedule)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.teacher_schedule().validate()?;
        if let Some(s) = &self.incremental.schedule {
            s.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds must not be empty"));
        }
        for m in [&self.teacher, &self.student, &self.incremental.model] {
            if m.features == 0 || m.hidden.contains(&0) {
                return Err(Error::invalid("layer widths must be positive"));
            }
        }
        if self.sweep.widths.contains(&0) {
            return Err(Error::invalid("sweep widths must be positive"));
        }
        if self.incremental.tasks == 0 || self.incremental.seeds.is_empty() {
            return Err(Error::invalid("incremental needs at least one task and one seed"));
        }
        if !(self.incremental.grid_fraction > 0.0 && self.incremental.grid_fraction <= 1.0) {
            return Err(Error::invalid("grid_fraction must be in (0, 1]"));
        }
        if self.incremental.lambda.values().chain([&self.incremental.default_lambda]).any(|l| !(*l >= 0.0)) {
            return Err(Error::invalid("incremental λ must be nonnegative"));
        }
        if !(self.sweep.tuning_holdout > 0.0 && self.sweep.tuning_holdout < 1.0) {
            return Err(Error::invalid("tuning_holdout must be in (0, 1)"));
        }
        for v in KdVariant::ALL {
            self.criterion.criterion(v)?;
        }
        match &self.dataset {
            DatasetSpec::Blobs { train_fraction, .. } | DatasetSpec::Idx { train_fraction, .. }
                if !(*train_fraction > 0.0 && *train_fraction < 1.0) =>
            {
                Err(Error::invalid("train_fraction must be in (0, 1)"))
            }
            _ => Ok(()),
        }
    }
}

/// Parses and validates a config document; `path` labels error messages.
pub fn parse_config_str(text: &str, path: &Path) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        let inner = e.into_inner();
        let message = if at == "." || at.is_empty() {
            inner.to_string()
        } else {
            format!("at `{at}`: {inner}")
        };
        Error::Config {
            path: path.display().to_string(),
            message,
        }
    })?;
    cfg.validate().map_err(|e| Error::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, path)
}

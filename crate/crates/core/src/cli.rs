//! Subcommand implementations behind the `kdlab` binary. Every output file
//! is written atomically and contains no timing information, so a results
//! directory is a pure function of its config.

use crate::compression::{
    hyperparam_protocol, plot_rows, rpr_rows, summarize, train, validation_accuracy, width_sweep, PlotRow, RprCell,
    SweepRun, SweepSpec, TrainConfig, TuningPair, PLOT_HEADER,
};
use crate::config::ExperimentConfig;
use crate::criteria::{KdCriterion, KdVariant};
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::incremental::{il_train, tuned_il_train, split_tasks, IlMethod, IlResult};
use crate::nets::{MultiHeadNet, NetSpec};
use crate::results::{
    mean_std, read_csv, run_id, write_atomic, write_json_atomic, write_metric_csv, write_task_csv, MetricRow,
    TaskAccuracyRow,
};
use crate::theory::{self, VerificationReport};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Environment variable bounding the worker pool.
pub const WORKERS_ENV: &str = "KDLAB_WORKERS";

pub const TEACHER_FILE: &str = "teacher.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SUMMARY: &str = "sweep_summary.json";
pub const SWEEP_PLOT: &str = "sweep_plot.csv";
pub const REPORT_FILE: &str = "report.json";

/// Worker pool sized by [`WORKERS_ENV`], defaulting to the available cores.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// A parsed config together with the directory relative paths resolve to.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    config_text: String,
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let config = crate::config::parse_config(path)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::new(config, base_dir))
    }

    pub fn new(config: ExperimentConfig, base_dir: PathBuf) -> Self {
        let config_text = serde_json::to_string(&config).expect("config serializes");
        Self {
            config,
            base_dir,
            config_text,
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        let out = &self.config.output_dir;
        if out.is_absolute() {
            out.clone()
        } else {
            self.base_dir.join(out)
        }
    }

    pub fn splits(&self) -> Result<Splits> {
        self.config.dataset.load(&self.base_dir)
    }

    fn run_id(&self, seed: u64, what: &str) -> String {
        run_id(&self.config_text, seed, what)
    }
}

/// Runs the four theory checks; the bool is true when all pass.
pub fn verify(seed: u64) -> Result<(Vec<VerificationReport>, bool)> {
    let reports = theory::run_all(seed)?;
    let ok = reports.iter().all(|r| r.passed);
    Ok((reports, ok))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub run_id: String,
    pub widths: Vec<usize>,
    pub seed: u64,
    pub test_accuracy: f64,
}

fn teacher_widths(exp: &Experiment, splits: &Splits) -> Vec<usize> {
    exp.config.teacher.widths(splits.train.dim())
}

/// Trains the teacher and writes its checkpoint and per-epoch metrics.
pub fn train_teacher(exp: &Experiment, splits: &Splits) -> Result<(MultiHeadNet, TeacherSummary)> {
    let cfg = TrainConfig {
        schedule: exp.config.teacher_schedule().clone(),
        seed: exp.config.teacher_seed,
        criterion: KdCriterion::new(KdVariant::None),
        widths: teacher_widths(exp, splits),
    };
    let (student, result) = train(&cfg, splits, None)?;
    let out = exp.output_dir();
    let id = exp.run_id(cfg.seed, "teacher");
    let rows = epoch_rows(&id, "teacher", exp.config.teacher.features, cfg.seed, &result);
    student.net.save(&out.join(TEACHER_FILE))?;
    write_metric_csv(&out.join("teacher.csv"), &rows)?;
    let summary = TeacherSummary {
        run_id: id,
        widths: cfg.widths,
        seed: cfg.seed,
        test_accuracy: result.final_test_accuracy,
    };
    write_json_atomic(&out.join("teacher_summary.json"), &summary)?;
    Ok((student.net, summary))
}

/// Loads the teacher checkpoint from the output directory when it matches
/// the configured architecture, otherwise trains one.
pub fn ensure_teacher(exp: &Experiment, splits: &Splits) -> Result<MultiHeadNet> {
    let path = exp.output_dir().join(TEACHER_FILE);
    if path.exists() {
        let net = MultiHeadNet::load(&path)?;
        let expected = NetSpec {
            widths: teacher_widths(exp, splits),
            heads: vec![splits.train.classes],
            seed: exp.config.teacher_seed,
        };
        if net.trunk.widths() == expected.widths && net.head_classes() == expected.heads && net.seed == expected.seed {
            return Ok(net);
        }
        return Err(Error::Checkpoint(format!(
            "{} does not match the configured teacher; remove it or rerun train-teacher",
            path.display()
        )));
    }
    Ok(train_teacher(exp, splits)?.0)
}

fn epoch_rows(id: &str, variant: &str, width: usize, seed: u64, res: &crate::compression::RunResult) -> Vec<MetricRow> {
    let row = |split: &str, metric: String, value: f64| MetricRow {
        run_id: id.to_string(),
        variant: variant.to_string(),
        width,
        seed,
        split: split.to_string(),
        metric,
        value,
    };
    let mut rows = Vec::new();
    for e in &res.epochs {
        rows.push(row("train", format!("loss@{}", e.epoch + 1), e.train_loss));
        rows.push(row("train", format!("accuracy@{}", e.epoch + 1), e.train_accuracy));
        rows.push(row("test", format!("loss@{}", e.epoch + 1), e.test_loss));
        rows.push(row("test", format!("accuracy@{}", e.epoch + 1), e.test_accuracy));
    }
    rows.push(row("train", "initial_loss".into(), res.initial_loss.total));
    rows.push(row("test", "accuracy".into(), res.final_test_accuracy));
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub variant: KdVariant,
    pub criterion: KdCriterion,
    pub width: usize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub teacher_accuracy: Option<f64>,
}

/// Trains one student per configured seed under `variant`.
pub fn distill(exp: &Experiment, variant: KdVariant, pool: &rayon::ThreadPool) -> Result<DistillSummary> {
    use rayon::prelude::*;
    let splits = exp.splits()?;
    let teacher = match variant {
        KdVariant::None => None,
        _ => Some(ensure_teacher(exp, &splits)?),
    };
    let criterion = exp.config.criterion.criterion(variant)?;
    let widths = exp.config.student.widths(splits.train.dim());
    let width = exp.config.student.features;
    let results = pool.install(|| {
        exp.config
            .seeds
            .par_iter()
            .map(|&seed| {
                let cfg = TrainConfig {
                    schedule: exp.config.schedule.clone(),
                    seed,
                    criterion,
                    widths: widths.clone(),
                };
                train(&cfg, &splits, teacher.as_ref()).map(|(_, r)| r)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::new();
    for (seed, res) in exp.config.seeds.iter().zip(&results) {
        let id = exp.run_id(*seed, &format!("distill/{variant}"));
        rows.extend(epoch_rows(&id, variant.name(), width, *seed, res));
    }
    let out = exp.output_dir();
    write_metric_csv(&out.join(format!("distill-{variant}.csv")), &rows)?;
    let accuracies: Vec<f64> = results.iter().map(|r| r.final_test_accuracy).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&accuracies);
    let teacher_accuracy = teacher
        .as_ref()
        .map(|t| crate::compression::evaluate(t, &splits.test).map(|(_, a)| a))
        .transpose()?;
    let summary = DistillSummary {
        variant,
        criterion,
        width,
        seeds: exp.config.seeds.clone(),
        accuracies,
        accuracy_mean,
        accuracy_std,
        teacher_accuracy,
    };
    write_json_atomic(&out.join(format!("distill-{variant}.json")), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub teacher_accuracy: f64,
    /// λ chosen by the tuning protocol for each tuned variant.
    pub tuned_lambda: BTreeMap<KdVariant, f64>,
    pub cells: Vec<RprCell>,
}

/// Width sweep with optional single-pair λ tuning; writes the raw runs, the
/// seed-aggregated summary and the plot table.
pub fn sweep_width(exp: &Experiment, pool: &rayon::ThreadPool) -> Result<SweepSummary> {
    let c = &exp.config;
    let splits = exp.splits()?;
    let teacher = ensure_teacher(exp, &splits)?;
    let mut criteria = BTreeMap::new();
    for v in KdVariant::ALL {
        criteria.insert(v, c.criterion.criterion(v)?);
    }
    let mut tuned_lambda = BTreeMap::new();
    if !c.sweep.tuning_grid.is_empty() {
        let tuning_width = c.sweep.tuning_width.unwrap_or(c.student.features);
        let pairs: Vec<TuningPair> = c
            .sweep
            .widths
            .iter()
            .map(|&w| TuningPair {
                name: format!("student-{w}"),
                tuning: w == tuning_width,
            })
            .collect();
        let tuned: Vec<KdVariant> = c.sweep.variants.iter().copied().filter(|&v| v != KdVariant::None).collect();
        for v in tuned {
            let lambda = hyperparam_protocol(&pairs, &c.sweep.tuning_grid, |pair, lambda| {
                let mut widths = c.student.widths(splits.train.dim());
                *widths.last_mut().expect("nonempty") = c.sweep.widths[pair];
                let criterion = KdCriterion { lambda, ..criteria[&v] };
                let cfg = TrainConfig {
                    schedule: c.schedule.clone(),
                    seed: c.seeds[0],
                    criterion,
                    widths,
                };
                validation_accuracy(&cfg, &splits.train, c.sweep.tuning_holdout, Some(&teacher))
            })?;
            criteria.get_mut(&v).expect("all variants present").lambda = lambda;
            tuned_lambda.insert(v, lambda);
        }
    }
    let spec = SweepSpec {
        schedule: c.schedule.clone(),
        student_prefix: {
            let mut p = vec![splits.train.dim()];
            p.extend(&c.student.hidden);
            p
        },
        widths: c.sweep.widths.clone(),
        variants: c.sweep.variants.clone(),
        seeds: c.seeds.clone(),
        criteria,
    };
    let result = width_sweep(&spec, &splits, &teacher, pool)?;
    let out = exp.output_dir();
    let mut rows = vec![MetricRow {
        run_id: exp.run_id(c.teacher_seed, "teacher"),
        variant: "teacher".into(),
        width: c.teacher.features,
        seed: c.teacher_seed,
        split: "test".into(),
        metric: "accuracy".into(),
        value: result.teacher_accuracy,
    }];
    for r in &result.runs {
        rows.push(MetricRow {
            run_id: exp.run_id(r.seed, &format!("sweep/{}/{}", r.variant, r.width)),
            variant: r.variant.name().into(),
            width: r.width,
            seed: r.seed,
            split: "test".into(),
            metric: "accuracy".into(),
            value: r.accuracy,
        });
    }
    for r in &result.rows {
        if let Some(v) = r.rpr {
            rows.push(MetricRow {
                run_id: exp.run_id(r.seed, &format!("sweep/{}/{}", r.variant, r.width)),
                variant: r.variant.name().into(),
                width: r.width,
                seed: r.seed,
                split: "test".into(),
                metric: format!("rpr_{}", r.base.name()),
                value: v,
            });
        }
    }
    write_metric_csv(&out.join(SWEEP_CSV), &rows)?;
    let summary = SweepSummary {
        teacher_accuracy: result.teacher_accuracy,
        tuned_lambda,
        cells: result.cells,
    };
    write_json_atomic(&out.join(SWEEP_SUMMARY), &summary)?;
    write_plot_csv(&out.join(SWEEP_PLOT), &plot_rows(&summary.cells, &plot_variants(&c.sweep.variants)))?;
    Ok(summary)
}

fn plot_variants(listed: &[KdVariant]) -> Vec<KdVariant> {
    listed
        .iter()
        .copied()
        .filter(|v| !matches!(v, KdVariant::None | KdVariant::HintonKd))
        .collect()
}

/// Long-form `width,variant,rpr_mean,rpr_std,base` table.
pub fn write_plot_csv(path: &Path, rows: &[PlotRow]) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "{PLOT_HEADER}")?;
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for r in rows {
            csv.serialize(r).map_err(crate::results::csv_err)?;
        }
        csv.flush()?;
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalSummary {
    pub method: IlMethod,
    pub tasks: usize,
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub final_average: Vec<f64>,
    pub average_mean: f64,
    pub average_std: f64,
    /// First-task accuracy right after task 1 minus at the end; absent for
    /// joint training.
    pub first_task_drop_mean: Option<f64>,
}

/// Runs `method` over the configured task split for every incremental seed.
pub fn incremental(exp: &Experiment, method: IlMethod, pool: &rayon::ThreadPool) -> Result<IncrementalSummary> {
    use rayon::prelude::*;
    let c = &exp.config;
    let splits = exp.splits()?;
    let curriculum = split_tasks(&splits, c.incremental.tasks, c.incremental.class_order())?;
    let seeds = c.incremental.seeds.clone();
    let results: Vec<IlResult> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let base = c.incremental.il_config(&c.schedule, splits.train.dim(), c.incremental.lambda_for(method), seed);
                if c.incremental.grid.is_empty() || matches!(method, IlMethod::Vanilla | IlMethod::Joint) {
                    il_train(&curriculum, method, &base)
                } else {
                    tuned_il_train(&curriculum, method, &c.incremental.grid, &base, c.incremental.grid_fraction)
                        .map(|(run, _)| run)
                }
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::new();
    for r in &results {
        let id = exp.run_id(r.seed, &format!("incremental/{method}"));
        for (task_seen, task_eval, accuracy) in r.cells(curriculum.len()) {
            rows.push(TaskAccuracyRow {
                run_id: id.clone(),
                method: method.name().into(),
                task_seen,
                task_eval,
                seed: r.seed,
                accuracy,
            });
        }
    }
    let out = exp.output_dir();
    write_task_csv(&out.join(format!("incremental-{method}.csv")), &rows)?;
    let mut summary = summarize_tasks(&rows)
        .remove(method.name())
        .ok_or_else(|| Error::invalid("no incremental rows"))?;
    summary.lambdas = results.iter().map(|r| r.lambda).collect();
    write_json_atomic(&out.join(format!("incremental-{method}.json")), &summary)?;
    Ok(summary)
}

/// Per-method summaries recomputed from raw task rows. `lambdas` is left
/// empty since the CSV does not carry it.
pub fn summarize_tasks(rows: &[TaskAccuracyRow]) -> BTreeMap<String, IncrementalSummary> {
    let mut by_method: BTreeMap<&str, BTreeMap<u64, Vec<&TaskAccuracyRow>>> = BTreeMap::new();
    for r in rows {
        by_method.entry(&r.method).or_default().entry(r.seed).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (name, seeds) in by_method {
        let Ok(method) = name.parse::<IlMethod>() else { continue };
        let mut finals = Vec::new();
        let mut drops = Vec::new();
        let mut tasks = 0;
        for rs in seeds.values() {
            let last = rs.iter().map(|r| r.task_seen).max().unwrap_or(0);
            tasks = tasks.max(last);
            let final_row: Vec<f64> = rs.iter().filter(|r| r.task_seen == last).map(|r| r.accuracy).collect();
            finals.push(final_row.iter().sum::<f64>() / final_row.len().max(1) as f64);
            let first = rs.iter().find(|r| r.task_seen == 1 && r.task_eval == 1);
            let end = rs.iter().find(|r| r.task_seen == last && r.task_eval == 1);
            if let (Some(a), Some(b)) = (first, end) {
                drops.push(a.accuracy - b.accuracy);
            }
        }
        let (average_mean, average_std) = mean_std(&finals);
        out.insert(
            name.to_string(),
            IncrementalSummary {
                method,
                tasks,
                seeds: seeds.keys().copied().collect(),
                lambdas: Vec::new(),
                final_average: finals,
                average_mean,
                average_std,
                first_task_drop_mean: (!drops.is_empty()).then(|| mean_std(&drops).0),
            },
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub teacher_accuracy: f64,
    pub cells: Vec<RprCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub sweep: Option<SweepReport>,
    pub incremental: BTreeMap<String, IncrementalSummary>,
}

/// Recomputes every summary in `dir` from its raw CSV files only, writing
/// `report.json` and, when a sweep is present, the plot table.
pub fn report(dir: &Path) -> Result<Report> {
    let sweep_path = dir.join(SWEEP_CSV);
    let sweep = if sweep_path.exists() {
        let rows: Vec<MetricRow> = read_csv(&sweep_path)?;
        let teacher_accuracy = rows
            .iter()
            .find(|r| r.variant == "teacher" && r.metric == "accuracy")
            .map(|r| r.value)
            .ok_or_else(|| Error::invalid(format!("{} has no teacher accuracy row", sweep_path.display())))?;
        let runs = rows
            .iter()
            .filter(|r| r.variant != "teacher" && r.metric == "accuracy")
            .map(|r| {
                Ok(SweepRun {
                    variant: r.variant.parse()?,
                    width: r.width,
                    seed: r.seed,
                    accuracy: r.value,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cells = summarize(&rpr_rows(&runs, teacher_accuracy)?);
        let mut listed: Vec<KdVariant> = runs.iter().map(|r| r.variant).collect();
        listed.sort();
        listed.dedup();
        write_plot_csv(&dir.join(SWEEP_PLOT), &plot_rows(&cells, &plot_variants(&listed)))?;
        Some(SweepReport {
            teacher_accuracy,
            cells,
        })
    } else {
        None
    };
    let mut task_rows = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("incremental-") && n.ends_with(".csv"))
        })
        .collect();
    entries.sort();
    for p in entries {
        task_rows.extend(read_csv::<TaskAccuracyRow>(&p)?);
    }
    let report = Report {
        sweep,
        incremental: summarize_tasks(&task_rows),
    };
    write_json_atomic(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

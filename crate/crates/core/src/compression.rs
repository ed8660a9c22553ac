//! Model-compression protocol: train a teacher, distill students under each
//! criterion, and score them with the recovered performance ratio.

use crate::autodiff::Tape;
use crate::criteria::{gather_rows, kd_total_loss, KdCriterion, KdVariant, StudentOutputs, TeacherSignals};
use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::nets::{LinearTransform, MultiHeadNet, NetSpec};
use crate::optim::{Schedule, Sgd};
use crate::results::mean_std;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub seed: u64,
    pub criterion: KdCriterion,
    /// Trunk widths `[input, hidden…, feature]`.
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

/// Loss decomposition of the very first training batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSnapshot {
    pub total: f64,
    pub ce: f64,
    pub divergence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub epochs: Vec<EpochStats>,
    pub final_test_accuracy: f64,
    pub initial_loss: LossSnapshot,
    pub final_loss: f64,
    pub wall_time_secs: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct Student {
    pub net: MultiHeadNet,
    /// Training-only feature alignment; never used for evaluation.
    pub transform: Option<LinearTransform>,
}

fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    crate::results::run_id(&json, cfg.seed, "train")
}

/// Mean cross-entropy and accuracy of head 0 on `ds`.
pub fn evaluate(net: &MultiHeadNet, ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Ok((0.0, 0.0));
    }
    let out = net.forward(&ds.features, 0)?;
    let k = out.logits.shape()[1];
    let mut loss = 0.0;
    let mut hits = 0;
    for (row, &y) in out.logits.data().chunks(k).zip(&ds.labels) {
        loss -= crate::autodiff::kernels::log_softmax(row)[y];
        if crate::autodiff::kernels::argmax(row) == y {
            hits += 1;
        }
    }
    Ok((loss / ds.len() as f64, hits as f64 / ds.len() as f64))
}

/// Shuffled mini-batch index lists for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Trains a single-head network with `CE + λ·D` under SGD with momentum.
/// A teacher must be given iff the criterion is not `None`; it is only read.
pub fn train(cfg: &TrainConfig, splits: &Splits, teacher: Option<&MultiHeadNet>) -> Result<(Student, RunResult)> {
    cfg.schedule.validate()?;
    cfg.criterion.validate()?;
    let variant = cfg.criterion.variant;
    match (variant, teacher) {
        (KdVariant::None, Some(_)) => {
            return Err(Error::invalid("vanilla training takes no teacher"));
        }
        (v, None) if v != KdVariant::None => {
            return Err(Error::invalid(format!("variant {v} requires a teacher")));
        }
        _ => {}
    }
    let started = Instant::now();
    let train = &splits.train;
    let mut net = MultiHeadNet::init(&NetSpec {
        widths: cfg.widths.clone(),
        heads: vec![train.classes],
        seed: cfg.seed,
    })?;
    if net.input_dim() != train.dim() {
        return Err(Error::invalid(format!(
            "network input {} does not match data dimension {}",
            net.input_dim(),
            train.dim()
        )));
    }
    let mut transform = match (variant.uses_features(), teacher) {
        (true, Some(t)) => Some(LinearTransform::new(net.feature_dim(), t.feature_dim(), cfg.seed)),
        _ => None,
    };
    let signals = teacher
        .map(|t| TeacherSignals::compute(t, &train.features, Some(&train.labels), variant))
        .transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0ba7_c4e5);
    let mut opt = Sgd::new(cfg.schedule.momentum, cfg.schedule.weight_decay);
    let mut epochs = Vec::with_capacity(cfg.schedule.epochs);
    let mut initial_loss = None;
    let mut last_loss = f64::NAN;

    for epoch in 0..cfg.schedule.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for batch in epoch_batches(train.len(), cfg.schedule.batch_size, &mut rng) {
            let x = gather_rows(&train.features, &batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let batch_signals = signals.as_ref().map(|s| s.gather(&batch));

            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let bound_r = transform.as_ref().map(|r| r.bind(&mut tape));
            let xv = tape.constant(x);
            let (z, l) = bound.forward(&mut tape, xv, 0)?;
            let aligned = match bound_r {
                Some(r) => Some(r.apply(&mut tape, z)?),
                None => None,
            };
            let parts = kd_total_loss(
                &mut tape,
                &cfg.criterion,
                StudentOutputs {
                    logits: l,
                    aligned_features: aligned,
                },
                batch_signals.as_ref(),
                &labels,
            )?;
            let loss = tape.value(parts.total).item();
            if !loss.is_finite() {
                return Err(Error::Domain(format!("non-finite training loss at epoch {epoch}")));
            }
            if initial_loss.is_none() {
                initial_loss = Some(LossSnapshot {
                    total: loss,
                    ce: tape.value(parts.ce).item(),
                    divergence: parts.divergence.map(|d| tape.value(d).item()),
                });
            }
            tape.backward(parts.total)?;

            let grads = |vars: Vec<crate::autodiff::Var>, tape: &Tape| -> Vec<Vec<f64>> {
                vars.iter()
                    .map(|&v| {
                        tape.grad(v)
                            .map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec)
                    })
                    .collect()
            };
            let mut all_grads = grads(bound.vars(), &tape);
            let mut params = net.params_mut();
            if let (Some(r), Some(br)) = (transform.as_mut(), bound_r) {
                all_grads.extend(grads(vec![br.weight, br.bias], &tape));
                params.extend(r.params_mut());
            }
            opt.step(params, &all_grads, lr);

            loss_sum += loss * labels.len() as f64;
            seen += labels.len();
        }
        last_loss = loss_sum / seen as f64;
        let (_, train_accuracy) = evaluate(&net, train)?;
        let (test_loss, test_accuracy) = evaluate(&net, &splits.test)?;
        epochs.push(EpochStats {
            epoch,
            train_loss: last_loss,
            train_accuracy,
            test_loss,
            test_accuracy,
        });
    }

    let final_test_accuracy = epochs.last().map_or(0.0, |e| e.test_accuracy);
    let result = RunResult {
        epochs,
        final_test_accuracy,
        initial_loss: initial_loss.expect("at least one batch"),
        final_loss: last_loss,
        wall_time_secs: started.elapsed().as_secs_f64(),
        seed: cfg.seed,
        config_hash: config_hash(cfg),
    };
    Ok((Student { net, transform }, result))
}

/// `(acc_kd − base) / (acc_teacher − base)`.
pub fn rpr(acc_kd: f64, base: f64, acc_teacher: f64) -> Result<f64> {
    let denom = acc_teacher - base;
    if denom.abs() < 1e-9 {
        return Err(Error::DegenerateRpr {
            teacher: acc_teacher,
            base,
        });
    }
    Ok((acc_kd - base) / denom)
}

/// Baseline subtracted in the ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RprBase {
    Vanilla,
    Hkd,
}

impl RprBase {
    pub fn name(self) -> &'static str {
        match self {
            RprBase::Vanilla => "vanilla",
            RprBase::Hkd => "hkd",
        }
    }
}

/// Final test accuracy of one (variant, width, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub variant: KdVariant,
    pub width: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RprRow {
    pub variant: KdVariant,
    pub width: usize,
    pub seed: u64,
    pub base: RprBase,
    pub acc_kd: f64,
    pub acc_base: f64,
    pub acc_teacher: f64,
    /// `None` when the teacher and base accuracies coincide.
    pub rpr: Option<f64>,
}

/// Seed-aggregated ratio for one (width, variant, base) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RprCell {
    pub width: usize,
    pub variant: KdVariant,
    pub base: RprBase,
    pub rpr_mean: f64,
    pub rpr_std: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub seeds: usize,
    pub degenerate: usize,
}

/// Ratio rows against both baselines for every run, given the teacher
/// accuracy. Baseline runs (vanilla, HKD) get rows too.
pub fn rpr_rows(runs: &[SweepRun], acc_teacher: f64) -> Result<Vec<RprRow>> {
    let mut base_acc: BTreeMap<(usize, u64, RprBase), f64> = BTreeMap::new();
    for r in runs {
        match r.variant {
            KdVariant::None => {
                base_acc.insert((r.width, r.seed, RprBase::Vanilla), r.accuracy);
            }
            KdVariant::HintonKd => {
                base_acc.insert((r.width, r.seed, RprBase::Hkd), r.accuracy);
            }
            _ => {}
        }
    }
    let mut rows = Vec::new();
    for r in runs {
        for base in [RprBase::Vanilla, RprBase::Hkd] {
            let acc_base = *base_acc.get(&(r.width, r.seed, base)).ok_or_else(|| {
                Error::invalid(format!("missing {} baseline for width {} seed {}", base.name(), r.width, r.seed))
            })?;
            let value = if r.variant == KdVariant::None && base == RprBase::Vanilla
                || r.variant == KdVariant::HintonKd && base == RprBase::Hkd
            {
                Some(0.0)
            } else {
                rpr(r.accuracy, acc_base, acc_teacher).ok()
            };
            rows.push(RprRow {
                variant: r.variant,
                width: r.width,
                seed: r.seed,
                base,
                acc_kd: r.accuracy,
                acc_base,
                acc_teacher,
                rpr: value,
            });
        }
    }
    Ok(rows)
}

/// Seed-averages `rows` per (width, variant, base), in sorted key order.
pub fn summarize(rows: &[RprRow]) -> Vec<RprCell> {
    let mut groups: BTreeMap<(usize, KdVariant, RprBase), Vec<&RprRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.width, r.variant, r.base)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((width, variant, base), group)| {
            // Sort by seed so the float sums do not depend on input order.
            let mut group = group;
            group.sort_by_key(|r| r.seed);
            let ratios: Vec<f64> = group.iter().filter_map(|r| r.rpr).collect();
            let accs: Vec<f64> = group.iter().map(|r| r.acc_kd).collect();
            let (rpr_mean, rpr_std) = mean_std(&ratios);
            let (accuracy_mean, accuracy_std) = mean_std(&accs);
            RprCell {
                width,
                variant,
                base,
                rpr_mean,
                rpr_std,
                accuracy_mean,
                accuracy_std,
                seeds: group.len(),
                degenerate: group.len() - ratios.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub teacher_accuracy: f64,
    pub runs: Vec<SweepRun>,
    pub rows: Vec<RprRow>,
    pub cells: Vec<RprCell>,
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub schedule: Schedule,
    /// Student widths before the swept penultimate layer, e.g. `[input, 64]`.
    pub student_prefix: Vec<usize>,
    pub widths: Vec<usize>,
    pub variants: Vec<KdVariant>,
    pub seeds: Vec<u64>,
    /// Coefficients per variant; missing entries use the defaults.
    pub criteria: BTreeMap<KdVariant, KdCriterion>,
}

impl SweepSpec {
    pub fn criterion(&self, variant: KdVariant) -> KdCriterion {
        self.criteria.get(&variant).copied().unwrap_or_else(|| KdCriterion::new(variant))
    }

    /// Every (variant, width, seed) job, baselines first.
    pub fn jobs(&self) -> Vec<(KdVariant, usize, u64)> {
        let mut variants = vec![KdVariant::None, KdVariant::HintonKd];
        variants.extend(self.variants.iter().filter(|v| !variants.contains(v)).copied().collect::<Vec<_>>());
        let mut jobs = Vec::new();
        for &width in &self.widths {
            for &seed in &self.seeds {
                for &v in &variants {
                    jobs.push((v, width, seed));
                }
            }
        }
        jobs
    }
}

/// Trains vanilla, HKD and every listed variant for each (width, seed) with
/// the fixed `teacher`, fanned out over `pool`.
pub fn width_sweep(
    spec: &SweepSpec,
    splits: &Splits,
    teacher: &MultiHeadNet,
    pool: &rayon::ThreadPool,
) -> Result<SweepResult> {
    use rayon::prelude::*;
    let (_, teacher_accuracy) = evaluate(teacher, &splits.test)?;
    let jobs = spec.jobs();
    let runs: Vec<SweepRun> = pool.install(|| {
        jobs.par_iter()
            .map(|&(variant, width, seed)| {
                let mut widths = spec.student_prefix.clone();
                widths.push(width);
                let cfg = TrainConfig {
                    schedule: spec.schedule.clone(),
                    seed,
                    criterion: spec.criterion(variant),
                    widths,
                };
                let t = (variant != KdVariant::None).then_some(teacher);
                let (_, res) = train(&cfg, splits, t)?;
                Ok(SweepRun {
                    variant,
                    width,
                    seed,
                    accuracy: res.final_test_accuracy,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows = rpr_rows(&runs, teacher_accuracy)?;
    let cells = summarize(&rows);
    Ok(SweepResult {
        teacher_accuracy,
        runs,
        rows,
        cells,
    })
}

/// One teacher-student pair considered by [`hyperparam_protocol`].
#[derive(Debug, Clone, PartialEq)]
pub struct TuningPair {
    pub name: String,
    pub tuning: bool,
}

/// Grid-searches λ on the single flagged pair only and returns the value to
/// apply to every pair. `evaluate(pair_index, λ)` returns a validation
/// accuracy; ties keep the smallest λ.
pub fn hyperparam_protocol<F>(pairs: &[TuningPair], grid: &[f64], mut evaluate: F) -> Result<f64>
where
    F: FnMut(usize, f64) -> Result<f64>,
{
    let flagged: Vec<usize> = pairs.iter().enumerate().filter(|(_, p)| p.tuning).map(|(i, _)| i).collect();
    let &[pair] = flagged.as_slice() else {
        return Err(Error::invalid(format!("exactly one tuning pair required, found {}", flagged.len())));
    };
    if grid.is_empty() {
        return Err(Error::invalid("empty λ grid"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (f64::NEG_INFINITY, sorted[0]);
    for lambda in sorted {
        let acc = evaluate(pair, lambda)?;
        if acc > best.0 {
            best = (acc, lambda);
        }
    }
    Ok(best.1)
}

/// Validation accuracy of a student distilled with `criterion` on a
/// stratified hold-out carved from the training split.
pub fn validation_accuracy(
    cfg: &TrainConfig,
    train_set: &Dataset,
    holdout_fraction: f64,
    teacher: Option<&MultiHeadNet>,
) -> Result<f64> {
    let (fit, val) = crate::data::train_test_split(train_set, 1.0 - holdout_fraction, cfg.seed ^ 0x7a1)?;
    let splits = Splits { train: fit, test: val };
    let (student, _) = train(cfg, &splits, teacher)?;
    Ok(evaluate(&student.net, &splits.test)?.1)
}

/// Plot-ready `width,variant,rpr_mean,rpr_std,base` rows for the listed
/// variants.
pub fn plot_rows(cells: &[RprCell], variants: &[KdVariant]) -> Vec<PlotRow> {
    cells
        .iter()
        .filter(|c| variants.contains(&c.variant))
        .map(|c| PlotRow {
            width: c.width,
            variant: c.variant.name().to_string(),
            rpr_mean: c.rpr_mean,
            rpr_std: c.rpr_std,
            base: c.base.name().to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub width: usize,
    pub variant: String,
    pub rpr_mean: f64,
    pub rpr_std: f64,
    pub base: String,
}

pub const PLOT_HEADER: &str = "width,variant,rpr_mean,rpr_std,base";

//! Task-incremental learning with one head per task.
//!
//! Output-space methods regularize the current model towards a frozen
//! snapshot taken at the previous task boundary, summed over every previous
//! head. Parameter-space methods penalize `(λ/2)(θ − θ*)ᵀ diag(Ω) (θ − θ*)`
//! over the trunk and previous heads.

use crate::autodiff::{Tape, Tensor, Var};
use crate::compression::epoch_batches;
use crate::criteria::{d_g, gather_rows, teacher_weights, WeightSource};
use crate::data::{subsample, Dataset, Splits};
use crate::error::{Error, Result};
use crate::nets::{BoundNet, MultiHeadNet, NetSpec};
use crate::optim::{Schedule, Sgd};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Default SI damping `ξ`.
pub const SI_DAMPING: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum IlMethod {
    Vanilla,
    LogitsSe,
    WeightedHFeaturesSe,
    FeaturesSe,
    Ewc,
    Si,
    Mas,
    L2,
    /// Offline training on all tasks at once; an upper bound.
    Joint,
}

impl IlMethod {
    pub const ALL: [IlMethod; 9] = [
        IlMethod::Vanilla,
        IlMethod::LogitsSe,
        IlMethod::WeightedHFeaturesSe,
        IlMethod::FeaturesSe,
        IlMethod::Ewc,
        IlMethod::Si,
        IlMethod::Mas,
        IlMethod::L2,
        IlMethod::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IlMethod::Vanilla => "vanilla",
            IlMethod::LogitsSe => "logits-se",
            IlMethod::WeightedHFeaturesSe => "weighted-h-features-se",
            IlMethod::FeaturesSe => "features-se",
            IlMethod::Ewc => "ewc",
            IlMethod::Si => "si",
            IlMethod::Mas => "mas",
            IlMethod::L2 => "l2",
            IlMethod::Joint => "joint",
        }
    }

    pub fn is_output_space(self) -> bool {
        matches!(self, IlMethod::LogitsSe | IlMethod::WeightedHFeaturesSe | IlMethod::FeaturesSe)
    }

    pub fn is_parameter_space(self) -> bool {
        matches!(self, IlMethod::Ewc | IlMethod::Si | IlMethod::Mas | IlMethod::L2)
    }
}

impl fmt::Display for IlMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IlMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        IlMethod::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = IlMethod::ALL.iter().map(|m| m.name()).collect();
            Error::invalid(format!("unknown method `{s}`, expected one of {names:?}"))
        })
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    /// Original dataset classes, in head-label order.
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone)]
pub struct TaskCurriculum {
    pub tasks: Vec<Task>,
}

impl TaskCurriculum {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Stratified `fraction` of every task's train and test data.
    pub fn fraction(&self, fraction: f64, seed: u64) -> Self {
        let take = |ds: &Dataset, s: u64| subsample(ds, (ds.len() as f64 * fraction).round() as usize, s);
        Self {
            tasks: self
                .tasks
                .iter()
                .enumerate()
                .map(|(i, t)| Task {
                    classes: t.classes.clone(),
                    train: take(&t.train, seed.wrapping_add(2 * i as u64)),
                    test: take(&t.test, seed.wrapping_add(2 * i as u64 + 1)),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassOrder {
    Identity,
    Shuffled(u64),
}

/// Partitions the classes into `n_tasks` disjoint, equally sized groups.
/// Each task relabels its classes `0..k` in group order.
pub fn split_tasks(splits: &Splits, n_tasks: usize, order: ClassOrder) -> Result<TaskCurriculum> {
    let classes = splits.train.classes;
    if n_tasks == 0 || !classes.is_multiple_of(n_tasks) {
        return Err(Error::invalid(format!("{n_tasks} tasks do not divide {classes} classes")));
    }
    if n_tasks == 1 {
        return Ok(TaskCurriculum {
            tasks: vec![Task {
                classes: (0..classes).collect(),
                train: splits.train.clone(),
                test: splits.test.clone(),
            }],
        });
    }
    let mut perm: Vec<usize> = (0..classes).collect();
    if let ClassOrder::Shuffled(seed) = order {
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let per = classes / n_tasks;
    let tasks = perm
        .chunks(per)
        .map(|group| Task {
            classes: group.to_vec(),
            train: splits.train.restrict_classes(group),
            test: splits.test.restrict_classes(group),
        })
        .collect();
    Ok(TaskCurriculum { tasks })
}

/// Frozen copy of the model at a task boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    net: MultiHeadNet,
}

/// Snapshot outputs over a dataset.
#[derive(Debug, Clone)]
pub struct SnapshotOutputs {
    pub features: Tensor,
    /// Logits of each snapshot head.
    pub logits: Vec<Tensor>,
    /// Unnormalized `diag(g gᵀ)`, `g = ∂/∂z mean(l²)`, per head.
    pub lh_weights: Vec<Tensor>,
}

impl SnapshotOutputs {
    pub fn gather(&self, idx: &[usize]) -> Self {
        Self {
            features: gather_rows(&self.features, idx),
            logits: self.logits.iter().map(|t| gather_rows(t, idx)).collect(),
            lh_weights: self.lh_weights.iter().map(|t| gather_rows(t, idx)).collect(),
        }
    }
}

impl TeacherSnapshot {
    pub fn take(net: &MultiHeadNet) -> Self {
        Self { net: net.clone() }
    }

    pub fn net(&self) -> &MultiHeadNet {
        &self.net
    }

    pub fn heads(&self) -> usize {
        self.net.num_heads()
    }

    pub fn outputs(&self, x: &Tensor, with_weights: bool) -> Result<SnapshotOutputs> {
        let features = self.net.features(x)?;
        let mut logits = Vec::with_capacity(self.heads());
        let mut lh_weights = Vec::new();
        for j in 0..self.heads() {
            logits.push(self.net.head_logits(&features, j)?);
            if with_weights {
                let (w, _) = teacher_weights(&self.net.heads[j], &features, None, WeightSource::Heuristic, false)?;
                lh_weights.push(w);
            }
        }
        Ok(SnapshotOutputs {
            features,
            logits,
            lh_weights,
        })
    }
}

/// `Σ_j ‖l^s_[j] − l^t_[j]‖²` over the snapshot's heads, batch-meaned.
pub fn d_g_il_logits(tape: &mut Tape, student: &BoundNet, z_s: Var, teacher_logits: &[Tensor]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (j, l_t) in teacher_logits.iter().enumerate() {
        let l_s = student.head(tape, z_s, j)?;
        let ones = Tensor::filled(l_t.shape(), 1.0);
        let term = d_g(tape, l_s, l_t, &ones)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("no previous heads to regularize"))
}

/// `Σ_j (z^s − z^t)ᵀ W_[j] (z^s − z^t)`, batch-meaned; one weight tensor per
/// previous head.
pub fn d_g_il_features(tape: &mut Tape, z_s: Var, z_t: &Tensor, weights: &[Tensor]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for w in weights {
        let term = d_g(tape, z_s, z_t, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("no previous heads to regularize"))
}

fn previous_heads(snapshot: &TeacherSnapshot, current_task: usize) -> Result<usize> {
    if current_task < 2 || current_task - 1 > snapshot.heads() {
        return Err(Error::invalid(format!(
            "current task {current_task} needs 1..{} previous heads",
            snapshot.heads()
        )));
    }
    Ok(current_task - 1)
}

/// Value of the logits regularizer for 1-based `current_task`.
pub fn il_logits_divergence(student: &MultiHeadNet, snapshot: &TeacherSnapshot, x: &Tensor, current_task: usize) -> Result<f64> {
    let prev = previous_heads(snapshot, current_task)?;
    let out = snapshot.outputs(x, false)?;
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let z = bound.features(&mut tape, xv)?;
    let v = d_g_il_logits(&mut tape, &bound, z, &out.logits[..prev])?;
    Ok(tape.value(v).item())
}

/// Value of the feature regularizer; `weighted = false` uses identity
/// weights for every previous head.
pub fn il_features_divergence(
    student: &MultiHeadNet,
    snapshot: &TeacherSnapshot,
    x: &Tensor,
    current_task: usize,
    weighted: bool,
) -> Result<f64> {
    let prev = previous_heads(snapshot, current_task)?;
    let out = snapshot.outputs(x, weighted)?;
    let weights: Vec<Tensor> = if weighted {
        out.lh_weights[..prev].to_vec()
    } else {
        vec![Tensor::filled(out.features.shape(), 1.0); prev]
    };
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let z = bound.features(&mut tape, xv)?;
    let v = d_g_il_features(&mut tape, z, &out.features, &weights)?;
    Ok(tape.value(v).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamMethod {
    Ewc,
    Si,
    Mas,
    L2,
}

/// Anchor parameters and per-parameter importance for the parameter-space
/// regularizers. Vectors cover the trunk and the heads consolidated so far,
/// in [`MultiHeadNet::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceState {
    pub method: ParamMethod,
    pub anchor: Vec<f64>,
    pub omega: Vec<f64>,
    /// SI path integral over every current parameter.
    pub si_path: Vec<f64>,
    /// Parameters at the start of the current task (SI).
    pub si_start: Vec<f64>,
    pub si_damping: f64,
}

impl ImportanceState {
    pub fn new(method: ParamMethod, si_damping: f64) -> Self {
        Self {
            method,
            anchor: Vec::new(),
            omega: Vec::new(),
            si_path: Vec::new(),
            si_start: Vec::new(),
            si_damping,
        }
    }

    /// Marks the start of a task for SI bookkeeping.
    pub fn begin_task(&mut self, net: &MultiHeadNet) {
        self.si_start = net.flat_params(net.num_heads());
        self.si_path = vec![0.0; self.si_start.len()];
    }

    /// SI path-integral update `ω −= g · Δθ` for one optimizer step, with
    /// `g` the unregularized gradient.
    pub fn record_step(&mut self, grads: &[Vec<f64>], before: &[f64], after: &[f64]) {
        let flat_g = grads.iter().flatten();
        for (((w, g), b), a) in self.si_path.iter_mut().zip(flat_g).zip(before).zip(after) {
            *w -= g * (a - b);
        }
    }

    /// `½ Σ Ω (θ − θ*)²` over the anchored prefix of `flat`.
    pub fn penalty(&self, flat: &[f64]) -> f64 {
        0.5 * self
            .omega
            .iter()
            .zip(&self.anchor)
            .zip(flat)
            .map(|((o, a), t)| o * (t - a) * (t - a))
            .sum::<f64>()
    }

    /// Adds `λ Ω (θ − θ*)` to the gradients of the anchored parameters.
    pub fn add_penalty_grad(&self, lambda: f64, params: &[&Tensor], grads: &mut [Vec<f64>]) {
        let mut offset = 0;
        for (p, g) in params.iter().zip(grads.iter_mut()) {
            if offset >= self.anchor.len() {
                break;
            }
            for (i, (gi, theta)) in g.iter_mut().zip(p.data()).enumerate() {
                let k = offset + i;
                *gi += lambda * self.omega[k] * (theta - self.anchor[k]);
            }
            offset += p.len();
        }
    }

    /// Task-boundary update: accumulates importance of the trunk and heads
    /// `0..=head` from `data`, then re-anchors at the current parameters.
    pub fn consolidate(&mut self, net: &MultiHeadNet, data: &Dataset, head: usize, max_samples: usize) -> Result<()> {
        let current = net.flat_params(head + 1);
        let n = current.len();
        let fresh = match self.method {
            ParamMethod::L2 => vec![1.0; n],
            ParamMethod::Ewc => per_sample_importance(net, data, head, max_samples, SampleLoss::CrossEntropy)?,
            ParamMethod::Mas => per_sample_importance(net, data, head, max_samples, SampleLoss::MeanSquaredLogits)?,
            ParamMethod::Si => {
                if self.si_path.len() < n || self.si_start.len() < n {
                    return Err(Error::invalid("SI consolidation without begin_task"));
                }
                (0..n)
                    .map(|i| {
                        let delta = current[i] - self.si_start[i];
                        (self.si_path[i] / (delta * delta + self.si_damping)).max(0.0)
                    })
                    .collect()
            }
        };
        match self.method {
            ParamMethod::L2 => self.omega = fresh,
            _ => {
                self.omega.resize(n, 0.0);
                for (o, f) in self.omega.iter_mut().zip(fresh) {
                    *o += f;
                }
            }
        }
        self.anchor = current;
        self.si_path.iter_mut().for_each(|w| *w = 0.0);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum SampleLoss {
    CrossEntropy,
    MeanSquaredLogits,
}

/// Mean over (up to `max_samples`, stratified) items of the squared CE
/// gradient (empirical Fisher) or the absolute mean-squared-logits gradient.
fn per_sample_importance(
    net: &MultiHeadNet,
    data: &Dataset,
    head: usize,
    max_samples: usize,
    loss: SampleLoss,
) -> Result<Vec<f64>> {
    let n = net.flat_params(head + 1).len();
    let sample = if data.len() > max_samples {
        subsample(data, max_samples, 0x1d1e)
    } else {
        data.clone()
    };
    let mut acc = vec![0.0; n];
    if sample.is_empty() {
        return Ok(acc);
    }
    for r in 0..sample.len() {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let x = tape.constant(Tensor::matrix(1, sample.dim(), sample.features.row(r).to_vec())?);
        let (_, l) = bound.forward(&mut tape, x, head)?;
        let value = match loss {
            SampleLoss::CrossEntropy => tape.softmax_cross_entropy(l, &[sample.labels[r]])?,
            SampleLoss::MeanSquaredLogits => {
                let sq = tape.square(l);
                tape.mean(sq)
            }
        };
        tape.backward(value)?;
        let mut k = 0;
        for v in bound.vars() {
            if k >= n {
                break;
            }
            if let Some(g) = tape.grad(v) {
                for (a, gi) in acc[k..k + g.len()].iter_mut().zip(g) {
                    *a += match loss {
                        SampleLoss::CrossEntropy => gi * gi,
                        SampleLoss::MeanSquaredLogits => gi.abs(),
                    };
                }
            }
            k += tape.value(v).len();
        }
    }
    let m = sample.len() as f64;
    acc.iter_mut().for_each(|a| *a /= m);
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlConfig {
    pub schedule: Schedule,
    /// Trunk widths `[input, hidden…, feature]`.
    pub widths: Vec<usize>,
    pub lambda: f64,
    pub si_damping: f64,
    /// Cap on items used for EWC/MAS importance estimates.
    pub importance_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlResult {
    pub method: IlMethod,
    pub lambda: f64,
    pub seed: u64,
    /// `accuracy[i][j]`: accuracy on task `j` after training task `i`
    /// (`j ≤ i`). Joint training reports a single final row.
    pub accuracy: Vec<Vec<f64>>,
    pub final_average: f64,
}

impl IlResult {
    /// Drop in first-task accuracy between learning it and the end.
    pub fn first_task_drop(&self) -> f64 {
        match (self.accuracy.first(), self.accuracy.last()) {
            (Some(first), Some(last)) => first[0] - last[0],
            _ => 0.0,
        }
    }

    /// Rows of (task_seen, task_eval, accuracy), 1-based.
    pub fn cells(&self, n_tasks: usize) -> Vec<(usize, usize, f64)> {
        let offset = if self.method == IlMethod::Joint { n_tasks } else { 1 };
        self.accuracy
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, &a)| (i + offset, j + 1, a)))
            .collect()
    }
}

fn task_rng(seed: u64, task: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (0x7a5c_0000 + task as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn eval_tasks(net: &MultiHeadNet, tasks: &[Task]) -> Result<Vec<f64>> {
    tasks
        .iter()
        .enumerate()
        .map(|(j, t)| net.accuracy(&t.test.features, &t.test.labels, j))
        .collect()
}

fn grads_of(tape: &Tape, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec))
        .collect()
}

struct Regularizer<'a> {
    method: IlMethod,
    lambda: f64,
    snapshot: Option<&'a SnapshotOutputs>,
    importance: Option<&'a mut ImportanceState>,
}

/// One optimizer step on a single-task batch. Returns the batch loss.
fn train_step(
    net: &mut MultiHeadNet,
    opt: &mut Sgd,
    lr: f64,
    data: &Dataset,
    batch: &[usize],
    head: usize,
    reg: &mut Regularizer<'_>,
) -> Result<f64> {
    let x = gather_rows(&data.features, batch);
    let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let xv = tape.constant(x);
    let (z, l) = bound.forward(&mut tape, xv, head)?;
    let mut loss = tape.softmax_cross_entropy(l, &labels)?;
    let active = reg.lambda != 0.0 && head > 0;
    if active {
        if let Some(snap) = reg.snapshot {
            let s = snap.gather(batch);
            let term = match reg.method {
                IlMethod::LogitsSe => d_g_il_logits(&mut tape, &bound, z, &s.logits)?,
                IlMethod::WeightedHFeaturesSe => d_g_il_features(&mut tape, z, &s.features, &s.lh_weights)?,
                IlMethod::FeaturesSe => {
                    let ones = vec![Tensor::filled(s.features.shape(), 1.0); s.logits.len()];
                    d_g_il_features(&mut tape, z, &s.features, &ones)?
                }
                _ => unreachable!("snapshot only for output-space methods"),
            };
            let scaled = tape.scale(term, reg.lambda);
            loss = tape.add(loss, scaled)?;
        }
    }
    let mut value = tape.value(loss).item();
    tape.backward(loss)?;
    let mut grads = grads_of(&tape, &bound.vars());

    let before = reg.importance.as_ref().filter(|s| s.method == ParamMethod::Si).map(|_| net.flat_params(net.num_heads()));
    let unreg = before.as_ref().map(|_| grads.clone());
    if let Some(state) = reg.importance.as_deref() {
        if active && !state.anchor.is_empty() {
            value += reg.lambda * state.penalty(&net.flat_params(net.num_heads()));
            let params = net.params();
            state.add_penalty_grad(reg.lambda, &params, &mut grads);
        }
    }
    if !value.is_finite() {
        return Err(Error::Domain("non-finite incremental training loss".into()));
    }
    opt.step(net.params_mut(), &grads, lr);
    if let (Some(state), Some(before), Some(unreg)) = (reg.importance.as_deref_mut(), before, unreg) {
        let after = net.flat_params(net.num_heads());
        state.record_step(&unreg, &before, &after);
    }
    Ok(value)
}

/// Sequential training over the curriculum; evaluation routes each test
/// item to its own task head.
pub fn il_train(curriculum: &TaskCurriculum, method: IlMethod, cfg: &IlConfig) -> Result<IlResult> {
    il_train_model(curriculum, method, cfg).map(|(r, _)| r)
}

/// [`il_train`] that also returns the final multi-head model.
pub fn il_train_model(curriculum: &TaskCurriculum, method: IlMethod, cfg: &IlConfig) -> Result<(IlResult, MultiHeadNet)> {
    cfg.schedule.validate()?;
    if curriculum.is_empty() {
        return Err(Error::invalid("empty curriculum"));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::invalid("λ must be nonnegative"));
    }
    let mut net = MultiHeadNet::init(&NetSpec {
        widths: cfg.widths.clone(),
        heads: Vec::new(),
        seed: cfg.seed,
    })?;
    if method == IlMethod::Joint {
        let res = joint_train(&mut net, curriculum, cfg)?;
        return Ok((res, net));
    }
    let mut importance = match method {
        IlMethod::Ewc => Some(ImportanceState::new(ParamMethod::Ewc, cfg.si_damping)),
        IlMethod::Si => Some(ImportanceState::new(ParamMethod::Si, cfg.si_damping)),
        IlMethod::Mas => Some(ImportanceState::new(ParamMethod::Mas, cfg.si_damping)),
        IlMethod::L2 => Some(ImportanceState::new(ParamMethod::L2, cfg.si_damping)),
        _ => None,
    };
    let mut snapshot: Option<TeacherSnapshot> = None;
    let mut accuracy = Vec::with_capacity(curriculum.len());

    for (t, task) in curriculum.tasks.iter().enumerate() {
        let head = net.add_head(task.classes.len())?;
        debug_assert_eq!(head, t);
        let snap_out = match &snapshot {
            Some(s) if cfg.lambda != 0.0 => {
                Some(s.outputs(&task.train.features, method == IlMethod::WeightedHFeaturesSe)?)
            }
            _ => None,
        };
        if let Some(state) = importance.as_mut() {
            state.begin_task(&net);
        }
        let mut rng = task_rng(cfg.seed, t);
        let mut opt = Sgd::new(cfg.schedule.momentum, cfg.schedule.weight_decay);
        for epoch in 0..cfg.schedule.epochs {
            let lr = cfg.schedule.lr_at(epoch);
            for batch in epoch_batches(task.train.len(), cfg.schedule.batch_size, &mut rng) {
                let mut reg = Regularizer {
                    method,
                    lambda: cfg.lambda,
                    snapshot: snap_out.as_ref(),
                    importance: importance.as_mut(),
                };
                train_step(&mut net, &mut opt, lr, &task.train, &batch, t, &mut reg)?;
            }
        }
        accuracy.push(eval_tasks(&net, &curriculum.tasks[..=t])?);
        if let Some(state) = importance.as_mut() {
            state.consolidate(&net, &task.train, t, cfg.importance_samples)?;
        }
        if method.is_output_space() {
            snapshot = Some(TeacherSnapshot::take(&net));
        }
    }
    let last = accuracy.last().expect("nonempty");
    let final_average = last.iter().sum::<f64>() / last.len() as f64;
    let res = IlResult {
        method,
        lambda: cfg.lambda,
        seed: cfg.seed,
        accuracy,
        final_average,
    };
    Ok((res, net))
}

fn joint_train(net: &mut MultiHeadNet, curriculum: &TaskCurriculum, cfg: &IlConfig) -> Result<IlResult> {
    for task in &curriculum.tasks {
        net.add_head(task.classes.len())?;
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..curriculum.len()).map(|t| task_rng(cfg.seed, t)).collect();
    let mut opt = Sgd::new(cfg.schedule.momentum, cfg.schedule.weight_decay);
    let mut none = Regularizer {
        method: IlMethod::Joint,
        lambda: 0.0,
        snapshot: None,
        importance: None,
    };
    for epoch in 0..cfg.schedule.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let per_task: Vec<Vec<Vec<usize>>> = curriculum
            .tasks
            .iter()
            .zip(rngs.iter_mut())
            .map(|(task, rng)| epoch_batches(task.train.len(), cfg.schedule.batch_size, rng))
            .collect();
        let rounds = per_task.iter().map(Vec::len).max().unwrap_or(0);
        for r in 0..rounds {
            for (t, batches) in per_task.iter().enumerate() {
                if let Some(batch) = batches.get(r) {
                    train_step(net, &mut opt, lr, &curriculum.tasks[t].train, batch, t, &mut none)?;
                }
            }
        }
    }
    let row = eval_tasks(net, &curriculum.tasks)?;
    let final_average = row.iter().sum::<f64>() / row.len() as f64;
    Ok(IlResult {
        method: IlMethod::Joint,
        lambda: 0.0,
        seed: cfg.seed,
        accuracy: vec![row],
        final_average,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub lambda: f64,
    /// `(λ, final average accuracy)` in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Picks λ maximizing final average accuracy on a stratified
/// `data_fraction` sub-curriculum; ties keep the smallest λ.
pub fn grid_search_lambda(
    curriculum: &TaskCurriculum,
    method: IlMethod,
    grid: &[f64],
    cfg: &IlConfig,
    data_fraction: f64,
) -> Result<GridSearch> {
    if grid.is_empty() {
        return Err(Error::invalid("empty λ grid"));
    }
    let sub = curriculum.fraction(data_fraction, cfg.seed ^ 0x9a1d);
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        // A λ whose training diverges scores NaN and is never selected.
        let acc = match il_train(&sub, method, &IlConfig { lambda, ..cfg.clone() }) {
            Ok(run) => run.final_average,
            Err(Error::Domain(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        scores.push((lambda, acc));
    }
    let mut best: Option<(f64, f64)> = None;
    for &(lambda, acc) in scores.iter().filter(|(_, a)| !a.is_nan()) {
        best = match best {
            Some((bl, ba)) if !(acc > ba || (acc == ba && lambda < bl)) => Some((bl, ba)),
            _ => Some((lambda, acc)),
        };
    }
    let (lambda, _) = best.ok_or_else(|| Error::Domain("training diverged for every λ in the grid".into()))?;
    Ok(GridSearch { lambda, scores })
}

impl TryFrom<String> for IlMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<IlMethod> for String {
    fn from(v: IlMethod) -> String {
        v.name().to_string()
    }
}

/// Grid-searches λ, then trains on the full curriculum with the best value.
/// When that run diverges the next-best grid values are tried in turn.
pub fn tuned_il_train(
    curriculum: &TaskCurriculum,
    method: IlMethod,
    grid: &[f64],
    cfg: &IlConfig,
    data_fraction: f64,
) -> Result<(IlResult, GridSearch)> {
    let search = grid_search_lambda(curriculum, method, grid, cfg, data_fraction)?;
    let mut ranked: Vec<(f64, f64)> = search.scores.iter().copied().filter(|(_, a)| !a.is_nan()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
    for (lambda, _) in ranked {
        match il_train(curriculum, method, &IlConfig { lambda, ..cfg.clone() }) {
            Ok(run) => return Ok((run, search)),
            Err(Error::Domain(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Domain(format!("{method}: training diverged for every λ in the grid")))
}

//! Distillation criteria built around the generalized divergence
//! `D_G = (z_s − z_t)ᵀ W(z_t) (z_s − z_t)` with a diagonal, gradient-derived
//! weighting `W`.
//!
//! Teacher-side quantities (features, logits, the `W` diagonal) are plain
//! tensors computed in closed form and enter the tape as constants; only the
//! student side is differentiated.

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{LinearHead, MultiHeadNet};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Default coefficient for feature-based variants.
pub const LAMBDA_FEATURES: f64 = 3.0;
/// Default coefficient for logit-based variants.
pub const LAMBDA_LOGITS: f64 = 15.0;
/// Default softening temperature of the classic softmax-KD baseline.
pub const HKD_TEMPERATURE: f64 = 4.0;

/// Which loss supplies the gradients that build `W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightSource {
    /// `log p_{y*}` of the true label.
    Empirical,
    /// Mean squared logits, label free.
    Heuristic,
    Identity,
}

/// Diagonal of a feature-weighting matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDiag {
    pub w: Vec<f64>,
    pub source: WeightSource,
    pub normalized: bool,
    /// Fraction of entries clamped to zero by [`normalize_weight_diag`].
    pub clamp_fraction: f64,
}

impl WeightDiag {
    pub fn identity(dim: usize) -> Self {
        Self {
            w: vec![1.0; dim],
            source: WeightSource::Identity,
            normalized: true,
            clamp_fraction: 0.0,
        }
    }
}

fn check_prob_rows(p: &[f64], k: usize, what: &str) -> Result<()> {
    for row in p.chunks(k) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid(format!("{what} row is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

/// Batch-mean `Σ_y p_t log(p_t / p_s)` over rows of `k` probabilities.
/// `0 · log 0` counts as zero.
pub fn kl_divergence(p_t: &[f64], p_s: &[f64], k: usize) -> Result<f64> {
    if k == 0 || p_t.len() != p_s.len() || !p_t.len().is_multiple_of(k) || p_t.is_empty() {
        return Err(Error::shape("kl_divergence", &[p_t.len()], &[p_s.len()]));
    }
    check_prob_rows(p_t, k, "p_t")?;
    check_prob_rows(p_s, k, "p_s")?;
    let mut total = 0.0;
    for (&t, &s) in p_t.iter().zip(p_s) {
        if t == 0.0 {
            continue;
        }
        if s < 1e-300 {
            return Err(Error::Domain(format!("p_s = {s} where p_t = {t}")));
        }
        total += t * (t / s).ln();
    }
    Ok(total / (p_t.len() / k) as f64)
}

fn head_dims(head: &LinearHead, z: &[f64]) -> Result<(usize, usize)> {
    let (k, dim) = head.weight.dims2().expect("head weight is a matrix");
    if z.len() != dim {
        return Err(Error::shape("head", &[z.len()], head.weight.shape()));
    }
    Ok((k, dim))
}

/// Logits `W z + b` of a single feature vector.
pub fn head_logits(head: &LinearHead, z: &[f64]) -> Result<Vec<f64>> {
    let (k, dim) = head_dims(head, z)?;
    Ok(kernels::linear(z, head.weight.data(), head.bias.data(), 1, dim, k))
}

/// `Wᵀ v` for a `k`-vector `v`.
fn head_transpose_apply(head: &LinearHead, v: &[f64]) -> Vec<f64> {
    let (_, dim) = head.weight.dims2().expect("matrix");
    kernels::matmul(v, head.weight.data(), 1, v.len(), dim)
}

/// Per-class score vectors `∂ log p_y / ∂z = Wᵀ(e_y − p)`, one row per class.
pub fn log_prob_gradients(head: &LinearHead, z: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let (k, _) = head_dims(head, z)?;
    let p = kernels::softmax(&head_logits(head, z)?);
    let wt_p = head_transpose_apply(head, &p);
    let grads = (0..k)
        .map(|y| {
            let row = head.weight.row(y);
            row.iter().zip(&wt_p).map(|(w, c)| w - c).collect()
        })
        .collect();
    Ok((p, grads))
}

/// Full Fisher matrix `Σ_y p_y g_y g_yᵀ` of `p(y | z)` w.r.t. `z`, row-major.
pub fn fisher_matrix(head: &LinearHead, z: &[f64]) -> Result<Vec<f64>> {
    let (p, grads) = log_prob_gradients(head, z)?;
    let dim = z.len();
    let mut f = vec![0.0; dim * dim];
    for (py, g) in p.iter().zip(&grads) {
        for i in 0..dim {
            for j in 0..dim {
                f[i * dim + j] += py * g[i] * g[j];
            }
        }
    }
    Ok(f)
}

/// Exact Fisher diagonal `F_ii = Σ_y p_y (∂ log p_y / ∂z_i)²`, marginalizing
/// over every class.
pub fn fisher_diag_full(head: &LinearHead, z: &[f64]) -> Result<WeightDiag> {
    let (p, grads) = log_prob_gradients(head, z)?;
    let mut w = vec![0.0; z.len()];
    for (py, g) in p.iter().zip(&grads) {
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi += py * gi * gi;
        }
    }
    Ok(WeightDiag {
        w,
        source: WeightSource::Empirical,
        normalized: false,
        clamp_fraction: 0.0,
    })
}

/// `∂/∂z log p_{y*} = Wᵀ(onehot(y*) − p)`.
pub fn grad_le(head: &LinearHead, z: &[f64], y_star: usize) -> Result<Vec<f64>> {
    let (k, _) = head_dims(head, z)?;
    if y_star >= k {
        return Err(Error::LabelOutOfRange {
            label: y_star,
            classes: k,
        });
    }
    let mut e = kernels::softmax(&head_logits(head, z)?);
    e.iter_mut().for_each(|v| *v = -*v);
    e[y_star] += 1.0;
    Ok(head_transpose_apply(head, &e))
}

/// `∂/∂z (1/k) Σ_y l_y² = (2/k) Wᵀ l`.
pub fn grad_lh(head: &LinearHead, z: &[f64]) -> Result<Vec<f64>> {
    let (k, _) = head_dims(head, z)?;
    let l: Vec<f64> = head_logits(head, z)?.iter().map(|v| 2.0 * v / k as f64).collect();
    Ok(head_transpose_apply(head, &l))
}

/// `diag(g gᵀ)`, i.e. the elementwise square of `grad`.
pub fn weight_diag(grad: &[f64], source: WeightSource) -> WeightDiag {
    WeightDiag {
        w: grad.iter().map(|g| g * g).collect(),
        source,
        normalized: false,
        clamp_fraction: 0.0,
    }
}

/// Standardizes to mean one and unit population variance, then clamps
/// negatives to zero. A constant vector maps to all ones.
pub fn normalize_weight_diag(diag: &WeightDiag) -> WeightDiag {
    let (standardized, _) = standardize_weights(&diag.w);
    let n = standardized.len().max(1);
    let mut clamped = 0;
    let w = standardized
        .into_iter()
        .map(|v| {
            if v < 0.0 {
                clamped += 1;
                0.0
            } else {
                v
            }
        })
        .collect();
    WeightDiag {
        w,
        source: diag.source,
        normalized: true,
        clamp_fraction: clamped as f64 / n as f64,
    }
}

/// Pre-clamp affine standardization `(w − μ)/σ + 1`; the flag reports the
/// degenerate (σ < 1e-12) case.
pub fn standardize_weights(w: &[f64]) -> (Vec<f64>, bool) {
    let n = w.len() as f64;
    if w.len() < 2 {
        return (vec![1.0; w.len()], true);
    }
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return (vec![1.0; w.len()], true);
    }
    (w.iter().map(|v| (v - mean) / std + 1.0).collect(), false)
}

/// `z / max(‖z‖₂, 1e-12)`.
pub fn normalize_unit(z: &[f64]) -> Vec<f64> {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::autodiff::NORM_EPS);
    z.iter().map(|v| v / norm).collect()
}

/// Batch of per-row weight diagonals as a `b × dim` tensor.
pub fn teacher_weights(
    head: &LinearHead,
    features: &Tensor,
    labels: Option<&[usize]>,
    source: WeightSource,
    normalize: bool,
) -> Result<(Tensor, f64)> {
    let (b, dim) = features
        .dims2()
        .ok_or_else(|| Error::shape("teacher_weights", features.shape(), &[]))?;
    if source == WeightSource::Identity {
        return Ok((Tensor::filled(&[b, dim], 1.0), 0.0));
    }
    let mut out = Vec::with_capacity(b * dim);
    let mut clamp = 0.0;
    for r in 0..b {
        let z = features.row(r);
        let grad = match source {
            WeightSource::Empirical => {
                let labels = labels.ok_or_else(|| {
                    Error::invalid("empirical-Fisher weighting requires ground-truth labels")
                })?;
                grad_le(head, z, labels[r])?
            }
            WeightSource::Heuristic => grad_lh(head, z)?,
            WeightSource::Identity => unreachable!(),
        };
        let mut diag = weight_diag(&grad, source);
        if normalize {
            diag = normalize_weight_diag(&diag);
            clamp += diag.clamp_fraction;
        }
        out.extend(diag.w);
    }
    Ok((Tensor::matrix(b, dim, out)?, clamp / b.max(1) as f64))
}

/// Batch-mean `Σ_i w_i (z_s,i − z_t,i)²`, differentiable in `z_s` only.
pub fn d_g(tape: &mut Tape, z_s: Var, z_t: &Tensor, w: &Tensor) -> Result<Var> {
    if tape.value(z_s).shape() != z_t.shape() || z_t.shape() != w.shape() {
        return Err(Error::shape("d_g", tape.value(z_s).shape(), z_t.shape()));
    }
    let rows = z_t.dims2().map_or(1, |(r, _)| r);
    let target = tape.constant(z_t.clone());
    let weights = tape.constant(w.clone());
    let diff = tape.sub(z_s, target)?;
    let sq = tape.square(diff);
    let weighted = tape.mul(sq, weights)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// Row-wise unit normalization of a constant tensor.
pub fn normalize_rows(t: &Tensor) -> Tensor {
    let cols = t.shape().last().copied().unwrap_or(1);
    let data = t.data().chunks(cols).flat_map(normalize_unit).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

/// [`d_g`] on unit-normalized rows. `z_s` is the student's features already
/// mapped into teacher space.
pub fn d_g_mc(tape: &mut Tape, z_s: Var, z_t: &Tensor, w: &Tensor) -> Result<Var> {
    let zs_hat = tape.normalize_rows(z_s)?;
    d_g(tape, zs_hat, &normalize_rows(z_t), w)
}

/// Logits-plus-features combination
/// `λ_L · SE(l̂) + λ_F · Σ w_E (ẑ_s − ẑ_t)²`.
#[allow(clippy::too_many_arguments)]
pub fn d_g_bc(
    tape: &mut Tape,
    l_s: Var,
    l_t: &Tensor,
    z_s: Var,
    z_t: &Tensor,
    w_e: &Tensor,
    lambda_l: f64,
    lambda_f: f64,
) -> Result<Var> {
    let ones = Tensor::filled(l_t.shape(), 1.0);
    let logits_term = d_g_mc(tape, l_s, l_t, &ones)?;
    let feature_term = d_g_mc(tape, z_s, z_t, w_e)?;
    let a = tape.scale(logits_term, lambda_l);
    let b = tape.scale(feature_term, lambda_f);
    tape.add(a, b)
}

/// Classic softened-softmax distillation
/// `T² · KL(softmax(l_t/T) ‖ softmax(l_s/T))`, batch-meaned.
pub fn hkd_loss(tape: &mut Tape, l_s: Var, l_t: &Tensor, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let (b, k) = l_t
        .dims2()
        .ok_or_else(|| Error::shape("hkd_loss", l_t.shape(), &[]))?;
    let mut target = Vec::with_capacity(b * k);
    let mut entropy = 0.0;
    for row in l_t.data().chunks(k) {
        let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
        let lp = kernels::log_softmax(&scaled);
        for &l in &lp {
            let p = l.exp();
            if p > 0.0 {
                entropy -= p * l;
            }
            target.push(p);
        }
    }
    let target = Tensor::matrix(b, k, target)?;
    let softened = tape.scale(l_s, 1.0 / temperature);
    let ce = tape.soft_cross_entropy(softened, &target)?;
    let kl = tape.add_scalar(ce, -entropy / b as f64);
    Ok(tape.scale(kl, temperature * temperature))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum KdVariant {
    /// Features weighted by the empirical-Fisher gradient (true label).
    WeightedEFeaturesSe,
    /// Features weighted by the mean-squared-logits gradient.
    WeightedHFeaturesSe,
    FeaturesSe,
    LogitsSe,
    /// Normalized logits plus empirically weighted features.
    CombinedBc,
    HintonKd,
    None,
}

impl KdVariant {
    pub const ALL: [KdVariant; 7] = [
        KdVariant::WeightedEFeaturesSe,
        KdVariant::WeightedHFeaturesSe,
        KdVariant::FeaturesSe,
        KdVariant::LogitsSe,
        KdVariant::CombinedBc,
        KdVariant::HintonKd,
        KdVariant::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KdVariant::WeightedEFeaturesSe => "weighted-e-features-se",
            KdVariant::WeightedHFeaturesSe => "weighted-h-features-se",
            KdVariant::FeaturesSe => "features-se",
            KdVariant::LogitsSe => "logits-se",
            KdVariant::CombinedBc => "combined-bc",
            KdVariant::HintonKd => "hkd",
            KdVariant::None => "vanilla",
        }
    }

    /// Whether the student's features (through `r`) enter the loss.
    pub fn uses_features(self) -> bool {
        matches!(
            self,
            KdVariant::WeightedEFeaturesSe
                | KdVariant::WeightedHFeaturesSe
                | KdVariant::FeaturesSe
                | KdVariant::CombinedBc
        )
    }

    pub fn weight_source(self) -> WeightSource {
        match self {
            KdVariant::WeightedEFeaturesSe | KdVariant::CombinedBc => WeightSource::Empirical,
            KdVariant::WeightedHFeaturesSe => WeightSource::Heuristic,
            _ => WeightSource::Identity,
        }
    }
}

impl fmt::Display for KdVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KdVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KdVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = KdVariant::ALL.iter().map(|v| v.name()).collect();
                Error::invalid(format!("unknown variant `{s}`, expected one of {names:?}"))
            })
    }
}

/// A distillation variant with its coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdCriterion {
    pub variant: KdVariant,
    pub lambda: f64,
    pub lambda_f: f64,
    pub lambda_l: f64,
    pub temperature: f64,
}

impl KdCriterion {
    /// Default coefficients: `λ = λ_F` for features, `λ = λ_L` for logits,
    /// `λ = 1` for the combination and for HKD.
    pub fn new(variant: KdVariant) -> Self {
        Self::with_coefficients(variant, LAMBDA_FEATURES, LAMBDA_LOGITS, HKD_TEMPERATURE, None)
            .expect("defaults are valid")
    }

    pub fn with_coefficients(
        variant: KdVariant,
        lambda_f: f64,
        lambda_l: f64,
        temperature: f64,
        lambda: Option<f64>,
    ) -> Result<Self> {
        let lambda = lambda.unwrap_or(match variant {
            KdVariant::WeightedEFeaturesSe | KdVariant::WeightedHFeaturesSe | KdVariant::FeaturesSe => {
                lambda_f
            }
            KdVariant::LogitsSe => lambda_l,
            KdVariant::CombinedBc | KdVariant::HintonKd => 1.0,
            KdVariant::None => 0.0,
        });
        let c = Self {
            variant,
            lambda,
            lambda_f,
            lambda_l,
            temperature,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda_f >= 0.0 && self.lambda_l >= 0.0) {
            return Err(Error::invalid("distillation coefficients must be nonnegative"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

/// Frozen teacher outputs for a batch.
#[derive(Debug, Clone)]
pub struct TeacherSignals {
    pub features: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
    /// Per-row weight diagonals over `features`, when the variant needs them.
    pub weights: Option<Tensor>,
    /// Mean clamp fraction of the normalized weights.
    pub clamp_fraction: f64,
}

impl TeacherSignals {
    /// Runs the teacher's head 0 on `x` and derives the weights `variant`
    /// needs (normalized to mean one, unit variance).
    pub fn compute(
        teacher: &MultiHeadNet,
        x: &Tensor,
        labels: Option<&[usize]>,
        variant: KdVariant,
    ) -> Result<Self> {
        let out = teacher.forward(x, 0)?;
        let k = out.logits.shape()[1];
        let probs = Tensor::new(
            out.logits.shape().to_vec(),
            kernels::softmax_rows(out.logits.data(), k),
        )?;
        let (weights, clamp_fraction) = match variant.weight_source() {
            WeightSource::Identity => (None, 0.0),
            source => {
                let (w, c) = teacher_weights(&teacher.heads[0], &out.features, labels, source, true)?;
                (Some(w), c)
            }
        };
        Ok(Self {
            features: out.features,
            logits: out.logits,
            probs,
            weights,
            clamp_fraction,
        })
    }

    /// Rows `idx` of every signal.
    pub fn gather(&self, idx: &[usize]) -> Self {
        Self {
            features: gather_rows(&self.features, idx),
            logits: gather_rows(&self.logits, idx),
            probs: gather_rows(&self.probs, idx),
            weights: self.weights.as_ref().map(|w| gather_rows(w, idx)),
            clamp_fraction: self.clamp_fraction,
        }
    }
}

pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let cols = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), cols, data).expect("consistent")
}

/// Student-side tape values consumed by [`kd_total_loss`].
#[derive(Debug, Clone, Copy)]
pub struct StudentOutputs {
    pub logits: Var,
    /// Student features mapped into teacher feature space by `r`.
    pub aligned_features: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    /// The unscaled divergence term, absent for `None` or `λ = 0`.
    pub divergence: Option<Var>,
}

/// `L_CE(p_s, y*) + λ · D`, where `D` is the variant's divergence.
pub fn kd_total_loss(
    tape: &mut Tape,
    criterion: &KdCriterion,
    student: StudentOutputs,
    teacher: Option<&TeacherSignals>,
    labels: &[usize],
) -> Result<LossParts> {
    let ce = tape.softmax_cross_entropy(student.logits, labels)?;
    if criterion.variant == KdVariant::None || criterion.lambda == 0.0 {
        return Ok(LossParts {
            total: ce,
            ce,
            divergence: None,
        });
    }
    let signals = teacher.ok_or_else(|| {
        Error::invalid(format!("variant {} needs teacher signals", criterion.variant))
    })?;
    let features = || {
        student.aligned_features.ok_or_else(|| {
            Error::invalid(format!("variant {} needs aligned student features", criterion.variant))
        })
    };
    let weights = || {
        signals.weights.as_ref().ok_or_else(|| {
            Error::invalid(format!("variant {} needs teacher weights", criterion.variant))
        })
    };
    let divergence = match criterion.variant {
        KdVariant::WeightedEFeaturesSe | KdVariant::WeightedHFeaturesSe => {
            d_g_mc(tape, features()?, &signals.features, weights()?)?
        }
        KdVariant::FeaturesSe => {
            let ones = Tensor::filled(signals.features.shape(), 1.0);
            d_g_mc(tape, features()?, &signals.features, &ones)?
        }
        KdVariant::LogitsSe => {
            let ones = Tensor::filled(signals.logits.shape(), 1.0);
            d_g_mc(tape, student.logits, &signals.logits, &ones)?
        }
        KdVariant::CombinedBc => d_g_bc(
            tape,
            student.logits,
            &signals.logits,
            features()?,
            &signals.features,
            weights()?,
            criterion.lambda_l,
            criterion.lambda_f,
        )?,
        KdVariant::HintonKd => hkd_loss(tape, student.logits, &signals.logits, criterion.temperature)?,
        KdVariant::None => unreachable!(),
    };
    let scaled = tape.scale(divergence, criterion.lambda);
    let total = tape.add(ce, scaled)?;
    Ok(LossParts {
        total,
        ce,
        divergence: Some(divergence),
    })
}

impl TryFrom<String> for KdVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<KdVariant> for String {
    fn from(v: KdVariant) -> String {
        v.name().to_string()
    }
}

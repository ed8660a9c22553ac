//! MLP trunks, linear softmax heads and the feature-aligning transform.
//!
//! Weights are stored output-major (`[out × in]`), so a layer computes
//! `x · wᵀ + b` on a batch `x[b × in]`.

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero bias.
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let w = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::new(vec![fan_out, fan_in], w).expect("consistent"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        kernels::linear(
            x,
            self.weight.data(),
            self.bias.data(),
            rows,
            self.in_dim(),
            self.out_dim(),
        )
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Linear softmax head producing logits from penultimate features.
pub type LinearHead = Dense;

/// Trainable affine map from student features into teacher feature space.
/// Used only inside distillation losses, never for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTransform(pub Dense);

impl LinearTransform {
    pub fn new(student_dim: usize, teacher_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f7a);
        // No relu follows r, so use unit-gain (LeCun) scaling.
        let normal = Normal::new(0.0, (1.0 / student_dim as f64).sqrt()).expect("finite std");
        let w = (0..student_dim * teacher_dim).map(|_| normal.sample(&mut rng)).collect();
        Self(Dense {
            weight: Tensor::new(vec![teacher_dim, student_dim], w).expect("consistent"),
            bias: Tensor::zeros(&[teacher_dim]),
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.0.weight, &self.0.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.0.weight, &mut self.0.bias]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundDense {
        BoundDense {
            weight: tape.param(self.0.weight.clone()),
            bias: tape.param(self.0.bias.clone()),
        }
    }
}

/// Relu MLP whose last layer (the penultimate features) is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpTrunk {
    pub layers: Vec<Dense>,
}

impl MlpTrunk {
    /// `widths = [input, hidden…, feature]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].in_dim()];
        w.extend(self.layers.iter().map(Dense::out_dim));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map(Dense::out_dim).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h, rows);
            if i < last {
                kernels::relu_inplace(&mut h);
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    /// `[input, hidden…, feature]`; at least input and feature widths.
    pub widths: Vec<usize>,
    /// Class count of each initial head.
    pub heads: Vec<usize>,
    pub seed: u64,
}

/// Shared trunk feeding one linear head per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadNet {
    pub trunk: MlpTrunk,
    pub heads: Vec<LinearHead>,
    /// Base seed; head `j` draws from a stream derived from it.
    pub seed: u64,
}

/// Output of a tape-free forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub features: Tensor,
    pub logits: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
}

impl BoundDense {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

/// Parameters of a [`MultiHeadNet`] recorded on a tape, in
/// [`MultiHeadNet::params`] order.
#[derive(Debug, Clone)]
pub struct BoundNet {
    pub layers: Vec<BoundDense>,
    pub heads: Vec<BoundDense>,
}

impl BoundNet {
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .chain(&self.heads)
            .flat_map(|d| [d.weight, d.bias])
            .collect()
    }

    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, h)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn head(&self, tape: &mut Tape, z: Var, head: usize) -> Result<Var> {
        let h = self.heads.get(head).ok_or_else(|| {
            Error::invalid(format!("head index {head} out of range ({} heads)", self.heads.len()))
        })?;
        h.apply(tape, z)
    }

    /// Features and logits of `head` for batch `x`.
    pub fn forward(&self, tape: &mut Tape, x: Var, head: usize) -> Result<(Var, Var)> {
        let z = self.features(tape, x)?;
        let l = self.head(tape, z, head)?;
        Ok((z, l))
    }
}

impl MultiHeadNet {
    /// Deterministic He initialization from `spec.seed`.
    pub fn init(spec: &NetSpec) -> Result<Self> {
        if spec.widths.len() < 2 || spec.widths.contains(&0) {
            return Err(Error::invalid(format!("bad trunk widths {:?}", spec.widths)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], &mut rng))
            .collect();
        let mut net = Self {
            trunk: MlpTrunk { layers },
            heads: Vec::new(),
            seed: spec.seed,
        };
        for &k in &spec.heads {
            net.add_head(k)?;
        }
        Ok(net)
    }

    /// Appends a fresh `k`-class head and returns its index. Existing heads
    /// are left untouched.
    pub fn add_head(&mut self, k: usize) -> Result<usize> {
        if k < 2 {
            return Err(Error::invalid(format!("a head needs at least 2 classes, got {k}")));
        }
        let index = self.heads.len();
        // Per-head stream so a head's init does not depend on how many heads
        // were added before it.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0x9e37_79b9 * (index as u64 + 1)));
        let feat = self.trunk.feature_dim();
        let mut head = Dense::init(feat, k, &mut rng);
        // Heads feed a softmax, not a relu.
        let gain = 0.5f64.sqrt();
        head.weight.data_mut().iter_mut().for_each(|w| *w *= gain);
        self.heads.push(head);
        Ok(index)
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.feature_dim()
    }

    pub fn head_classes(&self) -> Vec<usize> {
        self.heads.iter().map(Dense::out_dim).collect()
    }

    /// Trunk layers then heads, each as (weight, bias).
    pub fn params(&self) -> Vec<&Tensor> {
        self.trunk
            .layers
            .iter()
            .chain(&self.heads)
            .flat_map(|d| [&d.weight, &d.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk
            .layers
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Parameters of the trunk and the first `heads` heads, concatenated.
    pub fn flat_params(&self, heads: usize) -> Vec<f64> {
        let n = 2 * (self.trunk.layers.len() + heads.min(self.heads.len()));
        self.params()[..n].iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundNet {
        let bind = |tape: &mut Tape, d: &Dense| BoundDense {
            weight: tape.param(d.weight.clone()),
            bias: tape.param(d.bias.clone()),
        };
        BoundNet {
            layers: self.trunk.layers.iter().map(|d| bind(tape, d)).collect(),
            heads: self.heads.iter().map(|d| bind(tape, d)).collect(),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        match x.dims2() {
            Some((rows, d)) if d == self.input_dim() => Ok(rows),
            _ => Err(Error::shape("forward", x.shape(), &[0, self.input_dim()])),
        }
    }

    /// Penultimate features for batch `x[b × input]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let rows = self.check_input(x)?;
        Tensor::matrix(rows, self.feature_dim(), self.trunk.forward(x.data(), rows))
    }

    pub fn head_logits(&self, features: &Tensor, head: usize) -> Result<Tensor> {
        let h = self.heads.get(head).ok_or_else(|| {
            Error::invalid(format!("head index {head} out of range ({} heads)", self.heads.len()))
        })?;
        let (rows, _) = features
            .dims2()
            .filter(|&(_, d)| d == h.in_dim())
            .ok_or_else(|| Error::shape("head", features.shape(), h.weight.shape()))?;
        Tensor::matrix(rows, h.out_dim(), h.forward(features.data(), rows))
    }

    /// Tape-free forward through the trunk and head `head`.
    pub fn forward(&self, x: &Tensor, head: usize) -> Result<Forward> {
        if head >= self.heads.len() {
            return Err(Error::invalid(format!(
                "head index {head} out of range ({} heads)",
                self.heads.len()
            )));
        }
        let features = self.features(x)?;
        let logits = self.head_logits(&features, head)?;
        Ok(Forward { features, logits })
    }

    /// Argmax predictions of head `head`; ties go to the lowest class.
    pub fn predict(&self, x: &Tensor, head: usize) -> Result<Vec<usize>> {
        let out = self.forward(x, head)?;
        let k = out.logits.shape()[1];
        Ok(out.logits.data().chunks(k).map(kernels::argmax).collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize], head: usize) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(x, head)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::from_net(self);
        crate::results::write_atomic(path, |w| {
            serde_json::to_writer(&mut *w, &ckpt)?;
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        ckpt.into_net()
    }
}

/// On-disk model record: widths, head sizes and flat parameter arrays.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub widths: Vec<usize>,
    pub heads: Vec<usize>,
    /// One array per parameter tensor, in [`MultiHeadNet::params`] order.
    pub params: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_net(net: &MultiHeadNet) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            seed: net.seed,
            widths: net.trunk.widths(),
            heads: net.head_classes(),
            params: net.params().iter().map(|t| t.data().to_vec()).collect(),
        }
    }

    pub fn into_net(self) -> Result<MultiHeadNet> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut net = MultiHeadNet::init(&NetSpec {
            widths: self.widths,
            heads: self.heads,
            seed: self.seed,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let slots = net.params_mut();
        if slots.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                slots.len(),
                self.params.len()
            )));
        }
        for (slot, values) in slots.into_iter().zip(self.params) {
            if slot.len() != values.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter length {} does not match shape {:?}",
                    values.len(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(&values);
        }
        Ok(net)
    }
}

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Row norms below this are replaced by it in [`Tape::normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SoftCrossEntropy { logits: Var, target: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0]
            .value
            .dims2()
            .ok_or_else(|| Error::shape(op, self.shape(v), &[]))
    }

    /// Records a leaf. Gradients are accumulated for it on backward iff
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A value-equal copy that is excluded from differentiation.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf; `None` before any backward pass
    /// reached it or for non-leaf values.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// Affine map `x · wᵀ + b` for `x[m×k]`, `w[n×k]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("linear", x)?;
        let (n, k2) = self.dims2("linear", w)?;
        if k != k2 || self.shape(b) != [n] {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        let out = kernels::linear(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            m,
            k,
            n,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::Linear { x, w, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let out = transpose(self.value(a).data(), m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::Transpose(a)))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op_name, self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
            .expect("shape preserved");
        let rg = self.rg(x);
        self.push(out, rg, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |e| c * e, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |e| e + c, Op::AddScalar(x))
    }

    /// Adds `b[n]` to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.dims2("add_bias", x)?;
        if self.shape(b) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let v = self.value(x);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, rg, Op::AddBias(x, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |e| if e > 0.0 { e } else { 0.0 }, Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |e| e * e, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Scales each row of `x[m×n]` to unit L2 norm; rows with norm below
    /// [`NORM_EPS`] are divided by `NORM_EPS` instead.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims2("normalize_rows", x)?;
        let v = self.value(x);
        let mut norms = Vec::with_capacity(v.len() / n.max(1));
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(n) {
            let norm = row.iter().map(|e| e * e).sum::<f64>().sqrt();
            let d = norm.max(NORM_EPS);
            norms.push(norm);
            out.extend(row.iter().map(|e| e / d));
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::NormalizeRows { x, norms }))
    }

    /// Batch-mean of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.dims2("softmax_cross_entropy", logits)?;
        if labels.len() != b {
            return Err(Error::shape("softmax_cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let v = self.value(logits).data();
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(b * k);
        for (row, &y) in v.chunks(k).zip(labels) {
            let lp = kernels::log_softmax(row);
            loss -= lp[y];
            probs.extend(lp.iter().map(|e| e.exp()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Batch-mean of `-Σ_y target_y · log softmax(logits)_y` against a fixed
    /// target distribution of the same shape.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let (b, k) = self.dims2("soft_cross_entropy", logits)?;
        if target.shape() != [b, k] {
            return Err(Error::shape("soft_cross_entropy", self.shape(logits), target.shape()));
        }
        let v = self.value(logits).data();
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(b * k);
        for (row, t) in v.chunks(k).zip(target.data().chunks(k)) {
            let lp = kernels::log_softmax(row);
            loss -= lp.iter().zip(t).map(|(l, t)| if *t == 0.0 { 0.0 } else { t * l }).sum::<f64>();
            probs.extend(lp.iter().map(|e| e.exp()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            rg,
            Op::SoftCrossEntropy {
                logits,
                target: target.data().to_vec(),
                probs,
            },
        ))
    }

    /// Propagates `d loss / d ·` to every leaf that requires gradients.
    ///
    /// Leaf gradients accumulate across calls; use [`Tape::zero_grad`] to
    /// reset them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut cot: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        cot[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = cot[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |v: Var, grad: Vec<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut cot[v.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(grad),
                }
            };
            let value = &nodes[i].value;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let va = &nodes[a.0].value;
                    let vb = &nodes[b.0].value;
                    let (m, k) = va.dims2().unwrap();
                    let n = vb.dims2().unwrap().1;
                    if nodes[a.0].requires_grad {
                        send(*a, kernels::matmul_nt(&g, vb.data(), m, n, k));
                    }
                    if nodes[b.0].requires_grad {
                        send(*b, kernels::matmul_tn(va.data(), &g, m, k, n));
                    }
                }
                Op::Linear { x, w, b } => {
                    let vx = &nodes[x.0].value;
                    let vw = &nodes[w.0].value;
                    let (m, k) = vx.dims2().unwrap();
                    let n = vw.dims2().unwrap().0;
                    if nodes[x.0].requires_grad {
                        send(*x, kernels::matmul(&g, vw.data(), m, n, k));
                    }
                    if nodes[w.0].requires_grad {
                        send(*w, kernels::matmul_tn(&g, vx.data(), m, n, k));
                    }
                    if nodes[b.0].requires_grad {
                        send(*b, column_sums(&g, n));
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = nodes[a.0].value.dims2().unwrap();
                    send(*a, transpose(&g, n, m));
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|e| -e).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let va = nodes[a.0].value.data();
                    let vb = nodes[b.0].value.data();
                    send(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                    send(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
                Op::Scale(x, c) => send(*x, g.iter().map(|e| c * e).collect()),
                Op::AddScalar(x) => send(*x, g),
                Op::AddBias(x, b) => {
                    let n = nodes[b.0].value.len();
                    send(*b, column_sums(&g, n));
                    send(*x, g);
                }
                Op::Relu(x) => {
                    let vx = nodes[x.0].value.data();
                    send(
                        *x,
                        g.iter().zip(vx).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                    );
                }
                Op::Square(x) => {
                    let vx = nodes[x.0].value.data();
                    send(*x, g.iter().zip(vx).map(|(g, x)| 2.0 * x * g).collect());
                }
                Op::Sum(x) => send(*x, vec![g[0]; nodes[x.0].value.len()]),
                Op::Mean(x) => {
                    let n = nodes[x.0].value.len();
                    send(*x, vec![g[0] / n as f64; n]);
                }
                Op::NormalizeRows { x, norms } => {
                    let n = value.dims2().unwrap().1;
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gr, yr), &norm) in g.chunks(n).zip(value.data().chunks(n)).zip(norms) {
                        if norm > NORM_EPS {
                            let proj = kernels::dot(yr, gr);
                            gx.extend(gr.iter().zip(yr).map(|(g, y)| (g - y * proj) / norm));
                        } else {
                            gx.extend(gr.iter().map(|g| g / NORM_EPS));
                        }
                    }
                    send(*x, gx);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let scale = g[0] / b as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        gl[r * k + y] -= scale;
                    }
                    send(*logits, gl);
                }
                Op::SoftCrossEntropy { logits, target, probs } => {
                    let (b, k) = nodes[logits.0].value.dims2().unwrap();
                    let scale = g[0] / b as f64;
                    let mut gl = Vec::with_capacity(b * k);
                    for (pr, tr) in probs.chunks(k).zip(target.chunks(k)) {
                        let mass: f64 = tr.iter().sum();
                        gl.extend(pr.iter().zip(tr).map(|(p, t)| (p * mass - t) * scale));
                    }
                    send(*logits, gl);
                }
            }
        }
        Ok(())
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn column_sums(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

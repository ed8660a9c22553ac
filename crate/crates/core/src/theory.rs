//! Numerical checks of the second-order expansion of the KL divergence
//! between two softmax heads sharing the same classifier.

use crate::autodiff::{kernels, Tensor};
use crate::criteria::{fisher_matrix, head_logits, log_prob_gradients};
use crate::error::{Error, Result};
use crate::nets::LinearHead;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Finite-difference step for Hessians.
pub const HESSIAN_STEP: f64 = 1e-4;
pub const FIRST_ORDER_TOL: f64 = 1e-9;
pub const FISHER_TOL: f64 = 1e-5;
pub const LH_HESSIAN_TOL: f64 = 1e-7;
pub const SLOPE_RANGE: (f64, f64) = (2.5, 3.5);
/// Remainders below this are rounding noise and excluded from slope fits.
pub const REMAINDER_FLOOR: f64 = 1e-14;
pub const DEFAULT_SCALES: [f64; 5] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub check: String,
    pub max_residual: f64,
    pub slope: Option<f64>,
    pub threshold: f64,
    pub passed: bool,
    pub trials: usize,
    pub seed: u64,
    /// Check-specific diagnostics.
    pub details: BTreeMap<String, f64>,
}

fn random_head(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> LinearHead {
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let w: Vec<f64> = (0..k * dim).map(|_| normal()).collect();
    let b: Vec<f64> = (0..k).map(|_| normal()).collect();
    LinearHead {
        weight: Tensor::new(vec![k, dim], w).expect("consistent"),
        bias: Tensor::vector(b),
    }
}

fn uniform_vec(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn log_probs(head: &LinearHead, z: &[f64]) -> Vec<f64> {
    kernels::log_softmax(&head_logits(head, z).expect("dims checked by caller"))
}

/// `dzᵀ Σ_y p_y ∂ log p_y / ∂z`, evaluated term by term.
pub fn first_order_term(head: &LinearHead, z: &[f64], dz: &[f64]) -> Result<f64> {
    let (p, grads) = log_prob_gradients(head, z)?;
    let mut expected = vec![0.0; z.len()];
    for (py, g) in p.iter().zip(&grads) {
        for (e, gi) in expected.iter_mut().zip(g) {
            *e += py * gi;
        }
    }
    Ok(kernels::dot(dz, &expected))
}

pub fn check_first_order_zero(dim: usize, k: usize, trials: usize, seed: u64) -> Result<VerificationReport> {
    if dim < 2 || k < 2 {
        return Err(Error::invalid("dim and k must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_residual = 0.0f64;
    for _ in 0..trials {
        let head = random_head(k, dim, &mut rng);
        let z = uniform_vec(dim, -2.0, 2.0, &mut rng);
        let dz = uniform_vec(dim, -2.0, 2.0, &mut rng);
        max_residual = max_residual.max(first_order_term(&head, &z, &dz)?.abs());
    }
    Ok(VerificationReport {
        check: "first_order_zero".into(),
        max_residual,
        slope: None,
        threshold: FIRST_ORDER_TOL,
        passed: max_residual < FIRST_ORDER_TOL,
        trials,
        seed,
        details: BTreeMap::from([("dim".into(), dim as f64), ("k".into(), k as f64)]),
    })
}

/// Central-difference Hessian of `f` at `x`, row-major.
pub fn fd_hessian(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let n = x.len();
    let mut hess = vec![0.0; n * n];
    let mut p = x.to_vec();
    let mut eval = |i: usize, si: f64, j: usize, sj: f64| {
        p.copy_from_slice(x);
        p[i] += si * h;
        p[j] += sj * h;
        f(&p)
    };
    for i in 0..n {
        for j in i..n {
            let v = (eval(i, 1.0, j, 1.0) - eval(i, 1.0, j, -1.0) - eval(i, -1.0, j, 1.0)
                + eval(i, -1.0, j, -1.0))
                / (4.0 * h * h);
            hess[i * n + j] = v;
            hess[j * n + i] = v;
        }
    }
    hess
}

/// Compares the Fisher matrix with the negated finite-difference Hessian of
/// `z ↦ Σ_y p_y(z₀) log p_y(z)` at `z₀`, over full matrices.
pub fn check_fisher_neg_hessian(dim: usize, k: usize, trials: usize, seed: u64) -> Result<VerificationReport> {
    if dim < 1 || k < 2 || dim > 8 || k > 5 {
        return Err(Error::invalid("fisher check expects dim ≤ 8 and 2 ≤ k ≤ 5"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_residual = 0.0f64;
    let mut off_mass = 0.0f64;
    let mut total_mass = 0.0f64;
    for _ in 0..trials {
        let head = random_head(k, dim, &mut rng);
        let z0 = uniform_vec(dim, -2.0, 2.0, &mut rng);
        let (r, off, total) = fisher_hessian_residual(&head, &z0)?;
        max_residual = max_residual.max(r);
        off_mass += off;
        total_mass += total;
    }
    Ok(VerificationReport {
        check: "fisher_neg_hessian".into(),
        max_residual,
        slope: None,
        threshold: FISHER_TOL,
        passed: max_residual < FISHER_TOL,
        trials,
        seed,
        details: BTreeMap::from([
            ("dim".into(), dim as f64),
            ("k".into(), k as f64),
            // Share of the Fisher's Frobenius mass the diagonal cast discards.
            ("off_diagonal_mass_fraction".into(), off_mass / total_mass.max(f64::MIN_POSITIVE)),
        ]),
    })
}

/// Returns (max elementwise |F + H|, off-diagonal squared mass, total
/// squared mass of F).
pub fn fisher_hessian_residual(head: &LinearHead, z0: &[f64]) -> Result<(f64, f64, f64)> {
    let dim = z0.len();
    let p0: Vec<f64> = log_probs(head, z0).iter().map(|l| l.exp()).collect();
    let expected_log_lik = |z: &[f64]| -> f64 {
        log_probs(head, z).iter().zip(&p0).map(|(l, p)| p * l).sum()
    };
    let hess = fd_hessian(expected_log_lik, z0, HESSIAN_STEP);
    let fisher = fisher_matrix(head, z0)?;
    let mut residual = 0.0f64;
    let mut off = 0.0;
    let mut total = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            let f = fisher[i * dim + j];
            residual = residual.max((f + hess[i * dim + j]).abs());
            total += f * f;
            if i != j {
                off += f * f;
            }
        }
    }
    Ok((residual, off, total))
}

/// `KL(p(z) ‖ p(z + dz))` through log-softmax.
pub fn kl_between(head: &LinearHead, z: &[f64], dz: &[f64]) -> f64 {
    let lp = log_probs(head, z);
    let moved: Vec<f64> = z.iter().zip(dz).map(|(a, b)| a + b).collect();
    let lq = log_probs(head, &moved);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

fn quadratic_form(m: &[f64], v: &[f64]) -> f64 {
    let n = v.len();
    (0..n).map(|i| v[i] * kernels::dot(&m[i * n..(i + 1) * n], v)).sum()
}

/// Remainders `|KL(p(z), p(z + s·dz)) − ½ s² dzᵀ F dz|` for each scale, with
/// either the full Fisher or its diagonal.
pub fn taylor_errors(head: &LinearHead, z: &[f64], dz: &[f64], scales: &[f64], diagonal_only: bool) -> Result<Vec<f64>> {
    let mut fisher = fisher_matrix(head, z)?;
    let n = z.len();
    if diagonal_only {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    fisher[i * n + j] = 0.0;
                }
            }
        }
    }
    let quad = 0.5 * quadratic_form(&fisher, dz);
    Ok(scales
        .iter()
        .map(|&s| {
            let step: Vec<f64> = dz.iter().map(|d| s * d).collect();
            (kl_between(head, z, &step) - s * s * quad).abs()
        })
        .collect())
}

/// Least-squares slope of `log err` against `log s`, skipping points at the
/// rounding floor. `None` with fewer than two usable points.
pub fn loglog_slope(scales: &[f64], errors: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = scales
        .iter()
        .zip(errors)
        .filter(|(_, &e)| e > REMAINDER_FLOOR)
        .map(|(&s, &e)| (s.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(sxy / sxx)
}

pub fn check_taylor_remainder(dim: usize, k: usize, scales: &[f64], trials: usize, seed: u64) -> Result<VerificationReport> {
    if dim < 2 || k < 2 || scales.len() < 2 {
        return Err(Error::invalid("taylor check needs dim, k ≥ 2 and at least two scales"));
    }
    if scales.windows(2).any(|w| !(w[1] < w[0])) || scales.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("scales must be positive and strictly decreasing"));
    }
    let probe = scales
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1.ln() - 1e-2f64.ln()).abs().total_cmp(&(b.1.ln() - 1e-2f64.ln()).abs()))
        .map(|(i, _)| i)
        .expect("nonempty");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut min_slope, mut max_slope) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut max_diag_slope = f64::NEG_INFINITY;
    let mut min_diag_slope = f64::INFINITY;
    let mut worst_rel = 0.0f64;
    let mut max_residual = 0.0f64;
    for _ in 0..trials {
        let head = random_head(k, dim, &mut rng);
        let z = uniform_vec(dim, -2.0, 2.0, &mut rng);
        let dz: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let errs = taylor_errors(&head, &z, &dz, scales, false)?;
        let slope = loglog_slope(scales, &errs).unwrap_or(f64::NAN);
        min_slope = min_slope.min(slope);
        max_slope = max_slope.max(slope);
        let kl = kl_between(&head, &z, &dz.iter().map(|d| scales[probe] * d).collect::<Vec<_>>());
        worst_rel = worst_rel.max(errs[probe] / kl.abs().max(f64::MIN_POSITIVE));
        max_residual = max_residual.max(errs[0]);

        let diag = taylor_errors(&head, &z, &dz, scales, true)?;
        if let Some(s) = loglog_slope(scales, &diag) {
            min_diag_slope = min_diag_slope.min(s);
            max_diag_slope = max_diag_slope.max(s);
        }
    }
    let passed = min_slope >= SLOPE_RANGE.0 && max_slope <= SLOPE_RANGE.1 && worst_rel <= 0.1;
    Ok(VerificationReport {
        check: "taylor_remainder".into(),
        max_residual,
        slope: Some(min_slope),
        threshold: SLOPE_RANGE.0,
        passed,
        trials,
        seed,
        details: BTreeMap::from([
            ("dim".into(), dim as f64),
            ("k".into(), k as f64),
            ("max_slope".into(), max_slope),
            ("relative_quadratic_error_at_1e-2".into(), worst_rel),
            ("diagonal_fisher_min_slope".into(), min_diag_slope),
            ("diagonal_fisher_max_slope".into(), max_diag_slope),
        ]),
    })
}

/// Finite-difference Hessian of `l ↦ (1/k) Σ l²` at `base`.
pub fn lh_hessian(base: &[f64]) -> Vec<f64> {
    let k = base.len() as f64;
    fd_hessian(|l| l.iter().map(|v| v * v).sum::<f64>() / k, base, HESSIAN_STEP)
}

pub fn check_lh_hessian_identity(k: usize, seed: u64) -> Result<VerificationReport> {
    if k < 2 {
        return Err(Error::invalid("k must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bases = [uniform_vec(k, -2.0, 2.0, &mut rng), uniform_vec(k, -2.0, 2.0, &mut rng)];
    let hessians: Vec<Vec<f64>> = bases.iter().map(|b| lh_hessian(b)).collect();
    let diag = 2.0 / k as f64;
    let mut max_residual = 0.0f64;
    for h in &hessians {
        for i in 0..k {
            for j in 0..k {
                let want = if i == j { diag } else { 0.0 };
                max_residual = max_residual.max((h[i * k + j] - want).abs());
            }
        }
    }
    let base_gap = hessians[0]
        .iter()
        .zip(&hessians[1])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(VerificationReport {
        check: "lh_hessian_identity".into(),
        max_residual,
        slope: None,
        threshold: LH_HESSIAN_TOL,
        passed: max_residual < LH_HESSIAN_TOL,
        trials: bases.len(),
        seed,
        details: BTreeMap::from([("k".into(), k as f64), ("base_point_gap".into(), base_gap)]),
    })
}

/// The four checks at their standard sizes.
pub fn run_all(seed: u64) -> Result<Vec<VerificationReport>> {
    Ok(vec![
        check_first_order_zero(16, 10, 100, seed)?,
        check_fisher_neg_hessian(8, 5, 25, seed.wrapping_add(1))?,
        check_taylor_remainder(8, 5, &DEFAULT_SCALES, 10, seed.wrapping_add(2))?,
        check_lh_hessian_identity(10, seed.wrapping_add(3))?,
    ])
}

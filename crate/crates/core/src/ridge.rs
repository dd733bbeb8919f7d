//! Kernel ridge regression with an RBF kernel `exp(-|x - x'|^2 / gamma)`.
//!
//! Leave-one-out scores use the closed form: with `A = K + lambda I`,
//! the held-out residual at `i` is `(A^-1 y)_i / (A^-1)_ii`, and
//! `1 - H_ii = lambda (A^-1)_ii` for the hat matrix `H = K A^-1`. One
//! eigendecomposition of `K` serves the whole ridge grid.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::{symmetric_eigen, Lu};
use crate::novelty::rbf;
use crate::tensor::{sq_dist, Tensor};

/// Below this `1 - H_ii` a held-out point counts as fully self-predicted.
pub const MIN_LEVERAGE_MARGIN: f64 = 1e-12;

/// `2^-10, 2^-9, ..., 2^10`.
pub fn lambda_grid() -> Vec<f64> {
    (-10..=10).map(|k| 2f64.powi(k)).collect()
}

/// Median of pairwise squared distances over `i < j`; 1 when that median is
/// zero. An even number of pairs takes the mean of the two middle values.
pub fn median_bandwidth(inputs: &Tensor) -> Result<f64> {
    let m = inputs.rows();
    if m < 2 {
        return Err(invalid(format!("median heuristic needs at least 2 rows, got {m}")));
    }
    let mut d = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push(sq_dist(inputs.row(i), inputs.row(j)));
        }
    }
    let len = d.len();
    let mid = len / 2;
    let (_, &mut upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let median = if len % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

pub fn kernel_matrix(x: &Tensor, gamma: f64) -> Tensor {
    let m = x.rows();
    let mut k = Tensor::zeros(m, m);
    for i in 0..m {
        k.set(i, i, 1.0);
        for j in 0..i {
            let v = rbf(x.row(i), x.row(j), gamma);
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    k
}

fn check_problem(x: &Tensor, y: &[f64], lambda: f64, gamma: f64) -> Result<()> {
    if x.rows() == 0 {
        return Err(invalid("kernel ridge needs at least one training row"));
    }
    if x.rows() != y.len() {
        return Err(shape_err("kernel ridge", format!("{} inputs for {} targets", x.rows(), y.len())));
    }
    if !(lambda > 0.0) || !(gamma > 0.0) {
        return Err(invalid(format!("lambda and gamma must be positive, got {lambda}, {gamma}")));
    }
    Ok(())
}

fn ridge_system(x: &Tensor, lambda: f64, gamma: f64) -> Tensor {
    let mut a = kernel_matrix(x, gamma);
    for i in 0..a.rows() {
        let v = a.get(i, i) + lambda;
        a.set(i, i, v);
    }
    a
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrrModel {
    pub inputs: Tensor,
    pub alpha: Vec<f64>,
    pub gamma: f64,
    pub lambda: f64,
}

/// Solves `(K + lambda I) alpha = y`.
pub fn fit_krr(x: &Tensor, y: &[f64], lambda: f64, gamma: f64) -> Result<KrrModel> {
    check_problem(x, y, lambda, gamma)?;
    let lu = Lu::factor(&ridge_system(x, lambda, gamma))?;
    Ok(KrrModel {
        inputs: x.clone(),
        alpha: lu.solve_vec(y),
        gamma,
        lambda,
    })
}

impl KrrModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.inputs
            .iter_rows()
            .zip(&self.alpha)
            .map(|(xi, a)| a * rbf(xi, x, self.gamma))
            .sum()
    }

    pub fn predict_batch(&self, x: &Tensor) -> Vec<f64> {
        x.iter_rows().map(|r| self.predict(r)).collect()
    }

    /// Mean squared error on labeled rows.
    pub fn mse(&self, x: &Tensor, y: &[f64]) -> f64 {
        let n = y.len().max(1) as f64;
        self.predict_batch(x)
            .iter()
            .zip(y)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n
    }
}

fn check_held_out(m: usize, held_out: &[usize]) -> Result<()> {
    if m < 2 {
        return Err(invalid("leave-one-out needs at least 2 training rows"));
    }
    if held_out.is_empty() {
        return Err(invalid("no held-out indices"));
    }
    if let Some(&bad) = held_out.iter().find(|&&i| i >= m) {
        return Err(invalid(format!("held-out index {bad} out of range 0..{m}")));
    }
    Ok(())
}

/// Analytic LOOCV mean squared error over `held_out` for one `lambda`.
pub fn loocv_mse(x: &Tensor, y: &[f64], lambda: f64, gamma: f64, held_out: &[usize]) -> Result<f64> {
    check_problem(x, y, lambda, gamma)?;
    check_held_out(x.rows(), held_out)?;
    let m = x.rows();
    let lu = Lu::factor(&ridge_system(x, lambda, gamma))?;
    let c = lu.solve_vec(y);
    let mut total = 0.0;
    let mut e = vec![0.0; m];
    for &i in held_out {
        e.fill(0.0);
        e[i] = 1.0;
        let inv_ii = lu.solve_vec(&e)[i];
        let margin = lambda * inv_ii;
        if !(margin > MIN_LEVERAGE_MARGIN) {
            return Err(Error::DegenerateLeverage { index: i, margin });
        }
        let r = c[i] / inv_ii;
        total += r * r;
    }
    Ok(total / held_out.len() as f64)
}

/// Eigendecomposition of one kernel matrix, reused across ridge values.
pub struct LoocvEngine {
    eigenvalues: Vec<f64>,
    /// Row-major `m x m`, eigenvectors in columns.
    vectors: Tensor,
}

impl LoocvEngine {
    pub fn new(x: &Tensor, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(invalid(format!("gamma must be positive, got {gamma}")));
        }
        let (eigenvalues, vectors) = symmetric_eigen(&kernel_matrix(x, gamma))?;
        Ok(Self { eigenvalues, vectors })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn score(&self, y: &[f64], lambda: f64, held_out: &[usize]) -> Result<f64> {
        let m = self.dim();
        if y.len() != m {
            return Err(shape_err("LoocvEngine::score", format!("{} targets for {m} rows", y.len())));
        }
        if !(lambda > 0.0) {
            return Err(invalid(format!("lambda must be positive, got {lambda}")));
        }
        check_held_out(m, held_out)?;
        let q = &self.vectors;
        let inv: Vec<f64> = self.eigenvalues.iter().map(|l| 1.0 / (l + lambda)).collect();
        // Q' y scaled by the inverse spectrum
        let mut w = vec![0.0; m];
        for (i, &yi) in y.iter().enumerate() {
            for (wk, qik) in w.iter_mut().zip(q.row(i)) {
                *wk += qik * yi;
            }
        }
        w.iter_mut().zip(&inv).for_each(|(a, b)| *a *= b);
        let mut total = 0.0;
        for &i in held_out {
            let row = q.row(i);
            let c_i: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
            let inv_ii: f64 = row.iter().zip(&inv).map(|(a, b)| a * a * b).sum();
            let margin = lambda * inv_ii;
            if !(margin > MIN_LEVERAGE_MARGIN) {
                return Err(Error::DegenerateLeverage { index: i, margin });
            }
            let r = c_i / inv_ii;
            total += r * r;
        }
        Ok(total / held_out.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub score: f64,
    /// `(lambda, score)` for every grid cell; degenerate cells score NaN.
    pub scores: Vec<(f64, f64)>,
}

/// Picks the grid value with the smallest LOOCV score (smaller lambda on ties).
pub fn select_lambda(x: &Tensor, y: &[f64], gamma: f64, held_out: &[usize]) -> Result<LambdaSelection> {
    if x.rows() != y.len() {
        return Err(shape_err("select_lambda", format!("{} inputs for {} targets", x.rows(), y.len())));
    }
    check_held_out(x.rows(), held_out)?;
    let engine = LoocvEngine::new(x, gamma)?;
    select_with(held_out, |lambda, idx| engine.score(y, lambda, idx))
}

fn select_with<F>(held_out: &[usize], mut score: F) -> Result<LambdaSelection>
where
    F: FnMut(f64, &[usize]) -> Result<f64>,
{
    let mut scores = Vec::with_capacity(21);
    let mut best: Option<(f64, f64)> = None;
    let mut last_err = None;
    for lambda in lambda_grid() {
        match score(lambda, held_out) {
            Ok(s) if s.is_finite() => {
                if best.is_none_or(|(_, b)| s < b) {
                    best = Some((lambda, s));
                }
                scores.push((lambda, s));
            }
            Ok(_) => scores.push((lambda, f64::NAN)),
            Err(e) => {
                scores.push((lambda, f64::NAN));
                last_err = Some(e);
            }
        }
    }
    match best {
        Some((lambda, score)) => Ok(LambdaSelection { lambda, score, scores }),
        None => Err(last_err.unwrap_or_else(|| invalid("every ridge value gave a non-finite LOOCV score"))),
    }
}

/// LOOCV where holding out `held_out[k]` also drops every row listed in
/// `excluded[k]`; each fold is refit from scratch.
pub fn strict_loocv_mse(
    x: &Tensor,
    y: &[f64],
    lambda: f64,
    gamma: f64,
    held_out: &[usize],
    excluded: &[Vec<usize>],
) -> Result<f64> {
    check_problem(x, y, lambda, gamma)?;
    check_held_out(x.rows(), held_out)?;
    if excluded.len() != held_out.len() {
        return Err(shape_err("strict_loocv_mse", "one exclusion list per held-out index"));
    }
    let m = x.rows();
    let mut total = 0.0;
    for (&i, drop) in held_out.iter().zip(excluded) {
        let mut out = vec![false; m];
        out[i] = true;
        for &j in drop {
            if j >= m {
                return Err(invalid(format!("excluded index {j} out of range 0..{m}")));
            }
            out[j] = true;
        }
        let keep: Vec<usize> = (0..m).filter(|&j| !out[j]).collect();
        if keep.is_empty() {
            return Err(invalid(format!("holding out row {i} leaves no training data")));
        }
        let ys: Vec<f64> = keep.iter().map(|&j| y[j]).collect();
        let model = fit_krr(&x.select_rows(&keep), &ys, lambda, gamma)?;
        let r = y[i] - model.predict(x.row(i));
        total += r * r;
    }
    Ok(total / held_out.len() as f64)
}

/// Strict-mode counterpart of [`select_lambda`].
pub fn select_lambda_strict(
    x: &Tensor,
    y: &[f64],
    gamma: f64,
    held_out: &[usize],
    excluded: &[Vec<usize>],
) -> Result<LambdaSelection> {
    select_with(held_out, |lambda, idx| strict_loocv_mse(x, y, lambda, gamma, idx, excluded))
}

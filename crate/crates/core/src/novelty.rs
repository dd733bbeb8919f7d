//! One-class SVM novelty filter.
//!
//! Dual problem: minimize `0.5 a' Q a` subject to `0 <= a_i <= 1/(nu n)` and
//! `sum a_i = 1`, with `Q_ij = exp(-|x_i - x_j|^2 / gamma)`. Solved by SMO on
//! the maximal violating pair.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{sq_dist, Tensor};

pub const DEFAULT_NU: f64 = 0.1;
pub const SMO_TOLERANCE: f64 = 1e-6;
pub const SMO_MAX_ITER: usize = 100_000;
/// A coefficient counts as free when it is this far from both bounds.
pub const FREE_MARGIN: f64 = 1e-8;

/// Full kernel matrices are cached up to this many points.
const CACHE_LIMIT: usize = 3000;

pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-sq_dist(a, b) / gamma).exp()
}

/// Anything that can accept or reject a synthesized row.
pub trait NoveltyFilter: Sync {
    fn accepts(&self, x: &[f64]) -> bool;
}

pub struct AcceptAll;
pub struct RejectAll;

impl NoveltyFilter for AcceptAll {
    fn accepts(&self, _: &[f64]) -> bool {
        true
    }
}

impl NoveltyFilter for RejectAll {
    fn accepts(&self, _: &[f64]) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcsvmModel {
    /// Points with a positive coefficient, in training order.
    pub support: Tensor,
    pub support_index: Vec<usize>,
    pub alpha_support: Vec<f64>,
    /// Coefficients of every training point.
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub nu: f64,
    pub upper: f64,
    pub objective: f64,
    pub iterations: usize,
}

struct KernelRows<'a> {
    points: &'a Tensor,
    gamma: f64,
    full: Option<Vec<f64>>,
}

impl<'a> KernelRows<'a> {
    fn new(points: &'a Tensor, gamma: f64) -> Self {
        let n = points.rows();
        let full = (n <= CACHE_LIMIT).then(|| {
            let mut k = vec![0.0; n * n];
            for i in 0..n {
                k[i * n + i] = 1.0;
                for j in 0..i {
                    let v = rbf(points.row(i), points.row(j), gamma);
                    k[i * n + j] = v;
                    k[j * n + i] = v;
                }
            }
            k
        });
        Self { points, gamma, full }
    }

    fn row(&self, i: usize, out: &mut [f64]) {
        let n = self.points.rows();
        match &self.full {
            Some(k) => out.copy_from_slice(&k[i * n..(i + 1) * n]),
            None => {
                let xi = self.points.row(i);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = rbf(xi, self.points.row(j), self.gamma);
                }
            }
        }
    }

    fn diag(&self, _i: usize) -> f64 {
        1.0
    }
}

/// Fits the one-class SVM with box `1/(nu n)` and kernel width `gamma`.
pub fn fit_ocsvm(points: &Tensor, nu: f64, gamma: f64) -> Result<OcsvmModel> {
    let n = points.rows();
    if n < 2 {
        return Err(invalid(format!("one-class SVM needs at least 2 points, got {n}")));
    }
    if !(nu > 0.0 && nu < 1.0) {
        return Err(invalid(format!("nu must lie in (0, 1), got {nu}")));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(invalid(format!("gamma must be positive, got {gamma}")));
    }
    if !points.is_finite() {
        return Err(invalid("one-class SVM input contains non-finite values"));
    }
    let upper = 1.0 / (nu * n as f64);
    if upper * (n as f64) < 1.0 {
        return Err(invalid("box constraint leaves no feasible point"));
    }

    // start from the first floor(1/upper) points at the bound
    let mut alpha = vec![0.0; n];
    let mut remaining: f64 = 1.0;
    for a in alpha.iter_mut() {
        let take = remaining.min(upper);
        *a = take;
        remaining -= take;
        if remaining <= 0.0 {
            break;
        }
    }

    let kernel = KernelRows::new(points, gamma);
    let mut grad = vec![0.0; n];
    let mut row = vec![0.0; n];
    for (i, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            kernel.row(i, &mut row);
            for (g, k) in grad.iter_mut().zip(&row) {
                *g += a * k;
            }
        }
    }

    let mut row_j = vec![0.0; n];
    let mut iterations = 0;
    loop {
        // i: may grow, smallest gradient; j: may shrink, largest gradient
        let mut i_best = None;
        let mut j_best = None;
        for k in 0..n {
            if alpha[k] < upper && i_best.is_none_or(|i: usize| grad[k] < grad[i]) {
                i_best = Some(k);
            }
            if alpha[k] > 0.0 && j_best.is_none_or(|j: usize| grad[k] > grad[j]) {
                j_best = Some(k);
            }
        }
        let (Some(i), Some(j)) = (i_best, j_best) else { break };
        let violation = grad[j] - grad[i];
        if violation <= SMO_TOLERANCE {
            break;
        }
        if iterations >= SMO_MAX_ITER {
            return Err(Error::NoConvergence {
                iterations,
                residual: violation,
            });
        }
        iterations += 1;
        kernel.row(i, &mut row);
        kernel.row(j, &mut row_j);
        let eta = (kernel.diag(i) + kernel.diag(j) - 2.0 * row[j]).max(1e-12);
        let step = (violation / eta).min(upper - alpha[i]).min(alpha[j]);
        alpha[i] += step;
        alpha[j] -= step;
        if upper - alpha[i] < 1e-15 * upper {
            alpha[i] = upper;
        }
        if alpha[j] < 1e-15 * upper {
            alpha[j] = 0.0;
        }
        for ((g, ki), kj) in grad.iter_mut().zip(&row).zip(&row_j) {
            *g += step * (ki - kj);
        }
    }

    let support_index: Vec<usize> = (0..n).filter(|&i| alpha[i] > 0.0).collect();
    let support = points.select_rows(&support_index);
    let alpha_support: Vec<f64> = support_index.iter().map(|&i| alpha[i]).collect();
    let mut model = OcsvmModel {
        support,
        support_index,
        alpha_support,
        alpha,
        rho: 0.0,
        gamma,
        nu,
        upper,
        objective: 0.0,
        iterations,
    };

    // recompute decision sums with the prediction routine so that rho and
    // later decision values share the same rounding
    let sums: Vec<f64> = (0..n).map(|i| model.decision_sum(points.row(i))).collect();
    model.objective = 0.5 * model.alpha.iter().zip(&sums).map(|(a, s)| a * s).sum::<f64>();
    // Margin vectors agree on their decision sum only up to the solver
    // tolerance; the smallest one keeps all of them on the inlier side.
    let free = (0..n).filter(|&i| model.alpha[i] > FREE_MARGIN && model.alpha[i] < upper - FREE_MARGIN);
    let candidates: Vec<usize> = if free.clone().next().is_some() {
        free.collect()
    } else {
        model.support_index.clone()
    };
    model.rho = candidates.iter().map(|&i| sums[i]).fold(f64::INFINITY, f64::min);
    if !model.rho.is_finite() {
        return Err(Error::NonFinite { op: "ocsvm rho", node: 0 });
    }
    Ok(model)
}

impl OcsvmModel {
    /// `sum_i a_i k(x_i, x)`.
    pub fn decision_sum(&self, x: &[f64]) -> f64 {
        self.support
            .iter_rows()
            .zip(&self.alpha_support)
            .map(|(s, a)| a * rbf(s, x, self.gamma))
            .sum()
    }

    pub fn decision_value(&self, x: &[f64]) -> f64 {
        self.decision_sum(x) - self.rho
    }

    /// `(decision value >= 0, decision value)`.
    pub fn is_inlier(&self, x: &[f64]) -> (bool, f64) {
        let v = self.decision_value(x);
        (v >= 0.0, v)
    }

    pub fn support_count(&self) -> usize {
        self.support_index.len()
    }
}

impl NoveltyFilter for OcsvmModel {
    fn accepts(&self, x: &[f64]) -> bool {
        self.is_inlier(x).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn two_points_split_evenly() {
        let p = Tensor::from_rows(&[[0.0, 0.0], [1.0, 2.0]]).unwrap();
        let m = fit_ocsvm(&p, 0.1, 2.0).unwrap();
        assert!((m.alpha[0] - 0.5).abs() < 1e-12 && (m.alpha[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_points_are_all_inliers() {
        let p = Tensor::from_rows(&[[0.3, 1.0]; 7]).unwrap();
        let m = fit_ocsvm(&p, 0.1, 2.0).unwrap();
        for r in p.iter_rows() {
            assert!(m.is_inlier(r).0);
        }
    }

    #[test]
    fn dual_feasibility() {
        for seed in 0..5 {
            let p = random_points(seed, 60, 3);
            let m = fit_ocsvm(&p, 0.1, 3.0).unwrap();
            assert!((m.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            assert!(m.alpha.iter().all(|&a| a >= -1e-10 && a <= m.upper + 1e-10));
        }
    }

    #[test]
    fn margin_vectors_sit_on_the_boundary() {
        let p = random_points(7, 80, 2);
        let m = fit_ocsvm(&p, 0.1, 2.0).unwrap();
        let mut checked = 0;
        for (i, &a) in m.alpha.iter().enumerate() {
            if a > FREE_MARGIN && a < m.upper - FREE_MARGIN {
                assert!(m.decision_value(p.row(i)).abs() < 1e-6);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn far_points_are_outliers() {
        let p = random_points(8, 30, 2);
        let m = fit_ocsvm(&p, 0.1, 2.0).unwrap();
        let (flag, v) = m.is_inlier(&[1e3, -1e3]);
        assert!(!flag);
        assert!((v + m.rho).abs() < 1e-12);
    }

    #[test]
    fn nu_property() {
        for seed in 0..10 {
            let n = 50;
            let p = random_points(100 + seed, n, 2);
            let m = fit_ocsvm(&p, 0.1, 2.0).unwrap();
            let outliers = p.iter_rows().filter(|r| !m.is_inlier(r).0).count();
            assert!(outliers as f64 / n as f64 <= 0.1 + 2.0 / n as f64);
            assert!(m.support_count() as f64 / n as f64 >= 0.1 - 2.0 / n as f64);
        }
    }

    #[test]
    fn translation_keeps_flags() {
        let p = random_points(9, 40, 2);
        let shifted = p.map(|x| x + 5.0);
        let a = fit_ocsvm(&p, 0.1, 2.0).unwrap();
        let b = fit_ocsvm(&shifted, 0.1, 2.0).unwrap();
        let probes = random_points(10, 50, 2);
        for r in probes.iter_rows() {
            let s: Vec<f64> = r.iter().map(|x| x + 5.0).collect();
            let (fa, va) = a.is_inlier(r);
            let (fb, _) = b.is_inlier(&s);
            if va.abs() > 1e-6 {
                assert_eq!(fa, fb);
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let p = random_points(1, 5, 2);
        assert!(fit_ocsvm(&p.select_rows(&[0]), 0.1, 1.0).is_err());
        assert!(fit_ocsvm(&p, 0.0, 1.0).is_err());
        assert!(fit_ocsvm(&p, 1.0, 1.0).is_err());
        assert!(fit_ocsvm(&p, 0.1, 0.0).is_err());
    }

    #[test]
    fn uncached_kernel_matches_cached() {
        let p = random_points(11, 20, 2);
        let k = KernelRows::new(&p, 2.0);
        let u = KernelRows { points: &p, gamma: 2.0, full: None };
        let (mut a, mut b) = (vec![0.0; 20], vec![0.0; 20]);
        k.row(5, &mut a);
        u.row(5, &mut b);
        assert_eq!(a, b);
    }
}

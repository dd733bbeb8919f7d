//! V- and U-statistics of the recombination risk.
//!
//! With ICs `s_1..s_n` of the target rows and a point loss `l(s)` (the loss
//! of a fixed predictor at `f(s)`), the augmented-data risk is the
//! V-statistic `(1/n^D) sum_{i in [n]^D} l(s_{i_1}^(1), ..., s_{i_D}^(D))`.
//! It splits into U-statistics of degrees `1..D`:
//! `V = sum_j w_j U^(j)(psi_j)`, with `w_j = surj(D, j) C(n, j) / n^D` and
//! `psi_j` the average of the symmetrized kernel over all surjections
//! `[D] -> [j]` of argument slots.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const V_STATISTIC_CAP: usize = 10_000_000;
pub const DECOMPOSITION_CAP: usize = 1_000_000;
pub const ENUMERATION_CAP: usize = 10_000_000;

/// A `degree`-variate function of sample rows.
pub trait Kernel: Sync {
    fn degree(&self) -> usize;
    fn eval(&self, args: &[&[f64]]) -> f64;
}

/// Wraps a closure over `degree` rows.
pub struct FnKernel<F> {
    degree: usize,
    f: F,
}

impl<F> FnKernel<F>
where
    F: Fn(&[&[f64]]) -> f64 + Sync,
{
    pub fn new(degree: usize, f: F) -> Self {
        Self { degree, f }
    }
}

impl<F> Kernel for FnKernel<F>
where
    F: Fn(&[&[f64]]) -> f64 + Sync,
{
    fn degree(&self) -> usize {
        self.degree
    }

    fn eval(&self, args: &[&[f64]]) -> f64 {
        (self.f)(args)
    }
}

/// `(args[0][0], args[1][1], ..., args[D-1][D-1])`.
pub fn cross_pick(args: &[&[f64]]) -> Vec<f64> {
    args.iter().enumerate().map(|(d, a)| a[d]).collect()
}

fn permutations(d: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..d).collect();
    fn rec(k: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == p.len() {
            out.push(p.clone());
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            rec(k + 1, p, out);
            p.swap(k, i);
        }
    }
    rec(0, &mut p, &mut out);
    out
}

/// Average of a base kernel over all `D!` orderings of its arguments. The
/// `D!` values are sorted before summing, so the result is bit-identical
/// under any permutation of the arguments.
pub struct SymmetrizedKernel<K> {
    base: K,
    perms: Vec<Vec<usize>>,
}

impl<K: Kernel> SymmetrizedKernel<K> {
    pub fn new(base: K) -> Self {
        let perms = permutations(base.degree());
        Self { base, perms }
    }
}

impl<K: Kernel> Kernel for SymmetrizedKernel<K> {
    fn degree(&self) -> usize {
        self.base.degree()
    }

    fn eval(&self, args: &[&[f64]]) -> f64 {
        let mut values: Vec<f64> = self
            .perms
            .iter()
            .map(|p| {
                let permuted: Vec<&[f64]> = p.iter().map(|&i| args[i]).collect();
                self.base.eval(&permuted)
            })
            .collect();
        values.sort_by(f64::total_cmp);
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Symmetrized recombination kernel `l~(s_1..s_D)` built from a point loss.
pub fn recombination_kernel<L>(dim: usize, point_loss: L) -> SymmetrizedKernel<FnKernel<impl Fn(&[&[f64]]) -> f64 + Sync>>
where
    L: Fn(&[f64]) -> f64 + Sync,
{
    SymmetrizedKernel::new(FnKernel::new(dim, move |args: &[&[f64]]| point_loss(&cross_pick(args))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskKind {
    Empirical,
    VStatistic,
    GeneralizedU,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub value: f64,
    pub kind: RiskKind,
    pub n: usize,
    pub dim: usize,
}

fn power_checked(n: usize, d: usize, cap: usize) -> Result<usize> {
    u32::try_from(d)
        .ok()
        .and_then(|d| n.checked_pow(d))
        .filter(|&t| t <= cap)
        .ok_or_else(|| Error::TooLarge(format!("{n}^{d} tuples exceed the cap of {cap}")))
}

/// Calls `visit` with every tuple of `[n]^d` in lexicographic order.
fn for_each_tuple(n: usize, d: usize, mut visit: impl FnMut(&[usize])) {
    if n == 0 {
        return;
    }
    let mut t = vec![0usize; d];
    loop {
        visit(&t);
        let mut k = d;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            t[k] += 1;
            if t[k] < n {
                break;
            }
            t[k] = 0;
        }
    }
}

/// Exact average of `point_loss` over all `n^D` dimension-wise recombinations
/// of the IC rows.
pub fn v_statistic_risk<L>(point_loss: L, ics: &Tensor) -> Result<RiskEstimate>
where
    L: Fn(&[f64]) -> f64,
{
    let (n, d) = (ics.rows(), ics.cols());
    if n == 0 {
        return Err(invalid("V-statistic of an empty sample"));
    }
    let total = power_checked(n, d, V_STATISTIC_CAP)?;
    let mut sum = 0.0;
    let mut s = vec![0.0; d];
    for_each_tuple(n, d, |t| {
        for (k, &i) in t.iter().enumerate() {
            s[k] = ics.get(i, k);
        }
        sum += point_loss(&s);
    });
    Ok(RiskEstimate {
        value: sum / total as f64,
        kind: RiskKind::VStatistic,
        n,
        dim: d,
    })
}

/// Plain average of `point_loss` over the IC rows themselves.
pub fn empirical_risk<L>(point_loss: L, ics: &Tensor) -> Result<RiskEstimate>
where
    L: Fn(&[f64]) -> f64,
{
    let n = ics.rows();
    if n == 0 {
        return Err(invalid("empirical risk of an empty sample"));
    }
    let value = ics.iter_rows().map(point_loss).sum::<f64>() / n as f64;
    Ok(RiskEstimate {
        value,
        kind: RiskKind::Empirical,
        n,
        dim: ics.cols(),
    })
}

/// Average of a kernel over all `n^degree` index tuples (with replacement).
pub fn v_statistic(kernel: &dyn Kernel, sample: &Tensor, cap: usize) -> Result<f64> {
    let n = sample.rows();
    let d = kernel.degree();
    if n == 0 {
        return Err(invalid("V-statistic of an empty sample"));
    }
    let total = power_checked(n, d, cap)?;
    let mut sum = 0.0;
    for_each_tuple(n, d, |t| {
        let args: Vec<&[f64]> = t.iter().map(|&i| sample.row(i)).collect();
        sum += kernel.eval(&args);
    });
    Ok(sum / total as f64)
}

fn for_each_combination(n: usize, j: usize, mut visit: impl FnMut(&[usize])) {
    if j > n {
        return;
    }
    let mut c: Vec<usize> = (0..j).collect();
    loop {
        visit(&c);
        let mut k = j;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            if c[k] < n - j + k {
                break;
            }
            if k == 0 {
                return;
            }
        }
        c[k] += 1;
        for m in k + 1..j {
            c[m] = c[m - 1] + 1;
        }
    }
}

/// Average of a symmetric degree-`j` kernel over all `j`-subsets of the rows.
pub fn u_statistic(kernel: &dyn Kernel, sample: &Tensor, j: usize) -> Result<f64> {
    let n = sample.rows();
    if kernel.degree() != j {
        return Err(invalid(format!("kernel has degree {}, expected {j}", kernel.degree())));
    }
    if j == 0 {
        return Err(invalid("U-statistic of degree 0"));
    }
    if n < j {
        return Err(invalid(format!("U-statistic of degree {j} needs at least {j} rows, got {n}")));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for_each_combination(n, j, |c| {
        let args: Vec<&[f64]> = c.iter().map(|&i| sample.row(i)).collect();
        sum += kernel.eval(&args);
        count += 1;
    });
    Ok(sum / count as f64)
}

fn binomial(n: usize, k: usize) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let k = k.min(n - k);
    let mut r = BigInt::one();
    for i in 0..k {
        r = r * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    r
}

/// Number of surjections `[d] -> [j]`, by inclusion-exclusion.
pub fn surjection_count(d: usize, j: usize) -> BigInt {
    let mut total = BigInt::zero();
    for i in 0..=j {
        let term = binomial(j, i) * num_traits::pow(BigInt::from(j - i), d);
        if i % 2 == 0 {
            total += term;
        } else {
            total -= term;
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionWeights {
    pub n: usize,
    pub dim: usize,
    /// `w_1..w_D` (index `j - 1`).
    pub exact: Vec<BigRational>,
}

impl DecompositionWeights {
    pub fn as_f64(&self) -> Vec<f64> {
        self.exact.iter().map(|w| w.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn sum(&self) -> BigRational {
        self.exact.iter().fold(BigRational::zero(), |a, b| a + b)
    }
}

/// `w_j = surj(D, j) C(n, j) / n^D` for `j = 1..D`, exactly.
pub fn decomposition_weights(n: usize, dim: usize) -> Result<DecompositionWeights> {
    if dim == 0 {
        return Err(invalid("dimension must be >= 1"));
    }
    if n < dim {
        return Err(invalid(format!("decomposition needs n >= D, got n = {n}, D = {dim}")));
    }
    let denom = num_traits::pow(BigInt::from(n), dim);
    let exact = (1..=dim)
        .map(|j| BigRational::new(surjection_count(dim, j) * binomial(n, j), denom.clone()))
        .collect();
    Ok(DecompositionWeights { n, dim, exact })
}

fn surjections(d: usize, j: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for_each_tuple(j, d, |t| {
        let mut hit = vec![false; j];
        t.iter().for_each(|&k| hit[k] = true);
        if hit.iter().all(|&h| h) {
            out.push(t.to_vec());
        }
    });
    out
}

/// `psi_j(s_1..s_j)`: the mean of a degree-`D` kernel over all surjective
/// assignments of its `D` slots to the `j` supplied rows.
pub struct ProjectedKernel<'a> {
    kernel: &'a dyn Kernel,
    j: usize,
    maps: Vec<Vec<usize>>,
}

impl<'a> ProjectedKernel<'a> {
    pub fn map_count(&self) -> usize {
        self.maps.len()
    }
}

impl Kernel for ProjectedKernel<'_> {
    fn degree(&self) -> usize {
        self.j
    }

    fn eval(&self, args: &[&[f64]]) -> f64 {
        let total: f64 = self
            .maps
            .iter()
            .map(|tau| {
                let slots: Vec<&[f64]> = tau.iter().map(|&k| args[k]).collect();
                self.kernel.eval(&slots)
            })
            .sum();
        total / self.maps.len() as f64
    }
}

pub fn v_to_u_kernels(kernel: &dyn Kernel, j: usize) -> Result<ProjectedKernel<'_>> {
    let d = kernel.degree();
    if j == 0 || j > d {
        return Err(invalid(format!("projection degree {j} outside 1..={d}")));
    }
    Ok(ProjectedKernel {
        kernel,
        j,
        maps: surjections(d, j),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub n: usize,
    pub dim: usize,
    pub v_statistic: f64,
    pub u_statistics: Vec<f64>,
    pub weights: Vec<f64>,
    pub recombined: f64,
    pub residual: f64,
}

/// `|V - sum_j w_j U^(j)(psi_j)|` for a symmetric degree-`D` kernel.
pub fn verify_v_decomposition(kernel: &dyn Kernel, sample: &Tensor) -> Result<DecompositionReport> {
    let weights = decomposition_weights(sample.rows(), kernel.degree())?.as_f64();
    verify_with_weights(kernel, sample, &weights)
}

/// Same check with caller-supplied weights (used as a negative control).
pub fn verify_with_weights(kernel: &dyn Kernel, sample: &Tensor, weights: &[f64]) -> Result<DecompositionReport> {
    let (n, d) = (sample.rows(), kernel.degree());
    if n < d {
        return Err(invalid(format!("decomposition needs n >= D, got n = {n}, D = {d}")));
    }
    if weights.len() != d {
        return Err(invalid(format!("{} weights for degree {d}", weights.len())));
    }
    let v = v_statistic(kernel, sample, DECOMPOSITION_CAP)?;
    let u_statistics = (1..=d)
        .map(|j| u_statistic(&v_to_u_kernels(kernel, j)?, sample, j))
        .collect::<Result<Vec<_>>>()?;
    let recombined: f64 = weights.iter().zip(&u_statistics).map(|(w, u)| w * u).sum();
    Ok(DecompositionReport {
        n,
        dim: d,
        v_statistic: v,
        u_statistics,
        weights: weights.to_vec(),
        recombined,
        residual: (v - recombined).abs(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub n: usize,
    pub dim: usize,
    pub reps: usize,
    pub reference_draws: usize,
    pub reference_risk: f64,
    pub reference_stderr: f64,
    pub mean_v: f64,
    pub mean_empirical: f64,
    pub stderr_mean_v: f64,
    pub stderr_mean_empirical: f64,
    pub var_v: f64,
    pub var_empirical: f64,
    pub stderr_var_v: f64,
    pub stderr_var_empirical: f64,
    /// `sqrt(se_var_v^2 + se_var_empirical^2)`.
    pub combined_stderr: f64,
    /// Standard error of the per-replicate difference of squared deviations.
    pub paired_stderr: f64,
}

impl McReport {
    pub fn variance_gap(&self) -> f64 {
        self.var_empirical - self.var_v
    }

    /// Whether both means sit within `k` standard errors of the reference.
    pub fn means_within(&self, k: f64) -> bool {
        let ok = |m: f64, se: f64| (m - self.reference_risk).abs() < k * (se * se + self.reference_stderr.powi(2)).sqrt();
        ok(self.mean_v, self.stderr_mean_v) && ok(self.mean_empirical, self.stderr_mean_empirical)
    }
}

fn moments(x: &[f64]) -> (f64, f64, f64, f64) {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / m;
    let se_mean = (var / m).sqrt();
    // large-sample standard error of the sample variance
    let se_var = ((m4 - var * var).max(0.0) / m).sqrt();
    (mean, var, se_mean, se_var)
}

/// Monte Carlo comparison of the recombination V-statistic and the plain
/// empirical mean as estimators of `E l(S)`.
///
/// `sample_ics` draws one IC vector; `batch_loss` maps an IC matrix to the
/// point loss of each row (the mixing and the predictor live inside it).
pub fn mc_umvue_check<S, L>(
    sample_ics: S,
    batch_loss: L,
    n: usize,
    reps: usize,
    reference_draws: usize,
    master_seed: u64,
) -> Result<McReport>
where
    S: Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync,
    L: Fn(&Tensor) -> Result<Vec<f64>> + Sync,
{
    if n == 0 || reps < 2 || reference_draws < 2 {
        return Err(invalid("Monte Carlo check needs n >= 1, reps >= 2, reference_draws >= 2"));
    }
    let dim = sample_ics(&mut seed::rng(master_seed, seed::STREAM_MC, u64::MAX)).len();
    let total = power_checked(n, dim, V_STATISTIC_CAP)?;

    let per_rep: Vec<(f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(master_seed, seed::STREAM_MC, r as u64);
            let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_ics(&mut rng)).collect();
            let mut s = Vec::with_capacity(total * dim);
            let mut diag = Vec::with_capacity(n);
            let mut row = 0;
            for_each_tuple(n, dim, |t| {
                s.extend(t.iter().enumerate().map(|(k, &i)| draws[i][k]));
                if t.windows(2).all(|w| w[0] == w[1]) {
                    diag.push(row);
                }
                row += 1;
            });
            let losses = batch_loss(&Tensor::matrix(total, dim, s)?)?;
            let v = losses.iter().sum::<f64>() / total as f64;
            let e = diag.iter().map(|&k| losses[k]).sum::<f64>() / n as f64;
            Ok((v, e))
        })
        .collect::<Result<_>>()?;

    const CHUNK: usize = 10_000;
    let chunks = reference_draws.div_ceil(CHUNK);
    let ref_losses: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let m = CHUNK.min(reference_draws - c * CHUNK);
            let mut rng = seed::rng(master_seed, seed::STREAM_MC ^ 0xffff, c as u64);
            let data: Vec<f64> = (0..m).flat_map(|_| sample_ics(&mut rng)).collect();
            batch_loss(&Tensor::matrix(m, dim, data)?)
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = ref_losses.into_iter().flatten().collect();
    let (reference_risk, _, reference_stderr, _) = moments(&flat);

    let v: Vec<f64> = per_rep.iter().map(|p| p.0).collect();
    let e: Vec<f64> = per_rep.iter().map(|p| p.1).collect();
    let (mean_v, var_v, stderr_mean_v, stderr_var_v) = moments(&v);
    let (mean_empirical, var_empirical, stderr_mean_empirical, stderr_var_empirical) = moments(&e);
    let diff: Vec<f64> = v
        .iter()
        .zip(&e)
        .map(|(a, b)| (b - mean_empirical).powi(2) - (a - mean_v).powi(2))
        .collect();
    let (_, _, paired_stderr, _) = moments(&diff);
    Ok(McReport {
        n,
        dim,
        reps,
        reference_draws,
        reference_risk,
        reference_stderr,
        mean_v,
        mean_empirical,
        stderr_mean_v,
        stderr_mean_empirical,
        var_v,
        var_empirical,
        stderr_var_v,
        stderr_var_empirical,
        combined_stderr: (stderr_var_v.powi(2) + stderr_var_empirical.powi(2)).sqrt(),
        paired_stderr,
    })
}

/// Finite-support marginal of one IC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMarginal {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DiscreteMarginal {
    pub fn new(values: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.len() != probs.len() {
            return Err(invalid("support and probabilities must be nonempty and equally long"));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(invalid("probabilities must be nonnegative and sum to 1"));
        }
        Ok(Self { values, probs })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectationReport {
    pub n: usize,
    pub dim: usize,
    pub outcomes: usize,
    pub expected_v: f64,
    pub risk: f64,
    pub difference: f64,
}

/// `E[V-statistic]` by enumerating every sample of size `n` from the
/// product distribution, against `E l(S)`.
pub fn exact_expectation_check<L>(marginals: &[DiscreteMarginal], point_loss: L, n: usize) -> Result<ExpectationReport>
where
    L: Fn(&[f64]) -> f64,
{
    let d = marginals.len();
    if d == 0 || n == 0 {
        return Err(invalid("need at least one dimension and one sample"));
    }
    // all support points of a single draw, with their probabilities
    let mut points: Vec<(Vec<f64>, f64)> = Vec::new();
    let sizes: Vec<usize> = marginals.iter().map(|m| m.values.len()).collect();
    let per_draw = sizes.iter().try_fold(1usize, |a, &s| a.checked_mul(s));
    let outcomes = per_draw
        .and_then(|p| u32::try_from(n).ok().and_then(|n| p.checked_pow(n)))
        .filter(|&o| o <= ENUMERATION_CAP)
        .ok_or_else(|| Error::TooLarge(format!("sample enumeration exceeds {ENUMERATION_CAP} outcomes")))?;
    let mut idx = vec![0usize; d];
    loop {
        let s: Vec<f64> = idx.iter().zip(marginals).map(|(&i, m)| m.values[i]).collect();
        let p: f64 = idx.iter().zip(marginals).map(|(&i, m)| m.probs[i]).product();
        points.push((s, p));
        let mut k = d;
        let mut done = true;
        while k > 0 {
            k -= 1;
            idx[k] += 1;
            if idx[k] < sizes[k] {
                done = false;
                break;
            }
            idx[k] = 0;
        }
        if done {
            break;
        }
    }
    let risk: f64 = points.iter().map(|(s, p)| p * point_loss(s)).sum();

    let mut expected_v = 0.0;
    let mut sample = Tensor::zeros(n, d);
    for_each_tuple(points.len(), n, |choice| {
        let mut prob = 1.0;
        for (row, &c) in choice.iter().enumerate() {
            sample.row_mut(row).copy_from_slice(&points[c].0);
            prob *= points[c].1;
        }
        if prob > 0.0 {
            let v = v_statistic_risk(&point_loss, &sample).expect("within cap").value;
            expected_v += prob * v;
        }
    });
    Ok(ExpectationReport {
        n,
        dim: d,
        outcomes,
        expected_v,
        risk,
        difference: (expected_v - risk).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn r(n: u64, d: u64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn single_tuple_and_constant_loss() {
        let ics = Tensor::from_rows(&[[0.5, -1.0]]).unwrap();
        let v = v_statistic_risk(|s| s[0] * 10.0 + s[1], &ics).unwrap();
        assert_eq!(v.value, 4.0);
        assert_eq!(v.kind, RiskKind::VStatistic);
        let ics = Tensor::from_rows(&[[0.5, -1.0], [2.0, 3.0], [1.0, 1.0]]).unwrap();
        assert_eq!(v_statistic_risk(|_| 0.25, &ics).unwrap().value, 0.25);
    }

    #[test]
    fn v_statistic_size_cap() {
        let ics = Tensor::zeros(50, 4);
        assert!(v_statistic_risk(|_| 0.0, &ics).is_ok());
        let ics = Tensor::zeros(60, 4);
        assert!(v_statistic_risk(|_| 0.0, &ics).is_err());
    }

    #[test]
    fn u_statistic_examples() {
        let sample = Tensor::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let mean = FnKernel::new(1, |a: &[&[f64]]| a[0][0]);
        assert_eq!(u_statistic(&mean, &sample, 1).unwrap(), 2.0);
        let var = FnKernel::new(2, |a: &[&[f64]]| (a[0][0] - a[1][0]).powi(2) / 2.0);
        assert_eq!(u_statistic(&var, &sample, 2).unwrap(), 1.0);
        let whole = FnKernel::new(3, |a: &[&[f64]]| a[0][0] * a[1][0] * a[2][0]);
        assert_eq!(u_statistic(&whole, &sample, 3).unwrap(), 6.0);
        let four = FnKernel::new(4, |_: &[&[f64]]| 0.0);
        assert!(u_statistic(&four, &sample, 4).is_err());
    }

    #[test]
    fn weights_examples() {
        let w = decomposition_weights(3, 2).unwrap();
        assert_eq!(w.exact, vec![r(1, 3), r(2, 3)]);
        assert_eq!(decomposition_weights(7, 1).unwrap().exact, vec![r(1, 1)]);
        assert!(decomposition_weights(2, 3).is_err());
        // w_D = n (n-1) ... (n-D+1) / n^D
        let w = decomposition_weights(10, 4).unwrap();
        assert_eq!(w.exact[3], r(10 * 9 * 8 * 7, 10_000));
    }

    #[test]
    fn weights_sum_to_one_exactly() {
        for n in 1..=50 {
            for d in 1..=n.min(6) {
                assert!(decomposition_weights(n, d).unwrap().sum().is_one(), "n={n} d={d}");
            }
        }
    }

    #[test]
    fn surjection_counts() {
        assert_eq!(surjection_count(3, 2), BigInt::from(6));
        assert_eq!(surjection_count(4, 4), BigInt::from(24));
        assert_eq!(surjection_count(5, 1), BigInt::from(1));
        for (d, j) in [(4, 2), (5, 3), (6, 4)] {
            assert_eq!(surjection_count(d, j), BigInt::from(surjections(d, j).len()));
        }
    }

    #[test]
    fn projections() {
        let additive = FnKernel::new(2, |a: &[&[f64]]| a[0][0] + a[1][0]);
        let one = v_to_u_kernels(&additive, 1).unwrap();
        assert_eq!(one.map_count(), 1);
        assert_eq!(one.eval(&[&[1.5]]), 3.0);
        let base = recombination_kernel(3, |s: &[f64]| s[0] * s[1] - s[2].sin());
        let full = v_to_u_kernels(&base, 3).unwrap();
        let (a, b, c) = ([0.1, 0.2, 0.3], [1.0, -2.0, 0.5], [0.7, 0.0, 2.0]);
        let args: [&[f64]; 3] = [&a, &b, &c];
        assert!((full.eval(&args) - base.eval(&args)).abs() < 1e-15);
        assert!(v_to_u_kernels(&base, 4).is_err());
    }

    #[test]
    fn decomposition_residual_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (n, d) in [(3, 2), (5, 3)] {
            let coef: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let kernel = recombination_kernel(d, move |s: &[f64]| {
                s.iter().enumerate().map(|(k, x)| coef[k] * x + coef[d + k] * x * x).sum::<f64>().tanh()
            });
            let sample = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let rep = verify_v_decomposition(&kernel, &sample).unwrap();
            assert!(rep.residual < 1e-10, "{rep:?}");
        }
    }

    #[test]
    fn constant_kernel_decomposes_exactly() {
        let kernel = FnKernel::new(2, |_: &[&[f64]]| 0.75);
        let sample = Tensor::from_rows(&[[1.0], [2.0], [4.0]]).unwrap();
        let rep = verify_v_decomposition(&kernel, &sample).unwrap();
        assert_eq!(rep.v_statistic, 0.75);
        assert_eq!(rep.recombined, 0.75);
    }

    #[test]
    fn wrong_weights_are_detected() {
        let kernel = recombination_kernel(2, |s: &[f64]| (s[0] - s[1]).powi(2));
        let sample = Tensor::from_rows(&[[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]]).unwrap();
        let rep = verify_with_weights(&kernel, &sample, &[0.5, 0.5]).unwrap();
        assert!(rep.residual > 1e-3);
    }

    #[test]
    fn exact_expectation_binary() {
        let m = DiscreteMarginal::new(vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap();
        let rep = exact_expectation_check(&[m.clone(), m.clone()], |s| (s[0] + 0.3 * s[1]).powi(2), 2).unwrap();
        assert!(rep.difference < 1e-12);
        assert_eq!(rep.outcomes, 16);
        let skew = DiscreteMarginal::new(vec![-1.0, 1.0], vec![0.3, 0.7]).unwrap();
        let rep = exact_expectation_check(&[skew.clone(), m], |s| (s[0] * s[1] + s[0]).powi(2), 2).unwrap();
        assert!(rep.difference < 1e-12);
        let rep = exact_expectation_check(&[skew.clone(), skew], |s| s[0] - 2.0 * s[1], 1).unwrap();
        assert!(rep.difference < 1e-12);
    }

    #[test]
    fn degenerate_loss_has_zero_variance() {
        let rep = mc_umvue_check(
            |rng| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)],
            |s: &Tensor| Ok(vec![0.5; s.rows()]),
            4,
            50,
            100,
            3,
        )
        .unwrap();
        assert_eq!(rep.var_v, 0.0);
        assert_eq!(rep.var_empirical, 0.0);
        assert_eq!(rep.reference_risk, 0.5);
    }

    #[test]
    fn combination_enumeration() {
        let mut seen = Vec::new();
        for_each_combination(4, 2, |c| seen.push(c.to_vec()));
        assert_eq!(seen, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        let mut count = 0;
        for_each_combination(3, 3, |_| count += 1);
        assert_eq!(count, 1);
    }

    proptest! {
        #[test]
        fn symmetrization_is_bit_identical(
            vals in proptest::collection::vec(-3.0f64..3.0, 9),
            perm_seed in 0u64..1000,
        ) {
            let kernel = recombination_kernel(3, |s: &[f64]| (s[0] * 1.3 - s[1]).exp() * s[2] + s[1] * 0.1);
            let rows: Vec<&[f64]> = vals.chunks(3).collect();
            let mut order: Vec<usize> = (0..3).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let permuted: Vec<&[f64]> = order.iter().map(|&i| rows[i]).collect();
            prop_assert_eq!(kernel.eval(&rows).to_bits(), kernel.eval(&permuted).to_bits());
        }
    }
}

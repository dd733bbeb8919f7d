//! Synthetic domains with known ICs and mixing, the variability rank
//! diagnostic, and IC recovery scoring.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{invalid, Error, Result};
use crate::flow::{FlowConfig, FlowParams};
use crate::linalg::{random_orthogonal, singular_values};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IcKind {
    Gaussian,
    Laplace,
}

/// One IC marginal. For Laplace, `scale` is the diversity `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub kind: IcKind,
    pub loc: f64,
    pub scale: f64,
}

impl Marginal {
    pub fn gaussian(loc: f64, scale: f64) -> Self {
        Self {
            kind: IcKind::Gaussian,
            loc,
            scale,
        }
    }

    pub fn laplace(loc: f64, scale: f64) -> Self {
        Self {
            kind: IcKind::Laplace,
            loc,
            scale,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            IcKind::Gaussian => {
                let z: f64 = rng.sample(StandardNormal);
                self.loc + self.scale * z
            }
            IcKind::Laplace => {
                // inverse CDF on u in (-1/2, 1/2)
                let u: f64 = rng.random_range(-0.5..0.5);
                self.loc - self.scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        }
    }

    /// First and second derivatives of `log q` at `z`.
    pub fn log_density_derivatives(&self, z: f64) -> Result<(f64, f64)> {
        match self.kind {
            IcKind::Gaussian => {
                let v = self.scale * self.scale;
                Ok((-(z - self.loc) / v, -1.0 / v))
            }
            IcKind::Laplace => {
                if z == self.loc {
                    return Err(invalid(format!("Laplace log-density is not differentiable at its location {z}")));
                }
                Ok((-(z - self.loc).signum() / self.scale, 0.0))
            }
        }
    }
}

/// `domains[k][d]` is the marginal of IC `d` in domain `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcFamily {
    pub domains: Vec<Vec<Marginal>>,
}

impl IcFamily {
    pub fn new(domains: Vec<Vec<Marginal>>) -> Result<Self> {
        let Some(first) = domains.first() else {
            return Err(invalid("IC family needs at least one domain"));
        };
        let d = first.len();
        if d == 0 {
            return Err(invalid("IC family needs at least one dimension"));
        }
        for (k, dom) in domains.iter().enumerate() {
            if dom.len() != d {
                return Err(invalid(format!("domain {k} has {} marginals, expected {d}", dom.len())));
            }
            if let Some(m) = dom.iter().find(|m| !(m.scale > 0.0) || !m.loc.is_finite()) {
                return Err(invalid(format!("domain {k}: invalid marginal {m:?}")));
            }
        }
        Ok(Self { domains })
    }

    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }

    pub fn dim(&self) -> usize {
        self.domains[0].len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum GroundTruthMixing {
    Identity { dim: usize },
    Flow { params: FlowParams },
}

impl GroundTruthMixing {
    /// Random flow: orthogonal linear maps, coupling hidden layers drawn from
    /// `U(-1, 1)`, the shift head from `U(-1, 1) / sqrt(hidden)`, the scale
    /// head from `U(-1, 1) / hidden`, zero head biases and identity actnorm.
    /// The small scale head keeps `tanh(s) + 1` away from zero, so the
    /// inverse coupling used by `mix` stays well conditioned.
    pub fn random_flow(dim: usize, depth: usize, hidden: usize, seed: u64) -> Result<Self> {
        let config = FlowConfig::new(dim).with_depth(depth).with_hidden(hidden);
        let mut params = FlowParams::identity(config)?;
        let mut rng = seed::rng(seed, seed::STREAM_INIT, 7);
        let head = 1.0 / (hidden as f64).sqrt();
        let scale_head = 1.0 / hidden as f64;
        let uniform = |rng: &mut ChaCha8Rng, t: &mut Tensor, b: f64| {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-b..b));
        };
        for block in &mut params.blocks {
            block.linear = random_orthogonal(dim, &mut rng);
            let c = &mut block.coupling;
            uniform(&mut rng, &mut c.hidden_w, 1.0);
            uniform(&mut rng, &mut c.hidden_b, 1.0);
            uniform(&mut rng, &mut c.scale_w, scale_head);
            uniform(&mut rng, &mut c.shift_w, head);
        }
        Ok(Self::Flow { params })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Identity { dim } => *dim,
            Self::Flow { params } => params.dim(),
        }
    }

    /// `z = f(s)` row-wise.
    pub fn mix(&self, s: &Tensor) -> Result<Tensor> {
        match self {
            Self::Identity { .. } => Ok(s.clone()),
            Self::Flow { params } => params.synthesize_batch(s),
        }
    }

    /// `s = f^-1(z)` row-wise.
    pub fn unmix(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Self::Identity { .. } => Ok(z.clone()),
            Self::Flow { params } => params.analyze_batch(z),
        }
    }
}

/// Draws `n` IC rows from domain `k` and mixes them. Returns the dataset and
/// the true ICs.
pub fn sample_domain(
    family: &IcFamily,
    mixing: &GroundTruthMixing,
    k: usize,
    n: usize,
    seed: u64,
    id: impl Into<String>,
) -> Result<(DomainDataset, Tensor)> {
    if k >= family.domain_count() {
        return Err(invalid(format!("domain {k} out of range 0..{}", family.domain_count())));
    }
    if n == 0 {
        return Err(invalid("cannot sample zero rows"));
    }
    let d = family.dim();
    if mixing.dim() != d {
        return Err(invalid(format!("mixing dimension {} differs from IC dimension {d}", mixing.dim())));
    }
    let mut rng = seed::rng(seed, seed::STREAM_SYNTH, k as u64);
    let marginals = &family.domains[k];
    let s: Vec<f64> = (0..n).flat_map(|_| marginals.iter().map(|m| m.sample(&mut rng)).collect::<Vec<_>>()).collect();
    let s = Tensor::matrix(n, d, s)?;
    let z = mixing.mix(&s)?;
    Ok((DomainDataset::unnamed(id, z)?, s))
}

/// `w(z | u) = (d/dz_d log q_d, d^2/dz_d^2 log q_d)_d`, a `2D` vector.
fn variability_vector(marginals: &[Marginal], z: &[f64]) -> Result<Vec<f64>> {
    let mut first = Vec::with_capacity(z.len());
    let mut second = Vec::with_capacity(z.len());
    for (m, &x) in marginals.iter().zip(z) {
        let (a, b) = m.log_density_derivatives(x)?;
        first.push(a);
        second.push(b);
    }
    first.extend(second);
    Ok(first)
}

/// Numeric rank of `{w(z|u_j) - w(z|u_0)}_j`, with singular values above
/// `1e-8` times the largest counted. Returns the rank and singular values.
pub fn variability_rank(family: &IcFamily, z: &[f64], domains: &[usize]) -> Result<(usize, Vec<f64>)> {
    if domains.len() < 2 {
        return Err(invalid("variability rank needs at least 2 domains"));
    }
    if z.len() != family.dim() {
        return Err(invalid(format!("point has {} coordinates, expected {}", z.len(), family.dim())));
    }
    if let Some(&bad) = domains.iter().find(|&&k| k >= family.domain_count()) {
        return Err(invalid(format!("domain {bad} out of range")));
    }
    let base = variability_vector(&family.domains[domains[0]], z)?;
    let mut rows = Vec::new();
    for &k in &domains[1..] {
        let w = variability_vector(&family.domains[k], z)?;
        rows.extend(w.iter().zip(&base).map(|(a, b)| a - b));
    }
    let m = Tensor::matrix(domains.len() - 1, base.len(), rows)?;
    let mut sv = singular_values(&m);
    sv.sort_by(|a, b| b.total_cmp(a));
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = if top > 0.0 { sv.iter().filter(|&&s| s > 1e-8 * top).count() } else { 0 };
    Ok((rank, sv))
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

pub const MCC_MAX_DIM: usize = 8;

/// Mean absolute Spearman correlation under the best column matching.
pub fn mcc(true_ics: &Tensor, est_ics: &Tensor) -> Result<f64> {
    let (n, d) = (true_ics.rows(), true_ics.cols());
    if est_ics.rows() != n || est_ics.cols() != d {
        return Err(invalid("true and estimated ICs differ in shape"));
    }
    if n < 3 {
        return Err(invalid(format!("MCC needs at least 3 rows, got {n}")));
    }
    if d > MCC_MAX_DIM {
        return Err(Error::TooLarge(format!("MCC enumerates D! matchings; D = {d} exceeds {MCC_MAX_DIM}")));
    }
    let tr: Vec<Vec<f64>> = (0..d).map(|j| ranks(&true_ics.column(j))).collect();
    let er: Vec<Vec<f64>> = (0..d).map(|j| ranks(&est_ics.column(j))).collect();
    let corr: Vec<Vec<f64>> = tr.iter().map(|t| er.iter().map(|e| pearson(t, e).abs()).collect()).collect();
    let mut best = f64::NEG_INFINITY;
    let mut perm: Vec<usize> = (0..d).collect();
    fn rec(k: usize, perm: &mut Vec<usize>, corr: &[Vec<f64>], best: &mut f64) {
        if k == perm.len() {
            let s = perm.iter().enumerate().map(|(i, &j)| corr[i][j]).sum::<f64>() / perm.len() as f64;
            if s > *best {
                *best = s;
            }
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            rec(k + 1, perm, corr, best);
            perm.swap(k, i);
        }
    }
    rec(0, &mut perm, &corr, &mut best);
    Ok(best)
}

/// Generator settings for the default synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dim: usize,
    pub source_domains: usize,
    pub rows_per_source: usize,
    pub target_rows: usize,
    pub kind: IcKind,
    /// Locations are drawn from `U(-loc_range, loc_range)`.
    pub loc_range: f64,
    /// Scales are drawn from `U(scale_min, scale_max)`.
    pub scale_min: f64,
    pub scale_max: f64,
    pub mixing_depth: usize,
    pub mixing_hidden: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            source_domains: 5,
            rows_per_source: 1000,
            target_rows: 60,
            kind: IcKind::Gaussian,
            loc_range: 1.5,
            scale_min: 0.4,
            scale_max: 1.5,
            mixing_depth: 4,
            mixing_hidden: 16,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(invalid("synthetic benchmark needs D >= 2"));
        }
        if self.source_domains < 2 || self.rows_per_source == 0 || self.target_rows < 2 {
            return Err(invalid("need >= 2 source domains, >= 1 row per source and >= 2 target rows"));
        }
        if !(self.loc_range >= 0.0) || !(self.scale_min > 0.0) || !(self.scale_max >= self.scale_min) {
            return Err(invalid("invalid location or scale range"));
        }
        Ok(())
    }
}

/// Generated domains together with their ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBenchmark {
    pub config: SynthConfig,
    /// Source domains first, the target family last.
    pub family: IcFamily,
    pub mixing: GroundTruthMixing,
    pub sources: Vec<DomainDataset>,
    pub source_ics: Vec<Tensor>,
    pub target: DomainDataset,
    pub target_ics: Tensor,
    pub variability_rank: usize,
}

const MAX_FAMILY_DRAWS: u64 = 100;

/// Draws the IC families, the mixing flow and the data. Families are redrawn
/// until the variability rank at a random point reaches `min(2D, K - 1)`.
pub fn generate_benchmark(config: &SynthConfig) -> Result<SyntheticBenchmark> {
    config.validate()?;
    let d = config.dim;
    let k = config.source_domains;
    let mut rng = seed::rng(config.seed, seed::STREAM_SYNTH, u64::MAX);
    let draw_marginal = |rng: &mut ChaCha8Rng| {
        let loc = if config.loc_range > 0.0 { rng.random_range(-config.loc_range..=config.loc_range) } else { 0.0 };
        let scale = rng.random_range(config.scale_min..=config.scale_max);
        Marginal {
            kind: config.kind,
            loc,
            scale,
        }
    };
    let mut chosen = None;
    for _ in 0..MAX_FAMILY_DRAWS {
        let domains: Vec<Vec<Marginal>> = (0..=k).map(|_| (0..d).map(|_| draw_marginal(&mut rng)).collect()).collect();
        let family = IcFamily::new(domains)?;
        let probe: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sources: Vec<usize> = (0..k).collect();
        let (rank, _) = variability_rank(&family, &probe, &sources)?;
        if rank >= (2 * d).min(k - 1) {
            chosen = Some((family, rank));
            break;
        }
    }
    let (family, rank) = chosen.ok_or_else(|| invalid("could not draw an IC family with full variability rank"))?;
    let mixing = GroundTruthMixing::random_flow(d, config.mixing_depth, config.mixing_hidden, config.seed)?;
    let mut sources = Vec::with_capacity(k);
    let mut source_ics = Vec::with_capacity(k);
    for i in 0..k {
        let (ds, s) = sample_domain(&family, &mixing, i, config.rows_per_source, config.seed, format!("source{}", i + 1))?;
        sources.push(ds);
        source_ics.push(s);
    }
    let (target, target_ics) = sample_domain(&family, &mixing, k, config.target_rows, config.seed, "target")?;
    Ok(SyntheticBenchmark {
        config: config.clone(),
        family,
        mixing,
        sources,
        source_ics,
        target,
        target_ics,
        variability_rank: rank,
    })
}

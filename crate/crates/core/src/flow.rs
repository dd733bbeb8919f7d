//! Glow-style invertible network on `R^D`.
//!
//! The parameterized direction is analysis (`z -> s`): an actnorm layer,
//! then `depth` blocks of (invertible linear map, affine coupling). Synthesis
//! (`s -> z`) is the exact algebraic inverse and is computed with solves.
//!
//! Row convention: a batch is an `n x D` matrix and the linear map acts as
//! `y = x M`. The coupling keeps the first `floor(D/2)` coordinates `x1` and
//! maps the rest to `(tanh(s(x1)) + 1) * x2 + t(x1)`, where `s` and `t` share
//! a ReLU hidden layer.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::{random_orthogonal, Lu};
use crate::tensor::{column_moments, Tensor};

pub const MIN_ABS_DET: f64 = 1e-12;
const FILE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub depth: usize,
    pub coupling_hidden: usize,
}

impl FlowConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            depth: 8,
            coupling_hidden: 32,
        }
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.coupling_hidden = hidden;
        self
    }

    /// `(floor(D/2), D - floor(D/2))`.
    pub fn split(&self) -> (usize, usize) {
        (self.dim / 2, self.dim - self.dim / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(invalid(format!("flow dimension must be >= 2, got {}", self.dim)));
        }
        if self.depth < 1 {
            return Err(invalid("flow depth must be >= 1"));
        }
        if self.coupling_hidden < 1 {
            return Err(invalid("coupling hidden width must be >= 1"));
        }
        Ok(())
    }

    /// Number of parameter tensors in the flat layout.
    pub fn tensor_count(&self) -> usize {
        2 + 7 * self.depth
    }
}

/// Coupling networks: shared ReLU layer, tanh-headed scale, linear shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub hidden_w: Tensor,
    pub hidden_b: Tensor,
    pub scale_w: Tensor,
    pub scale_b: Tensor,
    pub shift_w: Tensor,
    pub shift_b: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowBlock {
    pub linear: Tensor,
    pub coupling: Coupling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub config: FlowConfig,
    pub actnorm_scale: Tensor,
    pub actnorm_bias: Tensor,
    pub blocks: Vec<FlowBlock>,
}

#[derive(Serialize, Deserialize)]
struct FlowFile {
    version: u32,
    params: FlowParams,
}

fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
        .expect("shape matches")
}

impl FlowParams {
    /// Identity map: unit actnorm, `M = I`, all coupling weights zero.
    pub fn identity(config: FlowConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let (d1, d2) = config.split();
        let h = config.coupling_hidden;
        let blocks = (0..config.depth)
            .map(|_| FlowBlock {
                linear: Tensor::identity(d),
                coupling: Coupling {
                    hidden_w: Tensor::zeros(d1, h),
                    hidden_b: Tensor::zeros(1, h),
                    scale_w: Tensor::zeros(h, d2),
                    scale_b: Tensor::zeros(1, d2),
                    shift_w: Tensor::zeros(h, d2),
                    shift_b: Tensor::zeros(1, d2),
                },
            })
            .collect();
        Ok(Self {
            config,
            actnorm_scale: Tensor::filled(1, d, 1.0),
            actnorm_bias: Tensor::zeros(1, d),
            blocks,
        })
    }

    /// Random initialization. Coupling layers draw from `N(0, 1/m)` with `m`
    /// the layer's parameter count, linear maps are random orthogonal, and
    /// actnorm standardizes `init_batch` per dimension when one is given.
    pub fn init(config: FlowConfig, seed: u64, init_batch: Option<&Tensor>) -> Result<Self> {
        config.validate()?;
        let mut params = Self::identity(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d1, d2) = config.split();
        let h = config.coupling_hidden;
        let hidden_std = (1.0 / (d1 * h + h) as f64).sqrt();
        let head_std = (1.0 / (h * d2 + d2) as f64).sqrt();
        for block in &mut params.blocks {
            block.linear = random_orthogonal(config.dim, &mut rng);
            let c = &mut block.coupling;
            c.hidden_w = normal_tensor(&mut rng, d1, h, hidden_std);
            c.hidden_b = normal_tensor(&mut rng, 1, h, hidden_std);
            c.scale_w = normal_tensor(&mut rng, h, d2, head_std);
            c.scale_b = normal_tensor(&mut rng, 1, d2, head_std);
            c.shift_w = normal_tensor(&mut rng, h, d2, head_std);
            c.shift_b = normal_tensor(&mut rng, 1, d2, head_std);
        }
        if let Some(batch) = init_batch {
            params.init_actnorm(batch)?;
        }
        Ok(params)
    }

    /// Sets actnorm so that `batch` maps to zero mean, unit variance.
    pub fn init_actnorm(&mut self, batch: &Tensor) -> Result<()> {
        if batch.cols() != self.config.dim {
            return Err(shape_err(
                "init_actnorm",
                format!("batch has {} columns, flow dimension {}", batch.cols(), self.config.dim),
            ));
        }
        if batch.rows() < 2 {
            return Err(invalid("actnorm initialization needs at least 2 rows"));
        }
        let (mean, var) = column_moments(batch)?;
        for (d, (&mu, &v)) in mean.iter().zip(&var).enumerate() {
            if !(v > 1e-24 * mu.abs().max(1.0).powi(2)) {
                return Err(invalid(format!(
                    "actnorm initialization: dimension {d} has zero variance"
                )));
            }
        }
        let scale: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt()).collect();
        let bias: Vec<f64> = mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
        self.actnorm_scale = Tensor::row_vector(scale);
        self.actnorm_bias = Tensor::row_vector(bias);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Flat parameter list: `[actnorm scale, actnorm bias]` followed by
    /// `[linear, hidden_w, hidden_b, scale_w, scale_b, shift_w, shift_b]` per block.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.config.tensor_count());
        out.push(self.actnorm_scale.clone());
        out.push(self.actnorm_bias.clone());
        for b in &self.blocks {
            let c = &b.coupling;
            out.extend([
                b.linear.clone(),
                c.hidden_w.clone(),
                c.hidden_b.clone(),
                c.scale_w.clone(),
                c.scale_b.clone(),
                c.shift_w.clone(),
                c.shift_b.clone(),
            ]);
        }
        out
    }

    pub fn from_tensors(config: FlowConfig, tensors: &[Tensor]) -> Result<Self> {
        let template = Self::identity(config)?;
        let expected = template.to_tensors();
        if tensors.len() != expected.len() {
            return Err(shape_err(
                "FlowParams::from_tensors",
                format!("expected {} tensors, got {}", expected.len(), tensors.len()),
            ));
        }
        for (i, (t, e)) in tensors.iter().zip(&expected).enumerate() {
            if !t.same_shape(e) {
                return Err(shape_err(
                    "FlowParams::from_tensors",
                    format!("tensor {i}: {:?} vs {:?}", t.shape(), e.shape()),
                ));
            }
        }
        let mut it = tensors.iter().cloned();
        let mut next = || it.next().expect("length checked");
        let actnorm_scale = next();
        let actnorm_bias = next();
        let blocks = (0..config.depth)
            .map(|_| FlowBlock {
                linear: next(),
                coupling: Coupling {
                    hidden_w: next(),
                    hidden_b: next(),
                    scale_w: next(),
                    scale_b: next(),
                    shift_w: next(),
                    shift_b: next(),
                },
            })
            .collect();
        Ok(Self {
            config,
            actnorm_scale,
            actnorm_bias,
            blocks,
        })
    }

    /// Which flat tensors are coupling-network weights (the only flow
    /// parameters that receive weight decay).
    pub fn coupling_mask(config: &FlowConfig) -> Vec<bool> {
        let mut mask = vec![false, false];
        for _ in 0..config.depth {
            mask.extend([false, true, true, true, true, true, true]);
        }
        mask
    }

    fn check_invertible(&self) -> Result<Vec<Arc<Lu>>> {
        if self.actnorm_scale.data().contains(&0.0) {
            return Err(Error::Singular("actnorm scale has a zero entry".into()));
        }
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let lu = Lu::factor(&b.linear)
                    .map_err(|_| Error::Singular(format!("block {i} linear map is singular")))?;
                let det = lu.det();
                if det.abs() < MIN_ABS_DET {
                    return Err(Error::Singular(format!("block {i}: |det W| = {:e}", det.abs())));
                }
                Ok(Arc::new(lu))
            })
            .collect()
    }

    pub fn min_abs_det(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| Lu::factor(&b.linear).map(|lu| lu.det().abs()).unwrap_or(0.0))
            .fold(f64::INFINITY, f64::min)
    }

    /// `z -> s` for each row of `z`.
    pub fn analyze_batch(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.config.dim {
            return Err(shape_err(
                "analyze",
                format!("input has {} columns, flow dimension {}", z.cols(), self.config.dim),
            ));
        }
        let tensors = self.to_tensors();
        let mut g = Graph::new();
        let vars = tensors
            .iter()
            .map(|t| g.constant_ref(t))
            .collect::<Result<Vec<_>>>()?;
        let x = g.constant_ref(z)?;
        let out = analyze_graph(&mut g, &self.config, &vars, x)?;
        Ok(g.value(out).clone())
    }

    pub fn analyze(&self, z: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::row_vector(z.to_vec());
        Ok(self.analyze_batch(&t)?.into_data())
    }

    /// `s -> z` for each row of `s`; the exact inverse of [`Self::analyze_batch`].
    pub fn synthesize_batch(&self, s: &Tensor) -> Result<Tensor> {
        let d = self.config.dim;
        if s.cols() != d {
            return Err(shape_err(
                "synthesize",
                format!("input has {} columns, flow dimension {d}", s.cols()),
            ));
        }
        if !s.is_finite() {
            return Err(Error::NonFinite {
                op: "synthesize",
                node: 0,
            });
        }
        let lus = self.check_invertible()?;
        let (d1, _) = self.config.split();
        let mut y = s.clone();
        let mut scratch = vec![0.0; d];
        for (block, lu) in self.blocks.iter().zip(&lus).rev() {
            let c = &block.coupling;
            let hidden = y
                .select_cols(0, d1)
                .matmul(&c.hidden_w)?
                .zip_map(&broadcast(&c.hidden_b, y.rows()), |a, b| (a + b).max(0.0))?;
            let scale = hidden
                .matmul(&c.scale_w)?
                .zip_map(&broadcast(&c.scale_b, y.rows()), |a, b| (a + b).tanh() + 1.0)?;
            let shift = hidden
                .matmul(&c.shift_w)?
                .zip_map(&broadcast(&c.shift_b, y.rows()), |a, b| a + b)?;
            for r in 0..y.rows() {
                let row = y.row_mut(r);
                for (j, x) in row[d1..].iter_mut().enumerate() {
                    *x = (*x - shift.get(r, j)) / scale.get(r, j);
                }
                // y = x M  <=>  M^T x^T = y^T
                scratch.copy_from_slice(row);
                let x = lu.solve_transpose_vec(&scratch);
                row.copy_from_slice(&x);
            }
        }
        let scale = self.actnorm_scale.data();
        let bias = self.actnorm_bias.data();
        for r in 0..y.rows() {
            for (j, x) in y.row_mut(r).iter_mut().enumerate() {
                *x = (*x - bias[j]) / scale[j];
            }
        }
        if !y.is_finite() {
            return Err(Error::NonFinite {
                op: "synthesize",
                node: 0,
            });
        }
        Ok(y)
    }

    pub fn synthesize(&self, s: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::row_vector(s.to_vec());
        Ok(self.synthesize_batch(&t)?.into_data())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&FlowFile {
            version: FILE_VERSION,
            params: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FlowFile = serde_json::from_str(text)?;
        if file.version != FILE_VERSION {
            return Err(invalid(format!("unsupported flow file version {}", file.version)));
        }
        let p = file.params;
        Self::from_tensors(p.config, &p.to_tensors())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn broadcast(row: &Tensor, rows: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * row.len());
    for _ in 0..rows {
        data.extend_from_slice(row.data());
    }
    Tensor::matrix(rows, row.len(), data).expect("broadcast shape")
}

/// Records the analysis pass on `x` (an `n x D` node) using flow parameters
/// given as nodes in the flat order of [`FlowParams::to_tensors`].
pub fn analyze_graph(g: &mut Graph<'_>, config: &FlowConfig, vars: &[Var], x: Var) -> Result<Var> {
    if vars.len() != config.tensor_count() {
        return Err(shape_err(
            "analyze_graph",
            format!("expected {} parameter nodes, got {}", config.tensor_count(), vars.len()),
        ));
    }
    let (d1, _) = config.split();
    let d = config.dim;
    let mut y = g.mul_row(x, vars[0])?;
    y = g.add_row(y, vars[1])?;
    for b in 0..config.depth {
        let p = &vars[2 + 7 * b..2 + 7 * (b + 1)];
        y = g.matmul(y, p[0])?;
        let x1 = g.slice_cols(y, 0, d1)?;
        let x2 = g.slice_cols(y, d1, d)?;
        let h = g.affine(x1, p[1], p[2])?;
        let h = g.relu(h)?;
        let s = g.affine(h, p[3], p[4])?;
        let s = g.tanh(s)?;
        let s = g.add_scalar(s, 1.0)?;
        let t = g.affine(h, p[5], p[6])?;
        let scaled = g.mul(s, x2)?;
        let x2 = g.add(scaled, t)?;
        y = g.concat_cols(x1, x2)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{evaluate_with_grad, ParamId};
    use rand::Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn identity_configuration_is_identity() {
        let p = FlowParams::identity(FlowConfig::new(3)).unwrap();
        let z = vec![0.3, -1.2, 4.0];
        assert_eq!(p.analyze(&z).unwrap(), z);
        assert_eq!(p.synthesize(&z).unwrap(), z);
    }

    #[test]
    fn no_batch_means_identity_actnorm() {
        let p = FlowParams::init(FlowConfig::new(4), 1, None).unwrap();
        assert_eq!(p.actnorm_scale, Tensor::filled(1, 4, 1.0));
        assert_eq!(p.actnorm_bias, Tensor::zeros(1, 4));
    }

    #[test]
    fn data_dependent_actnorm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = random_batch(&mut rng, 50, 3).map(|x| 3.0 * x + 1.0);
        let p = FlowParams::init(FlowConfig::new(3), 4, Some(&batch)).unwrap();
        let mut g = Graph::new();
        let x = g.constant_ref(&batch).unwrap();
        let s = g.constant_ref(&p.actnorm_scale).unwrap();
        let b = g.constant_ref(&p.actnorm_bias).unwrap();
        let y = g.mul_row(x, s).unwrap();
        let y = g.add_row(y, b).unwrap();
        let (mean, var) = column_moments(g.value(y)).unwrap();
        for (m, v) in mean.iter().zip(&var) {
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_batch_is_rejected() {
        let batch = Tensor::from_rows(&[[1.0, 2.0], [1.0, 3.0], [1.0, 4.0]]).unwrap();
        assert!(FlowParams::init(FlowConfig::new(2), 0, Some(&batch)).is_err());
    }

    #[test]
    fn orthogonal_linear_init() {
        let p = FlowParams::init(FlowConfig::new(4), 9, None).unwrap();
        for b in &p.blocks {
            let det = Lu::factor(&b.linear).unwrap().det();
            assert!((det.abs() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn coupling_passes_first_half_through() {
        // one block with M = I: the first floor(D/2) coordinates are untouched
        let mut p = FlowParams::init(FlowConfig::new(4).with_depth(1), 3, None).unwrap();
        p.blocks[0].linear = Tensor::identity(4);
        let z = vec![0.5, -0.7, 1.1, 2.0];
        let s = p.analyze(&z).unwrap();
        assert_eq!(&s[..2], &z[..2]);
        assert_ne!(&s[2..], &z[2..]);
    }

    #[test]
    fn round_trip_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (seed, d) in [(0, 2), (1, 3), (2, 4), (3, 8)] {
            let p = FlowParams::init(FlowConfig::new(d), seed, None).unwrap();
            let z = random_batch(&mut rng, 200, d);
            let back = p.synthesize_batch(&p.analyze_batch(&z).unwrap()).unwrap();
            let err = back.zip_map(&z, |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(err < 1e-6, "d={d} err={err}");
            let s = random_batch(&mut rng, 200, d);
            let fwd = p.analyze_batch(&p.synthesize_batch(&s).unwrap()).unwrap();
            let err = fwd.zip_map(&s, |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(err < 1e-6, "d={d} err={err}");
        }
    }

    #[test]
    fn singular_linear_map_fails_synthesis() {
        let mut p = FlowParams::identity(FlowConfig::new(2).with_depth(1)).unwrap();
        p.blocks[0].linear = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(p.synthesize(&[0.0, 1.0]), Err(Error::Singular(_))));
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let p = FlowParams::identity(FlowConfig::new(2)).unwrap();
        assert!(p.analyze(&[f64::NAN, 0.0]).is_err());
        assert!(p.synthesize(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn analysis_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let config = FlowConfig::new(4).with_depth(2).with_hidden(6);
        let p = FlowParams::init(config, 5, None).unwrap();
        let z = random_batch(&mut rng, 3, 4);
        let weights = random_batch(&mut rng, 3, 4);
        let tensors = p.to_tensors();
        let program = |g: &mut Graph<'_>, v: &[Var]| {
            let x = g.constant(z.clone())?;
            let s = analyze_graph(g, &config, v, x)?;
            let w = g.constant(weights.clone())?;
            let s = g.mul(s, w)?;
            let s = g.tanh(s)?;
            g.sum(s)
        };
        let res = evaluate_with_grad(&tensors, program).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (pi, t) in tensors.iter().enumerate() {
            for k in 0..t.len() {
                let mut plus = tensors.clone();
                plus[pi].data_mut()[k] += h;
                let mut minus = tensors.clone();
                minus[pi].data_mut()[k] -= h;
                let fd = (evaluate_with_grad(&plus, program).unwrap().value
                    - evaluate_with_grad(&minus, program).unwrap().value)
                    / (2.0 * h);
                let an = res.gradients[&ParamId(pi)].data()[k];
                worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1.0));
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn json_round_trip_is_exact() {
        let p = FlowParams::init(FlowConfig::new(3).with_depth(2), 8, None).unwrap();
        let back = FlowParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);
    }
}

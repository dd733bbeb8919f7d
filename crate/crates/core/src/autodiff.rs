//! Reverse-mode differentiation over a recorded sequence of matrix
//! operations.
//!
//! A [`Graph`] records every operation together with its forward value. A
//! single backward sweep over the record accumulates the adjoint of each
//! node; parameters registered with [`Graph::param`] then expose their
//! gradients. Every forward value is checked for finiteness as it is
//! produced, so a blow-up is reported with the operation that caused it.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::linalg::Lu;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    SliceCols(Var, usize),
    ConcatCols(Var, Var),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Solve(Arc<Lu>, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Pick(..) => "pick",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Solve(..) => "solve",
        }
    }
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    param: Option<ParamId>,
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic loss `log(1 + exp(-m))`, evaluated as `softplus(-m)`.
pub fn logistic_loss(m: f64) -> f64 {
    softplus(-m)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Operation record for one forward/backward evaluation.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            param: None,
        });
        Ok(Var(id))
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, param: Option<ParamId>) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf", node: id });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            param,
        });
        Ok(Var(id))
    }

    /// Registers a trainable parameter (borrowed, not copied).
    pub fn param(&mut self, id: ParamId, value: &'a Tensor) -> Result<Var> {
        self.leaf(Cow::Borrowed(value), Some(id))
    }

    /// Registers a constant borrowed from the caller.
    pub fn constant_ref(&mut self, value: &'a Tensor) -> Result<Var> {
        self.leaf(Cow::Borrowed(value), None)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(Cow::Owned(value), None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    fn row_broadcast(&self, a: Var, row: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, rv) = (self.value(a), self.value(row));
        let cols = av.cols();
        if rv.len() != cols {
            return Err(shape_err(op, format!("row of {} against {} columns", rv.len(), cols)));
        }
        let r = rv.data();
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(cols.max(1)) {
            for (x, &b) in chunk.iter_mut().zip(r) {
                *x = f(*x, b);
            }
        }
        Ok(out)
    }

    /// `a + 1 b` where `b` is a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.row_broadcast(a, row, "add_row", |x, b| x + b)?;
        self.push(Op::AddRow(a, row), v)
    }

    /// Row-broadcast elementwise product.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.row_broadcast(a, row, "mul_row", |x, b| x * b)?;
        self.push(Op::MulRow(a, row), v)
    }

    /// Affine layer `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {} columns", av.cols())));
        }
        let v = av.select_cols(start, end);
        self.push(Op::SliceCols(a, start), v)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(shape_err("concat_cols", format!("{} rows vs {} rows", av.rows(), bv.rows())));
        }
        let (rows, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let v = Tensor::matrix(rows, ca + cb, data)?;
        self.push(Op::ConcatCols(a, b), v)
    }

    /// Picks column `idx[r]` from each row `r`, giving a column vector.
    pub fn pick(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if idx.len() != av.rows() || idx.iter().any(|&c| c >= av.cols()) {
            return Err(shape_err(
                "pick",
                format!("{} indices into {}x{}", idx.len(), av.rows(), av.cols()),
            ));
        }
        let vals = idx.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        let v = Tensor::column_vector(vals);
        self.push(Op::Pick(a, idx), v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let v = Tensor::scalar(av.sum() / av.len() as f64);
        self.push(Op::Mean(a), v)
    }

    /// `A^{-1} b` against a fixed (non-differentiated) factorized matrix.
    pub fn solve(&mut self, lu: Arc<Lu>, b: Var) -> Result<Var> {
        let v = lu.solve_matrix(self.value(b))?;
        self.push(Op::Solve(lu, b), v)
    }

    /// Adjoints of every node with respect to the scalar `output`.
    fn adjoints(&self, output: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(output).len() != 1 {
            return Err(shape_err("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(
            self.value(output).rows(),
            self.value(output).cols(),
            1.0,
        ));
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    let gb = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.map(|x| -x))?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::AddRow(a, row) => {
                    let gr = column_sums(&g, self.value(*row));
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *row, gr)?;
                }
                Op::MulRow(a, row) => {
                    let rv = self.value(*row);
                    let cols = g.cols();
                    let mut ga = g.clone();
                    for chunk in ga.data_mut().chunks_mut(cols.max(1)) {
                        chunk.iter_mut().zip(rv.data()).for_each(|(x, &b)| *x *= b);
                    }
                    let prod = g.zip_map(self.value(*a), |x, y| x * y)?;
                    let gr = column_sums(&prod, rv);
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *row, gr)?;
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone())?,
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c))?
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Log(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| x / y)?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Softplus(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| x * sigmoid(y))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    let width = g.cols();
                    for r in 0..av.rows() {
                        ga.row_mut(r)[*start..*start + width].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let ga = g.select_cols(0, ca);
                    let gb = g.select_cols(ca, g.cols());
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Pick(a, idx) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for (r, &c) in idx.iter().enumerate() {
                        ga.set(r, c, g.data()[r]);
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::filled(av.rows(), av.cols(), s))?;
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let s = g.data()[0] / av.len() as f64;
                    accumulate(&mut grads, *a, Tensor::filled(av.rows(), av.cols(), s))?;
                }
                Op::Solve(lu, b) => {
                    let gb = lu.solve_transpose_matrix(&g)?;
                    accumulate(&mut grads, *b, gb)?;
                }
            }
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    /// Gradients of `output` with respect to every registered parameter.
    /// Parameters that do not influence `output` receive zeros.
    pub fn param_gradients(&self, output: Var) -> Result<BTreeMap<ParamId, Tensor>> {
        let adj = self.adjoints(output)?;
        let mut out = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(adj) {
            if let Some(id) = node.param {
                let g = g.unwrap_or_else(|| Tensor::zeros_like(&node.value));
                match out.get_mut(&id) {
                    None => {
                        out.insert(id, g);
                    }
                    Some(acc) => Tensor::add_assign(acc, &g)?,
                }
            }
        }
        Ok(out)
    }

    /// Gradient with respect to an arbitrary node (e.g. a data input).
    pub fn gradient_wrt(&self, output: Var, wrt: Var) -> Result<Tensor> {
        let mut adj = self.adjoints(output)?;
        Ok(adj[wrt.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros_like(self.value(wrt))))
    }
}

fn column_sums(g: &Tensor, like: &Tensor) -> Tensor {
    let cols = g.cols();
    let mut sums = vec![0.0; cols];
    for row in g.iter_rows() {
        sums.iter_mut().zip(row).for_each(|(s, x)| *s += x);
    }
    Tensor::new(like.shape().to_vec(), sums).expect("row parameter has one entry per column")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Value and parameter gradients of a scalar program.
#[derive(Clone, Debug)]
pub struct GradResult {
    pub value: f64,
    pub gradients: BTreeMap<ParamId, Tensor>,
}

impl GradResult {
    /// Gradients in parameter order, one per parameter.
    pub fn into_ordered(self) -> Vec<Tensor> {
        self.gradients.into_values().collect()
    }
}

/// Records `program` over `params` (registered as `ParamId(0..)`) and returns
/// its value with one gradient per parameter.
pub fn evaluate_with_grad<'a, F>(params: &'a [Tensor], program: F) -> Result<GradResult>
where
    F: FnOnce(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .enumerate()
        .map(|(i, p)| g.param(ParamId(i), p))
        .collect::<Result<Vec<_>>>()?;
    let out = program(&mut g, &vars)?;
    let value = g.value(out);
    if value.len() != 1 {
        return Err(shape_err("evaluate_with_grad", "program must return a scalar"));
    }
    let value = value.data()[0];
    let gradients = g.param_gradients(out)?;
    Ok(GradResult { value, gradients })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Max relative error of analytic vs central-difference gradients.
    fn fd_check<F>(params: &[Tensor], program: F) -> f64
    where
        F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
    {
        let res = evaluate_with_grad(params, &program).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (pi, p) in params.iter().enumerate() {
            for k in 0..p.len() {
                let mut plus = params.to_vec();
                plus[pi].data_mut()[k] += h;
                let mut minus = params.to_vec();
                minus[pi].data_mut()[k] -= h;
                let fp = evaluate_with_grad(&plus, &program).unwrap().value;
                let fm = evaluate_with_grad(&minus, &program).unwrap().value;
                let fd = (fp - fm) / (2.0 * h);
                let an = res.gradients[&ParamId(pi)].data()[k];
                let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1.0);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn square_at_three() {
        let p = [Tensor::scalar(3.0)];
        let r = evaluate_with_grad(&p, |g, v| g.mul(v[0], v[0])).unwrap();
        assert_eq!(r.value, 9.0);
        assert_eq!(r.gradients[&ParamId(0)].data()[0], 6.0);
    }

    #[test]
    fn logistic_at_zero() {
        let p = [Tensor::scalar(0.0)];
        let r = evaluate_with_grad(&p, |g, v| {
            let n = g.neg(v[0])?;
            g.softplus(n)
        })
        .unwrap();
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((r.gradients[&ParamId(0)].data()[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn logistic_loss_is_stable_for_large_margins() {
        assert!((logistic_loss(-1000.0) - 1000.0).abs() < 1e-9);
        assert!(logistic_loss(1000.0) >= 0.0 && logistic_loss(1000.0) < 1e-300);
        assert!((logistic_loss(-35.0) - (1.0 + 35f64.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // 3 -> 8 -> 2 with biases: 24 + 8 + 16 + 2 = 50 parameters, plus 14 more
        // from a second output head to reach 64.
        let params = vec![
            rand_tensor(&mut rng, 3, 8),
            rand_tensor(&mut rng, 1, 8),
            rand_tensor(&mut rng, 8, 2),
            rand_tensor(&mut rng, 1, 2),
            rand_tensor(&mut rng, 1, 14),
        ];
        assert_eq!(params.iter().map(Tensor::len).sum::<usize>(), 64);
        let x = rand_tensor(&mut rng, 5, 3);
        let extra = rand_tensor(&mut rng, 5, 14);
        let program = |g: &mut Graph<'_>, v: &[Var]| {
            let xv = g.constant(x.clone())?;
            let h = g.affine(xv, v[0], v[1])?;
            let h = g.tanh(h)?;
            let o = g.affine(h, v[2], v[3])?;
            let o = g.softplus(o)?;
            let e = g.constant(extra.clone())?;
            let e = g.mul_row(e, v[4])?;
            let e = g.tanh(e)?;
            let a = g.mean(o)?;
            let b = g.mean(e)?;
            g.add(a, b)
        };
        assert!(fd_check(&params, program) < 1e-5);
    }

    #[test]
    fn every_op_kind_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a = rand_tensor(&mut rng, 4, 3);
            let b = rand_tensor(&mut rng, 4, 3);
            let row = rand_tensor(&mut rng, 1, 3);
            let w = rand_tensor(&mut rng, 3, 2);
            let mut fixed = rand_tensor(&mut rng, 4, 4);
            for i in 0..4 {
                let v = fixed.get(i, i) + 6.0;
                fixed.set(i, i, v);
            }
            let lu = Arc::new(Lu::factor(&fixed).unwrap());
            let params = vec![a, b, row, w];
            let program = move |g: &mut Graph<'_>, v: &[Var]| {
                let s = g.add(v[0], v[1])?;
                let d = g.sub(v[0], v[1])?;
                let m = g.mul(s, d)?;
                let m = g.add_row(m, v[2])?;
                let m = g.mul_row(m, v[2])?;
                let m = g.scale(m, 0.3)?;
                let m = g.add_scalar(m, 0.1)?;
                let r = g.relu(m)?;
                let t = g.tanh(d)?;
                let sp = g.softplus(s)?;
                let lg = g.log(sp)?;
                let ex = g.exp(t)?;
                let c = g.concat_cols(r, lg)?;
                let c = g.slice_cols(c, 1, 5)?;
                let c = g.slice_cols(c, 0, 3)?;
                let c = g.add(c, ex)?;
                let c = g.solve(lu.clone(), c)?;
                let p = g.matmul(c, v[3])?;
                let picked = g.pick(p, vec![0, 1, 1, 0])?;
                let a1 = g.sum(picked)?;
                let a2 = g.mean(c)?;
                g.add(a1, a2)
            };
            assert!(fd_check(&params, program) < 1e-5);
        }
    }

    #[test]
    fn non_finite_reports_operation() {
        let p = [Tensor::scalar(-1.0)];
        let err = evaluate_with_grad(&p, |g, v| g.log(v[0])).unwrap_err();
        match err {
            Error::NonFinite { op, .. } => assert_eq!(op, "log"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let p = [Tensor::scalar(2.0), Tensor::zeros(2, 3)];
        let r = evaluate_with_grad(&p, |g, v| g.sum(v[0])).unwrap();
        assert_eq!(r.gradients.len(), 2);
        assert_eq!(r.gradients[&ParamId(1)], Tensor::zeros(2, 3));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = vec![rand_tensor(&mut rng, 3, 3), rand_tensor(&mut rng, 1, 3)];
        let prog = |g: &mut Graph<'_>, v: &[Var]| {
            let h = g.affine(v[0], v[0], v[1])?;
            let h = g.tanh(h)?;
            g.mean(h)
        };
        let a = evaluate_with_grad(&p, prog).unwrap();
        let b = evaluate_with_grad(&p, prog).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.gradients, b.gradients);
    }
}

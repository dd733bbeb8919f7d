//! Generalized contrastive learning (GCL) of the shared flow.
//!
//! The classifier is `r(z, u) = sum_d psi_d(analyze(z)_d, u)`, where each
//! `psi_d` is a one-hidden-layer ReLU network from a scalar to `K` outputs.
//! Training minimizes the logistic loss of `r(z, k)` on true pairs against
//! `r(z, k')` with `k'` drawn uniformly from the other domains, redrawn for
//! every minibatch.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{evaluate_with_grad, GradResult, Graph, Var};
use crate::data::{pool_rows, DomainDataset};
use crate::error::{invalid, shape_err, Error, Result};
use crate::flow::{analyze_graph, FlowConfig, FlowParams};
use crate::optim::{adam_step, apply_weight_decay, AdamConfig, AdamState};
use crate::seed;
use crate::tensor::Tensor;

/// `psi_d`: `1 -> hidden (ReLU) -> K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsiNet {
    pub hidden_w: Tensor,
    pub hidden_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect())
        .expect("shape matches")
}

impl PsiNet {
    pub fn zeros(hidden: usize, domains: usize) -> Self {
        Self {
            hidden_w: Tensor::zeros(1, hidden),
            hidden_b: Tensor::zeros(1, hidden),
            out_w: Tensor::zeros(hidden, domains),
            out_b: Tensor::zeros(1, domains),
        }
    }

    /// Each layer drawn from `U(-sqrt(1/m), sqrt(1/m))`, `m` = input width.
    pub fn init(hidden: usize, domains: usize, rng: &mut ChaCha8Rng) -> Self {
        let first = 1.0;
        let second = (1.0 / hidden as f64).sqrt();
        Self {
            hidden_w: uniform_tensor(rng, 1, hidden, first),
            hidden_b: uniform_tensor(rng, 1, hidden, first),
            out_w: uniform_tensor(rng, hidden, domains, second),
            out_b: uniform_tensor(rng, 1, domains, second),
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_w.cols()
    }

    pub fn outputs(&self) -> usize {
        self.out_b.cols()
    }
}

/// Flow plus one `psi_d` per dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GclModel {
    pub flow: FlowParams,
    pub psi: Vec<PsiNet>,
    pub domains: usize,
}

/// Shape information needed to rebuild a model from its flat tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GclLayout {
    pub flow: FlowConfig,
    pub psi_hidden: usize,
    pub domains: usize,
}

impl GclLayout {
    pub fn flow_tensors(&self) -> usize {
        self.flow.tensor_count()
    }

    pub fn tensor_count(&self) -> usize {
        self.flow_tensors() + 4 * self.flow.dim
    }

    /// Weight-decay mask: coupling networks and every `psi_d` tensor.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut m = FlowParams::coupling_mask(&self.flow);
        m.extend(std::iter::repeat_n(true, 4 * self.flow.dim));
        m
    }
}

impl GclModel {
    pub fn new(flow: FlowParams, psi: Vec<PsiNet>, domains: usize) -> Result<Self> {
        if domains < 2 {
            return Err(invalid(format!("GCL needs at least 2 domains, got {domains}")));
        }
        if psi.len() != flow.dim() {
            return Err(invalid(format!(
                "{} psi networks for a {}-dimensional flow",
                psi.len(),
                flow.dim()
            )));
        }
        if let Some(bad) = psi.iter().find(|p| p.outputs() != domains) {
            return Err(invalid(format!("psi network has {} outputs, expected {domains}", bad.outputs())));
        }
        Ok(Self { flow, psi, domains })
    }

    pub fn init(
        flow_config: FlowConfig,
        psi_hidden: usize,
        domains: usize,
        seed: u64,
        init_batch: Option<&Tensor>,
    ) -> Result<Self> {
        let flow = FlowParams::init(flow_config, seed::derive(seed, seed::STREAM_INIT, 0), init_batch)?;
        let mut rng = seed::rng(seed, seed::STREAM_INIT, 1);
        let psi = (0..flow_config.dim)
            .map(|_| PsiNet::init(psi_hidden, domains, &mut rng))
            .collect();
        Self::new(flow, psi, domains)
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    pub fn layout(&self) -> GclLayout {
        GclLayout {
            flow: self.flow.config,
            psi_hidden: self.psi.first().map_or(0, PsiNet::hidden),
            domains: self.domains,
        }
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut t = self.flow.to_tensors();
        for p in &self.psi {
            t.extend([p.hidden_w.clone(), p.hidden_b.clone(), p.out_w.clone(), p.out_b.clone()]);
        }
        t
    }

    pub fn from_tensors(layout: GclLayout, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != layout.tensor_count() {
            return Err(shape_err(
                "GclModel::from_tensors",
                format!("expected {} tensors, got {}", layout.tensor_count(), tensors.len()),
            ));
        }
        let nf = layout.flow_tensors();
        let flow = FlowParams::from_tensors(layout.flow, &tensors[..nf])?;
        let psi = tensors[nf..]
            .chunks(4)
            .map(|c| PsiNet {
                hidden_w: c[0].clone(),
                hidden_b: c[1].clone(),
                out_w: c[2].clone(),
                out_b: c[3].clone(),
            })
            .collect();
        Self::new(flow, psi, layout.domains)
    }

    /// `r(z, u)` for every row of `z` and every `u`: an `n x K` matrix.
    pub fn scores_batch(&self, z: &Tensor) -> Result<Tensor> {
        let tensors = self.to_tensors();
        let layout = self.layout();
        let mut g = Graph::new();
        let vars = tensors
            .iter()
            .map(|t| g.constant_ref(t))
            .collect::<Result<Vec<_>>>()?;
        let x = g.constant_ref(z)?;
        let r = scores_graph(&mut g, &layout, &vars, x)?;
        Ok(g.value(r).clone())
    }

    /// `r(z, u) = sum_d psi_d(analyze(z)_d)[u]`.
    pub fn classifier_score(&self, z: &[f64], u: usize) -> Result<f64> {
        if u >= self.domains {
            return Err(invalid(format!("domain index {u} out of range 0..{}", self.domains)));
        }
        let r = self.scores_batch(&Tensor::row_vector(z.to_vec()))?;
        Ok(r.get(0, u))
    }
}

/// Records `r(z, .)` (an `n x K` node) on top of the analysis pass.
pub fn scores_graph(g: &mut Graph<'_>, layout: &GclLayout, vars: &[Var], x: Var) -> Result<Var> {
    let nf = layout.flow_tensors();
    let s = analyze_graph(g, &layout.flow, &vars[..nf], x)?;
    let mut total: Option<Var> = None;
    for d in 0..layout.flow.dim {
        let p = &vars[nf + 4 * d..nf + 4 * (d + 1)];
        let sd = g.slice_cols(s, d, d + 1)?;
        let h = g.affine(sd, p[0], p[1])?;
        let h = g.relu(h)?;
        let o = g.affine(h, p[2], p[3])?;
        total = Some(match total {
            None => o,
            Some(t) => g.add(t, o)?,
        });
    }
    total.ok_or_else(|| invalid("model has no dimensions"))
}

/// Mean over the batch of `phi(r(z, pos)) + phi(-r(z, neg))`,
/// `phi(m) = log(1 + exp(-m))`, with value and gradients for every flat tensor.
pub fn gcl_objective(
    layout: &GclLayout,
    tensors: &[Tensor],
    z: &Tensor,
    positive: &[usize],
    negative: &[usize],
) -> Result<GradResult> {
    if z.rows() == 0 {
        return Err(invalid("empty GCL batch"));
    }
    if positive.len() != z.rows() || negative.len() != z.rows() {
        return Err(shape_err("gcl_objective", "one positive and one negative label per row"));
    }
    evaluate_with_grad(tensors, |g, vars| {
        let x = g.constant_ref(z)?;
        let r = scores_graph(g, layout, vars, x)?;
        let rp = g.pick(r, positive.to_vec())?;
        let rn = g.pick(r, negative.to_vec())?;
        let mp = g.neg(rp)?;
        let lp = g.softplus(mp)?;
        let ln = g.softplus(rn)?;
        let both = g.add(lp, ln)?;
        g.mean(both)
    })
}

/// One negative domain per row, uniform over `[K] \ {k}`.
pub fn draw_negatives<R: Rng + ?Sized>(positive: &[usize], domains: usize, rng: &mut R) -> Result<Vec<usize>> {
    if domains < 2 {
        return Err(invalid("contrastive loss needs K >= 2"));
    }
    positive
        .iter()
        .map(|&k| {
            if k >= domains {
                return Err(invalid(format!("domain label {k} out of range 0..{domains}")));
            }
            let u = rng.random_range(0..domains - 1);
            Ok(if u >= k { u + 1 } else { u })
        })
        .collect()
}

/// GCL loss on a batch with freshly drawn negatives.
pub fn gcl_loss<R: Rng + ?Sized>(model: &GclModel, z: &Tensor, labels: &[usize], rng: &mut R) -> Result<f64> {
    let negative = draw_negatives(labels, model.domains, rng)?;
    let tensors = model.to_tensors();
    Ok(gcl_objective(&model.layout(), &tensors, z, labels, &negative)?.value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GclTrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub psi_hidden: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub flow_depth: usize,
    pub coupling_hidden: usize,
}

impl Default for GclTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 300,
            batch_size: 32,
            weight_decay: 1e-2,
            psi_hidden: 20,
            eval_every: 20,
            seed: 0,
            flow_depth: 8,
            coupling_hidden: 32,
        }
    }
}

impl GclTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.psi_hidden == 0 || self.eval_every == 0 {
            return Err(invalid("epochs, batch size, psi width and eval interval must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(invalid("weight decay must be >= 0"));
        }
        Ok(())
    }

    pub fn flow_config(&self, dim: usize) -> FlowConfig {
        FlowConfig::new(dim)
            .with_depth(self.flow_depth)
            .with_hidden(self.coupling_hidden)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub epoch: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean minibatch loss per epoch (index 0 is epoch 1).
    pub epoch_loss: Vec<f64>,
    pub snapshots: Vec<SnapshotRecord>,
    /// Epoch of the returned snapshot.
    pub selected_epoch: usize,
}

impl TrainingLog {
    /// `epoch,loss,snapshot_score` rows; the score is empty between snapshots.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,snapshot_score\n");
        for (i, loss) in self.epoch_loss.iter().enumerate() {
            let epoch = i + 1;
            let score = self
                .snapshots
                .iter()
                .find(|s| s.epoch == epoch)
                .map(|s| format!("{:?}", s.score))
                .unwrap_or_default();
            let _ = writeln!(out, "{epoch},{loss:?},{score}");
        }
        out
    }
}

/// Trains GCL on the pooled source rows. Every `eval_every` epochs the
/// current model is scored by `snapshot_score`; the snapshot with the
/// smallest score is returned (earliest on ties, NaN treated as +inf). If no
/// snapshot epoch is reached the final model is returned.
pub fn train_gcl<F>(
    sources: &[DomainDataset],
    config: &GclTrainConfig,
    mut snapshot_score: F,
) -> Result<(GclModel, TrainingLog)>
where
    F: FnMut(&GclModel) -> f64,
{
    config.validate()?;
    let k = sources.len();
    if k < 2 {
        return Err(invalid(format!("GCL needs at least 2 source domains, got {k}")));
    }
    let pooled = pool_rows(sources)?;
    let dim = pooled.cols();
    let labels: Vec<usize> = sources
        .iter()
        .enumerate()
        .flat_map(|(i, d)| std::iter::repeat_n(i, d.len()))
        .collect();

    let model = GclModel::init(config.flow_config(dim), config.psi_hidden, k, config.seed, Some(&pooled))?;
    let layout = model.layout();
    let mask = layout.decay_mask();
    let mut params = model.to_tensors();
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = seed::rng(config.seed, seed::STREAM_GCL, 0);
    let mut order: Vec<usize> = (0..pooled.rows()).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let z = pooled.select_rows(chunk);
            let pos: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let neg = draw_negatives(&pos, k, &mut rng)?;
            let res = gcl_objective(&layout, &params, &z, &pos, &neg).map_err(|e| Error::Diverged {
                epoch,
                batch: b,
                source: Box::new(e),
            })?;
            if !res.value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    source: Box::new(Error::NonFinite { op: "gcl_loss", node: 0 }),
                });
            }
            total += res.value;
            batches += 1;
            let mut grads = res.into_ordered();
            apply_weight_decay(&params, &mut grads, config.weight_decay, &mask)?;
            adam_step(&mut params, &grads, &mut adam)?;
        }
        log.epoch_loss.push(total / batches as f64);

        if epoch % config.eval_every == 0 {
            let snapshot = GclModel::from_tensors(layout, &params)?;
            let score = snapshot_score(&snapshot);
            log.snapshots.push(SnapshotRecord { epoch, score });
            let key = if score.is_nan() { f64::INFINITY } else { score };
            if best.as_ref().is_none_or(|(s, _, _)| key < *s) {
                best = Some((key, epoch, params.clone()));
            }
        }
    }

    let (epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => (config.max_epochs, params),
    };
    log.selected_epoch = epoch;
    Ok((GclModel::from_tensors(layout, &params)?, log))
}

//! End-to-end adaptation and baselines under repeated random target splits.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{extract_ics, filter_and_assemble, plan_combinations, synthesize_candidates, AugmentedSet, DEFAULT_BUDGET};
use crate::data::{pool_rows, DomainDataset};
use crate::error::{invalid, Error, Result};
use crate::flow::FlowParams;
use crate::ica::{train_gcl, GclTrainConfig, TrainingLog};
use crate::novelty::{fit_ocsvm, NoveltyFilter, OcsvmModel, DEFAULT_NU};
use crate::ridge::{fit_krr, median_bandwidth, select_lambda, select_lambda_strict, KrrModel, LambdaSelection};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    Prop,
    TarOnly,
    SrcOnly,
    SandTV,
    #[serde(rename = "LOO")]
    Loo,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Prop, Method::TarOnly, Method::SrcOnly, Method::SandTV, Method::Loo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Prop => "Prop",
            Method::TarOnly => "TarOnly",
            Method::SrcOnly => "SrcOnly",
            Method::SandTV => "SandTV",
            Method::Loo => "LOO",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown method {s:?}; expected one of Prop, TarOnly, SrcOnly, SandTV, LOO")))
    }
}

/// Hyperparameter grid searched by the proposed method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GclGrid {
    pub psi_hidden: Vec<usize>,
    pub weight_decay: Vec<f64>,
}

impl Default for GclGrid {
    fn default() -> Self {
        Self {
            psi_hidden: vec![10, 20],
            weight_decay: vec![1e-2, 1e-1],
        }
    }
}

impl GclGrid {
    /// Cells in row-major order (psi width outer, weight decay inner).
    pub fn cells(&self) -> Vec<(usize, f64)> {
        self.psi_hidden
            .iter()
            .flat_map(|&h| self.weight_decay.iter().map(move |&w| (h, w)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: String,
    pub train_fraction: f64,
    pub repeats: usize,
    pub methods: Vec<Method>,
    /// Base training settings; each grid cell overrides psi width, weight
    /// decay and seed.
    pub gcl: GclTrainConfig,
    pub grid: GclGrid,
    pub budget: usize,
    pub nu: f64,
    /// Drop synthetic rows derived from a held-out original during LOOCV.
    pub strict_loocv: bool,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            target: String::new(),
            train_fraction: 1.0 / 3.0,
            repeats: 10,
            methods: Method::ALL.to_vec(),
            gcl: GclTrainConfig::default(),
            grid: GclGrid::default(),
            budget: DEFAULT_BUDGET,
            nu: DEFAULT_NU,
            strict_loocv: false,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(invalid(format!("train fraction must be in (0, 1), got {}", self.train_fraction)));
        }
        if self.repeats == 0 {
            return Err(invalid("repeats must be >= 1"));
        }
        if self.methods.is_empty() {
            return Err(invalid("no methods selected"));
        }
        if self.methods.contains(&Method::Prop) && self.grid.cells().is_empty() {
            return Err(invalid("the GCL grid is empty"));
        }
        if self.budget == 0 {
            return Err(invalid("budget must be >= 1"));
        }
        self.gcl.validate()
    }

    /// Training settings for grid cell `cell`.
    pub fn cell_config(&self, cell: usize) -> Result<GclTrainConfig> {
        let cells = self.grid.cells();
        let &(psi_hidden, weight_decay) = cells
            .get(cell)
            .ok_or_else(|| invalid(format!("grid cell {cell} out of range 0..{}", cells.len())))?;
        Ok(GclTrainConfig {
            psi_hidden,
            weight_decay,
            seed: seed::derive(self.seed, seed::STREAM_GCL, cell as u64),
            ..self.gcl.clone()
        })
    }
}

fn train_size(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).round() as usize
}

/// Uniform random split without replacement into `round(fraction n)` training
/// rows and the rest. Both parts keep the original row order.
pub fn split_target(target: &DomainDataset, fraction: f64, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    let (train, test) = split_indices(target.len(), fraction, seed)?;
    Ok((target.subset(&train), target.subset(&test)))
}

/// Index form of [`split_target`].
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid(format!("train fraction must be in (0, 1), got {fraction}")));
    }
    let k = train_size(n, fraction);
    if k < 2 {
        return Err(invalid(format!("split of {n} rows at fraction {fraction} leaves {k} training rows; need >= 2")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, seed::STREAM_SPLIT, 0));
    let mut train = idx[..k].to_vec();
    let mut test = idx[k..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn features_and_labels(rows: &Tensor) -> (Tensor, Vec<f64>) {
    let d = rows.cols();
    (rows.select_cols(0, d - 1), rows.column(d - 1))
}

/// KRR with median-heuristic bandwidth and LOOCV ridge selection over
/// `held_out` rows of `rows` (features then label).
pub fn fit_selected_krr(rows: &Tensor, held_out: &[usize]) -> Result<(KrrModel, LambdaSelection)> {
    if rows.cols() < 2 {
        return Err(invalid("rows need at least one feature and a label"));
    }
    let (x, y) = features_and_labels(rows);
    let gamma = median_bandwidth(&x)?;
    let sel = select_lambda(&x, &y, gamma, held_out)?;
    Ok((fit_krr(&x, &y, sel.lambda, gamma)?, sel))
}

/// One trained grid cell: its settings, the flow at every snapshot epoch,
/// and the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSnapshots {
    pub cell: usize,
    pub psi_hidden: usize,
    pub weight_decay: f64,
    pub snapshots: Vec<(usize, FlowParams)>,
    pub log: TrainingLog,
}

/// Trains every grid cell on the sources and keeps the flow at every
/// snapshot epoch. Training never looks at target data, so one set of
/// snapshots serves every split of the same experiment.
pub fn train_cells(sources: &[DomainDataset], config: &ExperimentConfig) -> Result<Vec<CellSnapshots>> {
    let n_cells = config.grid.cells().len();
    (0..n_cells)
        .into_par_iter()
        .map(|cell| {
            let cfg = config.cell_config(cell)?;
            let mut snapshots = Vec::new();
            let mut epoch = 0;
            let (_, log) = train_gcl(sources, &cfg, |m| {
                epoch += cfg.eval_every;
                snapshots.push((epoch, m.flow.clone()));
                0.0
            })?;
            Ok(CellSnapshots {
                cell,
                psi_hidden: cfg.psi_hidden,
                weight_decay: cfg.weight_decay,
                snapshots,
                log,
            })
        })
        .collect()
}

/// Novelty filter fitted on pooled source rows with `gamma = D`.
pub fn fit_source_filter(sources: &[DomainDataset], nu: f64) -> Result<OcsvmModel> {
    let pooled = pool_rows(sources)?;
    fit_ocsvm(&pooled, nu, pooled.cols() as f64)
}

/// Result of scoring one flow on the target training rows.
#[derive(Clone, Debug)]
pub struct SnapshotFit {
    pub augmented: AugmentedSet,
    pub gamma: f64,
    pub selection: LambdaSelection,
}

/// Extract, recombine, synthesize, filter, then select the ridge by LOOCV
/// over the original target rows.
pub fn score_flow(
    flow: &FlowParams,
    target_train: &DomainDataset,
    filter: &dyn NoveltyFilter,
    budget: usize,
    plan_seed: u64,
    strict: bool,
) -> Result<SnapshotFit> {
    let ics = extract_ics(flow, target_train)?;
    let mut rng = seed::rng(plan_seed, seed::STREAM_PLAN, 0);
    let plan = plan_combinations(ics.rows(), ics.cols(), budget, &mut rng)?;
    let candidates = synthesize_candidates(flow, &ics, &plan)?;
    let augmented = filter_and_assemble(&candidates, &plan, filter, &target_train.rows)?;
    let rows = augmented.training_rows();
    let (x, y) = features_and_labels(&rows);
    let gamma = median_bandwidth(&x)?;
    let held_out: Vec<usize> = (0..target_train.len()).collect();
    let selection = if strict {
        select_lambda_strict(&x, &y, gamma, &held_out, &augmented.derived_rows())?
    } else {
        select_lambda(&x, &y, gamma, &held_out)?
    };
    Ok(SnapshotFit {
        augmented,
        gamma,
        selection,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptDiagnostics {
    pub cell: usize,
    pub psi_hidden: usize,
    pub weight_decay: f64,
    pub epoch: usize,
    pub loocv: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Originals plus kept synthetic rows.
    pub augmented_size: usize,
    pub candidates: usize,
    pub kept_fraction: f64,
    pub gcl_trainings: usize,
    /// Snapshots whose scoring failed, with the reason.
    pub failed_snapshots: Vec<(usize, usize, String)>,
}

#[derive(Clone, Debug)]
pub struct Adapted {
    pub model: KrrModel,
    pub augmented: AugmentedSet,
    pub diagnostics: AdaptDiagnostics,
}

/// Scores every snapshot of every cell on `target_train` and fits KRR on the
/// augmented set of the best one (earliest cell, then epoch, on ties).
pub fn adapt_with_snapshots(
    cells: &[CellSnapshots],
    target_train: &DomainDataset,
    filter: &dyn NoveltyFilter,
    config: &ExperimentConfig,
    plan_seed: u64,
) -> Result<Adapted> {
    if target_train.is_empty() {
        return Err(invalid("target training set is empty"));
    }
    let jobs: Vec<(usize, usize)> = cells
        .iter()
        .enumerate()
        .flat_map(|(c, cs)| (0..cs.snapshots.len()).map(move |s| (c, s)))
        .collect();
    let fits: Vec<Result<SnapshotFit>> = jobs
        .par_iter()
        .map(|&(c, s)| {
            score_flow(&cells[c].snapshots[s].1, target_train, filter, config.budget, plan_seed, config.strict_loocv)
        })
        .collect();
    let mut best: Option<(usize, SnapshotFit)> = None;
    let mut failed = Vec::new();
    for (j, fit) in fits.into_iter().enumerate() {
        let (c, s) = jobs[j];
        match fit {
            Ok(f) if f.selection.score.is_finite() => {
                if best.as_ref().is_none_or(|(_, b)| f.selection.score < b.selection.score) {
                    best = Some((j, f));
                }
            }
            Ok(f) => failed.push((cells[c].cell, cells[c].snapshots[s].0, format!("LOOCV score {}", f.selection.score))),
            Err(e) => failed.push((cells[c].cell, cells[c].snapshots[s].0, e.to_string())),
        }
    }
    let Some((j, fit)) = best else {
        let reason = failed.first().map(|f| f.2.clone()).unwrap_or_else(|| "no snapshots".into());
        return Err(invalid(format!("no snapshot produced a usable predictor: {reason}")));
    };
    let (c, s) = jobs[j];
    let rows = fit.augmented.training_rows();
    let (x, y) = features_and_labels(&rows);
    let model = fit_krr(&x, &y, fit.selection.lambda, fit.gamma)?;
    let diagnostics = AdaptDiagnostics {
        cell: cells[c].cell,
        psi_hidden: cells[c].psi_hidden,
        weight_decay: cells[c].weight_decay,
        epoch: cells[c].snapshots[s].0,
        loocv: fit.selection.score,
        lambda: fit.selection.lambda,
        gamma: fit.gamma,
        augmented_size: fit.augmented.len(),
        candidates: fit.augmented.tuples.len(),
        kept_fraction: fit.augmented.kept_fraction(),
        gcl_trainings: 0,
        failed_snapshots: failed,
    };
    Ok(Adapted {
        model,
        augmented: fit.augmented,
        diagnostics,
    })
}

/// The proposed method for one split: trains every grid cell, then adapts.
pub fn pipeline_adapt(sources: &[DomainDataset], target_train: &DomainDataset, config: &ExperimentConfig) -> Result<Adapted> {
    if sources.len() < 2 {
        return Err(invalid(format!("need at least 2 source domains, got {}", sources.len())));
    }
    config.validate()?;
    let cells = train_cells(sources, config)?;
    let filter = fit_source_filter(sources, config.nu)?;
    let mut out = adapt_with_snapshots(&cells, target_train, &filter, config, config.seed)?;
    out.diagnostics.gcl_trainings = cells.len();
    Ok(out)
}

/// Adaptation with a given flow in place of GCL (test hook).
pub fn adapt_with_flow(
    flow: &FlowParams,
    target_train: &DomainDataset,
    filter: &dyn NoveltyFilter,
    config: &ExperimentConfig,
) -> Result<Adapted> {
    let cells = [CellSnapshots {
        cell: 0,
        psi_hidden: 0,
        weight_decay: 0.0,
        snapshots: vec![(0, flow.clone())],
        log: TrainingLog::default(),
    }];
    adapt_with_snapshots(&cells, target_train, filter, config, config.seed)
}

#[derive(Clone, Debug)]
pub enum BaselineOutcome {
    Model(KrrModel, LambdaSelection),
    /// LOO is an error estimate, not a predictor.
    Reference(f64),
}

/// TarOnly, SrcOnly, SandTV or LOO.
pub fn run_baseline(
    method: Method,
    sources: &[DomainDataset],
    target_train: &DomainDataset,
    target_full: &DomainDataset,
) -> Result<BaselineOutcome> {
    let model = |rows: &Tensor, held: &[usize]| -> Result<BaselineOutcome> {
        let (m, sel) = fit_selected_krr(rows, held)?;
        Ok(BaselineOutcome::Model(m, sel))
    };
    match method {
        Method::TarOnly => {
            if target_train.is_empty() {
                return Err(invalid("TarOnly needs target training rows"));
            }
            model(&target_train.rows, &(0..target_train.len()).collect::<Vec<_>>())
        }
        Method::SrcOnly => {
            let pooled = pool_rows(sources)?;
            model(&pooled, &(0..pooled.rows()).collect::<Vec<_>>())
        }
        Method::SandTV => {
            if target_train.is_empty() {
                return Err(invalid("SandTV needs target training rows"));
            }
            let mut all: Vec<DomainDataset> = sources.to_vec();
            all.push(target_train.clone());
            let pooled = pool_rows(&all)?;
            let start = pooled.rows() - target_train.len();
            model(&pooled, &(start..pooled.rows()).collect::<Vec<_>>())
        }
        Method::Loo => {
            let (_, sel) = fit_selected_krr(&target_full.rows, &(0..target_full.len()).collect::<Vec<_>>())?;
            Ok(BaselineOutcome::Reference(sel.score))
        }
        Method::Prop => Err(invalid("Prop is not a baseline; use pipeline_adapt")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub repeat: usize,
    pub mse: Option<f64>,
    pub error: Option<String>,
    /// Test-row predictions `(target row, truth, prediction)`; empty for LOO.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predictions: Vec<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub completed: usize,
    pub raw_mean: f64,
    pub raw_stderr: f64,
    pub normalized_mean: f64,
    pub normalized_stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatDiagnostics {
    pub repeat: usize,
    pub train_indices: Vec<usize>,
    pub prop: Option<AdaptDiagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub target: String,
    pub repeats: usize,
    /// Ordered by method (config order), then repeat.
    pub cells: Vec<CellResult>,
    pub summary: Vec<MethodSummary>,
    pub diagnostics: Vec<RepeatDiagnostics>,
    /// Raw LOO mean used to normalize; NaN when LOO was not run or failed.
    pub normalizer: f64,
}

/// Mean and standard error (sample std over `sqrt(count)`).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

impl ResultTable {
    /// Builds the summary from raw cells, normalizing by the LOO raw mean.
    pub fn from_cells(
        target: String,
        repeats: usize,
        methods: &[Method],
        cells: Vec<CellResult>,
        diagnostics: Vec<RepeatDiagnostics>,
    ) -> Self {
        let values = |m: Method| -> Vec<f64> { cells.iter().filter(|c| c.method == m).filter_map(|c| c.mse).collect() };
        let normalizer = if methods.contains(&Method::Loo) {
            let (mean, _) = mean_stderr(&values(Method::Loo));
            if mean > 0.0 { mean } else { f64::NAN }
        } else {
            f64::NAN
        };
        let summary = methods
            .iter()
            .map(|&m| {
                let v = values(m);
                let (raw_mean, raw_stderr) = mean_stderr(&v);
                MethodSummary {
                    method: m,
                    completed: v.len(),
                    raw_mean,
                    raw_stderr,
                    normalized_mean: raw_mean / normalizer,
                    normalized_stderr: raw_stderr / normalizer,
                }
            })
            .collect();
        Self {
            target,
            repeats,
            cells,
            summary,
            diagnostics,
            normalizer,
        }
    }

    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn raw(&self, method: Method) -> Vec<Option<f64>> {
        self.cells.iter().filter(|c| c.method == method).map(|c| c.mse).collect()
    }

    pub fn failures(&self) -> Vec<&CellResult> {
        self.cells.iter().filter(|c| c.error.is_some()).collect()
    }

    /// `method,repeat,mse,error` rows.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("method,repeat,mse,error\n");
        for c in &self.cells {
            let mse = c.mse.map(|v| format!("{v:?}")).unwrap_or_default();
            let err = c.error.as_deref().unwrap_or("").replace(['"', '\n'], " ");
            let _ = writeln!(out, "{},{},{mse},\"{err}\"", c.method, c.repeat);
        }
        out
    }

    /// `method,completed,raw_mean,raw_stderr,normalized_mean,normalized_stderr`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,completed,raw_mean,raw_stderr,normalized_mean,normalized_stderr\n");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{:?},{:?}",
                s.method, s.completed, s.raw_mean, s.raw_stderr, s.normalized_mean, s.normalized_stderr
            );
        }
        out
    }

    /// Human-readable table with 4 significant digits.
    pub fn render(&self) -> String {
        let mut out = format!("target {} ({} repeats)\n", self.target, self.repeats);
        let _ = writeln!(out, "{:<8} {:>12} {:>12} {:>10} {:>10}", "method", "normalized", "(stderr)", "raw", "done");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{:<8} {:>12} {:>12} {:>10} {:>7}/{}",
                s.method.name(),
                sig4(s.normalized_mean),
                format!("({})", sig4(s.normalized_stderr)),
                sig4(s.raw_mean),
                s.completed,
                self.repeats
            );
        }
        out
    }

    /// `method,repeat,row,truth,prediction` for every test-row prediction.
    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("method,repeat,row,truth,prediction\n");
        for c in &self.cells {
            for (row, t, p) in &c.predictions {
                let _ = writeln!(out, "{},{},{row},{t:?},{p:?}", c.method, c.repeat);
            }
        }
        out
    }

    /// Writes `results.csv`, `summary.csv`, `predictions.csv`,
    /// `results.json` and `diagnostics.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.csv"), self.cells_csv())?;
        std::fs::write(dir.join("predictions.csv"), self.predictions_csv())?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        std::fs::write(dir.join("results.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("diagnostics.json"), serde_json::to_string_pretty(&self.diagnostics)?)?;
        Ok(())
    }
}

/// Formats with 4 significant digits.
pub fn sig4(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0.000".into();
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{v:.3e}");
    }
    let decimals = (3 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Seeds of repeat `r`: split and augmentation plan.
pub fn repeat_seeds(master: u64, repeat: usize) -> (u64, u64) {
    (
        seed::derive(master, seed::STREAM_SPLIT, repeat as u64),
        seed::derive(master, seed::STREAM_PLAN, repeat as u64),
    )
}

/// Runs every configured method on `config.repeats` random splits of the
/// target domain. Failures are recorded per cell.
pub fn run_experiment(domains: &[DomainDataset], config: &ExperimentConfig) -> Result<ResultTable> {
    config.validate()?;
    let target = domains.iter().find(|d| d.id == config.target).ok_or_else(|| {
        let ids: Vec<&str> = domains.iter().map(|d| d.id.as_str()).collect();
        invalid(format!("target {:?} not found; available domains: {}", config.target, ids.join(", ")))
    })?;
    let sources: Vec<DomainDataset> = domains.iter().filter(|d| d.id != config.target).cloned().collect();
    if sources.len() < 2 {
        return Err(invalid(format!("need at least 2 source domains, got {}", sources.len())));
    }
    let wants = |m: Method| config.methods.contains(&m);

    // Split-independent work is done once.
    let prop_setup = if wants(Method::Prop) {
        train_cells(&sources, config).and_then(|cells| Ok((cells, fit_source_filter(&sources, config.nu)?)))
    } else {
        Err(invalid("Prop not requested"))
    };
    let src_only = if wants(Method::SrcOnly) {
        run_baseline(Method::SrcOnly, &sources, target, target)
    } else {
        Err(invalid("SrcOnly not requested"))
    };
    let loo = if wants(Method::Loo) {
        run_baseline(Method::Loo, &sources, target, target)
    } else {
        Err(invalid("LOO not requested"))
    };

    let per_repeat: Vec<(Vec<CellResult>, RepeatDiagnostics)> = (0..config.repeats)
        .into_par_iter()
        .map(|r| {
            let (split_seed, plan_seed) = repeat_seeds(config.seed, r);
            let mut cells = Vec::new();
            let mut diag = RepeatDiagnostics {
                repeat: r,
                train_indices: Vec::new(),
                prop: None,
            };
            let split = split_indices(target.len(), config.train_fraction, split_seed);
            for &m in &config.methods {
                let outcome = split.as_ref().map_err(|e| invalid(e.to_string())).and_then(|(tr, te)| {
                    let train = target.subset(tr);
                    let test = target.subset(te);
                    let (tx, ty) = features_and_labels(&test.rows);
                    let evaluate = |model: &KrrModel| {
                        let pred = model.predict_batch(&tx);
                        let rows = te.iter().zip(&ty).zip(&pred).map(|((&i, &t), &p)| (i, t, p)).collect();
                        (model.mse(&tx, &ty), rows)
                    };
                    let scored = |outcome: &BaselineOutcome| match outcome {
                        BaselineOutcome::Model(model, _) => evaluate(model),
                        BaselineOutcome::Reference(v) => (*v, Vec::new()),
                    };
                    match m {
                        Method::Prop => {
                            let (cells, filter) = prop_setup.as_ref().map_err(|e| invalid(e.to_string()))?;
                            let mut a = adapt_with_snapshots(cells, &train, filter, config, plan_seed)?;
                            a.diagnostics.gcl_trainings = cells.len();
                            diag.prop = Some(a.diagnostics);
                            Ok(evaluate(&a.model))
                        }
                        Method::SrcOnly => Ok(scored(src_only.as_ref().map_err(|e| invalid(e.to_string()))?)),
                        Method::Loo => Ok(scored(loo.as_ref().map_err(|e| invalid(e.to_string()))?)),
                        _ => Ok(scored(&run_baseline(m, &sources, &train, target)?)),
                    }
                });
                let outcome = outcome.and_then(|(v, p)| {
                    if v.is_finite() {
                        Ok((v, p))
                    } else {
                        Err(invalid(format!("non-finite test MSE {v}")))
                    }
                });
                cells.push(match outcome {
                    Ok((v, predictions)) => CellResult {
                        method: m,
                        repeat: r,
                        mse: Some(v),
                        error: None,
                        predictions,
                    },
                    Err(e) => CellResult {
                        method: m,
                        repeat: r,
                        mse: None,
                        error: Some(e.to_string()),
                        predictions: Vec::new(),
                    },
                });
            }
            if let Ok((tr, _)) = split {
                diag.train_indices = tr;
            }
            (cells, diag)
        })
        .collect();

    let mut cells = Vec::with_capacity(config.repeats * config.methods.len());
    for &m in &config.methods {
        for (rc, _) in &per_repeat {
            cells.extend(rc.iter().filter(|c| c.method == m).cloned());
        }
    }
    let diagnostics = per_repeat.into_iter().map(|(_, d)| d).collect();
    Ok(ResultTable::from_cells(config.target.clone(), config.repeats, &config.methods, cells, diagnostics))
}

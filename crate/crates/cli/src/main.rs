mod config;
mod manifest;
mod theory;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mechxfer_core::data::{load_panel_csv, write_panel_csv};
use mechxfer_core::experiment::{mean_stderr, run_experiment, sig4, Method, ResultTable};
use mechxfer_core::synth::generate_benchmark;
use mechxfer_core::{DomainDataset, PanelSchema};
use serde::Serialize;

use config::RunConfig;
use manifest::RunManifest;

const SCHEMA_FILE: &str = "schema.json";

#[derive(Parser, Debug)]
#[command(name = "mechxfer", version, about = "Few-shot domain adaptation by mechanism transfer")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "mechxfer-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark with known ICs and mixing.
    Synth,
    /// Run the adaptation protocol on panel CSVs.
    Adapt {
        /// CSV files or directories of CSVs.
        inputs: Vec<PathBuf>,
        /// Data directory used when no inputs are given.
        #[arg(long, env = "MECHXFER_DATA")]
        data: Option<PathBuf>,
        /// Target domain id.
        #[arg(long)]
        target: Option<String>,
        /// Comma-separated subset of Prop,TarOnly,SrcOnly,SandTV,LOO.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Maximum number of recombined candidates per snapshot.
        #[arg(long)]
        budget: Option<usize>,
        /// Number of random train/test splits of the target.
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Check the U/V-statistic identities numerically.
    VerifyTheory {
        /// Replace the decomposition weights by 1/D (negative control).
        #[arg(long, hide = true)]
        inject_wrong_weights: bool,
    },
    /// Recompute test metrics from a saved predictions.csv.
    Eval {
        /// predictions.csv written by `adapt`, with its results.json alongside.
        predictions: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply_seed(cli.seed);
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match cli.command {
        Command::Synth => synth(&cfg, &cli.out),
        Command::Adapt {
            inputs,
            data,
            target,
            methods,
            budget,
            repeats,
        } => {
            if let Some(t) = target {
                cfg.experiment.target = t;
            }
            if let Some(m) = methods {
                cfg.experiment.methods = m.iter().map(|s| s.trim().parse()).collect::<Result<_, _>>()?;
            }
            if let Some(b) = budget {
                cfg.experiment.budget = b;
            }
            if let Some(r) = repeats {
                cfg.experiment.repeats = r;
            }
            let inputs = if inputs.is_empty() { data.into_iter().collect() } else { inputs };
            adapt(&cfg, &inputs, &cli.out)
        }
        Command::VerifyTheory { inject_wrong_weights } => verify_theory(&cfg, inject_wrong_weights, &cli.out),
        Command::Eval { predictions } => eval(&predictions, &cli.out),
    }
}

fn synthetic_schema(dim: usize) -> PanelSchema {
    PanelSchema {
        domain_column: "domain".into(),
        feature_columns: (1..dim).map(|i| format!("x{i}")).collect(),
        label_column: "y".into(),
    }
}

#[derive(Serialize)]
struct GroundTruth<'a> {
    config: &'a mechxfer_core::SynthConfig,
    family: &'a mechxfer_core::IcFamily,
    mixing: &'a mechxfer_core::GroundTruthMixing,
    variability_rank: usize,
    source_ics: BTreeMap<&'a str, &'a mechxfer_core::Tensor>,
    target_ics: &'a mechxfer_core::Tensor,
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let manifest = RunManifest::start("synth", cfg, cfg.synth.seed)?;
    let bench = generate_benchmark(&cfg.synth)?;
    let schema = synthetic_schema(cfg.synth.dim);
    for d in bench.sources.iter().chain(std::iter::once(&bench.target)) {
        write_panel_csv(out.join(format!("{}.csv", d.id)), &schema, std::slice::from_ref(d))?;
    }
    std::fs::write(out.join(SCHEMA_FILE), serde_json::to_string_pretty(&schema)?)?;
    let truth = GroundTruth {
        config: &bench.config,
        family: &bench.family,
        mixing: &bench.mixing,
        variability_rank: bench.variability_rank,
        source_ics: bench.sources.iter().map(|d| d.id.as_str()).zip(&bench.source_ics).collect(),
        target_ics: &bench.target_ics,
    };
    std::fs::write(out.join("truth.json"), serde_json::to_string_pretty(&truth)?)?;
    manifest.finish(out, true)?;
    println!(
        "wrote {} source domains and target {:?} to {} (variability rank {})",
        bench.sources.len(),
        bench.target.id,
        out.display(),
        bench.variability_rank
    );
    Ok(ExitCode::SUCCESS)
}

fn csv_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            bail!("input {} does not exist", p.display());
        }
    }
    if files.is_empty() {
        bail!("no input CSV files; pass paths or set MECHXFER_DATA");
    }
    Ok(files)
}

fn resolve_schema(cfg: &RunConfig, files: &[PathBuf]) -> Result<PanelSchema> {
    if let Some(s) = &cfg.schema {
        return Ok(s.clone());
    }
    for f in files {
        let candidate = f.parent().unwrap_or(Path::new(".")).join(SCHEMA_FILE);
        if candidate.is_file() {
            let text = std::fs::read_to_string(&candidate)?;
            return serde_json::from_str(&text).with_context(|| format!("parsing {}", candidate.display()));
        }
    }
    Ok(PanelSchema::gasoline())
}

fn load_domains(files: &[PathBuf], schema: &PanelSchema) -> Result<Vec<DomainDataset>> {
    let mut domains: Vec<DomainDataset> = Vec::new();
    for f in files {
        for d in load_panel_csv(f, schema).with_context(|| format!("loading {}", f.display()))? {
            if domains.iter().any(|e| e.id == d.id) {
                bail!("domain {:?} appears in more than one input file", d.id);
            }
            domains.push(d);
        }
    }
    Ok(domains)
}

fn adapt(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<ExitCode> {
    let files = csv_files(inputs)?;
    let schema = resolve_schema(cfg, &files)?;
    let mut manifest = RunManifest::start("adapt", cfg, cfg.experiment.seed)?;
    manifest.add_inputs(&files)?;
    let domains = load_domains(&files, &schema)?;
    if cfg.experiment.target.is_empty() {
        let ids: Vec<&str> = domains.iter().map(|d| d.id.as_str()).collect();
        bail!("no target given (--target); available domains: {}", ids.join(", "));
    }
    eprintln!(
        "adapting to {:?}: {} domains, {} repeats, methods {:?}",
        cfg.experiment.target,
        domains.len(),
        cfg.experiment.repeats,
        cfg.experiment.methods
    );
    let table = run_experiment(&domains, &cfg.experiment)?;
    table.write(out)?;
    print!("{}", table.render());
    let failures = table.failures();
    manifest.finish(out, failures.is_empty())?;
    if failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for c in &failures {
            eprintln!("failed: {} repeat {}: {}", c.method, c.repeat, c.error.as_deref().unwrap_or(""));
        }
        Ok(ExitCode::FAILURE)
    }
}

fn verify_theory(cfg: &RunConfig, wrong_weights: bool, out: &Path) -> Result<ExitCode> {
    let manifest = RunManifest::start("verify-theory", cfg, cfg.theory.seed)?;
    let report = theory::run(&cfg.theory, wrong_weights)?;
    std::fs::write(out.join("theory_report.json"), serde_json::to_string_pretty(&report)?)?;
    manifest.finish(out, report.all_passed)?;
    for c in &report.checks {
        println!(
            "{:<22} {}  measured {} vs {}",
            c.name,
            if c.passed { "pass" } else { "FAIL" },
            sig4(c.measured),
            sig4(c.tolerance)
        );
    }
    Ok(if report.all_passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

#[derive(Serialize)]
struct EvalSummary {
    method: String,
    repeats: usize,
    mean_mse: f64,
    stderr: f64,
    normalized_mean: f64,
    normalized_stderr: f64,
}

fn eval(predictions: &Path, out: &Path) -> Result<ExitCode> {
    let mut manifest = RunManifest::start("eval", &serde_json::json!({ "predictions": predictions }), 0)?;
    manifest.add_inputs(&[predictions.to_path_buf()])?;
    let mut reader = csv::Reader::from_path(predictions).with_context(|| format!("reading {}", predictions.display()))?;
    // (method, repeat) -> (sum of squared errors, count)
    let mut cells: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).with_context(|| format!("line {}: missing column {k}", i + 2));
        let method = field(0)?.to_string();
        let repeat: usize = field(1)?.parse().with_context(|| format!("line {}: repeat", i + 2))?;
        let truth: f64 = field(3)?.parse().with_context(|| format!("line {}: truth", i + 2))?;
        let pred: f64 = field(4)?.parse().with_context(|| format!("line {}: prediction", i + 2))?;
        let e = cells.entry((method, repeat)).or_default();
        e.0 += (truth - pred).powi(2);
        e.1 += 1;
    }
    if cells.is_empty() {
        bail!("{} has no prediction rows", predictions.display());
    }
    // normalize by the LOO reference stored beside the predictions, if any
    let normalizer = predictions
        .parent()
        .map(|p| p.join("results.json"))
        .filter(|p| p.is_file())
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|t| serde_json::from_str::<ResultTable>(&t).ok())
        .map(|t| t.normalizer)
        .unwrap_or(f64::NAN);
    let mut per_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((m, _), (sse, n)) in &cells {
        per_method.entry(m.clone()).or_default().push(sse / *n as f64);
    }
    let order = |m: &str| m.parse::<Method>().map(|x| x as usize).unwrap_or(usize::MAX);
    let mut names: Vec<&String> = per_method.keys().collect();
    names.sort_by_key(|m| order(m));
    let summary: Vec<EvalSummary> = names
        .into_iter()
        .map(|m| {
            let v = &per_method[m];
            let (mean, se) = mean_stderr(v);
            EvalSummary {
                method: m.clone(),
                repeats: v.len(),
                mean_mse: mean,
                stderr: se,
                normalized_mean: mean / normalizer,
                normalized_stderr: se / normalizer,
            }
        })
        .collect();
    println!("{:<8} {:>10} {:>10} {:>11}", "method", "mse", "(stderr)", "normalized");
    for s in &summary {
        println!(
            "{:<8} {:>10} {:>10} {:>11}",
            s.method,
            sig4(s.mean_mse),
            format!("({})", sig4(s.stderr)),
            sig4(s.normalized_mean)
        );
    }
    std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&summary)?)?;
    manifest.finish(out, true)?;
    Ok(ExitCode::SUCCESS)
}

//! End-to-end behaviour of the experiment driver on small problems.

use mechxfer_core::data::{load_panel_csv, DomainDataset, PanelSchema};
use mechxfer_core::experiment::{
    adapt_with_flow, fit_source_filter, pipeline_adapt, run_baseline, run_experiment, split_indices, BaselineOutcome,
    CellResult, ExperimentConfig, GclGrid, Method, ResultTable,
};
use mechxfer_core::flow::{FlowConfig, FlowParams};
use mechxfer_core::ica::GclTrainConfig;
use mechxfer_core::synth::{generate_benchmark, sample_domain, GroundTruthMixing, IcFamily, Marginal, SynthConfig};

fn tiny_gcl() -> GclTrainConfig {
    GclTrainConfig {
        max_epochs: 4,
        eval_every: 2,
        flow_depth: 2,
        coupling_hidden: 8,
        ..GclTrainConfig::default()
    }
}

fn tiny_domains(seed: u64) -> Vec<DomainDataset> {
    let b = generate_benchmark(&SynthConfig {
        rows_per_source: 60,
        target_rows: 24,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut d = b.sources;
    d.push(b.target);
    d
}

fn tiny_config(methods: Vec<Method>) -> ExperimentConfig {
    ExperimentConfig {
        target: "target".into(),
        repeats: 2,
        methods,
        gcl: tiny_gcl(),
        grid: GclGrid {
            psi_hidden: vec![4],
            weight_decay: vec![0.01],
        },
        budget: 500,
        ..ExperimentConfig::default()
    }
}

#[test]
fn experiment_is_bit_reproducible() {
    let domains = tiny_domains(3);
    let cfg = tiny_config(Method::ALL.to_vec());
    let a = run_experiment(&domains, &cfg).unwrap();
    let b = run_experiment(&domains, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.failures().is_empty(), "{:?}", a.failures());
    assert_eq!(a.cells.len(), Method::ALL.len() * 2);
}

#[test]
fn test_labels_never_reach_training() {
    let domains = tiny_domains(4);
    let cfg = ExperimentConfig {
        repeats: 1,
        ..tiny_config(vec![Method::Prop, Method::TarOnly, Method::SandTV])
    };
    let before = run_experiment(&domains, &cfg).unwrap();
    let train = &before.diagnostics[0].train_indices;

    let mut perturbed = domains.clone();
    let target = perturbed.last_mut().unwrap();
    let y = target.dim() - 1;
    for i in (0..target.len()).filter(|i| !train.contains(i)) {
        target.rows.set(i, y, target.rows.get(i, y) + 100.0);
    }
    let after = run_experiment(&perturbed, &cfg).unwrap();

    assert_eq!(before.diagnostics, after.diagnostics);
    for (a, b) in before.cells.iter().zip(&after.cells) {
        let preds = |c: &CellResult| c.predictions.iter().map(|&(i, _, p)| (i, p)).collect::<Vec<_>>();
        assert_eq!(preds(a), preds(b), "{} predictions moved", a.method);
        assert!(b.mse.unwrap() > a.mse.unwrap());
    }
}

#[test]
fn every_grid_cell_is_trained_once() {
    let domains = tiny_domains(5);
    let (sources, target) = domains.split_at(domains.len() - 1);
    let cfg = ExperimentConfig {
        grid: GclGrid {
            psi_hidden: vec![4, 6],
            weight_decay: vec![0.01, 0.1],
        },
        ..tiny_config(vec![Method::Prop])
    };
    let (train, _) = split_indices(target[0].len(), cfg.train_fraction, 0).unwrap();
    let out = pipeline_adapt(sources, &target[0].subset(&train), &cfg).unwrap();
    assert_eq!(out.diagnostics.gcl_trainings, 4);
    assert!(out.diagnostics.cell < 4);
    assert!([0, 2, 4].contains(&out.diagnostics.epoch));
    assert_eq!(out.augmented.len(), out.diagnostics.augmented_size);
}

#[test]
fn true_unmixing_reduces_excess_risk_on_identity_mixing() {
    // Independent ICs, so the target regression function is flat and
    // recombination draws from the true joint.
    let locs = [(-0.5, 0.4), (0.3, -0.6), (0.8, 0.2), (-0.2, 0.9), (0.1, -0.1), (0.2, 0.3)];
    let family = IcFamily::new(
        locs.iter()
            .enumerate()
            .map(|(k, &(a, b))| vec![Marginal::gaussian(a, 0.8 + 0.1 * k as f64), Marginal::gaussian(b, 1.0)])
            .collect(),
    )
    .unwrap();
    let mixing = GroundTruthMixing::Identity { dim: 2 };
    let sources: Vec<DomainDataset> =
        (0..5).map(|k| sample_domain(&family, &mixing, k, 200, 11, format!("s{k}")).unwrap().0).collect();
    let (target, _) = sample_domain(&family, &mixing, 5, 40, 11, "target").unwrap();
    let filter = fit_source_filter(&sources, 0.1).unwrap();
    let flow = FlowParams::identity(FlowConfig::new(2).with_depth(2)).unwrap();

    // Unit noise dominates test MSE at this size, so score against the
    // known regression function instead.
    let truth = locs[5].1;
    let mse = |predict: &dyn Fn(&[f64]) -> f64, test: &DomainDataset| -> f64 {
        test.rows.iter_rows().map(|r| (predict(&r[..1]) - truth).powi(2)).sum::<f64>() / test.len() as f64
    };
    let mut wins = 0;
    for r in 0..10u64 {
        let (train, test) = split_indices(target.len(), 0.2, r).unwrap();
        let (tr, te) = (target.subset(&train), target.subset(&test));
        let cfg = ExperimentConfig {
            seed: r,
            ..ExperimentConfig::default()
        };
        let prop = adapt_with_flow(&flow, &tr, &filter, &cfg).unwrap();
        let BaselineOutcome::Model(tar, _) = run_baseline(Method::TarOnly, &sources, &tr, &target).unwrap() else {
            unreachable!()
        };
        let (p, t) = (mse(&|x| prop.model.predict(x), &te), mse(&|x| tar.predict(x), &te));
        if p <= t {
            wins += 1;
        }
    }
    assert!(wins > 5, "Prop closer to the truth than TarOnly in only {wins}/10 repeats");
}

#[test]
fn summary_statistics_on_a_toy_table() {
    let methods = [Method::Prop, Method::Loo];
    let cell = |method, repeat, mse| CellResult {
        method,
        repeat,
        mse: Some(mse),
        error: None,
        predictions: Vec::new(),
    };
    let cells = vec![
        cell(Method::Prop, 0, 1.0),
        cell(Method::Prop, 1, 2.0),
        cell(Method::Prop, 2, 3.0),
        cell(Method::Loo, 0, 2.0),
        cell(Method::Loo, 1, 2.0),
        cell(Method::Loo, 2, 2.0),
    ];
    let t = ResultTable::from_cells("toy".into(), 3, &methods, cells, Vec::new());
    let p = t.summary_for(Method::Prop).unwrap();
    let se = 1.0 / 3f64.sqrt();
    assert_eq!(p.raw_mean, 2.0);
    assert!((p.raw_stderr - se).abs() < 1e-15);
    assert_eq!(p.normalized_mean, 1.0);
    assert!((p.normalized_stderr - se / 2.0).abs() < 1e-15);
    assert_eq!(t.summary_for(Method::Loo).unwrap().raw_stderr, 0.0);
}

#[test]
fn gasoline_panel_shape() {
    let Ok(path) = std::env::var("MECHXFER_GASOLINE") else {
        return;
    };
    let domains = load_panel_csv(&path, &PanelSchema::gasoline()).unwrap();
    assert_eq!(domains.len(), 18);
    for d in &domains {
        assert_eq!((d.len(), d.dim()), (19, 4), "{}", d.id);
    }
}

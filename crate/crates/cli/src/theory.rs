//! The `verify-theory` checks.

use anyhow::Result;
use mechxfer_core::synth::GroundTruthMixing;
use mechxfer_core::ustat::{
    decomposition_weights, exact_expectation_check, mc_umvue_check, recombination_kernel, verify_with_weights,
    DiscreteMarginal,
};
use mechxfer_core::Tensor;
use num_traits::One;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::TheoryConfig;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// The quantity compared against `tolerance`.
    pub measured: f64,
    pub tolerance: f64,
    pub details: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub schema_version: u32,
    pub all_passed: bool,
    pub checks: Vec<Check>,
}

/// Wrong-weight negative control: `1/D` for every degree.
pub fn uniform_weights(dim: usize) -> Vec<f64> {
    vec![1.0 / dim as f64; dim]
}

fn decomposition(cfg: &TheoryConfig, wrong_weights: bool) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst: f64 = 0.0;
    let mut cells = Vec::new();
    for n in [3, 4, 5] {
        for d in [2, 3] {
            let weights = if wrong_weights {
                uniform_weights(d)
            } else {
                decomposition_weights(n, d)?.as_f64()
            };
            let mut cell_worst: f64 = 0.0;
            for _ in 0..cfg.kernels_per_cell {
                let coef: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-1.5..1.5)).collect();
                let kernel = recombination_kernel(d, move |s: &[f64]| {
                    let lin: f64 = s.iter().zip(&coef).map(|(x, c)| c * x).sum();
                    let quad: f64 = s.iter().zip(&coef[d..]).map(|(x, c)| c * x * x).sum();
                    lin.sin() + quad.tanh()
                });
                let sample = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect())?;
                cell_worst = cell_worst.max(verify_with_weights(&kernel, &sample, &weights)?.residual);
            }
            worst = worst.max(cell_worst);
            cells.push(serde_json::json!({ "n": n, "dim": d, "max_residual": cell_worst }));
        }
    }
    let mut sums_exact = true;
    for n in 1..=50 {
        for d in 1..=n.min(6) {
            sums_exact &= decomposition_weights(n, d)?.sum().is_one();
        }
    }
    let tolerance = 1e-10;
    Ok(Check {
        name: "v_decomposition".into(),
        passed: worst < tolerance && sums_exact,
        measured: worst,
        tolerance,
        details: serde_json::json!({ "cells": cells, "weight_sums_exact": sums_exact }),
    })
}

fn expectation(cfg: &TheoryConfig) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.expectation_configs {
        let marginals = (0..2)
            .map(|_| {
                let p = rng.random_range(0.05..0.95);
                let a: f64 = rng.random_range(-2.0..2.0);
                DiscreteMarginal::new(vec![a, a + rng.random_range(0.1..2.0)], vec![p, 1.0 - p])
            })
            .collect::<mechxfer_core::Result<Vec<_>>>()?;
        let c: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = move |s: &[f64]| (c[0] + c[1] * s[0] + c[2] * s[1] + c[3] * s[0] * s[1]).powi(2);
        worst = worst.max(exact_expectation_check(&marginals, loss, 2)?.difference);
    }
    let tolerance = 1e-12;
    Ok(Check {
        name: "exact_expectation".into(),
        passed: worst < tolerance,
        measured: worst,
        tolerance,
        details: serde_json::json!({ "configurations": cfg.expectation_configs, "dim": 2, "n": 2 }),
    })
}

fn monte_carlo(cfg: &TheoryConfig) -> Result<Check> {
    let GroundTruthMixing::Flow { params: flow } = GroundTruthMixing::random_flow(2, 4, 16, cfg.seed)? else {
        unreachable!("random_flow returns a flow")
    };
    let rep = mc_umvue_check(
        |rng| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)],
        |s: &Tensor| {
            let z = flow.synthesize_batch(s)?;
            Ok(z.iter_rows().map(|r| 1.0 - (-(r[1] - 0.5 * r[0]).powi(2)).exp()).collect())
        },
        cfg.mc_n,
        cfg.mc_reps,
        cfg.mc_reference_draws,
        cfg.seed,
    )?;
    let gap = rep.variance_gap();
    let bound = 3.0 * rep.combined_stderr;
    let means = rep.means_within(3.0);
    Ok(Check {
        name: "mc_variance_ordering".into(),
        passed: gap > 0.0 && gap > bound && means,
        measured: gap,
        tolerance: bound,
        details: serde_json::to_value(&rep)?,
    })
}

pub fn run(cfg: &TheoryConfig, wrong_weights: bool) -> Result<TheoryReport> {
    let checks = vec![decomposition(cfg, wrong_weights)?, expectation(cfg)?, monte_carlo(cfg)?];
    Ok(TheoryReport {
        schema_version: REPORT_SCHEMA_VERSION,
        all_passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

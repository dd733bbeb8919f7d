//! Target augmentation. Target rows are mapped to ICs and recombined
//! dimension-wise. Recombinations go back through the flow, and only those
//! the novelty filter accepts are kept.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{invalid, shape_err, Result};
use crate::flow::FlowParams;
use crate::novelty::NoveltyFilter;
use crate::tensor::Tensor;

pub const DEFAULT_BUDGET: usize = 100_000;

const SYNTH_CHUNK: usize = 1024;

/// Row `i` is `analyze(z_i)`.
pub fn extract_ics(flow: &FlowParams, target: &DomainDataset) -> Result<Tensor> {
    if target.is_empty() {
        return Err(invalid("target has no rows"));
    }
    flow.analyze_batch(&target.rows)
}

/// Index tuples `(i_1, ..., i_D)` into the target ICs (0-based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinationPlan {
    pub n: usize,
    pub dim: usize,
    pub indices: Vec<Vec<usize>>,
    pub exhaustive: bool,
}

impl CombinationPlan {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_diagonal(tuple: &[usize]) -> bool {
        tuple.windows(2).all(|w| w[0] == w[1])
    }
}

/// All `n^D` tuples in lexicographic order when they fit in `budget`;
/// otherwise the `n` diagonal tuples plus distinct uniform draws up to
/// `budget` tuples.
pub fn plan_combinations<R: Rng + ?Sized>(n: usize, dim: usize, budget: usize, rng: &mut R) -> Result<CombinationPlan> {
    if n == 0 {
        return Err(invalid("cannot recombine zero target points"));
    }
    if dim < 2 {
        return Err(invalid(format!("recombination needs D >= 2, got {dim}")));
    }
    if budget < n {
        return Err(invalid(format!("budget {budget} is smaller than the {n} diagonal tuples")));
    }
    let total = u32::try_from(dim).ok().and_then(|d| n.checked_pow(d));
    if let Some(total) = total.filter(|&t| t <= budget) {
        let mut indices = Vec::with_capacity(total);
        let mut t = vec![0usize; dim];
        for _ in 0..total {
            indices.push(t.clone());
            for slot in t.iter_mut().rev() {
                *slot += 1;
                if *slot < n {
                    break;
                }
                *slot = 0;
            }
        }
        return Ok(CombinationPlan {
            n,
            dim,
            indices,
            exhaustive: true,
        });
    }
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(budget);
    let mut indices = Vec::with_capacity(budget);
    for i in 0..n {
        let t = vec![i; dim];
        seen.insert(t.clone());
        indices.push(t);
    }
    while indices.len() < budget {
        let t: Vec<usize> = (0..dim).map(|_| rng.random_range(0..n)).collect();
        if seen.insert(t.clone()) {
            indices.push(t);
        }
    }
    Ok(CombinationPlan {
        n,
        dim,
        indices,
        exhaustive: false,
    })
}

/// Row `k` is `synthesize(s_{i_1}^(1), ..., s_{i_D}^(D))` for tuple `k`.
pub fn synthesize_candidates(flow: &FlowParams, ics: &Tensor, plan: &CombinationPlan) -> Result<Tensor> {
    let (n, d) = (ics.rows(), ics.cols());
    if plan.n != n || plan.dim != d {
        return Err(shape_err(
            "synthesize_candidates",
            format!("plan is {}x{}, ICs are {n}x{d}", plan.n, plan.dim),
        ));
    }
    if let Some(bad) = plan.indices.iter().find(|t| t.len() != d || t.iter().any(|&i| i >= n)) {
        return Err(invalid(format!("tuple {bad:?} out of range for {n} points")));
    }
    let chunks: Vec<Tensor> = plan
        .indices
        .par_chunks(SYNTH_CHUNK)
        .map(|chunk| {
            let mut s = Vec::with_capacity(chunk.len() * d);
            for t in chunk {
                s.extend(t.iter().enumerate().map(|(dim, &i)| ics.get(i, dim)));
            }
            flow.synthesize_batch(&Tensor::matrix(chunk.len(), d, s)?)
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(plan.len() * d);
    for c in chunks {
        data.extend(c.into_data());
    }
    Tensor::matrix(plan.len(), d, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedSet {
    pub originals: Tensor,
    pub candidates: Tensor,
    pub tuples: Vec<Vec<usize>>,
    /// Diagonal tuples are never kept: their rows are the originals.
    pub kept: Vec<bool>,
}

/// Keeps every original plus each non-diagonal candidate the filter accepts.
pub fn filter_and_assemble(
    candidates: &Tensor,
    plan: &CombinationPlan,
    filter: &dyn NoveltyFilter,
    originals: &Tensor,
) -> Result<AugmentedSet> {
    if candidates.rows() != plan.len() {
        return Err(shape_err(
            "filter_and_assemble",
            format!("{} candidates for {} tuples", candidates.rows(), plan.len()),
        ));
    }
    if candidates.rows() > 0 && candidates.cols() != originals.cols() {
        return Err(shape_err("filter_and_assemble", "candidates and originals differ in width"));
    }
    let kept = candidates
        .iter_rows()
        .zip(&plan.indices)
        .map(|(row, t)| !CombinationPlan::is_diagonal(t) && filter.accepts(row))
        .collect();
    Ok(AugmentedSet {
        originals: originals.clone(),
        candidates: candidates.clone(),
        tuples: plan.indices.clone(),
        kept,
    })
}

impl AugmentedSet {
    pub fn synthetic_kept(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    /// Originals first (in order), then kept synthetic rows in plan order.
    pub fn len(&self) -> usize {
        self.originals.rows() + self.synthetic_kept()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Share of non-diagonal candidates the filter accepted.
    pub fn kept_fraction(&self) -> f64 {
        let offered = self
            .tuples
            .iter()
            .filter(|t| !CombinationPlan::is_diagonal(t))
            .count();
        if offered == 0 {
            1.0
        } else {
            self.synthetic_kept() as f64 / offered as f64
        }
    }

    pub fn training_rows(&self) -> Tensor {
        let d = self.originals.cols();
        let mut data = self.originals.data().to_vec();
        for (row, &k) in self.candidates.iter_rows().zip(&self.kept) {
            if k {
                data.extend_from_slice(row);
            }
        }
        Tensor::matrix(data.len() / d.max(1), d, data).expect("rows are D wide")
    }

    /// For original `i`, the training-row positions of kept synthetic rows
    /// whose tuple uses `i` in any slot.
    pub fn derived_rows(&self) -> Vec<Vec<usize>> {
        let n = self.originals.rows();
        let mut out = vec![Vec::new(); n];
        let mut pos = n;
        for (t, &k) in self.tuples.iter().zip(&self.kept) {
            if k {
                let mut used: Vec<usize> = t.clone();
                used.sort_unstable();
                used.dedup();
                for i in used {
                    out[i].push(pos);
                }
                pos += 1;
            }
        }
        out
    }

    /// CSV with the row values, 0-based provenance columns `i1..iD`, a
    /// `kind` column and the kept flag. Originals carry their diagonal tuple.
    pub fn write_csv(&self, path: impl AsRef<Path>, columns: &[String]) -> Result<()> {
        let d = self.originals.cols();
        if columns.len() != d {
            return Err(shape_err("AugmentedSet::write_csv", "one column name per dimension"));
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = columns.to_vec();
        header.extend((1..=d).map(|k| format!("i{k}")));
        header.extend(["kind".to_string(), "kept".to_string()]);
        w.write_record(&header)?;
        let mut write = |row: &[f64], tuple: &[usize], kind: &str, kept: bool| -> Result<()> {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            rec.extend(tuple.iter().map(usize::to_string));
            rec.push(kind.into());
            rec.push(kept.to_string());
            w.write_record(&rec)?;
            Ok(())
        };
        for (i, row) in self.originals.iter_rows().enumerate() {
            write(row, &vec![i; d], "original", true)?;
        }
        for ((row, t), &k) in self.candidates.iter_rows().zip(&self.tuples).zip(&self.kept) {
            write(row, t, "synthetic", k)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::novelty::{AcceptAll, RejectAll};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn two_by_two_enumeration() {
        let p = plan_combinations(2, 2, DEFAULT_BUDGET, &mut rng()).unwrap();
        assert!(p.exhaustive);
        assert_eq!(p.indices, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn six_points_four_dims_is_exhaustive() {
        let p = plan_combinations(6, 4, DEFAULT_BUDGET, &mut rng()).unwrap();
        assert!(p.exhaustive);
        assert_eq!(p.len(), 1296);
        let uniq: HashSet<_> = p.indices.iter().collect();
        assert_eq!(uniq.len(), 1296);
    }

    #[test]
    fn subsampled_plan_is_unique_and_has_diagonals() {
        let p = plan_combinations(100, 4, 10_000, &mut rng()).unwrap();
        assert!(!p.exhaustive);
        assert_eq!(p.len(), 10_000);
        let uniq: HashSet<_> = p.indices.iter().collect();
        assert_eq!(uniq.len(), 10_000);
        for i in 0..100 {
            assert!(uniq.contains(&vec![i; 4]));
        }
    }

    #[test]
    fn plan_arguments_are_checked() {
        assert!(plan_combinations(5, 2, 4, &mut rng()).is_err());
        assert!(plan_combinations(0, 2, 4, &mut rng()).is_err());
        assert!(plan_combinations(3, 1, 4, &mut rng()).is_err());
    }

    #[test]
    fn huge_power_falls_back_to_sampling() {
        let p = plan_combinations(1000, 8, 2000, &mut rng()).unwrap();
        assert!(!p.exhaustive);
        assert_eq!(p.len(), 2000);
    }

    fn target(n: usize, d: usize, seed: u64) -> DomainDataset {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        DomainDataset::unnamed("t", Tensor::matrix(n, d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap())
            .unwrap()
    }

    #[test]
    fn identity_flow_swaps_coordinates() {
        let flow = FlowParams::identity(FlowConfig::new(2).with_depth(1)).unwrap();
        let t = DomainDataset::unnamed("t", Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap()).unwrap();
        let ics = extract_ics(&flow, &t).unwrap();
        assert_eq!(ics, t.rows);
        let plan = plan_combinations(2, 2, 10, &mut rng()).unwrap();
        let c = synthesize_candidates(&flow, &ics, &plan).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 1.0, 4.0, 3.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn diagonals_reproduce_originals() {
        let flow = FlowParams::init(FlowConfig::new(4).with_depth(3), 5, None).unwrap();
        let t = target(6, 4, 1);
        let ics = extract_ics(&flow, &t).unwrap();
        assert_eq!((ics.rows(), ics.cols()), (6, 4));
        let plan = plan_combinations(6, 4, DEFAULT_BUDGET, &mut rng()).unwrap();
        let c = synthesize_candidates(&flow, &ics, &plan).unwrap();
        assert_eq!(c.rows(), plan.len());
        for (row, tuple) in c.iter_rows().zip(&plan.indices) {
            if CombinationPlan::is_diagonal(tuple) {
                let orig = t.rows.row(tuple[0]);
                assert!(row.iter().zip(orig).all(|(a, b)| (a - b).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn kept_rows_resynthesize_bit_exactly() {
        let flow = FlowParams::init(FlowConfig::new(3).with_depth(2), 6, None).unwrap();
        let t = target(4, 3, 2);
        let ics = extract_ics(&flow, &t).unwrap();
        let plan = plan_combinations(4, 3, DEFAULT_BUDGET, &mut rng()).unwrap();
        let c = synthesize_candidates(&flow, &ics, &plan).unwrap();
        let set = filter_and_assemble(&c, &plan, &AcceptAll, &t.rows).unwrap();
        for ((row, tuple), &k) in set.candidates.iter_rows().zip(&set.tuples).zip(&set.kept) {
            if k {
                let s: Vec<f64> = tuple.iter().enumerate().map(|(d, &i)| ics.get(i, d)).collect();
                let again = flow.synthesize(&s).unwrap();
                assert!(again.iter().zip(row).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn accept_and_reject_all() {
        let flow = FlowParams::identity(FlowConfig::new(2).with_depth(1)).unwrap();
        let t = target(3, 2, 3);
        let ics = extract_ics(&flow, &t).unwrap();
        let plan = plan_combinations(3, 2, 100, &mut rng()).unwrap();
        let c = synthesize_candidates(&flow, &ics, &plan).unwrap();
        let none = filter_and_assemble(&c, &plan, &RejectAll, &t.rows).unwrap();
        assert_eq!(none.training_rows(), t.rows);
        let all = filter_and_assemble(&c, &plan, &AcceptAll, &t.rows).unwrap();
        assert_eq!(all.len(), 9);
        assert_eq!(all.kept_fraction(), 1.0);
        assert_eq!(all.training_rows().select_rows(&[0, 1, 2]), t.rows);
    }

    #[test]
    fn derived_rows_track_tuples() {
        let flow = FlowParams::identity(FlowConfig::new(2).with_depth(1)).unwrap();
        let t = target(2, 2, 4);
        let ics = extract_ics(&flow, &t).unwrap();
        let plan = plan_combinations(2, 2, 100, &mut rng()).unwrap();
        let c = synthesize_candidates(&flow, &ics, &plan).unwrap();
        let set = filter_and_assemble(&c, &plan, &AcceptAll, &t.rows).unwrap();
        // training rows: o0, o1, (0,1), (1,0)
        assert_eq!(set.derived_rows(), vec![vec![2, 3], vec![2, 3]]);
    }

    #[test]
    fn csv_export_has_provenance() {
        let flow = FlowParams::identity(FlowConfig::new(2).with_depth(1)).unwrap();
        let t = target(2, 2, 5);
        let ics = extract_ics(&flow, &t).unwrap();
        let plan = plan_combinations(2, 2, 100, &mut rng()).unwrap();
        let c = synthesize_candidates(&flow, &ics, &plan).unwrap();
        let set = filter_and_assemble(&c, &plan, &RejectAll, &t.rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aug.csv");
        set.write_csv(&path, &["x1".into(), "y".into()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x1,y,i1,i2,kind,kept");
        assert_eq!(lines.len(), 1 + 2 + 4);
        assert!(lines[1].ends_with("0,0,original,true"));
        assert!(lines[5].ends_with("1,0,synthetic,false"));
    }
}

//! Embeddings, weight histograms, held-out edge recovery and metrics files.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, SplitTag, TaskDataset};
use crate::error::{Error, Result};
use crate::model::MiracleModel;
use crate::numerics::Matrix;
use crate::ontology::PositionClasses;

pub const DEFAULT_BINS: usize = 50;

/// Posterior means as TSV: `sample_id, task_id, label, mu_1 … mu_p`, one row
/// per sample of `split` (every sample when `None`), tasks in order.
pub fn export_embeddings(model: &MiracleModel, datasets: &[TaskDataset], split: Option<SplitTag>) -> Result<String> {
    let p = model.dims().n_pathways;
    let mut out = String::from("sample_id\ttask_id\tlabel");
    for k in 1..=p {
        let _ = write!(out, "\tmu_{k}");
    }
    out.push('\n');
    for ds in datasets {
        let idx: Vec<usize> = match split {
            Some(tag) => ds.indices(tag),
            None => (0..ds.len()).collect(),
        };
        if idx.is_empty() {
            continue;
        }
        let (x, _) = ds.batch(&idx);
        let mu = model.encode(&x)?.mu;
        for (r, &i) in idx.iter().enumerate() {
            let _ = write!(out, "{}\t{}\t{}", ds.sample_ids()[i], ds.task_id(), ds.labels()[i]);
            for &v in mu.row(r) {
                out.push('\t');
                out.push_str(&fmt_f64(v));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Histograms of stored weights split by position class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightHistogram {
    pub layer: String,
    /// `bins + 1` uniform edges over the observed range.
    pub edges: Vec<f64>,
    pub ones: Vec<usize>,
    pub masked: Vec<usize>,
    pub non_ones: Vec<usize>,
}

impl WeightHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,ones,masked,non_ones\n");
        for b in 0..self.ones.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                fmt_f64(self.edges[b]),
                fmt_f64(self.edges[b + 1]),
                self.ones[b],
                self.masked[b],
                self.non_ones[b]
            );
        }
        out
    }
}

pub fn weight_distributions(
    layer: &str,
    weights: &Matrix,
    classes: &PositionClasses,
    bins: usize,
) -> Result<WeightHistogram> {
    if bins == 0 {
        return Err(Error::Invalid("histogram needs at least one bin".into()));
    }
    if classes.total() != weights.len() {
        return Err(Error::Invalid(format!(
            "position classes cover {} entries but layer {layer} has {}",
            classes.total(),
            weights.len()
        )));
    }
    let all = classes.ones.iter().chain(&classes.masked).chain(&classes.non_ones);
    for &(i, j) in all {
        if i >= weights.rows() || j >= weights.cols() {
            return Err(Error::Invalid(format!(
                "position ({i}, {j}) outside layer {layer} of shape {:?}",
                weights.shape()
            )));
        }
    }
    let (mut lo, mut hi) = weights
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|b| if b == bins { hi } else { lo + b as f64 * width })
        .collect();
    let bin_of = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
    let count = |positions: &[(usize, usize)]| {
        let mut c = vec![0usize; bins];
        for &(i, j) in positions {
            c[bin_of(weights[(i, j)])] += 1;
        }
        c
    };
    Ok(WeightHistogram {
        layer: layer.to_string(),
        edges,
        ones: count(&classes.ones),
        masked: count(&classes.masked),
        non_ones: count(&classes.non_ones),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPosition {
    pub row: usize,
    pub col: usize,
    pub abs_weight: f64,
    pub heldout: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    /// Candidate pool (held-out and non-edge positions) by `|weight|`
    /// descending, ties by position.
    pub ranked: Vec<RankedPosition>,
    pub top_k: usize,
    /// Fraction of the top `k` that are held-out edges.
    pub recovery: f64,
    /// Expected recovery of a random ranking, `#held-out / pool`.
    pub chance: f64,
}

impl Recovery {
    pub fn to_tsv(&self, row_ids: &[String], col_ids: &[String]) -> String {
        let mut out = String::from("rank\trow_id\tcol_id\tabs_weight\theldout\n");
        for (r, p) in self.ranked.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r + 1,
                row_ids[p.row],
                col_ids[p.col],
                fmt_f64(p.abs_weight),
                p.heldout as u8
            );
        }
        out
    }
}

/// Ranks the held-out and non-edge positions of `weights` by magnitude and
/// scores how many of the top `k` are held-out edges.
pub fn recover_heldout(weights: &Matrix, classes: &PositionClasses, top_k: usize) -> Result<Recovery> {
    let pool = classes.masked.len() + classes.non_ones.len();
    if pool == 0 {
        return Err(Error::Invalid("no candidate positions to rank".into()));
    }
    let mut ranked: Vec<RankedPosition> = classes
        .masked
        .iter()
        .map(|&p| (p, true))
        .chain(classes.non_ones.iter().map(|&p| (p, false)))
        .map(|((row, col), heldout)| {
            if row >= weights.rows() || col >= weights.cols() {
                return Err(Error::Invalid(format!(
                    "position ({row}, {col}) outside weights of shape {:?}",
                    weights.shape()
                )));
            }
            Ok(RankedPosition {
                row,
                col,
                abs_weight: weights[(row, col)].abs(),
                heldout,
            })
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| {
        b.abs_weight
            .total_cmp(&a.abs_weight)
            .then((a.row, a.col).cmp(&(b.row, b.col)))
    });
    let k = top_k.min(pool);
    let hits = ranked[..k].iter().filter(|p| p.heldout).count();
    Ok(Recovery {
        ranked,
        top_k: k,
        recovery: if k == 0 { 0.0 } else { hits as f64 / k as f64 },
        chance: classes.masked.len() as f64 / pool as f64,
    })
}

/// Sample standard deviation; `None` for fewer than two values.
pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some((values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub per_task_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
}

/// Accuracy summary over one or more seeded runs. With several runs the
/// per-task and mean accuracies are averages over runs and `std` is the
/// sample standard deviation of the per-run means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub split: SplitTag,
    pub task_ids: Vec<String>,
    pub per_task_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub std: Option<f64>,
    pub runs: Vec<RunMetrics>,
    pub config_digest: String,
}

impl Metrics {
    pub fn from_runs(split: SplitTag, task_ids: Vec<String>, runs: Vec<RunMetrics>, config_digest: String) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Invalid("metrics need at least one run".into()));
        }
        let t = task_ids.len();
        if runs.iter().any(|r| r.per_task_accuracy.len() != t) {
            return Err(Error::Invalid(format!("every run needs {t} task accuracies")));
        }
        let n = runs.len() as f64;
        let per_task_accuracy = (0..t)
            .map(|i| runs.iter().map(|r| r.per_task_accuracy[i]).sum::<f64>() / n)
            .collect();
        let means: Vec<f64> = runs.iter().map(|r| r.mean_accuracy).collect();
        Ok(Self {
            split,
            task_ids,
            per_task_accuracy,
            mean_accuracy: means.iter().sum::<f64>() / n,
            std: sample_std(&means),
            runs,
            config_digest,
        })
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_test_model;
    use crate::numerics::Rng;
    use crate::ontology::classify_positions;
    use proptest::prelude::*;

    fn datasets(n_sites: usize, rows: &[Vec<f64>]) -> Vec<TaskDataset> {
        let n = rows.len();
        vec![TaskDataset::new(
            "t1",
            (0..n_sites).map(|j| format!("s{j}")).collect(),
            (0..n).map(|i| format!("x{i}")).collect(),
            Matrix::from_rows(rows),
            (0..n).map(|i| (i % 2) as u8).collect(),
        )
        .unwrap()]
    }

    fn parse_tsv(s: &str) -> Vec<Vec<String>> {
        s.lines().map(|l| l.split('\t').map(str::to_string).collect()).collect()
    }

    #[test]
    fn embedding_shape_and_round_trip() {
        let mut rng = Rng::new(1);
        let model = random_test_model(30, 10, 4, 6, 1, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..30).map(|_| rng.uniform()).collect()).collect();
        let ds = datasets(30, &rows);
        let tsv = export_embeddings(&model, &ds, None).unwrap();
        let table = parse_tsv(&tsv);
        assert_eq!(table.len(), 11);
        assert!(table.iter().all(|r| r.len() == 7));
        assert_eq!(table[0][..4], ["sample_id", "task_id", "label", "mu_1"]);
        let mu = model.encode(ds[0].betas()).unwrap().mu;
        for i in 0..10 {
            for k in 0..4 {
                let v: f64 = table[i + 1][3 + k].parse().unwrap();
                assert_eq!(v, mu[(i, k)]);
            }
        }
    }

    #[test]
    fn identical_rows_embed_identically() {
        let mut rng = Rng::new(2);
        let model = random_test_model(30, 10, 4, 6, 1, &mut rng).unwrap();
        let row: Vec<f64> = (0..30).map(|_| rng.uniform()).collect();
        let ds = datasets(30, &[row.clone(), row]);
        let table = parse_tsv(&export_embeddings(&model, &ds, None).unwrap());
        assert_eq!(table[1][3..], table[2][3..]);
    }

    #[test]
    fn fresh_layer_non_edges_sit_at_zero() {
        let mut rng = Rng::new(3);
        let model = random_test_model(30, 10, 4, 6, 1, &mut rng).unwrap();
        let layer = model.layer("enc_site_gene").unwrap();
        let classes = classify_positions(layer.mask(), &[]).unwrap();
        let h = weight_distributions("enc_site_gene", layer.weight(), &classes, DEFAULT_BINS).unwrap();
        assert!(h.masked.iter().all(|&c| c == 0));
        assert_eq!(h.ones.iter().sum::<usize>(), classes.ones.len());
        assert_eq!(h.non_ones.iter().sum::<usize>(), classes.non_ones.len());
        let zero_bin = ((0.0 - h.edges[0]) / (h.edges[1] - h.edges[0])) as usize;
        assert_eq!(h.non_ones[zero_bin.min(DEFAULT_BINS - 1)], classes.non_ones.len());
        assert_eq!(h.to_csv().lines().count(), DEFAULT_BINS + 1);
    }

    #[test]
    fn histogram_shape_mismatch() {
        let classes = classify_positions(&Matrix::ones(2, 2), &[]).unwrap();
        assert!(weight_distributions("l", &Matrix::zeros(3, 2), &classes, 5).is_err());
    }

    proptest! {
        #[test]
        fn histogram_counts_match_class_sizes(
            vals in prop::collection::vec(-3.0f64..3.0, 24),
            mask_bits in prop::collection::vec(any::<bool>(), 24),
            held in prop::collection::vec(0usize..24, 0..5),
            bins in 1usize..20,
        ) {
            let w = Matrix::new(4, 6, vals).unwrap();
            let mask = Matrix::new(4, 6, mask_bits.iter().map(|&b| b as u8 as f64).collect()).unwrap();
            let mut held: Vec<(usize, usize)> = held.into_iter().map(|k| (k / 6, k % 6)).filter(|&(i, j)| mask[(i, j)] != 0.0).collect();
            held.sort_unstable();
            held.dedup();
            let classes = classify_positions(&mask, &held).unwrap();
            let h = weight_distributions("l", &w, &classes, bins).unwrap();
            prop_assert_eq!(h.ones.iter().sum::<usize>(), classes.ones.len());
            prop_assert_eq!(h.masked.iter().sum::<usize>(), classes.masked.len());
            prop_assert_eq!(h.non_ones.iter().sum::<usize>(), classes.non_ones.len());
            prop_assert_eq!(h.edges.len(), bins + 1);
        }
    }

    #[test]
    fn planted_edge_ranks_first() {
        let mask = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let held = vec![(1, 1)];
        let classes = classify_positions(&mask, &held).unwrap();
        let w = Matrix::from_rows(&[[5.0, 0.1, -0.2], [0.05, -0.9, 0.3]]);
        let r = recover_heldout(&w, &classes, 1).unwrap();
        assert_eq!((r.ranked[0].row, r.ranked[0].col), (1, 1));
        assert_eq!(r.recovery, 1.0);
        assert!((r.chance - 0.2).abs() < 1e-15);
        let all = recover_heldout(&w, &classes, 99).unwrap();
        assert_eq!(all.top_k, 5);
        assert!((all.recovery - all.chance).abs() < 1e-15);
    }

    #[test]
    fn untrained_layer_recovers_at_chance() {
        // Average over many random initialisations: no signal, so the
        // expected recovery is the chance rate.
        let mut total = 0.0;
        let mut chance = 0.0;
        let reps = 200;
        for seed in 0..reps {
            let mut rng = Rng::new(seed);
            let mut mask = Matrix::zeros(20, 8);
            for i in 0..20 {
                mask[(i, i % 8)] = 1.0;
            }
            let (_, held) = crate::ontology::holdout(&mask, 0.25, &mut rng, 1.0).unwrap();
            let cand = crate::ontology::candidate_mask(&mask, &held, 0.1);
            let layer = crate::nn::MaskedLinearLayer::init(cand, &mut rng).unwrap();
            let classes = classify_positions(&mask, &held).unwrap();
            let r = recover_heldout(&layer.effective_weight(), &classes, held.len()).unwrap();
            total += r.recovery;
            chance = r.chance;
        }
        let mean = total / reps as f64;
        assert!((mean - chance).abs() < 0.03, "{mean} vs {chance}");
    }

    #[test]
    fn metrics_aggregate_runs() {
        let runs = vec![
            RunMetrics { seed: 1, per_task_accuracy: vec![0.8, 0.6], mean_accuracy: 0.7 },
            RunMetrics { seed: 2, per_task_accuracy: vec![1.0, 0.8], mean_accuracy: 0.9 },
        ];
        let m = Metrics::from_runs(SplitTag::Test, vec!["a".into(), "b".into()], runs, "d".into()).unwrap();
        assert!((m.per_task_accuracy[0] - 0.9).abs() < 1e-15);
        assert!((m.mean_accuracy - 0.8).abs() < 1e-15);
        assert!((m.std.unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
        let one = Metrics::from_runs(SplitTag::Test, vec!["a".into()], vec![RunMetrics { seed: 1, per_task_accuracy: vec![0.5], mean_accuracy: 0.5 }], "d".into()).unwrap();
        assert_eq!(one.std, None);
        let json: serde_json::Value = serde_json::from_slice(&one.to_json_bytes().unwrap()).unwrap();
        for key in ["per_task_accuracy", "mean_accuracy", "std", "config_digest"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}

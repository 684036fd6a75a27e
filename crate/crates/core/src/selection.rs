//! Significant-site selection: per-dataset Welch t-tests between positive and
//! negative samples, a p-value filter or top-k cut, and a union over
//! datasets.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::numerics::t_two_sided_p;

pub const P_THRESHOLD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SiteScore {
    pub site_id: String,
    pub t_stat: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Welch's unequal-variance t statistic and Welch–Satterthwaite degrees of
/// freedom.
///
/// When both groups have zero variance the statistic is undefined; this
/// returns `t = 0` for equal means and `t = ±∞` otherwise, with the pooled
/// `df = n_a + n_b − 2`.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Invalid(format!(
            "t-test needs at least 2 samples per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (qa, qb) = (va / na, vb / nb);
    let se2 = qa + qb;
    if se2 == 0.0 {
        let t = match ma.partial_cmp(&mb) {
            Some(Ordering::Equal) => 0.0,
            Some(Ordering::Greater) => f64::INFINITY,
            _ => f64::NEG_INFINITY,
        };
        return Ok((t, na + nb - 2.0));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    Ok((t, df))
}

/// Scores every site of `dataset`, positives against negatives, in site
/// order.
pub fn score_dataset(dataset: &TaskDataset) -> Result<Vec<SiteScore>> {
    let pos: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels()[i] == 1).collect();
    let neg: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels()[i] == 0).collect();
    if pos.len() < 2 || neg.len() < 2 {
        return Err(Error::Invalid(format!(
            "task {}: selection needs at least 2 positives and 2 negatives, found {} and {}",
            dataset.task_id(),
            pos.len(),
            neg.len()
        )));
    }
    let x = dataset.betas();
    let mut a = vec![0.0; pos.len()];
    let mut b = vec![0.0; neg.len()];
    dataset
        .site_ids()
        .iter()
        .enumerate()
        .map(|(j, site)| {
            for (v, &i) in a.iter_mut().zip(&pos) {
                *v = x[(i, j)];
            }
            for (v, &i) in b.iter_mut().zip(&neg) {
                *v = x[(i, j)];
            }
            let (t, df) = welch_t(&a, &b)?;
            Ok(SiteScore {
                site_id: site.clone(),
                t_stat: t,
                df,
                p_value: t_two_sided_p(t, df)?,
            })
        })
        .collect()
}

fn by_p_then_id(a: &SiteScore, b: &SiteScore) -> Ordering {
    a.p_value
        .total_cmp(&b.p_value)
        .then_with(|| a.site_id.cmp(&b.site_id))
}

/// Union of per-dataset picks, ordered by best p-value then site id.
///
/// Without `num_selected` a dataset contributes the sites with
/// `p ≤ 0.05`; with it, its `num_selected` smallest p-values.
pub fn select_from_scores(scores: &[Vec<SiteScore>], num_selected: Option<usize>) -> Vec<String> {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for per_dataset in scores {
        let mut sorted: Vec<&SiteScore> = per_dataset.iter().collect();
        sorted.sort_by(|a, b| by_p_then_id(a, b));
        let picked: Vec<&SiteScore> = match num_selected {
            Some(k) => sorted.into_iter().take(k).collect(),
            None => sorted.into_iter().take_while(|s| s.p_value <= P_THRESHOLD).collect(),
        };
        for s in picked {
            let e = best.entry(&s.site_id).or_insert(s.p_value);
            *e = e.min(s.p_value);
        }
    }
    let mut out: Vec<(&str, f64)> = best.into_iter().collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    out.into_iter().map(|(s, _)| s.to_string()).collect()
}

/// Scores every dataset and returns the selected sites along with the
/// per-dataset scores.
pub fn select_sites_with_scores(
    datasets: &[TaskDataset],
    num_selected: Option<usize>,
) -> Result<(Vec<String>, Vec<Vec<SiteScore>>)> {
    if let Some(first) = datasets.first() {
        if let Some(d) = datasets.iter().find(|d| d.site_ids() != first.site_ids()) {
            return Err(Error::Invalid(format!(
                "tasks {} and {} do not share the same site list",
                first.task_id(),
                d.task_id()
            )));
        }
    }
    let scores = datasets.iter().map(score_dataset).collect::<Result<Vec<_>>>()?;
    Ok((select_from_scores(&scores, num_selected), scores))
}

pub fn select_sites(datasets: &[TaskDataset], num_selected: Option<usize>) -> Result<Vec<String>> {
    select_sites_with_scores(datasets, num_selected).map(|(s, _)| s)
}

//! Per-task methylation datasets, file formats, splits and the synthetic
//! benchmark generator.

mod io;
mod synth;

pub use io::{
    build_ontology, fmt_f64, load_beta_matrix, load_gmt, load_labels, load_site_gene_map,
    load_task_dataset, write_beta_matrix, write_gmt, write_labels, write_site_gene_map,
    BetaMatrix, GeneSet, SiteGeneRow,
};
pub use synth::{generate_synthetic, GroundTruth, SampleCounts, SynthConfig, SyntheticData};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Train, SplitTag::Val, SplitTag::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::Invalid(format!(
                "unknown split {other:?}, expected train, val or test"
            ))),
        }
    }
}

/// One binary classification task: samples × sites beta values plus labels.
///
/// Every sample starts tagged [`SplitTag::Train`]; use [`split`] to assign
/// validation and test samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    task_id: String,
    site_ids: Vec<String>,
    sample_ids: Vec<String>,
    betas: Matrix,
    labels: Vec<u8>,
    split: Vec<SplitTag>,
}

impl TaskDataset {
    pub fn new(
        task_id: impl Into<String>,
        site_ids: Vec<String>,
        sample_ids: Vec<String>,
        betas: Matrix,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let task_id = task_id.into();
        if betas.shape() != (sample_ids.len(), site_ids.len()) {
            return Err(Error::Invalid(format!(
                "task {task_id}: betas are {:?} but there are {} samples and {} sites",
                betas.shape(),
                sample_ids.len(),
                site_ids.len()
            )));
        }
        if labels.len() != sample_ids.len() {
            return Err(Error::Invalid(format!(
                "task {task_id}: {} labels for {} samples",
                labels.len(),
                sample_ids.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Invalid(format!("task {task_id}: label {l} outside {{0, 1}}")));
        }
        if let Some(v) = betas.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!(
                "task {task_id}: beta value {v} outside [0, 1]"
            )));
        }
        let split = vec![SplitTag::Train; sample_ids.len()];
        Ok(Self {
            task_id,
            site_ids,
            sample_ids,
            betas,
            labels,
            split,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn betas(&self) -> &Matrix {
        &self.betas
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn split_tags(&self) -> &[SplitTag] {
        &self.split
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn set_split(&mut self, tags: Vec<SplitTag>) -> Result<()> {
        if tags.len() != self.len() {
            return Err(Error::Invalid(format!(
                "task {}: {} split tags for {} samples",
                self.task_id,
                tags.len(),
                self.len()
            )));
        }
        self.split = tags;
        Ok(())
    }

    /// Sample indices carrying `tag`, in file order.
    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == tag).collect()
    }

    /// Inputs and an `n × 1` label column for the given samples.
    pub fn batch(&self, indices: &[usize]) -> (Matrix, Matrix) {
        let x = self.betas.select_rows(indices);
        let y: Vec<f64> = indices.iter().map(|&i| self.labels[i] as f64).collect();
        let y = Matrix::new(indices.len(), 1, y).expect("one label per index");
        (x, y)
    }

    /// Keeps only `sites`, in that order.
    pub fn restrict_sites(&self, sites: &[String]) -> Result<TaskDataset> {
        let pos: HashMap<&str, usize> = self
            .site_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut missing = Vec::new();
        let cols: Vec<usize> = sites
            .iter()
            .filter_map(|s| {
                let p = pos.get(s.as_str()).copied();
                if p.is_none() {
                    missing.push(s.clone());
                }
                p
            })
            .collect();
        if !missing.is_empty() {
            return Err(Error::UnknownSites(missing));
        }
        Ok(TaskDataset {
            task_id: self.task_id.clone(),
            site_ids: sites.to_vec(),
            sample_ids: self.sample_ids.clone(),
            betas: self.betas.select_cols(&cols),
            labels: self.labels.clone(),
            split: self.split.clone(),
        })
    }
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.7, 0.15, 0.15];

/// Stratified train/val/test assignment.
///
/// Each class gets the floor of its quota `n_c · f_s` in every split; the
/// leftover samples go to the splits lagging furthest behind their running
/// global target, so per-class counts stay within one sample of the quota
/// and split totals track the global fractions. Every split with a nonzero
/// fraction gets at least one sample of each class.
pub fn split(dataset: &TaskDataset, fractions: [f64; 3], rng: &mut Rng) -> Result<TaskDataset> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must lie in [0, 1] and sum to 1"
        )));
    }
    let active = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut tags = vec![SplitTag::Train; dataset.len()];
    let mut seen = 0usize;
    let mut assigned = [0usize; 3];
    for class in 0..=1u8 {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < active {
            return Err(Error::Invalid(format!(
                "task {}: class {class} has {} samples, too few to stratify over {active} splits",
                dataset.task_id,
                members.len()
            )));
        }
        let n = members.len();
        seen += n;
        let mut counts = [0usize; 3];
        for s in 0..3 {
            counts[s] = (n as f64 * fractions[s] + 1e-9).floor() as usize;
        }
        let leftover = n - counts.iter().sum::<usize>();
        for _ in 0..leftover {
            let deficit = |s: usize| seen as f64 * fractions[s] - (assigned[s] + counts[s]) as f64;
            let s = (0..3)
                .filter(|&s| (counts[s] as f64) < n as f64 * fractions[s] - 1e-9)
                .max_by(|&a, &b| deficit(a).total_cmp(&deficit(b)).then(b.cmp(&a)))
                .expect("a leftover sample implies a fractional quota");
            counts[s] += 1;
        }
        for s in 0..3 {
            if fractions[s] > 0.0 && counts[s] == 0 {
                let donor = (0..3).max_by_key(|&d| (counts[d], std::cmp::Reverse(d))).unwrap();
                counts[donor] -= 1;
                counts[s] += 1;
            }
        }
        for s in 0..3 {
            assigned[s] += counts[s];
        }
        rng.shuffle(&mut members);
        let mut it = members.into_iter();
        for (s, &n) in counts.iter().enumerate() {
            for i in it.by_ref().take(n) {
                tags[i] = SplitTag::ALL[s];
            }
        }
    }
    let mut out = dataset.clone();
    out.split = tags;
    Ok(out)
}

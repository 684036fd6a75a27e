//! Synthetic benchmark with a planted ontology and planted causal pathways.
//!
//! Recipe, all draws from substreams of `seed`:
//!
//! 1. Each site links to one uniformly chosen gene; each gene links to 1–3
//!    distinct pathways.
//! 2. `round(shared_causal_fraction · k)` causal pathways are shared by every
//!    task; each task draws the rest of its `k` causal pathways from the
//!    remaining ones. Planted label weights are `±label_weight/√k`.
//! 3. Per sample, pathway activations `a ~ N(0, I)`, and
//!    `label ~ Bernoulli(σ(w·a_causal + b))` with `b = 0`, or `b` set to minus
//!    the median logit when the base rate would leave `[0.2, 0.8]`.
//! 4. Beta of site `s` with gene `g`: `σ(loading_s · mean(a over pathways of g)
//!    + noise_sd · N(0, 1))`.
//!
//! Optionally a fraction of site-gene edges is marked held out and those
//! sites get a stronger loading, which gives hold-out recovery experiments a
//! planted signal to find.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::numerics::{gaussian_sample, streams, Matrix, Rng};
use crate::ontology::{Edge, Ontology};

use super::TaskDataset;

/// Either one sample count for every task or one count per task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleCounts {
    Uniform(usize),
    PerTask(Vec<usize>),
}

impl SampleCounts {
    fn get(&self, task: usize) -> usize {
        match self {
            SampleCounts::Uniform(n) => *n,
            SampleCounts::PerTask(v) => v[task],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_sites: usize,
    pub n_genes: usize,
    pub n_pathways: usize,
    pub n_tasks: usize,
    pub samples_per_task: SampleCounts,
    pub causal_pathways_per_task: usize,
    pub shared_causal_fraction: f64,
    pub noise_sd: f64,
    /// Norm of each task's planted label weight vector.
    pub label_weight: f64,
    /// Scale from gene signal to site logit.
    pub site_loading: f64,
    /// Fraction of site-gene edges marked as held out.
    pub heldout_fraction: f64,
    /// Loading used instead of `site_loading` on held-out sites.
    pub heldout_loading: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_sites: 300,
            n_genes: 60,
            n_pathways: 12,
            n_tasks: 3,
            samples_per_task: SampleCounts::Uniform(300),
            causal_pathways_per_task: 3,
            shared_causal_fraction: 0.7,
            noise_sd: 0.3,
            label_weight: 20.0,
            site_loading: 2.0,
            heldout_fraction: 0.0,
            heldout_loading: 4.0,
            seed: 1,
        }
    }
}

impl SynthConfig {
    /// Six tasks with the per-task sample counts of the real benchmark
    /// cohorts (2093 samples in total).
    pub fn cohort_shaped() -> Self {
        Self {
            n_tasks: 6,
            samples_per_task: SampleCounts::PerTask(vec![184, 379, 279, 219, 689, 343]),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synthetic: {msg}")));
        if self.n_sites == 0 || self.n_genes == 0 || self.n_pathways == 0 || self.n_tasks == 0 {
            return bad("dimensions must be at least 1".into());
        }
        if self.causal_pathways_per_task == 0 || self.causal_pathways_per_task > self.n_pathways {
            return bad(format!(
                "causal_pathways_per_task must lie in 1..={}",
                self.n_pathways
            ));
        }
        match &self.samples_per_task {
            SampleCounts::Uniform(0) => return bad("samples_per_task must be at least 1".into()),
            SampleCounts::PerTask(v) if v.len() != self.n_tasks || v.contains(&0) => {
                return bad(format!(
                    "samples_per_task needs {} positive counts",
                    self.n_tasks
                ))
            }
            _ => {}
        }
        for (name, v) in [
            ("shared_causal_fraction", self.shared_causal_fraction),
            ("heldout_fraction", self.heldout_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("noise_sd", self.noise_sd),
            ("label_weight", self.label_weight),
            ("site_loading", self.site_loading),
            ("heldout_loading", self.heldout_loading),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroundTruth {
    /// Causal pathway indices per task, ascending.
    pub causal_pathways: Vec<Vec<usize>>,
    /// Planted weights aligned with `causal_pathways`.
    pub label_weights: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    /// Held-out `(site, gene)` edges, ascending.
    pub heldout_site_gene: Vec<(usize, usize)>,
    /// Pathway activations per task, samples × pathways.
    #[serde(skip)]
    pub activations: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub ontology: Ontology,
    pub datasets: Vec<TaskDataset>,
    pub truth: GroundTruth,
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    let width = n.to_string().len();
    (1..=n).map(|i| format!("{prefix}{i:0width$}")).collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticData> {
    config.validate()?;
    let c = config;
    let root = Rng::new(c.seed).substream(&[streams::SYNTH]);
    let mut rng = root.substream(&[0]);

    let site_gene: Vec<usize> = (0..c.n_sites).map(|_| rng.index(c.n_genes)).collect();
    let mut gene_pathways: Vec<Vec<usize>> = Vec::with_capacity(c.n_genes);
    for _ in 0..c.n_genes {
        let k = (1 + rng.index(3)).min(c.n_pathways);
        let mut ps = rng.sample_indices(c.n_pathways, k);
        ps.sort_unstable();
        gene_pathways.push(ps);
    }

    let n_held = (c.heldout_fraction * c.n_sites as f64).round() as usize;
    let mut held_sites = rng.sample_indices(c.n_sites, n_held);
    held_sites.sort_unstable();
    let mut loading = vec![c.site_loading; c.n_sites];
    for &s in &held_sites {
        loading[s] = c.heldout_loading;
    }

    let k = c.causal_pathways_per_task;
    let k_shared = (c.shared_causal_fraction * k as f64).round() as usize;
    let shared = rng.sample_indices(c.n_pathways, k_shared);
    let rest: Vec<usize> = (0..c.n_pathways).filter(|p| !shared.contains(p)).collect();
    let mut causal_pathways = Vec::with_capacity(c.n_tasks);
    let mut label_weights = Vec::with_capacity(c.n_tasks);
    let scale = c.label_weight / (k as f64).sqrt();
    for _ in 0..c.n_tasks {
        let mut set = shared.clone();
        set.extend(rng.sample_indices(rest.len(), k - k_shared).into_iter().map(|i| rest[i]));
        set.sort_unstable();
        let w: Vec<f64> = set
            .iter()
            .map(|_| if rng.bernoulli(0.5) { scale } else { -scale })
            .collect();
        causal_pathways.push(set);
        label_weights.push(w);
    }

    let site_ids = ids("cg", c.n_sites);
    let gene_ids = ids("gene", c.n_genes);
    let pathway_ids = ids("pathway", c.n_pathways);
    let task_ids = ids("task", c.n_tasks);

    let mut datasets = Vec::with_capacity(c.n_tasks);
    let mut intercepts = Vec::with_capacity(c.n_tasks);
    let mut activations = Vec::with_capacity(c.n_tasks);
    for (t, task_id) in task_ids.iter().enumerate() {
        let mut rng = root.substream(&[1, t as u64]);
        let n = c.samples_per_task.get(t);
        let a = gaussian_sample(&mut rng, n, c.n_pathways);
        let logits: Vec<f64> = (0..n)
            .map(|i| {
                causal_pathways[t]
                    .iter()
                    .zip(&label_weights[t])
                    .map(|(&p, w)| w * a[(i, p)])
                    .sum()
            })
            .collect();
        let draw = |rng: &mut Rng, b: f64| -> Vec<u8> {
            logits.iter().map(|&l| rng.bernoulli(sigmoid(l + b)) as u8).collect()
        };
        let mut intercept = 0.0;
        let mut labels = draw(&mut rng, intercept);
        let rate = labels.iter().map(|&l| l as f64).sum::<f64>() / n as f64;
        if !(0.2..=0.8).contains(&rate) {
            intercept = -median(&logits);
            labels = draw(&mut rng, intercept);
        }

        let gene_signal = Matrix::from_rows(
            &(0..n)
                .map(|i| {
                    gene_pathways
                        .iter()
                        .map(|ps| {
                            if ps.is_empty() {
                                0.0
                            } else {
                                ps.iter().map(|&p| a[(i, p)]).sum::<f64>() / ps.len() as f64
                            }
                        })
                        .collect::<Vec<f64>>()
                })
                .collect::<Vec<_>>(),
        );
        let mut betas = Matrix::zeros(n, c.n_sites);
        for i in 0..n {
            for s in 0..c.n_sites {
                let noise = c.noise_sd * rng.standard_normal();
                betas[(i, s)] = sigmoid(loading[s] * gene_signal[(i, site_gene[s])] + noise);
            }
        }
        let width = n.to_string().len();
        let sample_ids = (1..=n).map(|i| format!("{task_id}_s{i:0width$}")).collect();
        datasets.push(TaskDataset::new(
            task_id.clone(),
            site_ids.clone(),
            sample_ids,
            betas,
            labels,
        )?);
        intercepts.push(intercept);
        activations.push(a);
    }

    let sg_edges = site_gene.iter().enumerate().map(|(s, &g)| Edge::new(s, g)).collect();
    let gp_edges = gene_pathways
        .iter()
        .enumerate()
        .flat_map(|(g, ps)| ps.iter().map(move |&p| Edge::new(g, p)))
        .collect();
    let ontology = Ontology::new(site_ids, gene_ids, pathway_ids, sg_edges, gp_edges)?;
    Ok(SyntheticData {
        ontology,
        datasets,
        truth: GroundTruth {
            causal_pathways,
            label_weights,
            intercepts,
            heldout_site_gene: held_sites.iter().map(|&s| (s, site_gene[s])).collect(),
            activations,
        },
    })
}

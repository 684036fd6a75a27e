//! Data loading, site resolution, masks and training shared by the
//! subcommands.

use std::collections::HashMap;
use std::path::Path;

use crate::data::{
    build_ontology, generate_synthetic, load_gmt, load_site_gene_map, load_task_dataset, split,
    GroundTruth, TaskDataset,
};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, MiracleModel};
use crate::numerics::{streams, Matrix, Rng};
use crate::ontology::{candidate_mask, holdout, Ontology};
use crate::selection::{select_sites_with_scores, SiteScore};
use crate::training::{train_three_stage, EpochReport, TrainPlan};

use super::config::{DataConfig, RunConfig};

/// Ontology plus unsplit datasets, before site resolution.
pub struct LoadedData {
    pub ontology: Ontology,
    pub datasets: Vec<TaskDataset>,
    pub truth: Option<GroundTruth>,
}

pub fn load_data(cfg: &RunConfig, base: &Path) -> Result<LoadedData> {
    match &cfg.data {
        DataConfig::Synthetic(s) => {
            let d = generate_synthetic(s)?;
            Ok(LoadedData {
                ontology: d.ontology,
                datasets: d.datasets,
                truth: Some(d.truth),
            })
        }
        DataConfig::Files(f) => {
            let rows = load_site_gene_map(&base.join(&f.site_gene))?;
            let sets = load_gmt(&base.join(&f.gene_sets))?;
            let (ontology, dropped) = build_ontology(&rows, &sets)?;
            if dropped > 0 {
                eprintln!("note: {dropped} gene-set members have no site and were dropped");
            }
            let datasets = f
                .tasks
                .iter()
                .map(|t| load_task_dataset(&t.id, &base.join(&t.betas), &base.join(&t.labels), f.impute_missing))
                .collect::<Result<Vec<_>>>()?;
            Ok(LoadedData {
                ontology,
                datasets,
                truth: None,
            })
        }
    }
}

/// Ontology sites measured in every dataset, in ontology order.
pub fn shared_sites(ontology: &Ontology, datasets: &[TaskDataset]) -> Vec<String> {
    let present: Vec<std::collections::HashSet<&str>> = datasets
        .iter()
        .map(|d| d.site_ids().iter().map(String::as_str).collect())
        .collect();
    ontology
        .site_ids()
        .iter()
        .filter(|s| present.iter().all(|p| p.contains(s.as_str())))
        .cloned()
        .collect()
}

/// Model input sites and, when selection is configured, the per-dataset
/// scores behind them.
pub struct ResolvedSites {
    pub sites: Vec<String>,
    pub scores: Option<Vec<Vec<SiteScore>>>,
}

pub fn resolve_sites(cfg: &RunConfig, data: &LoadedData) -> Result<ResolvedSites> {
    let universe = shared_sites(&data.ontology, &data.datasets);
    if universe.is_empty() {
        return Err(Error::Invalid(
            "no ontology site is measured in every dataset".into(),
        ));
    }
    match &cfg.selection {
        None => Ok(ResolvedSites {
            sites: universe,
            scores: None,
        }),
        Some(sel) => {
            let restricted = data
                .datasets
                .iter()
                .map(|d| d.restrict_sites(&universe))
                .collect::<Result<Vec<_>>>()?;
            let (sites, scores) = select_sites_with_scores(&restricted, sel.num_selected)?;
            if sites.is_empty() {
                return Err(Error::Invalid("site selection kept no sites".into()));
            }
            Ok(ResolvedSites {
                sites,
                scores: Some(scores),
            })
        }
    }
}

/// Masks the model is built with, plus the originals for analysis.
pub struct RunMasks {
    /// Site-gene mask fed to the model; differs from `original` under hold-out.
    pub site_gene: Matrix,
    pub gene_pathway: Matrix,
    pub original_site_gene: Matrix,
    /// Held-out `(row, gene)` positions, ascending.
    pub heldout: Vec<(usize, usize)>,
}

pub fn build_run_masks(
    cfg: &RunConfig,
    data: &LoadedData,
    sites: &[String],
    base: &Path,
) -> Result<RunMasks> {
    let pair = data.ontology.build_masks(sites)?;
    let h = &cfg.holdout;
    let mut heldout = if h.fraction > 0.0 {
        let mut rng = Rng::new(cfg.seed).substream(&[streams::HOLDOUT]);
        holdout(&pair.site_gene, h.fraction, &mut rng, 1.0)?.1
    } else if h.planted {
        let truth = data
            .truth
            .as_ref()
            .ok_or_else(|| Error::Config("holdout.planted needs synthetic data".into()))?;
        let row: HashMap<&str, usize> = sites.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        truth
            .heldout_site_gene
            .iter()
            .filter_map(|&(s, g)| row.get(data.ontology.site_ids()[s].as_str()).map(|&r| (r, g)))
            .collect()
    } else if let Some(path) = &h.edges {
        load_edge_list(&base.join(path), &data.ontology, sites, &pair.site_gene)?
    } else {
        Vec::new()
    };
    heldout.sort_unstable();
    heldout.dedup();
    let site_gene = if h.is_active() {
        candidate_mask(&pair.site_gene, &heldout, h.candidate_strength)
    } else {
        pair.site_gene.clone()
    };
    Ok(RunMasks {
        site_gene,
        gene_pathway: pair.gene_pathway,
        original_site_gene: pair.site_gene,
        heldout,
    })
}

/// Reads `site_id<TAB>gene_id` pairs. Pairs whose site is not a model input
/// are skipped; pairs that are not known edges are an error.
fn load_edge_list(path: &Path, ontology: &Ontology, sites: &[String], mask: &Matrix) -> Result<Vec<(usize, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let row: HashMap<&str, usize> = sites.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let gene: HashMap<&str, usize> = ontology
        .gene_ids()
        .iter()
        .enumerate()
        .map(|(i, g)| (g.as_str(), i))
        .collect();
    let err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 2 {
            return Err(err(n + 1, format!("expected 2 fields, found {}", f.len())));
        }
        let g = *gene
            .get(f[1])
            .ok_or_else(|| err(n + 1, format!("unknown gene {}", f[1])))?;
        let Some(&r) = row.get(f[0]) else { continue };
        if mask[(r, g)] == 0.0 {
            return Err(err(n + 1, format!("{} -> {} is not a known edge", f[0], f[1])));
        }
        out.push((r, g));
    }
    Ok(out)
}

pub fn write_edge_list(path: &Path, sites: &[String], genes: &[String], edges: &[(usize, usize)]) -> Result<()> {
    let mut out = String::from("site_id\tgene_id\n");
    for &(r, g) in edges {
        out.push_str(&format!("{}\t{}\n", sites[r], genes[g]));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Datasets restricted to `sites` and split with the run seed.
pub fn split_datasets(cfg: &RunConfig, datasets: &[TaskDataset], sites: &[String], seed: u64) -> Result<Vec<TaskDataset>> {
    let root = Rng::new(seed);
    datasets
        .iter()
        .enumerate()
        .map(|(t, d)| {
            let r = d.restrict_sites(sites)?;
            split(&r, cfg.split, &mut root.substream(&[streams::SPLIT, t as u64]))
        })
        .collect()
}

pub fn init_model(cfg: &RunConfig, masks: &RunMasks, n_tasks: usize, seed: u64) -> Result<MiracleModel> {
    let mut rng = Rng::new(seed).substream(&[streams::INIT]);
    MiracleModel::new(&masks.site_gene, &masks.gene_pathway, n_tasks, cfg.model.hidden, &mut rng)
}

/// Everything a seeded run needs, prepared once per process.
pub struct Prepared {
    pub data: LoadedData,
    pub sites: ResolvedSites,
    pub masks: RunMasks,
}

pub fn prepare(cfg: &RunConfig, base: &Path) -> Result<Prepared> {
    let data = load_data(cfg, base)?;
    let sites = resolve_sites(cfg, &data)?;
    let masks = build_run_masks(cfg, &data, &sites.sites, base)?;
    Ok(Prepared { data, sites, masks })
}

impl Prepared {
    pub fn task_ids(&self) -> Vec<String> {
        self.data.datasets.iter().map(|d| d.task_id().to_string()).collect()
    }
}

pub struct RunOutcome {
    pub model: MiracleModel,
    pub datasets: Vec<TaskDataset>,
    pub reports: Vec<EpochReport>,
}

/// One full training run with the given seed.
pub fn train_run(
    cfg: &RunConfig,
    prep: &Prepared,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochReport),
) -> Result<RunOutcome> {
    let datasets = split_datasets(cfg, &prep.data.datasets, &prep.sites.sites, seed)?;
    let mut model = init_model(cfg, &prep.masks, datasets.len(), seed)?;
    let plan = TrainPlan {
        seed,
        ..cfg.train.clone()
    };
    let reports = train_three_stage(&mut model, &datasets, &plan, on_epoch)?;
    Ok(RunOutcome {
        model,
        datasets,
        reports,
    })
}

/// Restores a checkpoint against this run's sites, tasks and masks.
pub fn restore(prep: &Prepared, ck: &Checkpoint) -> Result<MiracleModel> {
    if ck.site_ids != prep.sites.sites {
        return Err(Error::Invalid(
            "checkpoint site list differs from the configured data".into(),
        ));
    }
    if ck.task_ids != prep.task_ids() {
        return Err(Error::Invalid(format!(
            "checkpoint tasks {:?} differ from configured tasks {:?}",
            ck.task_ids,
            prep.task_ids()
        )));
    }
    ck.to_model(&prep.masks.site_gene, &prep.masks.gene_pathway)
}

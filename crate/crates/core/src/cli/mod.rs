//! Command-line entry points.
//!
//! Each subcommand reads an optional JSON [`RunConfig`], applies the
//! `--seed` override, and writes its artifacts under the output directory
//! (`--out`, else the config's `out_dir`, else `$MIRACLE_OUT_DIR`, else
//! `miracle-out`). Exit codes: 0 success, 1 invalid input or usage, 2
//! runtime failure.

pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::{fmt_f64, write_beta_matrix, write_gmt, write_labels, write_site_gene_map, SplitTag};
use crate::error::{Error, Result};
use crate::model::{gradcheck_tiny_model, Checkpoint};
use crate::ontology::classify_positions;
use crate::report::{export_embeddings, recover_heldout, weight_distributions, Metrics, RunMetrics, DEFAULT_BINS};
use crate::training::{evaluate, EpochReport};

pub use config::RunConfig;
use config::{base_dir, DataConfig, FilesConfig, TaskFiles};
use pipeline::{prepare, restore, train_run, write_edge_list, Prepared};

pub const OUT_DIR_ENV: &str = "MIRACLE_OUT_DIR";
const FALLBACK_OUT_DIR: &str = "miracle-out";

#[derive(Debug, Parser)]
#[command(name = "miracle", version, about = "Ontology-masked multi-task VAE for methylation phenotypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Falls back to the config, then $MIRACLE_OUT_DIR.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn tag(self) -> Option<SplitTag> {
        match self {
            SplitArg::Train => Some(SplitTag::Train),
            SplitArg::Val => Some(SplitTag::Val),
            SplitArg::Test => Some(SplitTag::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic ontology, cohorts, ground truth and a run config
    /// that trains on the written files. `--seed` sets the generator seed.
    GenSynth {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score every site per dataset with Welch's t-test and write the union
    /// of per-dataset picks.
    SelectSites {
        #[command(flatten)]
        common: CommonArgs,
        /// Keep this many smallest p-values per dataset instead of every
        /// site with p ≤ 0.05.
        #[arg(long)]
        num_selected: Option<usize>,
    },
    /// Compile the site-gene and gene-pathway masks, optionally hiding a
    /// random fraction of known site-gene edges.
    BuildMasks {
        #[command(flatten)]
        common: CommonArgs,
        /// Fraction of known site-gene edges to hide.
        #[arg(long, value_name = "FRAC")]
        holdout: Option<f64>,
    },
    /// Three-stage training; writes checkpoint, epoch reports and test metrics.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of runs with seeds seed, seed+1, …
        #[arg(long, default_value_t = 1)]
        repeats: u64,
    },
    /// Accuracy of a checkpoint on one split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Posterior-mean embeddings of every sample as TSV.
    Embed {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Weight histograms per position class and, under hold-out, the
    /// held-out edge recovery ranking.
    ExportWeights {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
    /// Finite-difference check of the full loss gradient on a tiny random model.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

struct Context {
    cfg: RunConfig,
    base: PathBuf,
    out: PathBuf,
    digest: String,
}

impl Context {
    fn new(common: &CommonArgs, adjust: impl FnOnce(&mut RunConfig)) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        adjust(&mut cfg);
        cfg.validate()?;
        let base = base_dir(common.config.as_deref());
        let out = match (&common.out, &cfg.out_dir) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => base.join(o),
            (None, None) => std::env::var_os(OUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR)),
        };
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let digest = cfg.digest()?;
        Ok(Self { cfg, base, out, digest })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        write_file(&self.path(name), bytes)
    }

    fn write_config(&self) -> Result<()> {
        self.write("config.json", self.cfg.to_json_bytes()?)
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth { common } => gen_synth(&common),
        Command::SelectSites { common, num_selected } => select_sites(&common, num_selected),
        Command::BuildMasks { common, holdout } => build_masks(&common, holdout),
        Command::Train { common, repeats } => train(&common, repeats),
        Command::Evaluate { common, checkpoint, split } => evaluate_cmd(&common, &checkpoint, split),
        Command::Embed { common, checkpoint, split } => embed(&common, &checkpoint, split),
        Command::ExportWeights { common, checkpoint, bins } => export_weights(&common, &checkpoint, bins),
        Command::Gradcheck { seed, eps, tolerance } => gradcheck(seed, eps, tolerance),
    }
}

fn gen_synth(common: &CommonArgs) -> Result<()> {
    let seed = common.seed;
    let ctx = Context::new(
        &CommonArgs {
            config: common.config.clone(),
            seed: None,
            out: common.out.clone(),
        },
        |cfg| {
            if let (Some(s), DataConfig::Synthetic(sc)) = (seed, &mut cfg.data) {
                sc.seed = s;
            }
        },
    )?;
    let DataConfig::Synthetic(sc) = &ctx.cfg.data else {
        return Err(Error::Config("gen-synth needs synthetic data in the config".into()));
    };
    let data = crate::data::generate_synthetic(sc)?;
    write_site_gene_map(&ctx.path("site_gene.tsv"), &data.ontology)?;
    write_gmt(&ctx.path("pathways.gmt"), &data.ontology)?;
    let mut tasks = Vec::new();
    for d in &data.datasets {
        let betas = format!("betas_{}.tsv", d.task_id());
        let labels = format!("labels_{}.tsv", d.task_id());
        write_beta_matrix(&ctx.path(&betas), d.site_ids(), d.sample_ids(), d.betas())?;
        write_labels(&ctx.path(&labels), d.sample_ids(), d.labels())?;
        tasks.push(TaskFiles {
            id: d.task_id().to_string(),
            betas: betas.into(),
            labels: labels.into(),
        });
    }
    let mut truth = serde_json::to_vec_pretty(&data.truth)?;
    truth.push(b'\n');
    ctx.write("truth.json", truth)?;

    let mut run = RunConfig {
        data: DataConfig::Files(FilesConfig {
            site_gene: "site_gene.tsv".into(),
            gene_sets: "pathways.gmt".into(),
            tasks,
            impute_missing: false,
        }),
        out_dir: None,
        ..ctx.cfg.clone()
    };
    if !data.truth.heldout_site_gene.is_empty() {
        let sites = data.ontology.site_ids();
        let edges: Vec<(usize, usize)> = data.truth.heldout_site_gene.clone();
        write_edge_list(&ctx.path("heldout_edges.tsv"), sites, data.ontology.gene_ids(), &edges)?;
        if run.holdout.planted {
            run.holdout.planted = false;
            run.holdout.edges = Some("heldout_edges.tsv".into());
        }
    }
    ctx.write("run.json", run.to_json_bytes()?)?;
    println!(
        "wrote {} tasks, {} sites to {}",
        data.datasets.len(),
        data.ontology.site_ids().len(),
        ctx.out.display()
    );
    Ok(())
}

fn select_sites(common: &CommonArgs, num_selected: Option<usize>) -> Result<()> {
    let ctx = Context::new(common, |cfg| {
        let sel = cfg.selection.get_or_insert_with(Default::default);
        if num_selected.is_some() {
            sel.num_selected = num_selected;
        }
    })?;
    let data = pipeline::load_data(&ctx.cfg, &ctx.base)?;
    let universe = pipeline::shared_sites(&data.ontology, &data.datasets);
    let restricted = data
        .datasets
        .iter()
        .map(|d| d.restrict_sites(&universe))
        .collect::<Result<Vec<_>>>()?;
    let (sites, scores) = crate::selection::select_sites_with_scores(
        &restricted,
        ctx.cfg.selection.as_ref().and_then(|s| s.num_selected),
    )?;
    let mut list = String::new();
    for s in &sites {
        list.push_str(s);
        list.push('\n');
    }
    ctx.write("selected_sites.txt", list)?;
    let mut table = String::from("task_id\tsite_id\tt_stat\tdf\tp_value\n");
    for (d, task_scores) in restricted.iter().zip(&scores) {
        for s in task_scores {
            table.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                d.task_id(),
                s.site_id,
                fmt_f64(s.t_stat),
                fmt_f64(s.df),
                fmt_f64(s.p_value)
            ));
        }
    }
    ctx.write("site_scores.tsv", table)?;
    ctx.write_config()?;
    println!("selected {} of {} sites", sites.len(), universe.len());
    Ok(())
}

fn mask_tsv(m: &crate::numerics::Matrix, rows: &[String], cols: &[String]) -> String {
    let mut out = String::from("id");
    for c in cols {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for (i, r) in rows.iter().enumerate() {
        out.push_str(r);
        for v in m.row(i) {
            out.push('\t');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct MaskSummary<'a> {
    site_gene_digest: String,
    gene_pathway_digest: String,
    sites: usize,
    genes: usize,
    pathways: usize,
    heldout: usize,
    config_digest: &'a str,
}

fn build_masks(common: &CommonArgs, frac: Option<f64>) -> Result<()> {
    let ctx = Context::new(common, |cfg| {
        if let Some(f) = frac {
            cfg.holdout.fraction = f;
            cfg.holdout.planted = false;
            cfg.holdout.edges = None;
        }
    })?;
    let prep = prepare(&ctx.cfg, &ctx.base)?;
    let o = &prep.data.ontology;
    let m = &prep.masks;
    ctx.write("site_gene_mask.tsv", mask_tsv(&m.site_gene, &prep.sites.sites, o.gene_ids()))?;
    ctx.write("gene_pathway_mask.tsv", mask_tsv(&m.gene_pathway, o.gene_ids(), o.pathway_ids()))?;
    write_edge_list(&ctx.path("heldout_edges.tsv"), &prep.sites.sites, o.gene_ids(), &m.heldout)?;
    let summary = MaskSummary {
        site_gene_digest: crate::model::mask_digest(&m.site_gene),
        gene_pathway_digest: crate::model::mask_digest(&m.gene_pathway),
        sites: prep.sites.sites.len(),
        genes: o.gene_ids().len(),
        pathways: o.pathway_ids().len(),
        heldout: m.heldout.len(),
        config_digest: &ctx.digest,
    };
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    ctx.write("masks.json", bytes)?;
    ctx.write_config()?;
    println!(
        "masks {}x{} and {}x{}, {} held-out edges",
        m.site_gene.rows(),
        m.site_gene.cols(),
        m.gene_pathway.rows(),
        m.gene_pathway.cols(),
        m.heldout.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct EpochLine<'a> {
    config_digest: &'a str,
    seed: u64,
    #[serde(flatten)]
    report: &'a EpochReport,
}

fn train(common: &CommonArgs, repeats: u64) -> Result<()> {
    if repeats == 0 {
        return Err(Error::Config("--repeats must be at least 1".into()));
    }
    let ctx = Context::new(common, |_| {})?;
    let prep = prepare(&ctx.cfg, &ctx.base)?;
    let mut runs = Vec::new();
    for r in 0..repeats {
        let seed = ctx.cfg.seed + r;
        let dir = if repeats == 1 {
            ctx.out.clone()
        } else {
            ctx.out.join(format!("seed_{seed}"))
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut lines = Vec::new();
        let mut on_epoch = |rep: &EpochReport| {
            eprintln!(
                "seed {seed} stage {} epoch {} lr {:.3e} loss {:.4} val {:.4}",
                rep.stage, rep.epoch, rep.lr, rep.mean_train_loss, rep.mean_val_accuracy
            );
            let line = EpochLine {
                config_digest: &ctx.digest,
                seed,
                report: rep,
            };
            if let Ok(mut l) = serde_json::to_vec(&line) {
                l.push(b'\n');
                lines.extend(l);
            }
        };
        let outcome = train_run(&ctx.cfg, &prep, seed, &mut on_epoch)?;
        write_file(&dir.join("epochs.jsonl"), &lines)?;
        Checkpoint::from_model(&outcome.model, &prep.sites.sites, &prep.task_ids(), Some(ctx.digest.clone()))
            .save(&dir.join("checkpoint.json"))?;
        let e = evaluate(&outcome.model, &outcome.datasets, SplitTag::Test, 0.5)?;
        runs.push(RunMetrics {
            seed,
            per_task_accuracy: e.per_task,
            mean_accuracy: e.mean,
        });
    }
    let metrics = Metrics::from_runs(SplitTag::Test, prep.task_ids(), runs, ctx.digest.clone())?;
    ctx.write("metrics.json", metrics.to_json_bytes()?)?;
    ctx.write_config()?;
    println!("test mean accuracy {:.4}", metrics.mean_accuracy);
    Ok(())
}

fn load_for_checkpoint(common: &CommonArgs, checkpoint: &Path) -> Result<(Context, Prepared, crate::model::MiracleModel)> {
    let ctx = Context::new(common, |_| {})?;
    let ck = Checkpoint::load(checkpoint)?;
    if let Some(d) = &ck.config_digest {
        if d != &ctx.digest {
            eprintln!("note: checkpoint was trained under config digest {d}");
        }
    }
    let prep = prepare(&ctx.cfg, &ctx.base)?;
    let model = restore(&prep, &ck)?;
    Ok((ctx, prep, model))
}

fn evaluate_cmd(common: &CommonArgs, checkpoint: &Path, split: SplitArg) -> Result<()> {
    let (ctx, prep, model) = load_for_checkpoint(common, checkpoint)?;
    let datasets = pipeline::split_datasets(&ctx.cfg, &prep.data.datasets, &prep.sites.sites, ctx.cfg.seed)?;
    let tag = split
        .tag()
        .ok_or_else(|| Error::Config("evaluate needs --split train, val or test".into()))?;
    let e = evaluate(&model, &datasets, tag, 0.5)?;
    let run = RunMetrics {
        seed: ctx.cfg.seed,
        per_task_accuracy: e.per_task,
        mean_accuracy: e.mean,
    };
    let metrics = Metrics::from_runs(tag, prep.task_ids(), vec![run], ctx.digest.clone())?;
    ctx.write(&format!("evaluation_{}.json", tag.name()), metrics.to_json_bytes()?)?;
    println!("{} mean accuracy {:.4}", tag.name(), metrics.mean_accuracy);
    Ok(())
}

fn embed(common: &CommonArgs, checkpoint: &Path, split: SplitArg) -> Result<()> {
    let (ctx, prep, model) = load_for_checkpoint(common, checkpoint)?;
    let datasets = pipeline::split_datasets(&ctx.cfg, &prep.data.datasets, &prep.sites.sites, ctx.cfg.seed)?;
    ctx.write("embeddings.tsv", export_embeddings(&model, &datasets, split.tag())?)?;
    Ok(())
}

fn export_weights(common: &CommonArgs, checkpoint: &Path, bins: usize) -> Result<()> {
    let (ctx, prep, model) = load_for_checkpoint(common, checkpoint)?;
    let m = &prep.masks;
    let o = &prep.data.ontology;
    let layer = |name: &str| model.layer(name).expect("known layer").effective_weight();
    let sg_classes = classify_positions(&m.original_site_gene, &m.heldout)?;
    let gp_classes = classify_positions(&m.gene_pathway, &[])?;
    for (file, name, weights, classes) in [
        ("weights_site_gene.csv", "enc_site_gene", layer("enc_site_gene"), &sg_classes),
        ("weights_gene_pathway.csv", "enc_mu", layer("enc_mu"), &gp_classes),
        ("weights_decoder_site_gene.csv", "dec_gene_site", layer("dec_gene_site").transpose(), &sg_classes),
    ] {
        ctx.write(file, weight_distributions(name, &weights, classes, bins)?.to_csv())?;
    }
    if !m.heldout.is_empty() {
        let rec = recover_heldout(&layer("dec_gene_site").transpose(), &sg_classes, m.heldout.len())?;
        ctx.write("recovery_site_gene.tsv", rec.to_tsv(&prep.sites.sites, o.gene_ids()))?;
        println!(
            "recovery@{} {:.4} (chance {:.4})",
            rec.top_k, rec.recovery, rec.chance
        );
    }
    Ok(())
}

fn gradcheck(seed: u64, eps: f64, tolerance: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("--eps must be positive, got {eps}")));
    }
    let report = gradcheck_tiny_model(seed, eps)?;
    println!(
        "max relative error {:.3e} over {} entries",
        report.max_rel_error, report.checked
    );
    if let Some(w) = &report.worst {
        println!(
            "worst {}[{}]: analytic {:.6e} numeric {:.6e}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    if report.max_rel_error < tolerance {
        Ok(())
    } else {
        Err(Error::GradientCheck(format!(
            "relative error {:.3e} exceeds tolerance {tolerance:.1e}",
            report.max_rel_error
        )))
    }
}

//! Tab-separated file formats.
//!
//! * beta matrix: header `sample_id<TAB>site…`, one sample per row, values
//!   in `[0, 1]`, `NA` for missing.
//! * labels: header `sample_id<TAB>label`, labels `0` or `1`.
//! * site-gene map: header `site_id<TAB>gene_id[<TAB>strength]`.
//! * GMT: `pathway<TAB>description<TAB>gene…`, no header.
//!
//! Inputs whose name ends in `.gz` are decompressed on the fly. Writers emit
//! 17 significant digits, enough for an exact round trip.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::ontology::{Edge, Ontology};

use super::TaskDataset;

/// Shortest fixed-width decimal that round-trips an `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct Lines {
    path: String,
    inner: Box<dyn BufRead>,
    line: usize,
}

impl Lines {
    fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let inner: Box<dyn BufRead> = if path.extension().is_some_and(|e| e == "gz") {
            Box::new(BufReader::new(GzDecoder::new(file)))
        } else {
            Box::new(BufReader::new(file))
        };
        Ok(Self {
            path: path.display().to_string(),
            inner,
            line: 0,
        })
    }

    /// Next line without its terminator, or `None` at end of file.
    fn next_line(&mut self) -> Result<Option<String>> {
        let mut buf = String::new();
        let n = self.inner.read_line(&mut buf).map_err(|e| Error::io(&self.path, e))?;
        if n == 0 {
            return Ok(None);
        }
        self.line += 1;
        while buf.ends_with('\n') || buf.ends_with('\r') {
            buf.pop();
        }
        Ok(Some(buf))
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn expect_header(&mut self, prefix: &[&str]) -> Result<Vec<String>> {
        let Some(header) = self.next_line()? else {
            return Err(self.err("empty file, expected a header"));
        };
        let fields: Vec<String> = header.split('\t').map(str::to_string).collect();
        if fields.len() < prefix.len() || fields.iter().zip(prefix).any(|(f, p)| f != p) {
            return Err(self.err(format!("header must start with {}", prefix.join("<TAB>"))));
        }
        Ok(fields)
    }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BetaMatrix {
    pub site_ids: Vec<String>,
    pub sample_ids: Vec<String>,
    pub values: Matrix,
}

/// Reads a samples × sites beta matrix. Missing cells (`NA`) are an error
/// unless `impute_mean` is set, in which case they take the mean of the
/// column's observed values.
pub fn load_beta_matrix(path: &Path, impute_mean: bool) -> Result<BetaMatrix> {
    let mut lines = Lines::open(path)?;
    let header = lines.expect_header(&["sample_id"])?;
    let site_ids: Vec<String> = header[1..].to_vec();
    let mut seen = HashSet::new();
    for s in &site_ids {
        if s.is_empty() || !seen.insert(s.as_str()) {
            return Err(lines.err(format!("empty or duplicate site id {s:?} in header")));
        }
    }
    let n_sites = site_ids.len();
    let mut sample_ids = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut missing: Vec<(usize, usize)> = Vec::new();
    let mut seen_samples = HashSet::new();
    while let Some(line) = lines.next_line()? {
        if line.is_empty() {
            return Err(lines.err("blank line"));
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != n_sites + 1 {
            return Err(lines.err(format!(
                "expected {} fields, found {}",
                n_sites + 1,
                fields.len()
            )));
        }
        if !seen_samples.insert(fields[0].to_string()) {
            return Err(lines.err(format!("duplicate sample id {:?}", fields[0])));
        }
        let row = sample_ids.len();
        for (j, cell) in fields[1..].iter().enumerate() {
            if *cell == "NA" {
                if !impute_mean {
                    return Err(lines.err(format!(
                        "missing value for site {} (enable mean imputation to accept NA)",
                        site_ids[j]
                    )));
                }
                missing.push((row, j));
                values.push(f64::NAN);
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| lines.err(format!("cannot parse {cell:?} as a number")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(lines.err(format!(
                    "value {v} for site {} outside [0, 1]",
                    site_ids[j]
                )));
            }
            values.push(v);
        }
        sample_ids.push(fields[0].to_string());
    }
    let mut m = Matrix::new(sample_ids.len(), n_sites, values)?;
    if !missing.is_empty() {
        let mut sums = vec![0.0; n_sites];
        let mut counts = vec![0usize; n_sites];
        for i in 0..m.rows() {
            for (j, &v) in m.row(i).iter().enumerate() {
                if !v.is_nan() {
                    sums[j] += v;
                    counts[j] += 1;
                }
            }
        }
        for &(i, j) in &missing {
            if counts[j] == 0 {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: 1,
                    msg: format!("site {} has no observed values to impute from", site_ids[j]),
                });
            }
            m[(i, j)] = sums[j] / counts[j] as f64;
        }
    }
    Ok(BetaMatrix {
        site_ids,
        sample_ids,
        values: m,
    })
}

pub fn write_beta_matrix(path: &Path, site_ids: &[String], sample_ids: &[String], values: &Matrix) -> Result<()> {
    if values.shape() != (sample_ids.len(), site_ids.len()) {
        return Err(Error::Shape {
            op: "write_beta_matrix",
            left: (sample_ids.len(), site_ids.len()),
            right: values.shape(),
        });
    }
    let mut out = String::from("sample_id");
    for s in site_ids {
        out.push('\t');
        out.push_str(s);
    }
    out.push('\n');
    for (i, id) in sample_ids.iter().enumerate() {
        out.push_str(id);
        for &v in values.row(i) {
            out.push('\t');
            out.push_str(&fmt_f64(v));
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Reads `sample_id<TAB>label` rows in file order.
pub fn load_labels(path: &Path) -> Result<Vec<(String, u8)>> {
    let mut lines = Lines::open(path)?;
    lines.expect_header(&["sample_id", "label"])?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    while let Some(line) = lines.next_line()? {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(lines.err(format!("expected 2 fields, found {}", fields.len())));
        }
        let label = match fields[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(lines.err(format!("label {other:?} outside {{0, 1}}"))),
        };
        if !seen.insert(fields[0].to_string()) {
            return Err(lines.err(format!("duplicate sample id {:?}", fields[0])));
        }
        out.push((fields[0].to_string(), label));
    }
    Ok(out)
}

pub fn write_labels(path: &Path, sample_ids: &[String], labels: &[u8]) -> Result<()> {
    let mut out = String::from("sample_id\tlabel\n");
    for (id, l) in sample_ids.iter().zip(labels) {
        let _ = writeln!(out, "{id}\t{l}");
    }
    write_file(path, &out)
}

/// Beta matrix plus labels for one task. The labels file must cover exactly
/// the samples of the matrix; rows follow the matrix order.
pub fn load_task_dataset(
    task_id: &str,
    betas_path: &Path,
    labels_path: &Path,
    impute_mean: bool,
) -> Result<TaskDataset> {
    let betas = load_beta_matrix(betas_path, impute_mean)?;
    let labels: HashMap<String, u8> = load_labels(labels_path)?.into_iter().collect();
    if labels.len() != betas.sample_ids.len() {
        return Err(Error::Invalid(format!(
            "task {task_id}: {} labels for {} samples",
            labels.len(),
            betas.sample_ids.len()
        )));
    }
    let ordered = betas
        .sample_ids
        .iter()
        .map(|s| {
            labels
                .get(s)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("task {task_id}: no label for sample {s}")))
        })
        .collect::<Result<Vec<u8>>>()?;
    TaskDataset::new(task_id, betas.site_ids, betas.sample_ids, betas.values, ordered)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteGeneRow {
    pub site: String,
    pub gene: String,
    pub strength: f64,
}

pub fn load_site_gene_map(path: &Path) -> Result<Vec<SiteGeneRow>> {
    let mut lines = Lines::open(path)?;
    let header = lines.expect_header(&["site_id", "gene_id"])?;
    let with_strength = match header.len() {
        2 => false,
        3 if header[2] == "strength" => true,
        _ => return Err(lines.err("header must be site_id<TAB>gene_id[<TAB>strength]")),
    };
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    while let Some(line) = lines.next_line()? {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(lines.err(format!(
                "expected {} fields, found {}",
                header.len(),
                fields.len()
            )));
        }
        let strength = if with_strength {
            let v: f64 = fields[2]
                .parse()
                .map_err(|_| lines.err(format!("cannot parse strength {:?}", fields[2])))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(lines.err(format!("strength {v} outside [0, 1]")));
            }
            v
        } else {
            1.0
        };
        if !seen.insert((fields[0].to_string(), fields[1].to_string())) {
            return Err(lines.err(format!(
                "duplicate site-gene edge ({}, {})",
                fields[0], fields[1]
            )));
        }
        out.push(SiteGeneRow {
            site: fields[0].to_string(),
            gene: fields[1].to_string(),
            strength,
        });
    }
    Ok(out)
}

/// Writes the site-gene tier of `ontology`, with a strength column.
pub fn write_site_gene_map(path: &Path, ontology: &Ontology) -> Result<()> {
    let mut out = String::from("site_id\tgene_id\tstrength\n");
    for e in ontology.site_gene_edges() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            ontology.site_ids()[e.from],
            ontology.gene_ids()[e.to],
            fmt_f64(e.strength)
        );
    }
    write_file(path, &out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneSet {
    pub name: String,
    pub description: String,
    pub genes: Vec<String>,
}

pub fn load_gmt(path: &Path) -> Result<Vec<GeneSet>> {
    let mut lines = Lines::open(path)?;
    let mut out = Vec::new();
    let mut names = HashSet::new();
    while let Some(line) = lines.next_line()? {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields[0].is_empty() {
            return Err(lines.err("expected pathway<TAB>description<TAB>gene…"));
        }
        if !names.insert(fields[0].to_string()) {
            return Err(lines.err(format!("duplicate pathway {:?}", fields[0])));
        }
        let mut genes = Vec::new();
        let mut seen = HashSet::new();
        for g in fields[2..].iter().filter(|g| !g.is_empty()) {
            if !seen.insert(*g) {
                return Err(lines.err(format!(
                    "duplicate gene-pathway edge ({g}, {})",
                    fields[0]
                )));
            }
            genes.push(g.to_string());
        }
        out.push(GeneSet {
            name: fields[0].to_string(),
            description: fields[1].to_string(),
            genes,
        });
    }
    Ok(out)
}

/// Writes the gene-pathway tier of `ontology`; edge strengths are not
/// representable in GMT and are dropped.
pub fn write_gmt(path: &Path, ontology: &Ontology) -> Result<()> {
    let mut members: Vec<Vec<&str>> = vec![Vec::new(); ontology.n_pathways()];
    for e in ontology.gene_pathway_edges() {
        members[e.to].push(&ontology.gene_ids()[e.from]);
    }
    let mut out = String::new();
    for (p, genes) in ontology.pathway_ids().iter().zip(&members) {
        out.push_str(p);
        out.push_str("\tNA");
        for g in genes {
            out.push('\t');
            out.push_str(g);
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Assembles an ontology. Sites and genes are numbered in order of first
/// appearance in the site-gene map and pathways in GMT order. Pathway
/// members absent from the site-gene map are dropped; the second value is
/// the number of dropped memberships.
pub fn build_ontology(site_gene: &[SiteGeneRow], gene_sets: &[GeneSet]) -> Result<(Ontology, usize)> {
    let mut site_idx: HashMap<&str, usize> = HashMap::new();
    let mut gene_idx: HashMap<&str, usize> = HashMap::new();
    let mut sites = Vec::new();
    let mut genes = Vec::new();
    let mut sg_edges = Vec::with_capacity(site_gene.len());
    for row in site_gene {
        let s = *site_idx.entry(&row.site).or_insert_with(|| {
            sites.push(row.site.clone());
            sites.len() - 1
        });
        let g = *gene_idx.entry(&row.gene).or_insert_with(|| {
            genes.push(row.gene.clone());
            genes.len() - 1
        });
        sg_edges.push(Edge {
            from: s,
            to: g,
            strength: row.strength,
        });
    }
    let mut dropped = 0;
    let mut gp_edges = Vec::new();
    for (p, set) in gene_sets.iter().enumerate() {
        for g in &set.genes {
            match gene_idx.get(g.as_str()) {
                Some(&gi) => gp_edges.push(Edge::new(gi, p)),
                None => dropped += 1,
            }
        }
    }
    let pathways = gene_sets.iter().map(|s| s.name.clone()).collect();
    let ontology = Ontology::new(sites, genes, pathways, sg_edges, gp_edges)?;
    Ok((ontology, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(dir: &tempfile::TempDir, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn beta_matrix_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = file(&dir, "b.tsv", "sample_id\tcg1\tcg2\nA\t0.1\t0.2\nB\t1\t0\n");
        let b = load_beta_matrix(&p, false).unwrap();
        assert_eq!(b.site_ids, vec!["cg1", "cg2"]);
        assert_eq!(b.sample_ids, vec!["A", "B"]);
        assert_eq!(b.values.data(), &[0.1, 0.2, 1.0, 0.0]);

        let vals = Matrix::from_rows(&[[0.1 + 0.2, 1.0 / 3.0], [5e-324, 0.999_999_999_999_999_9]]);
        let q = dir.path().join("c.tsv");
        write_beta_matrix(&q, &b.site_ids, &b.sample_ids, &vals).unwrap();
        let back = load_beta_matrix(&q, false).unwrap();
        assert_eq!(back.values, vals);
    }

    #[test]
    fn out_of_range_value_cites_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = file(&dir, "b.tsv", "sample_id\tcg1\nA\t0.5\nB\t1.2\n");
        match load_beta_matrix(&p, false) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("1.2"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ragged_row_and_missing_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = file(&dir, "b.tsv", "sample_id\tcg1\tcg2\nA\t0.5\n");
        assert!(matches!(load_beta_matrix(&p, false), Err(Error::Parse { line: 2, .. })));

        let p = file(&dir, "n.tsv", "sample_id\tcg1\nA\t0.2\nB\tNA\nC\t0.4\n");
        assert!(matches!(load_beta_matrix(&p, false), Err(Error::Parse { line: 3, .. })));
        let b = load_beta_matrix(&p, true).unwrap();
        assert!((b.values[(1, 0)] - 0.3).abs() < 1e-15);

        let p = file(&dir, "m.tsv", "sample_id\tcg1\tcg2\nA\t0.2\tNA\nB\t0.1\tNA\n");
        assert!(load_beta_matrix(&p, true).is_err());
    }

    #[test]
    fn gzip_input_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.tsv.gz");
        let mut enc = flate2::write::GzEncoder::new(File::create(&p).unwrap(), flate2::Compression::default());
        enc.write_all(b"sample_id\tcg1\nA\t0.25\n").unwrap();
        enc.finish().unwrap();
        let b = load_beta_matrix(&p, false).unwrap();
        assert_eq!(b.values.data(), &[0.25]);
    }

    #[test]
    fn labels_validate() {
        let dir = tempfile::tempdir().unwrap();
        let p = file(&dir, "l.tsv", "sample_id\tlabel\nA\t1\nB\t0\n");
        assert_eq!(load_labels(&p).unwrap(), vec![("A".into(), 1), ("B".into(), 0)]);
        let p = file(&dir, "l2.tsv", "sample_id\tlabel\nA\t2\n");
        assert!(matches!(load_labels(&p), Err(Error::Parse { line: 2, .. })));
        let p = file(&dir, "l3.tsv", "sample_id\tlabel\nA\t1\nA\t0\n");
        assert!(matches!(load_labels(&p), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn labels_follow_matrix_order() {
        let dir = tempfile::tempdir().unwrap();
        let b = file(&dir, "b.tsv", "sample_id\tcg1\nA\t0.5\nB\t0.6\n");
        let l = file(&dir, "l.tsv", "sample_id\tlabel\nB\t1\nA\t0\n");
        let ds = load_task_dataset("t", &b, &l, false).unwrap();
        assert_eq!(ds.labels(), &[0, 1]);
        let l = file(&dir, "l2.tsv", "sample_id\tlabel\nB\t1\nC\t0\n");
        assert!(load_task_dataset("t", &b, &l, false).is_err());
    }

    #[test]
    fn gmt_line_gives_one_pathway_with_three_edges() {
        let dir = tempfile::tempdir().unwrap();
        let sg = file(&dir, "sg.tsv", "site_id\tgene_id\ns1\tG1\ns2\tG2\ns3\tG3\n");
        let gmt = file(&dir, "p.gmt", "P1\tdesc\tG1\tG2\tG3\n");
        let (o, dropped) = build_ontology(&load_site_gene_map(&sg).unwrap(), &load_gmt(&gmt).unwrap()).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(o.n_pathways(), 1);
        assert_eq!(o.gene_pathway_edges().len(), 3);
    }

    #[test]
    fn unknown_gmt_genes_are_dropped_and_counted() {
        let rows = vec![SiteGeneRow {
            site: "s1".into(),
            gene: "G1".into(),
            strength: 1.0,
        }];
        let sets = vec![GeneSet {
            name: "P".into(),
            description: "d".into(),
            genes: vec!["G1".into(), "GX".into(), "GY".into()],
        }];
        let (o, dropped) = build_ontology(&rows, &sets).unwrap();
        assert_eq!(dropped, 2);
        assert_eq!(o.gene_ids(), &["G1".to_string()]);
    }

    #[test]
    fn duplicate_site_gene_rows_fail() {
        let dir = tempfile::tempdir().unwrap();
        let sg = file(&dir, "sg.tsv", "site_id\tgene_id\ns1\tG1\ns1\tG1\n");
        assert!(matches!(load_site_gene_map(&sg), Err(Error::Parse { line: 3, .. })));
        let sg = file(&dir, "sg2.tsv", "site_id\tgene_id\tstrength\ns1\tG1\t1.5\n");
        assert!(load_site_gene_map(&sg).is_err());
    }

    #[test]
    fn strength_column_reaches_the_mask() {
        let dir = tempfile::tempdir().unwrap();
        let sg = file(&dir, "sg.tsv", "site_id\tgene_id\tstrength\ns1\tG1\t0.25\ns2\tG1\t1\n");
        let gmt = file(&dir, "p.gmt", "P1\tdesc\tG1\n");
        let (o, _) = build_ontology(&load_site_gene_map(&sg).unwrap(), &load_gmt(&gmt).unwrap()).unwrap();
        let masks = o.build_masks(&["s1".into(), "s2".into()]).unwrap();
        assert_eq!(masks.site_gene.data(), &[0.25, 1.0]);
    }

    #[test]
    fn ontology_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sg = file(&dir, "sg.tsv", "site_id\tgene_id\tstrength\ns1\tG1\t0.3\ns2\tG2\t1\ns3\tG1\t1\n");
        let gmt = file(&dir, "p.gmt", "P1\tdesc\tG1\tG2\nP2\tdesc\tG2\n");
        let (o, _) = build_ontology(&load_site_gene_map(&sg).unwrap(), &load_gmt(&gmt).unwrap()).unwrap();
        let sg2 = dir.path().join("sg2.tsv");
        let gmt2 = dir.path().join("p2.gmt");
        write_site_gene_map(&sg2, &o).unwrap();
        write_gmt(&gmt2, &o).unwrap();
        let (o2, _) = build_ontology(&load_site_gene_map(&sg2).unwrap(), &load_gmt(&gmt2).unwrap()).unwrap();
        assert_eq!(o, o2);
    }
}

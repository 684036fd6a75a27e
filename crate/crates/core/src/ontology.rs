//! Site → gene → pathway graph and its compilation into layer masks.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// A weighted edge between two tiers, by index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub strength: f64,
}

impl Edge {
    pub fn new(from: usize, to: usize) -> Self {
        Self {
            from,
            to,
            strength: 1.0,
        }
    }
}

/// Two-tier bipartite ontology. Construct through [`Ontology::new`], which
/// enforces unique ids, in-range indices, no duplicate edges and strengths
/// in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ontology {
    site_ids: Vec<String>,
    gene_ids: Vec<String>,
    pathway_ids: Vec<String>,
    site_gene_edges: Vec<Edge>,
    gene_pathway_edges: Vec<Edge>,
}

/// Which mask a position belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    SiteGene,
    GenePathway,
}

impl Tier {
    pub fn name(self) -> &'static str {
        match self {
            Tier::SiteGene => "site_gene",
            Tier::GenePathway => "gene_pathway",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeldOutPosition {
    pub tier: Tier,
    pub row: usize,
    pub col: usize,
}

/// Masks for the two encoder tiers, rows following the selected-site order.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub site_gene: Matrix,
    pub gene_pathway: Matrix,
    pub heldout: Vec<HeldOutPosition>,
}

fn check_unique(kind: &str, ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Invalid(format!("duplicate {kind} id {id:?}")));
        }
    }
    Ok(())
}

fn check_edges(kind: &str, edges: &[Edge], n_from: usize, n_to: usize) -> Result<()> {
    let mut seen = HashSet::with_capacity(edges.len());
    for e in edges {
        if e.from >= n_from || e.to >= n_to {
            return Err(Error::Invalid(format!(
                "{kind} edge ({}, {}) out of range {n_from}x{n_to}",
                e.from, e.to
            )));
        }
        if !(0.0..=1.0).contains(&e.strength) {
            return Err(Error::Invalid(format!(
                "{kind} edge ({}, {}) has strength {} outside [0, 1]",
                e.from, e.to, e.strength
            )));
        }
        if !seen.insert((e.from, e.to)) {
            return Err(Error::Invalid(format!(
                "duplicate {kind} edge ({}, {})",
                e.from, e.to
            )));
        }
    }
    Ok(())
}

impl Ontology {
    pub fn new(
        site_ids: Vec<String>,
        gene_ids: Vec<String>,
        pathway_ids: Vec<String>,
        site_gene_edges: Vec<Edge>,
        gene_pathway_edges: Vec<Edge>,
    ) -> Result<Self> {
        check_unique("site", &site_ids)?;
        check_unique("gene", &gene_ids)?;
        check_unique("pathway", &pathway_ids)?;
        check_edges("site-gene", &site_gene_edges, site_ids.len(), gene_ids.len())?;
        check_edges(
            "gene-pathway",
            &gene_pathway_edges,
            gene_ids.len(),
            pathway_ids.len(),
        )?;
        Ok(Self {
            site_ids,
            gene_ids,
            pathway_ids,
            site_gene_edges,
            gene_pathway_edges,
        })
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn pathway_ids(&self) -> &[String] {
        &self.pathway_ids
    }

    pub fn site_gene_edges(&self) -> &[Edge] {
        &self.site_gene_edges
    }

    pub fn gene_pathway_edges(&self) -> &[Edge] {
        &self.gene_pathway_edges
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn n_pathways(&self) -> usize {
        self.pathway_ids.len()
    }

    /// Compiles the masks for `selected_sites`, in that row order.
    ///
    /// Genes and pathways without surviving edges stay as zero columns so the
    /// layer widths do not depend on the site selection.
    pub fn build_masks(&self, selected_sites: &[String]) -> Result<MaskPair> {
        let index: HashMap<&str, usize> = self
            .site_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut unknown = Vec::new();
        let mut row_of = vec![None; self.site_ids.len()];
        for (row, s) in selected_sites.iter().enumerate() {
            match index.get(s.as_str()) {
                Some(&i) => row_of[i] = Some(row),
                None => unknown.push(s.clone()),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownSites(unknown));
        }

        let mut site_gene = Matrix::zeros(selected_sites.len(), self.n_genes());
        for e in &self.site_gene_edges {
            if let Some(row) = row_of[e.from] {
                site_gene[(row, e.to)] = e.strength;
            }
        }
        let mut gene_pathway = Matrix::zeros(self.n_genes(), self.n_pathways());
        for e in &self.gene_pathway_edges {
            gene_pathway[(e.from, e.to)] = e.strength;
        }
        Ok(MaskPair {
            site_gene,
            gene_pathway,
            heldout: Vec::new(),
        })
    }
}

/// Hides `round(fraction · nnz)` nonzero entries of `mask` by overwriting them
/// with `substitute`. Returns the new mask and the affected `(row, col)`
/// positions in row-major order.
pub fn holdout(
    mask: &Matrix,
    fraction: f64,
    rng: &mut Rng,
    substitute: f64,
) -> Result<(Matrix, Vec<(usize, usize)>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Domain(format!(
            "hold-out fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let nonzero: Vec<(usize, usize)> = (0..mask.rows())
        .flat_map(|i| (0..mask.cols()).map(move |j| (i, j)))
        .filter(|&(i, j)| mask[(i, j)] != 0.0)
        .collect();
    let k = (fraction * nonzero.len() as f64).round() as usize;
    let mut picked: Vec<(usize, usize)> = rng
        .sample_indices(nonzero.len(), k)
        .into_iter()
        .map(|i| nonzero[i])
        .collect();
    picked.sort_unstable();
    let mut out = mask.clone();
    for &(i, j) in &picked {
        out[(i, j)] = substitute;
    }
    Ok((out, picked))
}

/// Hold-out variant of a mask for edge-recovery experiments: held-out edges
/// and every non-edge get the same `candidate_strength`, so the trained
/// weights are the only thing that can tell them apart.
pub fn candidate_mask(original: &Matrix, heldout: &[(usize, usize)], candidate_strength: f64) -> Matrix {
    let mut out = original.map(|v| if v == 0.0 { candidate_strength } else { v });
    for &(i, j) in heldout {
        out[(i, j)] = candidate_strength;
    }
    out
}

/// Partition of mask positions used for weight-distribution analysis.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PositionClasses {
    /// Known connections that stayed visible.
    pub ones: Vec<(usize, usize)>,
    /// Known connections hidden by hold-out.
    pub masked: Vec<(usize, usize)>,
    /// Positions without a known connection.
    pub non_ones: Vec<(usize, usize)>,
}

impl PositionClasses {
    pub fn total(&self) -> usize {
        self.ones.len() + self.masked.len() + self.non_ones.len()
    }
}

pub fn classify_positions(
    mask_original: &Matrix,
    heldout: &[(usize, usize)],
) -> Result<PositionClasses> {
    let held: HashSet<(usize, usize)> = heldout.iter().copied().collect();
    for &(i, j) in heldout {
        if i >= mask_original.rows() || j >= mask_original.cols() {
            return Err(Error::Invalid(format!(
                "held-out position ({i}, {j}) outside mask {:?}",
                mask_original.shape()
            )));
        }
    }
    let mut classes = PositionClasses::default();
    for i in 0..mask_original.rows() {
        for j in 0..mask_original.cols() {
            if held.contains(&(i, j)) {
                classes.masked.push((i, j));
            } else if mask_original[(i, j)] != 0.0 {
                classes.ones.push((i, j));
            } else {
                classes.non_ones.push((i, j));
            }
        }
    }
    Ok(classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn three_sites() -> Ontology {
        Ontology::new(
            ids("s", 3),
            ids("g", 2),
            ids("p", 1),
            vec![Edge::new(0, 0), Edge::new(1, 0), Edge::new(2, 1)],
            vec![Edge::new(0, 0)],
        )
        .unwrap()
    }

    #[test]
    fn no_edges_gives_zero_masks() {
        let o = Ontology::new(ids("s", 3), ids("g", 2), ids("p", 2), vec![], vec![]).unwrap();
        let m = o.build_masks(&ids("s", 3)).unwrap();
        assert_eq!(m.site_gene, Matrix::zeros(3, 2));
        assert_eq!(m.gene_pathway, Matrix::zeros(2, 2));
    }

    #[test]
    fn complete_graphs_give_ones() {
        let sg = (0..3).flat_map(|s| (0..2).map(move |g| Edge::new(s, g))).collect();
        let gp = (0..2).flat_map(|g| (0..2).map(move |p| Edge::new(g, p))).collect();
        let o = Ontology::new(ids("s", 3), ids("g", 2), ids("p", 2), sg, gp).unwrap();
        let m = o.build_masks(&ids("s", 3)).unwrap();
        assert_eq!(m.site_gene, Matrix::ones(3, 2));
        assert_eq!(m.gene_pathway, Matrix::ones(2, 2));
    }

    #[test]
    fn selected_subset_by_hand() {
        let m = three_sites()
            .build_masks(&["s1".to_string(), "s3".to_string()])
            .unwrap();
        assert_eq!(m.site_gene, Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
    }

    #[test]
    fn unknown_sites_are_listed() {
        let err = three_sites()
            .build_masks(&["s1".into(), "x9".into(), "x7".into()])
            .unwrap_err();
        match err {
            Error::UnknownSites(v) => assert_eq!(v, vec!["x9", "x7"]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn constructor_rejects_bad_graphs() {
        let dup = Ontology::new(ids("s", 2), ids("g", 1), ids("p", 1), vec![Edge::new(0, 0), Edge::new(0, 0)], vec![]);
        assert!(dup.is_err());
        let range = Ontology::new(ids("s", 2), ids("g", 1), ids("p", 1), vec![Edge::new(2, 0)], vec![]);
        assert!(range.is_err());
        let strength = Ontology::new(
            ids("s", 2),
            ids("g", 1),
            ids("p", 1),
            vec![Edge { from: 0, to: 0, strength: 1.5 }],
            vec![],
        );
        assert!(strength.is_err());
        let names = Ontology::new(vec!["a".into(), "a".into()], ids("g", 1), ids("p", 1), vec![], vec![]);
        assert!(names.is_err());
    }

    #[test]
    fn holdout_counts() {
        let mask = Matrix::from_rows(&[[1.0, 0.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0, 1.0], [0.0, 1.0, 0.0, 0.0, 0.0]]);
        assert_eq!(mask.count_nonzero(), 10);

        let (same, none) = holdout(&mask, 0.0, &mut Rng::new(1), 1.0).unwrap();
        assert_eq!(same, mask);
        assert!(none.is_empty());

        let (_, all) = holdout(&mask, 1.0, &mut Rng::new(1), 0.0).unwrap();
        assert_eq!(all.len(), 10);

        let (hidden, three) = holdout(&mask, 0.3, &mut Rng::new(1), 0.0).unwrap();
        assert_eq!(three.len(), 3);
        assert_eq!(hidden.count_nonzero(), 7);
        let (_, again) = holdout(&mask, 0.3, &mut Rng::new(1), 0.0).unwrap();
        assert_eq!(three, again);
        assert!(holdout(&mask, 1.5, &mut Rng::new(1), 1.0).is_err());
    }

    #[test]
    fn hand_partition() {
        let mask = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]);
        let c = classify_positions(&mask, &[(0, 0)]).unwrap();
        assert_eq!(c.ones, vec![(1, 0), (1, 1)]);
        assert_eq!(c.masked, vec![(0, 0)]);
        assert_eq!(c.non_ones, vec![(0, 1)]);

        assert!(classify_positions(&mask, &[]).unwrap().masked.is_empty());
        assert!(classify_positions(&Matrix::ones(2, 3), &[]).unwrap().non_ones.is_empty());
        assert!(classify_positions(&mask, &[(5, 0)]).is_err());
    }

    #[test]
    fn candidate_mask_levels_heldout_and_non_edges() {
        let mask = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]);
        let c = candidate_mask(&mask, &[(1, 1)], 0.1);
        assert_eq!(c, Matrix::from_rows(&[[1.0, 0.1], [1.0, 0.1]]));
    }

    fn random_ontology(seed: u64) -> Ontology {
        let mut rng = Rng::new(seed);
        let (n, g, p) = (8, 4, 3);
        let mut sg = Vec::new();
        for s in 0..n {
            for gi in 0..g {
                if rng.bernoulli(0.4) {
                    sg.push(Edge { from: s, to: gi, strength: rng.uniform() });
                }
            }
        }
        let gp = (0..g).map(|gi| Edge::new(gi, gi % p)).collect();
        Ontology::new(ids("s", n), ids("g", g), ids("p", p), sg, gp).unwrap()
    }

    proptest! {
        #[test]
        fn reordering_sites_permutes_rows(seed in 0u64..1000, perm_seed in 0u64..1000) {
            let o = random_ontology(seed);
            let sites = ids("s", 8);
            let mut order: Vec<usize> = (0..8).collect();
            Rng::new(perm_seed).shuffle(&mut order);
            let permuted: Vec<String> = order.iter().map(|&i| sites[i].clone()).collect();
            let base = o.build_masks(&sites).unwrap();
            let moved = o.build_masks(&permuted).unwrap();
            prop_assert_eq!(&moved.site_gene, &base.site_gene.select_rows(&order));
            prop_assert_eq!(&moved.gene_pathway, &base.gene_pathway);
            prop_assert_eq!(o.build_masks(&sites).unwrap(), base);
        }

        #[test]
        fn partition_covers_every_entry(seed in 0u64..1000, frac in 0.0f64..=1.0) {
            let o = random_ontology(seed);
            let m = o.build_masks(&ids("s", 8)).unwrap();
            let (_, held) = holdout(&m.site_gene, frac, &mut Rng::new(seed), 1.0).unwrap();
            let c = classify_positions(&m.site_gene, &held).unwrap();
            prop_assert_eq!(c.total(), m.site_gene.len());
            prop_assert_eq!(c.masked.len(), held.len());
        }
    }
}

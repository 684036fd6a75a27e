//! Versioned JSON checkpoints.
//!
//! Layout: `{"format_version": 1, "dims": {...}, "site_ids": [...],
//! "task_ids": [...], "config_digest": ..., "mask_digests": {...},
//! "layers": [{"name", "rows", "cols", "weight", "bias"}, ...]}` with weights
//! flattened row-major. Masks are not stored; they are rebuilt from the
//! ontology and checked against the SHA-256 digests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{MaskedLinearLayer, Parameterized};
use crate::numerics::Matrix;

use super::{Classifier, MiracleModel, ModelDims};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of a mask's shape and entries.
pub fn mask_digest(mask: &Matrix) -> String {
    hex::encode(Sha256::digest(mask.to_le_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskDigests {
    pub site_gene: String,
    pub gene_pathway: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dims: ModelDims,
    pub site_ids: Vec<String>,
    pub task_ids: Vec<String>,
    pub config_digest: Option<String>,
    pub mask_digests: MaskDigests,
    pub layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn from_model(
        model: &MiracleModel,
        site_ids: &[String],
        task_ids: &[String],
        config_digest: Option<String>,
    ) -> Self {
        let mut records: Vec<LayerRecord> = Vec::new();
        model.visit_params(&mut |name, m| {
            let (layer, part) = name.rsplit_once('.').expect("names are layer.part");
            if part == "weight" {
                records.push(LayerRecord {
                    name: layer.to_string(),
                    rows: m.rows(),
                    cols: m.cols(),
                    weight: m.data().to_vec(),
                    bias: Vec::new(),
                });
            } else {
                let rec = records.last_mut().expect("weight precedes bias");
                rec.bias = m.data().to_vec();
            }
        });
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dims: model.dims(),
            site_ids: site_ids.to_vec(),
            task_ids: task_ids.to_vec(),
            config_digest,
            mask_digests: MaskDigests {
                site_gene: mask_digest(model.site_gene_mask()),
                gene_pathway: mask_digest(model.gene_pathway_mask()),
            },
            layers: records,
        }
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported checkpoint format_version {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_slice(&bytes)
    }

    /// Rebuilds the model against masks compiled from the ontology, refusing
    /// masks whose digests differ from the ones recorded at save time.
    pub fn to_model(&self, site_gene_mask: &Matrix, gene_pathway_mask: &Matrix) -> Result<MiracleModel> {
        for (layer, expected, mask) in [
            ("site_gene", &self.mask_digests.site_gene, site_gene_mask),
            ("gene_pathway", &self.mask_digests.gene_pathway, gene_pathway_mask),
        ] {
            let found = mask_digest(mask);
            if &found != expected {
                return Err(Error::DigestMismatch {
                    layer: layer.to_string(),
                    expected: expected.clone(),
                    found,
                });
            }
        }
        let layer = |name: &str, mask: Matrix| -> Result<MaskedLinearLayer> {
            let rec = self
                .layers
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks layer {name}")))?;
            let weight = Matrix::new(rec.rows, rec.cols, rec.weight.clone())?;
            let bias = Matrix::new(1, rec.cols, rec.bias.clone())?;
            MaskedLinearLayer::new(weight, bias, mask)
        };
        let d = self.dims;
        let classifiers = (0..d.n_tasks)
            .map(|i| {
                Ok(Classifier {
                    hidden: layer(
                        &format!("classifier.{i}.hidden"),
                        Matrix::ones(d.n_pathways, d.hidden),
                    )?,
                    output: layer(&format!("classifier.{i}.output"), Matrix::ones(d.hidden, 1))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = MiracleModel::from_parts(
            layer("enc_site_gene", site_gene_mask.clone())?,
            layer("enc_mu", gene_pathway_mask.clone())?,
            layer("enc_logvar", gene_pathway_mask.clone())?,
            layer("dec_pathway_gene", gene_pathway_mask.transpose())?,
            layer("dec_gene_site", site_gene_mask.transpose())?,
            classifiers,
        )?;
        if model.dims() != d {
            return Err(Error::Invalid(format!(
                "checkpoint dims {d:?} disagree with layers {:?}",
                model.dims()
            )));
        }
        Ok(model)
    }
}

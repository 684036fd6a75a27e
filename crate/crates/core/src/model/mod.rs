//! The masked variational autoencoder with per-task classifier heads.
//!
//! ```text
//! x ─[site→gene, σ]→ h ─┬─[gene→pathway]→ μ
//!                       └─[gene→pathway]→ log σ²  (clamped to ±10)
//! z = μ + exp(½ log σ²) ⊙ ε
//! z ─[pathway→gene, σ]→ [gene→site, σ]→ x̂
//! z ─[dense p→h, relu]→ [dense h→1, σ]→ p_task
//! ```
//!
//! Decoder masks are the transposes of the encoder masks; both latent heads
//! share the gene→pathway mask.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, relu_backward, relu_forward, sigmoid_backward, sigmoid_forward, Gradients,
    MaskedLinearLayer, Parameterized,
};
use crate::numerics::{gaussian_sample, Matrix, Rng};

pub use checkpoint::{mask_digest, Checkpoint, CHECKPOINT_FORMAT_VERSION};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_sites: usize,
    pub n_genes: usize,
    pub n_pathways: usize,
    pub n_tasks: usize,
    pub hidden: usize,
}

/// Dense `p → h → 1` head with relu hidden units and a sigmoid output.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub hidden: MaskedLinearLayer,
    pub output: MaskedLinearLayer,
}

#[derive(Clone, Debug)]
pub struct MiracleModel {
    dims: ModelDims,
    pub(crate) enc_site_gene: MaskedLinearLayer,
    pub(crate) enc_mu: MaskedLinearLayer,
    pub(crate) enc_logvar: MaskedLinearLayer,
    pub(crate) dec_pathway_gene: MaskedLinearLayer,
    pub(crate) dec_gene_site: MaskedLinearLayer,
    pub(crate) classifiers: Vec<Classifier>,
}

/// Relative weights of the loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: Vec<f64>,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta].into_iter().chain(self.gamma.iter().copied());
        for v in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weights must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon_mse: f64,
    pub kl: f64,
    /// One entry per task; tasks absent from the batch contribute 0.
    pub bce: Vec<f64>,
}

/// How the latent code is produced from `(μ, log σ²)`.
pub enum LatentMode<'a> {
    /// `z = μ`.
    Mean,
    /// `z = μ + σ ⊙ ε`, `ε` drawn from the stream.
    Sample(&'a mut Rng),
    /// `z = μ + σ ⊙ ε` with a caller-supplied `ε`.
    Noise(&'a Matrix),
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub gene_act: Matrix,
    pub mu: Matrix,
    pub logvar: Matrix,
}

/// Parameter-name prefixes; used to select what a training stage updates.
pub mod groups {
    pub const AUTOENCODER: [&str; 5] = [
        "enc_site_gene.",
        "enc_mu.",
        "enc_logvar.",
        "dec_pathway_gene.",
        "dec_gene_site.",
    ];

    pub fn classifier_prefix(task: usize) -> String {
        format!("classifier.{task}.")
    }

    pub fn is_autoencoder(name: &str) -> bool {
        AUTOENCODER.iter().any(|p| name.starts_with(p))
    }
}

fn check_dims(op: &'static str, got: (usize, usize), cols: usize) -> Result<()> {
    if got.1 != cols {
        return Err(Error::Shape {
            op,
            left: got,
            right: (got.0, cols),
        });
    }
    Ok(())
}

impl MiracleModel {
    /// Freshly initialized model for the given encoder masks.
    pub fn new(
        site_gene_mask: &Matrix,
        gene_pathway_mask: &Matrix,
        n_tasks: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if site_gene_mask.cols() != gene_pathway_mask.rows() {
            return Err(Error::Shape {
                op: "model masks",
                left: site_gene_mask.shape(),
                right: gene_pathway_mask.shape(),
            });
        }
        if n_tasks == 0 || hidden == 0 {
            return Err(Error::Config("model needs at least one task and one hidden unit".into()));
        }
        let p = gene_pathway_mask.cols();
        let enc_site_gene = MaskedLinearLayer::init(site_gene_mask.clone(), rng)?;
        let enc_mu = MaskedLinearLayer::init(gene_pathway_mask.clone(), rng)?;
        let enc_logvar = MaskedLinearLayer::init(gene_pathway_mask.clone(), rng)?;
        let dec_pathway_gene = MaskedLinearLayer::init(gene_pathway_mask.transpose(), rng)?;
        let dec_gene_site = MaskedLinearLayer::init(site_gene_mask.transpose(), rng)?;
        let classifiers = (0..n_tasks)
            .map(|_| {
                Ok(Classifier {
                    hidden: MaskedLinearLayer::dense(p, hidden, rng)?,
                    output: MaskedLinearLayer::dense(hidden, 1, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(enc_site_gene, enc_mu, enc_logvar, dec_pathway_gene, dec_gene_site, classifiers)
    }

    /// Assembles a model from layers, checking the structural invariants.
    pub fn from_parts(
        enc_site_gene: MaskedLinearLayer,
        enc_mu: MaskedLinearLayer,
        enc_logvar: MaskedLinearLayer,
        dec_pathway_gene: MaskedLinearLayer,
        dec_gene_site: MaskedLinearLayer,
        classifiers: Vec<Classifier>,
    ) -> Result<Self> {
        let (n, g) = enc_site_gene.mask().shape();
        let p = enc_mu.outputs();
        if enc_mu.mask() != enc_logvar.mask() {
            return Err(Error::Invalid("mu and logvar heads must share one mask".into()));
        }
        if enc_mu.inputs() != g {
            return Err(Error::Shape {
                op: "encoder gene→pathway",
                left: (n, g),
                right: enc_mu.mask().shape(),
            });
        }
        if dec_pathway_gene.mask() != &enc_mu.mask().transpose()
            || dec_gene_site.mask() != &enc_site_gene.mask().transpose()
        {
            return Err(Error::Invalid("decoder masks must transpose the encoder masks".into()));
        }
        let hidden = match classifiers.first() {
            Some(c) => c.hidden.outputs(),
            None => return Err(Error::Config("model needs at least one task".into())),
        };
        for c in &classifiers {
            if c.hidden.shape_io() != (p, hidden) || c.output.shape_io() != (hidden, 1) {
                return Err(Error::Invalid("classifier heads must all be p→h→1".into()));
            }
        }
        Ok(Self {
            dims: ModelDims {
                n_sites: n,
                n_genes: g,
                n_pathways: p,
                n_tasks: classifiers.len(),
                hidden,
            },
            enc_site_gene,
            enc_mu,
            enc_logvar,
            dec_pathway_gene,
            dec_gene_site,
            classifiers,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn site_gene_mask(&self) -> &Matrix {
        self.enc_site_gene.mask()
    }

    pub fn gene_pathway_mask(&self) -> &Matrix {
        self.enc_mu.mask()
    }

    /// Named masked layers, encoder first.
    pub fn masked_layers(&self) -> [(&'static str, &MaskedLinearLayer); 5] {
        [
            ("enc_site_gene", &self.enc_site_gene),
            ("enc_mu", &self.enc_mu),
            ("enc_logvar", &self.enc_logvar),
            ("dec_pathway_gene", &self.dec_pathway_gene),
            ("dec_gene_site", &self.dec_gene_site),
        ]
    }

    pub fn layer(&self, name: &str) -> Option<&MaskedLinearLayer> {
        self.masked_layers()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, l)| l)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut MaskedLinearLayer> {
        match name {
            "enc_site_gene" => Some(&mut self.enc_site_gene),
            "enc_mu" => Some(&mut self.enc_mu),
            "enc_logvar" => Some(&mut self.enc_logvar),
            "dec_pathway_gene" => Some(&mut self.dec_pathway_gene),
            "dec_gene_site" => Some(&mut self.dec_gene_site),
            _ => None,
        }
    }

    pub fn classifiers(&self) -> &[Classifier] {
        &self.classifiers
    }

    pub fn classifiers_mut(&mut self) -> &mut [Classifier] {
        &mut self.classifiers
    }

    pub fn encode(&self, x: &Matrix) -> Result<Encoded> {
        check_dims("encode", x.shape(), self.dims.n_sites)?;
        let gene_act = sigmoid_forward(&self.enc_site_gene.apply(x)?);
        let mu = self.enc_mu.apply(&gene_act)?;
        let logvar = self.enc_logvar.apply(&gene_act)?.map(clamp_logvar);
        Ok(Encoded { gene_act, mu, logvar })
    }

    pub fn decode(&self, z: &Matrix) -> Result<Matrix> {
        check_dims("decode", z.shape(), self.dims.n_pathways)?;
        let h = sigmoid_forward(&self.dec_pathway_gene.apply(z)?);
        Ok(sigmoid_forward(&self.dec_gene_site.apply(&h)?))
    }

    pub fn classify(&self, z: &Matrix, task: usize) -> Result<Matrix> {
        let c = self.classifier(task)?;
        check_dims("classify", z.shape(), self.dims.n_pathways)?;
        let a = relu_forward(&c.hidden.apply(z)?);
        Ok(sigmoid_forward(&c.output.apply(&a)?))
    }

    /// Class-1 probabilities for `task` from the posterior mean.
    pub fn predict(&self, x: &Matrix, task: usize) -> Result<Matrix> {
        let enc = self.encode(x)?;
        self.classify(&enc.mu, task)
    }

    fn classifier(&self, task: usize) -> Result<&Classifier> {
        self.classifiers.get(task).ok_or_else(|| {
            Error::Invalid(format!(
                "task index {task} out of range for {} classifiers",
                self.classifiers.len()
            ))
        })
    }

    /// Loss of one single-task batch and the gradients of every parameter
    /// the loss depends on (encoder, decoder and the classifier of `task`).
    pub fn composite_loss(
        &self,
        x: &Matrix,
        labels: &Matrix,
        task: usize,
        weights: &LossWeights,
        mode: LatentMode<'_>,
    ) -> Result<(LossBreakdown, Gradients)> {
        let clf = self.classifier(task)?;
        check_dims("composite_loss", x.shape(), self.dims.n_sites)?;
        if labels.shape() != (x.rows(), 1) {
            return Err(Error::Shape {
                op: "composite_loss labels",
                left: (x.rows(), 1),
                right: labels.shape(),
            });
        }
        if weights.gamma.len() != self.dims.n_tasks {
            return Err(Error::Config(format!(
                "gamma has {} entries for {} tasks",
                weights.gamma.len(),
                self.dims.n_tasks
            )));
        }
        let gamma = weights.gamma[task];

        // forward
        let (pre_gene, t_gene) = self.enc_site_gene.forward(x)?;
        let h = sigmoid_forward(&pre_gene);
        let (mu, t_mu) = self.enc_mu.forward(&h)?;
        let (lv_raw, t_lv) = self.enc_logvar.forward(&h)?;
        let logvar = lv_raw.map(clamp_logvar);
        let eps = match mode {
            LatentMode::Mean => None,
            LatentMode::Sample(rng) => Some(gaussian_sample(rng, mu.rows(), mu.cols())),
            LatentMode::Noise(e) => {
                if e.shape() != mu.shape() {
                    return Err(Error::Shape {
                        op: "latent noise",
                        left: mu.shape(),
                        right: e.shape(),
                    });
                }
                Some(e.clone())
            }
        };
        let z = reparameterize_with(&mu, &logvar, eps.as_ref())?;

        let (pre_dec_gene, t_dec_gene) = self.dec_pathway_gene.forward(&z)?;
        let h_dec = sigmoid_forward(&pre_dec_gene);
        let (pre_site, t_site) = self.dec_gene_site.forward(&h_dec)?;
        let x_hat = sigmoid_forward(&pre_site);

        let (pre_hidden, t_hidden) = clf.hidden.forward(&z)?;
        let a = relu_forward(&pre_hidden);
        let (pre_out, t_out) = clf.output.forward(&a)?;
        let prob = sigmoid_forward(&pre_out);

        let (recon, d_xhat) = nn::mse(x, &x_hat)?;
        let (kl, d_mu_kl, d_lv_kl) = kl_divergence_grad(&mu, &logvar)?;
        let (bce, d_prob) = nn::bce(&prob, labels)?;

        let mut bce_vec = vec![0.0; self.dims.n_tasks];
        bce_vec[task] = bce;
        let total = weights.alpha * recon + weights.beta * kl + gamma * bce;
        let breakdown = LossBreakdown {
            total,
            recon_mse: recon,
            kl,
            bce: bce_vec,
        };

        // backward
        let mut grads = Gradients::default();
        let d_pre_site = sigmoid_backward(&x_hat, &d_xhat.scale(weights.alpha));
        let g_site = self.dec_gene_site.backward(t_site, &d_pre_site)?;
        let d_pre_dec_gene = sigmoid_backward(&h_dec, &g_site.dx);
        let g_dec_gene = self.dec_pathway_gene.backward(t_dec_gene, &d_pre_dec_gene)?;
        let mut dz = g_dec_gene.dx.clone();
        g_site.store("dec_gene_site", &mut grads);
        g_dec_gene.store("dec_pathway_gene", &mut grads);

        let d_pre_out = sigmoid_backward(&prob, &d_prob.scale(gamma));
        let g_out = clf.output.backward(t_out, &d_pre_out)?;
        let d_pre_hidden = relu_backward(&pre_hidden, &g_out.dx);
        let g_hidden = clf.hidden.backward(t_hidden, &d_pre_hidden)?;
        add_into(&mut dz, &g_hidden.dx);
        let prefix = format!("classifier.{task}");
        g_out.store(&format!("{prefix}.output"), &mut grads);
        g_hidden.store(&format!("{prefix}.hidden"), &mut grads);

        // z = μ + exp(½ lv) ε
        let mut d_mu = dz.clone();
        add_into(&mut d_mu, &d_mu_kl.scale(weights.beta));
        let mut d_lv = d_lv_kl.scale(weights.beta);
        if let Some(eps) = &eps {
            for (k, g) in d_lv.data_mut().iter_mut().enumerate() {
                let sigma = (0.5 * logvar.data()[k]).exp();
                *g += dz.data()[k] * eps.data()[k] * 0.5 * sigma;
            }
        }
        for (g, &raw) in d_lv.data_mut().iter_mut().zip(lv_raw.data()) {
            if !(LOGVAR_MIN..=LOGVAR_MAX).contains(&raw) {
                *g = 0.0;
            }
        }
        let g_mu = self.enc_mu.backward(t_mu, &d_mu)?;
        let g_lv = self.enc_logvar.backward(t_lv, &d_lv)?;
        let mut dh = g_mu.dx.clone();
        add_into(&mut dh, &g_lv.dx);
        g_mu.store("enc_mu", &mut grads);
        g_lv.store("enc_logvar", &mut grads);
        let d_pre_gene = sigmoid_backward(&h, &dh);
        let g_gene = self.enc_site_gene.backward(t_gene, &d_pre_gene)?;
        g_gene.store("enc_site_gene", &mut grads);

        Ok((breakdown, grads))
    }

    /// [`MiracleModel::composite_loss`] split into elementwise terms: one per
    /// reconstructed entry, one per latent entry and one per label, already
    /// weighted. They sum to the total loss.
    pub fn loss_terms(
        &self,
        x: &Matrix,
        labels: &Matrix,
        task: usize,
        weights: &LossWeights,
        mode: LatentMode<'_>,
    ) -> Result<Vec<f64>> {
        let clf = self.classifier(task)?;
        check_dims("loss_terms", x.shape(), self.dims.n_sites)?;
        if labels.shape() != (x.rows(), 1) {
            return Err(Error::Shape {
                op: "loss_terms labels",
                left: (x.rows(), 1),
                right: labels.shape(),
            });
        }
        let gamma = *weights.gamma.get(task).ok_or_else(|| {
            Error::Config(format!("gamma has no entry for task {task}"))
        })?;
        let h = sigmoid_forward(&self.enc_site_gene.apply(x)?);
        let mu = self.enc_mu.apply(&h)?;
        let logvar = self.enc_logvar.apply(&h)?.map(clamp_logvar);
        let z = reparameterize(&mu, &logvar, mode)?;
        let h_dec = sigmoid_forward(&self.dec_pathway_gene.apply(&z)?);
        let x_hat = sigmoid_forward(&self.dec_gene_site.apply(&h_dec)?);
        let a = relu_forward(&clf.hidden.apply(&z)?);
        let prob = sigmoid_forward(&clf.output.apply(&a)?);

        let n = x.len().max(1) as f64;
        let b = mu.rows().max(1) as f64;
        let m = prob.len().max(1) as f64;
        let mut terms = Vec::with_capacity(x.len() + mu.len() + prob.len());
        for (&v, &v_hat) in x.data().iter().zip(x_hat.data()) {
            let d = v_hat - v;
            terms.push(weights.alpha * d * d / n);
        }
        for (&mu, &lv) in mu.data().iter().zip(logvar.data()) {
            terms.push(weights.beta * 0.5 * (mu * mu + (lv.exp_m1() - lv)) / b);
        }
        for (&p_raw, &y) in prob.data().iter().zip(labels.data()) {
            let p = p_raw.clamp(nn::BCE_CLIP, 1.0 - nn::BCE_CLIP);
            terms.push(-gamma * (y * p.ln() + (1.0 - y) * (1.0 - p).ln()) / m);
        }
        Ok(terms)
    }
}

impl MaskedLinearLayer {
    fn shape_io(&self) -> (usize, usize) {
        (self.inputs(), self.outputs())
    }
}

fn add_into(acc: &mut Matrix, other: &Matrix) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

fn clamp_logvar(v: f64) -> f64 {
    v.clamp(LOGVAR_MIN, LOGVAR_MAX)
}

impl Parameterized for MiracleModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        for (name, layer) in self.masked_layers() {
            layer.visit(name, f);
        }
        for (i, c) in self.classifiers.iter().enumerate() {
            c.hidden.visit(&format!("classifier.{i}.hidden"), f);
            c.output.visit(&format!("classifier.{i}.output"), f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.enc_site_gene.visit_mut("enc_site_gene", f);
        self.enc_mu.visit_mut("enc_mu", f);
        self.enc_logvar.visit_mut("enc_logvar", f);
        self.dec_pathway_gene.visit_mut("dec_pathway_gene", f);
        self.dec_gene_site.visit_mut("dec_gene_site", f);
        for (i, c) in self.classifiers.iter_mut().enumerate() {
            c.hidden.visit_mut(&format!("classifier.{i}.hidden"), f);
            c.output.visit_mut(&format!("classifier.{i}.output"), f);
        }
    }
}

fn reparameterize_with(mu: &Matrix, logvar: &Matrix, eps: Option<&Matrix>) -> Result<Matrix> {
    if mu.shape() != logvar.shape() {
        return Err(Error::Shape {
            op: "reparameterize",
            left: mu.shape(),
            right: logvar.shape(),
        });
    }
    let Some(eps) = eps else {
        return Ok(mu.clone());
    };
    let data = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    Matrix::new(mu.rows(), mu.cols(), data)
}

/// Draws `z` from `N(μ, exp(log σ²))`, or returns `μ` in [`LatentMode::Mean`].
pub fn reparameterize(mu: &Matrix, logvar: &Matrix, mode: LatentMode<'_>) -> Result<Matrix> {
    match mode {
        LatentMode::Mean => reparameterize_with(mu, logvar, None),
        LatentMode::Sample(rng) => {
            let eps = gaussian_sample(rng, mu.rows(), mu.cols());
            reparameterize_with(mu, logvar, Some(&eps))
        }
        LatentMode::Noise(eps) => {
            if eps.shape() != mu.shape() {
                return Err(Error::Shape {
                    op: "reparameterize",
                    left: mu.shape(),
                    right: eps.shape(),
                });
            }
            reparameterize_with(mu, logvar, Some(eps))
        }
    }
}

/// KL(N(μ, σ²) ‖ N(0, I)) summed over latent dimensions, averaged over rows.
pub fn kl_divergence(mu: &Matrix, logvar: &Matrix) -> Result<f64> {
    kl_divergence_grad(mu, logvar).map(|(v, _, _)| v)
}

/// KL value with its gradients with respect to `μ` and `log σ²`.
pub fn kl_divergence_grad(mu: &Matrix, logvar: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if mu.shape() != logvar.shape() {
        return Err(Error::Shape {
            op: "kl_divergence",
            left: mu.shape(),
            right: logvar.shape(),
        });
    }
    let b = mu.rows().max(1) as f64;
    let mut total = 0.0;
    let mut d_mu = Vec::with_capacity(mu.len());
    let mut d_lv = Vec::with_capacity(mu.len());
    for (&m, &lv) in mu.data().iter().zip(logvar.data()) {
        let em1 = lv.exp_m1();
        // expm1(lv) − lv ≥ 0 and m² ≥ 0 termwise, so the sum cannot go negative.
        total += 0.5 * (m * m + (em1 - lv));
        d_mu.push(m / b);
        d_lv.push(0.5 * em1 / b);
    }
    Ok((
        total / b,
        Matrix::new(mu.rows(), mu.cols(), d_mu)?,
        Matrix::new(mu.rows(), mu.cols(), d_lv)?,
    ))
}

/// Random masks and parameters for a small model, used by gradient checks.
///
/// Each site links to one gene at full strength and, with probability ¼, to a
/// second gene with strength in `[0.25, 1)`. Each gene links to one or two
/// pathways. Biases are nonzero so no unit starts at a symmetric point.
pub fn random_test_model(
    n_sites: usize,
    n_genes: usize,
    n_pathways: usize,
    hidden: usize,
    n_tasks: usize,
    rng: &mut Rng,
) -> Result<MiracleModel> {
    let mut sg = Matrix::zeros(n_sites, n_genes);
    for s in 0..n_sites {
        sg[(s, rng.index(n_genes))] = 1.0;
        if rng.bernoulli(0.25) {
            let g = rng.index(n_genes);
            if sg[(s, g)] == 0.0 {
                sg[(s, g)] = rng.uniform_range(0.25, 1.0);
            }
        }
    }
    let mut gp = Matrix::zeros(n_genes, n_pathways);
    for g in 0..n_genes {
        let k = 1 + rng.index(2);
        for p in rng.sample_indices(n_pathways, k) {
            gp[(g, p)] = 1.0;
        }
    }
    let mut model = MiracleModel::new(&sg, &gp, n_tasks, hidden, rng)?;
    model.visit_params_mut(&mut |name, m| {
        if name.ends_with(".bias") {
            for v in m.data_mut() {
                *v = rng.uniform_range(-0.5, 0.5);
            }
        }
    });
    Ok(model)
}

/// Central-difference check of the full composite loss on a random
/// `n=30, g=10, p=4, h=6, t=2` model in mean mode, one 8-sample batch per
/// task, all loss weights 1.
pub fn gradcheck_tiny_model(seed: u64, eps: f64) -> Result<nn::GradCheckReport> {
    let mut rng = Rng::new(seed).substream(&[crate::numerics::streams::GRADCHECK]);
    let mut model = random_test_model(30, 10, 4, 6, 2, &mut rng)?;
    let batches: Vec<(Matrix, Matrix)> = (0..2)
        .map(|_| {
            let x = Matrix::new(8, 30, (0..240).map(|_| rng.uniform()).collect())?;
            let y = Matrix::new(8, 1, (0..8).map(|i| (i % 2) as f64).collect())?;
            Ok((x, y))
        })
        .collect::<Result<_>>()?;
    let weights = LossWeights {
        alpha: 1.0,
        beta: 1.0,
        gamma: vec![1.0; 2],
    };
    let mut grads = Gradients::default();
    for (task, (x, y)) in batches.iter().enumerate() {
        let (_, g) = model.composite_loss(x, y, task, &weights, LatentMode::Mean)?;
        for (name, gm) in g.iter() {
            grads.accumulate(name, gm.clone());
        }
    }
    let terms = |m: &MiracleModel| -> Result<Vec<f64>> {
        let mut all = Vec::new();
        for (task, (x, y)) in batches.iter().enumerate() {
            all.extend(m.loss_terms(x, y, task, &weights, LatentMode::Mean)?);
        }
        Ok(all)
    };
    nn::grad_check_terms(&mut model, terms, &grads, eps)
}

#[cfg(test)]
mod tests;

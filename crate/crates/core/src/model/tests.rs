use super::*;
use crate::nn::{grad_check_terms, sigmoid};
use crate::numerics::Rng;

fn layer(w: &[&[f64]], b: &[f64], mask: Matrix) -> MaskedLinearLayer {
    MaskedLinearLayer::new(Matrix::from_rows(w), Matrix::row_vector(b), mask).unwrap()
}

/// 2 sites → 1 gene → 1 pathway, one classifier with 2 hidden units.
fn hand_model() -> MiracleModel {
    let sg = Matrix::ones(2, 1);
    let gp = Matrix::ones(1, 1);
    MiracleModel::from_parts(
        layer(&[&[0.5], &[-1.0]], &[0.1], sg.clone()),
        layer(&[&[2.0]], &[-0.5], gp.clone()),
        layer(&[&[1.0]], &[-1.0], gp.clone()),
        layer(&[&[0.3]], &[0.2], gp.transpose()),
        layer(&[&[1.5, -2.0]], &[0.0, 0.4], sg.transpose()),
        vec![Classifier {
            hidden: layer(&[&[1.0, -1.0]], &[0.0, 0.5], Matrix::ones(1, 2)),
            output: layer(&[&[2.0], &[-3.0]], &[0.25], Matrix::ones(2, 1)),
        }],
    )
    .unwrap()
}

fn zero_mask_model() -> MiracleModel {
    let mut rng = Rng::new(4);
    let mut m = MiracleModel::new(&Matrix::zeros(3, 2), &Matrix::zeros(2, 2), 1, 4, &mut rng).unwrap();
    for name in ["enc_site_gene", "enc_mu", "enc_logvar", "dec_pathway_gene", "dec_gene_site"] {
        let l = m.layer_mut(name).unwrap();
        let cols = l.outputs();
        *l.bias_mut() = Matrix::row_vector(&(0..cols).map(|j| 0.1 * (j as f64 + 1.0)).collect::<Vec<_>>());
    }
    m
}

#[test]
fn zero_masks_encode_to_bias() {
    let m = zero_mask_model();
    let x = Matrix::from_rows(&[[0.1, 0.9, 0.5], [0.7, 0.2, 0.3]]);
    let enc = m.encode(&x).unwrap();
    for i in 0..2 {
        assert_eq!(enc.mu.row(i), m.enc_mu.bias().row(0));
    }
    assert!(m.encode(&Matrix::zeros(1, 4)).is_err());
}

#[test]
fn identical_rows_encode_identically() {
    let mut rng = Rng::new(8);
    let m = MiracleModel::new(&Matrix::ones(3, 2), &Matrix::ones(2, 2), 1, 4, &mut rng).unwrap();
    let x = Matrix::from_rows(&[[0.2, 0.4, 0.6], [0.2, 0.4, 0.6]]);
    let enc = m.encode(&x).unwrap();
    assert_eq!(enc.mu.row(0), enc.mu.row(1));
}

#[test]
fn hand_encode_decode_classify() {
    let m = hand_model();
    let x = Matrix::from_rows(&[[0.4, 0.8]]);
    let h = sigmoid(0.4 * 0.5 - 0.8 + 0.1);
    let mu = 2.0 * h - 0.5;
    let lv = h - 1.0;
    let enc = m.encode(&x).unwrap();
    assert!((enc.gene_act[(0, 0)] - h).abs() < 1e-15);
    assert!((enc.mu[(0, 0)] - mu).abs() < 1e-15);
    assert!((enc.logvar[(0, 0)] - lv).abs() < 1e-15);

    let z = Matrix::filled(1, 1, 0.7);
    let hd = sigmoid(0.3 * 0.7 + 0.2);
    let want = [sigmoid(1.5 * hd), sigmoid(-2.0 * hd + 0.4)];
    let xh = m.decode(&z).unwrap();
    assert!((xh[(0, 0)] - want[0]).abs() < 1e-15);
    assert!((xh[(0, 1)] - want[1]).abs() < 1e-15);

    let a = [0.7f64.max(0.0), (-0.7f64 + 0.5).max(0.0)];
    let p = sigmoid(2.0 * a[0] - 3.0 * a[1] + 0.25);
    assert!((m.classify(&z, 0).unwrap()[(0, 0)] - p).abs() < 1e-15);
    assert!(m.classify(&z, 1).is_err());
}

#[test]
fn zero_masks_decode_to_constant() {
    let m = zero_mask_model();
    let a = m.decode(&Matrix::from_rows(&[[5.0, -3.0]])).unwrap();
    let b = m.decode(&Matrix::from_rows(&[[-1.0, 0.0]])).unwrap();
    assert_eq!(a, b);
    let hd = sigmoid(0.1);
    let _ = hd;
    let want: Vec<f64> = (0..3).map(|j| sigmoid(0.1 * (j as f64 + 1.0))).collect();
    assert_eq!(a.row(0), &want[..]);
}

#[test]
fn decode_stays_in_unit_interval() {
    let mut rng = Rng::new(2);
    let m = MiracleModel::new(&Matrix::ones(5, 3), &Matrix::ones(3, 2), 1, 4, &mut rng).unwrap();
    let z = gaussian_sample(&mut rng, 200, 2).scale(50.0);
    let x = m.decode(&z).unwrap();
    assert!(x.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn classifier_with_zero_parameters_is_uninformative() {
    let mut m = hand_model();
    for c in m.classifiers_mut() {
        for l in [&mut c.hidden, &mut c.output] {
            let (r, k) = l.weight().shape();
            *l.weight_mut() = Matrix::zeros(r, k);
            *l.bias_mut() = Matrix::zeros(1, k);
        }
    }
    let p = m.classify(&Matrix::from_rows(&[[3.0], [-2.0]]), 0).unwrap();
    assert_eq!(p.data(), &[0.5, 0.5]);
}

#[test]
fn reparameterize_modes() {
    let mu = Matrix::from_rows(&[[0.3, -1.0, 2.0], [0.0, 0.5, -0.5]]);
    let z = reparameterize(&mu, &Matrix::zeros(2, 3), LatentMode::Mean).unwrap();
    assert_eq!(z, mu);

    let z = reparameterize(&mu, &Matrix::filled(2, 3, -20.0), LatentMode::Sample(&mut Rng::new(3))).unwrap();
    assert!(z.max_abs_diff(&mu) < 1e-4);

    let n = 10_000;
    let z = reparameterize(&Matrix::zeros(1, n), &Matrix::zeros(1, n), LatentMode::Sample(&mut Rng::new(5))).unwrap();
    let mean = z.mean();
    let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((0.94..=1.06).contains(&var), "var {var}");
}

#[test]
fn kl_closed_forms() {
    assert_eq!(kl_divergence(&Matrix::zeros(3, 2), &Matrix::zeros(3, 2)).unwrap(), 0.0);
    assert_eq!(kl_divergence(&Matrix::ones(1, 1), &Matrix::zeros(1, 1)).unwrap(), 0.5);
    let v = kl_divergence(&Matrix::zeros(1, 1), &Matrix::filled(1, 1, 4f64.ln())).unwrap();
    assert!((v - 0.5 * (4.0 - 4f64.ln() - 1.0)).abs() < 1e-15);
    assert!((v - 0.8069).abs() < 1e-4);
}

#[test]
fn kl_is_nonnegative_on_random_draws() {
    let mut rng = Rng::new(77);
    for _ in 0..10_000 {
        let mu = Matrix::filled(1, 1, rng.uniform_range(-5.0, 5.0));
        let lv = Matrix::filled(1, 1, rng.uniform_range(-10.0, 10.0));
        assert!(kl_divergence(&mu, &lv).unwrap() >= 0.0);
    }
    let mu = Matrix::filled(1, 1, 0.0);
    let lv = Matrix::filled(1, 1, 1e-17);
    assert!(kl_divergence(&mu, &lv).unwrap() >= 0.0);
}

fn weights(alpha: f64, beta: f64, gamma: f64, t: usize) -> LossWeights {
    LossWeights {
        alpha,
        beta,
        gamma: vec![gamma; t],
    }
}

#[test]
fn pure_autoencoder_weights_reduce_to_mse() {
    let m = hand_model();
    let x = Matrix::from_rows(&[[0.4, 0.8], [0.1, 0.3]]);
    let y = Matrix::from_rows(&[[1.0], [0.0]]);
    let (lb, _) = m.composite_loss(&x, &y, 0, &weights(1.0, 0.0, 0.0, 1), LatentMode::Mean).unwrap();
    let xh = m.decode(&m.encode(&x).unwrap().mu).unwrap();
    assert_eq!(lb.total, nn::mse(&x, &xh).unwrap().0);
}

#[test]
fn hand_component_sum() {
    let m = hand_model();
    let x = Matrix::from_rows(&[[0.4, 0.8], [0.9, 0.05]]);
    let y = Matrix::from_rows(&[[1.0], [0.0]]);
    let (lb, _) = m.composite_loss(&x, &y, 0, &weights(1.0, 1.0, 1.0, 1), LatentMode::Mean).unwrap();

    let enc = m.encode(&x).unwrap();
    let mut recon = 0.0;
    let mut kl = 0.0;
    let mut bce = 0.0;
    for i in 0..2 {
        let z = Matrix::filled(1, 1, enc.mu[(i, 0)]);
        let xh = m.decode(&z).unwrap();
        recon += (0..2).map(|j| (x[(i, j)] - xh[(0, j)]).powi(2)).sum::<f64>() / 4.0;
        let (mu, lv) = (enc.mu[(i, 0)], enc.logvar[(i, 0)]);
        kl += -0.5 * (1.0 + lv - mu * mu - lv.exp()) / 2.0;
        let p = m.classify(&z, 0).unwrap()[(0, 0)];
        let yi = y[(i, 0)];
        bce += -(yi * p.ln() + (1.0 - yi) * (1.0 - p).ln()) / 2.0;
    }
    assert!((lb.recon_mse - recon).abs() < 1e-12);
    assert!((lb.kl - kl).abs() < 1e-12);
    assert!((lb.bce[0] - bce).abs() < 1e-12);
    assert!((lb.total - (recon + kl + bce)).abs() < 1e-10);
}

#[test]
fn perfect_model_has_near_zero_loss() {
    // Saturated decoder reproduces binary inputs; classifier saturates on the labels.
    let big = 40.0;
    let sg = Matrix::ones(2, 1);
    let gp = Matrix::ones(1, 1);
    let m = MiracleModel::from_parts(
        layer(&[&[0.0], &[0.0]], &[0.0], sg.clone()),
        layer(&[&[0.0]], &[0.0], gp.clone()),
        layer(&[&[0.0]], &[0.0], gp.clone()),
        layer(&[&[0.0]], &[0.0], gp.transpose()),
        layer(&[&[0.0, 0.0]], &[big, -big], sg.transpose()),
        vec![Classifier {
            hidden: layer(&[&[0.0]], &[1.0], Matrix::ones(1, 1)),
            output: layer(&[&[big]], &[0.0], Matrix::ones(1, 1)),
        }],
    )
    .unwrap();
    let x = Matrix::from_rows(&[[1.0, 0.0]]);
    let y = Matrix::ones(1, 1);
    let (lb, _) = m.composite_loss(&x, &y, 0, &weights(1.0, 1.0, 1.0, 1), LatentMode::Mean).unwrap();
    assert!(lb.total < 1e-6, "{lb:?}");
}

#[test]
fn label_shape_mismatch_is_rejected() {
    let m = hand_model();
    let x = Matrix::from_rows(&[[0.4, 0.8]]);
    let err = m.composite_loss(&x, &Matrix::ones(2, 1), 0, &weights(1.0, 1.0, 1.0, 1), LatentMode::Mean);
    assert!(err.is_err());
}

fn tiny_batch(seed: u64) -> (MiracleModel, Vec<(Matrix, Matrix)>) {
    let mut rng = Rng::new(seed);
    let model = super::random_test_model(30, 10, 4, 6, 2, &mut rng).unwrap();
    let batches = (0..2)
        .map(|_| {
            let x = Matrix::new(8, 30, (0..240).map(|_| rng.uniform()).collect()).unwrap();
            let y = Matrix::new(8, 1, (0..8).map(|_| f64::from(rng.bernoulli(0.5) as u8)).collect()).unwrap();
            (x, y)
        })
        .collect();
    (model, batches)
}

#[test]
fn loss_breakdown_is_additive_and_deterministic() {
    let (m, batches) = tiny_batch(5);
    let w = LossWeights {
        alpha: 0.7,
        beta: 0.3,
        gamma: vec![1.3, 2.0],
    };
    for (task, (x, y)) in batches.iter().enumerate() {
        let (a, ga) = m.composite_loss(x, y, task, &w, LatentMode::Mean).unwrap();
        let (b, gb) = m.composite_loss(x, y, task, &w, LatentMode::Mean).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        let sum = w.alpha * a.recon_mse + w.beta * a.kl + w.gamma.iter().zip(&a.bce).map(|(g, l)| g * l).sum::<f64>();
        assert!((a.total - sum).abs() <= 1e-12);
        assert_eq!(a.bce[1 - task], 0.0);
    }
}

#[test]
fn full_model_gradient_check() {
    for seed in 1..=12 {
        let report = super::gradcheck_tiny_model(seed, 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-5, "seed {seed}: {report:?}");
        assert_eq!(report.checked, 852);
    }
}

#[test]
fn loss_terms_sum_to_composite_total() {
    let (m, batches) = tiny_batch(4);
    let w = weights(0.7, 0.3, 1.5, 2);
    let mut rng = Rng::new(5);
    let noise = gaussian_sample(&mut rng, 8, 4);
    for (task, (x, y)) in batches.iter().enumerate() {
        for mode in [0, 1] {
            let pick = || if mode == 0 { LatentMode::Mean } else { LatentMode::Noise(&noise) };
            let (lb, _) = m.composite_loss(x, y, task, &w, pick()).unwrap();
            let terms = m.loss_terms(x, y, task, &w, pick()).unwrap();
            assert_eq!(terms.len(), 8 * 30 + 8 * 4 + 8);
            let sum: f64 = terms.iter().sum();
            assert!((sum - lb.total).abs() <= 1e-12 * lb.total.abs().max(1.0), "{sum} vs {}", lb.total);
        }
    }
}

#[test]
fn gradient_check_with_frozen_noise() {
    let (mut m, batches) = tiny_batch(12);
    let w = weights(1.0, 1.0, 1.0, 2);
    let mut rng = Rng::new(99);
    let noise: Vec<Matrix> = (0..2).map(|_| gaussian_sample(&mut rng, 8, 4)).collect();
    let mut grads = Gradients::default();
    for (task, (x, y)) in batches.iter().enumerate() {
        let (_, g) = m.composite_loss(x, y, task, &w, LatentMode::Noise(&noise[task])).unwrap();
        for (name, gm) in g.iter() {
            grads.accumulate(name, gm.clone());
        }
    }
    let terms = |m: &MiracleModel| -> Result<Vec<f64>> {
        let mut all = Vec::new();
        for (task, (x, y)) in batches.iter().enumerate() {
            all.extend(m.loss_terms(x, y, task, &w, LatentMode::Noise(&noise[task]))?);
        }
        Ok(all)
    };
    let report = grad_check_terms(&mut m, terms, &grads, 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn checkpoint_round_trip_and_digest_check() {
    let (m, batches) = tiny_batch(3);
    let sites: Vec<String> = (0..30).map(|i| format!("s{i}")).collect();
    let tasks = vec!["a".to_string(), "b".to_string()];
    let ck = Checkpoint::from_model(&m, &sites, &tasks, Some("cfg".into()));
    let bytes = ck.to_json_bytes().unwrap();
    let back = Checkpoint::from_json_slice(&bytes).unwrap();
    assert_eq!(back, ck);
    let restored = back.to_model(m.site_gene_mask(), m.gene_pathway_mask()).unwrap();
    let (x, _) = &batches[0];
    assert_eq!(restored.predict(x, 1).unwrap(), m.predict(x, 1).unwrap());
    assert_eq!(Checkpoint::from_model(&restored, &sites, &tasks, Some("cfg".into())).to_json_bytes().unwrap(), bytes);

    let mut other = m.site_gene_mask().clone();
    other[(0, 0)] = if other[(0, 0)] == 0.0 { 1.0 } else { 0.0 };
    let err = back.to_model(&other, m.gene_pathway_mask()).unwrap_err();
    assert!(matches!(err, Error::DigestMismatch { .. }), "{err}");
    assert!(err.is_validation());
}

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

use super::{Gradients, Parameterized};

static NEXT_LAYER_ID: AtomicU64 = AtomicU64::new(1);

/// Linear layer whose weight is gated entrywise by a fixed mask:
/// `y = x (W ⊙ M) + b`.
///
/// Positions with `M = 0` are zero-initialized and receive exactly zero
/// gradient, so the stored weight equals the effective weight unless the
/// caller writes to those positions directly. The forward pass never reads
/// them either way.
#[derive(Clone, Debug)]
pub struct MaskedLinearLayer {
    weight: Matrix,
    bias: Matrix,
    mask: Matrix,
    /// Row-major `(row, col)` of nonzero mask entries, kept when the mask is
    /// sparse enough for the sparse kernels to pay off.
    support: Option<Vec<(usize, usize)>>,
    id: u64,
    version: u64,
}

/// Masks with at most this fraction of nonzeros use the sparse kernels.
const SPARSE_DENSITY: f64 = 0.3;

/// Activations saved by [`MaskedLinearLayer::forward`] for one backward call.
#[derive(Debug)]
pub struct LinearTape {
    input: Matrix,
    layer_id: u64,
    version: u64,
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    /// `1 × out`.
    pub db: Matrix,
}

impl MaskedLinearLayer {
    pub fn new(weight: Matrix, bias: Matrix, mask: Matrix) -> Result<Self> {
        if weight.shape() != mask.shape() {
            return Err(Error::Shape {
                op: "masked layer weight/mask",
                left: weight.shape(),
                right: mask.shape(),
            });
        }
        if bias.shape() != (1, weight.cols()) {
            return Err(Error::Shape {
                op: "masked layer bias",
                left: (1, weight.cols()),
                right: bias.shape(),
            });
        }
        if let Some(v) = mask.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("mask entry {v} outside [0, 1]")));
        }
        let nnz = mask.count_nonzero();
        let support = (nnz as f64 <= SPARSE_DENSITY * mask.len() as f64).then(|| {
            (0..mask.rows())
                .flat_map(|i| (0..mask.cols()).map(move |j| (i, j)))
                .filter(|&p| mask[p] != 0.0)
                .collect()
        });
        Ok(Self {
            weight,
            bias,
            mask,
            support,
            id: NEXT_LAYER_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    /// Glorot-uniform initialization with fans counted over mask nonzeros.
    ///
    /// Entry `(i, j)` is drawn from `U(±√(6 / (fan_in_j + fan_out_i)))`, where
    /// `fan_in_j` is the number of nonzero mask entries in column `j` and
    /// `fan_out_i` those in row `i` (each floored at 1). Masked entries are 0
    /// and biases start at 0.
    pub fn init(mask: Matrix, rng: &mut Rng) -> Result<Self> {
        let (rows, cols) = mask.shape();
        let mut row_nnz = vec![0usize; rows];
        let mut col_nnz = vec![0usize; cols];
        for i in 0..rows {
            for j in 0..cols {
                if mask[(i, j)] != 0.0 {
                    row_nnz[i] += 1;
                    col_nnz[j] += 1;
                }
            }
        }
        let mut weight = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                // Draw for every entry so the stream does not depend on the mask pattern.
                let u = rng.uniform_range(-1.0, 1.0);
                if mask[(i, j)] != 0.0 {
                    let fans = (col_nnz[j].max(1) + row_nnz[i].max(1)) as f64;
                    weight[(i, j)] = u * (6.0 / fans).sqrt();
                }
            }
        }
        Self::new(weight, Matrix::zeros(1, cols), mask)
    }

    /// Unmasked layer, Glorot-initialized.
    pub fn dense(inputs: usize, outputs: usize, rng: &mut Rng) -> Result<Self> {
        Self::init(Matrix::ones(inputs, outputs), rng)
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    pub fn mask(&self) -> &Matrix {
        &self.mask
    }

    /// Raw weight storage. Invalidates outstanding tapes.
    pub fn weight_mut(&mut self) -> &mut Matrix {
        self.version += 1;
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Matrix {
        self.version += 1;
        &mut self.bias
    }

    /// `W ⊙ M`, with an exact `+0.0` wherever the mask is zero.
    pub fn effective_weight(&self) -> Matrix {
        let data = self
            .weight
            .data()
            .iter()
            .zip(self.mask.data())
            .map(|(&w, &m)| if m == 0.0 { 0.0 } else { w * m })
            .collect();
        Matrix::new(self.weight.rows(), self.weight.cols(), data).expect("same shape")
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LinearTape)> {
        let y = self.apply(x)?;
        Ok((
            y,
            LinearTape {
                input: x.clone(),
                layer_id: self.id,
                version: self.version,
            },
        ))
    }

    /// Forward pass without recording a tape.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.inputs() {
            return Err(Error::Shape {
                op: "masked_forward",
                left: x.shape(),
                right: self.weight.shape(),
            });
        }
        let Some(support) = &self.support else {
            return x.matmul(&self.effective_weight())?.add_row(&self.bias);
        };
        let entries = self.sparse_entries(support);
        let mut y = Matrix::zeros(x.rows(), self.outputs());
        for r in 0..x.rows() {
            let (xr, yr) = (x.row(r), y.row_mut(r));
            for &(i, j, w) in &entries {
                yr[j] += xr[i] * w;
            }
        }
        y.add_row(&self.bias)
    }

    fn sparse_entries(&self, support: &[(usize, usize)]) -> Vec<(usize, usize, f64)> {
        support
            .iter()
            .map(|&(i, j)| (i, j, self.weight[(i, j)] * self.mask[(i, j)]))
            .collect()
    }

    /// Gradients given the upstream `dy`. `dw` is exactly zero where the mask is.
    pub fn backward(&self, tape: LinearTape, dy: &Matrix) -> Result<LinearGrads> {
        if tape.layer_id != self.id {
            return Err(Error::StaleTape("tape was recorded by a different layer".into()));
        }
        if tape.version != self.version {
            return Err(Error::StaleTape(
                "layer parameters changed after the forward pass".into(),
            ));
        }
        if dy.shape() != (tape.input.rows(), self.outputs()) {
            return Err(Error::Shape {
                op: "masked_backward",
                left: (tape.input.rows(), self.outputs()),
                right: dy.shape(),
            });
        }
        let db = dy.column_sums();
        if let Some(support) = &self.support {
            let x = &tape.input;
            let entries = self.sparse_entries(support);
            let mut dx = Matrix::zeros(x.rows(), self.inputs());
            let mut dw = Matrix::zeros(self.inputs(), self.outputs());
            for r in 0..x.rows() {
                let (xr, dyr) = (x.row(r), dy.row(r));
                let dxr = dx.row_mut(r);
                for &(i, j, w) in &entries {
                    dxr[i] += dyr[j] * w;
                    dw[(i, j)] += xr[i] * dyr[j];
                }
            }
            for &(i, j) in support {
                dw[(i, j)] *= self.mask[(i, j)];
            }
            return Ok(LinearGrads { dx, dw, db });
        }
        let raw = tape.input.t_matmul(dy)?;
        let dw_data = raw
            .data()
            .iter()
            .zip(self.mask.data())
            .map(|(&g, &m)| if m == 0.0 { 0.0 } else { g * m })
            .collect();
        let dw = Matrix::new(raw.rows(), raw.cols(), dw_data)?;
        let dx = dy.matmul_t(&self.effective_weight())?;
        Ok(LinearGrads { dx, dw, db })
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.version += 1;
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl Parameterized for MaskedLinearLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.visit("layer", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.visit_mut("layer", f);
    }
}

impl LinearGrads {
    pub(crate) fn store(self, prefix: &str, grads: &mut Gradients) {
        grads.accumulate(&format!("{prefix}.weight"), self.dw);
        grads.accumulate(&format!("{prefix}.bias"), self.db);
    }
}

/// Free-function form of the forward pass.
pub fn masked_forward(layer: &MaskedLinearLayer, x: &Matrix) -> Result<(Matrix, LinearTape)> {
    layer.forward(x)
}

/// Free-function form of the backward pass.
pub fn masked_backward(
    layer: &MaskedLinearLayer,
    tape: LinearTape,
    dy: &Matrix,
) -> Result<LinearGrads> {
    layer.backward(tape, dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;

    fn layer(w: Matrix, m: Matrix) -> MaskedLinearLayer {
        let cols = w.cols();
        MaskedLinearLayer::new(w, Matrix::zeros(1, cols), m).unwrap()
    }

    #[test]
    fn ones_mask_is_dense_affine() {
        let mut rng = Rng::new(3);
        let l = MaskedLinearLayer::dense(3, 2, &mut rng).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]]);
        let (y, _) = l.forward(&x).unwrap();
        let want = x.matmul(l.weight()).unwrap().add_row(l.bias()).unwrap();
        assert_eq!(y, want);
    }

    #[test]
    fn zero_mask_outputs_bias() {
        let bias = Matrix::row_vector(&[0.5, -2.0]);
        let l = MaskedLinearLayer::new(Matrix::ones(3, 2), bias.clone(), Matrix::zeros(3, 2)).unwrap();
        let (y, tape) = l.forward(&Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])).unwrap();
        assert_eq!(y.row(0), bias.row(0));
        assert_eq!(y.row(1), bias.row(0));
        let g = l.backward(tape, &Matrix::ones(2, 2)).unwrap();
        assert_eq!(g.dw, Matrix::zeros(3, 2));
        assert_eq!(g.dx, Matrix::zeros(2, 3));
        assert_eq!(g.db, Matrix::row_vector(&[2.0, 2.0]));
    }

    #[test]
    fn hand_forward() {
        let l = layer(Matrix::ones(2, 2), Matrix::identity(2));
        let (y, _) = l.forward(&Matrix::from_rows(&[[1.0, 2.0]])).unwrap();
        assert_eq!(y, Matrix::from_rows(&[[1.0, 2.0]]));
        assert!(l.forward(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn ones_mask_backward_is_dense_backward() {
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let l = layer(w.clone(), Matrix::ones(3, 2));
        let x = Matrix::from_rows(&[[1.0, 0.0, -1.0]]);
        let dy = Matrix::from_rows(&[[0.5, -1.0]]);
        let (_, tape) = l.forward(&x).unwrap();
        let g = l.backward(tape, &dy).unwrap();
        assert_eq!(g.dw, x.t_matmul(&dy).unwrap());
        assert_eq!(g.dx, dy.matmul(&w.transpose()).unwrap());
    }

    #[test]
    fn stale_and_foreign_tapes_are_rejected() {
        let mut rng = Rng::new(1);
        let mut l = MaskedLinearLayer::dense(2, 2, &mut rng).unwrap();
        let other = MaskedLinearLayer::dense(2, 2, &mut rng).unwrap();
        let x = Matrix::ones(1, 2);
        let (_, tape) = other.forward(&x).unwrap();
        assert!(matches!(l.backward(tape, &Matrix::ones(1, 2)), Err(Error::StaleTape(_))));
        let (_, tape) = l.forward(&x).unwrap();
        l.weight_mut()[(0, 0)] += 1.0;
        assert!(matches!(l.backward(tape, &Matrix::ones(1, 2)), Err(Error::StaleTape(_))));
    }

    #[test]
    fn init_respects_mask_and_bounds() {
        let mask = Matrix::from_rows(&[[1.0, 0.0, 0.5], [0.0, 0.0, 1.0]]);
        let l = MaskedLinearLayer::init(mask.clone(), &mut Rng::new(5)).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                if mask[(i, j)] == 0.0 {
                    assert_eq!(l.weight()[(i, j)], 0.0);
                }
            }
        }
        // entry (1, 2): column 2 has 2 nonzeros, row 1 has 1 → bound √2.
        assert!(l.weight()[(1, 2)].abs() <= 2f64.sqrt());
        assert_eq!(l.bias(), &Matrix::zeros(1, 3));
    }

    #[test]
    fn random_layer_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let mask = Matrix::from_rows(&[
            [1.0, 0.0, 1.0, 0.5],
            [0.0, 1.0, 1.0, 0.0],
            [1.0, 1.0, 0.0, 0.25],
        ]);
        let mut l = MaskedLinearLayer::init(mask, &mut rng).unwrap();
        for v in l.bias_mut().data_mut() {
            *v = rng.uniform_range(-1.0, 1.0);
        }
        let x = crate::numerics::gaussian_sample(&mut rng, 5, 3);
        let target = crate::numerics::gaussian_sample(&mut rng, 5, 4);
        // loss = Σ target ⊙ y, so dL/dy = target
        let loss = |l: &MaskedLinearLayer| -> Result<f64> {
            let y = l.apply(&x)?;
            Ok(y.data().iter().zip(target.data()).map(|(a, b)| a * b).sum())
        };
        let (_, tape) = l.forward(&x).unwrap();
        let g = l.backward(tape, &target).unwrap();
        let mut grads = Gradients::default();
        g.store("layer", &mut grads);
        let report = grad_check(&mut l, loss, &grads, 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn sparse_and_dense_kernels_agree() {
        let mut rng = Rng::new(5);
        let mut mask = Matrix::zeros(40, 10);
        for i in 0..40 {
            mask[(i, rng.index(10))] = 1.0;
            mask[(i, rng.index(10))] = 0.5;
        }
        let mut sparse = MaskedLinearLayer::init(mask, &mut rng).unwrap();
        for v in sparse.bias_mut().data_mut() {
            *v = rng.uniform_range(-1.0, 1.0);
        }
        assert!(sparse.support.is_some());
        let mut dense = sparse.clone();
        dense.support = None;
        let x = crate::numerics::gaussian_sample(&mut rng, 7, 40);
        let dy = crate::numerics::gaussian_sample(&mut rng, 7, 10);
        let (ys, ts) = sparse.forward(&x).unwrap();
        let (yd, td) = dense.forward(&x).unwrap();
        assert!(ys.max_abs_diff(&yd) < 1e-12);
        let gs = sparse.backward(ts, &dy).unwrap();
        let gd = dense.backward(td, &dy).unwrap();
        assert!(gs.dx.max_abs_diff(&gd.dx) < 1e-12);
        assert!(gs.dw.max_abs_diff(&gd.dw) < 1e-12);
        assert_eq!(gs.db, gd.db);
        for i in 0..40 {
            for j in 0..10 {
                if sparse.mask()[(i, j)] == 0.0 {
                    assert_eq!(gs.dw[(i, j)].to_bits(), 0);
                }
            }
        }
    }
}

use crate::numerics::Matrix;

const SIGMOID_HI: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, evaluated on the branch that cannot overflow and kept
/// strictly inside `(0, 1)`.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_HI)
}

pub fn sigmoid_forward(x: &Matrix) -> Matrix {
    x.map(sigmoid)
}

/// `dσ = σ(1 − σ) ⊙ dy`, taking the forward output `s`.
pub fn sigmoid_backward(s: &Matrix, dy: &Matrix) -> Matrix {
    let data = s
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &g)| s * (1.0 - s) * g)
        .collect();
    Matrix::new(s.rows(), s.cols(), data).expect("same shape")
}

pub fn relu_forward(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Takes the forward *input*; the subgradient at 0 is 0.
pub fn relu_backward(x: &Matrix, dy: &Matrix) -> Matrix {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::new(x.rows(), x.cols(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        for x in [500.0, -500.0, 1e300, -1e300] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "σ({x}) = {s}");
        }
        let g = sigmoid_backward(&Matrix::filled(1, 1, sigmoid(0.0)), &Matrix::filled(1, 1, 2.0));
        assert_eq!(g[(0, 0)], 0.5);
    }

    #[test]
    fn relu_gates_gradient() {
        let x = Matrix::from_rows(&[[-1.0, 0.0, 2.0]]);
        assert_eq!(relu_forward(&x), Matrix::from_rows(&[[0.0, 0.0, 2.0]]));
        assert_eq!(
            relu_backward(&x, &Matrix::ones(1, 3)),
            Matrix::from_rows(&[[0.0, 0.0, 1.0]])
        );
    }

    proptest! {
        #[test]
        fn sigmoid_open_interval(x in proptest::num::f64::NORMAL | proptest::num::f64::ZERO | proptest::num::f64::SUBNORMAL) {
            let s = sigmoid(x);
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}

//! Finite-difference gradient oracle.
//!
//! Central differences over every entry of a tensor. This path never touches
//! the reverse-mode machinery, so it serves as the independent check for
//! everything the graph computes.

use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// Central-difference gradient of a scalar function of a matrix:
/// `(f(x + h e_ij) - f(x - h e_ij)) / 2h` per entry.
pub fn finite_diff_grad<S: Scalar>(
    f: impl Fn(&Tensor2<S>) -> S,
    x: &Tensor2<S>,
    h: S,
) -> Tensor2<S> {
    assert!(h > S::zero(), "finite-difference step must be positive");
    let two = S::from_f64_exact(2.0);
    let mut probe = x.clone();
    let mut out = Tensor2::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let orig = probe.get(i, j);
            probe.set(i, j, orig + h);
            let plus = f(&probe);
            probe.set(i, j, orig - h);
            let minus = f(&probe);
            probe.set(i, j, orig);
            out.set(i, j, (plus - minus) / (two * h));
        }
    }
    out
}

/// Relative Frobenius-norm discrepancy between two gradients:
/// `|a - b|_F / max(|b|_F, floor)`.
pub fn rel_error<S: Scalar>(a: &Tensor2<S>, b: &Tensor2<S>, floor: S) -> S {
    let diff = a.sub(b).expect("shape mismatch in rel_error");
    let denom = b.frobenius_sq().sqrt().max(floor);
    diff.frobenius_sq().sqrt() / denom
}

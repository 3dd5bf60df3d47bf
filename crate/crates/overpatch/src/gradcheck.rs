//! Central-difference verification of tape gradients.

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Coordinates where both gradients are smaller than this floor are compared
/// absolutely rather than relatively.
const REL_ERR_FLOOR: f64 = 1e-6;

/// Outcome of [`finite_diff_check`]: the worst coordinate and both gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport<T> {
    pub max_rel_err: T,
    pub worst_index: usize,
    pub analytic: Vec<T>,
    pub numeric: Vec<T>,
}

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate.
///
/// `f` rebuilds the computation from scratch on the tape it is given; it is
/// invoked once for the analytic gradient and twice per coordinate for the
/// numeric one. The relative error at a coordinate is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_diff_check<T: Scalar>(
    f: impl Fn(&mut Tape<T>, Var) -> Var,
    at: &Tensor<T>,
    step: T,
) -> GradCheckReport<T> {
    let mut tape = Tape::new();
    let x = tape.leaf(at.clone(), true);
    let loss = f(&mut tape, x);
    assert_eq!(
        tape.value(loss).numel(),
        1,
        "finite_diff_check requires a scalar-valued function"
    );
    tape.backward(loss).expect("fresh tape, scalar root");
    let analytic = tape
        .grad(x)
        .expect("input is a requires_grad leaf")
        .into_data();

    let eval = |point: Tensor<T>| -> T {
        let mut tape = Tape::new();
        let x = tape.leaf(point, false);
        let loss = f(&mut tape, x);
        tape.value(loss).item()
    };

    let two_step = step + step;
    let mut numeric = vec![T::zero(); at.numel()];
    for i in 0..at.numel() {
        let mut plus = at.clone();
        plus.data_mut()[i] += step;
        let mut minus = at.clone();
        minus.data_mut()[i] -= step;
        numeric[i] = (eval(plus) - eval(minus)) / two_step;
    }

    let floor = T::from_f64(REL_ERR_FLOOR);
    let mut max_rel_err = T::zero();
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(floor);
        let rel = (a - n).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let at = Tensor::new(vec![4], vec![0.3, -0.7, 1.2, 0.05]).unwrap();
        let report = finite_diff_check(
            |tape, x| {
                let sq = tape.mul(x, x).unwrap();
                tape.sum(sq)
            },
            &at,
            1e-5,
        );
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn cross_entropy_of_dense_checks_out() {
        let at = Tensor::new(vec![4], vec![0.1, 0.4, -0.3, 0.8]).unwrap();
        let w: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let report = finite_diff_check(
            |tape, x| {
                let weights = Tensor::new(vec![4, 3], w.clone()).unwrap();
                let bias = Tensor::new(vec![3], vec![0.05, -0.1, 0.2]).unwrap();
                let wv = tape.constant(weights);
                let bv = tape.constant(bias);
                let logits = tape.dense(x, wv, bv).unwrap();
                tape.softmax_cross_entropy(logits, 1).unwrap()
            },
            &at,
            1e-5,
        );
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn clamp_boundary_subgradient_shows_up_as_mismatch() {
        // At an input sitting exactly on the clamp boundary the analytic
        // subgradient is 0 while the central difference sees 1/2; the
        // checker must surface that disagreement.
        let at = Tensor::new(vec![2], vec![1.0, 0.5]).unwrap();
        let report = finite_diff_check(
            |tape: &mut Tape<f64>, x| {
                let c = tape.clamp01(x);
                tape.sum(c)
            },
            &at,
            1e-5,
        );
        assert!(report.max_rel_err > 1e-2);
        assert_eq!(report.worst_index, 0);
    }
}

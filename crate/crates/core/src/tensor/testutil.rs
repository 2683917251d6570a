//! Shared test helpers: central-difference gradient verification against
//! the tape's reverse pass.

use super::{Tape, Tensor};
use crate::rng::SeededRng;

pub fn random_vec(rng: &mut SeededRng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.uniform_symmetric(1.5)).collect()
}

/// Reduces any output to a scalar via a fixed pseudorandom weighting, so
/// backward index bugs can't hide behind symmetric reductions.
pub fn weighted_sum(tape: &mut Tape, t: &Tensor, salt: u64) -> Tensor {
    let mut rng = SeededRng::new(salt);
    let w = Tensor::from_vec(t.shape().to_vec(), random_vec(&mut rng, t.len()));
    let prod = tape.mul(t, &w).unwrap();
    tape.sum_all(&prod).unwrap()
}

/// Central-difference gradient check of a scalar-valued builder against the
/// tape's reverse pass, on one input tensor.
pub fn grad_check(
    shape: Vec<usize>,
    x: Vec<f64>,
    tol: f64,
    build: impl Fn(&mut Tape, &Tensor) -> Tensor,
) {
    let mut tape = Tape::new();
    let xt = tape.watch(&Tensor::from_vec(shape.clone(), x.clone()));
    let loss = build(&mut tape, &xt);
    let analytic = tape.backward(&loss).unwrap().wrt(&xt);

    let eval = |v: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let xt = tape.watch(&Tensor::from_vec(shape.clone(), v.to_vec()));
        build(&mut tape, &xt).item().unwrap()
    };
    let h = 1e-5;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus[i] += h;
        let mut minus = x.clone();
        minus[i] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
        assert!(
            (analytic[i] - fd).abs() / denom < tol,
            "coordinate {i}: analytic {} vs central difference {fd}",
            analytic[i]
        );
    }
}

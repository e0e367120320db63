//! Central finite-difference gradient checking.
//!
//! Used by the per-operation unit tests and by the whole-network gradient
//! suite. Double precision keeps the truncation error of the central
//! difference well below the tolerances being asserted.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tape, Var};

/// Uniform values in [-1, 1], deterministic under `seed`.
pub fn rand_array<F: Scalar>(shape: &[usize], seed: u64) -> ArrayD<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(ndarray::IxDyn(shape), || F::c(rng.gen_range(-1.0..1.0)))
}

/// Symmetric relative error with an absolute floor for near-zero pairs.
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    diff / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Rebuilds the scalar loss once per perturbed element of every input and
/// compares central differences against the tape's gradients. Returns the
/// worst [`grad_error`] seen.
pub fn check_grads<F: Scalar>(
    inputs: &[ArrayD<F>],
    eps: f64,
    _tol: f64,
    build: impl Fn(&Tape<F>, &[Var]) -> Var,
) -> f64 {
    let eval = |arrays: &[ArrayD<F>]| -> f64 {
        let tape: Tape<F> = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| tape.input(a.clone())).collect();
        let loss = build(&tape, &vars);
        assert_eq!(tape.shape(loss).len(), 0, "loss must be scalar");
        tape.value_owned(loss)[[]].to_f64().unwrap()
    };

    let tape: Tape<F> = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.input(a.clone())).collect();
    let loss = build(&tape, &vars);
    tape.backward(loss);
    let analytic: Vec<ArrayD<F>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, a)| tape.grad(*v).unwrap_or_else(|| ArrayD::zeros(a.raw_dim())))
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<ArrayD<F>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let orig = work[i].as_slice().unwrap()[idx];
            let step = F::c(eps);
            work[i].as_slice_mut().unwrap()[idx] = orig + step;
            let lp = eval(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig - step;
            let lm = eval(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let an = analytic[i].as_slice().unwrap()[idx].to_f64().unwrap();
            worst = worst.max(grad_error(an, numeric));
        }
    }
    worst
}

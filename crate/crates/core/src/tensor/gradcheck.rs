use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

/// Central-difference step used by the verification suite.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares the tape gradient of a scalar-valued function against central
/// differences. Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(TensorError::Invalid(format!("grad_check step {h} outside (0, 1e-3]")));
    }
    let mut tape = Tape::new();
    let x = tape.param(input.clone());
    let loss = f(&mut tape, x)?;
    tape.backward(loss)?;
    let analytic = tape.grad_or_zeros(x);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(probe);
        let loss = f(&mut tape, x)?;
        Ok(tape.value(loss).item())
    };

    let mut worst = 0.0f64;
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// [`grad_check`] for an op with tensor output: the output is reduced to a
/// scalar with fixed pseudo-random weights so every output coordinate
/// contributes a distinct cotangent.
pub fn grad_check_op<F>(op: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check(
        |tape, x| {
            let out = op(tape, x)?;
            let n = tape.value(out).numel();
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let weights = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            tape.weighted_sum(out, weights)
        },
        input,
        h,
    )
}

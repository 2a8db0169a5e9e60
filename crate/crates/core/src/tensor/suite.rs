use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{grad_check, grad_check_op, Result, Tape, Tensor, TensorError, Var, GRAD_CHECK_STEP, NORMALIZE_EPSILON};

/// Inputs closer than this to a ReLU or max-pool kink are redrawn: a central
/// difference straddling a kink measures the wrong derivative.
pub const KINK_MARGIN: f64 = 100.0 * GRAD_CHECK_STEP;

const MAX_REDRAWS: usize = 50;

/// Worst relative gradient error of one op over the suite's random inputs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub trials: usize,
    /// Inputs rejected for sitting within [`KINK_MARGIN`] of a kink.
    pub redrawn: usize,
    pub max_error: f64,
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Builds one random instance: the input to differentiate, the function
/// under test, and whether the function is already scalar-valued.
type Case = fn(&mut ChaCha8Rng) -> (Tensor, OpFn, bool);

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul_lhs", |r| {
            let (n, k, m) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            let b = uniform(&[k, m], r);
            (uniform(&[n, k], r), Box::new(move |t, x| { let b = t.constant(b.clone()); t.matmul(x, b) }), false)
        }),
        ("matmul_rhs", |r| {
            let (n, k, m) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            let a = uniform(&[n, k], r);
            (uniform(&[k, m], r), Box::new(move |t, x| { let a = t.constant(a.clone()); t.matmul(a, x) }), false)
        }),
        ("transpose", |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 4)];
            (uniform(&s, r), Box::new(|t, x| t.transpose(x)), false)
        }),
        ("relu", |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 5)];
            (uniform(&s, r), Box::new(|t, x| Ok(t.relu(x))), false)
        }),
        ("add_bias_input", |r| {
            let (n, c) = (dim(r, 1, 4), dim(r, 1, 4));
            let b = uniform(&[c], r);
            (uniform(&[n, c], r), Box::new(move |t, x| { let b = t.constant(b.clone()); t.add_bias(x, b) }), false)
        }),
        ("add_bias_bias", |r| {
            let (n, c) = (dim(r, 1, 4), dim(r, 1, 4));
            let a = uniform(&[n, c], r);
            (uniform(&[c], r), Box::new(move |t, b| { let a = t.constant(a.clone()); t.add_bias(a, b) }), false)
        }),
        ("mul", |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 4)];
            let c = uniform(&s, r);
            (uniform(&s, r), Box::new(move |t, x| { let c = t.constant(c.clone()); t.mul(x, c) }), false)
        }),
        ("mul_square", |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 4)];
            (uniform(&s, r), Box::new(|t, x| t.mul(x, x)), false)
        }),
        ("scale", |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 4)];
            let f = r.random_range(-3.0..3.0);
            (uniform(&s, r), Box::new(move |t, x| Ok(t.scale(x, f))), false)
        }),
        ("mean_rows", |r| {
            let s = [dim(r, 1, 5), dim(r, 1, 4)];
            (uniform(&s, r), Box::new(|t, x| t.mean_rows(x)), false)
        }),
        ("sum", |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 4)];
            (uniform(&s, r), Box::new(|t, x| Ok(t.sum(x))), true)
        }),
        ("l2_normalize", |r| {
            let s = [dim(r, 1, 4), dim(r, 2, 6)];
            (uniform(&s, r), Box::new(|t, x| t.l2_normalize(x, NORMALIZE_EPSILON)), false)
        }),
        ("softmax_cross_entropy", |r| {
            let (n, c) = (dim(r, 1, 5), dim(r, 2, 5));
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
            let mut logits = uniform(&[n, c], r);
            logits.data_mut().iter_mut().for_each(|v| *v *= 4.0);
            (logits, Box::new(move |t, x| t.softmax_cross_entropy(x, &labels)), true)
        }),
        ("gather_rows", |r| {
            let (n, c) = (dim(r, 1, 4), dim(r, 1, 4));
            let rows: Vec<usize> = (0..dim(r, 1, 6)).map(|_| r.random_range(0..n)).collect();
            (uniform(&[n, c], r), Box::new(move |t, x| t.gather_rows(x, &rows)), false)
        }),
        ("concat_rows", |r| {
            let (n, c) = (dim(r, 1, 3), dim(r, 1, 4));
            let other = uniform(&[dim(r, 1, 3), c], r);
            (uniform(&[n, c], r), Box::new(move |t, x| { let o = t.constant(other.clone()); t.concat_rows(&[x, o, x]) }), false)
        }),
        ("fill_diagonal", |r| {
            let n = dim(r, 1, 5);
            (uniform(&[n, n], r), Box::new(|t, x| t.fill_diagonal(x, 0.5)), false)
        }),
        ("reshape", |r| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            (uniform(&[a, b], r), Box::new(move |t, x| t.reshape(x, &[b, a])), false)
        }),
        ("conv2d_3x3_input", |r| {
            let (b, ci, co, h, w) = (dim(r, 1, 2), dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4));
            let k = uniform(&[co, ci, 3, 3], r);
            (uniform(&[b, ci, h, w], r), Box::new(move |t, x| { let k = t.constant(k.clone()); t.conv2d_3x3(x, k) }), false)
        }),
        ("conv2d_3x3_kernels", |r| {
            let (b, ci, co, h, w) = (dim(r, 1, 2), dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4));
            let x = uniform(&[b, ci, h, w], r);
            (uniform(&[co, ci, 3, 3], r), Box::new(move |t, k| { let x = t.constant(x.clone()); t.conv2d_3x3(x, k) }), false)
        }),
        ("maxpool_2x2", |r| {
            let s = [dim(r, 1, 2), dim(r, 1, 2), 2 * dim(r, 1, 2), 2 * dim(r, 1, 2)];
            (uniform(&s, r), Box::new(|t, x| t.maxpool_2x2(x)), false)
        }),
        ("spatial_mean", |r| {
            let s = [dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
            (uniform(&s, r), Box::new(|t, x| t.spatial_mean(x)), false)
        }),
        ("conv_block", |r| {
            // conv -> relu -> pool -> mean, the Conv4 block composition
            let (ci, co) = (dim(r, 1, 2), dim(r, 1, 3));
            let k = uniform(&[co, ci, 3, 3], r);
            (
                uniform(&[1, ci, 4, 4], r),
                Box::new(move |t, x| {
                    let k = t.constant(k.clone());
                    let y = t.conv2d_3x3(x, k)?;
                    let y = t.relu(y);
                    let y = t.maxpool_2x2(y)?;
                    t.spatial_mean(y)
                }),
                false,
            )
        }),
    ]
}

/// Distance from the nearest kink of `f` at `input`.
pub fn margin_at<F>(f: &F, input: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + ?Sized,
{
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    f(&mut tape, x)?;
    Ok(tape.kink_margin())
}

/// Gradient verification for every differentiable tape op: `trials` random
/// instances per op (random shapes and values drawn from `seed`), each
/// compared against central differences with step [`GRAD_CHECK_STEP`].
pub fn verification_suite(trials: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (k, (name, case)) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
        let mut check = OpCheck {
            name: name.to_string(),
            trials,
            redrawn: 0,
            max_error: 0.0,
        };
        for _ in 0..trials {
            let mut attempt = 0;
            let (input, f, scalar) = loop {
                let (input, f, scalar) = case(&mut rng);
                if margin_at(&*f, &input)? > KINK_MARGIN {
                    break (input, f, scalar);
                }
                attempt += 1;
                check.redrawn += 1;
                if attempt >= MAX_REDRAWS {
                    return Err(TensorError::Invalid(format!("{name}: no input clear of kinks after {MAX_REDRAWS} draws")));
                }
            };
            let err = if scalar {
                grad_check(&*f, &input, GRAD_CHECK_STEP)?
            } else {
                grad_check_op(&*f, &input, GRAD_CHECK_STEP)?
            };
            check.max_error = check.max_error.max(err);
        }
        out.push(check);
    }
    Ok(out)
}

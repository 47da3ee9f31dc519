//! Central finite-difference gradient verification.
//!
//! Runs a scalar-valued closure once on a recording tape to get analytic
//! gradients, then perturbs every input element by ±step on fresh tapes and
//! compares. Used with `f64` so the comparison itself adds no noise.

use crate::error::{Error, Result};

use super::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct CheckOpts {
    /// Central-difference step.
    pub step: f64,
}

impl Default for CheckOpts {
    fn default() -> Self {
        CheckOpts { step: 1e-3 }
    }
}

/// Relative error with a unit floor: |a−n| / max(1, |a|, |n|).
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Verify the analytic gradient of `f` (a scalar function of the given leaf
/// inputs) against central finite differences. Returns the maximum relative
/// error over every element of every input.
pub fn central_diff_check<F>(opts: CheckOpts, inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        tape.scalar_value(y)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    if tape.numel(y) != 1 {
        return Err(Error::contract("gradcheck", "function under test must return a scalar"));
    }
    tape.backward(y)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let h = opts.step;
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let orig = t.data()[e];
            work[ti].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[e] = orig - h;
            let dn = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (up - dn) / (2.0 * h);
            let err = rel_err(analytic[ti][e], numeric);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Uniform random tensor in [lo, hi] from a simple deterministic generator,
/// for building reproducible check cases without threading an RNG everywhere.
pub fn seeded_uniform<S: Scalar>(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Tensor<S> {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(0x2545F4914F6CDD1D);
    let n = super::numel(&shape);
    let data = (0..n)
        .map(|_| {
            // splitmix64 step
            state = state.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^= z >> 31;
            let u = (z >> 11) as f64 / (1u64 << 53) as f64;
            S::from_f64(lo + (hi - lo) * u)
        })
        .collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

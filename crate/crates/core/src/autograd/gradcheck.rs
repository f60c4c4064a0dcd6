use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::Result;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest `|a - n| / max(|a|, |n|)` in the 2-norm over the checked
    /// coordinates of one input; robust to coordinates whose true gradient is 0.
    pub max_tensor_rel_error: f64,
    pub checked: usize,
    /// `(input, coordinate, analytic, numeric)` of the worst relative error.
    pub worst: (usize, usize, f64, f64),
}

// Denominator floor so coordinates with (near) zero gradient compare in
// absolute terms instead of blowing up the relative error.
const REL_FLOOR: f64 = 1e-6;

/// Checks `d f / d inputs` of the scalar built by `f`. All inputs are
/// registered as trainable leaves in order. At most `max_per_input`
/// coordinates of each input are perturbed, chosen with `seed`.
pub fn check_gradient<F>(
    inputs: &[Tensor<f64>],
    step: f64,
    max_per_input: usize,
    seed: u64,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&mut tape, &vars);
        tape.value(root).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars);
    let grads = tape.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        max_tensor_rel_error: 0.0,
        checked: 0,
        worst: (0, 0, 0.0, 0.0),
    };
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.dense(vars[k], input.len());
        let coords: Vec<usize> = if input.len() <= max_per_input {
            (0..input.len()).collect()
        } else {
            sample(&mut rng, input.len(), max_per_input).into_vec()
        };
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for i in coords {
            let orig = work[k].data[i];
            work[k].data[i] = orig + step;
            let up = eval(&work);
            work[k].data[i] = orig - step;
            let down = eval(&work);
            work[k].data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let abs = (numeric - analytic[i]).abs();
            let rel = abs / numeric.abs().max(analytic[i].abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, i, analytic[i], numeric);
            }
            report.checked += 1;
            diff2 += abs * abs;
            a2 += analytic[i] * analytic[i];
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        if scale > 0.0 {
            report.max_tensor_rel_error = report.max_tensor_rel_error.max(diff2.sqrt() / scale);
        }
    }
    Ok(report)
}

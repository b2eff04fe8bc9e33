//! Central-difference verification of tape gradients in `f64`.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all checked elements of `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
    pub max_rel_error: f64,
    /// (input index, element index) where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    v.item().ok_or_else(|| Error::NotScalar(v.dims().to_vec()))
}

/// Compares `backward` against central differences with per-element step
/// `step * max(1, |x_i|)` for every element of every input.
///
/// `f` must be deterministic: any randomness has to be re-seeded inside it.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(*var);
        for i in 0..input.len() {
            let x = input.values()[i];
            let h = step * x.abs().max(1.0);
            probe[k].values_mut()[i] = x + h;
            let up = eval(&f, &probe)?;
            probe[k].values_mut()[i] = x - h;
            let down = eval(&f, &probe)?;
            probe[k].values_mut()[i] = x;

            let fd = (up - down) / (2.0 * h);
            let ad = analytic.map_or(0.0, |g| g.values()[i]);
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

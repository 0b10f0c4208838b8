use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Norm-wise relative error per input.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
}

/// Fraction of the overall gradient norm below which a tensor's gradient is
/// compared in absolute terms, so parameters whose true gradient vanishes
/// (a bias feeding batch norm) do not turn finite-difference noise into a
/// large relative error.
pub const GRAD_FLOOR: f64 = 1e-3;

/// Norm-wise relative error between two gradient vectors, with the
/// denominator bounded below by `floor`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor).max(1e-300)
}

/// Compares reverse-mode gradients of the scalar `f` with central differences
/// of step `eps`, input by input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (n, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[n].len()]);
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for i in 0..inputs[n].len() {
            let x0 = inputs[n].data()[i];
            work[n].data_mut()[i] = x0 + eps;
            let up = eval(&work)?;
            work[n].data_mut()[i] = x0 - eps;
            let down = eval(&work)?;
            work[n].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            diff += (numeric - analytic[i]).powi(2);
            na += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
        per_input.push(diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12));
    }
    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheck {
        per_input,
        max_rel_err,
    })
}

//! Finite-difference verification of backward rules, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tape, Var};
use crate::error::Result;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input slot and element where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Maximum relative error between the tape's gradient and central
/// differences, over every element of every input with `requires_grad`.
///
/// Non-scalar outputs are reduced with fixed weights drawn from `[0.5, 1.5]`,
/// so every output element contributes.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(op, inputs, eps).map(|r| r.max_rel_error)
}

pub fn grad_check_with<F>(op: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Tensor<f64>> = None;
    let mut project = |tape: &mut Tape<f64>, out: Var| -> Result<Var> {
        let shape = tape.shape_of(&out);
        if shape == Shape::SCALAR {
            return Ok(out);
        }
        let w = weights
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
                let data = (0..shape.numel())
                    .map(|_| rng.gen_range(0.5..1.5))
                    .collect();
                Tensor::from_vec(shape, data).expect("shape matches")
            })
            .clone();
        let w = tape.constant(w);
        let p = tape.mul(&out, &w)?;
        tape.sum(&p)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let loss = project(&mut tape, out)?;
    tape.backward(&loss)?;
    let analytic: Vec<Option<Vec<f64>>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            t.requires_grad()
                .then(|| tape.grad(v).map(<[f64]>::to_vec))
                .flatten()
        })
        .collect();

    let mut eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&mut tape, &vars)?;
        let loss = project(&mut tape, out)?;
        Ok(tape.value(&loss)?.data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (slot, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for e in 0..inputs[slot].numel() {
            let orig = inputs[slot].data()[e];
            probe[slot].data_mut()[e] = orig + eps;
            let plus = eval(&probe)?;
            probe[slot].data_mut()[e] = orig - eps;
            let minus = eval(&probe)?;
            probe[slot].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_error || rel.is_nan() {
                report = GradCheckReport {
                    max_rel_error: rel,
                    worst: (slot, e),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

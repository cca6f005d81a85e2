use sata_core::tensor::{Tape, Tensor, Var};
use sata_core::Result;

/// Re-checks a gradient with a fourth-order central stencil, at 1e-5
/// relative (1e-8 absolute below 1e-8). Used where the second-order check at
/// h = 1e-5 is limited by truncation or roundoff at coordinates with small
/// gradients. Returns a description of every disagreeing coordinate.
pub fn stencil_mismatches<F>(f: F, inputs: &[Tensor]) -> Vec<String>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let value = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let mut mismatches = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let x = input.data()[k];
            let h = 1e-3 * x.abs().max(1.0);
            let at = |dx: f64| {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[k] = x + dx;
                value(&moved)
            };
            let numeric = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            let analytic = grads.get(vars[i]).unwrap().data()[k];
            let scale = analytic.abs().max(numeric.abs());
            let err = (analytic - numeric).abs();
            let ok = if scale < 1e-8 {
                err <= 1e-8
            } else {
                err <= 1e-5 * scale
            };
            if !ok {
                mismatches.push(format!("input {i}[{k}]: {analytic} vs {numeric}"));
            }
        }
    }
    mismatches
}

//! Finite-difference verification of analytic gradients.
//!
//! Central differences at `eps = 1e-5` against the tape's reverse pass. The
//! whole stack is `f64`, which is what makes the tolerance regime below
//! meaningful: truncation error of the central stencil is O(eps^2) = 1e-10,
//! far under the acceptance threshold.

use crate::tensor::{Tape, Tensor, Var};

/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Relative tolerance for analytic-vs-numeric agreement.
pub const GRAD_RTOL: f64 = 1e-4;
/// Absolute floor below which disagreement is ignored (both grads ~ 0).
pub const GRAD_ATOL: f64 = 1e-7;

/// Central difference of a scalar function at `x`, one partial per entry.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + FD_EPS;
        let up = f(&probe);
        probe[i] = x[i] - FD_EPS;
        let down = f(&probe);
        probe[i] = x[i];
        out[i] = (up - down) / (2.0 * FD_EPS);
    }
    out
}

/// True when `|a - n| <= max(GRAD_ATOL, GRAD_RTOL * max(|a|, |n|))`.
pub fn close(a: f64, n: f64) -> bool {
    (a - n).abs() <= GRAD_ATOL.max(GRAD_RTOL * a.abs().max(n.abs()))
}

/// Compare gradient vectors entry by entry; on failure names the worst entry.
pub fn grads_close(analytic: &[f64], numeric: &[f64]) -> Result<(), String> {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst: Option<(usize, f64)> = None;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        if !close(a, n) {
            let gap = (a - n).abs();
            if worst.map_or(true, |(_, w)| gap > w) {
                worst = Some((i, gap));
            }
        }
    }
    match worst {
        None => Ok(()),
        Some((i, gap)) => Err(format!(
            "entry {i}: analytic {} vs numeric {} (|diff| {gap:.3e})",
            analytic[i], numeric[i]
        )),
    }
}

/// Verify the tape gradient of `build` (a scalar-valued graph over the given
/// leaves) against central differences, for every entry of every leaf.
///
/// `build` gets a fresh tape and one `Var` per input tensor, in order, and
/// must return the scalar loss node.
pub fn check_fn(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> Result<(), String> {
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).map_err(|e| e.to_string())?;

    for (which, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = tape
            .grad(vars[which])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);

        let mut eval = |perturbed: &[f64]| -> f64 {
            let mut t2 = Tape::new();
            let vars2: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let data =
                        if i == which { perturbed.to_vec() } else { t.data().to_vec() };
                    t2.constant(t.shape(), data).expect("leaf rebuild")
                })
                .collect();
            let loss2 = build(&mut t2, &vars2);
            t2.value(loss2)[0]
        };
        let numeric = central_diff(&mut eval, input.data());
        grads_close(&analytic, &numeric)
            .map_err(|msg| format!("input {which} (shape {:?}): {msg}", input.shape()))?;
    }
    Ok(())
}

//! Gradient verification against central finite differences.
//!
//! The numeric side never touches the backward pass: it re-evaluates the
//! forward closure at perturbed inputs, so it is an independent oracle for
//! the analytic gradients.

use super::{Tape, Tensor, Var};

/// Central differences: df/dx_i ~= (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn numerical_gradient(
    mut f: impl FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    h: f64,
) -> Vec<Tensor> {
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for e in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let fp = f(&plus);
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let fm = f(&minus);
            g.data_mut()[e] = (fp - fm) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input_index: usize,
    pub element_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Builds the loss twice: once on a tape for analytic gradients and many
/// times value-only for central differences. `build` must be a pure function
/// of its inputs.
pub fn check_gradients(
    build: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    inputs: &[Tensor],
    h: f64,
) -> GradCheckReport {
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &leaves);
    let grads = tape.backward(loss);
    let analytic: Vec<Tensor> = leaves.iter().map(|v| grads.wrt(*v)).collect();

    let numeric = numerical_gradient(
        |xs| {
            let t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            build(&t, &vs).item()
        },
        inputs,
        h,
    );

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input_index: 0,
        element_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for e in 0..a.numel() {
            let (av, nv) = (a.data()[e], n.data()[e]);
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(1.0);
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    input_index: i,
                    element_index: e,
                    analytic: av,
                    numeric: nv,
                };
            }
        }
    }
    report
}

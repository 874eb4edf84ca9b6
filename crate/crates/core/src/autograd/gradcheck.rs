//! Central finite differences, the independent route used to validate
//! backpropagated gradients.

use super::{Graph, Var};
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `x`, perturbing every element by `±h`.
pub fn finite_difference(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    finite_difference_at(&mut f, x, h, &(0..x.len()).collect::<Vec<_>>())
}

/// Central-difference derivatives for the listed flat indices only.
pub fn finite_difference_at(f: &mut impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64, indices: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Asserts that backprop through `f` matches finite differences for every input.
pub fn check_op<F>(inputs: &[Tensor], f: F)
where
    F: for<'g> Fn(&[Var<'g>]) -> Var<'g>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| graph.leaf(t.clone(), true)).collect();
    let loss = f(&vars);
    let grads = graph.backward(loss);
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        let numeric = finite_difference(
            |probe| {
                let g = Graph::new();
                let vs: Vec<Var<'_>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                f(&vs).value().item()
            },
            x,
            1e-6,
        );
        for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let err = relative_error(*a, *n, 1e-6);
            assert!(err < 1e-5, "input {k} element {i}: backprop {a} vs finite difference {n} (rel err {err:.3e})");
        }
    }
}

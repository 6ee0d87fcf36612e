//! Central finite-difference oracles for gradient checking. This module is
//! test support: it evaluates graphs only through `forward`, never through
//! the analytic backward path it is used to verify.

use crate::graph::{Bindings, Graph, NodeId};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Numeric gradient of the scalar at `loss` with respect to the named
/// binding, by central differences over every element.
pub fn numeric_grad(graph: &Graph, bindings: &Bindings, loss: NodeId, name: &str) -> Tensor {
    let base = bindings.get(name).expect("binding present").clone();
    let mut grad = Tensor::zeros(base.shape().to_vec());
    for i in 0..base.len() {
        let mut plus = bindings.clone();
        plus.get_mut(name).unwrap().data_mut()[i] += FD_STEP;
        let mut minus = bindings.clone();
        minus.get_mut(name).unwrap().data_mut()[i] -= FD_STEP;
        let fp = graph.forward(&plus).unwrap().value(loss).scalar_value();
        let fm = graph.forward(&minus).unwrap().value(loss).scalar_value();
        grad.data_mut()[i] = (fp - fm) / (2.0 * FD_STEP);
    }
    grad
}

/// Elementwise comparison with relative tolerance: |a - n| <= tol * max(1, |n|).
pub fn grads_close(analytic: &Tensor, numeric: &Tensor, tol: f64) -> bool {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .all(|(&a, &n)| (a - n).abs() <= tol * n.abs().max(1.0))
}

/// Panic with a readable report when gradients disagree.
pub fn assert_grads_close(analytic: &Tensor, numeric: &Tensor, tol: f64, what: &str) {
    assert_eq!(analytic.shape(), numeric.shape(), "{what}: shape mismatch");
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let lim = tol * n.abs().max(1.0);
        assert!(
            (a - n).abs() <= lim,
            "{what}: element {i} analytic {a} vs numeric {n} (limit {lim})"
        );
    }
}

use std::fmt::Write;

use crate::io::Archive;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::RoutingState;

/// Named-tensor dump of a routing state: `r`, `r_norm`, `v`, optional `pi` and
/// `sigma`, and `activations`.
pub fn state_archive<T: Scalar>(state: &RoutingState<T>, activations: &Tensor<T>) -> Archive<T> {
    let mut a = Archive::new();
    a.push("r", state.r.clone());
    a.push("r_norm", state.r_norm.clone());
    a.push("v", state.v.clone());
    if let Some(pi) = &state.pi {
        a.push("pi", pi.clone());
    }
    if let Some(sigma) = &state.sigma {
        a.push("sigma", sigma.clone());
    }
    a.push("activations", activations.clone());
    a
}

/// Human-readable summary of normalized weights, output poses and activations.
pub fn text_report<T: Scalar>(state: &RoutingState<T>, activations: &Tensor<T>) -> String {
    let mut s = String::new();
    let (n, m) = (state.r_norm.dims()[0], state.r_norm.dims()[1]);
    let d = state.v.dims()[1];
    let _ = writeln!(s, "inputs: {n}  outputs: {m}  pose dim: {d}");
    let _ = writeln!(s, "degenerate: {}", state.degenerate);
    let _ = writeln!(s, "r_norm:");
    for i in 0..n {
        let row: Vec<String> = (0..m)
            .map(|j| format!("{:.6}", state.r_norm.at(&[i, j])))
            .collect();
        let _ = writeln!(s, "  [{i:>3}] {}", row.join(" "));
    }
    let _ = writeln!(s, "v:");
    for j in 0..m {
        let row: Vec<String> = (0..d).map(|k| format!("{:.6}", state.v.at(&[j, k]))).collect();
        let _ = writeln!(s, "  [{j:>3}] {}", row.join(" "));
    }
    let acts: Vec<String> = activations.data().iter().map(|a| format!("{a:.6}")).collect();
    let _ = writeln!(s, "activations: {}", acts.join(" "));
    s
}

use crate::error::{shape_err, Result};
use crate::kernels::{KernelSpec, Metric};
use crate::scalar::Scalar;
use crate::tensor::{softmax_in_place, Tensor};

use super::primitives::pair_distances;
use super::{ActivationParams, RoutingState, VoteTensor};

/// Output activations in the unified form
///
/// ```text
/// a_j = softmax_j( Σ_i r'_ij · a_i · k(max(0, Σ_d d(u_ijd − β_jd·v_jd) + β_j0)) )
/// ```
///
/// The distance is applied per dimension and the kernel argument is clamped at zero.
pub fn compute_activation<T: Scalar>(
    votes: &VoteTensor<T>,
    state: &RoutingState<T>,
    params: &ActivationParams<T>,
    kernel: KernelSpec,
) -> Result<Tensor<T>> {
    let (n, m, d) = (votes.n_in(), votes.n_out(), votes.dim());
    if state.r_norm.dims() != [n, m] || state.v.dims() != [m, d] {
        return shape_err("compute_activation", "state does not match votes");
    }
    if params.beta.dims() != [m, d + 1] {
        return shape_err(
            "compute_activation",
            format!("beta {:?}, expected [{m}, {}]", params.beta.dims(), d + 1),
        );
    }
    if kernel.metric == Metric::CosineVariant {
        return shape_err("compute_activation", "cosine metric has no per-dimension form");
    }
    let (bias, scale) = params.split();
    let mut out = vec![T::zero(); m];
    activation_into(
        votes.votes.data(),
        state.r_norm.data(),
        votes.activations.data(),
        state.v.data(),
        &bias,
        &scale,
        kernel,
        n,
        m,
        d,
        &mut out,
    );
    Tensor::new([m], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn activation_into<T: Scalar>(
    votes: &[T],
    r_norm: &[T],
    a: &[T],
    v: &[T],
    bias: &[T],
    scale: &[T],
    kernel: KernelSpec,
    n: usize,
    m: usize,
    d: usize,
    out: &mut [T],
) {
    let mut dist = vec![T::zero(); n * m];
    pair_distances(votes, v, Some(scale), kernel.metric, n, m, d, &mut dist);
    out.iter_mut().for_each(|x| *x = T::zero());
    for i in 0..n {
        for j in 0..m {
            let x = (dist[i * m + j] + bias[j]).max(T::zero());
            let w = r_norm[i * m + j] * a[i];
            out[j] = out[j] + w * kernel.profile.k(x);
        }
    }
    softmax_in_place(out);
}

/// Activations of the routing-by-agreement variant: `softmax_j(Σ_i r'_ij u_ij·v_j)`.
pub fn rba_activation<T: Scalar>(votes: &VoteTensor<T>, state: &RoutingState<T>) -> Result<Tensor<T>> {
    let (n, m, d) = (votes.n_in(), votes.n_out(), votes.dim());
    if state.r_norm.dims() != [n, m] || state.v.dims() != [m, d] {
        return shape_err("rba_activation", "state does not match votes");
    }
    let r = state.r_norm.data();
    let v = state.v.data();
    let mut logits = vec![T::zero(); m];
    for i in 0..n {
        for j in 0..m {
            let dot = votes
                .vote(i, j)
                .iter()
                .zip(&v[j * d..(j + 1) * d])
                .fold(T::zero(), |s, (&x, &y)| s + x * y);
            logits[j] = logits[j] + r[i * m + j] * dot;
        }
    }
    softmax_in_place(&mut logits);
    Tensor::new([m], logits)
}

use crate::error::{shape_err, Error, Result};
use crate::kernels::KernelSpec;
use crate::scalar::Scalar;
use crate::tensor::{softmax_in_place, Tensor};

use super::primitives::{
    column_sums, diag_gaussian_log_pdf, normalize_rows, pair_distances, weighted_mean, MeanBranch,
    Normalization,
};
use super::activation::activation_into;
use super::{compute_activation, rba_activation, ActivationParams, RoutingConfig, RoutingMethod, RoutingState, VoteTensor};

fn check_state_shapes<T: Scalar>(votes: &VoteTensor<T>, r: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
    let (n, m, d) = (votes.n_in(), votes.n_out(), votes.dim());
    if r.dims() != [n, m] || v.dims() != [m, d] {
        return shape_err(
            "routing state",
            format!("r {:?} / v {:?} for votes [{n}, {m}, {d}]", r.dims(), v.dims()),
        );
    }
    Ok(())
}

fn tensor<T: Scalar>(dims: impl Into<Vec<usize>>, data: Vec<T>, context: &str) -> Result<Tensor<T>> {
    let t = Tensor::new(dims, data);
    match t {
        Err(Error::NonFinite(_)) => Err(Error::NonFinite(context.to_string())),
        other => other,
    }
}

fn uniform_weights<T: Scalar>(n: usize, m: usize) -> Vec<T> {
    vec![T::one() / T::from_usize(m).unwrap(); n * m]
}

/// `w_ij = r'_ij · a_i`
fn activation_weights<T: Scalar>(r_norm: &[T], a: &[T], m: usize) -> Vec<T> {
    r_norm
        .iter()
        .enumerate()
        .map(|(k, &r)| r * a[k / m])
        .collect()
}

fn count_fallbacks(branches: &[MeanBranch]) -> usize {
    branches.iter().filter(|&&b| b != MeanBranch::Primary).count()
}

/// Weighted mixture density of the votes around the current centers.
pub fn objective<T: Scalar>(votes: &VoteTensor<T>, state: &RoutingState<T>, kernel: KernelSpec) -> Result<T> {
    check_state_shapes(votes, &state.r_norm, &state.v)?;
    let (n, m, d) = (votes.n_in(), votes.n_out(), votes.dim());
    let mut dist = vec![T::zero(); n * m];
    pair_distances(votes.votes.data(), state.v.data(), None, kernel.metric, n, m, d, &mut dist);
    let a = votes.activations.data();
    let r = state.r_norm.data();
    let mut acc = T::zero();
    for j in 0..m {
        for i in 0..n {
            let x = dist[i * m + j];
            acc = acc + r[i * m + j] * a[i] * kernel.profile(x)?;
        }
    }
    Ok(acc / T::from_usize(n).unwrap())
}

/// Mean-shift center update: `v_j ← Σ_i r'_ij a_i k'(d_ij) u_ij / Σ_i r'_ij a_i k'(d_ij)`,
/// with `d_ij` measured from `v_prev`. With no previous centers the `k'` factor is
/// omitted. Centers whose `k'` weights vanish use the plain activation-weighted mean.
/// Returns the new centers and the number of fallbacks taken.
pub fn frms_step2<T: Scalar>(
    votes: &VoteTensor<T>,
    r_norm: &Tensor<T>,
    v_prev: Option<&Tensor<T>>,
    kernel: KernelSpec,
) -> Result<(Tensor<T>, usize)> {
    let (n, m, d) = (votes.n_in(), votes.n_out(), votes.dim());
    let u = votes.votes.data();
    let base = activation_weights(r_norm.data(), votes.activations.data(), m);
    let mut v = vec![T::zero(); m * d];
    let mut branches = vec![MeanBranch::Primary; m];
    match v_prev {
        None => weighted_mean(u, &base, None, n, m, d, &mut v, &mut branches),
        Some(prev) => {
            check_state_shapes(votes, r_norm, prev)?;
            let mut dist = vec![T::zero(); n * m];
            pair_distances(u, prev.data(), None, kernel.metric, n, m, d, &mut dist);
            let w: Vec<T> = base
                .iter()
                .zip(&dist)
                .map(|(&b, &x)| b * kernel.profile.k_prime(x))
                .collect();
            weighted_mean(u, &w, Some(&base), n, m, d, &mut v, &mut branches);
        }
    }
    Ok((tensor([m, d], v, "frms step 2")?, count_fallbacks(&branches)))
}

/// EM center update: the activation-weighted mean `Σ_i r'_ij a_i u_ij / Σ_i r'_ij a_i`.
pub fn frem_step2<T: Scalar>(votes: &VoteTensor<T>, r_norm: &Tensor<T>) -> Result<(Tensor<T>, usize)> {
    let (n, m, d) = (votes.n_in(), votes.n_out(), votes.dim());
    if r_norm.dims() != [n, m] {
        return shape_err("frem_step2", format!("r {:?}", r_norm.dims()));
    }
    let w = activation_weights(r_norm.data(), votes.activations.data(), m);
    let mut v = vec![T::zero(); m * d];
    let mut branches = vec![MeanBranch::Primary; m];
    weighted_mean(votes.votes.data(), &w, None, n, m, d, &mut v, &mut branches);
    Ok((tensor([m, d], v, "frem step 2")?, count_fallbacks(&branches)))
}

/// Routing by mean shift.
///
/// Each iteration normalizes `r`, moves every center by the mean-shift update and then
/// takes a gradient step `r_ij += α a_i k(d(v_j − u_ij))`. The first iteration has no
/// centers yet, so it uses the plain activation-weighted mean.
pub fn frms_route<T: Scalar>(votes: &VoteTensor<T>, cfg: &RoutingConfig) -> Result<RoutingState<T>> {
    cfg.validate(RoutingMethod::Frms)?;
    let (n, m, d) = (votes.n_in(), votes.n_out(), votes.dim());
    let a = votes.activations.data();
    let u = votes.votes.data();
    let alpha = T::c(cfg.alpha);
    let kernel = cfg.kernel;

    let mut r = uniform_weights::<T>(n, m);
    let mut r_norm = vec![T::zero(); n * m];
    let mut v = vec![T::zero(); m * d];
    let mut dist = vec![T::zero(); n * m];
    let mut branches = vec![MeanBranch::Primary; m];
    let mut degenerate = 0;

    for t in 0..cfg.iterations {
        degenerate += normalize_rows(&r, &mut r_norm, m, cfg.normalization);
        let base = activation_weights(&r_norm, a, m);
        if t == 0 {
            weighted_mean(u, &base, None, n, m, d, &mut v, &mut branches);
        } else {
            pair_distances(u, &v, None, kernel.metric, n, m, d, &mut dist);
            let w: Vec<T> = base
                .iter()
                .zip(&dist)
                .map(|(&b, &x)| b * kernel.profile.k_prime(x))
                .collect();
            weighted_mean(u, &w, Some(&base), n, m, d, &mut v, &mut branches);
        }
        degenerate += count_fallbacks(&branches);
        pair_distances(u, &v, None, kernel.metric, n, m, d, &mut dist);
        for k in 0..n * m {
            r[k] = r[k] + alpha * (a[k / m] * kernel.profile.k(dist[k]));
        }
    }

    Ok(RoutingState {
        r: tensor([n, m], r, "frms r")?,
        r_norm: tensor([n, m], r_norm, "frms r_norm")?,
        v: tensor([m, d], v, "frms v")?,
        pi: None,
        sigma: None,
        degenerate,
    })
}

/// Routing by expectation maximization over the kernel mixture.
///
/// Each iteration normalizes `r`, sets centers to the activation-weighted mean,
/// recomputes mixture coefficients `π_j = Σ_i r'_ij / Σ_ij r'_ij` and then the
/// expected weights `r_ij = π_j k(d(v_j − u_ij))`.
pub fn frem_route<T: Scalar>(votes: &VoteTensor<T>, cfg: &RoutingConfig) -> Result<RoutingState<T>> {
    cfg.validate(RoutingMethod::Frem)?;
    let (n, m, d) = (votes.n_in(), votes.n_out(), votes.dim());
    let a = votes.activations.data();
    let u = votes.votes.data();
    let kernel = cfg.kernel;

    let mut r = uniform_weights::<T>(n, m);
    let mut r_norm = vec![T::zero(); n * m];
    let mut v = vec![T::zero(); m * d];
    let mut pi = vec![T::zero(); m];
    let mut dist = vec![T::zero(); n * m];
    let mut branches = vec![MeanBranch::Primary; m];
    let mut degenerate = 0;

    for _ in 0..cfg.iterations {
        degenerate += normalize_rows(&r, &mut r_norm, m, cfg.normalization);
        let w = activation_weights(&r_norm, a, m);
        weighted_mean(u, &w, None, n, m, d, &mut v, &mut branches);
        degenerate += count_fallbacks(&branches);
        column_sums(&r_norm, n, m, &mut pi);
        let total = pi.iter().fold(T::zero(), |s, &x| s + x);
        pi.iter_mut().for_each(|p| *p = *p / total);
        pair_distances(u, &v, None, kernel.metric, n, m, d, &mut dist);
        for k in 0..n * m {
            r[k] = pi[k % m] * kernel.profile.k(dist[k]);
        }
    }

    Ok(RoutingState {
        r: tensor([n, m], r, "frem r")?,
        r_norm: tensor([n, m], r_norm, "frem r_norm")?,
        v: tensor([m, d], v, "frem v")?,
        pi: Some(tensor([m], pi, "frem pi")?),
        sigma: None,
        degenerate,
    })
}

/// Gaussian-mixture EM routing with per-dimension variances, used as the reference
/// implementation for timing and accuracy comparisons.
///
/// Each iteration runs an M-step (activation-weighted means and variances, floored at
/// `variance_floor`, and output activations in the unified form) and, except after the
/// last M-step, an E-step `r_ij ∝ a_j · N(u_ij; v_j, diag σ²_j)` computed in log space.
pub fn em_route_baseline<T: Scalar>(
    votes: &VoteTensor<T>,
    cfg: &RoutingConfig,
    params: &ActivationParams<T>,
) -> Result<(RoutingState<T>, Tensor<T>)> {
    cfg.validate(RoutingMethod::EmBaseline)?;
    let (n, m, d) = (votes.n_in(), votes.n_out(), votes.dim());
    let a = votes.activations.data();
    let u = votes.votes.data();
    let floor = T::c(cfg.variance_floor);

    let mut r_norm = uniform_weights::<T>(n, m);
    let mut v = vec![T::zero(); m * d];
    let mut var = vec![T::zero(); m * d];
    let mut dev2 = vec![T::zero(); n * m * d];
    let mut logp = vec![T::zero(); n * m];
    let mut branches = vec![MeanBranch::Primary; m];
    let mut degenerate = 0;
    let mut act = vec![T::zero(); m];
    if params.beta.dims() != [m, d + 1] {
        return shape_err("em_route_baseline", format!("beta {:?}", params.beta.dims()));
    }
    let (bias, scale) = params.split();

    for t in 0..cfg.iterations {
        let w = activation_weights(&r_norm, a, m);
        weighted_mean(u, &w, None, n, m, d, &mut v, &mut branches);
        degenerate += count_fallbacks(&branches);
        for k in 0..n * m * d {
            let e = u[k] - v[k % (m * d)];
            dev2[k] = e * e;
        }
        weighted_mean(&dev2, &w, None, n, m, d, &mut var, &mut branches);
        var.iter_mut().for_each(|s| *s = s.max(floor));

        activation_into(u, &r_norm, a, &v, &bias, &scale, cfg.kernel, n, m, d, &mut act);

        if t + 1 < cfg.iterations {
            diag_gaussian_log_pdf(u, &v, &var, n, m, d, &mut logp);
            let la: Vec<T> = act.iter().map(|&x| x.ln()).collect();
            for i in 0..n {
                let row = &mut r_norm[i * m..(i + 1) * m];
                for j in 0..m {
                    row[j] = la[j] + logp[i * m + j];
                }
                softmax_in_place(row);
            }
        }
    }

    let r_t = tensor([n, m], r_norm, "em r")?;
    let state = RoutingState {
        r: r_t.clone(),
        r_norm: r_t,
        v: tensor([m, d], v, "em v")?,
        pi: None,
        sigma: Some(tensor([m, d], var, "em sigma")?),
        degenerate,
    };
    Ok((state, tensor([m], act, "em activations")?))
}

/// Routing-by-agreement variant: softmax weights, unnormalized weighted sum of votes,
/// and an agreement update `r_ij += u_ij · v_j`. Input activations are ignored.
/// Diagnostic only; it is excluded from trainable networks.
pub fn rba_variant_route<T: Scalar>(votes: &VoteTensor<T>, cfg: &RoutingConfig) -> Result<RoutingState<T>> {
    cfg.validate(RoutingMethod::Rba)?;
    let (n, m, d) = (votes.n_in(), votes.n_out(), votes.dim());
    let u = votes.votes.data();
    let mut r = uniform_weights::<T>(n, m);
    let mut r_norm = vec![T::zero(); n * m];
    let mut v = vec![T::zero(); m * d];
    for _ in 0..cfg.iterations {
        normalize_rows(&r, &mut r_norm, m, Normalization::Softmax);
        v.iter_mut().for_each(|x| *x = T::zero());
        for i in 0..n {
            for j in 0..m {
                let w = r_norm[i * m + j];
                let uij = &u[(i * m + j) * d..(i * m + j + 1) * d];
                for k in 0..d {
                    v[j * d + k] = v[j * d + k] + w * uij[k];
                }
            }
        }
        for i in 0..n {
            for j in 0..m {
                let uij = &u[(i * m + j) * d..(i * m + j + 1) * d];
                let dot = uij
                    .iter()
                    .zip(&v[j * d..(j + 1) * d])
                    .fold(T::zero(), |s, (&x, &y)| s + x * y);
                r[i * m + j] = r[i * m + j] + dot;
            }
        }
    }
    Ok(RoutingState {
        r: tensor([n, m], r, "rba r")?,
        r_norm: tensor([n, m], r_norm, "rba r_norm")?,
        v: tensor([m, d], v, "rba v")?,
        pi: None,
        sigma: None,
        degenerate: 0,
    })
}

/// Routes one window with `method` and computes the output activations.
pub fn route<T: Scalar>(
    method: RoutingMethod,
    votes: &VoteTensor<T>,
    cfg: &RoutingConfig,
    params: &ActivationParams<T>,
) -> Result<(RoutingState<T>, Tensor<T>)> {
    match method {
        RoutingMethod::Frms => {
            let s = frms_route(votes, cfg)?;
            let a = compute_activation(votes, &s, params, cfg.kernel)?;
            Ok((s, a))
        }
        RoutingMethod::Frem => {
            let s = frem_route(votes, cfg)?;
            let a = compute_activation(votes, &s, params, cfg.kernel)?;
            Ok((s, a))
        }
        RoutingMethod::EmBaseline => em_route_baseline(votes, cfg, params),
        RoutingMethod::Rba => {
            let s = rba_variant_route(votes, cfg)?;
            let a = rba_activation(votes, &s)?;
            Ok((s, a))
        }
    }
}

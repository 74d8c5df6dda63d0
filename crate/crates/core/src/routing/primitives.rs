//! Per-window numeric kernels shared by the plain routing functions and the taped ops.
//!
//! Layouts for a window with `n` inputs, `m` outputs and pose dimension `dim`:
//! votes `[n, m, dim]`, activations `[n]`, routing weights `[n, m]`, centers `[m, dim]`.
//! Both execution paths call these functions, so their results agree bit for bit.

use crate::kernels::Metric;
use crate::scalar::Scalar;
use crate::tensor::softmax_in_place;

/// Denominators with magnitude below this are treated as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Softmax,
    Plain,
}

/// Which weights produced a center in [`weighted_mean`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanBranch {
    Primary,
    Fallback,
    Uniform,
}

/// Normalizes each row of `r` (`[n, m]`) into `out`. Plain rows summing to less than
/// [`DEGENERATE_EPS`] become uniform. Returns how many rows did.
pub fn normalize_rows<T: Scalar>(r: &[T], out: &mut [T], m: usize, mode: Normalization) -> usize {
    out.copy_from_slice(r);
    let mut degenerate = 0;
    for row in out.chunks_exact_mut(m) {
        match mode {
            Normalization::Softmax => softmax_in_place(row),
            Normalization::Plain => {
                let sum = row.iter().fold(T::zero(), |s, &x| s + x);
                if sum.abs() < T::c(DEGENERATE_EPS) {
                    let u = T::one() / T::from_usize(m).unwrap();
                    row.iter_mut().for_each(|x| *x = u);
                    degenerate += 1;
                } else {
                    row.iter_mut().for_each(|x| *x = *x / sum);
                }
            }
        }
    }
    degenerate
}

/// `out[i, j] = Σ_d coord(u_ijd − s_jd·v_jd)`, where `s` defaults to all ones. With no
/// scale this is `metric.eval(u_ij, v_j)`.
pub fn pair_distances<T: Scalar>(
    votes: &[T],
    centers: &[T],
    scale: Option<&[T]>,
    metric: Metric,
    n: usize,
    m: usize,
    dim: usize,
    out: &mut [T],
) {
    for i in 0..n {
        for j in 0..m {
            let u = &votes[(i * m + j) * dim..(i * m + j + 1) * dim];
            let v = &centers[j * dim..(j + 1) * dim];
            out[i * m + j] = match scale {
                None => metric.eval(u, v),
                Some(s) => {
                    let s = &s[j * dim..(j + 1) * dim];
                    let mut acc = T::zero();
                    for d in 0..dim {
                        acc = acc + metric.coord(u[d] - s[d] * v[d]);
                    }
                    acc
                }
            };
        }
    }
}

/// Weighted centers `v_j = Σ_i w_ij u_ij / Σ_i w_ij`.
///
/// When `|Σ_i w_ij|` is degenerate the `fallback` weights are tried, then the plain
/// mean over inputs. Writes one branch tag per output into `branches`.
pub fn weighted_mean<T: Scalar>(
    votes: &[T],
    weights: &[T],
    fallback: Option<&[T]>,
    n: usize,
    m: usize,
    dim: usize,
    out: &mut [T],
    branches: &mut [MeanBranch],
) {
    let eps = T::c(DEGENERATE_EPS);
    let column_sum = |w: &[T], j: usize| (0..n).fold(T::zero(), |s, i| s + w[i * m + j]);
    for j in 0..m {
        let mut den = column_sum(weights, j);
        let mut branch = MeanBranch::Primary;
        if den.abs() < eps {
            branch = MeanBranch::Uniform;
            if let Some(fw) = fallback {
                let fden = column_sum(fw, j);
                if fden.abs() >= eps {
                    den = fden;
                    branch = MeanBranch::Fallback;
                }
            }
        }
        branches[j] = branch;
        let v = &mut out[j * dim..(j + 1) * dim];
        v.iter_mut().for_each(|x| *x = T::zero());
        for i in 0..n {
            let w = match branch {
                MeanBranch::Primary => weights[i * m + j],
                MeanBranch::Fallback => fallback.unwrap()[i * m + j],
                MeanBranch::Uniform => T::one(),
            };
            let u = &votes[(i * m + j) * dim..(i * m + j + 1) * dim];
            for d in 0..dim {
                v[d] = v[d] + w * u[d];
            }
        }
        if branch == MeanBranch::Uniform {
            den = T::from_usize(n).unwrap();
        }
        v.iter_mut().for_each(|x| *x = *x / den);
    }
}

/// Column sums of `[n, m]` weights, accumulated over `i` in ascending order.
pub fn column_sums<T: Scalar>(w: &[T], n: usize, m: usize, out: &mut [T]) {
    out.iter_mut().for_each(|x| *x = T::zero());
    for i in 0..n {
        for j in 0..m {
            out[j] = out[j] + w[i * m + j];
        }
    }
}

/// Log-density of each vote under its output's diagonal Gaussian:
/// `out[i, j] = −½ Σ_d ((u_ijd − v_jd)² / var_jd + ln(2π·var_jd))`.
pub fn diag_gaussian_log_pdf<T: Scalar>(
    votes: &[T],
    centers: &[T],
    var: &[T],
    n: usize,
    m: usize,
    dim: usize,
    out: &mut [T],
) {
    let two_pi = T::c(2.0 * std::f64::consts::PI);
    let half = T::c(0.5);
    for i in 0..n {
        for j in 0..m {
            let u = &votes[(i * m + j) * dim..(i * m + j + 1) * dim];
            let v = &centers[j * dim..(j + 1) * dim];
            let s = &var[j * dim..(j + 1) * dim];
            let mut acc = T::zero();
            for d in 0..dim {
                let e = u[d] - v[d];
                acc = acc + (e * e / s[d] + (two_pi * s[d]).ln());
            }
            out[i * m + j] = -half * acc;
        }
    }
}

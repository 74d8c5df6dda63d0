//! Dynamic routing between capsule layers framed as weighted kernel density estimation.
//!
//! Routing clusters the votes `u_{i|j}` of `n` input capsules into `m` output poses
//! `v_j`, maximizing the weighted mixture density
//!
//! ```text
//! f(v, r) = 1/n · Σ_j Σ_i r_ij · a_i · k(d(v_j − u_{i|j}))   subject to Σ_j r_ij = 1
//! ```
//!
//! Two fast solvers are provided: [`frms_route`] (mean-shift v-update plus a gradient
//! step on `r`) and [`frem_route`] (weighted-mean M-step, mixture-coefficient E-step).
//! [`em_route_baseline`] is the Gaussian-mixture EM routing used as the timing and
//! accuracy reference, and [`rba_variant_route`] is the diagnostic-only
//! routing-by-agreement variant.

mod activation;
mod algorithms;
pub mod primitives;
mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{KernelSpec, Metric};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, Tensor};

pub use activation::{compute_activation, rba_activation};
pub use algorithms::{
    em_route_baseline, frem_route, frem_step2, frms_route, frms_step2, objective, rba_variant_route,
    route,
};
pub use primitives::Normalization;
pub use report::{state_archive, text_report};

/// Flattened pose dimension of a 4×4 matrix capsule.
pub const POSE_DIM: usize = 16;

/// Spatial grid of matrix capsules.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleGrid<T> {
    /// `[h, w, c, 4, 4]`
    pub poses: Tensor<T>,
    /// `[h, w, c]`, each in `[0, 1]`
    pub activations: Tensor<T>,
}

impl<T: Scalar> CapsuleGrid<T> {
    pub fn new(poses: Tensor<T>, activations: Tensor<T>) -> Result<Self> {
        let pd = poses.dims();
        let ad = activations.dims();
        if pd.len() != 5 || pd[3] != 4 || pd[4] != 4 || ad.len() != 3 || pd[..3] != ad[..] {
            return shape_err(
                "CapsuleGrid",
                format!("poses {pd:?} / activations {ad:?} are not [h,w,c,4,4] / [h,w,c]"),
            );
        }
        if activations
            .data()
            .iter()
            .any(|&a| a < T::zero() || a > T::one())
        {
            return Err(Error::Domain("capsule activations must lie in [0, 1]".into()));
        }
        Ok(CapsuleGrid { poses, activations })
    }

    pub fn height(&self) -> usize {
        self.activations.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.activations.dims()[1]
    }

    pub fn capsules(&self) -> usize {
        self.activations.dims()[2]
    }
}

/// Transformed votes `u_{i|j}` of one routing window.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteTensor<T> {
    /// `[n_in, n_out, dim]`
    pub votes: Tensor<T>,
    /// `[n_in]`
    pub activations: Tensor<T>,
}

impl<T: Scalar> VoteTensor<T> {
    pub fn new(votes: Tensor<T>, activations: Tensor<T>) -> Result<Self> {
        let vd = votes.dims();
        if vd.len() != 3 || activations.dims() != [vd[0]] {
            return shape_err(
                "VoteTensor",
                format!("votes {vd:?} / activations {:?}", activations.dims()),
            );
        }
        Ok(VoteTensor { votes, activations })
    }

    pub fn n_in(&self) -> usize {
        self.votes.dims()[0]
    }

    pub fn n_out(&self) -> usize {
        self.votes.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.votes.dims()[2]
    }

    /// The vote of input `i` for output `j`.
    pub fn vote(&self, i: usize, j: usize) -> &[T] {
        let (m, d) = (self.n_out(), self.dim());
        &self.votes.data()[(i * m + j) * d..(i * m + j + 1) * d]
    }
}

/// Result of routing one window.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState<T> {
    /// Raw routing weights after the last update, `[n_in, n_out]`.
    pub r: Tensor<T>,
    /// Weights from the last normalization step; rows sum to one.
    pub r_norm: Tensor<T>,
    /// Output poses `[n_out, dim]`.
    pub v: Tensor<T>,
    /// Mixture coefficients (FREM only).
    pub pi: Option<Tensor<T>>,
    /// Per-dimension variances (EM baseline only).
    pub sigma: Option<Tensor<T>>,
    /// Number of centers that fell back to secondary weights, plus degenerate rows.
    pub degenerate: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMethod {
    Frms,
    Frem,
    #[serde(rename = "em")]
    EmBaseline,
    Rba,
}

impl RoutingMethod {
    /// Whether the method may be used inside a trainable network.
    pub fn trainable(self) -> bool {
        !matches!(self, RoutingMethod::Rba)
    }
}

impl fmt::Display for RoutingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingMethod::Frms => "frms",
            RoutingMethod::Frem => "frem",
            RoutingMethod::EmBaseline => "em",
            RoutingMethod::Rba => "rba",
        })
    }
}

impl FromStr for RoutingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frms" => Ok(RoutingMethod::Frms),
            "frem" => Ok(RoutingMethod::Frem),
            "em" => Ok(RoutingMethod::EmBaseline),
            "rba" => Ok(RoutingMethod::Rba),
            other => Err(Error::InvalidConfig(format!("unknown routing method {other:?}"))),
        }
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Normalization::Softmax),
            "plain" => Ok(Normalization::Plain),
            other => Err(Error::InvalidConfig(format!("unknown normalization {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub iterations: usize,
    pub alpha: f64,
    pub normalization: Normalization,
    pub kernel: KernelSpec,
    pub variance_floor: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            iterations: 2,
            alpha: 1.0,
            normalization: Normalization::Softmax,
            kernel: KernelSpec::default(),
            variance_floor: 1e-4,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self, method: RoutingMethod) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig("alpha must be > 0".into()));
        }
        let cosine = self.kernel.metric == Metric::CosineVariant;
        match method {
            RoutingMethod::Rba if !cosine => Err(Error::InvalidConfig(
                "the routing-by-agreement variant requires the cosine metric".into(),
            )),
            RoutingMethod::Frms | RoutingMethod::Frem | RoutingMethod::EmBaseline if cosine => {
                Err(Error::InvalidConfig(format!(
                    "cosine metric is only valid for the rba variant, not {method}"
                )))
            }
            RoutingMethod::EmBaseline if !(self.variance_floor > 0.0) => Err(
                Error::InvalidConfig("variance_floor must be > 0".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Per-output linear coefficients of the activation: column 0 is the bias `β_0`,
/// columns `1..=dim` the per-dimension scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationParams<T> {
    /// `[n_out, dim + 1]`
    pub beta: Tensor<T>,
}

impl<T: Scalar> ActivationParams<T> {
    /// `β_d = 1`, `β_0 = 0`: the rigid pose/activation connection.
    pub fn identity(n_out: usize, dim: usize) -> Self {
        let beta = Tensor::from_fn([n_out, dim + 1], |k| {
            if k % (dim + 1) == 0 {
                T::zero()
            } else {
                T::one()
            }
        })
        .expect("valid extents");
        ActivationParams { beta }
    }

    pub fn new(beta: Tensor<T>) -> Result<Self> {
        if beta.rank() != 2 || beta.dims()[1] < 2 {
            return shape_err("ActivationParams", format!("{:?}", beta.dims()));
        }
        Ok(ActivationParams { beta })
    }

    /// Splits into `([n_out] bias, [n_out, dim] scale)`.
    pub fn split(&self) -> (Vec<T>, Vec<T>) {
        let cols = self.beta.dims()[1];
        let mut bias = Vec::new();
        let mut scale = Vec::new();
        for row in self.beta.data().chunks_exact(cols) {
            bias.push(row[0]);
            scale.extend_from_slice(&row[1..]);
        }
        (bias, scale)
    }
}

/// Transforms input poses into votes: `votes[i, j] = flatten(W_ij · P_i)`.
///
/// `poses` is `[n_in, 4, 4]`, `activations` `[n_in]`, `transforms` `[n_in, n_out, 4, 4]`.
pub fn compute_votes<T: Scalar>(
    poses: &Tensor<T>,
    activations: &Tensor<T>,
    transforms: &Tensor<T>,
) -> Result<VoteTensor<T>> {
    let pd = poses.dims();
    let td = transforms.dims();
    if pd.len() != 3 || pd[1..] != [4, 4] {
        return shape_err("compute_votes", format!("poses {pd:?} are not [n, 4, 4]"));
    }
    let n = pd[0];
    if td.len() != 4 || td[0] != n || td[2..] != [4, 4] {
        return shape_err(
            "compute_votes",
            format!("transforms {td:?} do not match {n} input poses"),
        );
    }
    if activations.dims() != [n] {
        return shape_err("compute_votes", format!("activations {:?}", activations.dims()));
    }
    let m = td[1];
    let mut votes = vec![T::zero(); n * m * POSE_DIM];
    vote_transform_into(poses.data(), transforms.data(), 1, n, m, &mut votes);
    let votes = Tensor::new([n, m, POSE_DIM], votes)?;
    VoteTensor::new(votes, activations.clone())
}

/// Batched vote transform over `windows` windows sharing one set of transforms.
/// `poses`: `[windows, n, 16]`, `transforms`: `[n, m, 16]`, `out`: `[windows, n, m, 16]`.
pub(crate) fn vote_transform_into<T: Scalar>(
    poses: &[T],
    transforms: &[T],
    windows: usize,
    n: usize,
    m: usize,
    out: &mut [T],
) {
    for w in 0..windows {
        for i in 0..n {
            let p = &poses[(w * n + i) * POSE_DIM..(w * n + i + 1) * POSE_DIM];
            for j in 0..m {
                let t = &transforms[(i * m + j) * POSE_DIM..(i * m + j + 1) * POSE_DIM];
                let o = &mut out[((w * n + i) * m + j) * POSE_DIM..((w * n + i) * m + j + 1) * POSE_DIM];
                matmul_into(t, p, o, 4, 4, 4);
            }
        }
    }
}

#[cfg(test)]
mod tests;

//! Routing recorded on a tape, batched over independent windows.
//!
//! Every step performs the same arithmetic, in the same order, as the plain solvers
//! in [`crate::routing`], so each window's outputs match them bit for bit.

use crate::error::{shape_err, Error, Result};
use crate::routing::{RoutingConfig, RoutingMethod};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Outputs of routing `windows` windows on a tape.
#[derive(Debug, Clone, Copy)]
pub struct RoutedWindows {
    /// `[windows, m, dim]`
    pub poses: Var,
    /// `[windows, m]`
    pub activations: Var,
    /// `[windows, n, m]`, the weights from the last normalization.
    pub r_norm: Var,
}

/// Routes votes `[windows, n, m, dim]` with input activations `[windows, n]` and
/// activation coefficients `beta` (`[m, dim + 1]`).
pub fn route_windows<T: Scalar>(
    tape: &mut Tape<T>,
    method: RoutingMethod,
    votes: Var,
    activations: Var,
    beta: Var,
    cfg: &RoutingConfig,
) -> Result<RoutedWindows> {
    if !method.trainable() {
        return Err(Error::UnsupportedOp(format!("{method} routing cannot be recorded on a tape")));
    }
    cfg.validate(method)?;
    let vd = tape.dims(votes).to_vec();
    if vd.len() != 4 || tape.dims(activations) != [vd[0], vd[1]] || tape.dims(beta) != [vd[2], vd[3] + 1] {
        return shape_err(
            "route_windows",
            format!(
                "votes {vd:?}, activations {:?}, beta {:?}",
                tape.dims(activations),
                tape.dims(beta)
            ),
        );
    }
    let (wn, n, m) = (vd[0], vd[1], vd[2]);
    let a = tape.expand(activations, 2, m)?;
    let uniform = tape.constant(Tensor::full(
        [wn, n, m],
        T::one() / T::from_usize(m).unwrap(),
    )?);
    let (v, r_norm) = match method {
        RoutingMethod::Frms => frms(tape, votes, a, uniform, cfg)?,
        RoutingMethod::Frem => frem(tape, votes, a, uniform, cfg)?,
        RoutingMethod::EmBaseline => {
            let (v, r_norm, act) = em(tape, votes, a, uniform, beta, cfg)?;
            return Ok(RoutedWindows {
                poses: v,
                activations: act,
                r_norm,
            });
        }
        RoutingMethod::Rba => unreachable!("rejected above"),
    };
    let act = activation(tape, votes, r_norm, a, v, beta, cfg)?;
    Ok(RoutedWindows {
        poses: v,
        activations: act,
        r_norm,
    })
}

fn frms<T: Scalar>(tape: &mut Tape<T>, u: Var, a: Var, mut r: Var, cfg: &RoutingConfig) -> Result<(Var, Var)> {
    let kernel = cfg.kernel;
    let mut state = None;
    for t in 0..cfg.iterations {
        let rn = tape.normalize_rows(r, cfg.normalization);
        let base = tape.mul(rn, a)?;
        let v = match state {
            None => tape.weighted_mean(u, base, None)?,
            Some((v_prev, _)) => {
                let dist = tape.pair_distance(u, v_prev, None, kernel.metric)?;
                let kp = tape.profile_deriv(dist, kernel.profile);
                let w = tape.mul(base, kp)?;
                tape.weighted_mean(u, w, Some(base))?
            }
        };
        state = Some((v, rn));
        // The last update of r feeds nothing downstream.
        if t + 1 < cfg.iterations {
            let dist = tape.pair_distance(u, v, None, kernel.metric)?;
            let k = tape.profile(dist, kernel.profile);
            let step = tape.mul(a, k)?;
            let step = tape.scale(step, T::c(cfg.alpha));
            r = tape.add(r, step)?;
        }
    }
    Ok(state.expect("at least one iteration"))
}

fn frem<T: Scalar>(tape: &mut Tape<T>, u: Var, a: Var, mut r: Var, cfg: &RoutingConfig) -> Result<(Var, Var)> {
    let n = tape.dims(u)[1];
    let m = tape.dims(u)[2];
    let mut state = None;
    for t in 0..cfg.iterations {
        let rn = tape.normalize_rows(r, cfg.normalization);
        let w = tape.mul(rn, a)?;
        let v = tape.weighted_mean(u, w, None)?;
        state = Some((v, rn));
        if t + 1 < cfg.iterations {
            let col = tape.sum(rn, 1)?;
            let total = tape.sum(col, 1)?;
            let total = tape.expand(total, 1, m)?;
            let pi = tape.div(col, total)?;
            let pi = tape.expand(pi, 1, n)?;
            let dist = tape.pair_distance(u, v, None, cfg.kernel.metric)?;
            let k = tape.profile(dist, cfg.kernel.profile);
            r = tape.mul(pi, k)?;
        }
    }
    Ok(state.expect("at least one iteration"))
}

fn em<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    a: Var,
    uniform: Var,
    beta: Var,
    cfg: &RoutingConfig,
) -> Result<(Var, Var, Var)> {
    let n = tape.dims(u)[1];
    let mut rn = uniform;
    let mut out = None;
    for t in 0..cfg.iterations {
        let w = tape.mul(rn, a)?;
        let v = tape.weighted_mean(u, w, None)?;
        let ve = tape.expand(v, 1, n)?;
        let dev = tape.sub(u, ve)?;
        let dev2 = tape.square(dev);
        let var = tape.weighted_mean(dev2, w, None)?;
        let var = tape.clamp_min(var, T::c(cfg.variance_floor));
        let act = activation(tape, u, rn, a, v, beta, cfg)?;
        out = Some((v, rn, act));
        if t + 1 < cfg.iterations {
            let logp = tape.diag_gaussian_log_pdf(u, v, var)?;
            let la = tape.log(act);
            let la = tape.expand(la, 1, n)?;
            let logits = tape.add(la, logp)?;
            rn = tape.softmax_last(logits);
        }
    }
    Ok(out.expect("at least one iteration"))
}

/// `softmax_j(Σ_i r'_ij a_i k(max(0, Σ_d d(u_ijd − β_jd v_jd) + β_j0)))` per window.
fn activation<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    r_norm: Var,
    a: Var,
    v: Var,
    beta: Var,
    cfg: &RoutingConfig,
) -> Result<Var> {
    let [wn, n, m, d] = <[usize; 4]>::try_from(tape.dims(u)).expect("checked rank");
    let bias = tape.narrow(beta, 1, 0, 1)?;
    let bias = tape.reshape(bias, vec![m])?;
    let bias = tape.expand(bias, 0, n)?;
    let bias = tape.expand(bias, 0, wn)?;
    let scale = tape.narrow(beta, 1, 1, d)?;
    let dist = tape.pair_distance(u, v, Some(scale), cfg.kernel.metric)?;
    let x = tape.add(dist, bias)?;
    let x = tape.clamp_min(x, T::zero());
    let k = tape.profile(x, cfg.kernel.profile);
    let w = tape.mul(r_norm, a)?;
    let contrib = tape.mul(w, k)?;
    let logits = tape.sum(contrib, 1)?;
    Ok(tape.softmax_last(logits))
}

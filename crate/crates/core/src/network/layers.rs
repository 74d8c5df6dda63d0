use crate::autograd::routing::route_windows;
use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::routing::{CapsuleGrid, RoutingConfig, RoutingMethod, POSE_DIM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Capsules on a tape: poses `[h, w, c, 16]`, activations `[h, w, c]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Caps {
    pub poses: Var,
    pub acts: Var,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Flow {
    Features(Var),
    Capsules(Caps),
    Vector(Var),
}

fn grid_dims<T: Scalar>(tape: &Tape<T>, g: Caps) -> [usize; 3] {
    let d = tape.dims(g.poses);
    [d[0], d[1], d[2]]
}

pub(crate) fn primary_on_tape<T: Scalar>(tape: &mut Tape<T>, f: Var, w: Var, b: Var, capsules: usize) -> Result<Caps> {
    let d = tape.dims(f).to_vec();
    if d.len() != 3 || d[2] != (POSE_DIM + 1) * capsules {
        return shape_err(
            "primary_caps",
            format!("features {d:?} for {capsules} capsules"),
        );
    }
    let (h, wd) = (d[0], d[1]);
    let poses = tape.narrow(f, 2, 0, POSE_DIM * capsules)?;
    let poses = tape.reshape(poses, vec![h, wd, capsules, POSE_DIM])?;
    let logits = tape.narrow(f, 2, POSE_DIM * capsules, capsules)?;
    let logits = tape.conv2d(logits, w, b)?;
    let acts = tape.sigmoid(logits);
    Ok(Caps { poses, acts })
}

pub(crate) fn route_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    g: Caps,
    transforms: Var,
    beta: Var,
    window: usize,
    method: RoutingMethod,
    cfg: &RoutingConfig,
) -> Result<Caps> {
    let [h, w, c] = grid_dims(tape, g);
    let td = tape.dims(transforms).to_vec();
    let n = window * window * c;
    if window == 0 || h % window != 0 || w % window != 0 || td.len() != 4 || td[0] != n || td[2..] != [4, 4] {
        return shape_err(
            "capsule_layer_forward",
            format!("grid {h}x{w}x{c}, window {window}, transforms {td:?}"),
        );
    }
    let (hs, ws, m) = (h / window, w / window, td[1]);
    let t = tape.reshape(transforms, vec![n, m, POSE_DIM])?;
    // Gather each window's capsules in (row, column, capsule) order.
    let p = tape.reshape(g.poses, vec![hs, window, ws, window, c, POSE_DIM])?;
    let p = tape.permute(p, &[0, 2, 1, 3, 4, 5])?;
    let p = tape.reshape(p, vec![hs * ws, n, POSE_DIM])?;
    let a = tape.reshape(g.acts, vec![hs, window, ws, window, c])?;
    let a = tape.permute(a, &[0, 2, 1, 3, 4])?;
    let a = tape.reshape(a, vec![hs * ws, n])?;
    let votes = tape.vote_transform(p, t)?;
    let out = route_windows(tape, method, votes, a, beta, cfg)?;
    Ok(Caps {
        poses: tape.reshape(out.poses, vec![hs, ws, m, POSE_DIM])?,
        acts: tape.reshape(out.activations, vec![hs, ws, m])?,
    })
}

pub(crate) fn residual_on_tape<T: Scalar>(tape: &mut Tape<T>, g: Caps, w: Var, b: Var) -> Result<Caps> {
    let [h, wd, c] = grid_dims(tape, g);
    let x = tape.reshape(g.poses, vec![h, wd, c * POSE_DIM])?;
    let y = tape.conv2d(x, w, b)?;
    if tape.dims(y) != tape.dims(x) {
        return shape_err(
            "residual_block_forward",
            format!("block maps {:?} to {:?}", tape.dims(x), tape.dims(y)),
        );
    }
    let s = tape.add(x, y)?;
    let s = tape.relu(s);
    Ok(Caps {
        poses: tape.reshape(s, vec![h, wd, c, POSE_DIM])?,
        acts: g.acts,
    })
}

/// Returns class poses `[k, 16]` and activations `[k]`.
pub(crate) fn global_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    g: Caps,
    transforms: Var,
    beta: Var,
    method: RoutingMethod,
    cfg: &RoutingConfig,
) -> Result<(Var, Var)> {
    let [h, w, c] = grid_dims(tape, g);
    let n = h * w * c;
    let td = tape.dims(transforms).to_vec();
    if td.len() != 4 || td[0] != n || td[2..] != [4, 4] {
        return shape_err(
            "global_caps_route",
            format!("grid {h}x{w}x{c}, transforms {td:?}"),
        );
    }
    let k = td[1];
    let t = tape.reshape(transforms, vec![n, k, POSE_DIM])?;
    let p = tape.reshape(g.poses, vec![1, n, POSE_DIM])?;
    let a = tape.reshape(g.acts, vec![1, n])?;
    let votes = tape.vote_transform(p, t)?;
    let out = route_windows(tape, method, votes, a, beta, cfg)?;
    Ok((
        tape.reshape(out.poses, vec![k, POSE_DIM])?,
        tape.reshape(out.activations, vec![k])?,
    ))
}

fn grid_to_tape<T: Scalar>(tape: &mut Tape<T>, grid: &CapsuleGrid<T>) -> Result<Caps> {
    let [h, w, c] = [grid.height(), grid.width(), grid.capsules()];
    let poses = tape.constant(grid.poses.clone().reshape([h, w, c, POSE_DIM])?);
    let acts = tape.constant(grid.activations.clone());
    Ok(Caps { poses, acts })
}

fn grid_from_tape<T: Scalar>(tape: &Tape<T>, g: Caps) -> Result<CapsuleGrid<T>> {
    let [h, w, c] = grid_dims(tape, g);
    let poses = tape.value(g.poses).clone().reshape([h, w, c, 4, 4])?;
    CapsuleGrid::new(poses, tape.value(g.acts).clone())
}

/// Stride-1, same-padded cross-correlation of `[h, w, c_in]` with kernels
/// `[kh, kw, c_in, c_out]` (odd extents) plus a bias `[c_out]`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (x, w, b) = (
        tape.constant(input.clone()),
        tape.constant(kernels.clone()),
        tape.constant(bias.clone()),
    );
    let y = tape.conv2d(x, w, b)?;
    Ok(tape.value(y).clone())
}

/// 2×2, stride-2 max pooling of `[h, w, c]`.
pub fn max_pool2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = tape.max_pool2(x)?;
    Ok(tape.value(y).clone())
}

/// Splits `[h, w, 17·c]` features into `c` capsules per position. The last `c`
/// channels go through a 1×1 convolution (`weight [1, 1, c, c]`, `bias [c]`) and a
/// logistic to give the activations.
pub fn primary_caps<T: Scalar>(
    features: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    capsules: usize,
) -> Result<CapsuleGrid<T>> {
    let mut tape = Tape::new();
    let (f, w, b) = (
        tape.constant(features.clone()),
        tape.constant(weight.clone()),
        tape.constant(bias.clone()),
    );
    let g = primary_on_tape(&mut tape, f, w, b, capsules)?;
    grid_from_tape(&tape, g)
}

/// Routes each non-overlapping `window × window` field of `grid` to
/// `transforms.dims()[1]` output capsules. `transforms` is
/// `[window²·c_in, c_out, 4, 4]`, shared by every window; `beta` is `[c_out, 17]`.
pub fn capsule_layer_forward<T: Scalar>(
    grid: &CapsuleGrid<T>,
    transforms: &Tensor<T>,
    beta: &Tensor<T>,
    window: usize,
    method: RoutingMethod,
    cfg: &RoutingConfig,
) -> Result<CapsuleGrid<T>> {
    let mut tape = Tape::new();
    let g = grid_to_tape(&mut tape, grid)?;
    let (t, b) = (tape.constant(transforms.clone()), tape.constant(beta.clone()));
    let out = route_on_tape(&mut tape, g, t, b, window, method, cfg)?;
    grid_from_tape(&tape, out)
}

/// `pose' = relu(pose + conv(pose))` with the poses viewed as `[h, w, 16·c]`
/// channels; activations pass through unchanged.
pub fn residual_block_forward<T: Scalar>(
    grid: &CapsuleGrid<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<CapsuleGrid<T>> {
    let mut tape = Tape::new();
    let g = grid_to_tape(&mut tape, grid)?;
    let (w, b) = (tape.constant(weight.clone()), tape.constant(bias.clone()));
    let out = residual_on_tape(&mut tape, g, w, b)?;
    grid_from_tape(&tape, out)
}

/// Routes all `h·w·c` capsules of `grid` to `k` class capsules in a single window.
/// `transforms` is `[h·w·c, k, 4, 4]`. Returns poses `[k, 16]` and activations `[k]`.
pub fn global_caps_route<T: Scalar>(
    grid: &CapsuleGrid<T>,
    transforms: &Tensor<T>,
    beta: &Tensor<T>,
    method: RoutingMethod,
    cfg: &RoutingConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let g = grid_to_tape(&mut tape, grid)?;
    let (t, b) = (tape.constant(transforms.clone()), tape.constant(beta.clone()));
    let (poses, acts) = global_on_tape(&mut tape, g, t, b, method, cfg)?;
    Ok((tape.value(poses).clone(), tape.value(acts).clone()))
}

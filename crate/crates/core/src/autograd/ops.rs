use crate::error::{shape_err, Error, Result};
use crate::kernels::{Metric, Profile};
use crate::routing::primitives::{
    diag_gaussian_log_pdf, normalize_rows, pair_distances, weighted_mean, MeanBranch,
    Normalization,
};
use crate::routing::{vote_transform_into, POSE_DIM};
use crate::scalar::Scalar;
use crate::tensor::{invert_perm, matmul_into, permute_data, softmax_in_place, Shape, Tensor};

use super::{Tape, Var};

/// Registered differentiable operations.
pub(crate) enum Op<T> {
    Param,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(T),
    AddScalar(T),
    Abs,
    Square,
    Exp,
    Log,
    Sigmoid,
    ClampMin(T),
    Profile(Profile),
    ProfileDeriv(Profile),
    Sum { axis: usize },
    Expand { axis: usize, n: usize },
    Reshape,
    Permute(Vec<usize>),
    Narrow { axis: usize, start: usize },
    SoftmaxLast,
    Matmul,
    Conv2d,
    MaxPool2 { argmax: Vec<usize> },
    GlobalAvgPool,
    SpreadLoss { target: usize, margin: T },
    MarginLoss { target: usize, m_plus: T, m_minus: T, lambda: T },
    VoteTransform,
    PairDistance { metric: Metric },
    WeightedMean { branches: Vec<MeanBranch> },
    NormalizeRows { mode: Normalization, degenerate: Vec<bool> },
    DiagGaussianLogPdf,
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::ClampMin(_) => "clamp_min",
            Op::Profile(_) => "profile",
            Op::ProfileDeriv(_) => "profile_deriv",
            Op::Sum { .. } => "sum",
            Op::Expand { .. } => "expand",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Narrow { .. } => "narrow",
            Op::SoftmaxLast => "softmax",
            Op::Matmul => "matmul",
            Op::Conv2d => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::SpreadLoss { .. } => "spread_loss",
            Op::MarginLoss { .. } => "margin_loss",
            Op::VoteTransform => "vote_transform",
            Op::PairDistance { .. } => "pair_distance",
            Op::WeightedMean { .. } => "weighted_mean",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::DiagGaussianLogPdf => "diag_gaussian_log_pdf",
        }
    }
}

fn tensor<T: Scalar>(dims: Vec<usize>, data: Vec<T>) -> Tensor<T> {
    Tensor::from_parts(Shape(dims), data)
}

fn sign<T: Scalar>(x: T) -> T {
    Metric::L1.coord_grad(x)
}

fn conv_pad(k: usize) -> isize {
    (k as isize - 1) / 2
}

/// Cross-correlation with same padding; `x` is `[h, w, ci]`, `wt` `[kh, kw, ci, co]`.
fn conv2d_data<T: Scalar>(x: &[T], dims: [usize; 3], wt: &[T], kdims: [usize; 4], bias: &[T]) -> Vec<T> {
    let [h, w, ci] = dims;
    let [kh, kw, _, co] = kdims;
    let (ph, pw) = (conv_pad(kh), conv_pad(kw));
    let mut out = vec![T::zero(); h * w * co];
    for y in 0..h {
        for xx in 0..w {
            let acc = &mut out[(y * w + xx) * co..(y * w + xx + 1) * co];
            acc.copy_from_slice(bias);
            for dy in 0..kh {
                let sy = y as isize + dy as isize - ph;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let sx = xx as isize + dx as isize - pw;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = &x[(sy as usize * w + sx as usize) * ci..][..ci];
                    for (c, &xv) in src.iter().enumerate() {
                        let wrow = &wt[((dy * kw + dx) * ci + c) * co..][..co];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a = *a + xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::from_parts(x.shape().clone(), data);
        Ok(self.push_node(value, op, vec![a.0, b.0]))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let x = self.value(a);
        let value = Tensor::from_parts(x.shape().clone(), x.data().iter().map(|&p| f(p)).collect());
        self.push_node(value, op, vec![a.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div, |p, q| p / q)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg, |p| -p)
    }

    /// `c · a`
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(c), |p| c * p)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddScalar(c), |p| p + c)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs, |p| p.abs())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square, |p| p * p)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp, |p| p.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log, |p| p.ln())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid, |p| T::one() / (T::one() + (-p).exp()))
    }

    /// `max(a, c)`; the gradient at `a == c` is zero.
    pub fn clamp_min(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::ClampMin(c), |p| p.max(c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.clamp_min(a, T::zero())
    }

    pub fn profile(&mut self, a: Var, p: Profile) -> Var {
        self.unary(a, Op::Profile(p), |x| p.k(x))
    }

    pub fn profile_deriv(&mut self, a: Var, p: Profile) -> Var {
        self.unary(a, Op::ProfileDeriv(p), |x| p.k_prime(x))
    }

    /// Sums along `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return shape_err("sum", format!("axis {axis} for {:?}", x.dims()));
        }
        let value = x.sum_axis(axis);
        Ok(self.push_node(value, Op::Sum { axis }, vec![a.0]))
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, vec![n])?;
        self.sum(flat, 0)
    }

    /// Inserts a new axis of extent `n` at position `axis`, repeating the input.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let x = self.value(a);
        if axis > x.rank() || n == 0 {
            return shape_err("expand", format!("axis {axis} / extent {n} for {:?}", x.dims()));
        }
        let outer: usize = x.dims()[..axis].iter().product();
        let inner: usize = x.dims()[axis..].iter().product();
        let mut data = Vec::with_capacity(x.len() * n);
        for o in 0..outer {
            let src = &x.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(src);
            }
        }
        let mut dims = x.dims().to_vec();
        dims.insert(axis, n);
        Ok(self.push_node(tensor(dims, data), Op::Expand { axis, n }, vec![a.0]))
    }

    pub fn reshape(&mut self, a: Var, dims: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(dims)?;
        Ok(self.push_node(value, Op::Reshape, vec![a.0]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(perm)?;
        Ok(self.push_node(value, Op::Permute(perm.to_vec()), vec![a.0]))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() || len == 0 || start + len > x.dims()[axis] {
            return shape_err("narrow", format!("{start}+{len} on axis {axis} of {:?}", x.dims()));
        }
        let (outer, full, inner) = x.shape().split_at_axis(axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut dims = x.dims().to_vec();
        dims[axis] = len;
        Ok(self.push_node(tensor(dims, data), Op::Narrow { axis, start }, vec![a.0]))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = *x.dims().last().unwrap();
        let mut data = x.data().to_vec();
        data.chunks_exact_mut(m).for_each(softmax_in_place);
        let value = Tensor::from_parts(x.shape().clone(), data);
        self.push_node(value, Op::SoftmaxLast, vec![a.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != 2 || y.rank() != 2 || x.dims()[1] != y.dims()[0] {
            return shape_err("matmul", format!("{:?} x {:?}", x.dims(), y.dims()));
        }
        let (m, k, n) = (x.dims()[0], x.dims()[1], y.dims()[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(x.data(), y.data(), &mut out, m, k, n);
        Ok(self.push_node(tensor(vec![m, n], out), Op::Matmul, vec![a.0, b.0]))
    }

    /// Stride-1 same-padded cross-correlation: `x` `[h, w, ci]`, `w` `[kh, kw, ci, co]`
    /// with odd kernel extents, `b` `[co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (xd, wd) = (xv.dims(), wv.dims());
        if xd.len() != 3
            || wd.len() != 4
            || wd[2] != xd[2]
            || wd[0] % 2 == 0
            || wd[1] % 2 == 0
            || bv.dims() != [wd[3]]
        {
            return shape_err(
                "conv2d",
                format!("input {xd:?}, kernel {wd:?}, bias {:?}", bv.dims()),
            );
        }
        let out = conv2d_data(
            xv.data(),
            [xd[0], xd[1], xd[2]],
            wv.data(),
            [wd[0], wd[1], wd[2], wd[3]],
            bv.data(),
        );
        let dims = vec![xd[0], xd[1], wd[3]];
        Ok(self.push_node(tensor(dims, out), Op::Conv2d, vec![x.0, w.0, b.0]))
    }

    /// 2×2 stride-2 max pooling of `[h, w, c]` with even extents.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.dims();
        if d.len() != 3 || d[0] % 2 != 0 || d[1] % 2 != 0 {
            return shape_err("max_pool2", format!("{d:?} is not [even, even, c]"));
        }
        let (h, w, c) = (d[0], d[1], d[2]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(ho * wo * c);
        let mut argmax = Vec::with_capacity(ho * wo * c);
        for y in 0..ho {
            for xx in 0..wo {
                for ch in 0..c {
                    let mut best = (2 * y * w + 2 * xx) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let k = ((2 * y + dy) * w + 2 * xx + dx) * c + ch;
                        if xv.data()[k] > xv.data()[best] {
                            best = k;
                        }
                    }
                    out.push(xv.data()[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push_node(tensor(vec![ho, wo, c], out), Op::MaxPool2 { argmax }, vec![x.0]))
    }

    /// Mean over the spatial extents of `[h, w, c]`, giving `[c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.dims();
        if d.len() != 3 {
            return shape_err("global_avg_pool", format!("{d:?} is not [h, w, c]"));
        }
        let (hw, c) = (d[0] * d[1], d[2]);
        let mut out = vec![T::zero(); c];
        for p in 0..hw {
            for ch in 0..c {
                out[ch] = out[ch] + xv.data()[p * c + ch];
            }
        }
        let n = T::from_usize(hw).unwrap();
        out.iter_mut().for_each(|x| *x = *x / n);
        Ok(self.push_node(tensor(vec![c], out), Op::GlobalAvgPool, vec![x.0]))
    }

    fn loss_input(&self, a: Var, target: usize) -> Result<usize> {
        let d = self.dims(a);
        if d.len() != 1 {
            return shape_err("loss", format!("activations {d:?} are not rank 1"));
        }
        if target >= d[0] {
            return Err(Error::TargetOutOfRange {
                target,
                classes: d[0],
            });
        }
        Ok(d[0])
    }

    /// `Σ_{i≠t} max(0, m − (a_t − a_i))²`
    pub fn spread_loss(&mut self, a: Var, target: usize, margin: T) -> Result<Var> {
        self.loss_input(a, target)?;
        let x = self.value(a).data();
        let at = x[target];
        let mut loss = T::zero();
        for (i, &ai) in x.iter().enumerate() {
            if i != target {
                let h = (margin - (at - ai)).max(T::zero());
                loss = loss + h * h;
            }
        }
        Ok(self.push_node(tensor(vec![1], vec![loss]), Op::SpreadLoss { target, margin }, vec![a.0]))
    }

    /// `max(0, m⁺ − a_t)² + λ Σ_{i≠t} max(0, a_i − m⁻)²`
    pub fn margin_loss(&mut self, a: Var, target: usize, m_plus: T, m_minus: T, lambda: T) -> Result<Var> {
        self.loss_input(a, target)?;
        let x = self.value(a).data();
        let hp = (m_plus - x[target]).max(T::zero());
        let mut neg = T::zero();
        for (i, &ai) in x.iter().enumerate() {
            if i != target {
                let h = (ai - m_minus).max(T::zero());
                neg = neg + h * h;
            }
        }
        let loss = hp * hp + lambda * neg;
        let op = Op::MarginLoss {
            target,
            m_plus,
            m_minus,
            lambda,
        };
        Ok(self.push_node(tensor(vec![1], vec![loss]), op, vec![a.0]))
    }

    /// Votes `[windows, n, m, 16]` from poses `[windows, n, 16]` and transforms shared
    /// across windows, `[n, m, 16]`.
    pub fn vote_transform(&mut self, poses: Var, transforms: Var) -> Result<Var> {
        let (p, t) = (self.value(poses), self.value(transforms));
        let (pd, td) = (p.dims(), t.dims());
        if pd.len() != 3 || td.len() != 3 || pd[2] != POSE_DIM || td[2] != POSE_DIM || pd[1] != td[0] {
            return shape_err("vote_transform", format!("poses {pd:?}, transforms {td:?}"));
        }
        let (w, n, m) = (pd[0], pd[1], td[1]);
        let mut out = vec![T::zero(); w * n * m * POSE_DIM];
        vote_transform_into(p.data(), t.data(), w, n, m, &mut out);
        let dims = vec![w, n, m, POSE_DIM];
        Ok(self.push_node(tensor(dims, out), Op::VoteTransform, vec![poses.0, transforms.0]))
    }

    /// `[windows, n, m]` distances between votes `[windows, n, m, d]` and centers
    /// `[windows, m, d]`, optionally with centers scaled per output by `[m, d]`.
    pub fn pair_distance(&mut self, votes: Var, centers: Var, scale: Option<Var>, metric: Metric) -> Result<Var> {
        if metric == Metric::CosineVariant {
            return Err(Error::UnsupportedOp(
                "the cosine metric is not differentiable on the tape".into(),
            ));
        }
        let (u, v) = (self.value(votes), self.value(centers));
        let [wn, n, m, d] = window_dims(u.dims(), "pair_distance")?;
        if v.dims() != [wn, m, d] {
            return shape_err("pair_distance", format!("centers {:?} for votes {:?}", v.dims(), u.dims()));
        }
        let s = match scale {
            Some(s) => {
                let sv = self.value(s);
                if sv.dims() != [m, d] {
                    return shape_err("pair_distance", format!("scale {:?}", sv.dims()));
                }
                Some(sv.data())
            }
            None => None,
        };
        let mut out = vec![T::zero(); wn * n * m];
        for w in 0..wn {
            pair_distances(
                &u.data()[w * n * m * d..(w + 1) * n * m * d],
                &v.data()[w * m * d..(w + 1) * m * d],
                s,
                metric,
                n,
                m,
                d,
                &mut out[w * n * m..(w + 1) * n * m],
            );
        }
        let mut inputs = vec![votes.0, centers.0];
        inputs.extend(scale.map(|s| s.0));
        Ok(self.push_node(tensor(vec![wn, n, m], out), Op::PairDistance { metric }, inputs))
    }

    /// Weighted centers `[windows, m, d]` of votes `[windows, n, m, d]` under weights
    /// `[windows, n, m]`, with the degenerate-denominator fallbacks.
    pub fn weighted_mean(&mut self, votes: Var, weights: Var, fallback: Option<Var>) -> Result<Var> {
        let u = self.value(votes);
        let [wn, n, m, d] = window_dims(u.dims(), "weighted_mean")?;
        let wv = self.value(weights);
        if wv.dims() != [wn, n, m] {
            return shape_err("weighted_mean", format!("weights {:?}", wv.dims()));
        }
        let fb = match fallback {
            Some(f) => {
                self.same_shape(weights, f, "weighted_mean")?;
                Some(self.value(f).data())
            }
            None => None,
        };
        let mut out = vec![T::zero(); wn * m * d];
        let mut branches = vec![MeanBranch::Primary; wn * m];
        for w in 0..wn {
            let r = w * n * m..(w + 1) * n * m;
            weighted_mean(
                &u.data()[w * n * m * d..(w + 1) * n * m * d],
                &wv.data()[r.clone()],
                fb.map(|f| &f[r]),
                n,
                m,
                d,
                &mut out[w * m * d..(w + 1) * m * d],
                &mut branches[w * m..(w + 1) * m],
            );
        }
        let fallbacks = branches.iter().filter(|&&b| b != MeanBranch::Primary).count();
        self.add_degenerate(fallbacks);
        let mut inputs = vec![votes.0, weights.0];
        inputs.extend(fallback.map(|f| f.0));
        Ok(self.push_node(tensor(vec![wn, m, d], out), Op::WeightedMean { branches }, inputs))
    }

    /// Row normalization over the last axis.
    pub fn normalize_rows(&mut self, r: Var, mode: Normalization) -> Var {
        let x = self.value(r);
        let m = *x.dims().last().unwrap();
        let mut out = vec![T::zero(); x.len()];
        let mut degenerate = vec![false; x.len() / m];
        for (k, (src, dst)) in x.data().chunks_exact(m).zip(out.chunks_exact_mut(m)).enumerate() {
            degenerate[k] = normalize_rows(src, dst, m, mode) > 0;
        }
        let count = degenerate.iter().filter(|&&d| d).count();
        let value = Tensor::from_parts(x.shape().clone(), out);
        self.add_degenerate(count);
        self.push_node(value, Op::NormalizeRows { mode, degenerate }, vec![r.0])
    }

    /// Diagonal-Gaussian log-density `[windows, n, m]` of votes `[windows, n, m, d]`
    /// under centers and variances `[windows, m, d]`.
    pub fn diag_gaussian_log_pdf(&mut self, votes: Var, centers: Var, var: Var) -> Result<Var> {
        let u = self.value(votes);
        let [wn, n, m, d] = window_dims(u.dims(), "diag_gaussian_log_pdf")?;
        self.same_shape(centers, var, "diag_gaussian_log_pdf")?;
        let (v, s) = (self.value(centers), self.value(var));
        if v.dims() != [wn, m, d] {
            return shape_err("diag_gaussian_log_pdf", format!("centers {:?}", v.dims()));
        }
        let mut out = vec![T::zero(); wn * n * m];
        for w in 0..wn {
            diag_gaussian_log_pdf(
                &u.data()[w * n * m * d..(w + 1) * n * m * d],
                &v.data()[w * m * d..(w + 1) * m * d],
                &s.data()[w * m * d..(w + 1) * m * d],
                n,
                m,
                d,
                &mut out[w * n * m..(w + 1) * n * m],
            );
        }
        Ok(self.push_node(
            tensor(vec![wn, n, m], out),
            Op::DiagGaussianLogPdf,
            vec![votes.0, centers.0, var.0],
        ))
    }

    /// Gradient contributions of node `k` for each of its inputs, given its output
    /// gradient `g`. Inputs that need no gradient get `None`.
    pub(crate) fn backward_node(&self, k: usize, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let n_inputs = self.input_count(k);
        let need: Vec<bool> = (0..n_inputs).map(|s| self.input_needs_grad(k, s)).collect();
        let x0 = || self.input_value(k, 0).data();
        let x1 = || self.input_value(k, 1).data();
        let y = || self.node_value(k).data();
        let zip = |a: &[T], f: &dyn Fn(T, T) -> T| -> Vec<T> { g.iter().zip(a).map(|(&gi, &ai)| f(gi, ai)).collect() };

        let mut out: Vec<Option<Vec<T>>> = vec![None; n_inputs];
        match self.op(k) {
            Op::Param | Op::Constant => {}
            Op::Add => {
                out[0] = need[0].then(|| g.to_vec());
                out[1] = need[1].then(|| g.to_vec());
            }
            Op::Sub => {
                out[0] = need[0].then(|| g.to_vec());
                out[1] = need[1].then(|| g.iter().map(|&x| -x).collect());
            }
            Op::Mul => {
                out[0] = need[0].then(|| zip(x1(), &|g, b| g * b));
                out[1] = need[1].then(|| zip(x0(), &|g, a| g * a));
            }
            Op::Div => {
                out[0] = need[0].then(|| zip(x1(), &|g, b| g / b));
                if need[1] {
                    let (a, b) = (x0(), x1());
                    out[1] = Some((0..g.len()).map(|i| -g[i] * a[i] / (b[i] * b[i])).collect());
                }
            }
            Op::Neg => out[0] = Some(g.iter().map(|&x| -x).collect()),
            Op::Scale(c) => out[0] = Some(g.iter().map(|&x| *c * x).collect()),
            Op::AddScalar(_) => out[0] = Some(g.to_vec()),
            Op::Abs => out[0] = Some(zip(x0(), &|g, a| g * sign(a))),
            Op::Square => out[0] = Some(zip(x0(), &|g, a| g * (a + a))),
            Op::Exp => out[0] = Some(zip(y(), &|g, e| g * e)),
            Op::Log => out[0] = Some(zip(x0(), &|g, a| g / a)),
            Op::Sigmoid => out[0] = Some(zip(y(), &|g, s| g * s * (T::one() - s))),
            Op::ClampMin(c) => {
                let c = *c;
                out[0] = Some(zip(x0(), &|g, a| if a > c { g } else { T::zero() }));
            }
            Op::Profile(p) => {
                let p = *p;
                out[0] = Some(zip(x0(), &|g, a| g * p.k_prime(a)));
            }
            Op::ProfileDeriv(p) => {
                let p = *p;
                out[0] = Some(zip(x0(), &|g, a| g * p.k_second(a)));
            }
            Op::Sum { axis } => {
                let (outer, len, inner) = self.input_value(k, 0).shape().split_at_axis(*axis);
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        dx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                out[0] = Some(dx);
            }
            Op::Expand { axis, n } => {
                let xd = self.input_value(k, 0).dims();
                let outer: usize = xd[..*axis].iter().product();
                let inner: usize = xd[*axis..].iter().product();
                let mut dx = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for r in 0..*n {
                        let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                        for (d, &s) in dx[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                out[0] = Some(dx);
            }
            Op::Reshape => out[0] = Some(g.to_vec()),
            Op::Permute(perm) => {
                out[0] = Some(permute_data(g, self.node_value(k).dims(), &invert_perm(perm)));
            }
            Op::Narrow { axis, start } => {
                let x = self.input_value(k, 0);
                let (outer, full, inner) = x.shape().split_at_axis(*axis);
                let len = self.node_value(k).dims()[*axis];
                let mut dx = vec![T::zero(); x.len()];
                for o in 0..outer {
                    dx[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out[0] = Some(dx);
            }
            Op::SoftmaxLast => {
                let yv = y();
                let m = *self.node_value(k).dims().last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for ((gr, yr), dr) in g.chunks_exact(m).zip(yv.chunks_exact(m)).zip(dx.chunks_exact_mut(m)) {
                    let s = gr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for j in 0..m {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                out[0] = Some(dx);
            }
            Op::Matmul => {
                let (a, b) = (self.input_value(k, 0), self.input_value(k, 1));
                let (m, kk, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
                if need[0] {
                    let bt = permute_data(b.data(), b.dims(), &[1, 0]);
                    let mut da = vec![T::zero(); m * kk];
                    matmul_into(g, &bt, &mut da, m, n, kk);
                    out[0] = Some(da);
                }
                if need[1] {
                    let at = permute_data(a.data(), a.dims(), &[1, 0]);
                    let mut db = vec![T::zero(); kk * n];
                    matmul_into(&at, g, &mut db, kk, m, n);
                    out[1] = Some(db);
                }
            }
            Op::Conv2d => {
                let (xv, wv) = (self.input_value(k, 0), self.input_value(k, 1));
                let (xd, wd) = (xv.dims(), wv.dims());
                let (h, w, ci) = (xd[0], xd[1], xd[2]);
                let (kh, kw, co) = (wd[0], wd[1], wd[3]);
                let (ph, pw) = (conv_pad(kh), conv_pad(kw));
                let mut dx = need[0].then(|| vec![T::zero(); xv.len()]);
                let mut dw = need[1].then(|| vec![T::zero(); wv.len()]);
                for y in 0..h {
                    for xx in 0..w {
                        let go = &g[(y * w + xx) * co..(y * w + xx + 1) * co];
                        for dy in 0..kh {
                            let sy = y as isize + dy as isize - ph;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dxk in 0..kw {
                                let sx = xx as isize + dxk as isize - pw;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let base = (sy as usize * w + sx as usize) * ci;
                                for c in 0..ci {
                                    let widx = ((dy * kw + dxk) * ci + c) * co;
                                    if let Some(dx) = dx.as_mut() {
                                        let wrow = &wv.data()[widx..widx + co];
                                        let s = go.iter().zip(wrow).fold(T::zero(), |s, (&a, &b)| s + a * b);
                                        dx[base + c] = dx[base + c] + s;
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        let xvv = xv.data()[base + c];
                                        for (d, &gg) in dw[widx..widx + co].iter_mut().zip(go) {
                                            *d = *d + xvv * gg;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                out[0] = dx;
                out[1] = dw;
                if need[2] {
                    let mut db = vec![T::zero(); co];
                    for p in 0..h * w {
                        for o in 0..co {
                            db[o] = db[o] + g[p * co + o];
                        }
                    }
                    out[2] = Some(db);
                }
            }
            Op::MaxPool2 { argmax } => {
                let mut dx = vec![T::zero(); self.input_value(k, 0).len()];
                for (&src, &gg) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + gg;
                }
                out[0] = Some(dx);
            }
            Op::GlobalAvgPool => {
                let d = self.input_value(k, 0).dims();
                let (hw, c) = (d[0] * d[1], d[2]);
                let n = T::from_usize(hw).unwrap();
                let mut dx = Vec::with_capacity(hw * c);
                for _ in 0..hw {
                    dx.extend(g.iter().map(|&x| x / n));
                }
                out[0] = Some(dx);
            }
            Op::SpreadLoss { target, margin } => {
                let x = x0();
                let at = x[*target];
                let mut dx = vec![T::zero(); x.len()];
                for (i, &ai) in x.iter().enumerate() {
                    if i != *target {
                        let h = (*margin - (at - ai)).max(T::zero());
                        let d = T::c(2.0) * h * g[0];
                        dx[i] = dx[i] + d;
                        dx[*target] = dx[*target] - d;
                    }
                }
                out[0] = Some(dx);
            }
            Op::MarginLoss {
                target,
                m_plus,
                m_minus,
                lambda,
            } => {
                let x = x0();
                let mut dx = vec![T::zero(); x.len()];
                for (i, &ai) in x.iter().enumerate() {
                    dx[i] = if i == *target {
                        -T::c(2.0) * (*m_plus - ai).max(T::zero()) * g[0]
                    } else {
                        *lambda * T::c(2.0) * (ai - *m_minus).max(T::zero()) * g[0]
                    };
                }
                out[0] = Some(dx);
            }
            Op::VoteTransform => {
                let (p, t) = (self.input_value(k, 0), self.input_value(k, 1));
                let (wn, n, m) = (p.dims()[0], p.dims()[1], t.dims()[1]);
                let mut dp = need[0].then(|| vec![T::zero(); p.len()]);
                let mut dt = need[1].then(|| vec![T::zero(); t.len()]);
                for w in 0..wn {
                    for i in 0..n {
                        let pb = (w * n + i) * POSE_DIM;
                        let pm = &p.data()[pb..pb + POSE_DIM];
                        for j in 0..m {
                            let tb = (i * m + j) * POSE_DIM;
                            let tm = &t.data()[tb..tb + POSE_DIM];
                            let gm = &g[((w * n + i) * m + j) * POSE_DIM..][..POSE_DIM];
                            if let Some(dt) = dt.as_mut() {
                                for r in 0..4 {
                                    for kk in 0..4 {
                                        let mut s = T::zero();
                                        for c in 0..4 {
                                            s = s + gm[r * 4 + c] * pm[kk * 4 + c];
                                        }
                                        dt[tb + r * 4 + kk] = dt[tb + r * 4 + kk] + s;
                                    }
                                }
                            }
                            if let Some(dp) = dp.as_mut() {
                                for kk in 0..4 {
                                    for c in 0..4 {
                                        let mut s = T::zero();
                                        for r in 0..4 {
                                            s = s + tm[r * 4 + kk] * gm[r * 4 + c];
                                        }
                                        dp[pb + kk * 4 + c] = dp[pb + kk * 4 + c] + s;
                                    }
                                }
                            }
                        }
                    }
                }
                out[0] = dp;
                out[1] = dt;
            }
            Op::PairDistance { metric } => {
                let (u, v) = (self.input_value(k, 0), self.input_value(k, 1));
                let [wn, n, m, d] = window_dims(u.dims(), "pair_distance")?;
                let s = (n_inputs == 3).then(|| self.input_value(k, 2).data());
                let mut du = need[0].then(|| vec![T::zero(); u.len()]);
                let mut dv = need[1].then(|| vec![T::zero(); v.len()]);
                let mut ds = (n_inputs == 3 && need[2]).then(|| vec![T::zero(); m * d]);
                for w in 0..wn {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[(w * n + i) * m + j];
                            let ub = ((w * n + i) * m + j) * d;
                            let vb = (w * m + j) * d;
                            for c in 0..d {
                                let sc = s.map_or(T::one(), |s| s[j * d + c]);
                                let vv = v.data()[vb + c];
                                let e = u.data()[ub + c] - sc * vv;
                                let cg = gij * metric.coord_grad(e);
                                if let Some(du) = du.as_mut() {
                                    du[ub + c] = du[ub + c] + cg;
                                }
                                if let Some(dv) = dv.as_mut() {
                                    dv[vb + c] = dv[vb + c] - cg * sc;
                                }
                                if let Some(ds) = ds.as_mut() {
                                    ds[j * d + c] = ds[j * d + c] - cg * vv;
                                }
                            }
                        }
                    }
                }
                out[0] = du;
                out[1] = dv;
                if n_inputs == 3 {
                    out[2] = ds;
                }
            }
            Op::WeightedMean { branches } => {
                let u = self.input_value(k, 0);
                let [wn, n, m, d] = window_dims(u.dims(), "weighted_mean")?;
                let v = y();
                let primary = x1();
                let fb = (n_inputs == 3).then(|| self.input_value(k, 2).data());
                let mut du = need[0].then(|| vec![T::zero(); u.len()]);
                let mut dw = need[1].then(|| vec![T::zero(); wn * n * m]);
                let mut dfb = (n_inputs == 3 && need[2]).then(|| vec![T::zero(); wn * n * m]);
                for w in 0..wn {
                    for j in 0..m {
                        let branch = branches[w * m + j];
                        let (weights, dweights) = match branch {
                            MeanBranch::Primary => (Some(primary), dw.as_mut()),
                            MeanBranch::Fallback => (fb, dfb.as_mut()),
                            MeanBranch::Uniform => (None, None),
                        };
                        let den = match weights {
                            Some(ws) => (0..n).fold(T::zero(), |s, i| s + ws[(w * n + i) * m + j]),
                            None => T::from_usize(n).unwrap(),
                        };
                        let gj = &g[(w * m + j) * d..(w * m + j + 1) * d];
                        let vj = &v[(w * m + j) * d..(w * m + j + 1) * d];
                        let mut dws = dweights;
                        for i in 0..n {
                            let wi = weights.map_or(T::one(), |ws| ws[(w * n + i) * m + j]);
                            let ub = ((w * n + i) * m + j) * d;
                            if let Some(du) = du.as_mut() {
                                let f = wi / den;
                                for c in 0..d {
                                    du[ub + c] = du[ub + c] + f * gj[c];
                                }
                            }
                            if let Some(dws) = dws.as_mut() {
                                let mut s = T::zero();
                                for c in 0..d {
                                    s = s + gj[c] * (u.data()[ub + c] - vj[c]);
                                }
                                let idx = (w * n + i) * m + j;
                                dws[idx] = dws[idx] + s / den;
                            }
                        }
                    }
                }
                out[0] = du;
                out[1] = dw;
                if n_inputs == 3 {
                    out[2] = dfb;
                }
            }
            Op::NormalizeRows { mode, degenerate } => {
                let (x, yv) = (x0(), y());
                let m = *self.node_value(k).dims().last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for (row, dr) in dx.chunks_exact_mut(m).enumerate() {
                    if degenerate[row] {
                        continue;
                    }
                    let span = row * m..(row + 1) * m;
                    let (gr, yr, xr) = (&g[span.clone()], &yv[span.clone()], &x[span]);
                    let s = gr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    match mode {
                        Normalization::Softmax => {
                            for j in 0..m {
                                dr[j] = yr[j] * (gr[j] - s);
                            }
                        }
                        Normalization::Plain => {
                            let total = xr.iter().fold(T::zero(), |a, &b| a + b);
                            for j in 0..m {
                                dr[j] = (gr[j] - s) / total;
                            }
                        }
                    }
                }
                out[0] = Some(dx);
            }
            Op::DiagGaussianLogPdf => {
                let (u, v, s) = (self.input_value(k, 0), self.input_value(k, 1), self.input_value(k, 2));
                let [wn, n, m, d] = window_dims(u.dims(), "diag_gaussian_log_pdf")?;
                let mut du = need[0].then(|| vec![T::zero(); u.len()]);
                let mut dv = need[1].then(|| vec![T::zero(); v.len()]);
                let mut ds = need[2].then(|| vec![T::zero(); s.len()]);
                let half = T::c(0.5);
                for w in 0..wn {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[(w * n + i) * m + j];
                            let ub = ((w * n + i) * m + j) * d;
                            let vb = (w * m + j) * d;
                            for c in 0..d {
                                let var = s.data()[vb + c];
                                let e = u.data()[ub + c] - v.data()[vb + c];
                                let t = gij * e / var;
                                if let Some(du) = du.as_mut() {
                                    du[ub + c] = du[ub + c] - t;
                                }
                                if let Some(dv) = dv.as_mut() {
                                    dv[vb + c] = dv[vb + c] + t;
                                }
                                if let Some(ds) = ds.as_mut() {
                                    ds[vb + c] = ds[vb + c] + gij * half * (e * e / (var * var) - T::one() / var);
                                }
                            }
                        }
                    }
                }
                out[0] = du;
                out[1] = dv;
                out[2] = ds;
            }
        }
        for (slot, o) in out.iter_mut().enumerate() {
            if !need[slot] {
                *o = None;
            }
        }
        Ok(out)
    }

}

fn window_dims(d: &[usize], op: &'static str) -> Result<[usize; 4]> {
    if d.len() != 4 {
        return shape_err(op, format!("votes {d:?} are not [windows, n, m, dim]"));
    }
    Ok([d[0], d[1], d[2], d[3]])
}

//! Finite-difference checks of individual ops and of whole networks.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use capsroute_core::autograd::routing::route_windows;
use capsroute_core::autograd::{finite_diff_check, GradCheckConfig, GradCheckReport, Stencil};
use capsroute_core::network::{InitConfig, WeightInit};
use capsroute_core::routing::{RoutingConfig, RoutingMethod};
use capsroute_core::training::network_gradcheck;
use capsroute_core::{rng, LossKind, NetworkSpec, Parameters, Result, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Finite-difference step for single ops and routing layers.
pub const OP_EPSILON: f64 = 1e-5;

/// Finite-difference step for whole networks. A network loss has dense ℓ1 and
/// relu kinks, and a 1e-5 stencil straddles some of them undetected.
pub const NETWORK_EPSILON: f64 = 1e-6;

/// Ops that can be checked standalone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckOp {
    Softmax,
    Matmul,
    Conv2d,
    SpreadLoss,
    MarginLoss,
    Frms,
    Frem,
    Em,
}

impl CheckOp {
    pub const ALL: [CheckOp; 8] = [
        CheckOp::Softmax,
        CheckOp::Matmul,
        CheckOp::Conv2d,
        CheckOp::SpreadLoss,
        CheckOp::MarginLoss,
        CheckOp::Frms,
        CheckOp::Frem,
        CheckOp::Em,
    ];

    fn name(self) -> &'static str {
        match self {
            CheckOp::Softmax => "softmax",
            CheckOp::Matmul => "matmul",
            CheckOp::Conv2d => "conv2d",
            CheckOp::SpreadLoss => "spread-loss",
            CheckOp::MarginLoss => "margin-loss",
            CheckOp::Frms => "frms",
            CheckOp::Frem => "frem",
            CheckOp::Em => "em",
        }
    }

    /// The EM log-density is badly conditioned near the variance floor and needs the
    /// five-point stencil.
    pub fn default_stencil(self) -> Stencil {
        match self {
            CheckOp::Em => Stencil::FivePoint,
            _ => Stencil::ThreePoint,
        }
    }
}

impl fmt::Display for CheckOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckOp {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        CheckOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = CheckOp::ALL.iter().map(|o| o.name()).collect();
                format!("unknown op {s:?}; expected one of {}", names.join(", "))
            })
    }
}

/// A check result with a name for every parameter tensor.
pub struct NamedReport {
    pub names: Vec<String>,
    pub report: GradCheckReport,
}

impl NamedReport {
    pub fn max_rel_error(&self) -> f64 {
        self.report.max_rel_error()
    }

    /// One row per parameter tensor: name, extents, coordinates checked, kinks
    /// skipped, and the largest relative error.
    pub fn table(&self, tolerance: f64) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<28} {:<16} {:>8} {:>6} {:>12}  status",
            "parameter", "dims", "checked", "kinks", "max_rel_err"
        );
        for (name, p) in self.names.iter().zip(&self.report.params) {
            let status = if p.max_rel_error < tolerance { "ok" } else { "FAIL" };
            let _ = writeln!(
                s,
                "{:<28} {:<16} {:>8} {:>6} {:>12.3e}  {status}",
                name,
                format!("{:?}", p.dims),
                p.checked,
                p.kinks,
                p.max_rel_error
            );
        }
        s
    }
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.random_range(lo..hi)).expect("valid extents")
}

fn weighted_sum(t: &mut Tape<f64>, x: Var, weights: Tensor<f64>) -> Result<Var> {
    let w = t.constant(weights);
    let p = t.mul(x, w)?;
    t.sum_all(p)
}

/// Random inputs for a routing layer: poses `[2, 8, 16]`, transforms `[8, 4, 4, 4]`
/// flattened to `[8, 4, 16]`, activations `[2, 8]` and `beta` `[4, 17]`.
pub fn routing_layer_inputs(seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = rng::stream(seed, "gradcheck.inputs");
    let (wn, n, m) = (2, 8, 4);
    let beta = Tensor::from_fn([m, 17], |k| {
        if k % 17 == 0 {
            rng.random_range(-0.1..0.1)
        } else {
            rng.random_range(0.8..1.2)
        }
    })
    .expect("valid extents");
    let mut rng = rng::stream(seed, "gradcheck.inputs.poses");
    vec![
        uniform(&mut rng, &[wn, n, 16], -0.5, 0.5),
        uniform(&mut rng, &[n, m, 16], -0.3, 0.3),
        uniform(&mut rng, &[wn, n], 0.1, 0.9),
        beta,
    ]
}

/// Scalar program over a routed layer: fixed random projections of the output poses
/// and activations.
pub fn routing_layer_program(
    method: RoutingMethod,
    cfg: RoutingConfig,
    seed: u64,
) -> impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {
    move |t, v| {
        let votes = t.vote_transform(v[0], v[1])?;
        let out = route_windows(t, method, votes, v[2], v[3], &cfg)?;
        let mut rng = rng::stream(seed, "gradcheck.cotangent");
        let pd = t.dims(out.poses).to_vec();
        let ad = t.dims(out.activations).to_vec();
        let cp = uniform(&mut rng, &pd, -1.0, 1.0);
        let ca = uniform(&mut rng, &ad, -1.0, 1.0);
        let sp = weighted_sum(t, out.poses, cp)?;
        let sa = weighted_sum(t, out.activations, ca)?;
        t.add(sp, sa)
    }
}

/// Checks one routing layer: votes from learned transforms, routed with `method`.
pub fn check_routing_layer(
    method: RoutingMethod,
    routing: RoutingConfig,
    cfg: &GradCheckConfig,
) -> Result<NamedReport> {
    let inputs = routing_layer_inputs(cfg.seed);
    let report = finite_diff_check(routing_layer_program(method, routing, cfg.seed), &inputs, cfg)?;
    Ok(NamedReport {
        names: ["poses", "transforms", "activations", "beta"].map(String::from).to_vec(),
        report,
    })
}

/// Checks one standalone op on random inputs.
pub fn check_op(op: CheckOp, cfg: &GradCheckConfig) -> Result<NamedReport> {
    let routing = RoutingConfig::default();
    let method = match op {
        CheckOp::Frms => Some(RoutingMethod::Frms),
        CheckOp::Frem => Some(RoutingMethod::Frem),
        CheckOp::Em => Some(RoutingMethod::EmBaseline),
        _ => None,
    };
    if let Some(method) = method {
        return check_routing_layer(method, routing, cfg);
    }
    let mut rng = rng::stream(cfg.seed, "gradcheck.inputs");
    let named = |names: &[&str], report| NamedReport {
        names: names.iter().map(|s| s.to_string()).collect(),
        report,
    };
    Ok(match op {
        CheckOp::Softmax => {
            let x = uniform(&mut rng, &[4, 6], -2.0, 2.0);
            named(&["x"], finite_diff_check(|t, v| Ok(t.softmax_last(v[0])), &[x], cfg)?)
        }
        CheckOp::Matmul => {
            let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
            let b = uniform(&mut rng, &[4, 5], -1.0, 1.0);
            named(&["a", "b"], finite_diff_check(|t, v| t.matmul(v[0], v[1]), &[a, b], cfg)?)
        }
        CheckOp::Conv2d => {
            let x = uniform(&mut rng, &[6, 6, 2], -1.0, 1.0);
            let w = uniform(&mut rng, &[3, 3, 2, 3], -0.5, 0.5);
            let b = uniform(&mut rng, &[3], -0.5, 0.5);
            named(
                &["x", "weight", "bias"],
                finite_diff_check(|t, v| t.conv2d(v[0], v[1], v[2]), &[x, w, b], cfg)?,
            )
        }
        CheckOp::SpreadLoss => {
            let x = uniform(&mut rng, &[5], -1.0, 1.0);
            let program = |t: &mut Tape<f64>, v: &[Var]| {
                let a = t.softmax_last(v[0]);
                t.spread_loss(a, 2, 0.9)
            };
            named(&["logits"], finite_diff_check(program, &[x], cfg)?)
        }
        CheckOp::MarginLoss => {
            let x = uniform(&mut rng, &[5], -1.0, 1.0);
            let program = |t: &mut Tape<f64>, v: &[Var]| {
                let a = t.softmax_last(v[0]);
                t.margin_loss(a, 2, 0.9, 0.1, 0.5)
            };
            named(&["logits"], finite_diff_check(program, &[x], cfg)?)
        }
        CheckOp::Frms | CheckOp::Frem | CheckOp::Em => unreachable!("handled above"),
    })
}

/// The smallest useful 32×32 network: every layer kind at width one.
pub fn mini_network() -> NetworkSpec {
    NetworkSpec::reduced(5, 4, 1, 3)
}

/// Checks a spread-loss example of `spec` against every parameter tensor. Weights use
/// the fan-in init so every layer carries signal to the loss.
pub fn check_network(spec: &NetworkSpec, cfg: &GradCheckConfig) -> Result<NamedReport> {
    let init = InitConfig {
        weights: WeightInit::FanIn,
        transform_stddev: 0.5,
        ..InitConfig::default()
    };
    let params = Parameters::<f64>::init(spec, &init, &mut rng::stream(cfg.seed, "gradcheck.params"))?;
    let mut rng = rng::stream(cfg.seed, "gradcheck.image");
    let image = uniform(
        &mut rng,
        &[spec.input_size, spec.input_size, spec.input_channels],
        -1.0,
        1.0,
    );
    let label = rng.random_range(0..spec.classes);
    let report = network_gradcheck(spec, &params, &image, label, LossKind::Spread, 0.9, cfg)?;
    Ok(NamedReport {
        names: params.names().map(String::from).collect(),
        report,
    })
}

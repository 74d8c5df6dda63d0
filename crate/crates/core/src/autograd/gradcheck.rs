use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`
    ThreePoint,
    /// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, for badly conditioned programs.
    FivePoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step, in `[1e-7, 1e-4]`.
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked fully.
    pub samples: usize,
    pub seed: u64,
    /// Lower bound on the denominator of the relative error, as a fraction of
    /// `max(1, |f|)`. Central differences carry roundoff of order `ε·|f|/h`, so
    /// coordinates with gradients below this are compared in absolute terms.
    pub floor: f64,
    pub stencil: Stencil,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            samples: 256,
            seed: 0,
            floor: 1e-4,
            stencil: Stencil::ThreePoint,
        }
    }
}

/// Agreement for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub dims: Vec<usize>,
    /// Coordinates compared, excluding kinks.
    pub checked: usize,
    /// Coordinates skipped because a kink lies within one step of them.
    pub kinks: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate, with its analytic and numeric values.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub value: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn kinks(&self) -> usize {
        self.params.iter().map(|p| p.kinks).sum()
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

/// Compares reverse-mode gradients of `program` with central differences.
///
/// `program` receives one parameter [`Var`] per entry of `params`. A non-scalar
/// output is reduced against a fixed pseudo-random cotangent. A coordinate whose
/// check fails is classified as a kink, and skipped, when the analytic gradient
/// matches one of the one-sided differences and those two disagree.
pub fn finite_diff_check<F>(program: F, params: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&cfg.epsilon) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference epsilon {} outside [1e-7, 1e-4]",
            cfg.epsilon
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = program(&mut tape, &vars)?;
    let out_value = tape.value(out).clone();
    let cotangent = if out_value.len() == 1 {
        Tensor::from_parts(out_value.shape().clone(), vec![1.0])
    } else {
        let mut c = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let data = (0..out_value.len())
            .map(|_| rand::Rng::random_range(&mut c, -1.0..1.0))
            .collect();
        Tensor::from_parts(out_value.shape().clone(), data)
    };
    let project = |t: &Tensor<f64>| t.data().iter().zip(cotangent.data()).map(|(a, b)| a * b).sum::<f64>();
    let value = project(&out_value);
    let grads = tape.backward_with(out, cotangent.clone())?;

    let eval = |current: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = current.iter().map(|p| tape.param(p.clone())).collect();
        let out = program(&mut tape, &vars)?;
        Ok(project(tape.value(out)))
    };

    let h = cfg.epsilon;
    let scale = value.abs().max(1.0);
    let floor = cfg.floor * scale;
    // One-sided differences cannot resolve slope changes below this.
    let noise = 1e3 * f64::EPSILON * scale / h;
    let mut current = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (index, p) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[index]);
        let coords: Vec<usize> = if p.len() <= cfg.samples {
            (0..p.len()).collect()
        } else {
            let mut s = sample(&mut rng, p.len(), cfg.samples).into_vec();
            s.sort_unstable();
            s
        };
        let mut check = ParamCheck {
            index,
            dims: p.dims().to_vec(),
            checked: 0,
            kinks: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        for &c in &coords {
            let x0 = p.data()[c];
            let mut at = |offset: f64| -> Result<f64> {
                current[index].data_mut()[c] = x0 + offset;
                let f = eval(&current);
                current[index].data_mut()[c] = x0;
                f
            };
            let fp = at(h)?;
            let fm = at(-h)?;
            let numeric = match cfg.stencil {
                Stencil::ThreePoint => (fp - fm) / (2.0 * h),
                Stencil::FivePoint => {
                    let (fp2, fm2) = (at(2.0 * h)?, at(-2.0 * h)?);
                    (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * h)
                }
            };
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > 1e-6 {
                let forward = (fp - value) / h;
                let backward = (value - fm) / h;
                let spread = (forward - backward).abs();
                if spread > noise && (a - forward).abs().min((a - backward).abs()) < 0.1 * spread {
                    check.kinks += 1;
                    continue;
                }
            }
            check.checked += 1;
            if check.worst.is_none() || rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst = Some((c, a, numeric));
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { value, params: report })
}

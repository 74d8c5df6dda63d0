//! Kernel profiles, their derivatives and the distance metrics used by routing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bounded profile function `k(x)` on `x >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// `exp(-x/2)`
    Gaussian,
    /// `1 - x` on `[0, 1)`, zero beyond.
    Epanechnikov,
}

/// Distance between a vote and a cluster center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "l2sq")]
    L2Squared,
    /// `1 - u·v`, a non-strict metric that can go negative. Only the
    /// routing-by-agreement variant accepts it.
    #[serde(rename = "cosine")]
    CosineVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelSpec {
    pub profile: Profile,
    pub metric: Metric,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            profile: Profile::Epanechnikov,
            metric: Metric::L1,
        }
    }
}

impl KernelSpec {
    pub fn new(profile: Profile, metric: Metric) -> Self {
        KernelSpec { profile, metric }
    }

    /// `k(x)`; negative arguments are a domain error.
    pub fn profile<T: Scalar>(&self, x: T) -> Result<T> {
        check_nonneg(x)?;
        Ok(self.profile.k(x))
    }

    /// `k'(x)`; negative arguments are a domain error.
    pub fn profile_derivative<T: Scalar>(&self, x: T) -> Result<T> {
        check_nonneg(x)?;
        Ok(self.profile.k_prime(x))
    }

    pub fn distance<T: Scalar>(&self, u: &Tensor<T>, v: &Tensor<T>) -> Result<T> {
        distance(self.metric, u, v)
    }
}

fn check_nonneg<T: Scalar>(x: T) -> Result<()> {
    if x < T::zero() || x.is_nan() {
        return Err(Error::Domain(format!("profile argument must be >= 0, got {x}")));
    }
    Ok(())
}

impl Profile {
    /// Profile value without the domain check.
    #[inline]
    pub fn k<T: Scalar>(self, x: T) -> T {
        match self {
            Profile::Gaussian => (-x * T::c(0.5)).exp(),
            Profile::Epanechnikov => {
                if x < T::one() {
                    T::one() - x
                } else {
                    T::zero()
                }
            }
        }
    }

    /// First derivative. Epanechnikov is right-continuous at the breakpoint: `k'(1) = 0`.
    #[inline]
    pub fn k_prime<T: Scalar>(self, x: T) -> T {
        match self {
            Profile::Gaussian => -T::c(0.5) * (-x * T::c(0.5)).exp(),
            Profile::Epanechnikov => {
                if x < T::one() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    /// Second derivative, used when differentiating through `k'`.
    #[inline]
    pub fn k_second<T: Scalar>(self, x: T) -> T {
        match self {
            Profile::Gaussian => T::c(0.25) * (-x * T::c(0.5)).exp(),
            Profile::Epanechnikov => T::zero(),
        }
    }
}

impl Metric {
    /// Distance between two equal-length slices.
    #[inline]
    pub fn eval<T: Scalar>(self, u: &[T], v: &[T]) -> T {
        debug_assert_eq!(u.len(), v.len());
        let mut acc = T::zero();
        match self {
            Metric::L1 => {
                for (&a, &b) in u.iter().zip(v) {
                    acc = acc + (a - b).abs();
                }
                acc
            }
            Metric::L2Squared => {
                for (&a, &b) in u.iter().zip(v) {
                    let d = a - b;
                    acc = acc + d * d;
                }
                acc
            }
            Metric::CosineVariant => {
                for (&a, &b) in u.iter().zip(v) {
                    acc = acc + a * b;
                }
                T::one() - acc
            }
        }
    }

    /// Per-coordinate distance term, `d(x)` for a single difference `x`.
    #[inline]
    pub fn coord<T: Scalar>(self, x: T) -> T {
        match self {
            Metric::L1 => x.abs(),
            Metric::L2Squared => x * x,
            Metric::CosineVariant => unreachable!("cosine variant has no per-coordinate form"),
        }
    }

    /// Derivative of [`Metric::coord`] w.r.t. its argument; `sign(0) = 0`.
    #[inline]
    pub fn coord_grad<T: Scalar>(self, x: T) -> T {
        match self {
            Metric::L1 => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Metric::L2Squared => x + x,
            Metric::CosineVariant => unreachable!("cosine variant has no per-coordinate form"),
        }
    }
}

/// Distance between two tensors of identical shape.
pub fn distance<T: Scalar>(metric: Metric, u: &Tensor<T>, v: &Tensor<T>) -> Result<T> {
    if u.shape() != v.shape() {
        return shape_err("distance", format!("{:?} vs {:?}", u.dims(), v.dims()));
    }
    Ok(metric.eval(u.data(), v.data()))
}

/// Kernel density estimate at `query` with the normalization constant fixed to 1.
pub fn kde_density<T: Scalar>(samples: &[Tensor<T>], query: &Tensor<T>, spec: KernelSpec) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("kde_density samples"));
    }
    let mut acc = T::zero();
    for s in samples {
        let d = distance(spec.metric, query, s)?;
        acc = acc + spec.profile(d)?;
    }
    Ok(acc / T::from_usize(samples.len()).unwrap())
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Gaussian => "gaussian",
            Profile::Epanechnikov => "epanechnikov",
        })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::L1 => "l1",
            Metric::L2Squared => "l2sq",
            Metric::CosineVariant => "cosine",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Profile::Gaussian),
            "epanechnikov" => Ok(Profile::Epanechnikov),
            other => Err(Error::InvalidConfig(format!("unknown kernel profile {other:?}"))),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Metric::L1),
            "l2sq" => Ok(Metric::L2Squared),
            "cosine" => Ok(Metric::CosineVariant),
            other => Err(Error::InvalidConfig(format!("unknown distance metric {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPAN: KernelSpec = KernelSpec {
        profile: Profile::Epanechnikov,
        metric: Metric::L1,
    };
    const GAUSS: KernelSpec = KernelSpec {
        profile: Profile::Gaussian,
        metric: Metric::L2Squared,
    };

    fn vec1(v: &[f64]) -> Tensor<f64> {
        Tensor::new([v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn profile_values() {
        assert_eq!(EPAN.profile(0.5).unwrap(), 0.5);
        assert_eq!(EPAN.profile(1.5).unwrap(), 0.0);
        assert_eq!(GAUSS.profile(0.0).unwrap(), 1.0);
        assert!(matches!(GAUSS.profile(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn derivative_values() {
        assert_eq!(EPAN.profile_derivative(0.3).unwrap(), -1.0);
        assert_eq!(EPAN.profile_derivative(2.0).unwrap(), 0.0);
        assert_eq!(EPAN.profile_derivative(1.0).unwrap(), 0.0);
        assert_eq!(GAUSS.profile_derivative(0.0).unwrap(), -0.5);
        assert!(EPAN.profile_derivative(-1.0).is_err());
    }

    #[test]
    fn distance_values() {
        let d = distance(Metric::L1, &vec1(&[1.0, 2.0]), &vec1(&[0.0, 0.0])).unwrap();
        assert_eq!(d, 3.0);
        let x = vec1(&[0.3, -0.7, 2.0]);
        assert_eq!(distance(Metric::L2Squared, &x, &x).unwrap(), 0.0);
        let s = 0.5f64.sqrt();
        let u = vec1(&[s, s]);
        assert!(distance(Metric::CosineVariant, &u, &u).unwrap().abs() < 1e-15);
        assert!(distance(Metric::L1, &vec1(&[1.0]), &vec1(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn kde_examples() {
        let q = vec1(&[0.2, 0.4]);
        assert_eq!(kde_density(&[q.clone()], &q, EPAN).unwrap(), 1.0);
        let far = vec![vec1(&[2.0, 0.4]), vec1(&[0.2, -1.5])];
        assert_eq!(kde_density(&far, &q, EPAN).unwrap(), 0.0);
        assert!(matches!(kde_density::<f64>(&[], &q, EPAN), Err(Error::EmptyInput(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<_> = (0..5)
            .map(|_| vec1(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
            .collect();
        let mut direct = 0.0;
        for s in &samples {
            let d: f64 = (0..2).map(|k| (q.data()[k] - s.data()[k]).powi(2)).sum();
            direct += (-d / 2.0).exp();
        }
        direct /= 5.0;
        assert!((kde_density(&samples, &q, GAUSS).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn profiles_are_nonincreasing_and_bounded() {
        for p in [Profile::Gaussian, Profile::Epanechnikov] {
            let k0 = p.k(0.0f64);
            let mut prev = k0;
            for step in 0..1000 {
                let x = step as f64 * 0.005;
                let k = p.k(x);
                assert!(k <= prev + 1e-15 && k <= k0);
                prev = k;
            }
        }
    }

    #[test]
    fn derivative_matches_central_differences() {
        let h = 1e-6;
        for p in [Profile::Gaussian, Profile::Epanechnikov] {
            for step in 1..1000 {
                let x = step as f64 * 0.003;
                if p == Profile::Epanechnikov && (x - 1.0).abs() < 1e-3 {
                    continue;
                }
                let fd = (p.k(x + h) - p.k(x - h)) / (2.0 * h);
                assert!((fd - p.k_prime(x)).abs() < 1e-6, "{p} at {x}");
                let fd2 = (p.k_prime(x + h) - p.k_prime(x - h)) / (2.0 * h);
                assert!((fd2 - p.k_second(x)).abs() < 1e-6, "{p}'' at {x}");
            }
        }
    }

    #[test]
    fn names_parse() {
        assert_eq!("gaussian".parse::<Profile>().unwrap(), Profile::Gaussian);
        assert_eq!("l2sq".parse::<Metric>().unwrap(), Metric::L2Squared);
        assert!("l3".parse::<Metric>().is_err());
    }

    proptest! {
        #[test]
        fn metrics_symmetric_and_zero_on_diagonal(
            u in prop::collection::vec(-10.0f64..10.0, 16),
            v in prop::collection::vec(-10.0f64..10.0, 16),
        ) {
            for m in [Metric::L1, Metric::L2Squared] {
                prop_assert_eq!(m.eval(&u, &v), m.eval(&v, &u));
                prop_assert_eq!(m.eval(&u, &u), 0.0);
                prop_assert!(m.eval(&u, &v) >= 0.0);
            }
        }
    }
}

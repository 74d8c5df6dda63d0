use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::kernels::{Metric, Profile};

const EPAN_L2: KernelSpec = KernelSpec {
    profile: Profile::Epanechnikov,
    metric: Metric::L2Squared,
};
const GAUSS_L2: KernelSpec = KernelSpec {
    profile: Profile::Gaussian,
    metric: Metric::L2Squared,
};

fn cfg(kernel: KernelSpec, normalization: Normalization, iterations: usize) -> RoutingConfig {
    RoutingConfig {
        iterations,
        kernel,
        normalization,
        ..RoutingConfig::default()
    }
}

fn random_votes(rng: &mut ChaCha8Rng, n: usize, m: usize, d: usize, spread: f64) -> VoteTensor<f64> {
    let votes = Tensor::from_fn([n, m, d], |_| rng.random_range(-spread..spread)).unwrap();
    let acts = Tensor::from_fn([n], |_| rng.random_range(0.05..1.0)).unwrap();
    VoteTensor::new(votes, acts).unwrap()
}

fn random_r_norm(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor<f64> {
    let raw = Tensor::from_fn([n, m], |_| rng.random_range(-2.0..2.0)).unwrap();
    raw.softmax(1).unwrap()
}

fn row_sums(t: &Tensor<f64>) -> Vec<f64> {
    let m = t.dims()[1];
    t.data().chunks(m).map(|r| r.iter().sum()).collect()
}

// ---- compute_votes -------------------------------------------------------

#[test]
fn identity_transforms_copy_poses() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 3;
    let m = 2;
    let poses = Tensor::from_fn([n, 4, 4], |_| rng.random_range(-1.0..1.0)).unwrap();
    let eye: Vec<f64> = Tensor::<f64>::eye(4).unwrap().into_data();
    let transforms = Tensor::new([n, m, 4, 4], eye.repeat(n * m)).unwrap();
    let acts = Tensor::full([n], 0.5).unwrap();
    let v = compute_votes(&poses, &acts, &transforms).unwrap();
    for i in 0..n {
        for j in 0..m {
            assert_eq!(v.vote(i, j), &poses.data()[i * 16..(i + 1) * 16]);
        }
    }
    assert_eq!(v.activations, acts);
}

#[test]
fn scaling_transform_doubles_vote() {
    let poses = Tensor::from_fn([1, 4, 4], |k| k as f64 * 0.1).unwrap();
    let two: Vec<f64> = Tensor::<f64>::eye(4).unwrap().data().iter().map(|x| 2.0 * x).collect();
    let transforms = Tensor::new([1, 1, 4, 4], two).unwrap();
    let v = compute_votes(&poses, &Tensor::full([1], 1.0).unwrap(), &transforms).unwrap();
    let expected: Vec<f64> = poses.data().iter().map(|x| 2.0 * x).collect();
    assert_eq!(v.vote(0, 0), &expected[..]);
}

#[test]
fn votes_match_per_pair_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, m) = (5, 3);
    let poses = Tensor::from_fn([n, 4, 4], |_| rng.random_range(-1.0..1.0)).unwrap();
    let transforms = Tensor::from_fn([n, m, 4, 4], |_| rng.random_range(-1.0..1.0)).unwrap();
    let v = compute_votes(&poses, &Tensor::full([n], 1.0).unwrap(), &transforms).unwrap();
    for i in 0..n {
        for j in 0..m {
            for r in 0..4 {
                for c in 0..4 {
                    let mut s = 0.0f64;
                    for k in 0..4 {
                        s += transforms.at(&[i, j, r, k]) * poses.at(&[i, k, c]);
                    }
                    assert!((v.vote(i, j)[r * 4 + c] - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn vote_shape_errors() {
    let poses = Tensor::<f64>::zeros([2, 4, 4]).unwrap();
    let transforms = Tensor::<f64>::zeros([3, 1, 4, 4]).unwrap();
    let acts = Tensor::<f64>::zeros([2]).unwrap();
    assert!(compute_votes(&poses, &acts, &transforms).is_err());
}

// ---- objective -----------------------------------------------------------

fn state_from(r_norm: Tensor<f64>, v: Tensor<f64>) -> RoutingState<f64> {
    RoutingState {
        r: r_norm.clone(),
        r_norm,
        v,
        pi: None,
        sigma: None,
        degenerate: 0,
    }
}

#[test]
fn objective_examples() {
    let u = Tensor::from_fn([1, 1, 16], |k| k as f64 * 0.01).unwrap();
    let votes = VoteTensor::new(u.clone(), Tensor::full([1], 1.0).unwrap()).unwrap();
    let s = state_from(Tensor::full([1, 1], 1.0).unwrap(), u.reshape([1, 16]).unwrap());
    assert_eq!(objective(&votes, &s, KernelSpec::default()).unwrap(), 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut zero = random_votes(&mut rng, 4, 2, 16, 0.1);
    zero.activations = Tensor::zeros([4]).unwrap();
    let s = state_from(random_r_norm(&mut rng, 4, 2), Tensor::zeros([2, 16]).unwrap());
    assert_eq!(objective(&zero, &s, KernelSpec::default()).unwrap(), 0.0);
}

#[test]
fn objective_matches_double_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for kernel in [KernelSpec::default(), GAUSS_L2, EPAN_L2] {
        let (n, m, d) = (6, 3, 16);
        let votes = random_votes(&mut rng, n, m, d, 0.05);
        let r = random_r_norm(&mut rng, n, m);
        let v = Tensor::from_fn([m, d], |_| rng.random_range(-0.05..0.05)).unwrap();
        let mut direct = 0.0;
        for j in 0..m {
            for i in 0..n {
                let mut dist = 0.0;
                for k in 0..d {
                    let e = v.at(&[j, k]) - votes.votes.at(&[i, j, k]);
                    dist += match kernel.metric {
                        Metric::L1 => e.abs(),
                        _ => e * e,
                    };
                }
                let kv = match kernel.profile {
                    Profile::Gaussian => (-dist / 2.0).exp(),
                    Profile::Epanechnikov => (1.0 - dist).max(0.0),
                };
                direct += r.at(&[i, j]) * votes.activations.at(&[i]) * kv;
            }
        }
        direct /= n as f64;
        let got = objective(&votes, &state_from(r, v), kernel).unwrap();
        assert!((got - direct).abs() < 1e-12, "{got} vs {direct}");
    }
}

// ---- FRMS ------------------------------------------------------------------

#[test]
fn frms_single_point_is_fixed() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut votes = random_votes(&mut rng, 1, 1, 16, 1.0);
    votes.activations = Tensor::full([1], 1.0).unwrap();
    let s = frms_route(&votes, &cfg(KernelSpec::default(), Normalization::Softmax, 1)).unwrap();
    assert_eq!(s.v.data(), votes.votes.data());
}

#[test]
fn frms_identical_votes_give_that_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (n, m) = (7, 3);
    let p: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut data = Vec::new();
    for _ in 0..n {
        for j in 0..m {
            if j == 1 {
                data.extend_from_slice(&p);
            } else {
                data.extend((0..16).map(|_| rng.random_range(-1.0..1.0)));
            }
        }
    }
    let votes = VoteTensor::new(
        Tensor::new([n, m, 16], data).unwrap(),
        Tensor::from_fn([n], |_| rng.random_range(0.1..1.0)).unwrap(),
    )
    .unwrap();
    for iters in 1..4 {
        let s = frms_route(&votes, &cfg(KernelSpec::default(), Normalization::Softmax, iters)).unwrap();
        for k in 0..16 {
            assert!((s.v.at(&[1, k]) - p[k]).abs() <= 1e-15 * p[k].abs().max(1.0));
        }
    }
}

#[test]
fn frms_initial_weights_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let votes = random_votes(&mut rng, 5, 16, 16, 1.0);
    for mode in [Normalization::Plain, Normalization::Softmax] {
        let s = frms_route(&votes, &cfg(KernelSpec::default(), mode, 1)).unwrap();
        assert!(s.r_norm.data().iter().all(|&r| r == 0.0625));
    }
}

/// Two clusters of votes, one per output; inputs `0..half` belong to output 0.
fn two_cluster(rng: &mut ChaCha8Rng, half: usize) -> (VoteTensor<f64>, [Vec<f64>; 2]) {
    let centers = [vec![0.3; 16], vec![-0.4; 16]];
    let n = 2 * half;
    let mut data = Vec::with_capacity(n * 2 * 16);
    for i in 0..n {
        let own = usize::from(i >= half);
        for j in 0..2 {
            // Votes for the foreign output sit far outside the kernel support.
            let base = if j == own { centers[j][0] } else { 3.0 };
            data.extend((0..16).map(|_| base + rng.random_range(-0.02..0.02)));
        }
    }
    let votes = VoteTensor::new(
        Tensor::new([n, 2, 16], data).unwrap(),
        Tensor::from_fn([n], |_| rng.random_range(0.2..1.0)).unwrap(),
    )
    .unwrap();
    (votes, centers)
}

#[test]
fn frms_update_recovers_cluster_weighted_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let half = 6;
    let (votes, centers) = two_cluster(&mut rng, half);
    let r = random_r_norm(&mut rng, 2 * half, 2);
    let seeds = Tensor::new([2, 16], [centers[0].clone(), centers[1].clone()].concat()).unwrap();
    let (v, fallbacks) = frms_step2(&votes, &r, Some(&seeds), EPAN_L2).unwrap();
    assert_eq!(fallbacks, 0);
    for j in 0..2 {
        let members: Vec<usize> = (0..2 * half).filter(|&i| usize::from(i >= half) == j).collect();
        let wsum: f64 = members.iter().map(|&i| r.at(&[i, j]) * votes.activations.at(&[i])).sum();
        for k in 0..16 {
            let mean: f64 = members
                .iter()
                .map(|&i| r.at(&[i, j]) * votes.activations.at(&[i]) * votes.vote(i, j)[k])
                .sum::<f64>()
                / wsum;
            assert!((v.at(&[j, k]) - mean).abs() < 1e-6);
        }
    }
}

#[test]
fn frms_falls_back_when_every_vote_leaves_the_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let votes = random_votes(&mut rng, 4, 2, 16, 0.1);
    let r = random_r_norm(&mut rng, 4, 2);
    let far = Tensor::full([2, 16], 10.0).unwrap();
    let (v, fallbacks) = frms_step2(&votes, &r, Some(&far), KernelSpec::default()).unwrap();
    let (mean, _) = frem_step2(&votes, &r).unwrap();
    assert_eq!(fallbacks, 2);
    assert_eq!(v, mean);
}

// ---- FREM ------------------------------------------------------------------

#[test]
fn frem_single_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut votes = random_votes(&mut rng, 1, 1, 16, 1.0);
    votes.activations = Tensor::full([1], 1.0).unwrap();
    let s = frem_route(&votes, &RoutingConfig::default()).unwrap();
    assert_eq!(s.v.data(), votes.votes.data());
    assert_eq!(s.pi.unwrap().data(), &[1.0]);
}

#[test]
fn frem_uniform_weights_give_plain_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (n, m) = (5, 3);
    let mut votes = random_votes(&mut rng, n, m, 16, 1.0);
    votes.activations = Tensor::full([n], 0.7).unwrap();
    let r = Tensor::full([n, m], 1.0 / m as f64).unwrap();
    let (v, _) = frem_step2(&votes, &r).unwrap();
    for j in 0..m {
        for k in 0..16 {
            let mean: f64 = (0..n).map(|i| votes.vote(i, j)[k]).sum::<f64>() / n as f64;
            assert!((v.at(&[j, k]) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn epanechnikov_step2_is_shared_by_both_solvers() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (votes, centers) = two_cluster(&mut rng, 5);
    // Restrict to each output's own cluster so every k' is on the constant branch.
    let n = votes.n_in();
    let mut data = votes.votes.data().to_vec();
    for i in 0..n {
        let own = usize::from(i >= 5);
        let other = 1 - own;
        for k in 0..16 {
            data[(i * 2 + other) * 16 + k] = centers[other][k] + rng.random_range(-0.02..0.02);
        }
    }
    let votes = VoteTensor::new(Tensor::new([n, 2, 16], data).unwrap(), votes.activations).unwrap();
    let r = random_r_norm(&mut rng, n, 2);
    let seeds = Tensor::new([2, 16], [centers[0].clone(), centers[1].clone()].concat()).unwrap();
    for metric in [Metric::L1, Metric::L2Squared] {
        let spec = KernelSpec::new(Profile::Epanechnikov, metric);
        let (a, _) = frms_step2(&votes, &r, Some(&seeds), spec).unwrap();
        let (b, _) = frem_step2(&votes, &r).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

// ---- EM baseline -----------------------------------------------------------

#[test]
fn em_single_vote_clamps_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut votes = random_votes(&mut rng, 1, 1, 16, 1.0);
    votes.activations = Tensor::full([1], 1.0).unwrap();
    let c = RoutingConfig::default();
    let (s, a) = em_route_baseline(&votes, &c, &ActivationParams::identity(1, 16)).unwrap();
    assert_eq!(s.v.data(), votes.votes.data());
    assert!(s.sigma.unwrap().data().iter().all(|&x| x == c.variance_floor));
    assert_eq!(a.data(), &[1.0]);
}

#[test]
fn em_identical_outputs_split_evenly() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let n = 6;
    let mut data = Vec::new();
    for _ in 0..n {
        let u: Vec<f64> = (0..16).map(|_| rng.random_range(-0.3..0.3)).collect();
        data.extend_from_slice(&u);
        data.extend_from_slice(&u);
    }
    let votes = VoteTensor::new(
        Tensor::new([n, 2, 16], data).unwrap(),
        Tensor::from_fn([n], |_| rng.random_range(0.2..1.0)).unwrap(),
    )
    .unwrap();
    let c = cfg(KernelSpec::default(), Normalization::Softmax, 3);
    let (s, a) = em_route_baseline(&votes, &c, &ActivationParams::identity(2, 16)).unwrap();
    assert!(s.r_norm.data().iter().all(|&r| (r - 0.5).abs() < 1e-15));
    assert!((a.data()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn em_responsibilities_match_direct_gaussian_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let (n, m, d) = (5, 3, 4);
    let votes = random_votes(&mut rng, n, m, d, 0.5);
    let params = ActivationParams::new(
        Tensor::from_fn([m, d + 1], |_| rng.random_range(0.5..1.5)).unwrap(),
    )
    .unwrap();
    let c = cfg(KernelSpec::default(), Normalization::Softmax, 1);
    let (first, act) = em_route_baseline(&votes, &c, &params).unwrap();
    let c2 = RoutingConfig { iterations: 2, ..c };
    let (second, _) = em_route_baseline(&votes, &c2, &params).unwrap();
    let sigma = first.sigma.unwrap();
    for i in 0..n {
        let mut p = vec![0.0; m];
        for j in 0..m {
            let mut dens = 1.0;
            for k in 0..d {
                let var = sigma.at(&[j, k]);
                let e = votes.vote(i, j)[k] - first.v.at(&[j, k]);
                dens *= (-e * e / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            }
            p[j] = act.at(&[j]) * dens;
        }
        let z: f64 = p.iter().sum();
        for j in 0..m {
            let got = second.r_norm.at(&[i, j]);
            assert!((got - p[j] / z).abs() < 1e-9, "{got} vs {}", p[j] / z);
        }
    }
}

// ---- routing-by-agreement variant -------------------------------------------

fn rba_cfg(iterations: usize) -> RoutingConfig {
    cfg(
        KernelSpec::new(Profile::Epanechnikov, Metric::CosineVariant),
        Normalization::Softmax,
        iterations,
    )
}

#[test]
fn rba_single_vote() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let votes = random_votes(&mut rng, 1, 1, 16, 1.0);
    let s = rba_variant_route(&votes, &rba_cfg(1)).unwrap();
    assert_eq!(s.v.data(), votes.votes.data());
}

#[test]
fn rba_first_weights_are_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let votes = random_votes(&mut rng, 4, 2, 16, 1.0);
    let s = rba_variant_route(&votes, &rba_cfg(1)).unwrap();
    assert!(s.r_norm.data().iter().all(|&r| r == 0.5));
}

#[test]
fn rba_matches_unrolled_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let (n, m, d) = (3, 2, 4);
    let votes = random_votes(&mut rng, n, m, d, 0.5);
    let u = |i: usize, j: usize, k: usize| votes.votes.at(&[i, j, k]);
    let softmax2 = |a: f64, b: f64| {
        let (ea, eb) = (a.exp(), b.exp());
        [ea / (ea + eb), eb / (ea + eb)]
    };
    // Iteration 1.
    let r0 = vec![[0.5, 0.5]; n];
    let p1: Vec<[f64; 2]> = r0.iter().map(|r| softmax2(r[0], r[1])).collect();
    let v1: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..d).map(|k| (0..n).map(|i| p1[i][j] * u(i, j, k)).sum()).collect())
        .collect();
    let r1: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let dot = |j: usize| (0..d).map(|k| u(i, j, k) * v1[j][k]).sum::<f64>();
            [r0[i][0] + dot(0), r0[i][1] + dot(1)]
        })
        .collect();
    // Iteration 2.
    let p2: Vec<[f64; 2]> = r1.iter().map(|r| softmax2(r[0], r[1])).collect();
    let v2: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..d).map(|k| (0..n).map(|i| p2[i][j] * u(i, j, k)).sum()).collect())
        .collect();

    let s = rba_variant_route(&votes, &rba_cfg(2)).unwrap();
    for j in 0..m {
        for k in 0..d {
            assert!((s.v.at(&[j, k]) - v2[j][k]).abs() < 1e-12);
        }
    }
    for i in 0..n {
        for j in 0..m {
            assert!((s.r_norm.at(&[i, j]) - p2[i][j]).abs() < 1e-12);
        }
    }
}

// ---- activations -------------------------------------------------------------

#[test]
fn activation_singleton_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let mut votes = random_votes(&mut rng, 1, 1, 16, 0.05);
    votes.activations = Tensor::full([1], 0.8).unwrap();
    let s = state_from(
        Tensor::full([1, 1], 1.0).unwrap(),
        votes.votes.clone().reshape([1, 16]).unwrap(),
    );
    let a = compute_activation(&votes, &s, &ActivationParams::identity(1, 16), KernelSpec::default()).unwrap();
    assert_eq!(a.data(), &[1.0]);

    let n = 4;
    let mut data = Vec::new();
    for _ in 0..n {
        let u: Vec<f64> = (0..16).map(|_| rng.random_range(-0.05..0.05)).collect();
        data.extend_from_slice(&u);
        data.extend_from_slice(&u);
    }
    let votes = VoteTensor::new(Tensor::new([n, 2, 16], data).unwrap(), Tensor::full([n], 0.5).unwrap()).unwrap();
    let s = frem_route(&votes, &RoutingConfig::default()).unwrap();
    let a = compute_activation(&votes, &s, &ActivationParams::identity(2, 16), KernelSpec::default()).unwrap();
    assert_eq!(a.data(), &[0.5, 0.5]);
}

#[test]
fn activation_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for kernel in [KernelSpec::default(), GAUSS_L2] {
        let (n, m, d) = (6, 3, 16);
        let votes = random_votes(&mut rng, n, m, d, 0.05);
        let params = ActivationParams::new(
            Tensor::from_fn([m, d + 1], |k| {
                if k % (d + 1) == 0 {
                    rng.random_range(-0.3..0.1)
                } else {
                    rng.random_range(0.5..1.5)
                }
            })
            .unwrap(),
        )
        .unwrap();
        let s = state_from(
            random_r_norm(&mut rng, n, m),
            Tensor::from_fn([m, d], |_| rng.random_range(-0.05..0.05)).unwrap(),
        );
        let mut logits = vec![0.0; m];
        for j in 0..m {
            for i in 0..n {
                let mut x = params.beta.at(&[j, 0]);
                for k in 0..d {
                    let e = votes.vote(i, j)[k] - params.beta.at(&[j, k + 1]) * s.v.at(&[j, k]);
                    x += if kernel.metric == Metric::L1 { e.abs() } else { e * e };
                }
                let kv = match kernel.profile {
                    Profile::Gaussian => (-x.max(0.0) / 2.0).exp(),
                    Profile::Epanechnikov => (1.0 - x.max(0.0)).max(0.0),
                };
                logits[j] += s.r_norm.at(&[i, j]) * votes.activations.at(&[i]) * kv;
            }
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let a = compute_activation(&votes, &s, &params, kernel).unwrap();
        for j in 0..m {
            assert!((a.at(&[j]) - logits[j].exp() / z).abs() < 1e-9);
        }
    }
}

#[test]
fn rba_activation_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let votes = random_votes(&mut rng, 3, 1, 16, 1.0);
    let s = rba_variant_route(&votes, &rba_cfg(2)).unwrap();
    assert_eq!(rba_activation(&votes, &s).unwrap().data(), &[1.0]);

    for _ in 0..20 {
        let (n, m, d) = (5, 3, 16);
        let votes = random_votes(&mut rng, n, m, d, 0.3);
        let s = rba_variant_route(&votes, &rba_cfg(2)).unwrap();
        let mut logits = vec![0.0; m];
        for j in 0..m {
            let v = &s.v.data()[j * d..(j + 1) * d];
            let agreement: f64 = (0..n)
                .map(|i| s.r_norm.at(&[i, j]) * votes.vote(i, j).iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            let sq: f64 = v.iter().map(|x| x * x).sum();
            assert!((agreement - sq).abs() < 1e-9);
            logits[j] = agreement;
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let a = rba_activation(&votes, &s).unwrap();
        for j in 0..m {
            assert!((a.at(&[j]) - logits[j].exp() / z).abs() < 1e-9);
        }
    }
}

// ---- configuration -------------------------------------------------------------

#[test]
fn cosine_metric_is_only_for_rba() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let votes = random_votes(&mut rng, 2, 2, 16, 1.0);
    let cosine = rba_cfg(2);
    assert!(matches!(frms_route(&votes, &cosine), Err(Error::InvalidConfig(_))));
    assert!(matches!(frem_route(&votes, &cosine), Err(Error::InvalidConfig(_))));
    assert!(rba_variant_route(&votes, &RoutingConfig::default()).is_err());
    let zero_iter = RoutingConfig {
        iterations: 0,
        ..RoutingConfig::default()
    };
    assert!(frem_route(&votes, &zero_iter).is_err());
}

// ---- invariants -----------------------------------------------------------------

fn all_methods(votes: &VoteTensor<f64>, mode: Normalization) -> Vec<(RoutingState<f64>, Tensor<f64>)> {
    let c = cfg(KernelSpec::default(), mode, 2);
    let p = ActivationParams::identity(votes.n_out(), votes.dim());
    let mut out = vec![
        route(RoutingMethod::Frms, votes, &c, &p).unwrap(),
        route(RoutingMethod::Frem, votes, &c, &p).unwrap(),
        route(RoutingMethod::EmBaseline, votes, &c, &p).unwrap(),
    ];
    if mode == Normalization::Softmax {
        out.push(route(RoutingMethod::Rba, votes, &rba_cfg(2), &p).unwrap());
    }
    out
}

#[test]
fn edge_cases_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut zero_acts = random_votes(&mut rng, 5, 3, 16, 0.5);
    zero_acts.activations = Tensor::zeros([5]).unwrap();
    let coincident = VoteTensor::new(Tensor::full([5, 3, 16], 0.25).unwrap(), Tensor::full([5], 0.5).unwrap()).unwrap();
    let single = random_votes(&mut rng, 1, 4, 16, 0.5);
    let far = random_votes(&mut rng, 6, 3, 16, 50.0);
    for votes in [zero_acts, coincident, single, far] {
        for mode in [Normalization::Softmax, Normalization::Plain] {
            for (s, a) in all_methods(&votes, mode) {
                assert!(s.v.data().iter().chain(s.r.data()).chain(a.data()).all(|x| x.is_finite()));
                for sum in row_sums(&s.r_norm) {
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_rows_and_activations_are_distributions(
        seed in any::<u64>(), n in 1usize..20, m in 1usize..8, spread in 0.01f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let votes = random_votes(&mut rng, n, m, 16, spread);
        for mode in [Normalization::Softmax, Normalization::Plain] {
            for (s, a) in all_methods(&votes, mode) {
                for sum in row_sums(&s.r_norm) {
                    prop_assert!((sum - 1.0).abs() < 1e-6);
                }
                if let Some(pi) = &s.pi {
                    prop_assert!((pi.sum_all() - 1.0).abs() < 1e-6);
                }
                prop_assert!((a.sum_all() - 1.0).abs() < 1e-6);
                prop_assert!(a.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn permuting_inputs_permutes_weights(seed in any::<u64>(), n in 2usize..12, m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let votes = random_votes(&mut rng, n, m, 16, 0.05);
        let mut perm: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            perm.swap(k, rng.random_range(0..=k));
        }
        let mut data = Vec::new();
        for &i in &perm {
            for j in 0..m {
                data.extend_from_slice(votes.vote(i, j));
            }
        }
        let acts: Vec<f64> = perm.iter().map(|&i| votes.activations.at(&[i])).collect();
        let permuted = VoteTensor::new(Tensor::new([n, m, 16], data).unwrap(), Tensor::new([n], acts).unwrap()).unwrap();
        for mode in [Normalization::Softmax, Normalization::Plain] {
            let base = all_methods(&votes, mode);
            let moved = all_methods(&permuted, mode);
            for ((s, a), (ps, pa)) in base.iter().zip(&moved) {
                prop_assert!(s.v.max_abs_diff(&ps.v) < 1e-10);
                prop_assert!(a.max_abs_diff(pa) < 1e-10);
                for (new_i, &old_i) in perm.iter().enumerate() {
                    for j in 0..m {
                        prop_assert!((s.r_norm.at(&[old_i, j]) - ps.r_norm.at(&[new_i, j])).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn epanechnikov_update_is_stationary(seed in any::<u64>(), n in 1usize..16, m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let votes = random_votes(&mut rng, n, m, 16, 0.02);
        let r = random_r_norm(&mut rng, n, m);
        let v0 = Tensor::from_fn([m, 16], |_| rng.random_range(-0.02..0.02)).unwrap();
        let (v, _) = frms_step2(&votes, &r, Some(&v0), EPAN_L2).unwrap();
        let h = 1e-6;
        let mut grad_sq = 0.0;
        for k in 0..m * 16 {
            let mut plus = v.clone().into_data();
            let mut minus = plus.clone();
            plus[k] += h;
            minus[k] -= h;
            let f = |data: Vec<f64>| {
                objective(&votes, &state_from(r.clone(), Tensor::new([m, 16], data).unwrap()), EPAN_L2).unwrap()
            };
            let g = (f(plus) - f(minus)) / (2.0 * h);
            grad_sq += g * g;
        }
        prop_assert!(grad_sq.sqrt() < 1e-6, "gradient norm {}", grad_sq.sqrt());
    }

    #[test]
    fn gaussian_mean_shift_never_decreases_objective(seed in any::<u64>(), n in 1usize..16, m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let votes = random_votes(&mut rng, n, m, 16, 0.3);
        let r = random_r_norm(&mut rng, n, m);
        let mut v = Tensor::from_fn([m, 16], |_| rng.random_range(-0.3..0.3)).unwrap();
        let mut prev = objective(&votes, &state_from(r.clone(), v.clone()), GAUSS_L2).unwrap();
        for _ in 0..8 {
            v = frms_step2(&votes, &r, Some(&v), GAUSS_L2).unwrap().0;
            let f = objective(&votes, &state_from(r.clone(), v.clone()), GAUSS_L2).unwrap();
            prop_assert!(f >= prev - 1e-12, "{f} < {prev}");
            prev = f;
        }
    }
}

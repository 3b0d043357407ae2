//! Defense mechanisms applied at the engine's aggregation and broadcast
//! points: self-centered clipping of received updates and local Gaussian
//! noise on outgoing updates.

use crate::numkit::{NumError, ParamVec, StreamRng};
use serde::{Deserialize, Serialize};

/// Clipping radius for self-centered aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub tau: f64,
}

/// Standard deviation of the per-coordinate Gaussian noise added to each
/// outgoing update. No privacy accounting is attached to it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
}

/// `CLIP(x, tau) = min(1, tau/||x||) * x`; the zero radius maps everything
/// to the zero vector.
pub fn clip(x: &ParamVec, tau: f64) -> ParamVec {
    let norm = x.l2_norm();
    if norm <= tau {
        return x.clone();
    }
    if tau <= 0.0 {
        return ParamVec::zeros(x.len());
    }
    x.scale(tau / norm).expect("finite rescale")
}

/// Self-centered clipping aggregation:
/// `sum over nn(v) of w * (own + CLIP(received - own, tau))` with uniform
/// weights `w = 1/|nn(v)|`; the own update contributes `CLIP(0) = 0`.
pub fn self_centered_aggregate(
    own: &ParamVec,
    received: &[&ParamVec],
    tau: f64,
) -> Result<ParamVec, NumError> {
    let k = received.len() + 1;
    let w = 1.0 / k as f64;
    // own term: w * (own + CLIP(0, tau)) = w * own
    let mut acc = own.scale(w)?;
    for update in received {
        let diff = update.sub(own)?;
        let clipped = clip(&diff, tau);
        let term = own.add(&clipped)?;
        acc = ParamVec::axpy(w, &term, &acc)?;
    }
    Ok(acc)
}

/// Per-coordinate Gaussian perturbation of an outgoing update.
pub fn noisy_update(x: &ParamVec, rng: &mut StreamRng, sigma: f64) -> ParamVec {
    if sigma == 0.0 {
        return x.clone();
    }
    let values: Vec<f64> = x.as_slice().iter().map(|&v| v + rng.normal(0.0, sigma)).collect();
    ParamVec::from_values(values).expect("finite noise")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(values: &[f64]) -> ParamVec {
        ParamVec::from_values(values.to_vec()).unwrap()
    }

    #[test]
    fn clip_rescales_outside_the_sphere() {
        // ||x|| = 2, tau = 1 -> x/2
        let x = pv(&[2.0, 0.0]);
        assert_eq!(clip(&x, 1.0), pv(&[1.0, 0.0]));
    }

    #[test]
    fn clip_keeps_interior_points() {
        let x = pv(&[0.3, 0.4]);
        assert_eq!(clip(&x, 1.0), x);
    }

    #[test]
    fn clip_zero_radius_gives_zero_vector() {
        assert_eq!(clip(&pv(&[5.0, -1.0]), 0.0), pv(&[0.0, 0.0]));
    }

    #[test]
    fn clip_norm_bound_holds() {
        let mut rng = StreamRng::new(17, 1);
        for _ in 0..10_000 {
            let x = pv(&[
                rng.range_f64(-10.0, 10.0),
                rng.range_f64(-10.0, 10.0),
                rng.range_f64(-10.0, 10.0),
            ]);
            let tau = rng.range_f64(0.0, 5.0);
            assert!(clip(&x, tau).l2_norm() <= tau + 1e-12);
        }
    }

    #[test]
    fn tau_zero_degenerates_to_non_collaborative() {
        let own = pv(&[0.5, -1.5]);
        let received = [pv(&[3.0, 3.0]), pv(&[-2.0, 0.0])];
        let refs: Vec<&ParamVec> = received.iter().collect();
        let out = self_centered_aggregate(&own, &refs, 0.0).unwrap();
        for i in 0..own.len() {
            assert!((out[i] - own[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_tau_equals_plain_mean() {
        let own = pv(&[0.5, -1.5]);
        let received = [pv(&[3.0, 3.0]), pv(&[-2.0, 0.0])];
        let refs: Vec<&ParamVec> = received.iter().collect();
        let out = self_centered_aggregate(&own, &refs, 1e6).unwrap();
        let all = [own.clone(), received[0].clone(), received[1].clone()];
        let mean = ParamVec::mean(all.iter()).unwrap();
        for i in 0..own.len() {
            assert!((out[i] - mean[i]).abs() <= 1e-9);
        }
    }

    #[test]
    fn two_neighbor_hand_case() {
        // own = [0], received = [[3]], tau = 1:
        // 1/2*(0 + CLIP(0)) + 1/2*(0 + CLIP(3 -> 1)) = [0.5]
        let out = self_centered_aggregate(&pv(&[0.0]), &[&pv(&[3.0])], 1.0).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn per_neighbor_contribution_norms_grow_with_tau() {
        // each neighbor's clipped displacement has norm min(||d||, tau),
        // non-decreasing in tau; the norm of their sum need not be
        let mut rng = StreamRng::new(23, 1);
        for _ in 0..50 {
            let own = pv(&[rng.range_f64(-1.0, 1.0), rng.range_f64(-1.0, 1.0)]);
            let received: Vec<ParamVec> = (0..3)
                .map(|_| pv(&[rng.range_f64(-4.0, 4.0), rng.range_f64(-4.0, 4.0)]))
                .collect();
            for update in &received {
                let diff = update.sub(&own).unwrap();
                let mut prev = -1.0;
                for step in 0..20 {
                    let tau = 0.25 * step as f64;
                    let norm = clip(&diff, tau).l2_norm();
                    assert!(norm >= prev - 1e-12, "tau={tau}: {norm} < {prev}");
                    assert!((norm - diff.l2_norm().min(tau)).abs() < 1e-12);
                    prev = norm;
                }
            }
        }
    }

    #[test]
    fn single_neighbor_displacement_grows_with_tau() {
        let mut rng = StreamRng::new(29, 1);
        for _ in 0..50 {
            let own = pv(&[rng.range_f64(-1.0, 1.0), rng.range_f64(-1.0, 1.0)]);
            let update = pv(&[rng.range_f64(-4.0, 4.0), rng.range_f64(-4.0, 4.0)]);
            let mut prev = -1.0;
            for step in 0..20 {
                let tau = 0.25 * step as f64;
                let out = self_centered_aggregate(&own, &[&update], tau).unwrap();
                let dist = out.sub(&own).unwrap().l2_norm();
                assert!(dist >= prev - 1e-12, "tau={tau}: {dist} < {prev}");
                prev = dist;
            }
        }
    }

    #[test]
    fn aggregate_is_continuous_in_tau() {
        let own = pv(&[0.1, 0.2]);
        let received = [pv(&[2.0, -1.0]), pv(&[-0.5, 0.7])];
        let refs: Vec<&ParamVec> = received.iter().collect();
        let mut prev = self_centered_aggregate(&own, &refs, 0.0).unwrap();
        for step in 1..200 {
            let tau = 0.02 * step as f64;
            let out = self_centered_aggregate(&own, &refs, tau).unwrap();
            let jump = out.sub(&prev).unwrap().l2_norm();
            assert!(jump <= 0.05, "jump {jump} at tau {tau}");
            prev = out;
        }
    }

    #[test]
    fn zero_sigma_is_identity() {
        let x = pv(&[1.0, -2.0]);
        let mut rng = StreamRng::new(5, 9);
        assert_eq!(noisy_update(&x, &mut rng, 0.0), x);
    }

    #[test]
    fn noise_moments_match_sigma() {
        let sigma = 0.7;
        let x = pv(&[2.0]);
        let mut rng = StreamRng::new(5, 9);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| noisy_update(&x, &mut rng, sigma)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        assert!((std - sigma).abs() / sigma < 0.02, "std {std}");
        assert!((mean - 2.0).abs() < 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
    }
}

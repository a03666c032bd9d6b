use super::{ObjectSpec, SceneConfig, Shape, WrapModel};
use crate::kinematics::{AngleVector, JOINTS};
use crate::nn::Rng;

/// Empty-gripper curl: a total bend `T` shared out over the joints by random
/// positive weights, so angles are monotone and the fingertip reaches `T`.
pub fn sample_free_pose(rng: &mut Rng, range: (f64, f64)) -> AngleVector {
    let (lo, hi) = range;
    let total = rng.uniform_range(0.0, hi - lo);
    let mut w = [0.0; JOINTS];
    for v in &mut w {
        *v = rng.uniform_range(0.2, 1.0);
    }
    let norm: f64 = w.iter().sum();
    let mut acc = 0.0;
    let mut out = [0.0; JOINTS];
    for i in 0..JOINTS {
        acc += w[i] / norm;
        out[i] = (lo + total * acc).min(hi);
    }
    out
}

/// Curl around an object: the wrap model's profile for the shape, opened by
/// one `step` per size class, plus Gaussian noise. Clamped to the mechanical
/// range and kept monotone.
pub fn sample_grasp_pose(obj: &ObjectSpec, wrap: &WrapModel, rng: &mut Rng, range: (f64, f64)) -> AngleVector {
    let (profile, dir) = match obj.shape {
        Shape::Box => (&wrap.box_profile, &wrap.box_direction),
        Shape::Cylinder => (&wrap.cylinder_profile, &wrap.cylinder_direction),
    };
    let mut out = [0.0; JOINTS];
    let mut prev = range.0;
    for i in 0..JOINTS {
        let t = profile[i] - wrap.step * obj.size as f64 * dir[i] + wrap.noise_std * rng.normal();
        prev = t.clamp(range.0, range.1).max(prev);
        out[i] = prev;
    }
    out
}

pub fn sample_pose(rng: &mut Rng, grasp: Option<&ObjectSpec>, cfg: &SceneConfig) -> AngleVector {
    match grasp {
        None => sample_free_pose(rng, cfg.theta_range),
        Some(obj) => sample_grasp_pose(obj, &cfg.wrap, rng, cfg.theta_range),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn monotone_in_range(a: &AngleVector) -> bool {
        a.windows(2).all(|w| w[0] <= w[1]) && a.iter().all(|t| (0.0..=120.0).contains(t))
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SceneConfig::default();
        let obj = ObjectSpec::new(Shape::Box, 2);
        assert_eq!(sample_pose(&mut Rng::new(4), None, &cfg), sample_pose(&mut Rng::new(4), None, &cfg));
        assert_eq!(sample_pose(&mut Rng::new(4), Some(&obj), &cfg), sample_pose(&mut Rng::new(4), Some(&obj), &cfg));
    }

    #[test]
    fn free_poses_are_monotone_and_span_the_tip_range() {
        let cfg = SceneConfig::default();
        let mut rng = Rng::new(1);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..1000 {
            let a = sample_pose(&mut rng, None, &cfg);
            assert!(monotone_in_range(&a));
            lo = lo.min(a[5]);
            hi = hi.max(a[5]);
        }
        assert!(hi - lo >= 100.0, "tip range {lo}..{hi}");
    }

    #[test]
    fn larger_objects_curl_less() {
        let cfg = SceneConfig::default();
        for shape in Shape::ALL {
            let mean_total = |size| {
                let mut rng = Rng::new(9);
                let obj = ObjectSpec::new(shape, size);
                (0..1000).map(|_| sample_pose(&mut rng, Some(&obj), &cfg).iter().sum::<f64>()).sum::<f64>() / 1000.0
            };
            assert!(mean_total(3) < mean_total(0));
        }
    }

    #[test]
    fn grasp_poses_are_monotone() {
        let cfg = SceneConfig::default();
        let mut rng = Rng::new(2);
        for shape in Shape::ALL {
            for size in 0..4 {
                for _ in 0..200 {
                    assert!(monotone_in_range(&sample_pose(&mut rng, Some(&ObjectSpec::new(shape, size)), &cfg)));
                }
            }
        }
    }
}

use nalgebra::{Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::epnp::epnp;
use super::{AssociationError, MatchSet, PairFilterConfig};
use crate::geometry::{CameraIntrinsics, RigidTransform};

#[derive(Clone, Debug, PartialEq)]
pub struct PnpEstimate {
    /// Maps points from the 3-D frame into the camera frame.
    pub pose: RigidTransform,
    pub inliers: Vec<bool>,
}

impl PnpEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }
}

fn fnv1a(state: &mut u64, bytes: &[u8]) {
    for b in bytes {
        *state ^= *b as u64;
        *state = state.wrapping_mul(0x0000_0100_0000_01b3);
    }
}

fn residual(pose: &RigidTransform, k: &CameraIntrinsics, p: &Vector3<f64>, px: &Vector2<f64>) -> f64 {
    let c = pose.transform_point(p);
    if c.z <= 1e-9 {
        return f64::INFINITY;
    }
    (k.project_unchecked(&c) - px).norm()
}

/// Hypotheses needed to draw one all-inlier 4-sample with probability
/// `confidence` when a fraction `w` of correspondences are inliers.
fn required_iterations(w: f64, confidence: f64) -> usize {
    if confidence >= 1.0 {
        return usize::MAX;
    }
    let p_good = w.powi(4);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return usize::MAX;
    }
    ((1.0 - confidence).ln() / (1.0 - p_good).ln()).ceil().max(1.0) as usize
}

/// RANSAC over minimal 4-point EPnP samples followed by an EPnP refit on the
/// consensus set.
///
/// The sampler is seeded from the correspondence content after sorting, so the
/// result does not depend on input order.
pub fn solve_pnp_ransac(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
    cfg: &PairFilterConfig,
) -> Result<PnpEstimate, AssociationError> {
    let n = points.len();
    if n < 4 || pixels.len() != n {
        return Err(AssociationError::DegenerateGeometry(format!("need >= 4 correspondences, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let key = |i: usize| {
        [points[i].x, points[i].y, points[i].z, pixels[i].x, pixels[i].y].map(f64::to_bits)
    };
    order.sort_by_key(|&i| key(i));
    let mut seed = 0xcbf2_9ce4_8422_2325u64;
    for &i in &order {
        for v in key(i) {
            fnv1a(&mut seed, &v.to_le_bytes());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<_> = order.iter().map(|&i| points[i]).collect();
    let pix: Vec<_> = order.iter().map(|&i| pixels[i]).collect();
    let thr = cfg.ransac_reproj_px;

    let score = |pose: &RigidTransform| -> (usize, f64) {
        let mut count = 0;
        let mut sum = 0.0;
        for (p, px) in pts.iter().zip(&pix) {
            let e = residual(pose, k, p, px);
            if e < thr {
                count += 1;
                sum += e;
            }
        }
        (count, sum)
    };

    let mut best: Option<(RigidTransform, usize, f64)> = None;
    let mut sp = [Vector3::zeros(); 4];
    let mut sx = [Vector2::zeros(); 4];
    let mut budget = cfg.ransac_iters;
    let mut it = 0;
    while it < budget {
        it += 1;
        let idx = sample(&mut rng, n, 4);
        for (slot, i) in idx.iter().enumerate() {
            sp[slot] = pts[i];
            sx[slot] = pix[i];
        }
        let Ok(pose) = epnp(&sp, &sx, k) else { continue };
        let (count, sum) = score(&pose);
        let better = match &best {
            None => true,
            Some((_, c, s)) => count > *c || (count == *c && sum < *s),
        };
        if better {
            best = Some((pose, count, sum));
            budget = budget.min(required_iterations(count as f64 / n as f64, cfg.ransac_confidence));
        }
    }
    let Some((mut pose, mut count, _)) = best else {
        return Err(AssociationError::DegenerateGeometry("every minimal sample was degenerate".into()));
    };
    if count < 4 {
        return Err(AssociationError::DegenerateGeometry(format!("only {count} inliers")));
    }
    // refit until the consensus set stops changing
    let mut mask: Vec<bool> = pts.iter().zip(&pix).map(|(p, x)| residual(&pose, k, p, x) < thr).collect();
    for _ in 0..5 {
        let (ip, ix): (Vec<_>, Vec<_>) = pts
            .iter()
            .zip(&pix)
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|((p, x), _)| (*p, *x))
            .unzip();
        let Ok(refit) = epnp(&ip, &ix, k) else { break };
        let new_mask: Vec<bool> = pts.iter().zip(&pix).map(|(p, x)| residual(&refit, k, p, x) < thr).collect();
        let new_count = new_mask.iter().filter(|b| **b).count();
        if new_count < 4 {
            break;
        }
        pose = refit;
        let stable = new_mask == mask;
        mask = new_mask;
        count = new_count;
        if stable {
            break;
        }
    }
    if count < 4 {
        return Err(AssociationError::DegenerateGeometry(format!("only {count} inliers")));
    }
    let mut inliers = vec![false; n];
    for (sorted, &orig) in order.iter().enumerate() {
        inliers[orig] = mask[sorted];
    }
    Ok(PnpEstimate { pose, inliers })
}

/// Relative camera pose `T_{C_A C_G}` from ground-camera points and aerial
/// pixels. `points_cam_g` is indexed by ground keypoint (`Match::a`) and
/// `pixels_a` by aerial keypoint (`Match::b`). The returned mask covers every
/// match; matches without a depth are never inliers.
pub fn estimate_pose_epnp(
    matches: &MatchSet,
    points_cam_g: &[Option<Vector3<f64>>],
    pixels_a: &[Vector2<f64>],
    k_a: &CameraIntrinsics,
    cfg: &PairFilterConfig,
) -> Result<PnpEstimate, AssociationError> {
    let mut slots = Vec::new();
    let mut pts = Vec::new();
    let mut pix = Vec::new();
    for (i, m) in matches.iter().enumerate() {
        if let (Some(Some(p)), Some(px)) = (points_cam_g.get(m.a), pixels_a.get(m.b)) {
            slots.push(i);
            pts.push(*p);
            pix.push(*px);
        }
    }
    let est = solve_pnp_ransac(&pts, &pix, k_a, cfg)?;
    let mut inliers = vec![false; matches.len()];
    for (s, &i) in slots.iter().enumerate() {
        inliers[i] = est.inliers[s];
    }
    Ok(PnpEstimate { pose: est.pose, inliers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::Match;
    use nalgebra::UnitQuaternion;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(450.0, 450.0, 320.0, 240.0, 640, 480).unwrap()
    }

    struct Scene {
        truth: RigidTransform,
        points: Vec<Vector3<f64>>,
        pixels: Vec<Vector2<f64>>,
        outlier: Vec<bool>,
    }

    fn scene(seed: u64, n: usize, outlier_frac: f64, sigma: f64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = RigidTransform::new(
            UnitQuaternion::from_euler_angles(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-3.0..3.0),
            ),
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        );
        let inv = truth.inverse();
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let n_out = (n as f64 * outlier_frac).round() as usize;
        let mut s = Scene { truth, points: vec![], pixels: vec![], outlier: vec![] };
        while s.points.len() < n {
            let c = Vector3::new(rng.random_range(-4.0..4.0), rng.random_range(-3.0..3.0), rng.random_range(4.0..12.0));
            let mut px = k().project_unchecked(&c);
            if !k().contains(&px) {
                continue;
            }
            let is_out = s.points.len() < n_out;
            if is_out {
                px = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            } else if sigma > 0.0 {
                px += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            s.points.push(inv.transform_point(&c));
            s.pixels.push(px);
            s.outlier.push(is_out);
        }
        s
    }

    #[test]
    fn noiseless_recovery() {
        let s = scene(1, 20, 0.0, 0.0);
        let est = solve_pnp_ransac(&s.points, &s.pixels, &k(), &PairFilterConfig::default()).unwrap();
        assert!(est.pose.rotation_angle_to(&s.truth) < 1e-4);
        assert!((est.pose.translation() - s.truth.translation()).norm() < 1e-4);
        assert_eq!(est.inlier_count(), 20);
    }

    #[test]
    fn outliers_rejected() {
        for seed in 0..10 {
            let s = scene(100 + seed, 100, 0.3, 0.5);
            let est = solve_pnp_ransac(&s.points, &s.pixels, &k(), &PairFilterConfig::default()).unwrap();
            let injected = s.outlier.iter().filter(|o| **o).count();
            let excluded = s.outlier.iter().zip(&est.inliers).filter(|(o, i)| **o && !**i).count();
            assert!(excluded as f64 >= 0.95 * injected as f64, "seed {seed}: {excluded}/{injected}");
            assert!((est.pose.translation() - s.truth.translation()).norm() < 0.05);
            assert!(est.pose.rotation_angle_to(&s.truth) < 1f64.to_radians());
        }
    }

    #[test]
    fn permutation_invariant() {
        let s = scene(7, 60, 0.3, 0.5);
        let cfg = PairFilterConfig::default();
        let base = solve_pnp_ransac(&s.points, &s.pixels, &k(), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut perm: Vec<usize> = (0..60).collect();
        perm.shuffle(&mut rng);
        let pts: Vec<_> = perm.iter().map(|&i| s.points[i]).collect();
        let pix: Vec<_> = perm.iter().map(|&i| s.pixels[i]).collect();
        let est = solve_pnp_ransac(&pts, &pix, &k(), &cfg).unwrap();
        assert_eq!(est.pose, base.pose);
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(est.inliers[j], base.inliers[i]);
        }
    }

    #[test]
    fn match_level_wrapper_masks_missing_depths() {
        let s = scene(3, 30, 0.0, 0.0);
        let matches = MatchSet {
            pairs: (0..30).map(|i| Match { a: i, b: i, distance: 0.0 }).collect(),
        };
        let mut pts: Vec<Option<Vector3<f64>>> = s.points.iter().map(|p| Some(*p)).collect();
        pts[5] = None;
        let est = estimate_pose_epnp(&matches, &pts, &s.pixels, &k(), &PairFilterConfig::default()).unwrap();
        assert_eq!(est.inliers.len(), 30);
        assert!(!est.inliers[5]);
        assert_eq!(est.inlier_count(), 29);
    }

    #[test]
    fn adaptive_iteration_count() {
        assert_eq!(required_iterations(1.0, 0.999), 1);
        assert_eq!(required_iterations(0.0, 0.999), usize::MAX);
        assert_eq!(required_iterations(0.5, 1.0), usize::MAX);
        // 0.7^4 = 0.2401: ln(0.001) / ln(0.7599) = 25.2
        assert_eq!(required_iterations(0.7, 0.999), 26);
    }

    #[test]
    fn too_few_is_degenerate() {
        let s = scene(4, 3, 0.0, 0.0);
        assert!(solve_pnp_ransac(&s.points, &s.pixels, &k(), &PairFilterConfig::default()).is_err());
    }
}

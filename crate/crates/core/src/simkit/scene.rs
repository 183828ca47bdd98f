use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{random_descriptor, SimLandmark};

/// Axis-aligned box in the UGV world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

/// One face of a box: an origin corner, two spanning edges and the outward normal.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Face {
    pub origin: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl Face {
    pub fn area(&self) -> f64 {
        self.u.norm() * self.v.norm()
    }
}

impl SceneBox {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    /// Every face except the bottom one.
    pub(crate) fn faces(&self) -> [Face; 5] {
        let (a, b) = (self.min, self.max);
        let d = b - a;
        let (ex, ey, ez) = (Vector3::new(d.x, 0.0, 0.0), Vector3::new(0.0, d.y, 0.0), Vector3::new(0.0, 0.0, d.z));
        let face = |origin, u, v, normal| Face { origin, u, v, normal };
        [
            face(a, ex, ez, -Vector3::y()),
            face(Vector3::new(a.x, b.y, a.z), ex, ez, Vector3::y()),
            face(a, ey, ez, -Vector3::x()),
            face(Vector3::new(b.x, a.y, a.z), ey, ez, Vector3::x()),
            face(Vector3::new(a.x, a.y, b.z), ex, ey, Vector3::z()),
        ]
    }

    /// Parameter interval where the segment `p + s (q - p)` lies inside the box.
    pub(crate) fn clip_segment(&self, p: &Vector3<f64>, q: &Vector3<f64>) -> Option<(f64, f64)> {
        let d = q - p;
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if p[k] < self.min[k] || p[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let s0 = (self.min[k] - p[k]) / d[k];
            let s1 = (self.max[k] - p[k]) / d[k];
            lo = lo.max(s0.min(s1));
            hi = hi.min(s0.max(s1));
        }
        (lo <= hi).then_some((lo, hi))
    }
}

/// True when the open segment from `eye` to `target` crosses some box.
/// The box a surface point sits on only blocks it when seen from behind.
pub(crate) fn occluded(boxes: &[SceneBox], eye: &Vector3<f64>, target: &Vector3<f64>) -> bool {
    const EPS: f64 = 1e-7;
    boxes.iter().any(|b| {
        b.clip_segment(eye, target)
            .is_some_and(|(lo, hi)| lo < 1.0 - EPS && hi > EPS && hi - lo > EPS)
    })
}

/// A row of facade segments at `y` in [12, 13] plus scattered blocks in front.
pub(crate) fn block_field(rng: &mut impl Rng, x0: f64, x1: f64, out: &mut Vec<SceneBox>) {
    let mut x = x0;
    while x < x1 {
        let h = rng.random_range(4.0..8.0);
        out.push(SceneBox::new(Vector3::new(x, 12.0, 0.0), Vector3::new(x + 4.0, 13.0, h)));
        x += 4.0;
    }
    let blocks = ((x1 - x0) / 6.0).ceil() as usize;
    for _ in 0..blocks {
        let cx = rng.random_range(x0..x1);
        let cy = rng.random_range(5.0..9.0);
        let (w, d, h) = (rng.random_range(1.0..3.0), rng.random_range(1.0..2.0), rng.random_range(1.0..3.0));
        out.push(SceneBox::new(
            Vector3::new(cx - w / 2.0, cy - d / 2.0, 0.0),
            Vector3::new(cx + w / 2.0, cy + d / 2.0, h),
        ));
    }
}

/// Uniform landmarks on every non-bottom face, Poisson-free: the count per
/// face is the rounded expected value.
pub(crate) fn place_landmarks(rng: &mut impl Rng, boxes: &[SceneBox], density: f64) -> Vec<SimLandmark> {
    let mut out = Vec::new();
    for (region, b) in boxes.iter().enumerate() {
        for f in b.faces() {
            let count = (f.area() * density).round() as usize;
            for _ in 0..count {
                let (a, c) = (rng.random::<f64>(), rng.random::<f64>());
                out.push(SimLandmark {
                    position: f.origin + f.u * a + f.v * c,
                    normal: f.normal,
                    descriptor: random_descriptor(rng),
                    region: region as u32,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> SceneBox {
        SceneBox::new(Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0))
    }

    #[test]
    fn faces_point_outward() {
        let b = unit();
        let centre = Vector3::new(0.5, 0.5, 0.5);
        for f in b.faces() {
            let mid = f.origin + 0.5 * (f.u + f.v);
            assert!((mid - centre).dot(&f.normal) > 0.49);
            assert!((f.area() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn occlusion_respects_own_face() {
        let b = [unit()];
        let front = Vector3::new(0.5, 0.0, 0.5);
        let back = Vector3::new(0.5, 1.0, 0.5);
        let eye = Vector3::new(0.5, -5.0, 0.5);
        assert!(!occluded(&b, &eye, &front));
        assert!(occluded(&b, &eye, &back));
        assert!(!occluded(&b, &Vector3::new(5.0, -5.0, 0.5), &Vector3::new(5.0, 5.0, 0.5)));
    }
}

use nalgebra::{DMatrix, Vector3};

use crate::camera::Camera;
use crate::error::{Error, Result};

/// Singular-value ratio below which the linear system is treated as having
/// no unique solution.
pub const DEGENERATE_RATIO: f64 = 1e-9;

/// Linear (DLT) triangulation from pixel observations, solved in normalized
/// image coordinates.
pub fn triangulate(obs: &[(Camera, f64, f64)]) -> Result<Vector3<f64>> {
    if obs.len() < 2 {
        return Err(Error::NotEnough {
            what: "observations",
            needed: 2,
            got: obs.len(),
        });
    }
    let c0 = obs[0].0.center();
    let spread = obs
        .iter()
        .map(|(c, _, _)| (c.center() - c0).norm())
        .fold(0.0, f64::max);
    let scale = obs
        .iter()
        .map(|(c, _, _)| c.center().norm())
        .fold(1.0, f64::max);
    if spread <= 1e-12 * scale {
        return Err(Error::Degenerate(
            "all observing cameras share one centre".into(),
        ));
    }
    let mut a = DMatrix::zeros(2 * obs.len(), 4);
    for (k, (cam, u, v)) in obs.iter().enumerate() {
        let n = cam.normalize_pixel(*u, *v);
        let r = cam.rotation_matrix();
        let t = cam.translation;
        for (row, coord, axis) in [(2 * k, n.x, 0), (2 * k + 1, n.y, 1)] {
            let mut norm = 0.0;
            for c in 0..4 {
                let p3 = if c < 3 { r[(2, c)] } else { t.z };
                let pi = if c < 3 { r[(axis, c)] } else { t[axis] };
                a[(row, c)] = coord * p3 - pi;
                norm += a[(row, c)] * a[(row, c)];
            }
            let norm = norm.sqrt();
            if norm > 0.0 {
                for c in 0..4 {
                    a[(row, c)] /= norm;
                }
            }
        }
    }
    let svd = a.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Degenerate("triangulation SVD failed".into()))?;
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    if s[order[2]] < DEGENERATE_RATIO * s[order[0]] {
        return Err(Error::Degenerate("observation rays are parallel".into()));
    }
    let h = vt.row(order[3]);
    if h[3].abs() < 1e-12 * h.norm() {
        return Err(Error::Degenerate("point lies at infinity".into()));
    }
    Ok(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Largest angle (radians) between viewing rays from the camera centres to `p`.
pub fn triangulation_angle(cams: &[&Camera], p: &Vector3<f64>) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..cams.len() {
        for j in i + 1..cams.len() {
            let a = p - cams[i].center();
            let b = p - cams[j].center();
            let c = (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0);
            best = best.max(c.acos());
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use nalgebra::Point3;

    fn intr() -> Intrinsics {
        Intrinsics {
            fx: 400.0,
            fy: 400.0,
            cx: 200.0,
            cy: 150.0,
            width: 400,
            height: 300,
        }
    }

    fn observe(cams: &[Camera], p: &Vector3<f64>) -> Vec<(Camera, f64, f64)> {
        cams.iter()
            .map(|c| {
                let (uv, _) = c.project(p).unwrap();
                (*c, uv.x, uv.y)
            })
            .collect()
    }

    #[test]
    fn two_noiseless_views_recover_point() {
        let p = Vector3::new(0.0, 0.0, 5.0);
        let cams = [
            Camera::identity(&intr()),
            Camera::look_at(
                &intr(),
                &Point3::new(1.0, 0.0, 0.0),
                &Point3::from(p),
                &Vector3::y(),
            ),
        ];
        let q = triangulate(&observe(&cams, &p)).unwrap();
        assert!((q - p).norm() < 1e-6);
    }

    #[test]
    fn three_views_reproject_exactly() {
        let p = Vector3::new(0.3, -0.2, 0.1);
        let cams: Vec<_> = [(-1.0, 0.0, -6.0), (0.5, 0.4, -6.0), (1.2, -0.3, -5.5)]
            .iter()
            .map(|&(x, y, z)| {
                Camera::look_at(
                    &intr(),
                    &Point3::new(x, y, z),
                    &Point3::origin(),
                    &Vector3::y(),
                )
            })
            .collect();
        let obs = observe(&cams, &p);
        let q = triangulate(&obs).unwrap();
        for (c, u, v) in &obs {
            let (uv, _) = c.project(&q).unwrap();
            assert!((uv.x - u).hypot(uv.y - v) < 1e-6);
        }
    }

    #[test]
    fn shared_centre_is_degenerate() {
        let cam = Camera::identity(&intr());
        let obs = vec![(cam, 100.0, 100.0), (cam, 120.0, 90.0)];
        assert!(matches!(triangulate(&obs), Err(Error::Degenerate(_))));
    }

    #[test]
    fn parallel_rays_are_degenerate() {
        let a = Camera::identity(&intr());
        let mut b = a;
        b.translation = Vector3::new(-1.0, 0.0, 0.0);
        // same pixel in both views: rays are parallel
        let obs = vec![(a, 200.0, 150.0), (b, 200.0, 150.0)];
        assert!(matches!(triangulate(&obs), Err(Error::Degenerate(_))));
    }

    #[test]
    fn one_observation_is_not_enough() {
        let obs = vec![(Camera::identity(&intr()), 1.0, 1.0)];
        assert!(matches!(triangulate(&obs), Err(Error::NotEnough { .. })));
    }
}

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{quaternion_to_matrix, sh_to_rgb, sigmoid, RenderSettings, Splat};
use crate::camera::Camera;

/// Added to every projected 2D covariance as an anti-aliasing floor.
pub const COV2D_FLOOR: f64 = 0.3;

/// A splat in screen space, together with the intermediates the backward
/// pass needs.
#[derive(Debug, Clone)]
pub struct ProjectedSplat {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub alpha: f64,
    pub rgb: [f64; 3],
    /// Inclusive pixel bounding box `[x0, x1, y0, y1]` of the cutoff ellipse,
    /// clipped to the image; `None` when it misses the image.
    pub bbox: Option<[usize; 4]>,
    pub(crate) cam_point: Vector3<f64>,
    pub(crate) jacobian: Matrix2x3<f64>,
    pub(crate) view_cov: Matrix3<f64>,
    pub(crate) rot: Matrix3<f64>,
    pub(crate) scales: Vector3<f64>,
}

/// EWA projection of one splat. Returns `None` when the centre is in front
/// of the near plane (culled).
pub fn project_splat(s: &Splat, cam: &Camera, settings: &RenderSettings) -> Option<ProjectedSplat> {
    let view = cam.rotation_matrix();
    let t = view * Vector3::from(s.position) + cam.translation;
    if !(t.z >= settings.near) {
        return None;
    }
    let (x, y, z) = (t.x, t.y, t.z);
    let jacobian = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    );
    let rot = quaternion_to_matrix(&s.rotation);
    let scales = Vector3::from(s.log_scale.map(f64::exp));
    let m = rot * Matrix3::from_diagonal(&scales);
    let sigma = m * m.transpose();
    let view_cov = view * sigma * view.transpose();
    let cov2d = jacobian * view_cov * jacobian.transpose() + Matrix2::identity() * COV2D_FLOOR;
    let det = cov2d.determinant();
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let mean2d = cam.project_camera_point(&t);

    let rx = settings.cutoff * cov2d[(0, 0)].sqrt();
    let ry = settings.cutoff * cov2d[(1, 1)].sqrt();
    let bbox = pixel_span(mean2d.x, rx, settings.width)
        .zip(pixel_span(mean2d.y, ry, settings.height))
        .map(|((x0, x1), (y0, y1))| [x0, x1, y0, y1]);

    Some(ProjectedSplat {
        mean2d,
        cov2d,
        depth: z,
        conic,
        alpha: sigmoid(s.opacity_logit),
        rgb: s.color.map(sh_to_rgb),
        bbox,
        cam_point: t,
        jacobian,
        view_cov,
        rot,
        scales,
    })
}

fn pixel_span(center: f64, radius: f64, size: usize) -> Option<(usize, usize)> {
    let lo = (center - radius).ceil().max(0.0);
    let hi = (center + radius).floor().min(size as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as usize, hi as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;

    fn cam() -> Camera {
        Camera::identity(&Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 64.0,
            cy: 64.0,
            width: 128,
            height: 128,
        })
    }

    #[test]
    fn on_axis_projection() {
        let s = Splat::from_rgb([0.0, 0.0, 5.0], [0.5; 3], 0.1, 0.5);
        let p = project_splat(&s, &cam(), &RenderSettings::new(128, 128)).unwrap();
        assert_eq!((p.mean2d.x, p.mean2d.y, p.depth), (64.0, 64.0, 5.0));
    }

    #[test]
    fn isotropic_cov2d_matches_symbolic_jacobian() {
        // on axis J = [[f/z, 0, 0], [0, f/z, 0]], so J (eps I) J^T = (f/z)^2 eps I
        let eps: f64 = 0.01;
        let z = 4.0;
        let s = Splat::from_rgb([0.0, 0.0, z], [0.5; 3], eps.sqrt(), 0.5);
        let p = project_splat(&s, &cam(), &RenderSettings::new(128, 128)).unwrap();
        let want = (100.0 / z) * (100.0 / z) * eps + COV2D_FLOOR;
        assert!((p.cov2d[(0, 0)] - want).abs() < 1e-9);
        assert!((p.cov2d[(1, 1)] - want).abs() < 1e-9);
        assert!(p.cov2d[(0, 1)].abs() < 1e-12);
        assert!((p.conic * p.cov2d - Matrix2::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn near_plane_culls() {
        let s = Splat::from_rgb([0.0, 0.0, 0.001], [0.5; 3], 0.1, 0.5);
        assert!(project_splat(&s, &cam(), &RenderSettings::new(128, 128)).is_none());
    }
}

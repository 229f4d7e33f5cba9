//! Pinhole camera with a rigid world-to-camera pose.
//!
//! Camera space is x right, y down, z forward. Pixel centres sit at integer
//! coordinates, so a point on the optical axis projects to `(cx, cy)`.

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: UnitQuaternion<f64>,
    /// World-to-camera translation: `p_cam = R p_world + t`.
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        intrinsics: &Intrinsics,
        rotation: UnitQuaternion<f64>,
        translation: Vector3<f64>,
    ) -> Self {
        Self {
            fx: intrinsics.fx,
            fy: intrinsics.fy,
            cx: intrinsics.cx,
            cy: intrinsics.cy,
            rotation,
            translation,
        }
    }

    pub fn identity(intrinsics: &Intrinsics) -> Self {
        Self::new(intrinsics, UnitQuaternion::identity(), Vector3::zeros())
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        intrinsics: &Intrinsics,
        eye: &Point3<f64>,
        target: &Point3<f64>,
        up: &Vector3<f64>,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(up).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rot = Rotation3::from_matrix_unchecked(r);
        let rotation = UnitQuaternion::from_rotation_matrix(&rot);
        let translation = -(rotation * eye.coords);
        Self::new(intrinsics, rotation, translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Pixel coordinates of a camera-space point (no depth check).
    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        )
    }

    /// Projects a world point; `None` when it lies at or behind the camera plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let pc = self.to_camera(p);
        (pc.z > 0.0).then(|| (self.project_camera_point(&pc), pc.z))
    }

    /// Normalized image coordinates `K^-1 [u v 1]`.
    pub fn normalize_pixel(&self, u: f64, v: f64) -> Vector2<f64> {
        Vector2::new((u - self.cx) / self.fx, (v - self.cy) / self.fy)
    }

    pub fn quaternion_norm_ok(&self) -> bool {
        (self.rotation.quaternion().norm() - 1.0).abs() < 1e-9
    }
}

/// JSON form: intrinsics plus `quaternion` (w, x, y, z) and `translation`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let q = c.rotation.quaternion();
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            quaternion: [q.w, q.i, q.j, q.k],
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl TryFrom<&CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: &CameraRecord) -> Result<Self> {
        let [w, x, y, z] = r.quaternion;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "camera quaternion must be unit norm, got norm {}",
                q.norm()
            )));
        }
        if !(r.fx > 0.0 && r.fy > 0.0) {
            return Err(Error::InvalidArgument(
                "focal lengths must be positive".into(),
            ));
        }
        Ok(Camera {
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            // stored quaternion is already unit; keep its bits as-is
            rotation: UnitQuaternion::new_unchecked(q),
            translation: Vector3::from(r.translation),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> Intrinsics {
        Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 64.0,
            cy: 64.0,
            width: 128,
            height: 128,
        }
    }

    #[test]
    fn on_axis_point_hits_principal_point() {
        let cam = Camera::identity(&intr());
        let (uv, z) = cam.project(&Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!((uv.x, uv.y, z), (64.0, 64.0, 5.0));
        assert!(cam.project(&Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn look_at_puts_target_on_axis() {
        let eye = Point3::new(3.0, -1.0, 4.0);
        let cam = Camera::look_at(&intr(), &eye, &Point3::origin(), &Vector3::y());
        let (uv, z) = cam.project(&Vector3::zeros()).unwrap();
        assert!((uv.x - 64.0).abs() < 1e-9 && (uv.y - 64.0).abs() < 1e-9);
        assert!((z - eye.coords.norm()).abs() < 1e-9);
        assert!((cam.center() - eye.coords).norm() < 1e-12);
        // world up maps to image up (negative v)
        let (above, _) = cam.project(&Vector3::new(0.0, 0.5, 0.0)).unwrap();
        assert!(above.y < 64.0);
    }

    #[test]
    fn record_round_trip_is_exact() {
        let eye = Point3::new(1.0, 2.0, -3.0);
        let cam = Camera::look_at(&intr(), &eye, &Point3::new(0.1, 0.2, 0.3), &Vector3::y());
        let json = serde_json::to_string(&CameraRecord::from(&cam)).unwrap();
        let rec: CameraRecord = serde_json::from_str(&json).unwrap();
        let back = Camera::try_from(&rec).unwrap();
        assert_eq!(back, cam);
    }
}

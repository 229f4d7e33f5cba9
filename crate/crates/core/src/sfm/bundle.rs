//! Levenberg-Marquardt bundle adjustment over camera poses and points,
//! solved through the Schur complement of the point blocks.

use nalgebra::{
    DMatrix, DVector, Matrix2x3, Matrix3, Matrix6, Matrix6x3, SMatrix, UnitQuaternion, Vector2,
    Vector3, Vector6,
};

use crate::camera::Camera;
use crate::error::{Error, Result};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Depth below which a projection is considered invalid.
const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub camera: usize,
    pub point: usize,
    pub uv: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BundleReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Observations left out because the point was behind the camera.
    pub skipped_observations: usize,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Projection with Jacobians with respect to the pose update
/// `(ω, δt)`, applied as `R ← exp(ω) R`, `t ← t + δt`, and to the point.
pub(crate) fn project_with_jacobians(
    cam: &Camera,
    p: &Vector3<f64>,
) -> Option<(Vector2<f64>, Matrix2x6, Matrix2x3<f64>)> {
    let r = cam.rotation_matrix();
    let rp = r * p;
    let pc = rp + cam.translation;
    if !(pc.z > MIN_DEPTH) {
        return None;
    }
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let dproj = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    );
    let mut jc = Matrix2x6::zeros();
    jc.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(dproj * -skew(&rp)));
    jc.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
    let jp = dproj * r;
    Some((cam.project_camera_point(&pc), jc, jp))
}

pub(crate) fn apply_pose_update(cam: &Camera, d: &Vector6<f64>) -> Camera {
    let w = Vector3::new(d[0], d[1], d[2]);
    let mut out = *cam;
    out.rotation = UnitQuaternion::from_scaled_axis(w) * cam.rotation;
    out.translation = cam.translation + Vector3::new(d[3], d[4], d[5]);
    out
}

fn cost(cams: &[Camera], pts: &[Vector3<f64>], obs: &[Observation]) -> f64 {
    let mut c = 0.0;
    for o in obs {
        let pc = cams[o.camera].to_camera(&pts[o.point]);
        if !(pc.z > MIN_DEPTH) {
            return f64::INFINITY;
        }
        c += (cams[o.camera].project_camera_point(&pc) - o.uv).norm_squared();
    }
    c
}

/// Minimizes the total squared reprojection error. Cameras flagged in
/// `fixed` are held constant. Uphill steps are rejected, so the final cost
/// never exceeds the initial one.
pub fn bundle_adjust(
    cameras: &mut [Camera],
    points: &mut [Vector3<f64>],
    observations: &[Observation],
    fixed: &[bool],
    max_iterations: usize,
    tolerance: f64,
) -> Result<BundleReport> {
    if fixed.len() != cameras.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} cameras but {} fixed flags",
            cameras.len(),
            fixed.len()
        )));
    }
    for o in observations {
        if o.camera >= cameras.len() || o.point >= points.len() {
            return Err(Error::InvalidArgument(format!(
                "observation ({}, {}) out of range",
                o.camera, o.point
            )));
        }
    }
    let obs: Vec<Observation> = observations
        .iter()
        .filter(|o| cameras[o.camera].to_camera(&points[o.point]).z > MIN_DEPTH)
        .copied()
        .collect();
    let skipped = observations.len() - obs.len();

    let mut cam_var = vec![usize::MAX; cameras.len()];
    let mut n_cam = 0;
    for (i, f) in fixed.iter().enumerate() {
        if !f {
            cam_var[i] = n_cam;
            n_cam += 1;
        }
    }
    let mut by_point: Vec<Vec<usize>> = vec![Vec::new(); points.len()];
    for (k, o) in obs.iter().enumerate() {
        by_point[o.point].push(k);
    }

    let initial_cost = cost(cameras, points, &obs);
    let mut current = initial_cost;
    let mut lambda = 1e-3;
    let mut iterations = 0;
    while iterations < max_iterations && current > 0.0 {
        iterations += 1;
        let mut u = vec![Matrix6::<f64>::zeros(); n_cam];
        let mut gc = vec![Vector6::<f64>::zeros(); n_cam];
        let mut v = vec![Matrix3::<f64>::zeros(); points.len()];
        let mut gp = vec![Vector3::<f64>::zeros(); points.len()];
        let mut w: Vec<Matrix6x3<f64>> = vec![Matrix6x3::zeros(); obs.len()];
        for (k, o) in obs.iter().enumerate() {
            let Some((uv, jc, jp)) = project_with_jacobians(&cameras[o.camera], &points[o.point])
            else {
                continue;
            };
            let r = uv - o.uv;
            v[o.point] += jp.transpose() * jp;
            gp[o.point] += jp.transpose() * r;
            let ci = cam_var[o.camera];
            if ci != usize::MAX {
                u[ci] += jc.transpose() * jc;
                gc[ci] += jc.transpose() * r;
                w[k] = jc.transpose() * jp;
            }
        }
        let damp3 = |m: &Matrix3<f64>| {
            let mut d = *m;
            for i in 0..3 {
                d[(i, i)] += lambda * m[(i, i)] + 1e-12;
            }
            d
        };
        let vinv: Vec<Matrix3<f64>> = v
            .iter()
            .map(|m| damp3(m).try_inverse().unwrap_or_else(Matrix3::zeros))
            .collect();

        let dim = 6 * n_cam;
        let mut s = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        for (i, ui) in u.iter().enumerate() {
            let mut d = *ui;
            for a in 0..6 {
                d[(a, a)] += lambda * ui[(a, a)] + 1e-12;
            }
            s.view_mut((6 * i, 6 * i), (6, 6)).copy_from(&d);
            rhs.rows_mut(6 * i, 6).copy_from(&(-gc[i]));
        }
        for (j, ks) in by_point.iter().enumerate() {
            for &ka in ks {
                let ca = cam_var[obs[ka].camera];
                if ca == usize::MAX {
                    continue;
                }
                let wv = w[ka] * vinv[j];
                let add = wv * gp[j];
                let mut seg = rhs.rows_mut(6 * ca, 6);
                seg += add;
                for &kb in ks {
                    let cb = cam_var[obs[kb].camera];
                    if cb == usize::MAX {
                        continue;
                    }
                    let block = wv * w[kb].transpose();
                    let mut view = s.view_mut((6 * ca, 6 * cb), (6, 6));
                    view -= block;
                }
            }
        }
        let dc = if dim == 0 {
            Some(DVector::zeros(0))
        } else {
            s.cholesky().map(|ch| ch.solve(&rhs))
        };
        let Some(dc) = dc else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
            continue;
        };
        let mut new_cams = cameras.to_vec();
        for (i, c) in cameras.iter().enumerate() {
            let ci = cam_var[i];
            if ci != usize::MAX {
                let d = Vector6::from_iterator(dc.rows(6 * ci, 6).iter().copied());
                new_cams[i] = apply_pose_update(c, &d);
            }
        }
        let mut new_pts = points.to_vec();
        for (j, ks) in by_point.iter().enumerate() {
            if ks.is_empty() {
                continue;
            }
            let mut b = -gp[j];
            for &k in ks {
                let ci = cam_var[obs[k].camera];
                if ci != usize::MAX {
                    let d = Vector6::from_iterator(dc.rows(6 * ci, 6).iter().copied());
                    b -= w[k].transpose() * d;
                }
            }
            new_pts[j] += vinv[j] * b;
        }
        let candidate = cost(&new_cams, &new_pts, &obs);
        if candidate < current {
            let rel = (current - candidate) / current;
            cameras.copy_from_slice(&new_cams);
            points.copy_from_slice(&new_pts);
            current = candidate;
            lambda = (lambda / 10.0).max(1e-12);
            if rel < tolerance {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    Ok(BundleReport {
        initial_cost,
        final_cost: current,
        iterations,
        skipped_observations: skipped,
    })
}

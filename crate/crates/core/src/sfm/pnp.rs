//! Camera pose from 2D-3D correspondences.

use nalgebra::{
    DMatrix, Matrix3, Matrix3x4, Matrix4, Matrix6, Rotation3, UnitQuaternion, Vector2, Vector3,
    Vector6,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bundle::{apply_pose_update, project_with_jacobians};
use crate::camera::{Camera, Intrinsics};
use crate::error::{Error, Result};

const MIN_POINTS: usize = 6;

fn check_inputs(points: &[Vector3<f64>], pixels: &[Vector2<f64>]) -> Result<()> {
    if points.len() != pixels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} points but {} pixels",
            points.len(),
            pixels.len()
        )));
    }
    if points.len() < MIN_POINTS {
        return Err(Error::NotEnough {
            what: "2D-3D correspondences",
            needed: MIN_POINTS,
            got: points.len(),
        });
    }
    Ok(())
}

/// Linear pose estimate: DLT on normalized image coordinates with
/// similarity-normalized 3D points, projected onto SO(3).
pub fn solve_pnp_dlt(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    intrinsics: &Intrinsics,
) -> Result<Camera> {
    check_inputs(points, pixels)?;
    let n = points.len() as f64;
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mean = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::Degenerate("all 3D points coincide".into()));
    }
    let s = 3f64.sqrt() / mean;
    let mut t3 = Matrix4::identity() * s;
    t3[(3, 3)] = 1.0;
    t3.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-s * c));

    let rows = (2 * points.len()).max(12);
    let mut a = DMatrix::zeros(rows, 12);
    for (k, (p, uv)) in points.iter().zip(pixels).enumerate() {
        let q = (p - c) * s;
        let x = [q.x, q.y, q.z, 1.0];
        let u = (uv.x - intrinsics.cx) / intrinsics.fx;
        let v = (uv.y - intrinsics.cy) / intrinsics.fy;
        for i in 0..4 {
            a[(2 * k, i)] = x[i];
            a[(2 * k, 8 + i)] = -u * x[i];
            a[(2 * k + 1, 4 + i)] = x[i];
            a[(2 * k + 1, 8 + i)] = -v * x[i];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Degenerate("PnP SVD failed".into()))?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("non-empty");
    let pn = Matrix3x4::from_fn(|r, col| vt[(k, 4 * r + col)]);
    let mut p = pn * t3;
    let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        p = -p;
        m = -m;
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let scale = svd.singular_values.mean();
    if !(scale > 0.0) {
        return Err(Error::Degenerate(
            "PnP solution has no rotation part".into(),
        ));
    }
    let r = u * vt;
    if r.determinant() < 0.0 {
        return Err(Error::Degenerate("PnP rotation is a reflection".into()));
    }
    let t = p.column(3) / scale;
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    Ok(Camera::new(intrinsics, rotation, t.into_owned()))
}

fn reprojection_sq(cam: &Camera, points: &[Vector3<f64>], pixels: &[Vector2<f64>]) -> f64 {
    points
        .iter()
        .zip(pixels)
        .map(|(p, uv)| match cam.project(p) {
            Some((q, _)) => (q - uv).norm_squared(),
            None => f64::INFINITY,
        })
        .sum()
}

/// Levenberg-Marquardt refinement of a pose against pixel reprojection error.
pub fn refine_pose(
    cam: &Camera,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    max_iterations: usize,
) -> Camera {
    let mut cam = *cam;
    let mut current = reprojection_sq(&cam, points, pixels);
    let mut lambda = 1e-3;
    for _ in 0..max_iterations {
        if !current.is_finite() || current == 0.0 {
            break;
        }
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (p, uv) in points.iter().zip(pixels) {
            if let Some((q, jc, _)) = project_with_jacobians(&cam, p) {
                h += jc.transpose() * jc;
                g += jc.transpose() * (q - uv);
            }
        }
        let mut damped = h;
        for i in 0..6 {
            damped[(i, i)] += lambda * h[(i, i)] + 1e-12;
        }
        let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
            lambda *= 10.0;
            continue;
        };
        let candidate = apply_pose_update(&cam, &step);
        let c = reprojection_sq(&candidate, points, pixels);
        if c < current {
            let rel = (current - c) / current;
            cam = candidate;
            current = c;
            lambda = (lambda / 10.0).max(1e-12);
            if rel < 1e-10 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    cam
}

fn inliers(
    cam: &Camera,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    threshold: f64,
) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            cam.project(&points[i])
                .is_some_and(|(q, _)| (q - pixels[i]).norm() < threshold)
        })
        .collect()
}

/// RANSAC around the 6-point DLT, followed by refinement on the inliers.
/// Returns the pose and the inlier indices.
pub fn solve_pnp(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    intrinsics: &Intrinsics,
    threshold_px: f64,
    seed: u64,
    max_iterations: usize,
) -> Result<(Camera, Vec<usize>)> {
    solve_pnp_with_priors(
        points,
        pixels,
        intrinsics,
        threshold_px,
        seed,
        max_iterations,
        &[],
    )
}

fn subset<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Refines a prior pose on all correspondences, then on inliers under a
/// shrinking threshold.
fn refine_prior(
    prior: &Camera,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    threshold_px: f64,
) -> Camera {
    let mut cam = refine_pose(prior, points, pixels, 50);
    for scale in [8.0, 4.0, 2.0, 1.0] {
        let inl = inliers(&cam, points, pixels, threshold_px * scale);
        if inl.len() < MIN_POINTS {
            break;
        }
        cam = refine_pose(&cam, &subset(points, &inl), &subset(pixels, &inl), 50);
    }
    cam
}

/// [`solve_pnp`] that also refines each prior pose into a hypothesis. The
/// DLT is degenerate for coplanar points; a nearby registered camera is a
/// usable starting point in that case.
pub fn solve_pnp_with_priors(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    intrinsics: &Intrinsics,
    threshold_px: f64,
    seed: u64,
    max_iterations: usize,
    priors: &[Camera],
) -> Result<(Camera, Vec<usize>)> {
    check_inputs(points, pixels)?;
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Camera, Vec<usize>)> = None;
    let mut needed = max_iterations;
    let mut it = 0;
    while it < needed.min(max_iterations) {
        it += 1;
        let sample = rand::seq::index::sample(&mut rng, n, MIN_POINTS);
        let sp: Vec<_> = sample.iter().map(|i| points[i]).collect();
        let sx: Vec<_> = sample.iter().map(|i| pixels[i]).collect();
        let Ok(cam) = solve_pnp_dlt(&sp, &sx, intrinsics) else {
            continue;
        };
        let inl = inliers(&cam, points, pixels, threshold_px);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            let w = inl.len() as f64 / n as f64;
            let p_good = w.powi(MIN_POINTS as i32);
            needed = if p_good >= 1.0 {
                0
            } else if p_good <= 0.0 {
                max_iterations
            } else {
                (0.01f64.ln() / (1.0 - p_good).ln()).ceil() as usize
            };
            best = Some((cam, inl));
        }
    }
    for prior in priors {
        let cam = refine_prior(prior, points, pixels, threshold_px);
        let inl = inliers(&cam, points, pixels, threshold_px);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            best = Some((cam, inl));
        }
    }
    let (mut cam, mut inl) = best.ok_or_else(|| Error::Degenerate("no PnP hypothesis".into()))?;
    if inl.len() < MIN_POINTS {
        return Err(Error::NotEnough {
            what: "PnP inliers",
            needed: MIN_POINTS,
            got: inl.len(),
        });
    }
    for _ in 0..3 {
        let (ip, ix) = (subset(points, &inl), subset(pixels, &inl));
        if let Ok(linear) = solve_pnp_dlt(&ip, &ix, intrinsics) {
            if reprojection_sq(&linear, &ip, &ix) < reprojection_sq(&cam, &ip, &ix) {
                cam = linear;
            }
        }
        cam = refine_pose(&cam, &ip, &ix, 50);
        let next = inliers(&cam, points, pixels, threshold_px);
        if next.len() <= inl.len() {
            break;
        }
        inl = next;
    }
    let inl = inliers(&cam, points, pixels, threshold_px);
    if inl.len() < MIN_POINTS {
        return Err(Error::NotEnough {
            what: "PnP inliers",
            needed: MIN_POINTS,
            got: inl.len(),
        });
    }
    Ok((cam, inl))
}

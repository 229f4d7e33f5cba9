//! Plane-induced homographies, used to initialize from pairs whose matches
//! all lie on one plane, where the fundamental matrix is not determined.
//!
//! Convention: `x_b ~ H x_a` for homogeneous pixels.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::epipolar::{apply, hartley, null_vector9};
use crate::error::{Error, Result};

const MIN_POINTS: usize = 4;

/// Normalized DLT from `n ≥ 4` correspondences; unit Frobenius norm.
pub fn homography_dlt(pa: &[Vector2<f64>], pb: &[Vector2<f64>]) -> Result<Matrix3<f64>> {
    if pa.len() != pb.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} points in view a, {} in view b",
            pa.len(),
            pb.len()
        )));
    }
    if pa.len() < MIN_POINTS {
        return Err(Error::NotEnough {
            what: "correspondences",
            needed: MIN_POINTS,
            got: pa.len(),
        });
    }
    let (ta, tb) = (hartley(pa), hartley(pb));
    let mut a = DMatrix::zeros(2 * pa.len(), 9);
    for (r, (p, q)) in pa.iter().zip(pb).enumerate() {
        let (x, u) = (apply(&ta, p), apply(&tb, q));
        let rows = [
            [-x.x, -x.y, -1.0, 0.0, 0.0, 0.0, u.x * x.x, u.x * x.y, u.x],
            [0.0, 0.0, 0.0, -x.x, -x.y, -1.0, u.y * x.x, u.y * x.y, u.y],
        ];
        for (k, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                a[(2 * r + k, c)] = *v;
            }
        }
    }
    let h = null_vector9(&a).ok_or_else(|| Error::Degenerate("homography SVD failed".into()))?;
    let tb_inv = tb
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("singular normalization".into()))?;
    let h = tb_inv * Matrix3::from_row_slice(&h) * ta;
    let n = h.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate("homography vanished".into()));
    }
    Ok(h / n)
}

/// Pixel distance between `H a` and `b`.
pub fn transfer_error(h: &Matrix3<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let p = h * Vector3::new(a.x, a.y, 1.0);
    if p.z.abs() < 1e-15 {
        return f64::INFINITY;
    }
    (Vector2::new(p.x / p.z, p.y / p.z) - b).norm()
}

fn inliers_of(
    h: &Matrix3<f64>,
    pa: &[Vector2<f64>],
    pb: &[Vector2<f64>],
    threshold: f64,
) -> Vec<usize> {
    (0..pa.len())
        .filter(|&i| transfer_error(h, &pa[i], &pb[i]) < threshold)
        .collect()
}

/// RANSAC over 4-point samples, refit on the consensus set. Returns the
/// homography and the indices of its inliers.
pub fn fit_homography(
    pa: &[Vector2<f64>],
    pb: &[Vector2<f64>],
    threshold_px: f64,
    seed: u64,
    max_iterations: usize,
) -> Result<(Matrix3<f64>, Vec<usize>)> {
    if pa.len() != pb.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} points in view a, {} in view b",
            pa.len(),
            pb.len()
        )));
    }
    if pa.len() < MIN_POINTS {
        return Err(Error::NotEnough {
            what: "correspondences",
            needed: MIN_POINTS,
            got: pa.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Vec<usize> = Vec::new();
    let (mut sa, mut sb) = (
        Vec::with_capacity(MIN_POINTS),
        Vec::with_capacity(MIN_POINTS),
    );
    for _ in 0..max_iterations {
        let sample = rand::seq::index::sample(&mut rng, pa.len(), MIN_POINTS);
        sa.clear();
        sb.clear();
        for i in sample.iter() {
            sa.push(pa[i]);
            sb.push(pb[i]);
        }
        let Ok(h) = homography_dlt(&sa, &sb) else {
            continue;
        };
        let inl = inliers_of(&h, pa, pb, threshold_px);
        if inl.len() > best.len() {
            best = inl;
            if best.len() == pa.len() {
                break;
            }
        }
    }
    if best.len() < MIN_POINTS {
        return Err(Error::NotEnough {
            what: "homography inliers",
            needed: MIN_POINTS,
            got: best.len(),
        });
    }
    let a: Vec<_> = best.iter().map(|&i| pa[i]).collect();
    let b: Vec<_> = best.iter().map(|&i| pb[i]).collect();
    let h = homography_dlt(&a, &b)?;
    let inl = inliers_of(&h, pa, pb, threshold_px);
    Ok((h, inl))
}

/// The eight `(R, t)` candidates of a calibrated homography `K_b⁻¹ H K_a`
/// (SVD method), with `|t| = 1` and `x_b = R x_a + t`. Empty when two
/// singular values coincide (pure rotation or a degenerate fit).
pub fn decompose_homography(
    h: &Matrix3<f64>,
    ka: &Matrix3<f64>,
    kb: &Matrix3<f64>,
) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let Some(kb_inv) = kb.try_inverse() else {
        return Vec::new();
    };
    let a = kb_inv * h * ka;
    let svd = a.svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        return Vec::new();
    };
    // order singular values descending, permuting U and Vᵀ to match
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let d = idx.map(|i| svd.singular_values[i]);
    let u = Matrix3::from_columns(&idx.map(|i| u.column(i).into_owned()));
    let vt = Matrix3::from_rows(&idx.map(|i| vt.row(i).into_owned()));
    let [d1, d2, d3] = d;
    if !(d3 > 0.0) || d1 / d2 < 1.00001 || d2 / d3 < 1.00001 {
        return Vec::new();
    }
    let s = u.determinant() * vt.determinant();
    let (q1, q2, q3) = (d1 * d1, d2 * d2, d3 * d3);
    let aux1 = ((q1 - q2) / (q1 - q3)).sqrt();
    let aux3 = ((q2 - q3) / (q1 - q3)).sqrt();
    let x1 = [aux1, aux1, -aux1, -aux1];
    let x3 = [aux3, -aux3, aux3, -aux3];
    let root = ((q1 - q2) * (q2 - q3)).sqrt();
    let mut out = Vec::with_capacity(8);

    // d' = d2
    let st = root / ((d1 + d3) * d2);
    let ct = (q2 + d1 * d3) / ((d1 + d3) * d2);
    let stheta = [st, -st, -st, st];
    for i in 0..4 {
        let rp = Matrix3::new(ct, 0.0, -stheta[i], 0.0, 1.0, 0.0, stheta[i], 0.0, ct);
        let tp = Vector3::new(x1[i], 0.0, -x3[i]) * (d1 - d3);
        out.push((s * u * rp * vt, (u * tp).normalize()));
    }
    // d' = -d2
    let sp = root / ((d1 - d3) * d2);
    let cp = (d1 * d3 - q2) / ((d1 - d3) * d2);
    let sphi = [sp, -sp, -sp, sp];
    for i in 0..4 {
        let rp = Matrix3::new(cp, 0.0, sphi[i], 0.0, -1.0, 0.0, sphi[i], 0.0, -cp);
        let tp = Vector3::new(x1[i], 0.0, x3[i]) * (d1 + d3);
        out.push((s * u * rp * vt, (u * tp).normalize()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Vector2};
    use proptest::prelude::*;

    fn k() -> Matrix3<f64> {
        Matrix3::new(300.0, 0.0, 160.0, 0.0, 300.0, 120.0, 0.0, 0.0, 1.0)
    }

    fn project(k: &Matrix3<f64>, p: &Vector3<f64>) -> Vector2<f64> {
        let q = k * p;
        Vector2::new(q.x / q.z, q.y / q.z)
    }

    /// Points on the plane `n·x = d` seen from identity and from `(R, t)`.
    fn plane_views(
        r: &Matrix3<f64>,
        t: &Vector3<f64>,
        n: usize,
    ) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>) {
        let (mut pa, mut pb) = (Vec::new(), Vec::new());
        for i in 0..n {
            let (u, v) = ((i % 5) as f64 * 0.3 - 0.6, (i / 5) as f64 * 0.25 - 0.5);
            // plane z = 4 + 0.3 x tilted about y
            let p = Vector3::new(u, v, 4.0 + 0.3 * u);
            pa.push(project(&k(), &p));
            pb.push(project(&k(), &(r * p + t)));
        }
        (pa, pb)
    }

    #[test]
    fn dlt_is_exact_on_noiseless_plane() {
        let r = Rotation3::from_euler_angles(0.02, -0.2, 0.01).into_inner();
        let t = Vector3::new(0.8, 0.1, 0.05);
        let (pa, pb) = plane_views(&r, &t, 20);
        let h = homography_dlt(&pa, &pb).unwrap();
        for (a, b) in pa.iter().zip(&pb) {
            assert!(transfer_error(&h, a, b) < 1e-8);
        }
    }

    #[test]
    fn ransac_rejects_off_plane_points() {
        let r = Rotation3::from_euler_angles(0.0, -0.15, 0.0).into_inner();
        let t = Vector3::new(0.6, 0.0, 0.0);
        let (mut pa, mut pb) = plane_views(&r, &t, 25);
        pa.push(Vector2::new(50.0, 50.0));
        pb.push(Vector2::new(90.0, 20.0));
        let (_, inl) = fit_homography(&pa, &pb, 1.0, 3, 200).unwrap();
        assert_eq!(inl, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_points_is_an_error() {
        let p = vec![Vector2::zeros(); 3];
        assert!(matches!(
            homography_dlt(&p, &p),
            Err(Error::NotEnough {
                needed: 4,
                got: 3,
                ..
            })
        ));
    }

    proptest! {
        #[test]
        fn decomposition_contains_true_pose(
            rx in -0.2f64..0.2, ry in -0.4f64..0.4, rz in -0.2f64..0.2,
            tx in -1.0f64..1.0, ty in -0.5f64..0.5, tz in -0.3f64..0.3,
        ) {
            let t = Vector3::new(tx, ty, tz);
            prop_assume!(t.norm() > 0.1);
            let r = Rotation3::from_euler_angles(rx, ry, rz).into_inner();
            // plane n·x = d in the first camera frame
            let n = Vector3::new(-0.3, 0.0, 1.0);
            let d = 4.0;
            let hc = r + t * n.transpose() / d;
            let h = k() * hc * k().try_inverse().unwrap();
            let cands = decompose_homography(&h, &k(), &k());
            prop_assert_eq!(cands.len(), 8);
            let tn = t.normalize();
            prop_assert!(
                cands.iter().any(|(rc, tc)| (rc - r).norm() < 1e-6 && (tc - tn).norm() < 1e-6),
                "true pose missing"
            );
            for (rc, _) in &cands {
                prop_assert!((rc.determinant() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pure_rotation_has_no_decomposition() {
        let r = Rotation3::from_euler_angles(0.1, 0.2, 0.0).into_inner();
        let h = k() * r * k().try_inverse().unwrap();
        assert!(decompose_homography(&h, &k(), &k()).is_empty());
    }
}

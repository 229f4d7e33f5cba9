//! Fundamental and essential matrix estimation.
//!
//! Convention: `x_bᵀ F x_a = 0` for homogeneous pixels `x_a`, `x_b`.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Feature, Match};
use crate::error::{Error, Result};

pub type FundamentalMatrix = Matrix3<f64>;

const MIN_POINTS: usize = 8;

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
pub(super) fn hartley(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean > 0.0 {
        std::f64::consts::SQRT_2 / mean
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

pub(super) fn apply(t: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let h = t * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(h.x / h.z, h.y / h.z)
}

/// Unit right null vector of `a` (rows padded to at least 9).
pub(super) fn null_vector9(a: &DMatrix<f64>) -> Option<[f64; 9]> {
    let a = if a.nrows() < 9 {
        a.clone().resize_vertically(9, 0.0)
    } else {
        a.clone()
    };
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let mut out = [0.0; 9];
    for (i, o) in out.iter_mut().enumerate() {
        *o = vt[(k, i)];
    }
    Some(out)
}

/// Normalized 8-point estimate from `n ≥ 8` correspondences; the result has
/// rank 2 and unit Frobenius norm.
pub fn eight_point(pa: &[Vector2<f64>], pb: &[Vector2<f64>]) -> Result<FundamentalMatrix> {
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
    let mut a = DMatrix::zeros(pa.len(), 9);
    for (r, (p, q)) in pa.iter().zip(pb).enumerate() {
        let (x, y) = (apply(&ta, p), apply(&tb, q));
        let row = [
            y.x * x.x,
            y.x * x.y,
            y.x,
            y.y * x.x,
            y.y * x.y,
            y.y,
            x.x,
            x.y,
            1.0,
        ];
        for (c, v) in row.iter().enumerate() {
            a[(r, c)] = *v;
        }
    }
    let f = null_vector9(&a).ok_or_else(|| Error::Degenerate("8-point SVD failed".into()))?;
    let f = Matrix3::from_row_slice(&f);
    let svd = f.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = svd.singular_values;
    s[2] = 0.0;
    let f = u * Matrix3::from_diagonal(&s) * vt;
    let f = tb.transpose() * f * ta;
    let n = f.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate("fundamental matrix vanished".into()));
    }
    Ok(f / n)
}

/// Algebraic residual `x_bᵀ F x_a`.
pub fn epipolar_residual(f: &FundamentalMatrix, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    Vector3::new(b.x, b.y, 1.0).dot(&(f * Vector3::new(a.x, a.y, 1.0)))
}

/// First-order geometric distance (in pixels) of a correspondence from `F`.
pub fn sampson_distance(f: &FundamentalMatrix, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let xa = Vector3::new(a.x, a.y, 1.0);
    let xb = Vector3::new(b.x, b.y, 1.0);
    let fa = f * xa;
    let fb = f.transpose() * xb;
    let e = xb.dot(&fa);
    let denom = fa.x * fa.x + fa.y * fa.y + fb.x * fb.x + fb.y * fb.y;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    (e * e / denom).sqrt()
}

fn inliers_of(
    f: &FundamentalMatrix,
    pa: &[Vector2<f64>],
    pb: &[Vector2<f64>],
    threshold: f64,
) -> Vec<usize> {
    (0..pa.len())
        .filter(|&i| sampson_distance(f, &pa[i], &pb[i]) < threshold)
        .collect()
}

/// RANSAC over normalized 8-point samples. Returns `F` refit on the final
/// inlier set together with the matches whose Sampson distance is below
/// `threshold_px`.
pub fn verify_geometry(
    matches: &[Match],
    feats_a: &[Feature],
    feats_b: &[Feature],
    threshold_px: f64,
    seed: u64,
) -> Result<(FundamentalMatrix, Vec<Match>)> {
    verify_geometry_with(matches, feats_a, feats_b, threshold_px, seed, 2000, 0.99)
}

pub(crate) fn verify_geometry_with(
    matches: &[Match],
    feats_a: &[Feature],
    feats_b: &[Feature],
    threshold_px: f64,
    seed: u64,
    max_iterations: usize,
    confidence: f64,
) -> Result<(FundamentalMatrix, Vec<Match>)> {
    if matches.len() < MIN_POINTS {
        return Err(Error::NotEnough {
            what: "matches",
            needed: MIN_POINTS,
            got: matches.len(),
        });
    }
    if !(threshold_px > 0.0) {
        return Err(Error::InvalidArgument("threshold must be positive".into()));
    }
    for m in matches {
        if m.index_a >= feats_a.len() || m.index_b >= feats_b.len() {
            return Err(Error::InvalidArgument(format!(
                "match ({}, {}) out of range",
                m.index_a, m.index_b
            )));
        }
    }
    let pa: Vec<_> = matches
        .iter()
        .map(|m| Vector2::new(feats_a[m.index_a].x, feats_a[m.index_a].y))
        .collect();
    let pb: Vec<_> = matches
        .iter()
        .map(|m| Vector2::new(feats_b[m.index_b].x, feats_b[m.index_b].y))
        .collect();
    let n = matches.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Vec<usize> = Vec::new();
    let mut needed = max_iterations;
    let mut it = 0;
    let mut sa = Vec::with_capacity(MIN_POINTS);
    let mut sb = Vec::with_capacity(MIN_POINTS);
    while it < needed.min(max_iterations) {
        it += 1;
        let sample = rand::seq::index::sample(&mut rng, n, MIN_POINTS);
        sa.clear();
        sb.clear();
        for i in sample.iter() {
            sa.push(pa[i]);
            sb.push(pb[i]);
        }
        let Ok(f) = eight_point(&sa, &sb) else {
            continue;
        };
        let inl = inliers_of(&f, &pa, &pb, threshold_px);
        if inl.len() > best.len() {
            best = inl;
            let w = best.len() as f64 / n as f64;
            let p_good = w.powi(MIN_POINTS as i32);
            needed = if p_good >= 1.0 {
                0
            } else if p_good <= 0.0 {
                max_iterations
            } else {
                ((1.0 - confidence).ln() / (1.0 - p_good).ln()).ceil() as usize
            };
        }
    }
    if best.len() < MIN_POINTS {
        return Err(Error::NotEnough {
            what: "inliers",
            needed: MIN_POINTS,
            got: best.len(),
        });
    }
    // refit on the consensus set until it stops growing
    let mut f = refit(&best, &pa, &pb)?;
    for _ in 0..5 {
        let inl = inliers_of(&f, &pa, &pb, threshold_px);
        if inl.len() < MIN_POINTS || inl == best {
            break;
        }
        let g = refit(&inl, &pa, &pb)?;
        if inliers_of(&g, &pa, &pb, threshold_px).len() < inl.len() {
            break;
        }
        f = g;
        best = inl;
    }
    let inliers: Vec<Match> = inliers_of(&f, &pa, &pb, threshold_px)
        .into_iter()
        .map(|i| matches[i])
        .collect();
    if inliers.len() < MIN_POINTS {
        return Err(Error::NotEnough {
            what: "inliers",
            needed: MIN_POINTS,
            got: inliers.len(),
        });
    }
    Ok((f, inliers))
}

fn refit(idx: &[usize], pa: &[Vector2<f64>], pb: &[Vector2<f64>]) -> Result<FundamentalMatrix> {
    let a: Vec<_> = idx.iter().map(|&i| pa[i]).collect();
    let b: Vec<_> = idx.iter().map(|&i| pb[i]).collect();
    eight_point(&a, &b)
}

/// `E = K_bᵀ F K_a`.
pub fn essential_from_fundamental(
    f: &FundamentalMatrix,
    ka: &Matrix3<f64>,
    kb: &Matrix3<f64>,
) -> Matrix3<f64> {
    kb.transpose() * f * ka
}

/// The four `(R, t)` candidates of an essential matrix, with `|t| = 1`.
pub fn decompose_essential(e: &Matrix3<f64>) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut vt = svd.v_t.unwrap();
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t = u.column(2).into_owned().normalize();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

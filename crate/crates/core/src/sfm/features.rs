//! Harris corners restricted to a mask, refined to subpixel accuracy and
//! described by normalized intensity patches.

use nalgebra::{Matrix2, Vector2};

use super::Feature;
use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, gaussian_kernel, sobel_gradients, BinaryMask, Raster};

pub const HARRIS_K: f64 = 0.04;
/// Corners weaker than this fraction of the strongest response are dropped.
pub const RESPONSE_FLOOR: f64 = 1e-6;
/// Descriptor patch side length.
pub const PATCH_SIZE: usize = 11;
pub const DESCRIPTOR_LEN: usize = PATCH_SIZE * PATCH_SIZE;

const PATCH_RADIUS: isize = (PATCH_SIZE / 2) as isize;
const TENSOR_SIGMA: f64 = 1.0;
const TENSOR_RADIUS: usize = 2;
const REFINE_RADIUS: isize = 3;
const REFINE_SIGMA: f64 = 1.5;

/// Harris response `det(M) - k tr(M)^2` of the Gaussian-smoothed structure
/// tensor built from Sobel derivatives (scaled to unit-step derivatives).
pub fn harris_response(gray: &Raster) -> Result<Raster> {
    let (gx, gy) = sobel_gradients(gray)?;
    let (w, h) = (gray.width(), gray.height());
    let prod = |f: &dyn Fn(f64, f64) -> f64| {
        let data = gx
            .data()
            .iter()
            .zip(gy.data())
            .map(|(&a, &b)| f(a / 8.0, b / 8.0))
            .collect();
        Raster::from_vec(w, h, 1, data).expect("same shape")
    };
    let taps = gaussian_kernel(TENSOR_SIGMA, TENSOR_RADIUS);
    let sxx = gaussian_blur(&prod(&|a, _| a * a), &taps);
    let syy = gaussian_blur(&prod(&|_, b| b * b), &taps);
    let sxy = gaussian_blur(&prod(&|a, b| a * b), &taps);
    let data = (0..w * h)
        .map(|i| {
            let (a, b, c) = (sxx.data()[i], syy.data()[i], sxy.data()[i]);
            a * b - c * c - HARRIS_K * (a + b) * (a + b)
        })
        .collect();
    Raster::from_vec(w, h, 1, data)
}

/// Strict 3x3 local maxima of the response above the floor, as integer pixels,
/// skipping a border wide enough for the descriptor patch.
pub fn harris_peaks(response: &Raster) -> Vec<(usize, usize, f64)> {
    let (w, h) = (response.width(), response.height());
    let (_, max) = response.min_max();
    if !(max > 0.0) {
        return Vec::new();
    }
    let floor = RESPONSE_FLOOR * max;
    let border = PATCH_RADIUS as usize + 1;
    let mut peaks = Vec::new();
    if w <= 2 * border || h <= 2 * border {
        return peaks;
    }
    for y in border..h - border {
        for x in border..w - border {
            let r = response.get(x, y, 0);
            if r <= floor {
                continue;
            }
            let mut is_max = true;
            'nbr: for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = response.get((x as isize + dx) as usize, (y as isize + dy) as usize, 0);
                    // ties resolve to the first pixel in raster order
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if n > r || (earlier && n == r) {
                        is_max = false;
                        break 'nbr;
                    }
                }
            }
            if is_max {
                peaks.push((x, y, r));
            }
        }
    }
    peaks
}

/// Gradient-orthogonality corner refinement: the corner `q` minimizes
/// `Σ w_p (g_pᵀ (q - p))²` over a window, since image gradients near a
/// junction are orthogonal to the vector from the junction.
fn refine_corner(gx: &Raster, gy: &Raster, x0: usize, y0: usize) -> Vector2<f64> {
    let (w, h) = (gx.width() as isize, gx.height() as isize);
    let mut q = Vector2::new(x0 as f64, y0 as f64);
    for _ in 0..10 {
        let cx = q.x.round() as isize;
        let cy = q.y.round() as isize;
        let mut a = Matrix2::zeros();
        let mut b = Vector2::zeros();
        for dy in -REFINE_RADIUS..=REFINE_RADIUS {
            for dx in -REFINE_RADIUS..=REFINE_RADIUS {
                let (px, py) = (cx + dx, cy + dy);
                if px < 1 || py < 1 || px >= w - 1 || py >= h - 1 {
                    continue;
                }
                let g = Vector2::new(
                    gx.get(px as usize, py as usize, 0),
                    gy.get(px as usize, py as usize, 0),
                );
                let p = Vector2::new(px as f64, py as f64);
                let r2 = (p - q).norm_squared();
                let wgt = (-r2 / (2.0 * REFINE_SIGMA * REFINE_SIGMA)).exp();
                let ggt = g * g.transpose() * wgt;
                a += ggt;
                b += ggt * p;
            }
        }
        let Some(next) = a.try_inverse().map(|inv| inv * b) else {
            break;
        };
        let step = (next - q).norm();
        q = next;
        if step < 1e-3 {
            break;
        }
    }
    let start = Vector2::new(x0 as f64, y0 as f64);
    if !(q.x.is_finite() && q.y.is_finite()) || (q - start).norm() > 1.5 {
        return start;
    }
    q
}

/// Mean-subtracted, unit-norm patch sampled bilinearly around `(x, y)`.
pub fn patch_descriptor(gray: &Raster, x: f64, y: f64) -> Option<Vec<f64>> {
    let mut d = Vec::with_capacity(DESCRIPTOR_LEN);
    for dy in -PATCH_RADIUS..=PATCH_RADIUS {
        for dx in -PATCH_RADIUS..=PATCH_RADIUS {
            d.push(gray.sample_bilinear(x + dx as f64, y + dy as f64, 0));
        }
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter_mut().for_each(|v| *v -= mean);
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-9) {
        return None;
    }
    d.iter_mut().for_each(|v| *v /= norm);
    Some(d)
}

/// Harris features at mask-true pixels, strongest first, at most `max_features`.
pub fn detect_features_masked(
    gray: &Raster,
    mask: &BinaryMask,
    max_features: usize,
) -> Result<Vec<Feature>> {
    detect_features_described(gray, gray, mask, max_features)
}

/// As [`detect_features_masked`], but descriptors are sampled from a separate
/// (same-sized) image.
pub fn detect_features_described(
    gray: &Raster,
    describe: &Raster,
    mask: &BinaryMask,
    max_features: usize,
) -> Result<Vec<Feature>> {
    if !mask.matches_raster(gray) || !describe.same_dims(gray) {
        return Err(Error::DimensionMismatch(format!(
            "feature detection: image {}x{}, mask {}x{}",
            gray.width(),
            gray.height(),
            mask.width(),
            mask.height()
        )));
    }
    if mask.count() == 0 || max_features == 0 {
        return Ok(Vec::new());
    }
    let response = harris_response(gray)?;
    let (gx, gy) = sobel_gradients(gray)?;
    let mut peaks: Vec<_> = harris_peaks(&response)
        .into_iter()
        .filter(|&(x, y, _)| mask.get(x, y))
        .collect();
    peaks.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));

    let (w, h) = (gray.width() as f64, gray.height() as f64);
    let mut out = Vec::new();
    for (x, y, r) in peaks {
        if out.len() >= max_features {
            break;
        }
        let q = refine_corner(&gx, &gy, x, y);
        let q = if mask.contains(q.x, q.y)
            && q.x >= 0.0
            && q.y >= 0.0
            && q.x <= w - 1.0
            && q.y <= h - 1.0
        {
            q
        } else {
            Vector2::new(x as f64, y as f64)
        };
        if let Some(descriptor) = patch_descriptor(describe, q.x, q.y) {
            out.push(Feature {
                x: q.x,
                y: q.y,
                descriptor,
                response: r,
            });
        }
    }
    Ok(out)
}

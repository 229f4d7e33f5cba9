//! Forward compositing and its reverse-mode derivative.
//!
//! Splats are sorted once by camera depth (ties broken by index) and binned
//! per image row. Each pixel composites front to back:
//!
//! ```text
//! a_i = alpha_i * exp(-½ dᵀ conic_i d)      (skipped when a_i < alpha floor)
//! C  += T * a_i * rgb_i;  T *= 1 - a_i      (stop once T < transmittance floor)
//! C  += T * background
//! ```
//!
//! The backward pass replays the same pixel loop, so the gradient is exact for
//! the piecewise-smooth function the forward pass evaluates.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::project::{project_splat, ProjectedSplat};
use super::{param, GaussianCloud, RenderSettings, PARAMS_PER_SPLAT, SH_C0};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imaging::Raster;

/// Fixed row partition for gradient accumulation. Bands are reduced in
/// order, so the summation order does not depend on the thread count.
const GRAD_BANDS: usize = 16;

/// Per-splat screen-space gradient slots.
const SCREEN_SLOTS: usize = 10;
const S_MEAN: usize = 0; // 2 slots
const S_CONIC: usize = 2; // 4 slots, row-major
const S_ALPHA: usize = 6;
const S_RGB: usize = 7; // 3 slots

struct Prepared {
    projected: Vec<Option<ProjectedSplat>>,
    /// Splat indices touching each row, front to back.
    rows: Vec<Vec<u32>>,
}

fn prepare(cloud: &GaussianCloud, cam: &Camera, settings: &RenderSettings) -> Prepared {
    let projected: Vec<Option<ProjectedSplat>> = cloud
        .splats
        .par_iter()
        .map(|s| project_splat(s, cam, settings))
        .collect();
    let mut order: Vec<usize> = projected
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.as_ref().and_then(|p| p.bbox).map(|_| i))
        .collect();
    order.sort_by(|&a, &b| {
        let da = projected[a].as_ref().map_or(0.0, |p| p.depth);
        let db = projected[b].as_ref().map_or(0.0, |p| p.depth);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let mut rows = vec![Vec::new(); settings.height];
    for &i in &order {
        let [_, _, y0, y1] = projected[i].as_ref().and_then(|p| p.bbox).expect("binned");
        for row in &mut rows[y0..=y1] {
            row.push(i as u32);
        }
    }
    Prepared { projected, rows }
}

struct Contribution {
    index: usize,
    a: f64,
    g: f64,
    transmittance: f64,
    offset: Vector2<f64>,
}

/// Composites one pixel, reporting each accepted contribution. Returns the
/// colour before the background term and the final transmittance.
#[inline]
fn composite_pixel(
    px: usize,
    py: usize,
    list: &[u32],
    prep: &Prepared,
    settings: &RenderSettings,
    mut visit: impl FnMut(Contribution),
) -> ([f64; 3], f64) {
    let cutoff2 = settings.cutoff * settings.cutoff;
    let pixel = Vector2::new(px as f64, py as f64);
    let mut color = [0.0; 3];
    let mut t = 1.0;
    for &i in list {
        let i = i as usize;
        let p = prep.projected[i]
            .as_ref()
            .expect("listed splats are projected");
        let [x0, x1, _, _] = p.bbox.expect("listed splats have a bbox");
        if px < x0 || px > x1 {
            continue;
        }
        let d = pixel - p.mean2d;
        let m = d.dot(&(p.conic * d));
        if m > cutoff2 {
            continue;
        }
        let g = (-0.5 * m).exp();
        let a = p.alpha * g;
        if a < settings.alpha_floor {
            continue;
        }
        for c in 0..3 {
            color[c] += t * a * p.rgb[c];
        }
        visit(Contribution {
            index: i,
            a,
            g,
            transmittance: t,
            offset: d,
        });
        t *= 1.0 - a;
        if t < settings.transmittance_floor {
            break;
        }
    }
    (color, t)
}

/// Renders the cloud from `cam` into a 3-channel raster.
pub fn rasterize(cloud: &GaussianCloud, cam: &Camera, settings: &RenderSettings) -> Raster {
    let prep = prepare(cloud, cam, settings);
    let (w, h) = (settings.width, settings.height);
    let mut out = Raster::zeros(w, h, 3);
    out.data_mut()
        .par_chunks_mut(w * 3)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let (color, t) = composite_pixel(x, y, &prep.rows[y], &prep, settings, |_| {});
                for c in 0..3 {
                    row[x * 3 + c] = color[c] + t * settings.background[c];
                }
            }
        });
    out
}

/// Indices of the splats that contribute to each pixel, front to back,
/// row-major. Useful for silhouettes and for locating the discontinuities
/// of the rendering function.
pub fn coverage(cloud: &GaussianCloud, cam: &Camera, settings: &RenderSettings) -> Vec<Vec<usize>> {
    let prep = prepare(cloud, cam, settings);
    let (w, h) = (settings.width, settings.height);
    (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let prep = &prep;
            (0..w).map(move |x| {
                let mut hits = Vec::new();
                composite_pixel(x, y, &prep.rows[y], prep, settings, |c| hits.push(c.index));
                hits
            })
        })
        .collect()
}

/// Gradients of a scalar loss with respect to every splat parameter.
#[derive(Debug, Clone)]
pub struct RenderGradients {
    /// Per splat, in [`Splat::to_params`](super::Splat::to_params) order.
    pub params: Vec<[f64; PARAMS_PER_SPLAT]>,
    /// Per splat, gradient with respect to the projected pixel-space centre.
    pub mean2d: Vec<[f64; 2]>,
    /// Whether the splat survived culling and touched the image.
    pub visible: Vec<bool>,
}

/// Back-propagates `loss_grad = dL/d(render)` to the splat parameters.
pub fn rasterize_with_grad(
    cloud: &GaussianCloud,
    cam: &Camera,
    settings: &RenderSettings,
    loss_grad: &Raster,
) -> Result<RenderGradients> {
    if loss_grad.width() != settings.width
        || loss_grad.height() != settings.height
        || loss_grad.channels() != 3
    {
        return Err(Error::DimensionMismatch(format!(
            "loss gradient {}x{}x{} vs render {}x{}x3",
            loss_grad.width(),
            loss_grad.height(),
            loss_grad.channels(),
            settings.width,
            settings.height
        )));
    }
    let n = cloud.len();
    let prep = prepare(cloud, cam, settings);
    let (w, h) = (settings.width, settings.height);
    let band_rows = h.div_ceil(GRAD_BANDS);

    let band_grads: Vec<Vec<[f64; SCREEN_SLOTS]>> = (0..GRAD_BANDS)
        .into_par_iter()
        .map(|band| {
            let mut acc = vec![[0.0; SCREEN_SLOTS]; n];
            let y_start = (band * band_rows).min(h);
            let y_end = ((band + 1) * band_rows).min(h);
            let mut contribs: Vec<Contribution> = Vec::new();
            for y in y_start..y_end {
                for x in 0..w {
                    let dl_dpix = [
                        loss_grad.get(x, y, 0),
                        loss_grad.get(x, y, 1),
                        loss_grad.get(x, y, 2),
                    ];
                    if dl_dpix == [0.0; 3] {
                        continue;
                    }
                    contribs.clear();
                    composite_pixel(x, y, &prep.rows[y], &prep, settings, |c| contribs.push(c));
                    // colour of everything behind the current splat, composited
                    // from full transmittance
                    let mut behind = settings.background;
                    for c in contribs.iter().rev() {
                        let p = prep.projected[c.index].as_ref().expect("projected");
                        let slot = &mut acc[c.index];
                        let mut dl_da = 0.0;
                        for ch in 0..3 {
                            dl_da += dl_dpix[ch] * c.transmittance * (p.rgb[ch] - behind[ch]);
                            slot[S_RGB + ch] += dl_dpix[ch] * c.transmittance * c.a;
                            behind[ch] = p.rgb[ch] * c.a + (1.0 - c.a) * behind[ch];
                        }
                        slot[S_ALPHA] += dl_da * c.g;
                        let dl_dm = dl_da * p.alpha * (-0.5 * c.g);
                        let d = c.offset;
                        slot[S_CONIC] += dl_dm * d.x * d.x;
                        slot[S_CONIC + 1] += dl_dm * d.x * d.y;
                        slot[S_CONIC + 2] += dl_dm * d.y * d.x;
                        slot[S_CONIC + 3] += dl_dm * d.y * d.y;
                        // dm/dmean = -(A + Aᵀ) d
                        let sym = p.conic + p.conic.transpose();
                        let dm_dmean = -(sym * d);
                        slot[S_MEAN] += dl_dm * dm_dmean.x;
                        slot[S_MEAN + 1] += dl_dm * dm_dmean.y;
                    }
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![[0.0; SCREEN_SLOTS]; n];
    for band in &band_grads {
        for (dst, src) in screen.iter_mut().zip(band) {
            for k in 0..SCREEN_SLOTS {
                dst[k] += src[k];
            }
        }
    }

    let view = cam.rotation_matrix();
    let params: Vec<[f64; PARAMS_PER_SPLAT]> = screen
        .par_iter()
        .enumerate()
        .map(|(i, sg)| match prep.projected[i].as_ref() {
            Some(p) if p.bbox.is_some() => splat_param_grad(&cloud.splats[i], p, sg, cam, &view),
            _ => [0.0; PARAMS_PER_SPLAT],
        })
        .collect();
    let visible = prep
        .projected
        .iter()
        .map(|p| p.as_ref().is_some_and(|p| p.bbox.is_some()))
        .collect();
    let mean2d = screen.iter().map(|s| [s[S_MEAN], s[S_MEAN + 1]]).collect();
    Ok(RenderGradients {
        params,
        mean2d,
        visible,
    })
}

/// Chain rule from screen-space quantities to the splat parameters.
fn splat_param_grad(
    splat: &super::Splat,
    p: &ProjectedSplat,
    sg: &[f64; SCREEN_SLOTS],
    cam: &Camera,
    view: &Matrix3<f64>,
) -> [f64; PARAMS_PER_SPLAT] {
    let mut out = [0.0; PARAMS_PER_SPLAT];

    for ch in 0..3 {
        out[param::COLOR.start + ch] = SH_C0 * sg[S_RGB + ch];
    }
    out[param::OPACITY] = sg[S_ALPHA] * p.alpha * (1.0 - p.alpha);

    // conic = cov⁻¹  =>  dL/dcov = -conicᵀ (dL/dconic) conicᵀ
    let d_conic = Matrix2::new(
        sg[S_CONIC],
        sg[S_CONIC + 1],
        sg[S_CONIC + 2],
        sg[S_CONIC + 3],
    );
    let ct = p.conic.transpose();
    let d_cov = -(ct * d_conic * ct);

    // cov = J V Jᵀ + floor
    let j = &p.jacobian;
    let v = &p.view_cov;
    let d_j = d_cov * j * v.transpose() + d_cov.transpose() * j * v;
    let d_v = j.transpose() * d_cov * j;
    // V = W Σ Wᵀ
    let d_sigma = view.transpose() * d_v * view;
    // Σ = M Mᵀ, M = R S
    let m = p.rot * Matrix3::from_diagonal(&p.scales);
    let d_m = (d_sigma + d_sigma.transpose()) * m;
    let mut d_rot = Matrix3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            d_rot[(r, c)] = d_m[(r, c)] * p.scales[c];
        }
    }
    for c in 0..3 {
        let d_s: f64 = (0..3).map(|r| d_m[(r, c)] * p.rot[(r, c)]).sum();
        out[param::SCALE.start + c] = d_s * p.scales[c];
    }
    let d_q = quaternion_grad(&splat.rotation, &d_rot);
    out[param::ROTATION].copy_from_slice(&d_q);

    // mean2d and J both depend on the camera-space centre t
    let t = &p.cam_point;
    let (x, y, z) = (t.x, t.y, t.z);
    let d_mean = Vector2::new(sg[S_MEAN], sg[S_MEAN + 1]);
    let mut d_t: Vector3<f64> = j.transpose() * d_mean;
    let z2 = z * z;
    let z3 = z2 * z;
    d_t.x += d_j[(0, 2)] * (-cam.fx / z2);
    d_t.y += d_j[(1, 2)] * (-cam.fy / z2);
    d_t.z += d_j[(0, 0)] * (-cam.fx / z2)
        + d_j[(0, 2)] * (2.0 * cam.fx * x / z3)
        + d_j[(1, 1)] * (-cam.fy / z2)
        + d_j[(1, 2)] * (2.0 * cam.fy * y / z3);
    let d_pos = view.transpose() * d_t;
    out[param::POSITION].copy_from_slice(d_pos.as_slice());
    out
}

/// Gradient with respect to the raw quaternion `(w, x, y, z)`, given the
/// gradient with respect to the rotation matrix of its normalization.
fn quaternion_grad(q: &[f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / norm);
    let g = |r: usize, c: usize| d_r[(r, c)];
    let dw =
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let dn = [dw, dx, dy, dz];
    let qn = [w, x, y, z];
    let dot: f64 = dn.iter().zip(&qn).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (dn[k] - qn[k] * dot) / norm;
    }
    out
}

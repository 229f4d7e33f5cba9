//! Image fidelity metrics, rendering throughput and model size.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussians::{rasterize, GaussianCloud, RenderSettings};
use crate::imaging::{gaussian_blur, gaussian_blur_adjoint, gaussian_kernel, Raster};
use crate::training::combined_loss;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

const C1: f64 = SSIM_K1 * SSIM_K1;
const C2: f64 = SSIM_K2 * SSIM_K2;

fn ssim_taps() -> Vec<f64> {
    gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW / 2)
}

/// Mean absolute difference over all pixel-channels.
pub fn l1_metric(a: &Raster, b: &Raster) -> Result<f64> {
    a.check_same_shape(b, "l1")?;
    let n = a.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n as f64)
}

pub fn mse(a: &Raster, b: &Raster) -> Result<f64> {
    a.check_same_shape(b, "mse")?;
    let n = a.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Raster, b: &Raster) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

struct SsimTerms {
    mu_a: Raster,
    mu_b: Raster,
    var_a: Raster,
    var_b: Raster,
    cov: Raster,
}

fn ssim_terms(a: &Raster, b: &Raster, taps: &[f64]) -> SsimTerms {
    let prod = |x: &Raster, y: &Raster| {
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        Raster::from_vec(x.width(), x.height(), x.channels(), data).expect("same shape")
    };
    let mu_a = gaussian_blur(a, taps);
    let mu_b = gaussian_blur(b, taps);
    let ea2 = gaussian_blur(&prod(a, a), taps);
    let eb2 = gaussian_blur(&prod(b, b), taps);
    let eab = gaussian_blur(&prod(a, b), taps);
    let sub = |e: &Raster, m1: &Raster, m2: &Raster| {
        let data = e
            .data()
            .iter()
            .zip(m1.data().iter().zip(m2.data()))
            .map(|(e, (p, q))| e - p * q)
            .collect();
        Raster::from_vec(e.width(), e.height(), e.channels(), data).expect("same shape")
    };
    SsimTerms {
        var_a: sub(&ea2, &mu_a, &mu_a),
        var_b: sub(&eb2, &mu_b, &mu_b),
        cov: sub(&eab, &mu_a, &mu_b),
        mu_a,
        mu_b,
    }
}

fn check_ssim_input(a: &Raster, b: &Raster) -> Result<()> {
    a.check_same_shape(b, "ssim")?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

/// Windowed SSIM (11x11 Gaussian window, σ = 1.5, L = 1, replicate
/// padding), averaged over pixels and channels.
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    check_ssim_input(a, b)?;
    let t = ssim_terms(a, b, &ssim_taps());
    let n = a.data().len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (t.mu_a.data()[i], t.mu_b.data()[i]);
        let num = (2.0 * ma * mb + C1) * (2.0 * t.cov.data()[i] + C2);
        let den = (ma * ma + mb * mb + C1) * (t.var_a.data()[i] + t.var_b.data()[i] + C2);
        total += num / den;
    }
    Ok(total / n as f64)
}

/// SSIM and its gradient with respect to `a`.
///
/// Each local score depends on `a` only through the window statistics
/// `m1 = G a`, `m2 = G a²` and `m3 = G (a b)`, so the gradient is
/// `Gᵀ ∂s/∂m1 + 2a ⊙ Gᵀ ∂s/∂m2 + b ⊙ Gᵀ ∂s/∂m3`, scaled by the averaging.
pub fn ssim_with_grad(a: &Raster, b: &Raster) -> Result<(f64, Raster)> {
    check_ssim_input(a, b)?;
    Ok(ssim_value_and_grad(a, b))
}

/// As [`ssim_with_grad`] without the minimum-size check; images smaller than
/// the window are handled by the replicate padding.
pub(crate) fn ssim_value_and_grad(a: &Raster, b: &Raster) -> (f64, Raster) {
    let taps = ssim_taps();
    let t = ssim_terms(a, b, &taps);
    let n = a.data().len();
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    let mut d3 = vec![0.0; n];
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let (ma, mb) = (t.mu_a.data()[i], t.mu_b.data()[i]);
        let a1 = 2.0 * ma * mb + C1;
        let a2 = 2.0 * t.cov.data()[i] + C2;
        let b1 = ma * ma + mb * mb + C1;
        let b2 = t.var_a.data()[i] + t.var_b.data()[i] + C2;
        let den = b1 * b2;
        let s = a1 * a2 / den;
        total += s;
        d1[i] =
            inv_n * ((2.0 * mb * a2 - 2.0 * mb * a1) / den - s * (2.0 * ma / b1 - 2.0 * ma / b2));
        d2[i] = inv_n * (-s / b2);
        d3[i] = inv_n * (2.0 * a1 / den);
    }
    let back =
        |d: Vec<f64>| gaussian_blur_adjoint(&Raster::from_vec(w, h, ch, d).expect("shape"), &taps);
    let (g1, g2, g3) = (back(d1), back(d2), back(d3));
    let grad: Vec<f64> = (0..n)
        .map(|i| g1.data()[i] + 2.0 * a.data()[i] * g2.data()[i] + b.data()[i] * g3.data()[i])
        .collect();
    (
        total * inv_n,
        Raster::from_vec(w, h, ch, grad).expect("shape"),
    )
}

/// Forward-rendering throughput in frames per second. Cameras are cycled;
/// one warm-up frame is rendered before the clock starts.
pub fn fps_benchmark(
    cloud: &GaussianCloud,
    cameras: &[Camera],
    settings: &RenderSettings,
    frames: usize,
) -> Result<f64> {
    if frames == 0 {
        return Err(Error::InvalidArgument("frames must be at least 1".into()));
    }
    if cameras.is_empty() {
        return Err(Error::NotEnough {
            what: "cameras",
            needed: 1,
            got: 0,
        });
    }
    settings.validate()?;
    std::hint::black_box(rasterize(cloud, &cameras[0], settings));
    let start = Instant::now();
    for k in 0..frames {
        std::hint::black_box(rasterize(cloud, &cameras[k % cameras.len()], settings));
    }
    let elapsed = start.elapsed().as_secs_f64().max(1e-9);
    Ok(frames as f64 / elapsed)
}

/// Byte length of the binary PLY that `save_splats` writes for this cloud.
pub fn model_size(cloud: &GaussianCloud) -> u64 {
    crate::scene_io::splat_ply_header(cloud.len()).len() as u64
        + (crate::scene_io::SPLAT_RECORD_BYTES * cloud.len()) as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub ssim: f64,
    /// `f64::INFINITY` when every view is reproduced exactly.
    pub psnr: f64,
    pub l1: f64,
    pub loss: f64,
    pub fps: f64,
    /// Training wall-clock time in seconds.
    pub train_time: f64,
    pub size_bytes: u64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "ssim,psnr,l1,loss,fps,time_s,size_mb";

    pub fn size_mb(&self) -> f64 {
        self.size_bytes as f64 / (1024.0 * 1024.0)
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.ssim,
            self.psnr,
            self.l1,
            self.loss,
            self.fps,
            self.train_time,
            self.size_mb()
        )
    }

    pub fn to_table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9}\n{:>8.4} {:>8.2} {:>8.4} {:>8.4} {:>9.2} {:>9.1} {:>9.3}",
            "SSIM",
            "PSNR",
            "L1",
            "Loss",
            "FPS",
            "Time",
            "Size(MB)",
            self.ssim,
            self.psnr,
            self.l1,
            self.loss,
            self.fps,
            self.train_time,
            self.size_mb()
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub settings: RenderSettings,
    pub ssim_weight: f64,
    /// Frames for the FPS measurement; 0 skips it and reports 0.
    pub fps_frames: usize,
    pub train_time: f64,
}

/// Per-view quality of one rendering against its target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewMetrics {
    pub ssim: f64,
    pub psnr: f64,
    pub l1: f64,
    pub loss: f64,
}

pub fn view_metrics(
    rendered: &Raster,
    target: &Raster,
    attention: &Raster,
    ssim_weight: f64,
) -> Result<ViewMetrics> {
    Ok(ViewMetrics {
        ssim: ssim(rendered, target)?,
        psnr: psnr(rendered, target)?,
        l1: l1_metric(rendered, target)?,
        loss: combined_loss(rendered, target, attention, ssim_weight)?.0,
    })
}

/// Renders every evaluation view and averages its metrics. Without
/// attention maps the loss uses uniform weights.
pub fn evaluate(
    cloud: &GaussianCloud,
    cameras: &[Camera],
    targets: &[Raster],
    attention: Option<&[Raster]>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cameras.len() != targets.len() || attention.is_some_and(|a| a.len() != targets.len()) {
        return Err(Error::DimensionMismatch(format!(
            "{} cameras, {} targets, {} attention maps",
            cameras.len(),
            targets.len(),
            attention.map_or(targets.len(), |a| a.len())
        )));
    }
    if cameras.is_empty() {
        return Err(Error::NotEnough {
            what: "evaluation views",
            needed: 1,
            got: 0,
        });
    }
    cfg.settings.validate()?;
    let per_view: Vec<ViewMetrics> = (0..cameras.len())
        .into_par_iter()
        .map(|i| {
            let rendered = rasterize(cloud, &cameras[i], &cfg.settings);
            let ones;
            let attn = match attention {
                Some(a) => &a[i],
                None => {
                    ones = Raster::filled(targets[i].width(), targets[i].height(), 1, 1.0);
                    &ones
                }
            };
            view_metrics(&rendered, &targets[i], attn, cfg.ssim_weight)
        })
        .collect::<Result<_>>()?;
    let n = per_view.len() as f64;
    let mean = |f: fn(&ViewMetrics) -> f64| per_view.iter().map(f).sum::<f64>() / n;
    let fps = if cfg.fps_frames > 0 {
        fps_benchmark(cloud, cameras, &cfg.settings, cfg.fps_frames)?
    } else {
        0.0
    };
    Ok(EvalReport {
        ssim: mean(|v| v.ssim),
        psnr: mean(|v| v.psnr),
        l1: mean(|v| v.l1),
        loss: mean(|v| v.loss),
        fps,
        train_time: cfg.train_time,
        size_bytes: model_size(cloud),
    })
}

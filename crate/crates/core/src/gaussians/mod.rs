//! Gaussian splat model, EWA projection and a depth-sorted alpha-compositing
//! rasterizer with analytic parameter gradients.

mod init;
mod project;
mod render;

pub use init::init_from_cloud;
pub use project::{project_splat, ProjectedSplat, COV2D_FLOOR};
pub use render::{coverage, rasterize, rasterize_with_grad, RenderGradients};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Degree-0 spherical harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

pub const MIN_LOG_SCALE: f64 = -13.815_510_557_964_274; // ln(1e-6)
pub const MAX_LOG_SCALE: f64 = 6.907_755_278_982_137; // ln(1e3)

/// Number of scalar parameters per splat, in on-disk order:
/// position(3), color(3), opacity logit(1), log scale(3), rotation wxyz(4).
pub const PARAMS_PER_SPLAT: usize = 14;

/// Default near-plane depth for rendering and visibility tests.
pub const DEFAULT_NEAR: f64 = 0.01;

pub mod param {
    use std::ops::Range;
    pub const POSITION: Range<usize> = 0..3;
    pub const COLOR: Range<usize> = 3..6;
    pub const OPACITY: usize = 6;
    pub const SCALE: Range<usize> = 7..10;
    pub const ROTATION: Range<usize> = 10..14;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub position: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    /// Degree-0 SH coefficients; `rgb = SH_C0 * color + 0.5`.
    pub color: [f64; 3],
}

impl Splat {
    pub fn from_rgb(position: [f64; 3], rgb: [f64; 3], scale: f64, opacity: f64) -> Self {
        Self {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [scale.ln().clamp(MIN_LOG_SCALE, MAX_LOG_SCALE); 3],
            opacity_logit: logit(opacity),
            color: rgb.map(rgb_to_sh),
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn rgb(&self) -> [f64; 3] {
        self.color.map(sh_to_rgb)
    }

    pub fn scales(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance(&self.rotation, &self.log_scale)
    }

    pub fn to_params(&self) -> [f64; PARAMS_PER_SPLAT] {
        let mut p = [0.0; PARAMS_PER_SPLAT];
        p[param::POSITION].copy_from_slice(&self.position);
        p[param::COLOR].copy_from_slice(&self.color);
        p[param::OPACITY] = self.opacity_logit;
        p[param::SCALE].copy_from_slice(&self.log_scale);
        p[param::ROTATION].copy_from_slice(&self.rotation);
        p
    }

    pub fn from_params(p: &[f64; PARAMS_PER_SPLAT]) -> Self {
        let mut s = Splat {
            position: [0.0; 3],
            rotation: [0.0; 4],
            log_scale: [0.0; 3],
            opacity_logit: p[param::OPACITY],
            color: [0.0; 3],
        };
        s.position.copy_from_slice(&p[param::POSITION]);
        s.color.copy_from_slice(&p[param::COLOR]);
        s.log_scale.copy_from_slice(&p[param::SCALE]);
        s.rotation.copy_from_slice(&p[param::ROTATION]);
        s
    }

    /// Restores the type invariants after an unconstrained update.
    pub fn renormalize(&mut self) {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            self.rotation = self.rotation.map(|v| v / n);
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
        for l in &mut self.log_scale {
            *l = l.clamp(MIN_LOG_SCALE, MAX_LOG_SCALE);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub splats: Vec<Splat>,
}

impl GaussianCloud {
    pub fn new(splats: Vec<Splat>) -> Self {
        Self { splats }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub near: f64,
    /// Mahalanobis radius beyond which a splat does not touch a pixel.
    pub cutoff: f64,
    pub alpha_floor: f64,
    pub transmittance_floor: f64,
}

impl RenderSettings {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            background: [1.0; 3],
            near: DEFAULT_NEAR,
            cutoff: 3.0,
            alpha_floor: 1.0 / 255.0,
            transmittance_floor: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(
                "render size must be positive".into(),
            ));
        }
        if !(self.near > 0.0) || !(self.cutoff >= 1.0) {
            return Err(Error::InvalidArgument(
                "near plane must be positive and cutoff at least 1".into(),
            ));
        }
        if !(self.alpha_floor > 0.0) || !(self.transmittance_floor > 0.0) {
            return Err(Error::InvalidArgument(
                "alpha and transmittance floors must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn sh_to_rgb(c: f64) -> f64 {
    SH_C0 * c + 0.5
}

#[inline]
pub fn rgb_to_sh(c: f64) -> f64 {
    (c - 0.5) / SH_C0
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quaternion_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn covariance(rotation: &[f64; 4], log_scale: &[f64; 3]) -> Matrix3<f64> {
    let r = quaternion_to_matrix(rotation);
    let m = r * Matrix3::from_diagonal(&Vector3::from(log_scale.map(f64::exp)));
    m * m.transpose()
}

/// Unnormalized Gaussian `exp(-½ xᵀ Σ⁻¹ x)` at an offset from the centre.
pub fn density(offset: &Vector3<f64>, sigma: &Matrix3<f64>) -> Result<f64> {
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
    let y = chol.solve(offset);
    Ok((-0.5 * offset.dot(&y)).exp())
}

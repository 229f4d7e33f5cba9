use super::{logit, rgb_to_sh, GaussianCloud, Splat, MAX_LOG_SCALE, MIN_LOG_SCALE};
use crate::error::{Error, Result};
use crate::sfm::SparseCloud;

/// Initial opacity of freshly seeded splats.
pub const INIT_OPACITY: f64 = 0.1;
/// Isotropic scale used when a point has no neighbours.
pub const FALLBACK_SCALE: f64 = 0.01;

/// One isotropic splat per sparse point, sized by the mean distance to its
/// three nearest neighbours.
pub fn init_from_cloud(cloud: &SparseCloud) -> Result<GaussianCloud> {
    if cloud.points.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot initialize splats from an empty point cloud".into(),
        ));
    }
    let pts = &cloud.points;
    let splats = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut dists: Vec<f64> = pts
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p - q).norm())
                .collect();
            let k = dists.len().min(3);
            let scale = if k == 0 {
                FALLBACK_SCALE
            } else {
                dists.select_nth_unstable_by(k - 1, f64::total_cmp);
                dists[..k].iter().sum::<f64>() / k as f64
            };
            let log_scale = if scale > 0.0 {
                scale.ln().clamp(MIN_LOG_SCALE, MAX_LOG_SCALE)
            } else {
                MIN_LOG_SCALE
            };
            let rgb = cloud.colors[i].map(|c| c as f64 / 255.0);
            Splat {
                position: [p.x, p.y, p.z],
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: [log_scale; 3],
                opacity_logit: logit(INIT_OPACITY),
                color: rgb.map(rgb_to_sh),
            }
        })
        .collect();
    Ok(GaussianCloud::new(splats))
}

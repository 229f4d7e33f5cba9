//! Attention scoring, pruning and densification of splat clouds.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussians::{quaternion_to_matrix, GaussianCloud, DEFAULT_NEAR, MIN_LOG_SCALE};
use crate::imaging::Raster;

/// Scale divisor applied when a large splat is split in two.
pub const SPLIT_SCALE_FACTOR: f64 = 1.6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Mean attention over the views that see the splat centre.
    #[default]
    Mean,
    /// Maximum attention over those views.
    Max,
}

/// Per splat, the attention sampled bilinearly at its projected centre and
/// aggregated over the views where the centre is in front of the near plane
/// and inside the image. Splats seen by no view score 0.
pub fn attention_score_splats(
    cloud: &GaussianCloud,
    cameras: &[Camera],
    attn: &[Raster],
    mode: ScoreMode,
) -> Result<Vec<f64>> {
    if cameras.len() != attn.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} cameras but {} attention maps",
            cameras.len(),
            attn.len()
        )));
    }
    Ok(cloud
        .splats
        .iter()
        .map(|s| {
            let p = Vector3::from(s.position);
            let mut sum = 0.0;
            let mut max: f64 = 0.0;
            let mut seen = 0usize;
            for (cam, a) in cameras.iter().zip(attn) {
                let pc = cam.to_camera(&p);
                if !(pc.z >= DEFAULT_NEAR) {
                    continue;
                }
                let uv = cam.project_camera_point(&pc);
                let (w, h) = (a.width() as f64, a.height() as f64);
                if !(uv.x >= 0.0 && uv.y >= 0.0 && uv.x <= w - 1.0 && uv.y <= h - 1.0) {
                    continue;
                }
                let v = a.sample_bilinear(uv.x, uv.y, 0);
                sum += v;
                max = max.max(v);
                seen += 1;
            }
            match (seen, mode) {
                (0, _) => 0.0,
                (_, ScoreMode::Mean) => sum / seen as f64,
                (_, ScoreMode::Max) => max,
            }
        })
        .collect())
}

/// Indices of the splats that survive pruning, in order.
pub(crate) fn prune_keep(
    cloud: &GaussianCloud,
    scores: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<usize>> {
    if scores.len() != cloud.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} splats",
            scores.len(),
            cloud.len()
        )));
    }
    Ok((0..cloud.len())
        .filter(|&i| {
            scores[i] >= cfg.prune_attention_threshold
                && cloud.splats[i].opacity() >= cfg.prune_opacity_threshold
        })
        .collect())
}

/// Removes splats scoring below the attention threshold or with opacity
/// below the opacity threshold, keeping the original order.
pub fn attention_prune(
    cloud: &GaussianCloud,
    scores: &[f64],
    cfg: &TrainConfig,
) -> Result<GaussianCloud> {
    let keep = prune_keep(cloud, scores, cfg)?;
    Ok(GaussianCloud::new(
        keep.into_iter().map(|i| cloud.splats[i]).collect(),
    ))
}

/// Output of densification with the provenance of every splat.
#[derive(Debug, Clone)]
pub(crate) struct Densified {
    pub cloud: GaussianCloud,
    /// For each output splat, the input index it continues (untouched
    /// originals) or `None` for newly created clones and split halves.
    pub origin: Vec<Option<usize>>,
}

pub(crate) fn densify_indexed(
    cloud: &GaussianCloud,
    mean_grads: &[f64],
    scene_extent: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Densified> {
    if mean_grads.len() != cloud.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} gradients for {} splats",
            mean_grads.len(),
            cloud.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let large = cfg.densify_scale_fraction * scene_extent;
    let mut count = cloud.len();
    let mut split = vec![false; cloud.len()];
    let mut extra = Vec::new();
    for (i, s) in cloud.splats.iter().enumerate() {
        if !(mean_grads[i] > cfg.densify_grad_threshold) {
            continue;
        }
        let max_scale = s.scales().iter().copied().fold(0.0, f64::max);
        if max_scale > large {
            // one splat becomes two
            if count + 1 > cfg.max_splats {
                continue;
            }
            split[i] = true;
            count += 1;
            let rot = quaternion_to_matrix(&s.rotation);
            let scales = Vector3::from(s.scales());
            for _ in 0..2 {
                let eps = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                let offset: Vector3<f64> = rot * scales.component_mul(&eps);
                let mut child = *s;
                for k in 0..3 {
                    child.position[k] += offset[k];
                    child.log_scale[k] =
                        (s.log_scale[k] - SPLIT_SCALE_FACTOR.ln()).max(MIN_LOG_SCALE);
                }
                extra.push(child);
            }
        } else {
            if count + 1 > cfg.max_splats {
                continue;
            }
            count += 1;
            extra.push(*s);
        }
    }
    let mut splats = Vec::with_capacity(count);
    let mut origin = Vec::with_capacity(count);
    for (i, s) in cloud.splats.iter().enumerate() {
        if !split[i] {
            splats.push(*s);
            origin.push(Some(i));
        }
    }
    origin.extend(std::iter::repeat_n(None, extra.len()));
    splats.extend(extra);
    Ok(Densified {
        cloud: GaussianCloud::new(splats),
        origin,
    })
}

/// Clones small splats and splits large ones (relative to `scene_extent`)
/// whose mean screen-space positional gradient exceeds the threshold. The
/// result never exceeds `cfg.max_splats` unless the input already does.
pub fn densify(
    cloud: &GaussianCloud,
    mean_grads: &[f64],
    scene_extent: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<GaussianCloud> {
    Ok(densify_indexed(cloud, mean_grads, scene_extent, cfg, seed)?.cloud)
}

//! Mask-restricted structure from motion: Harris features, mutual
//! nearest-neighbour matching, RANSAC epipolar verification and incremental
//! reconstruction with bundle adjustment.

mod bundle;
mod epipolar;
mod features;
mod homography;
mod matching;
mod pnp;
mod reconstruct;
mod triangulate;

pub use bundle::{bundle_adjust, BundleReport, Observation};
pub use epipolar::{
    decompose_essential, eight_point, epipolar_residual, essential_from_fundamental,
    sampson_distance, verify_geometry, FundamentalMatrix,
};
pub use features::{
    detect_features_described, detect_features_masked, harris_response, patch_descriptor,
    DESCRIPTOR_LEN, HARRIS_K, PATCH_SIZE,
};
pub use homography::{decompose_homography, fit_homography, homography_dlt, transfer_error};
pub use matching::match_features;
pub use pnp::{refine_pose, solve_pnp, solve_pnp_dlt, solve_pnp_with_priors};
pub use reconstruct::{incremental_reconstruct, Reconstruction};
pub use triangulate::{triangulate, triangulation_angle};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub x: f64,
    pub y: f64,
    /// Unit-norm, mean-subtracted intensity patch.
    pub descriptor: Vec<f64>,
    pub response: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
}

/// Sparse points with per-point colour and `(view, feature)` observations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[u8; 3]>,
    pub tracks: Vec<Vec<(usize, usize)>>,
}

impl SparseCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.colors.len() || self.points.len() != self.tracks.len() {
            return Err(Error::DimensionMismatch(format!(
                "sparse cloud has {} points, {} colors, {} tracks",
                self.points.len(),
                self.colors.len(),
                self.tracks.len()
            )));
        }
        Ok(())
    }

    /// Keeps the points whose index satisfies `keep`.
    pub fn retain(&self, mut keep: impl FnMut(usize) -> bool) -> SparseCloud {
        let mut out = SparseCloud::default();
        for i in 0..self.points.len() {
            if keep(i) {
                out.points.push(self.points[i]);
                out.colors.push(self.colors[i]);
                out.tracks.push(self.tracks[i].clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SfmConfig {
    pub max_features: usize,
    pub ratio: f64,
    /// Sampson distance threshold for fundamental-matrix inliers.
    pub ransac_threshold_px: f64,
    pub ransac_max_iterations: usize,
    pub ransac_confidence: f64,
    pub seed: u64,
    /// Reprojection threshold for PnP inliers.
    pub pnp_threshold_px: f64,
    pub min_registration_inliers: usize,
    /// Observations reprojecting further than this are discarded.
    pub outlier_threshold_px: f64,
    pub min_triangulation_angle_deg: f64,
    pub ba_max_iterations: usize,
    pub ba_tolerance: f64,
    /// Fraction of observing views a point must project into the mask in.
    pub mask_support_fraction: f64,
    /// Sample descriptors from the masked image instead of the original.
    pub describe_masked: bool,
}

impl Default for SfmConfig {
    fn default() -> Self {
        Self {
            max_features: 2000,
            ratio: 0.8,
            ransac_threshold_px: 1.0,
            ransac_max_iterations: 2000,
            ransac_confidence: 0.99,
            seed: 0,
            pnp_threshold_px: 4.0,
            min_registration_inliers: 12,
            outlier_threshold_px: 2.0,
            min_triangulation_angle_deg: 2.0,
            ba_max_iterations: 100,
            ba_tolerance: 1e-8,
            mask_support_fraction: 1.0,
            describe_masked: false,
        }
    }
}

impl SfmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "ratio must be in (0, 1], got {}",
                self.ratio
            )));
        }
        if !(self.mask_support_fraction >= 0.0 && self.mask_support_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mask support fraction must be in [0, 1], got {}",
                self.mask_support_fraction
            )));
        }
        if !(self.ransac_threshold_px > 0.0 && self.outlier_threshold_px > 0.0) {
            return Err(Error::InvalidArgument("thresholds must be positive".into()));
        }
        if !(self.ransac_confidence > 0.0 && self.ransac_confidence < 1.0) {
            return Err(Error::InvalidArgument(
                "RANSAC confidence must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Keeps a point iff it projects to a true mask pixel in at least
/// `ceil(fraction * n)` of its `n` observing views. Views without a camera
/// count as unsupported.
pub fn filter_background_points(
    cloud: &SparseCloud,
    cameras: &[Option<Camera>],
    masks: &[BinaryMask],
    fraction: f64,
) -> Result<SparseCloud> {
    cloud.validate()?;
    if cameras.len() != masks.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} cameras but {} masks",
            cameras.len(),
            masks.len()
        )));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "mask support fraction must be in [0, 1], got {fraction}"
        )));
    }
    let mut views = Vec::new();
    for i in 0..cloud.len() {
        views.clear();
        views.extend(cloud.tracks[i].iter().map(|&(v, _)| v));
        views.sort_unstable();
        views.dedup();
        if views.iter().any(|&v| v >= masks.len()) {
            return Err(Error::InvalidArgument(format!(
                "point {i} observed in view outside 0..{}",
                masks.len()
            )));
        }
    }
    Ok(cloud.retain(|i| {
        let mut views: Vec<usize> = cloud.tracks[i].iter().map(|&(v, _)| v).collect();
        views.sort_unstable();
        views.dedup();
        let support = views
            .iter()
            .filter(|&&v| {
                cameras[v]
                    .as_ref()
                    .and_then(|c| c.project(&cloud.points[i]))
                    .is_some_and(|(uv, _)| masks[v].contains(uv.x, uv.y))
            })
            .count();
        let needed = (fraction * views.len() as f64).ceil() as usize;
        !views.is_empty() && support >= needed
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use nalgebra::Point3;

    fn intr() -> Intrinsics {
        Intrinsics {
            fx: 50.0,
            fy: 50.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        }
    }

    fn ring_cameras(n: usize) -> Vec<Option<Camera>> {
        (0..n)
            .map(|k| {
                let a = k as f64 * 0.2;
                let eye = Point3::new(4.0 * a.sin(), 0.0, -4.0 * a.cos());
                Some(Camera::look_at(
                    &intr(),
                    &eye,
                    &Point3::origin(),
                    &nalgebra::Vector3::y(),
                ))
            })
            .collect()
    }

    fn single_point(p: Vector3<f64>, views: &[usize]) -> SparseCloud {
        SparseCloud {
            points: vec![p],
            colors: vec![[1, 2, 3]],
            tracks: vec![views.iter().map(|&v| (v, 0)).collect()],
        }
    }

    #[test]
    fn point_outside_all_masks_is_removed() {
        let cams = ring_cameras(3);
        let masks = vec![BinaryMask::filled(64, 64, false); 3];
        let out = filter_background_points(
            &single_point(Vector3::zeros(), &[0, 1, 2]),
            &cams,
            &masks,
            1.0,
        )
        .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn point_inside_all_masks_is_kept() {
        let cams = ring_cameras(3);
        let masks = vec![BinaryMask::filled(64, 64, true); 3];
        let cloud = single_point(Vector3::zeros(), &[0, 1, 2]);
        let out = filter_background_points(&cloud, &cams, &masks, 1.0).unwrap();
        assert_eq!(out, cloud);
    }

    #[test]
    fn half_support_sits_on_the_ceiling_boundary() {
        let cams = ring_cameras(4);
        let mut masks = vec![BinaryMask::filled(64, 64, true); 2];
        masks.extend(vec![BinaryMask::filled(64, 64, false); 2]);
        let cloud = single_point(Vector3::zeros(), &[0, 1, 2, 3]);
        // enumerate: supported views {0, 1}, ceil(0.5 * 4) = 2 -> kept
        let support = (0..4)
            .filter(|&v| {
                let (uv, _) = cams[v].unwrap().project(&Vector3::zeros()).unwrap();
                masks[v].contains(uv.x, uv.y)
            })
            .count();
        assert_eq!(support, 2);
        assert_eq!(
            filter_background_points(&cloud, &cams, &masks, 0.5)
                .unwrap()
                .len(),
            1
        );
        assert_eq!(
            filter_background_points(&cloud, &cams, &masks, 0.51)
                .unwrap()
                .len(),
            0
        );
        assert_eq!(
            filter_background_points(&cloud, &cams, &masks, 1.0)
                .unwrap()
                .len(),
            0
        );
    }

    #[test]
    fn missing_camera_counts_as_unsupported() {
        let mut cams = ring_cameras(2);
        cams[1] = None;
        let masks = vec![BinaryMask::filled(64, 64, true); 2];
        let cloud = single_point(Vector3::zeros(), &[0, 1]);
        assert!(filter_background_points(&cloud, &cams, &masks, 1.0)
            .unwrap()
            .is_empty());
        assert_eq!(
            filter_background_points(&cloud, &cams, &masks, 0.5)
                .unwrap()
                .len(),
            1
        );
    }

    proptest::proptest! {
        #[test]
        fn filtering_is_an_idempotent_subset(
            pts in proptest::collection::vec(proptest::array::uniform3(-1.5f64..1.5), 1..30),
            disc in 4.0f64..30.0,
            fraction in 0.0f64..=1.0,
        ) {
            let cams = ring_cameras(3);
            let masks: Vec<_> = (0..3)
                .map(|k| {
                    let c = 32.0 + k as f64 * 3.0;
                    BinaryMask::from_fn(64, 64, |x, y| {
                        let (dx, dy) = (x as f64 - c, y as f64 - 32.0);
                        dx * dx + dy * dy < disc * disc
                    })
                })
                .collect();
            let cloud = SparseCloud {
                points: pts.iter().map(|p| Vector3::from(*p)).collect(),
                colors: vec![[0; 3]; pts.len()],
                tracks: (0..pts.len()).map(|i| vec![(i % 3, i), ((i + 1) % 3, i)]).collect(),
            };
            let once = filter_background_points(&cloud, &cams, &masks, fraction).unwrap();
            let twice = filter_background_points(&once, &cams, &masks, fraction).unwrap();
            proptest::prop_assert_eq!(&once, &twice);
            for p in &once.points {
                proptest::prop_assert!(cloud.points.contains(p));
            }
        }
    }

    #[test]
    fn default_config_is_valid() {
        SfmConfig::default().validate().unwrap();
    }
}

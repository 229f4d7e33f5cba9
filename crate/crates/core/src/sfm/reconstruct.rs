//! Incremental reconstruction: two-view initialization, PnP registration,
//! triangulation, outlier filtering and global bundle adjustment.

use std::collections::{BTreeSet, HashMap};

use log::{debug, info, warn};
use nalgebra::{Rotation3, UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;

use super::bundle::{bundle_adjust, Observation};
use super::epipolar::{decompose_essential, essential_from_fundamental, verify_geometry_with};
use super::features::detect_features_described;
use super::homography::{decompose_homography, fit_homography};
use super::matching::match_features;
use super::pnp::solve_pnp_with_priors;
use super::triangulate::{triangulate, triangulation_angle};
use super::{Feature, Match, SfmConfig, SparseCloud};
use crate::camera::{Camera, Intrinsics};
use crate::error::{Error, Result};
use crate::imaging::{composite_white, to_grayscale, BinaryMask, Raster};

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub cloud: SparseCloud,
    /// One entry per input view; `None` for views that were not registered.
    pub cameras: Vec<Option<Camera>>,
    pub features: Vec<Vec<Feature>>,
    pub init_pair: (usize, usize),
    pub warnings: Vec<String>,
}

impl Reconstruction {
    /// Pixel reprojection error of every observation in the cloud.
    pub fn reprojection_errors(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (p, track) in self.cloud.points.iter().zip(&self.cloud.tracks) {
            for &(v, f) in track {
                let feat = &self.features[v][f];
                let err = self.cameras[v]
                    .as_ref()
                    .and_then(|c| c.project(p))
                    .map_or(f64::INFINITY, |(uv, _)| {
                        (uv - Vector2::new(feat.x, feat.y)).norm()
                    });
                out.push(err);
            }
        }
        out
    }

    pub fn mean_reprojection_error(&self) -> f64 {
        let e = self.reprojection_errors();
        if e.is_empty() {
            return 0.0;
        }
        e.iter().sum::<f64>() / e.len() as f64
    }
}

struct VerifiedPair {
    a: usize,
    b: usize,
    f: nalgebra::Matrix3<f64>,
    inliers: Vec<Match>,
}

struct PointState {
    position: Vector3<f64>,
    obs: Vec<(usize, usize)>,
}

/// Disjoint sets over all features, each set carrying the views it observes.
struct UnionFind {
    parent: Vec<usize>,
    views: Vec<BTreeSet<usize>>,
}

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Merges the sets of `a` and `b` unless they already share a view.
    fn union_consistent(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb || !self.views[ra].is_disjoint(&self.views[rb]) {
            return;
        }
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        let moved = std::mem::take(&mut self.views[hi]);
        self.views[lo].extend(moved);
        self.parent[hi] = lo;
    }
}

/// Connected components of verified matches. Pairs are merged strongest
/// first and a merge that would put two features of one view in the same
/// track is skipped, so every track observes each view at most once.
fn build_tracks(offsets: &[usize], pairs: &[VerifiedPair]) -> Vec<Vec<(usize, usize)>> {
    let total = *offsets.last().unwrap();
    let view_of = |node: usize| offsets.partition_point(|&o| o <= node) - 1;
    let mut uf = UnionFind {
        parent: (0..total).collect(),
        views: (0..total)
            .map(|node| BTreeSet::from([view_of(node)]))
            .collect(),
    };
    let mut order: Vec<&VerifiedPair> = pairs.iter().collect();
    order.sort_by(|x, y| {
        y.inliers
            .len()
            .cmp(&x.inliers.len())
            .then((x.a, x.b).cmp(&(y.a, y.b)))
    });
    let mut linked = vec![false; total];
    for p in order {
        for m in &p.inliers {
            let (na, nb) = (offsets[p.a] + m.index_a, offsets[p.b] + m.index_b);
            uf.union_consistent(na, nb);
            linked[na] = true;
            linked[nb] = true;
        }
    }
    let mut groups: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
    for view in 0..offsets.len() - 1 {
        for node in offsets[view]..offsets[view + 1] {
            if linked[node] {
                groups
                    .entry(uf.find(node))
                    .or_default()
                    .push((view, node - offsets[view]));
            }
        }
    }
    let mut tracks: Vec<Vec<(usize, usize)>> =
        groups.into_values().filter(|t| t.len() >= 2).collect();
    for t in &mut tracks {
        t.sort_unstable();
    }
    tracks.sort_unstable();
    tracks
}

fn pixel(features: &[Vec<Feature>], (v, f): (usize, usize)) -> Vector2<f64> {
    Vector2::new(features[v][f].x, features[v][f].y)
}

fn reproj_error(cam: &Camera, p: &Vector3<f64>, uv: &Vector2<f64>) -> f64 {
    cam.project(p)
        .map_or(f64::INFINITY, |(q, _)| (q - uv).norm())
}

/// Candidate relative poses from the essential matrix and, when a plane
/// explains the matches, from the homography. Returns the candidate with the
/// most matches that triangulate in front of both cameras and reproject
/// within the outlier threshold, with the median triangulation angle
/// (degrees) of those matches.
fn init_pose(
    pair: &VerifiedPair,
    features: &[Vec<Feature>],
    intr: &Intrinsics,
    config: &SfmConfig,
) -> Option<(Camera, usize, f64)> {
    let k = intr.k_matrix();
    let e = essential_from_fundamental(&pair.f, &k, &k);
    let mut candidates: Vec<_> = decompose_essential(&e).to_vec();
    let pa: Vec<_> = pair
        .inliers
        .iter()
        .map(|m| pixel(features, (pair.a, m.index_a)))
        .collect();
    let pb: Vec<_> = pair
        .inliers
        .iter()
        .map(|m| pixel(features, (pair.b, m.index_b)))
        .collect();
    let seed = config
        .seed
        .wrapping_add(0x4f1b_0000)
        .wrapping_add((pair.a * 65_537 + pair.b) as u64);
    if let Ok((h, inl)) = fit_homography(
        &pa,
        &pb,
        config.ransac_threshold_px,
        seed,
        config.ransac_max_iterations,
    ) {
        debug!(
            "pair ({}, {}): homography explains {}/{} matches",
            pair.a,
            pair.b,
            inl.len(),
            pa.len()
        );
        candidates.extend(decompose_homography(&h, &k, &k));
    }
    let cam_a = Camera::identity(intr);
    let mut best: Option<(Camera, usize, f64)> = None;
    for (r, t) in candidates {
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        let cam_b = Camera::new(intr, rotation, t);
        let mut angles = Vec::new();
        for (ua, ub) in pa.iter().zip(&pb) {
            let Ok(p) = triangulate(&[(cam_a, ua.x, ua.y), (cam_b, ub.x, ub.y)]) else {
                continue;
            };
            if cam_a.to_camera(&p).z > 0.0
                && cam_b.to_camera(&p).z > 0.0
                && reproj_error(&cam_a, &p, ua) <= config.outlier_threshold_px
                && reproj_error(&cam_b, &p, ub) <= config.outlier_threshold_px
            {
                angles.push(triangulation_angle(&[&cam_a, &cam_b], &p).to_degrees());
            }
        }
        if !angles.is_empty() && best.as_ref().is_none_or(|b| angles.len() > b.1) {
            angles.sort_by(f64::total_cmp);
            let median = angles[angles.len() / 2];
            best = Some((cam_b, angles.len(), median));
        }
    }
    best
}

struct State<'a> {
    features: &'a [Vec<Feature>],
    config: &'a SfmConfig,
    cameras: Vec<Option<Camera>>,
    tracks: Vec<Vec<(usize, usize)>>,
    track_point: Vec<Option<usize>>,
    points: Vec<Option<PointState>>,
    fixed: usize,
}

impl State<'_> {
    /// Triangulates every track without a point that has at least two
    /// observations in registered views.
    fn triangulate_new(&mut self) -> usize {
        let mut added = 0;
        for t in 0..self.tracks.len() {
            if self.track_point[t].is_some() {
                continue;
            }
            let obs: Vec<(usize, usize)> = self.tracks[t]
                .iter()
                .copied()
                .filter(|&(v, _)| self.cameras[v].is_some())
                .collect();
            if obs.len() < 2 {
                continue;
            }
            let input: Vec<_> = obs
                .iter()
                .map(|&o| {
                    let uv = pixel(self.features, o);
                    (self.cameras[o.0].unwrap(), uv.x, uv.y)
                })
                .collect();
            let Ok(p) = triangulate(&input) else {
                continue;
            };
            let good: Vec<(usize, usize)> = obs
                .into_iter()
                .filter(|&o| {
                    reproj_error(&self.cameras[o.0].unwrap(), &p, &pixel(self.features, o))
                        <= self.config.outlier_threshold_px
                })
                .collect();
            if good.len() < 2 {
                continue;
            }
            self.track_point[t] = Some(self.points.len());
            self.points.push(Some(PointState {
                position: p,
                obs: good,
            }));
            added += 1;
        }
        added
    }

    /// Adds observations from a newly registered view to existing points.
    fn extend_tracks(&mut self, view: usize) {
        let cam = self.cameras[view].unwrap();
        for t in 0..self.tracks.len() {
            let Some(pi) = self.track_point[t] else {
                continue;
            };
            let Some(&o) = self.tracks[t].iter().find(|o| o.0 == view) else {
                continue;
            };
            let Some(ps) = self.points[pi].as_mut() else {
                continue;
            };
            if ps.obs.iter().any(|x| x.0 == view) {
                continue;
            }
            if reproj_error(&cam, &ps.position, &pixel(self.features, o))
                <= self.config.outlier_threshold_px
            {
                ps.obs.push(o);
                ps.obs.sort_unstable();
            }
        }
    }

    /// Drops observations reprojecting beyond the threshold and points left
    /// with fewer than two observations. Returns the number of removed points.
    fn filter_outliers(&mut self) -> usize {
        let mut removed = 0;
        for slot in &mut self.points {
            let Some(ps) = slot.as_mut() else {
                continue;
            };
            let pos = ps.position;
            ps.obs.retain(|&o| {
                reproj_error(&self.cameras[o.0].unwrap(), &pos, &pixel(self.features, o))
                    <= self.config.outlier_threshold_px
            });
            if ps.obs.len() < 2 {
                *slot = None;
                removed += 1;
            }
        }
        removed
    }

    fn bundle(&mut self) -> Result<()> {
        let cam_ids: Vec<usize> = (0..self.cameras.len())
            .filter(|&v| self.cameras[v].is_some())
            .collect();
        let cam_slot: HashMap<usize, usize> =
            cam_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let mut cams: Vec<Camera> = cam_ids.iter().map(|&v| self.cameras[v].unwrap()).collect();
        let fixed: Vec<bool> = cam_ids.iter().map(|&v| v == self.fixed).collect();
        let point_ids: Vec<usize> = (0..self.points.len())
            .filter(|&i| self.points[i].is_some())
            .collect();
        let mut pts: Vec<Vector3<f64>> = point_ids
            .iter()
            .map(|&i| self.points[i].as_ref().unwrap().position)
            .collect();
        let mut obs = Vec::new();
        for (k, &i) in point_ids.iter().enumerate() {
            for &o in &self.points[i].as_ref().unwrap().obs {
                obs.push(Observation {
                    camera: cam_slot[&o.0],
                    point: k,
                    uv: pixel(self.features, o),
                });
            }
        }
        let report = bundle_adjust(
            &mut cams,
            &mut pts,
            &obs,
            &fixed,
            self.config.ba_max_iterations,
            self.config.ba_tolerance,
        )?;
        debug!(
            "bundle adjustment: cost {:.6e} -> {:.6e} in {} iterations",
            report.initial_cost, report.final_cost, report.iterations
        );
        for (slot, &v) in cam_ids.iter().enumerate() {
            self.cameras[v] = Some(cams[slot]);
        }
        for (k, &i) in point_ids.iter().enumerate() {
            self.points[i].as_mut().unwrap().position = pts[k];
        }
        Ok(())
    }

    fn correspondences(&self, view: usize) -> (Vec<Vector3<f64>>, Vec<Vector2<f64>>) {
        let mut pts = Vec::new();
        let mut px = Vec::new();
        for t in 0..self.tracks.len() {
            let Some(pi) = self.track_point[t] else {
                continue;
            };
            let Some(ps) = self.points[pi].as_ref() else {
                continue;
            };
            if let Some(&o) = self.tracks[t].iter().find(|o| o.0 == view) {
                pts.push(ps.position);
                px.push(pixel(self.features, o));
            }
        }
        (pts, px)
    }
}

fn sample_color(img: &Raster, uv: &Vector2<f64>) -> [f64; 3] {
    let c = img.channels();
    let at = |k: usize| img.sample_bilinear(uv.x, uv.y, k.min(c - 1));
    [at(0), at(1), at(2)]
}

/// Runs the full pipeline on views sharing one set of intrinsics. The result
/// is expressed in the frame of the first camera of the initial pair, with
/// the initial baseline scaled to unit length.
pub fn incremental_reconstruct(
    images: &[Raster],
    masks: &[BinaryMask],
    intrinsics: &Intrinsics,
    config: &SfmConfig,
) -> Result<Reconstruction> {
    config.validate()?;
    intrinsics.validate()?;
    if images.len() < 2 {
        return Err(Error::NotEnough {
            what: "images",
            needed: 2,
            got: images.len(),
        });
    }
    if masks.len() != images.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} images but {} masks",
            images.len(),
            masks.len()
        )));
    }
    for (i, (img, m)) in images.iter().zip(masks).enumerate() {
        if img.width() != intrinsics.width
            || img.height() != intrinsics.height
            || !m.matches_raster(img)
        {
            return Err(Error::DimensionMismatch(format!(
                "view {i}: image {}x{}, mask {}x{}, intrinsics {}x{}",
                img.width(),
                img.height(),
                m.width(),
                m.height(),
                intrinsics.width,
                intrinsics.height
            )));
        }
    }
    let n = images.len();

    let features: Vec<Vec<Feature>> = images
        .par_iter()
        .zip(masks)
        .map(|(img, mask)| {
            let gray = to_grayscale(img)?;
            let describe = if config.describe_masked {
                composite_white(&gray, mask)?
            } else {
                gray.clone()
            };
            detect_features_described(&gray, &describe, mask, config.max_features)
        })
        .collect::<Result<_>>()?;
    for (i, f) in features.iter().enumerate() {
        debug!("view {i}: {} features", f.len());
    }

    let pair_ids: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .collect();
    let pairs: Vec<VerifiedPair> = pair_ids
        .par_iter()
        .filter_map(|&(a, b)| {
            let matches = match_features(&features[a], &features[b], config.ratio);
            let seed = config.seed.wrapping_add((a * n + b) as u64);
            match verify_geometry_with(
                &matches,
                &features[a],
                &features[b],
                config.ransac_threshold_px,
                seed,
                config.ransac_max_iterations,
                config.ransac_confidence,
            ) {
                Ok((f, inliers)) => Some(VerifiedPair { a, b, f, inliers }),
                Err(e) => {
                    debug!("pair ({a}, {b}) rejected: {e}");
                    None
                }
            }
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::Reconstruction(
            "no verifiable initial pair: no image pair passed geometric verification".into(),
        ));
    }

    let mut order: Vec<&VerifiedPair> = pairs.iter().collect();
    order.sort_by(|x, y| {
        y.inliers
            .len()
            .cmp(&x.inliers.len())
            .then((x.a, x.b).cmp(&(y.a, y.b)))
    });
    let mut init = None;
    for p in order {
        if let Some((cam_b, count, median)) = init_pose(p, &features, intrinsics, config) {
            debug!(
                "pair ({}, {}): {} inliers, {count} consistent, median angle {median:.2} deg",
                p.a,
                p.b,
                p.inliers.len()
            );
            if count >= 8 && median > config.min_triangulation_angle_deg {
                init = Some((p.a, p.b, cam_b));
                break;
            }
        }
    }
    let Some((ia, ib, cam_b)) = init else {
        return Err(Error::Reconstruction(format!(
            "no verifiable initial pair: no verified pair has median triangulation angle above {} deg",
            config.min_triangulation_angle_deg
        )));
    };
    info!("initial pair ({ia}, {ib})");

    let offsets: Vec<usize> = std::iter::once(0)
        .chain(features.iter().scan(0, |acc, f| {
            *acc += f.len();
            Some(*acc)
        }))
        .collect();
    let tracks = build_tracks(&offsets, &pairs);
    let mut cameras = vec![None; n];
    cameras[ia] = Some(Camera::identity(intrinsics));
    cameras[ib] = Some(cam_b);
    let mut state = State {
        features: &features,
        config,
        cameras,
        track_point: vec![None; tracks.len()],
        tracks,
        points: Vec::new(),
        fixed: ia,
    };
    let seeded = state.triangulate_new();
    debug!(
        "{} tracks, {seeded} points from the initial pair",
        state.tracks.len()
    );
    state.bundle()?;
    state.filter_outliers();

    let mut warnings = Vec::new();
    let mut pending: BTreeSet<usize> = (0..n).filter(|&v| v != ia && v != ib).collect();
    while !pending.is_empty() {
        let (view, (pts, px)) = pending
            .iter()
            .map(|&v| (v, state.correspondences(v)))
            .max_by(|x, y| x.1 .0.len().cmp(&y.1 .0.len()).then(y.0.cmp(&x.0)))
            .unwrap();
        pending.remove(&view);
        if pts.len() < config.min_registration_inliers.max(6) {
            let msg = format!(
                "view {view} not registered: {} 2D-3D correspondences",
                pts.len()
            );
            warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let seed = config.seed.wrapping_add((n * n + view) as u64);
        let priors: Vec<Camera> = state.cameras.iter().flatten().copied().collect();
        match solve_pnp_with_priors(
            &pts,
            &px,
            intrinsics,
            config.pnp_threshold_px,
            seed,
            config.ransac_max_iterations,
            &priors,
        ) {
            Ok((cam, inliers)) if inliers.len() >= config.min_registration_inliers => {
                info!("registered view {view} with {} inliers", inliers.len());
                state.cameras[view] = Some(cam);
                state.extend_tracks(view);
                state.triangulate_new();
                state.filter_outliers();
                state.bundle()?;
                state.filter_outliers();
            }
            Ok((_, inliers)) => {
                let msg = format!("view {view} not registered: {} PnP inliers", inliers.len());
                warn!("{msg}");
                warnings.push(msg);
            }
            Err(e) => {
                let msg = format!("view {view} not registered: {e}");
                warn!("{msg}");
                warnings.push(msg);
            }
        }
    }

    let baseline = state.cameras[ib].unwrap().translation.norm();
    if !(baseline > 0.0) || !baseline.is_finite() {
        return Err(Error::Reconstruction("initial baseline collapsed".into()));
    }
    for c in state.cameras.iter_mut().flatten() {
        c.translation /= baseline;
    }
    let mut cloud = SparseCloud::default();
    for ps in state.points.into_iter().flatten() {
        let mut acc = [0.0; 3];
        for &o in &ps.obs {
            let c = sample_color(&images[o.0], &pixel(&features, o));
            for k in 0..3 {
                acc[k] += c[k];
            }
        }
        let m = ps.obs.len() as f64;
        cloud.points.push(ps.position / baseline);
        cloud
            .colors
            .push(acc.map(|v| ((v / m).clamp(0.0, 1.0) * 255.0).round() as u8));
        cloud.tracks.push(ps.obs);
    }
    info!(
        "reconstructed {} points from {} of {n} views",
        cloud.len(),
        state.cameras.iter().flatten().count()
    );
    Ok(Reconstruction {
        cloud,
        cameras: state.cameras,
        features,
        init_pair: (ia, ib),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn pair(a: usize, b: usize, links: &[(usize, usize)]) -> VerifiedPair {
        VerifiedPair {
            a,
            b,
            f: Matrix3::zeros(),
            inliers: links
                .iter()
                .map(|&(index_a, index_b)| Match {
                    index_a,
                    index_b,
                    distance: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn tracks_chain_consistent_matches() {
        // three views with two features each
        let offsets = [0, 2, 4, 6];
        let pairs = [pair(0, 1, &[(0, 0), (1, 1)]), pair(1, 2, &[(0, 1), (1, 0)])];
        let tracks = build_tracks(&offsets, &pairs);
        assert_eq!(
            tracks,
            vec![vec![(0, 0), (1, 0), (2, 1)], vec![(0, 1), (1, 1), (2, 0)]]
        );
    }

    #[test]
    fn conflicting_link_keeps_the_stronger_track() {
        let offsets = [0, 2, 4, 6];
        let pairs = [
            pair(1, 2, &[(0, 0), (1, 1)]),
            // ties go to the lower view pair, so (0, 1) merges first and the
            // (0, 2) link would close a loop onto the other view 1 feature
            pair(0, 2, &[(0, 0)]),
            pair(0, 1, &[(0, 1)]),
        ];
        let tracks = build_tracks(&offsets, &pairs);
        assert_eq!(
            tracks,
            vec![vec![(0, 0), (1, 1), (2, 1)], vec![(1, 0), (2, 0)]]
        );
        for t in &tracks {
            let views: BTreeSet<usize> = t.iter().map(|o| o.0).collect();
            assert_eq!(views.len(), t.len());
        }
    }

    #[test]
    fn empty_views_do_not_shift_feature_views() {
        let offsets = [0, 1, 1, 2];
        let tracks = build_tracks(&offsets, &[pair(0, 2, &[(0, 0)])]);
        assert_eq!(tracks, vec![vec![(0, 0), (2, 0)]]);
    }
}

//! Attention-weighted optimization of a splat cloud against posed images,
//! with attention-guided pruning and gradient-driven densification.

mod loss;
mod prune;

pub use loss::{combined_loss, weighted_l1};
pub use prune::{attention_prune, attention_score_splats, densify, ScoreMode, SPLIT_SCALE_FACTOR};

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussians::{
    param, rasterize, rasterize_with_grad, GaussianCloud, RenderSettings, Splat, PARAMS_PER_SPLAT,
};
use crate::imaging::{attention_mask, Raster};
use crate::metrics::{l1_metric, ssim_value_and_grad};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_position: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub ssim_weight: f64,
    pub attention_enabled: bool,
    /// 0 disables pruning during training; the final pass still runs.
    pub prune_interval: usize,
    pub prune_attention_threshold: f64,
    pub prune_opacity_threshold: f64,
    pub prune_score: ScoreMode,
    pub densify_enabled: bool,
    pub densify_interval: usize,
    /// Mean pixel-space gradient norm of the projected centre.
    pub densify_grad_threshold: f64,
    /// Splats larger than this fraction of the scene extent are split
    /// rather than cloned.
    pub densify_scale_fraction: f64,
    /// Densification stops after this iteration.
    pub densify_until: usize,
    pub max_splats: usize,
    pub report_interval: usize,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            lr_position: 1.6e-4,
            lr_color: 2.5e-3,
            lr_opacity: 5e-2,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            ssim_weight: 0.2,
            attention_enabled: true,
            prune_interval: 500,
            prune_attention_threshold: 0.05,
            prune_opacity_threshold: 0.005,
            prune_score: ScoreMode::Mean,
            densify_enabled: true,
            densify_interval: 500,
            densify_grad_threshold: 2e-4,
            densify_scale_fraction: 0.01,
            densify_until: 15_000,
            max_splats: 200_000,
            report_interval: 100,
            background: [1.0; 3],
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: 2000 iterations, otherwise defaults.
    pub fn desk() -> Self {
        Self {
            iterations: 2000,
            densify_until: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_position", self.lr_position),
            ("lr_color", self.lr_color),
            ("lr_opacity", self.lr_opacity),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
        ];
        for (name, r) in rates {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {r}"
                )));
            }
        }
        let unit = [
            ("ssim_weight", self.ssim_weight),
            ("prune_attention_threshold", self.prune_attention_threshold),
            ("prune_opacity_threshold", self.prune_opacity_threshold),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if !(self.densify_grad_threshold >= 0.0) || !(self.densify_scale_fraction > 0.0) {
            return Err(Error::InvalidArgument(
                "densify thresholds must be non-negative".into(),
            ));
        }
        if self.report_interval == 0 {
            return Err(Error::InvalidArgument(
                "report_interval must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(s).map_err(|e| Error::InvalidArgument(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn learning_rates(&self) -> [f64; PARAMS_PER_SPLAT] {
        let mut lr = [0.0; PARAMS_PER_SPLAT];
        lr[param::POSITION].fill(self.lr_position);
        lr[param::COLOR].fill(self.lr_color);
        lr[param::OPACITY] = self.lr_opacity;
        lr[param::SCALE].fill(self.lr_scale);
        lr[param::ROTATION].fill(self.lr_rotation);
        lr
    }
}

/// Training-set averages at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub iteration: usize,
    pub weighted_l1: f64,
    pub plain_l1: f64,
    pub ssim: f64,
    pub combined: f64,
    pub splat_count: usize,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iteration,weighted_l1,plain_l1,ssim,combined,splat_count";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration,
            self.weighted_l1,
            self.plain_l1,
            self.ssim,
            self.combined,
            self.splat_count
        )
    }
}

pub fn reports_to_csv(reports: &[LossReport]) -> String {
    let mut s = String::from(LossReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

/// Appends report rows to a CSV file, writing the header when the file is new
/// or empty.
pub fn append_reports_csv(path: impl AsRef<Path>, reports: &[LossReport]) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(LossReport::CSV_HEADER);
        text.push('\n');
    }
    for r in reports {
        text.push_str(&r.to_csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// One posed training image with its attention map.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub image: Raster,
    pub camera: Camera,
    pub attention: Raster,
}

impl TrainView {
    /// Attention is derived from the image itself.
    pub fn new(image: Raster, camera: Camera) -> Result<Self> {
        let attention = attention_mask(&image)?;
        Ok(Self {
            image,
            camera,
            attention,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub cloud: GaussianCloud,
    pub reports: Vec<LossReport>,
    pub elapsed_seconds: f64,
}

/// Per-parameter first/second moment estimates.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<[f64; PARAMS_PER_SPLAT]>,
    v: Vec<[f64; PARAMS_PER_SPLAT]>,
    step: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![[0.0; PARAMS_PER_SPLAT]; n],
            v: vec![[0.0; PARAMS_PER_SPLAT]; n],
            step: 0,
        }
    }

    fn update(
        &mut self,
        cloud: &mut GaussianCloud,
        grads: &[[f64; PARAMS_PER_SPLAT]],
        lr: &[f64; PARAMS_PER_SPLAT],
    ) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for (i, s) in cloud.splats.iter_mut().enumerate() {
            let mut p = s.to_params();
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for k in 0..PARAMS_PER_SPLAT {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                p[k] -= lr[k] * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            }
            *s = Splat::from_params(&p);
            s.renormalize();
        }
    }

    fn select(&mut self, origin: impl Iterator<Item = Option<usize>>) {
        let (m, v): (Vec<_>, Vec<_>) = origin
            .map(|o| match o {
                Some(i) => (self.m[i], self.v[i]),
                None => ([0.0; PARAMS_PER_SPLAT], [0.0; PARAMS_PER_SPLAT]),
            })
            .unzip();
        self.m = m;
        self.v = v;
    }
}

fn validate_views(views: &[TrainView]) -> Result<(usize, usize)> {
    let first = views.first().ok_or(Error::NotEnough {
        what: "training views",
        needed: 1,
        got: 0,
    })?;
    let (w, h) = (first.image.width(), first.image.height());
    for (i, v) in views.iter().enumerate() {
        if v.image.width() != w || v.image.height() != h || v.image.channels() != 3 {
            return Err(Error::DimensionMismatch(format!(
                "view {i}: image {}x{}x{}, expected {w}x{h}x3",
                v.image.width(),
                v.image.height(),
                v.image.channels()
            )));
        }
        if !v.attention.same_dims(&v.image) || v.attention.channels() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "view {i}: attention {}x{}x{} vs image {w}x{h}",
                v.attention.width(),
                v.attention.height(),
                v.attention.channels()
            )));
        }
    }
    Ok((w, h))
}

/// Radius of the camera-centre spread, enlarged by 10%.
fn scene_extent(views: &[TrainView]) -> f64 {
    let centers: Vec<_> = views.iter().map(|v| v.camera.center()).collect();
    let mean = centers
        .iter()
        .fold(nalgebra::Vector3::zeros(), |a, c| a + c)
        / centers.len() as f64;
    let r = centers
        .iter()
        .map(|c| (c - mean).norm())
        .fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// Mean loss terms over every training view for the current cloud.
fn report(
    iteration: usize,
    cloud: &GaussianCloud,
    views: &[TrainView],
    weights: &[&Raster],
    settings: &RenderSettings,
    ssim_weight: f64,
) -> Result<LossReport> {
    let n = views.len() as f64;
    let (mut wl1, mut pl1, mut ss, mut comb) = (0.0, 0.0, 0.0, 0.0);
    for (v, a) in views.iter().zip(weights) {
        let r = rasterize(cloud, &v.camera, settings);
        let w = weighted_l1(&r, &v.image, a)?;
        let s = ssim_value_and_grad(&r, &v.image).0;
        wl1 += w;
        pl1 += l1_metric(&r, &v.image)?;
        ss += s;
        comb += (1.0 - ssim_weight) * w + ssim_weight * (1.0 - s);
    }
    let rep = LossReport {
        iteration,
        weighted_l1: wl1 / n,
        plain_l1: pl1 / n,
        ssim: ss / n,
        combined: comb / n,
        splat_count: cloud.len(),
    };
    if ![rep.weighted_l1, rep.plain_l1, rep.ssim, rep.combined]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::NonFinite {
            iteration,
            detail: format!("{rep:?}"),
        });
    }
    Ok(rep)
}

/// Optimizes `init` against the training views.
///
/// Each iteration renders one view (round-robin over a seeded per-epoch
/// shuffle), back-propagates the combined loss and applies one optimizer
/// step. With attention disabled, a uniform weight map takes the place of
/// each view's attention on the same code path. Reports are emitted at
/// iteration 0, every `report_interval` iterations and at the end.
pub fn train(views: &[TrainView], init: &GaussianCloud, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (w, h) = validate_views(views)?;
    let start = Instant::now();
    let mut cloud = init.clone();
    if cfg.iterations == 0 {
        return Ok(TrainOutcome {
            cloud,
            reports: Vec::new(),
            elapsed_seconds: start.elapsed().as_secs_f64(),
        });
    }
    let settings = RenderSettings {
        background: cfg.background,
        ..RenderSettings::new(w, h)
    };
    let ones = Raster::filled(w, h, 1, 1.0);
    let weights: Vec<&Raster> = views
        .iter()
        .map(|v| {
            if cfg.attention_enabled {
                &v.attention
            } else {
                &ones
            }
        })
        .collect();
    let cameras: Vec<Camera> = views.iter().map(|v| v.camera).collect();
    let weight_maps: Vec<Raster> = weights.iter().map(|r| (*r).clone()).collect();
    let lr = cfg.learning_rates();
    let extent = scene_extent(views);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cloud.len());
    let mut grad_accum = vec![0.0; cloud.len()];
    let mut grad_count = vec![0usize; cloud.len()];
    let mut order: Vec<usize> = (0..views.len()).collect();
    let mut reports = vec![report(
        0,
        &cloud,
        views,
        &weights,
        &settings,
        cfg.ssim_weight,
    )?];

    let prune = |cloud: &mut GaussianCloud,
                 adam: &mut Adam,
                 accum: &mut Vec<f64>,
                 count: &mut Vec<usize>|
     -> Result<()> {
        let scores = attention_score_splats(cloud, &cameras, &weight_maps, cfg.prune_score)?;
        let keep = prune::prune_keep(cloud, &scores, cfg)?;
        if keep.len() != cloud.len() {
            debug!(
                "pruned {} of {} splats",
                cloud.len() - keep.len(),
                cloud.len()
            );
        }
        cloud.splats = keep.iter().map(|&i| cloud.splats[i]).collect();
        adam.select(keep.iter().map(|&i| Some(i)));
        *accum = keep.iter().map(|&i| accum[i]).collect();
        *count = keep.iter().map(|&i| count[i]).collect();
        Ok(())
    };

    for it in 1..=cfg.iterations {
        let slot = (it - 1) % views.len();
        if slot == 0 {
            order.shuffle(&mut rng);
        }
        let view = &views[order[slot]];
        let attn = weights[order[slot]];
        let rendered = rasterize(&cloud, &view.camera, &settings);
        let (loss, grad) = combined_loss(&rendered, &view.image, attn, cfg.ssim_weight)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                detail: format!("combined loss {loss} on view {}", order[slot]),
            });
        }
        let g = rasterize_with_grad(&cloud, &view.camera, &settings, &grad)?;
        if let Some(k) = g
            .params
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite {
                iteration: it,
                detail: format!("gradient of splat {k} is not finite"),
            });
        }
        for i in 0..cloud.len() {
            if g.visible[i] {
                grad_accum[i] += g.mean2d[i][0].hypot(g.mean2d[i][1]);
                grad_count[i] += 1;
            }
        }
        adam.update(&mut cloud, &g.params, &lr);

        if cfg.densify_enabled
            && cfg.densify_interval > 0
            && it % cfg.densify_interval == 0
            && it <= cfg.densify_until
            && it < cfg.iterations
        {
            let mean: Vec<f64> = grad_accum
                .iter()
                .zip(&grad_count)
                .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
                .collect();
            let seed = cfg.seed.wrapping_add(it as u64);
            let d = prune::densify_indexed(&cloud, &mean, extent, cfg, seed)?;
            if d.cloud.len() != cloud.len() {
                debug!("densified {} -> {} splats", cloud.len(), d.cloud.len());
            }
            adam.select(d.origin.iter().copied());
            cloud = d.cloud;
            grad_accum = vec![0.0; cloud.len()];
            grad_count = vec![0; cloud.len()];
        }
        if cfg.prune_interval > 0 && it % cfg.prune_interval == 0 && it < cfg.iterations {
            prune(&mut cloud, &mut adam, &mut grad_accum, &mut grad_count)?;
        }
        if it == cfg.iterations {
            prune(&mut cloud, &mut adam, &mut grad_accum, &mut grad_count)?;
        }
        if it % cfg.report_interval == 0 || it == cfg.iterations {
            let r = report(it, &cloud, views, &weights, &settings, cfg.ssim_weight)?;
            debug!(
                "iter {it}: combined {:.6} l1 {:.6} splats {}",
                r.combined, r.plain_l1, r.splat_count
            );
            reports.push(r);
        }
    }
    let elapsed_seconds = start.elapsed().as_secs_f64();
    info!(
        "trained {} iterations in {elapsed_seconds:.1}s, {} splats",
        cfg.iterations,
        cloud.len()
    );
    Ok(TrainOutcome {
        cloud,
        reports,
        elapsed_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;

    fn scene() -> (Vec<TrainView>, GaussianCloud) {
        let intr = Intrinsics {
            fx: 24.0,
            fy: 24.0,
            cx: 11.5,
            cy: 11.5,
            width: 24,
            height: 24,
        };
        let cam = Camera::identity(&intr);
        let truth = GaussianCloud::new(vec![
            Splat::from_rgb([-0.3, 0.0, 3.0], [0.9, 0.1, 0.1], 0.25, 0.9),
            Splat::from_rgb([0.3, 0.2, 3.2], [0.1, 0.2, 0.9], 0.3, 0.8),
        ]);
        let img = rasterize(&truth, &cam, &RenderSettings::new(24, 24));
        let views = vec![TrainView::new(img, cam).unwrap()];
        let mut init = truth.clone();
        init.splats[0].position[0] += 0.05;
        init.splats[1].color[2] -= 0.2;
        (views, init)
    }

    fn cfg(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            prune_attention_threshold: 0.0,
            densify_enabled: false,
            report_interval: 50,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let (views, init) = scene();
        let out = train(&views, &init, &cfg(0)).unwrap();
        assert_eq!(out.cloud, init);
        assert!(out.reports.is_empty());
    }

    #[test]
    fn loss_decreases_and_reports_are_well_formed() {
        let (views, init) = scene();
        let out = train(&views, &init, &cfg(300)).unwrap();
        let its: Vec<usize> = out.reports.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 50, 100, 150, 200, 250, 300]);
        let (first, last) = (out.reports[0], *out.reports.last().unwrap());
        assert!(
            last.combined < 0.5 * first.combined,
            "{first:?} -> {last:?}"
        );
        for r in &out.reports {
            assert!(r.weighted_l1 >= 0.0 && r.plain_l1 >= 0.0 && r.combined >= 0.0);
            assert!((-1.0..=1.0).contains(&r.ssim));
        }
        for s in &out.cloud.splats {
            let n: f64 = s.rotation.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_off_equals_uniform_attention() {
        let (mut views, init) = scene();
        let off = TrainConfig {
            attention_enabled: false,
            ..cfg(60)
        };
        let a = train(&views, &init, &off).unwrap();
        views[0].attention = Raster::filled(24, 24, 1, 1.0);
        let b = train(&views, &init, &cfg(60)).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.cloud, b.cloud);
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let c = TrainConfig::desk();
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        let partial =
            TrainConfig::from_toml_str("iterations = 10\nattention_enabled = false\n").unwrap();
        assert_eq!(partial.iterations, 10);
        assert!(!partial.attention_enabled);
        assert_eq!(partial.lr_color, 2.5e-3);
        assert!(TrainConfig::from_toml_str("lr_color = 0.0").is_err());
        assert!(TrainConfig::from_toml_str("ssim_weight = 1.5").is_err());
        assert!(TrainConfig::from_toml_str("bogus = 1").is_err());
        let max = TrainConfig::from_toml_str("prune_score = \"max\"").unwrap();
        assert_eq!(max.prune_score, ScoreMode::Max);
    }

    #[test]
    fn csv_layout() {
        let r = LossReport {
            iteration: 100,
            weighted_l1: 0.5,
            plain_l1: 0.25,
            ssim: 0.75,
            combined: 0.125,
            splat_count: 7,
        };
        assert_eq!(
            reports_to_csv(&[r]),
            "iteration,weighted_l1,plain_l1,ssim,combined,splat_count\n100,0.5,0.25,0.75,0.125,7\n"
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        append_reports_csv(&p, &[r]).unwrap();
        append_reports_csv(&p, &[r]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn splat_count_respects_maximum() {
        let (views, init) = scene();
        let c = TrainConfig {
            densify_enabled: true,
            densify_interval: 10,
            densify_grad_threshold: 0.0,
            densify_until: 100,
            max_splats: 5,
            ..cfg(50)
        };
        let out = train(&views, &init, &c).unwrap();
        assert!(out.cloud.len() <= 5);
        assert!(out.reports.iter().all(|r| r.splat_count <= 5));
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{save_cameras, PoseRecord, SceneManifest, Split, ViewRecord};
use super::ply::{quantize_to_f32, save_splats};
use crate::camera::{Camera, Intrinsics};
use crate::error::{Error, Result};
use crate::gaussians::{
    coverage, logit, rasterize, rgb_to_sh, GaussianCloud, RenderSettings, Splat,
};
use crate::imaging::{
    attention_mask, composite_white, save_image, save_mask, save_pfm, BinaryMask, Raster,
};
use crate::training::TrainView;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticObject {
    /// Ray-traced box with a random colour grid on every face.
    Cuboid,
    /// Random splats rendered by this crate's rasterizer.
    Phantom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticBackground {
    White,
    /// A textured floor (and, for the cuboid, a textured surrounding wall)
    /// that is consistent across views.
    Clutter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub object: SyntheticObject,
    /// Training views on the ring.
    pub views: usize,
    /// Evaluation views placed halfway between consecutive training views.
    pub holdout_views: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub background: SyntheticBackground,
    /// Standard deviation of additive intensity noise, in `[0, 1]` units.
    pub noise: f64,
    /// Azimuth step between training views; `None` spreads them over 360°.
    pub ring_step_degrees: Option<f64>,
    pub elevation_degrees: f64,
    pub ring_radius: f64,
    pub phantom_splats: usize,
    pub clutter_splats: usize,
    /// Range of per-axis phantom splat scales.
    pub phantom_scale_range: [f64; 2],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            object: SyntheticObject::Phantom,
            views: 4,
            holdout_views: 1,
            image_size: 64,
            background: SyntheticBackground::White,
            noise: 0.0,
            ring_step_degrees: None,
            elevation_degrees: 20.0,
            ring_radius: 4.0,
            phantom_splats: 20,
            clutter_splats: 30,
            phantom_scale_range: [0.06, 0.18],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views < 2 {
            return Err(Error::InvalidArgument(format!(
                "synthetic scene needs at least 2 views, got {}",
                self.views
            )));
        }
        if self.image_size < 32 {
            return Err(Error::InvalidArgument(format!(
                "synthetic image size must be at least 32, got {}",
                self.image_size
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise must be non-negative, got {}",
                self.noise
            )));
        }
        if let Some(s) = self.ring_step_degrees {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "ring step must be positive, got {s}"
                )));
            }
        }
        if !(self.ring_radius > 1.5) {
            return Err(Error::InvalidArgument("ring radius must exceed 1.5".into()));
        }
        if !(self.elevation_degrees.abs() < 80.0) {
            return Err(Error::InvalidArgument(
                "elevation must lie within ±80°".into(),
            ));
        }
        let [lo, hi] = self.phantom_scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument(
                "phantom scale range must be positive and ordered".into(),
            ));
        }
        if self.object == SyntheticObject::Phantom && self.phantom_splats == 0 {
            return Err(Error::InvalidArgument(
                "phantom needs at least one splat".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)
            .map_err(|e| Error::InvalidArgument(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    fn intrinsics(&self) -> Intrinsics {
        let s = self.image_size;
        let c = (s as f64 - 1.0) / 2.0;
        Intrinsics {
            fx: 1.2 * s as f64,
            fy: 1.2 * s as f64,
            cx: c,
            cy: c,
            width: s,
            height: s,
        }
    }

    /// Training cameras first, then holdout cameras.
    fn cameras(&self) -> Vec<Camera> {
        let intr = self.intrinsics();
        let step = self.ring_step_degrees.unwrap_or(360.0 / self.views as f64);
        let el = self.elevation_degrees.to_radians();
        let azimuths = (0..self.views)
            .map(|i| i as f64 * step)
            .chain((0..self.holdout_views).map(|j| (j as f64 + 0.5) * step));
        azimuths
            .map(|az| {
                let az = az.to_radians();
                let r = self.ring_radius;
                let eye = Point3::new(
                    r * el.cos() * az.cos(),
                    r * el.cos() * az.sin(),
                    r * el.sin(),
                );
                Camera::look_at(&intr, &eye, &Point3::origin(), &Vector3::z())
            })
            .collect()
    }
}

/// What generated the images.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Cuboid {
        half_extents: [f64; 3],
    },
    /// Splats already at `f32` precision. The first `object_splats` belong
    /// to the object; the rest are background clutter.
    Phantom {
        cloud: GaussianCloud,
        object_splats: usize,
    },
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SyntheticSpec,
    pub intrinsics: Intrinsics,
    pub cameras: Vec<Camera>,
    pub splits: Vec<Split>,
    pub images: Vec<Raster>,
    pub masks: Vec<BinaryMask>,
    /// Attention of the white-composited image.
    pub attention: Vec<Raster>,
    pub ground_truth: GroundTruth,
}

impl SyntheticScene {
    fn view(&self, i: usize) -> Result<TrainView> {
        Ok(TrainView {
            image: composite_white(&self.images[i], &self.masks[i])?,
            camera: self.cameras[i],
            attention: self.attention[i].clone(),
        })
    }

    /// White-composited views of one split.
    pub fn views(&self, split: Split) -> Result<Vec<TrainView>> {
        (0..self.images.len())
            .filter(|&i| self.splits[i] == split)
            .map(|i| self.view(i))
            .collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }
}

const CUBOID_HALF: [f64; 3] = [0.8, 0.6, 0.5];
const CUBOID_CELL: f64 = 0.2;
const FACE_SHADE: [f64; 6] = [1.0, 0.8, 0.9, 0.7, 0.95, 0.6];
const CLUTTER_CELL: f64 = 0.25;
const CLUTTER_RADIUS: f64 = 6.0;
const CLUTTER_WALL_TOP: f64 = 4.5;
const SKY: f64 = 0.85;
const SUPERSAMPLE: usize = 4;
/// The phantom's clutter floor sits well below the object so that, seen
/// from the camera ring, it appears beneath the silhouette rather than
/// behind it.
const PHANTOM_FLOOR_Z: f64 = -3.0;
const PHANTOM_CLUTTER_RADII: [f64; 2] = [1.2, 2.6];

/// Lookup tables of random cell colours.
struct Textures {
    faces: Vec<Vec<[f64; 3]>>,
    face_cols: [usize; 3],
    floor: Vec<[f64; 3]>,
    floor_cols: usize,
    wall: Vec<[f64; 3]>,
    wall_cols: usize,
}

fn random_colors(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [0; 3].map(|_| rng.random_range(lo..hi)))
        .collect()
}

impl Textures {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_0000);
        let face_cols = CUBOID_HALF.map(|h| (2.0 * h / CUBOID_CELL).round() as usize);
        let faces = (0..6)
            .map(|f| {
                let axis = f / 2;
                let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                random_colors(&mut rng, face_cols[a] * face_cols[b], 0.08, 0.92)
            })
            .collect();
        let floor_cols = (2.0 * CLUTTER_RADIUS / CLUTTER_CELL).ceil() as usize;
        let floor = random_colors(&mut rng, floor_cols * floor_cols, 0.0, 1.0);
        let wall_cols =
            (2.0 * std::f64::consts::PI * CLUTTER_RADIUS / CLUTTER_CELL).ceil() as usize;
        let wall_rows = ((CLUTTER_WALL_TOP - floor_z()) / CLUTTER_CELL).ceil() as usize;
        let wall = random_colors(&mut rng, wall_cols * wall_rows, 0.0, 1.0);
        Self {
            faces,
            face_cols,
            floor,
            floor_cols,
            wall,
            wall_cols,
        }
    }
}

fn floor_z() -> f64 {
    -CUBOID_HALF[2]
}

/// Slab test against the centred box; returns hit distance and face index.
fn hit_box(o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    let mut face = 0;
    for k in 0..3 {
        let h = CUBOID_HALF[k];
        if d[k].abs() < 1e-15 {
            if o[k].abs() > h {
                return None;
            }
            continue;
        }
        let (a, b) = ((-h - o[k]) / d[k], (h - o[k]) / d[k]);
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        if near > t0 {
            t0 = near;
            // the ray enters through the face whose normal opposes it
            face = 2 * k + usize::from(d[k] > 0.0);
        }
        t1 = t1.min(far);
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 0.0).then_some((t0, face))
}

fn cuboid_color(tex: &Textures, p: &Vector3<f64>, face: usize) -> [f64; 3] {
    let axis = face / 2;
    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
    let cell = |k: usize| {
        let u = (p[k] + CUBOID_HALF[k]) / CUBOID_CELL;
        (u.floor().max(0.0) as usize).min(tex.face_cols[k] - 1)
    };
    let c = tex.faces[face][cell(a) * tex.face_cols[b] + cell(b)];
    c.map(|v| v * FACE_SHADE[face])
}

fn clutter_color(tex: &Textures, o: &Vector3<f64>, d: &Vector3<f64>) -> [f64; 3] {
    if d.z < 0.0 {
        let t = (floor_z() - o.z) / d.z;
        let p = o + t * d;
        if p.x.hypot(p.y) < CLUTTER_RADIUS {
            let cell = |v: f64| {
                (((v + CLUTTER_RADIUS) / CLUTTER_CELL).floor() as usize).min(tex.floor_cols - 1)
            };
            return tex.floor[cell(p.y) * tex.floor_cols + cell(p.x)];
        }
    }
    // ray leaving the floor disk: intersect the surrounding cylinder
    let (a, b, c) = (
        d.x * d.x + d.y * d.y,
        2.0 * (o.x * d.x + o.y * d.y),
        o.x * o.x + o.y * o.y - CLUTTER_RADIUS * CLUTTER_RADIUS,
    );
    if a > 1e-15 {
        let t = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
        let p = o + t * d;
        if p.z >= floor_z() && p.z < CLUTTER_WALL_TOP {
            let az = p.y.atan2(p.x) + std::f64::consts::PI;
            let col = ((az * CLUTTER_RADIUS / CLUTTER_CELL) as usize).min(tex.wall_cols - 1);
            let row = ((p.z - floor_z()) / CLUTTER_CELL) as usize;
            return tex.wall[row * tex.wall_cols + col];
        }
    }
    [SKY; 3]
}

/// Supersampled ray cast of the cuboid; the mask marks pixels where any
/// sub-sample hits the box.
fn render_cuboid(
    cam: &Camera,
    intr: &Intrinsics,
    tex: &Textures,
    clutter: bool,
) -> (Raster, BinaryMask) {
    let (w, h) = (intr.width, intr.height);
    let rinv = cam.rotation.inverse();
    let origin = cam.center();
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rgb = vec![0.0; w * 3];
            let mut hit = vec![false; w];
            for x in 0..w {
                let mut acc = [0.0; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let off = |s: usize| (s as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                        let u = x as f64 + off(sx);
                        let v = y as f64 + off(sy);
                        let dc = Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
                        let d = (rinv * dc).normalize();
                        let c = match hit_box(&origin, &d) {
                            Some((t, face)) => {
                                hit[x] = true;
                                cuboid_color(tex, &(origin + t * d), face)
                            }
                            None if clutter => clutter_color(tex, &origin, &d),
                            None => [1.0; 3],
                        };
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for k in 0..3 {
                    rgb[x * 3 + k] = acc[k] / n;
                }
            }
            (rgb, hit)
        })
        .collect();
    let (mut data, mut bits) = (Vec::with_capacity(w * h * 3), Vec::with_capacity(w * h));
    for (r, m) in rows {
        data.extend(r);
        bits.extend(m);
    }
    (
        Raster::from_vec(w, h, 3, data).expect("sized"),
        BinaryMask::from_bits(w, h, bits).expect("sized"),
    )
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let q: [f64; 4] = [0; 4].map(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

fn phantom_cloud(spec: &SyntheticSpec) -> (GaussianCloud, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [lo, hi] = spec.phantom_scale_range.map(f64::ln);
    let mut splats = Vec::new();
    for _ in 0..spec.phantom_splats {
        let p = loop {
            let p = [0; 3].map(|_| rng.random_range(-0.7..0.7));
            if p.iter().map(|v| v * v).sum::<f64>() <= 0.49 {
                break p;
            }
        };
        let rgb = [0; 3].map(|_| rng.random_range(0.05..0.95));
        splats.push(Splat {
            position: p,
            rotation: random_rotation(&mut rng),
            log_scale: [0; 3].map(|_| {
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            }),
            opacity_logit: logit(rng.random_range(0.6..0.95)),
            color: rgb.map(rgb_to_sh),
        });
    }
    let object = splats.len();
    if spec.background == SyntheticBackground::Clutter {
        for _ in 0..spec.clutter_splats {
            let r = rng.random_range(PHANTOM_CLUTTER_RADII[0]..PHANTOM_CLUTTER_RADII[1]);
            let az = rng.random_range(0.0..std::f64::consts::TAU);
            let rgb = [0; 3].map(|_| rng.random_range(0.0..1.0));
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            splats.push(Splat {
                position: [r * az.cos(), r * az.sin(), PHANTOM_FLOOR_Z],
                // flat discs lying in the floor plane, spun about z
                rotation: [(angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin()],
                log_scale: [
                    rng.random_range(0.15f64..0.35).ln(),
                    rng.random_range(0.15f64..0.35).ln(),
                    0.02f64.ln(),
                ],
                opacity_logit: logit(rng.random_range(0.7..0.95)),
                color: rgb.map(rgb_to_sh),
            });
        }
    }
    (quantize_to_f32(&GaussianCloud::new(splats)), object)
}

fn phantom_mask(
    cloud: &GaussianCloud,
    object: usize,
    cam: &Camera,
    settings: &RenderSettings,
) -> BinaryMask {
    let cov = coverage(cloud, cam, settings);
    let bits = cov
        .iter()
        .map(|hits| hits.iter().any(|&i| i < object))
        .collect();
    BinaryMask::from_bits(settings.width, settings.height, bits).expect("sized")
}

/// Adds noise to object pixels, and to every pixel over a clutter
/// background; white background pixels stay exactly white.
fn add_noise(img: &mut Raster, mask: &BinaryMask, spec: &SyntheticSpec, view: usize) {
    if spec.noise == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed
            .wrapping_add(0x9e37_79b9)
            .wrapping_add(view as u64),
    );
    let normal = Normal::new(0.0, spec.noise).expect("validated");
    let everywhere = spec.background == SyntheticBackground::Clutter;
    for (px, &m) in img.data_mut().chunks_exact_mut(3).zip(mask.bits()) {
        if m || everywhere {
            for v in px {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
}

/// Builds the scene in memory. Deterministic for a fixed spec.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let intrinsics = spec.intrinsics();
    let cameras = spec.cameras();
    let splits = (0..cameras.len())
        .map(|i| {
            if i < spec.views {
                Split::Train
            } else {
                Split::Eval
            }
        })
        .collect();
    let settings = RenderSettings::new(intrinsics.width, intrinsics.height);
    let clutter = spec.background == SyntheticBackground::Clutter;
    let (mut images, masks, ground_truth): (Vec<Raster>, Vec<BinaryMask>, GroundTruth) =
        match spec.object {
            SyntheticObject::Cuboid => {
                let tex = Textures::new(spec.seed);
                let (i, m) = cameras
                    .iter()
                    .map(|c| render_cuboid(c, &intrinsics, &tex, clutter))
                    .unzip();
                (
                    i,
                    m,
                    GroundTruth::Cuboid {
                        half_extents: CUBOID_HALF,
                    },
                )
            }
            SyntheticObject::Phantom => {
                let (cloud, object) = phantom_cloud(spec);
                let images = cameras
                    .iter()
                    .map(|c| rasterize(&cloud, c, &settings))
                    .collect();
                let masks = cameras
                    .iter()
                    .map(|c| phantom_mask(&cloud, object, c, &settings))
                    .collect();
                (
                    images,
                    masks,
                    GroundTruth::Phantom {
                        cloud,
                        object_splats: object,
                    },
                )
            }
        };
    for (v, (img, m)) in images.iter_mut().zip(&masks).enumerate() {
        add_noise(img, m, spec, v);
    }
    let attention = images
        .iter()
        .zip(&masks)
        .map(|(img, m)| attention_mask(&composite_white(img, m)?))
        .collect::<Result<_>>()?;
    Ok(SyntheticScene {
        spec: spec.clone(),
        intrinsics,
        cameras,
        splits,
        images,
        masks,
        attention,
        ground_truth,
    })
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes a synthesized scene under `out`:
///
/// ```text
/// scene.json            manifest (PNG images, PGM masks, PFM attention, poses)
/// images/view_NNN.png   8-bit images
/// lossless/view_NNN.pfm unquantized images
/// masks/view_NNN.pgm    object silhouettes
/// attention/view_NNN.pfm
/// cameras.json
/// ground_truth.ply      phantom splats, or ground_truth.json for the cuboid
/// synthetic.json        the generating parameters
/// ```
pub fn write_synthetic(scene: &SyntheticScene, out: impl AsRef<Path>) -> Result<PathBuf> {
    let out = out.as_ref();
    for sub in ["images", "lossless", "masks", "attention"] {
        ensure_dir(&out.join(sub))?;
    }
    let mut views = Vec::new();
    for i in 0..scene.images.len() {
        let name = format!("view_{i:03}");
        let image = PathBuf::from(format!("images/{name}.png"));
        let mask = PathBuf::from(format!("masks/{name}.pgm"));
        let attention = PathBuf::from(format!("attention/{name}.pfm"));
        save_image(out.join(&image), &scene.images[i])?;
        save_pfm(out.join(format!("lossless/{name}.pfm")), &scene.images[i])?;
        save_mask(out.join(&mask), &scene.masks[i])?;
        save_pfm(out.join(&attention), &scene.attention[i])?;
        views.push(ViewRecord {
            image,
            mask: Some(mask),
            attention: Some(attention),
            camera: Some(PoseRecord::from_camera(&scene.cameras[i])),
            split: scene.splits[i],
        });
    }
    let cams: Vec<Option<Camera>> = scene.cameras.iter().copied().map(Some).collect();
    save_cameras(out.join("cameras.json"), &cams)?;
    match &scene.ground_truth {
        GroundTruth::Phantom { cloud, .. } => save_splats(cloud, out.join("ground_truth.ply"))?,
        GroundTruth::Cuboid { half_extents } => {
            let p = out.join("ground_truth.json");
            let doc = serde_json::json!({ "object": "cuboid", "center": [0.0, 0.0, 0.0], "half_extents": half_extents });
            fs::write(&p, serde_json::to_string_pretty(&doc).expect("json"))
                .map_err(|e| Error::io(&p, e))?;
        }
    }
    let p = out.join("synthetic.json");
    fs::write(&p, serde_json::to_string_pretty(&scene.spec).expect("json"))
        .map_err(|e| Error::io(&p, e))?;
    let manifest = out.join("scene.json");
    SceneManifest {
        intrinsics: scene.intrinsics,
        views,
    }
    .save(&manifest)?;
    Ok(manifest)
}

/// Synthesizes a scene and writes it under `out`; returns the manifest path.
pub fn generate_synthetic(spec: &SyntheticSpec, out: impl AsRef<Path>) -> Result<PathBuf> {
    write_synthetic(&synthesize(spec)?, out)
}

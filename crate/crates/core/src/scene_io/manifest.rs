use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraRecord, Intrinsics};
use crate::error::{Error, Result};
use crate::imaging::{attention_mask, composite_white, load_image, load_mask, BinaryMask, Raster};
use crate::training::TrainView;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

/// World-to-camera pose; the quaternion is `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn from_camera(c: &Camera) -> Self {
        let r = CameraRecord::from(c);
        Self {
            quaternion: r.quaternion,
            translation: r.translation,
        }
    }

    pub fn to_camera(&self, intr: &Intrinsics) -> Result<Camera> {
        let [w, x, y, z] = self.quaternion;
        let q = Quaternion::new(w, x, y, z);
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "camera quaternion must be unit norm, got norm {}",
                q.norm()
            )));
        }
        Ok(Camera::new(
            intr,
            UnitQuaternion::new_unchecked(q),
            Vector3::from(self.translation),
        ))
    }
}

/// One view of a manifest. Paths are relative to the manifest's directory
/// unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    /// Lossless real-valued attention map (PFM).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<PoseRecord>,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub intrinsics: Intrinsics,
    pub views: Vec<ViewRecord>,
}

impl SceneManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct SceneView {
    /// Image file stem.
    pub name: String,
    pub split: Split,
    pub image: Raster,
    pub mask: Option<BinaryMask>,
    pub attention: Option<Raster>,
    pub camera: Option<Camera>,
}

impl SceneView {
    /// The image with everything outside the mask painted white, or the image
    /// itself when no mask is present.
    pub fn target(&self) -> Result<Raster> {
        match &self.mask {
            Some(m) => composite_white(&self.image, m),
            None => Ok(self.image.clone()),
        }
    }

    /// Stored attention, or the attention of [`Self::target`] when none was
    /// supplied.
    pub fn attention_or_computed(&self) -> Result<Raster> {
        match &self.attention {
            Some(a) => Ok(a.clone()),
            None => attention_mask(&self.target()?),
        }
    }

    pub fn train_view(&self) -> Result<TrainView> {
        let camera = self.camera.ok_or_else(|| {
            Error::InvalidArgument(format!("view {} has no camera pose", self.name))
        })?;
        Ok(TrainView {
            image: self.target()?,
            camera,
            attention: self.attention_or_computed()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub manifest: SceneManifest,
    pub views: Vec<SceneView>,
}

impl Scene {
    pub fn intrinsics(&self) -> &Intrinsics {
        &self.manifest.intrinsics
    }

    pub fn views_in(&self, split: Split) -> impl Iterator<Item = &SceneView> {
        self.views.iter().filter(move |v| v.split == split)
    }

    pub fn images(&self) -> Vec<Raster> {
        self.views.iter().map(|v| v.image.clone()).collect()
    }

    /// Per-view masks; views without one get an all-true mask.
    pub fn masks_or_full(&self) -> Vec<BinaryMask> {
        self.views
            .iter()
            .map(|v| {
                v.mask
                    .clone()
                    .unwrap_or_else(|| BinaryMask::filled(v.image.width(), v.image.height(), true))
            })
            .collect()
    }

    pub fn has_all_masks(&self) -> bool {
        self.views.iter().all(|v| v.mask.is_some())
    }

    pub fn cameras(&self) -> Vec<Option<Camera>> {
        self.views.iter().map(|v| v.camera).collect()
    }

    pub fn train_views(&self, split: Split) -> Result<Vec<TrainView>> {
        self.views_in(split).map(SceneView::train_view).collect()
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn load_view(root: &Path, i: usize, rec: &ViewRecord, intr: &Intrinsics) -> Result<SceneView> {
    let image_path = resolve(root, &rec.image);
    let name = rec
        .image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("view")
        .to_string();
    let image = load_image(&image_path)?.into_rgb();
    let dims_err = |what: &str, w: usize, h: usize| {
        Error::DimensionMismatch(format!(
            "view {i} ({name}): {what} is {w}x{h} but the image is {}x{}",
            image.width(),
            image.height()
        ))
    };
    if image.width() != intr.width || image.height() != intr.height {
        return Err(Error::DimensionMismatch(format!(
            "view {i} ({name}): image {} is {}x{} but intrinsics declare {}x{}",
            image_path.display(),
            image.width(),
            image.height(),
            intr.width,
            intr.height
        )));
    }
    let mask = match &rec.mask {
        Some(p) => {
            let m = load_mask(resolve(root, p))?;
            if !m.matches_raster(&image) {
                return Err(dims_err("mask", m.width(), m.height()));
            }
            Some(m)
        }
        None => None,
    };
    let attention = match &rec.attention {
        Some(p) => {
            let a = load_image(resolve(root, p))?;
            if !a.same_dims(&image) {
                return Err(dims_err("attention", a.width(), a.height()));
            }
            if a.channels() != 1 {
                return Err(Error::DimensionMismatch(format!(
                    "view {i} ({name}): attention map has {} channels, expected 1",
                    a.channels()
                )));
            }
            Some(a)
        }
        None => None,
    };
    let camera = rec
        .camera
        .map(|c| c.to_camera(intr))
        .transpose()
        .map_err(|e| Error::InvalidArgument(format!("view {i} ({name}): {e}")))?;
    Ok(SceneView {
        name,
        split: rec.split,
        image,
        mask,
        attention,
        camera,
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<SceneManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: SceneManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("malformed manifest: {e}")))?;
    m.intrinsics
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(m)
}

/// Loads a manifest and decodes every referenced raster, checking that each
/// view's image, mask and attention agree in size.
pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let manifest = load_manifest(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let views = manifest
        .views
        .par_iter()
        .enumerate()
        .map(|(i, rec)| load_view(root, i, rec, &manifest.intrinsics))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene { manifest, views })
}

/// Cameras JSON: an array of camera records, `null` for unregistered views.
pub fn cameras_to_json(cameras: &[Option<Camera>]) -> String {
    let recs: Vec<Option<CameraRecord>> = cameras
        .iter()
        .map(|c| c.as_ref().map(CameraRecord::from))
        .collect();
    serde_json::to_string_pretty(&recs).expect("cameras serialize")
}

pub fn save_cameras(path: impl AsRef<Path>, cameras: &[Option<Camera>]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cameras_to_json(cameras)).map_err(|e| Error::io(path, e))
}

/// Accepts either an array of records (with `null` holes) or a single record.
pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Option<Camera>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        Many(Vec<Option<CameraRecord>>),
        One(CameraRecord),
    }
    let doc: Doc = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("malformed cameras JSON: {e}")))?;
    let recs = match doc {
        Doc::Many(v) => v,
        Doc::One(r) => vec![Some(r)],
    };
    recs.iter()
        .enumerate()
        .map(|(i, r)| {
            r.as_ref()
                .map(Camera::try_from)
                .transpose()
                .map_err(|e| Error::format(path, format!("camera {i}: {e}")))
        })
        .collect()
}

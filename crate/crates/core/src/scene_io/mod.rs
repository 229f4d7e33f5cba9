//! Persistence for splats, point clouds, cameras and scene manifests, plus the
//! synthetic scene generator.
//!
//! A manifest is JSON:
//!
//! ```json
//! {
//!   "intrinsics": { "fx": 76.8, "fy": 76.8, "cx": 31.5, "cy": 31.5, "width": 64, "height": 64 },
//!   "views": [
//!     {
//!       "image": "images/view_000.png",
//!       "mask": "masks/view_000.pgm",
//!       "attention": "attention/view_000.pfm",
//!       "camera": { "quaternion": [1, 0, 0, 0], "translation": [0, 0, 4] },
//!       "split": "train"
//!     }
//!   ]
//! }
//! ```
//!
//! `mask`, `attention` and `camera` are optional; `split` defaults to
//! `"train"`. Relative paths resolve against the manifest's directory.

mod manifest;
mod ply;
mod synthetic;

pub use manifest::{
    cameras_to_json, load_cameras, load_manifest, load_scene, save_cameras, PoseRecord, Scene,
    SceneManifest, SceneView, Split, ViewRecord,
};
pub use ply::{
    decode_splats, encode_splats, is_splat_ply, load_point_cloud, load_splats, quantize_to_f32,
    save_point_cloud, save_splats, splat_ply_header, SPLAT_PROPERTIES, SPLAT_RECORD_BYTES,
};
pub use synthetic::{
    generate_synthetic, synthesize, write_synthetic, GroundTruth, SyntheticBackground,
    SyntheticObject, SyntheticScene, SyntheticSpec,
};

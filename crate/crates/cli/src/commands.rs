use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use attnsplat::camera::Camera;
use attnsplat::gaussians::{init_from_cloud, rasterize, GaussianCloud, RenderSettings};
use attnsplat::imaging::{
    attention_mask, classical_saliency, composite_white, load_image, save_image, save_mask,
    save_pfm, save_png, threshold_saliency, to_grayscale, Raster,
};
use attnsplat::metrics::{evaluate, fps_benchmark, EvalConfig, EvalReport};
use attnsplat::scene_io::{
    is_splat_ply, load_cameras, load_manifest, load_point_cloud, load_scene, load_splats,
    save_cameras, save_point_cloud, save_splats, synthesize, write_synthetic, PoseRecord, Scene,
    SceneManifest, Split, SyntheticSpec,
};
use attnsplat::sfm::{filter_background_points, incremental_reconstruct, SfmConfig};
use attnsplat::training::{reports_to_csv, train, TrainConfig, TrainView};
use log::{info, warn};
use serde_json::json;

use crate::failure::{CliResult, Failure, Stage};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pfm"];

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::runtime("create output", format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .map_err(|e| Failure::runtime("write output", format!("{}: {e}", path.display())))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Failure::validation("read input", format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::validation(
            "read input",
            format!("no input images in {}", dir.display()),
        ));
    }
    Ok(files)
}

fn find_saliency(dir: &Path, name: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{name}.{ext}")))
        .find(|p| p.is_file())
}

fn single_channel(img: Raster) -> CliResult<Raster> {
    if img.channels() == 1 {
        Ok(img)
    } else {
        to_grayscale(&img).stage("saliency")
    }
}

pub fn mask(
    input: &Path,
    out: &Path,
    threshold: f64,
    saliency_dir: Option<&Path>,
) -> CliResult<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Failure::validation(
            "mask",
            format!("threshold must be in [0, 1], got {threshold}"),
        ));
    }
    let files = list_images(input)?;
    let (mask_dir, comp_dir) = (out.join("masks"), out.join("composites"));
    create_dir(&mask_dir)?;
    create_dir(&comp_dir)?;
    for path in &files {
        let name = stem(path);
        let img = load_image(path).stage("read input")?.into_rgb();
        let saliency = match saliency_dir {
            Some(dir) => {
                let sal_path = find_saliency(dir, &name).ok_or_else(|| {
                    Failure::validation(
                        "saliency",
                        format!("no saliency map for {name} in {}", dir.display()),
                    )
                })?;
                info!("{name}: using saliency map {}", sal_path.display());
                single_channel(load_image(&sal_path).stage("saliency")?)?
            }
            None => {
                info!("{name}: no saliency map supplied, using classical fallback");
                classical_saliency(&img).stage("saliency")?
            }
        };
        let m = threshold_saliency(&saliency, threshold).stage("threshold")?;
        let comp = composite_white(&img, &m).stage("composite")?;
        save_mask(mask_dir.join(format!("{name}.pgm")), &m).runtime("write output")?;
        save_png(comp_dir.join(format!("{name}.png")), &comp).runtime("write output")?;
        info!(
            "{name}: {} of {} pixels in mask",
            m.count(),
            m.width() * m.height()
        );
    }
    info!("wrote {} masks to {}", files.len(), out.display());
    Ok(())
}

pub fn attention(input: &Path, out: &Path) -> CliResult<()> {
    let files = list_images(input)?;
    create_dir(out)?;
    for path in &files {
        let name = stem(path);
        let img = load_image(path).stage("read input")?.into_rgb();
        let a = attention_mask(&img).stage("attention")?;
        save_image(out.join(format!("{name}.pgm")), &a).runtime("write output")?;
        save_pfm(out.join(format!("{name}.pfm")), &a).runtime("write output")?;
    }
    info!("wrote {} attention maps to {}", files.len(), out.display());
    Ok(())
}

fn load_sfm_config(path: Option<&Path>) -> CliResult<SfmConfig> {
    let Some(path) = path else {
        return Ok(SfmConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::validation("sfm config", format!("{}: {e}", path.display())))?;
    let cfg: SfmConfig = toml::from_str(&text)
        .map_err(|e| Failure::validation("sfm config", format!("{}: {e}", path.display())))?;
    cfg.validate().stage("sfm config")?;
    Ok(cfg)
}

/// Copy of `manifest` with image paths made absolute and poses replaced.
fn posed_manifest(
    manifest: &SceneManifest,
    root: &Path,
    cameras: &[Option<Camera>],
) -> SceneManifest {
    let abs = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    };
    let mut m = manifest.clone();
    for (v, cam) in m.views.iter_mut().zip(cameras) {
        v.image = abs(&v.image);
        v.mask = v.mask.as_deref().map(abs);
        v.attention = v.attention.as_deref().map(abs);
        v.camera = cam.as_ref().map(PoseRecord::from_camera);
    }
    m
}

fn manifest_root(path: &Path) -> CliResult<PathBuf> {
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    parent
        .canonicalize()
        .map_err(|e| Failure::validation("load scene", format!("{}: {e}", parent.display())))
}

pub fn sfm(scene_path: &Path, out: &Path, no_mask: bool, config: Option<&Path>) -> CliResult<()> {
    let cfg = load_sfm_config(config)?;
    let manifest = load_manifest(scene_path).stage("load scene")?;
    if manifest.views.len() < 2 {
        return Err(Failure::validation(
            "load scene",
            format!(
                "need at least 2 views for reconstruction, got {}",
                manifest.views.len()
            ),
        ));
    }
    let scene = load_scene(scene_path).stage("load scene")?;
    let full = no_mask || !scene.has_all_masks();
    if !no_mask && full {
        warn!("some views have no mask; those views are treated as fully foreground");
    }
    let masks = if no_mask {
        scene
            .views
            .iter()
            .map(|v| {
                attnsplat::imaging::BinaryMask::filled(v.image.width(), v.image.height(), true)
            })
            .collect()
    } else {
        scene.masks_or_full()
    };
    let started = Instant::now();
    let recon = incremental_reconstruct(&scene.images(), &masks, scene.intrinsics(), &cfg)
        .stage("reconstruction")?;
    for w in &recon.warnings {
        warn!("{w}");
    }
    let raw_points = recon.cloud.len();
    let cloud = if no_mask {
        recon.cloud.clone()
    } else {
        filter_background_points(
            &recon.cloud,
            &recon.cameras,
            &masks,
            cfg.mask_support_fraction,
        )
        .stage("background filtering")?
    };
    let errors = recon.reprojection_errors();
    let mean = if errors.is_empty() {
        0.0
    } else {
        errors.iter().sum::<f64>() / errors.len() as f64
    };
    let max = errors.iter().copied().fold(0.0, f64::max);
    let registered = recon.cameras.iter().filter(|c| c.is_some()).count();
    info!(
        "reconstructed {} points ({raw_points} before filtering) from {registered}/{} views; mean reprojection error {mean:.4} px",
        cloud.len(),
        recon.cameras.len()
    );

    create_dir(out)?;
    save_point_cloud(&cloud, out.join("cloud.ply")).runtime("write output")?;
    save_cameras(out.join("cameras.json"), &recon.cameras).runtime("write output")?;
    let root = manifest_root(scene_path)?;
    posed_manifest(&manifest, &root, &recon.cameras)
        .save(out.join("scene.json"))
        .runtime("write output")?;
    let summary = json!({
        "masked": !no_mask,
        "points": cloud.len(),
        "points_before_filtering": raw_points,
        "registered_views": registered,
        "views": recon.cameras.len(),
        "observations": errors.len(),
        "mean_reprojection_error_px": mean,
        "max_reprojection_error_px": max,
        "seconds": started.elapsed().as_secs_f64(),
    });
    write_text(
        &out.join("reprojection.json"),
        &serde_json::to_string_pretty(&summary).expect("json"),
    )?;
    Ok(())
}

fn load_init(path: &Path) -> CliResult<GaussianCloud> {
    if !path.is_file() {
        return Err(Failure::validation(
            "load init",
            format!("{}: no such file", path.display()),
        ));
    }
    if is_splat_ply(path).stage("load init")? {
        load_splats(path).stage("load init")
    } else {
        let sparse = load_point_cloud(path).stage("load init")?;
        init_from_cloud(&sparse).stage("load init")
    }
}

/// Views of one split that carry a camera pose; unposed views (for example
/// ones SfM could not register) are skipped with a warning.
fn posed_views(scene: &Scene, split: Split) -> CliResult<Vec<TrainView>> {
    let mut views = Vec::new();
    for v in scene.views_in(split) {
        if v.camera.is_none() {
            warn!("skipping view {}: no camera pose", v.name);
            continue;
        }
        views.push(v.train_view().stage("load scene")?);
    }
    if views.is_empty() {
        return Err(Failure::validation(
            "load scene",
            format!("no posed {split:?} views").to_lowercase(),
        ));
    }
    Ok(views)
}

pub struct TrainArgs<'a> {
    pub scene: &'a Path,
    pub init: &'a Path,
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub no_attention: bool,
    pub iterations: Option<usize>,
    pub seed: Option<u64>,
}

pub fn train_cmd(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = match args.config {
        Some(p) => TrainConfig::load(p).stage("train config")?,
        None => TrainConfig::default(),
    };
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.no_attention {
        cfg.attention_enabled = false;
    }
    cfg.validate().stage("train config")?;
    let scene = load_scene(args.scene).stage("load scene")?;
    let views = posed_views(&scene, Split::Train)?;
    let init = load_init(args.init)?;
    info!(
        "training {} splats on {} views for {} iterations (attention {})",
        init.len(),
        views.len(),
        cfg.iterations,
        if cfg.attention_enabled { "on" } else { "off" }
    );
    let outcome = train(&views, &init, &cfg).stage("training")?;
    let last = outcome.reports.last();
    if let Some(r) = last {
        info!(
            "final L1 {:.6}, SSIM {:.6}, {} splats, {:.2}s",
            r.plain_l1, r.ssim, r.splat_count, outcome.elapsed_seconds
        );
    }

    create_dir(args.out)?;
    save_splats(&outcome.cloud, args.out.join("splats.ply")).runtime("write output")?;
    write_text(
        &args.out.join("loss.csv"),
        &reports_to_csv(&outcome.reports),
    )?;
    let meta = json!({
        "attention_enabled": cfg.attention_enabled,
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "training_time_s": outcome.elapsed_seconds,
        "initial_splats": init.len(),
        "final_splats": outcome.cloud.len(),
        "final_l1": last.map(|r| r.plain_l1),
        "final_ssim": last.map(|r| r.ssim),
        "train_views": views.len(),
    });
    write_text(
        &args.out.join("run.json"),
        &serde_json::to_string_pretty(&meta).expect("json"),
    )?;
    write_text(&args.out.join("config.toml"), &cfg.to_toml_string())?;
    Ok(())
}

/// Image size from explicit flags, falling back to a principal point at the
/// image centre.
fn render_size(
    cam: &Camera,
    width: Option<usize>,
    height: Option<usize>,
) -> CliResult<(usize, usize)> {
    let infer = |c: f64| {
        let n = (2.0 * c + 1.0).round();
        (n >= 1.0).then_some(n as usize)
    };
    let w = width.or_else(|| infer(cam.cx));
    let h = height.or_else(|| infer(cam.cy));
    match (w, h) {
        (Some(w), Some(h)) if w > 0 && h > 0 => Ok((w, h)),
        _ => Err(Failure::validation(
            "render",
            "cannot infer image size; pass --width and --height",
        )),
    }
}

pub fn render(
    splats: &Path,
    camera: &Path,
    index: usize,
    out: &Path,
    width: Option<usize>,
    height: Option<usize>,
) -> CliResult<()> {
    let cloud = load_splats(splats).stage("load splats")?;
    let cams = load_cameras(camera).stage("load camera")?;
    let cam = cams.get(index).copied().flatten().ok_or_else(|| {
        Failure::validation(
            "load camera",
            format!("no camera at index {index} in {}", camera.display()),
        )
    })?;
    let (w, h) = render_size(&cam, width, height)?;
    let img = rasterize(&cloud, &cam, &RenderSettings::new(w, h));
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_image(out, &img).runtime("write output")?;
    info!(
        "rendered {} splats at {w}x{h} to {}",
        cloud.len(),
        out.display()
    );
    Ok(())
}

fn eval_views(scene: &Scene) -> CliResult<Split> {
    if scene.views_in(Split::Eval).next().is_some() {
        Ok(Split::Eval)
    } else {
        warn!("scene has no eval views; evaluating on training views");
        Ok(Split::Train)
    }
}

fn read_train_time(run: Option<&Path>) -> CliResult<f64> {
    let Some(path) = run else {
        return Ok(0.0);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::validation("run metadata", format!("{}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::validation("run metadata", format!("{}: {e}", path.display())))?;
    v.get("training_time_s")
        .and_then(|t| t.as_f64())
        .ok_or_else(|| {
            Failure::validation(
                "run metadata",
                format!("{}: missing training_time_s", path.display()),
            )
        })
}

pub fn eval(
    splats: &Path,
    scene_path: &Path,
    out: &Path,
    frames: usize,
    run: Option<&Path>,
) -> CliResult<EvalReport> {
    let cloud = load_splats(splats).stage("load splats")?;
    let scene = load_scene(scene_path).stage("load scene")?;
    let split = eval_views(&scene)?;
    let views = posed_views(&scene, split)?;
    let intr = scene.intrinsics();
    let cfg = EvalConfig {
        settings: RenderSettings::new(intr.width, intr.height),
        ssim_weight: TrainConfig::default().ssim_weight,
        fps_frames: frames,
        train_time: read_train_time(run)?,
    };
    let cameras: Vec<Camera> = views.iter().map(|v| v.camera).collect();
    let targets: Vec<Raster> = views.iter().map(|v| v.image.clone()).collect();
    let attention: Vec<Raster> = views.iter().map(|v| v.attention.clone()).collect();
    let report =
        evaluate(&cloud, &cameras, &targets, Some(&attention), &cfg).stage("evaluation")?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_text(
        out,
        &format!("{}\n{}\n", EvalReport::CSV_HEADER, report.to_csv_row()),
    )?;
    println!("{report}");
    Ok(report)
}

pub fn bench(splats: &Path, scene_path: &Path, frames: usize) -> CliResult<f64> {
    if frames == 0 {
        return Err(Failure::validation("bench", "frames must be at least 1"));
    }
    let cloud = load_splats(splats).stage("load splats")?;
    let scene = load_scene(scene_path).stage("load scene")?;
    let cameras: Vec<Camera> = scene.cameras().into_iter().flatten().collect();
    if cameras.is_empty() {
        return Err(Failure::validation("bench", "scene has no posed views"));
    }
    let intr = scene.intrinsics();
    let fps = fps_benchmark(
        &cloud,
        &cameras,
        &RenderSettings::new(intr.width, intr.height),
        frames,
    )
    .stage("bench")?;
    println!(
        "{fps:.2} fps ({} splats, {frames} frames, {}x{})",
        cloud.len(),
        intr.width,
        intr.height
    );
    Ok(fps)
}

pub fn synth(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let mut spec = match spec {
        Some(p) => SyntheticSpec::load(p).stage("synthetic spec")?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().stage("synthetic spec")?;
    let scene = synthesize(&spec).stage("synthesis")?;
    create_dir(out)?;
    let manifest = write_synthetic(&scene, out).runtime("write output")?;
    info!(
        "wrote {} views to {}",
        scene.images.len(),
        manifest.display()
    );
    Ok(())
}

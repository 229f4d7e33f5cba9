//! Python bindings. Images cross the boundary as flat row-major lists of
//! floats in `[0, 1]` together with `(width, height, channels)`; splats as
//! lists of 14 parameters in PLY property order.

use std::path::PathBuf;

use attnsplat::camera::Camera;
use attnsplat::gaussians::{rasterize, GaussianCloud, RenderSettings, Splat, PARAMS_PER_SPLAT};
use attnsplat::imaging::{self, Raster};
use attnsplat::metrics;
use attnsplat::scene_io::{self, Split, SyntheticSpec};
use attnsplat::training::{self, TrainConfig};
use attnsplat::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Degenerate(_) | Error::Reconstruction(_) | Error::NonFinite { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn raster(data: Vec<f64>, width: usize, height: usize, channels: usize) -> PyResult<Raster> {
    Raster::from_vec(width, height, channels, data).map_err(to_py)
}

/// Reads an image as `(width, height, channels, data)`.
#[pyfunction]
fn load_image(path: PathBuf) -> PyResult<(usize, usize, usize, Vec<f64>)> {
    let img = imaging::load_image(&path).map_err(to_py)?;
    Ok((img.width(), img.height(), img.channels(), img.into_vec()))
}

/// Writes an image; the format follows the extension (png, ppm, pgm, pfm).
#[pyfunction]
fn save_image(
    path: PathBuf,
    data: Vec<f64>,
    width: usize,
    height: usize,
    channels: usize,
) -> PyResult<()> {
    imaging::save_image(&path, &raster(data, width, height, channels)?).map_err(to_py)
}

/// Normalized Sobel gradient magnitude, one value per pixel. Single-channel
/// input is treated as gray.
#[pyfunction]
fn attention_mask(
    data: Vec<f64>,
    width: usize,
    height: usize,
    channels: usize,
) -> PyResult<Vec<f64>> {
    let img = raster(data, width, height, channels)?.into_rgb();
    let a = imaging::attention_mask(&img).map_err(to_py)?;
    Ok(a.into_vec())
}

/// `saliency >= threshold` per pixel.
#[pyfunction]
fn threshold_saliency(
    data: Vec<f64>,
    width: usize,
    height: usize,
    threshold: f64,
) -> PyResult<Vec<bool>> {
    let m =
        imaging::threshold_saliency(&raster(data, width, height, 1)?, threshold).map_err(to_py)?;
    Ok(m.bits().to_vec())
}

/// `(l1, psnr, ssim)` of two equally shaped images.
#[pyfunction]
fn image_metrics(
    a: Vec<f64>,
    b: Vec<f64>,
    width: usize,
    height: usize,
    channels: usize,
) -> PyResult<(f64, f64, f64)> {
    let (a, b) = (
        raster(a, width, height, channels)?,
        raster(b, width, height, channels)?,
    );
    Ok((
        metrics::l1_metric(&a, &b).map_err(to_py)?,
        metrics::psnr(&a, &b).map_err(to_py)?,
        metrics::ssim(&a, &b).map_err(to_py)?,
    ))
}

fn cloud_from_params(params: Vec<Vec<f64>>) -> PyResult<GaussianCloud> {
    let splats = params
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let p: [f64; PARAMS_PER_SPLAT] = p.try_into().map_err(|p: Vec<f64>| {
                PyValueError::new_err(format!(
                    "splat {i} has {} parameters, expected {PARAMS_PER_SPLAT}",
                    p.len()
                ))
            })?;
            Ok(Splat::from_params(&p))
        })
        .collect::<PyResult<_>>()?;
    Ok(GaussianCloud::new(splats))
}

fn params_of(cloud: &GaussianCloud) -> Vec<Vec<f64>> {
    cloud
        .splats
        .iter()
        .map(|s| s.to_params().to_vec())
        .collect()
}

#[pyfunction]
fn load_splats(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    Ok(params_of(&scene_io::load_splats(&path).map_err(to_py)?))
}

#[pyfunction]
fn save_splats(path: PathBuf, params: Vec<Vec<f64>>) -> PyResult<()> {
    scene_io::save_splats(&cloud_from_params(params)?, &path).map_err(to_py)
}

/// Renders camera `index` of a cameras JSON file; returns RGB data.
#[pyfunction]
#[pyo3(signature = (params, cameras_path, width, height, index = 0))]
fn render(
    params: Vec<Vec<f64>>,
    cameras_path: PathBuf,
    width: usize,
    height: usize,
    index: usize,
) -> PyResult<Vec<f64>> {
    let cloud = cloud_from_params(params)?;
    let cams = scene_io::load_cameras(&cameras_path).map_err(to_py)?;
    let cam: Camera = cams
        .get(index)
        .copied()
        .flatten()
        .ok_or_else(|| PyValueError::new_err(format!("no camera at index {index}")))?;
    let settings = RenderSettings::new(width, height);
    settings.validate().map_err(to_py)?;
    Ok(rasterize(&cloud, &cam, &settings).into_vec())
}

/// Writes a synthetic scene and returns the manifest path. `spec_json` uses
/// the same fields as the `synth` command's spec file.
#[pyfunction]
#[pyo3(signature = (out_dir, spec_json = None))]
fn synthesize(py: Python<'_>, out_dir: PathBuf, spec_json: Option<&str>) -> PyResult<PathBuf> {
    let spec = match spec_json {
        Some(s) => SyntheticSpec::from_json_str(s).map_err(to_py)?,
        None => SyntheticSpec::default(),
    };
    py.detach(|| scene_io::generate_synthetic(&spec, &out_dir))
        .map_err(to_py)
}

type TrainResult<'py> = (Vec<Vec<f64>>, Vec<Bound<'py, PyDict>>);

/// Trains from a scene manifest and an initial splat PLY. Returns the final
/// splat parameters and the loss reports as dicts.
#[pyfunction]
#[pyo3(signature = (scene, init, iterations = 2000, attention = true, seed = 0, config_toml = None))]
fn train<'py>(
    py: Python<'py>,
    scene: PathBuf,
    init: PathBuf,
    iterations: usize,
    attention: bool,
    seed: u64,
    config_toml: Option<&str>,
) -> PyResult<TrainResult<'py>> {
    let mut cfg = match config_toml {
        Some(s) => TrainConfig::from_toml_str(s).map_err(to_py)?,
        None => TrainConfig::desk(),
    };
    cfg.iterations = iterations;
    cfg.attention_enabled = attention;
    cfg.seed = seed;
    let outcome = py
        .detach(|| {
            let scene = scene_io::load_scene(&scene)?;
            let views = scene.train_views(Split::Train)?;
            let init = scene_io::load_splats(&init)?;
            training::train(&views, &init, &cfg)
        })
        .map_err(to_py)?;
    let reports = outcome
        .reports
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("iteration", r.iteration)?;
            d.set_item("weighted_l1", r.weighted_l1)?;
            d.set_item("plain_l1", r.plain_l1)?;
            d.set_item("ssim", r.ssim)?;
            d.set_item("combined", r.combined)?;
            d.set_item("splat_count", r.splat_count)?;
            Ok(d)
        })
        .collect::<PyResult<_>>()?;
    Ok((params_of(&outcome.cloud), reports))
}

#[pymodule]
fn pyattnsplat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(save_image, m)?)?;
    m.add_function(wrap_pyfunction!(attention_mask, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_saliency, m)?)?;
    m.add_function(wrap_pyfunction!(image_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(load_splats, m)?)?;
    m.add_function(wrap_pyfunction!(save_splats, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}

//! Raster types, Sobel attention masks, saliency thresholding and
//! white-background compositing.
//!
//! All 3x3 filters are cross-correlations with clamp-to-edge padding.

mod blur;
mod codec;
mod raster;

pub use blur::{gaussian_blur, gaussian_blur_adjoint, gaussian_kernel};
pub use codec::{
    load_image, load_mask, load_pfm, save_image, save_mask, save_pfm, save_png, save_pnm,
};
pub use raster::{BinaryMask, Kernel3x3, Raster};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Default saliency threshold used to binarize a saliency map.
pub const DEFAULT_SALIENCY_THRESHOLD: f64 = 0.5;

/// Unweighted channel mean.
pub fn to_grayscale(img: &Raster) -> Result<Raster> {
    if img.channels() != 3 {
        return Err(Error::InvalidArgument(format!(
            "grayscale conversion needs 3 channels, got {}",
            img.channels()
        )));
    }
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| (p[0] + p[1] + p[2]) / 3.0)
        .collect();
    Raster::from_vec(img.width(), img.height(), 1, data)
}

pub fn convolve3x3(img: &Raster, k: &Kernel3x3) -> Raster {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut out = Raster::zeros(w, h, ch);
    out.data_mut()
        .par_chunks_mut(w * ch)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                for c in 0..ch {
                    let at = |dx: isize, dy: isize| {
                        k.at(dx, dy) * img.get_clamped(x as isize + dx, y as isize + dy, c)
                    };
                    // opposite taps are summed first so antisymmetric kernels
                    // cancel exactly on flat regions
                    let mut acc: Option<f64> = None;
                    for (dx, dy) in [(-1, -1), (0, -1), (1, -1), (-1, 0)] {
                        if k.at(dx, dy) != 0.0 || k.at(-dx, -dy) != 0.0 {
                            let term = at(dx, dy) + at(-dx, -dy);
                            acc = Some(acc.map_or(term, |a| a + term));
                        }
                    }
                    if k.at(0, 0) != 0.0 {
                        let term = at(0, 0);
                        acc = Some(acc.map_or(term, |a| a + term));
                    }
                    row[x * ch + c] = acc.unwrap_or(0.0);
                }
            }
        });
    out
}

/// Horizontal and vertical Sobel responses `(G_x, G_y)`.
pub fn sobel_gradients(img: &Raster) -> Result<(Raster, Raster)> {
    if img.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "Sobel gradients need a single-channel image, got {} channels",
            img.channels()
        )));
    }
    Ok((
        convolve3x3(img, &Kernel3x3::SOBEL_X),
        convolve3x3(img, &Kernel3x3::SOBEL_Y),
    ))
}

pub fn gradient_magnitude(gx: &Raster, gy: &Raster) -> Result<Raster> {
    gx.check_same_shape(gy, "gradient magnitude")?;
    let data = gx
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&a, &b)| a.hypot(b))
        .collect();
    Raster::from_vec(gx.width(), gx.height(), gx.channels(), data)
}

/// Min-max normalization into `[0, 1]`. A constant field maps to all zeros.
pub fn normalize_attention(g: &Raster) -> Raster {
    let (lo, hi) = g.min_max();
    let range = hi - lo;
    if !(range > 0.0) {
        return Raster::zeros(g.width(), g.height(), g.channels());
    }
    g.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Grayscale, Sobel, magnitude, normalize.
pub fn attention_mask(img: &Raster) -> Result<Raster> {
    let gray = to_grayscale(img)?;
    let (gx, gy) = sobel_gradients(&gray)?;
    Ok(normalize_attention(&gradient_magnitude(&gx, &gy)?))
}

/// Coarse gradient-based stand-in for a learned saliency network. Identical to
/// [`attention_mask`]; used when no precomputed saliency is supplied.
pub fn classical_saliency(img: &Raster) -> Result<Raster> {
    attention_mask(img)
}

/// `bit = sal >= t`.
pub fn threshold_saliency(sal: &Raster, t: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "saliency threshold must lie in [0, 1], got {t}"
        )));
    }
    if sal.channels() != 1 {
        return Err(Error::InvalidArgument(
            "saliency map must have a single channel".into(),
        ));
    }
    let bits = sal.data().iter().map(|&v| v >= t).collect();
    BinaryMask::from_bits(sal.width(), sal.height(), bits)
}

/// Keeps pixels under the mask and paints everything else white.
pub fn composite_white(img: &Raster, mask: &BinaryMask) -> Result<Raster> {
    if !mask.matches_raster(img) {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs image {}x{}",
            mask.width(),
            mask.height(),
            img.width(),
            img.height()
        )));
    }
    let ch = img.channels();
    let mut out = img.clone();
    for (px, &keep) in out.data_mut().chunks_exact_mut(ch).zip(mask.bits()) {
        if !keep {
            px.fill(1.0);
        }
    }
    Ok(out)
}

/// `F' = F + lambda * (A ∘ F)`, applied per channel.
pub fn enhance_features(f: &Raster, a: &Raster, lambda: f64) -> Result<Raster> {
    f.check_same_dims(a, "feature enhancement")?;
    if a.channels() != 1 {
        return Err(Error::InvalidArgument(
            "attention map must have a single channel".into(),
        ));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "enhancement scale must be non-negative, got {lambda}"
        )));
    }
    let ch = f.channels();
    let mut out = f.clone();
    for (px, &att) in out.data_mut().chunks_exact_mut(ch).zip(a.data()) {
        for v in px {
            *v += lambda * att * *v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(w: usize, h: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Raster {
        Raster::from_fn(w, h, 3, |x, y, c| f(x, y)[c])
    }

    #[test]
    fn grayscale_is_channel_mean() {
        let img = rgb(1, 1, |_, _| [0.3, 0.6, 0.9]);
        assert!((to_grayscale(&img).unwrap().get(0, 0, 0) - 0.6).abs() < 1e-15);
        let black = rgb(2, 2, |_, _| [0.0; 3]);
        assert!(to_grayscale(&black)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let white = rgb(2, 2, |_, _| [1.0; 3]);
        assert!(to_grayscale(&white)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(to_grayscale(&Raster::zeros(2, 2, 1)).is_err());
    }

    #[test]
    fn gray_promotes_to_rgb_and_back() {
        let g = Raster::from_fn(3, 2, 1, |x, y, _| (x + 3 * y) as f64 / 6.0);
        let c = g.clone().into_rgb();
        assert_eq!(c.channels(), 3);
        assert_eq!(to_grayscale(&c).unwrap(), g);
        let rgb = rgb(2, 2, |x, y| [x as f64, y as f64, 0.5]);
        assert_eq!(rgb.clone().into_rgb(), rgb);
    }

    #[test]
    fn identity_kernel_is_bit_exact() {
        let img = Raster::from_fn(7, 5, 1, |x, y, _| {
            ((x * 31 + y * 17) % 13) as f64 / 13.0 + 1e-9
        });
        assert_eq!(convolve3x3(&img, &Kernel3x3::IDENTITY), img);
    }

    #[test]
    fn zero_sum_kernel_kills_constant() {
        let img = Raster::filled(6, 6, 1, 0.37);
        for k in [Kernel3x3::SOBEL_X, Kernel3x3::SOBEL_Y] {
            assert_eq!(k.sum(), 0.0);
            assert!(convolve3x3(&img, &k).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn magnitude_examples() {
        let gx = Raster::from_vec(3, 1, 1, vec![0.0, 3.0, 8.0]).unwrap();
        let gy = Raster::from_vec(3, 1, 1, vec![0.0, 4.0, 0.0]).unwrap();
        assert_eq!(
            gradient_magnitude(&gx, &gy).unwrap().data(),
            &[0.0, 5.0, 8.0]
        );
        assert!(gradient_magnitude(&gx, &Raster::zeros(2, 1, 1)).is_err());
    }

    #[test]
    fn normalization_examples() {
        let g = Raster::from_vec(3, 1, 1, vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(normalize_attention(&g).data(), &[0.0, 0.5, 1.0]);
        let g = Raster::from_vec(3, 1, 1, vec![0.0, 2.0, 8.0]).unwrap();
        assert_eq!(normalize_attention(&g).data(), &[0.0, 0.25, 1.0]);
        let flat = Raster::filled(4, 4, 1, 3.0);
        assert!(normalize_attention(&flat).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn threshold_is_inclusive() {
        let sal = Raster::from_vec(3, 1, 1, vec![0.7, 0.5, 0.49]).unwrap();
        let m = threshold_saliency(&sal, 0.5).unwrap();
        assert_eq!(m.bits(), &[true, true, false]);
        let zero = Raster::zeros(3, 3, 1);
        assert_eq!(threshold_saliency(&zero, 0.5).unwrap().count(), 0);
        assert_eq!(threshold_saliency(&zero, 0.0).unwrap().count(), 9);
        assert!(threshold_saliency(&sal, 1.5).is_err());
        assert!(threshold_saliency(&sal, -0.1).is_err());
    }

    #[test]
    fn composite_examples() {
        let img = rgb(4, 2, |x, y| [x as f64 / 4.0, y as f64 / 2.0, 0.25]);
        let all = BinaryMask::filled(4, 2, true);
        assert_eq!(composite_white(&img, &all).unwrap(), img);
        let none = BinaryMask::filled(4, 2, false);
        assert!(composite_white(&img, &none)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        let half = BinaryMask::from_fn(4, 2, |x, _| x < 2);
        let out = composite_white(&img, &half).unwrap();
        for y in 0..2 {
            for x in 0..4 {
                for c in 0..3 {
                    let want = if x < 2 { img.get(x, y, c) } else { 1.0 };
                    assert_eq!(out.get(x, y, c), want);
                }
            }
        }
        assert!(composite_white(&img, &BinaryMask::filled(3, 2, true)).is_err());
    }

    #[test]
    fn enhancement_examples() {
        let f = Raster::filled(2, 2, 1, 2.0);
        let a = Raster::filled(2, 2, 1, 0.5);
        assert_eq!(enhance_features(&f, &a, 0.0).unwrap(), f);
        assert!(enhance_features(&f, &a, 1.0)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 3.0));
        let ones = Raster::filled(2, 2, 1, 1.0);
        let f3 = rgb(2, 2, |x, y| [x as f64, y as f64, 0.5]);
        let doubled = enhance_features(&f3, &ones, 1.0).unwrap();
        for (o, i) in doubled.data().iter().zip(f3.data()) {
            assert_eq!(*o, 2.0 * i);
        }
        assert!(enhance_features(&f, &Raster::zeros(3, 2, 1), 1.0).is_err());
    }

    #[test]
    fn constant_image_has_no_attention() {
        let img = rgb(9, 9, |_, _| [0.2, 0.4, 0.9]);
        assert!(attention_mask(&img)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(classical_saliency(&img)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }
}

//! Separable Gaussian filtering with clamp-to-edge addressing, and its adjoint.

use super::Raster;

/// Normalized 1D Gaussian taps of length `2 * radius + 1`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

fn pass(img: &Raster, taps: &[f64], horizontal: bool) -> Raster {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let r = (taps.len() / 2) as isize;
    let mut out = Raster::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let o = k as isize - r;
                    acc += t * if horizontal {
                        img.get_clamped(x as isize + o, y as isize, c)
                    } else {
                        img.get_clamped(x as isize, y as isize + o, c)
                    };
                }
                out.set(x, y, c, acc);
            }
        }
    }
    out
}

/// Transpose of [`pass`]: scatters each output sample back onto the clamped
/// source positions it was gathered from.
fn pass_adjoint(img: &Raster, taps: &[f64], horizontal: bool) -> Raster {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let r = (taps.len() / 2) as isize;
    let mut out = Raster::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = img.get(x, y, c);
                for (k, &t) in taps.iter().enumerate() {
                    let o = k as isize - r;
                    let (sx, sy) = if horizontal {
                        ((x as isize + o).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + o).clamp(0, h as isize - 1) as usize)
                    };
                    let i = out.index(sx, sy, c);
                    out.data_mut()[i] += t * v;
                }
            }
        }
    }
    out
}

/// Horizontal then vertical Gaussian filter.
pub fn gaussian_blur(img: &Raster, taps: &[f64]) -> Raster {
    pass(&pass(img, taps, true), taps, false)
}

/// Adjoint of [`gaussian_blur`]: `<blur(a), b> = <a, blur_adjoint(b)>`.
pub fn gaussian_blur_adjoint(img: &Raster, taps: &[f64]) -> Raster {
    pass_adjoint(&pass_adjoint(img, taps, false), taps, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_normalized() {
        let t = gaussian_kernel(1.5, 5);
        assert_eq!(t.len(), 11);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((t[0] - t[10]).abs() < 1e-18);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Raster::filled(7, 4, 1, 0.3);
        let out = gaussian_blur(&img, &gaussian_kernel(1.5, 5));
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn adjoint_identity_holds() {
        let taps = gaussian_kernel(1.0, 3);
        let a = Raster::from_fn(9, 6, 1, |x, y, _| ((x * 5 + y * 3) % 7) as f64 - 2.0);
        let b = Raster::from_fn(9, 6, 1, |x, y, _| ((x * 2 + y * 11) % 5) as f64 * 0.3);
        let lhs: f64 = gaussian_blur(&a, &taps)
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| p * q)
            .sum();
        let rhs: f64 = a
            .data()
            .iter()
            .zip(gaussian_blur_adjoint(&b, &taps).data())
            .map(|(p, q)| p * q)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

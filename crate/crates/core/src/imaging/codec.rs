//! Image and mask persistence.
//!
//! PNG goes through the `image` crate. Binary PPM (P6) and PGM (P5) are
//! written by hand so fixtures are byte-stable. PFM (`PF`/`Pf`) stores
//! little-endian `f32` samples and is used where 8-bit quantization would
//! lose information (attention sidecars, phantom reference renders).

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{BinaryMask, Raster};
use crate::error::{Error, Result};

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default()
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "ppm" | "pgm" => load_pnm(path),
        "pfm" => load_pfm(path),
        _ => load_png(path),
    }
}

pub fn save_image(path: impl AsRef<Path>, img: &Raster) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "ppm" | "pgm" => save_pnm(path, img),
        "pfm" => save_pfm(path, img),
        _ => save_png(path, img),
    }
}

fn load_png(path: &Path) -> Result<Raster> {
    let dynimg = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    if dynimg.color().has_color() {
        let buf = dynimg.to_rgb8();
        let data = buf.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Raster::from_vec(w, h, 3, data)
    } else {
        let buf = dynimg.to_luma8();
        let data = buf.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Raster::from_vec(w, h, 1, data)
    }
}

pub fn save_png(path: impl AsRef<Path>, img: &Raster) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let color = if img.channels() == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    image::save_buffer(path, &bytes, img.width() as u32, img.height() as u32, color)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Writes P6 for 3-channel and P5 for 1-channel rasters, 8 bits per sample.
pub fn save_pnm(path: impl AsRef<Path>, img: &Raster) -> Result<()> {
    let path = path.as_ref();
    let magic = if img.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| to_u8(v)));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn token(&mut self) -> Option<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| std::str::from_utf8(&self.bytes[start..self.pos]).ok())?
    }

    fn number<T: std::str::FromStr>(&mut self) -> Option<T> {
        self.token()?.parse().ok()
    }
}

fn load_pnm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hdr = HeaderReader {
        bytes: &bytes,
        pos: 0,
    };
    let channels = match hdr.token() {
        Some("P6") => 3,
        Some("P5") => 1,
        other => {
            return Err(Error::format(
                path,
                format!("unsupported PNM magic {other:?}, expected P5 or P6"),
            ))
        }
    };
    let (w, h, maxval): (usize, usize, usize) = match (hdr.number(), hdr.number(), hdr.number()) {
        (Some(w), Some(h), Some(m)) => (w, h, m),
        _ => return Err(Error::format(path, "malformed PNM header")),
    };
    if maxval != 255 {
        return Err(Error::format(
            path,
            format!("only 8-bit PNM is supported, maxval {maxval}"),
        ));
    }
    // exactly one whitespace byte separates the header from the payload
    let start = hdr.pos + 1;
    let need = w * h * channels;
    if bytes.len() < start + need {
        return Err(Error::format(
            path,
            format!(
                "truncated PNM payload: expected {need} bytes, got {}",
                bytes.len().saturating_sub(start)
            ),
        ));
    }
    let data = bytes[start..start + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Raster::from_vec(w, h, channels, data)
}

/// Writes a little-endian PFM; rows are stored bottom-to-top per the format.
pub fn save_pfm(path: impl AsRef<Path>, img: &Raster) -> Result<()> {
    let path = path.as_ref();
    let magic = if img.channels() == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width(), img.height()).into_bytes();
    let row_len = img.width() * img.channels();
    for row in img.data().chunks_exact(row_len).rev() {
        for &v in row {
            out.write_all(&(v as f32).to_le_bytes()).expect("vec write");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hdr = HeaderReader {
        bytes: &bytes,
        pos: 0,
    };
    let channels = match hdr.token() {
        Some("PF") => 3,
        Some("Pf") => 1,
        other => {
            return Err(Error::format(
                path,
                format!("unsupported PFM magic {other:?}"),
            ))
        }
    };
    let (w, h, scale): (usize, usize, f64) = match (hdr.number(), hdr.number(), hdr.number()) {
        (Some(w), Some(h), Some(s)) => (w, h, s),
        _ => return Err(Error::format(path, "malformed PFM header")),
    };
    let little = scale < 0.0;
    let start = hdr.pos + 1;
    let need = w * h * channels * 4;
    if bytes.len() < start + need {
        return Err(Error::format(
            path,
            format!(
                "truncated PFM payload: expected {need} bytes, got {}",
                bytes.len().saturating_sub(start)
            ),
        ));
    }
    let samples: Vec<f64> = bytes[start..start + need]
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little {
                f32::from_le_bytes(b) as f64
            } else {
                f32::from_be_bytes(b) as f64
            }
        })
        .collect();
    let row_len = w * channels;
    let data = samples
        .chunks_exact(row_len)
        .rev()
        .flatten()
        .copied()
        .collect();
    Raster::from_vec(w, h, channels, data)
}

/// Masks persist as 8-bit PGM with values 0 and 255.
pub fn save_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a mask from any supported raster format; samples at or above one
/// half are object pixels.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let img = load_image(path)?;
    let bits = img
        .data()
        .chunks_exact(img.channels())
        .map(|p| p.iter().sum::<f64>() / p.len() as f64 >= 0.5)
        .collect();
    BinaryMask::from_bits(img.width(), img.height(), bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quantized(w: usize, h: usize, ch: usize) -> Raster {
        Raster::from_fn(w, h, ch, |x, y, c| {
            ((x * 7 + y * 13 + c * 29) % 256) as f64 / 255.0
        })
    }

    #[test]
    fn pnm_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (ch, name) in [(3, "a.ppm"), (1, "a.pgm")] {
            let img = quantized(5, 4, ch);
            let p = dir.path().join(name);
            save_pnm(&p, &img).unwrap();
            assert_eq!(load_image(&p).unwrap(), img);
        }
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = quantized(6, 3, 3);
        let p = dir.path().join("a.png");
        save_png(&p, &img).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn pfm_round_trip_keeps_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let img = Raster::from_fn(4, 3, 1, |x, y, _| (x as f64 + 0.1) * (y as f64 + 0.3) / 7.0);
        let p = dir.path().join("a.pfm");
        save_pfm(&p, &img).unwrap();
        let back = load_pfm(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::from_fn(7, 3, |x, y| (x + y) % 3 == 0);
        let p = dir.path().join("m.pgm");
        save_mask(&p, &m).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    #[test]
    fn truncated_pnm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        fs::write(&p, b"P5\n4 4\n255\n\x00\x01").unwrap();
        let err = load_image(&p).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussians::{GaussianCloud, Splat, PARAMS_PER_SPLAT};
use crate::sfm::SparseCloud;

/// Property names of one splat record, in file order.
pub const SPLAT_PROPERTIES: [&str; PARAMS_PER_SPLAT] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

/// Bytes per splat record: 14 little-endian `f32`.
pub const SPLAT_RECORD_BYTES: usize = PARAMS_PER_SPLAT * 4;

pub fn splat_ply_header(n: usize) -> String {
    let mut s = format!("ply\nformat binary_little_endian 1.0\nelement vertex {n}\n");
    for p in SPLAT_PROPERTIES {
        s.push_str("property float ");
        s.push_str(p);
        s.push('\n');
    }
    s.push_str("end_header\n");
    s
}

/// Record fields in file order.
fn splat_fields(s: &Splat) -> [f64; PARAMS_PER_SPLAT] {
    [
        s.position[0],
        s.position[1],
        s.position[2],
        s.color[0],
        s.color[1],
        s.color[2],
        s.opacity_logit,
        s.log_scale[0],
        s.log_scale[1],
        s.log_scale[2],
        s.rotation[0],
        s.rotation[1],
        s.rotation[2],
        s.rotation[3],
    ]
}

fn splat_from_fields(f: &[f64; PARAMS_PER_SPLAT]) -> Splat {
    Splat {
        position: [f[0], f[1], f[2]],
        color: [f[3], f[4], f[5]],
        opacity_logit: f[6],
        log_scale: [f[7], f[8], f[9]],
        rotation: [f[10], f[11], f[12], f[13]],
    }
}

/// Rounds every splat field to the nearest `f32`, the precision at which
/// splats persist.
pub fn quantize_to_f32(cloud: &GaussianCloud) -> GaussianCloud {
    GaussianCloud::new(
        cloud
            .splats
            .iter()
            .map(|s| splat_from_fields(&splat_fields(s).map(|v| v as f32 as f64)))
            .collect(),
    )
}

pub fn encode_splats(cloud: &GaussianCloud) -> Vec<u8> {
    let mut out = splat_ply_header(cloud.len()).into_bytes();
    out.reserve(cloud.len() * SPLAT_RECORD_BYTES);
    for s in &cloud.splats {
        for v in splat_fields(s) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Writes splats as binary little-endian PLY. Fields are stored as `f32`;
/// a cloud already at `f32` precision round-trips bit for bit.
pub fn save_splats(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_splats(cloud)).map_err(|e| Error::io(path, e))
}

struct Header {
    format: String,
    vertices: usize,
    /// `(type, name)` for each vertex property.
    properties: Vec<(String, String)>,
    body_start: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or("missing end_header")?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| "header is not UTF-8")?;
    let mut lines = text.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err("missing ply magic".into());
    }
    let mut header = Header {
        format: String::new(),
        vertices: 0,
        properties: Vec::new(),
        body_start: end + END.len(),
    };
    let mut seen_vertex = false;
    let mut in_vertex = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, "1.0"] => header.format = fmt.to_string(),
            ["element", "vertex", n] => {
                if seen_vertex {
                    return Err("duplicate vertex element".into());
                }
                header.vertices = n.parse().map_err(|_| format!("bad vertex count {n:?}"))?;
                seen_vertex = true;
                in_vertex = true;
            }
            ["element", name, _] => return Err(format!("unsupported element {name:?}")),
            ["property", ty, name] if in_vertex => {
                header.properties.push((ty.to_string(), name.to_string()))
            }
            _ => return Err(format!("unrecognized header line {line:?}")),
        }
    }
    if header.format.is_empty() {
        return Err("missing format line".into());
    }
    if !seen_vertex {
        return Err("missing vertex element".into());
    }
    Ok(header)
}

pub fn decode_splats(bytes: &[u8], path: &Path) -> Result<GaussianCloud> {
    let header = parse_header(bytes)
        .map_err(|m| Error::format(path, format!("malformed PLY header: {m}")))?;
    if header.format != "binary_little_endian" {
        return Err(Error::format(
            path,
            format!("unsupported PLY format {:?}", header.format),
        ));
    }
    let mut slot = [usize::MAX; PARAMS_PER_SPLAT];
    for (i, (ty, name)) in header.properties.iter().enumerate() {
        let Some(k) = SPLAT_PROPERTIES.iter().position(|p| p == name) else {
            return Err(Error::format(
                path,
                format!("unknown PLY property {name:?}"),
            ));
        };
        if ty != "float" && ty != "float32" {
            return Err(Error::format(
                path,
                format!("property {name:?} has type {ty:?}, expected float"),
            ));
        }
        if slot[k] != usize::MAX {
            return Err(Error::format(
                path,
                format!("duplicate PLY property {name:?}"),
            ));
        }
        slot[k] = i;
    }
    if let Some(k) = slot.iter().position(|&s| s == usize::MAX) {
        return Err(Error::format(
            path,
            format!("missing PLY property {:?}", SPLAT_PROPERTIES[k]),
        ));
    }
    let body = &bytes[header.body_start..];
    let expected = header.vertices * SPLAT_RECORD_BYTES;
    if body.len() != expected {
        let what = if body.len() < expected {
            "truncated"
        } else {
            "oversized"
        };
        return Err(Error::format(
            path,
            format!(
                "{what} PLY payload: expected {expected} bytes for {} splats, got {}",
                header.vertices,
                body.len()
            ),
        ));
    }
    let splats = body
        .chunks_exact(SPLAT_RECORD_BYTES)
        .map(|rec| {
            let mut f = [0.0; PARAMS_PER_SPLAT];
            for (k, &i) in slot.iter().enumerate() {
                let b = &rec[i * 4..i * 4 + 4];
                f[k] = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
            }
            splat_from_fields(&f)
        })
        .collect();
    Ok(GaussianCloud::new(splats))
}

pub fn load_splats(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_splats(&bytes, path)
}

/// ASCII PLY with `x y z` as double and `red green blue` as uchar. Tracks are
/// not persisted.
pub fn save_point_cloud(cloud: &SparseCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    cloud.validate()?;
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\n\
         property double z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    );
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            p.x, p.y, p.z, c[0], c[1], c[2]
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads an ASCII point cloud written by [`save_point_cloud`]. Each point
/// gets an empty track.
pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<SparseCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes)
        .map_err(|m| Error::format(path, format!("malformed PLY header: {m}")))?;
    if header.format != "ascii" {
        return Err(Error::format(
            path,
            format!("point cloud must be ascii PLY, got {:?}", header.format),
        ));
    }
    let names: Vec<&str> = header.properties.iter().map(|(_, n)| n.as_str()).collect();
    let col = |n: &str| {
        names
            .iter()
            .position(|&p| p == n)
            .ok_or_else(|| Error::format(path, format!("missing PLY property {n:?}")))
    };
    let idx = [
        col("x")?,
        col("y")?,
        col("z")?,
        col("red")?,
        col("green")?,
        col("blue")?,
    ];
    let body = std::str::from_utf8(&bytes[header.body_start..])
        .map_err(|_| Error::format(path, "PLY body is not UTF-8"))?;
    let mut cloud = SparseCloud::default();
    let mut lines = body.lines().filter(|l| !l.trim().is_empty());
    for i in 0..header.vertices {
        let line = lines.next().ok_or_else(|| {
            Error::format(
                path,
                format!(
                    "truncated PLY: expected {} vertices, got {i}",
                    header.vertices
                ),
            )
        })?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != names.len() {
            return Err(Error::format(
                path,
                format!("vertex {i}: expected {} values", names.len()),
            ));
        }
        let num = |k: usize| -> Result<f64> {
            tok[idx[k]].parse().map_err(|_| {
                Error::format(path, format!("vertex {i}: bad number {:?}", tok[idx[k]]))
            })
        };
        cloud.points.push(Vector3::new(num(0)?, num(1)?, num(2)?));
        let byte = |k: usize| -> Result<u8> {
            tok[idx[k]].parse().map_err(|_| {
                Error::format(path, format!("vertex {i}: bad colour {:?}", tok[idx[k]]))
            })
        };
        cloud.colors.push([byte(3)?, byte(4)?, byte(5)?]);
        cloud.tracks.push(Vec::new());
    }
    Ok(cloud)
}

/// True when the PLY header declares splat properties rather than a plain
/// coloured point cloud.
pub fn is_splat_ply(path: impl AsRef<Path>) -> Result<bool> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes)
        .map_err(|m| Error::format(path, format!("malformed PLY header: {m}")))?;
    Ok(header.properties.iter().any(|(_, n)| n == "f_dc_0"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f32_splat() -> impl Strategy<Value = Splat> {
        proptest::array::uniform14(-1e3f32..1e3f32)
            .prop_map(|v| splat_from_fields(&v.map(|x| x as f64)))
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(splats in proptest::collection::vec(f32_splat(), 0..40)) {
            let cloud = GaussianCloud::new(splats);
            let bytes = encode_splats(&cloud);
            prop_assert_eq!(bytes.len(), splat_ply_header(cloud.len()).len() + SPLAT_RECORD_BYTES * cloud.len());
            let back = decode_splats(&bytes, Path::new("mem.ply")).unwrap();
            for (a, b) in cloud.splats.iter().zip(&back.splats) {
                let (fa, fb) = (splat_fields(a), splat_fields(b));
                for k in 0..PARAMS_PER_SPLAT {
                    prop_assert_eq!(fa[k].to_bits(), fb[k].to_bits());
                }
            }
            prop_assert_eq!(back.len(), cloud.len());
        }

        #[test]
        fn saving_is_idempotent_after_quantization(v in proptest::array::uniform14(-1e3f64..1e3)) {
            let cloud = GaussianCloud::new(vec![splat_from_fields(&v)]);
            let once = decode_splats(&encode_splats(&cloud), Path::new("a")).unwrap();
            prop_assert_eq!(&once, &quantize_to_f32(&cloud));
            prop_assert_eq!(encode_splats(&once), encode_splats(&cloud));
        }
    }

    #[test]
    fn empty_cloud_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.ply");
        save_splats(&GaussianCloud::default(), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("element vertex 0\n"));
        assert!(load_splats(&p).unwrap().is_empty());
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let cloud = GaussianCloud::new(vec![Splat::from_rgb([0.0; 3], [0.5; 3], 0.1, 0.5); 3]);
        let mut bytes = encode_splats(&cloud);
        bytes.truncate(bytes.len() - 30);
        let msg = decode_splats(&bytes, Path::new("t.ply"))
            .unwrap_err()
            .to_string();
        assert!(
            msg.contains("expected 168 bytes") && msg.contains("got 138"),
            "{msg}"
        );
        assert!(msg.contains("t.ply"));
    }

    #[test]
    fn header_errors() {
        let body = encode_splats(&GaussianCloud::default());
        let text = String::from_utf8(body).unwrap();
        let unknown = text.replace(
            "property float rot_3\n",
            "property float rot_3\nproperty float nx\n",
        );
        let e = decode_splats(unknown.as_bytes(), Path::new("u"))
            .unwrap_err()
            .to_string();
        assert!(e.contains("unknown PLY property \"nx\""), "{e}");
        let missing = text.replace("property float opacity\n", "");
        assert!(decode_splats(missing.as_bytes(), Path::new("m"))
            .unwrap_err()
            .to_string()
            .contains("missing"));
        let no_end = text.replace("end_header\n", "");
        assert!(decode_splats(no_end.as_bytes(), Path::new("e"))
            .unwrap_err()
            .to_string()
            .contains("malformed"));
        let ascii = text.replace("binary_little_endian", "ascii");
        assert!(decode_splats(ascii.as_bytes(), Path::new("a")).is_err());
        assert!(decode_splats(b"not a ply", Path::new("n")).is_err());
    }

    #[test]
    fn point_cloud_round_trip() {
        let cloud = SparseCloud {
            points: vec![
                Vector3::new(0.1, -2.5, 1e-7),
                Vector3::new(3.0, 0.0, 1.0 / 3.0),
            ],
            colors: vec![[0, 128, 255], [7, 8, 9]],
            tracks: vec![vec![(0, 1)], vec![]],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        save_point_cloud(&cloud, &p).unwrap();
        let back = load_point_cloud(&p).unwrap();
        assert_eq!(back.points, cloud.points);
        assert_eq!(back.colors, cloud.colors);
        assert!(!is_splat_ply(&p).unwrap());
        let s = dir.path().join("s.ply");
        save_splats(&GaussianCloud::default(), &s).unwrap();
        assert!(is_splat_ply(&s).unwrap());
    }
}

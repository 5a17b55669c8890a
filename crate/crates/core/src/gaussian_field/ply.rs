//! Binary little-endian PLY in the usual Gaussian-splat vertex layout.
//!
//! Properties are written as `double`; `float` is accepted on read, and
//! unknown properties are skipped.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use super::{GaussianField, GaussianPrimitive};
use crate::error::{Error, Result};

const FIELDS: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];

fn values(p: &GaussianPrimitive) -> [f64; 14] {
    [
        p.center.x,
        p.center.y,
        p.center.z,
        p.color[0],
        p.color[1],
        p.color[2],
        p.opacity_logit,
        p.log_scale.x,
        p.log_scale.y,
        p.log_scale.z,
        p.rotation[0],
        p.rotation[1],
        p.rotation[2],
        p.rotation[3],
    ]
}

fn from_values(v: &[f64; 14]) -> GaussianPrimitive {
    GaussianPrimitive {
        center: Vector3::new(v[0], v[1], v[2]),
        color: [v[3], v[4], v[5]],
        opacity_logit: v[6],
        log_scale: Vector3::new(v[7], v[8], v[9]),
        rotation: [v[10], v[11], v[12], v[13]],
    }
}

pub fn write_ply(field: &GaussianField, mut out: impl Write) -> std::io::Result<()> {
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        field.len()
    );
    for name in FIELDS {
        header.push_str(&format!("property double {name}\n"));
    }
    header.push_str("end_header\n");
    let mut buf = header.into_bytes();
    buf.reserve(field.len() * FIELDS.len() * 8);
    for p in &field.primitives {
        for v in values(p) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
}

pub fn save_ply(field: &GaussianField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_ply(field, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|m| Error::format(path, m))
}

/// Parses an in-memory PLY file.
pub fn read_ply(bytes: &[u8]) -> Result<GaussianField> {
    parse(bytes).map_err(|m| Error::format("<memory>", m))
}

fn scalar_size(ty: &str) -> Option<usize> {
    Some(match ty {
        "char" | "uchar" | "int8" | "uint8" => 1,
        "short" | "ushort" | "int16" | "uint16" => 2,
        "int" | "uint" | "float" | "int32" | "uint32" | "float32" => 4,
        "double" | "float64" => 8,
        _ => return None,
    })
}

struct Property {
    name: String,
    ty: String,
    offset: usize,
}

fn parse(bytes: &[u8]) -> std::result::Result<GaussianField, String> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or("missing end_header")?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| "header is not valid UTF-8")?;
    let body = &bytes[end + END.len()..];

    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing ply magic".into());
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut stride = 0;
    let mut in_vertex = false;
    let mut format_ok = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", other, ..] => return Err(format!("unsupported format {other}")),
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err("duplicate vertex element".into());
                }
                count = Some(n.parse::<usize>().map_err(|_| format!("bad vertex count {n:?}"))?);
                in_vertex = true;
            }
            ["element", name, _] => return Err(format!("unsupported element {name}")),
            ["property", "list", ..] => return Err("list properties are not supported".into()),
            ["property", ty, name] if in_vertex => {
                let size = scalar_size(ty).ok_or_else(|| format!("unknown property type {ty}"))?;
                props.push(Property {
                    name: name.to_string(),
                    ty: ty.to_string(),
                    offset: stride,
                });
                stride += size;
            }
            _ => return Err(format!("unexpected header line {line:?}")),
        }
    }
    if !format_ok {
        return Err("missing format line".into());
    }
    let count = count.ok_or("missing vertex element")?;
    let mut slots = [(0usize, false); 14];
    for (slot, name) in slots.iter_mut().zip(FIELDS) {
        let p = props
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| format!("missing property {name}"))?;
        *slot = match p.ty.as_str() {
            "double" | "float64" => (p.offset, true),
            "float" | "float32" => (p.offset, false),
            other => return Err(format!("property {name} has non-float type {other}")),
        };
    }
    let need = count
        .checked_mul(stride)
        .ok_or("vertex count overflows")?;
    if body.len() < need {
        return Err(format!("truncated body: {} of {need} bytes", body.len()));
    }
    let primitives = body[..need]
        .chunks_exact(stride.max(1))
        .take(count)
        .map(|rec| {
            let mut v = [0.0; 14];
            for (out, &(off, wide)) in v.iter_mut().zip(&slots) {
                *out = if wide {
                    f64::from_le_bytes(rec[off..off + 8].try_into().unwrap())
                } else {
                    f32::from_le_bytes(rec[off..off + 4].try_into().unwrap()) as f64
                };
            }
            from_values(&v)
        })
        .collect();
    Ok(GaussianField { primitives })
}

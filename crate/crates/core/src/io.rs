//! File formats: Middlebury `.flo`, raw depth, PNG and binary PLY.

use std::fs;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::correspondence::FlowField2D;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, GaussianCloud, Quaternion};
use crate::image::ImageBuf;

pub const FLO_MAGIC: f32 = 202021.25;
pub const DEPTH_MAGIC: &[u8; 4] = b"DPTH";
/// Stored in `.flo` files for invalid pixels; readers treat anything above
/// 1e9 in magnitude as unknown.
const FLO_UNKNOWN: f32 = 1e10;

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Domain(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn encode_flo(flow: &FlowField2D) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.data.len());
    out.extend(FLO_MAGIC.to_le_bytes());
    out.extend((flow.width as i32).to_le_bytes());
    out.extend((flow.height as i32).to_le_bytes());
    for (f, &ok) in flow.data.iter().zip(&flow.valid) {
        let (u, v) = if ok { (f[0] as f32, f[1] as f32) } else { (FLO_UNKNOWN, FLO_UNKNOWN) };
        out.extend(u.to_le_bytes());
        out.extend(v.to_le_bytes());
    }
    out
}

pub fn decode_flo(b: &[u8]) -> Result<FlowField2D> {
    if b.len() < 12 {
        return Err(Error::Format("flo file shorter than its header".into()));
    }
    if f32_at(b, 0).to_bits() != FLO_MAGIC.to_bits() {
        return Err(Error::Format("bad .flo magic".into()));
    }
    let w = i32::from_le_bytes([b[4], b[5], b[6], b[7]]);
    let h = i32::from_le_bytes([b[8], b[9], b[10], b[11]]);
    if w < 1 || h < 1 {
        return Err(Error::Format(format!("bad .flo size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if b.len() != 12 + 8 * w * h {
        return Err(Error::Format(format!(
            ".flo payload is {} bytes, expected {}",
            b.len() - 12,
            8 * w * h
        )));
    }
    let mut data = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let u = f32_at(b, 12 + 8 * i);
        let v = f32_at(b, 16 + 8 * i);
        let ok = u.is_finite() && v.is_finite() && u.abs() <= 1e9 && v.abs() <= 1e9;
        data.push([u as f64, v as f64]);
        valid.push(ok);
    }
    Ok(FlowField2D {
        width: w,
        height: h,
        data,
        valid,
    })
}

pub fn write_flo(path: &Path, flow: &FlowField2D) -> Result<()> {
    atomic_write(path, &encode_flo(flow))
}

pub fn read_flo(path: &Path) -> Result<FlowField2D> {
    decode_flo(&fs::read(path)?)
}

/// 16-byte header (`DPTH`, width, height, zero padding) then f32 values.
pub fn encode_depth(depth: &ImageBuf) -> Result<Vec<u8>> {
    if depth.channels != 1 {
        return Err(Error::Domain("depth maps have one channel".into()));
    }
    let mut out = Vec::with_capacity(16 + 4 * depth.data.len());
    out.extend(DEPTH_MAGIC);
    out.extend((depth.width as u32).to_le_bytes());
    out.extend((depth.height as u32).to_le_bytes());
    out.extend([0u8; 4]);
    for &d in &depth.data {
        out.extend((d as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_depth(b: &[u8]) -> Result<ImageBuf> {
    if b.len() < 16 || &b[..4] != DEPTH_MAGIC {
        return Err(Error::Format("missing DPTH header".into()));
    }
    let (w, h) = (u32_at(b, 4) as usize, u32_at(b, 8) as usize);
    if b.len() != 16 + 4 * w * h {
        return Err(Error::Format(format!("depth payload does not match {w}x{h}")));
    }
    let data = (0..w * h).map(|i| f32_at(b, 16 + 4 * i) as f64).collect();
    ImageBuf::from_vec(w, h, 1, data)
}

pub fn write_depth(path: &Path, depth: &ImageBuf) -> Result<()> {
    atomic_write(path, &encode_depth(depth)?)
}

pub fn read_depth(path: &Path) -> Result<ImageBuf> {
    decode_depth(&fs::read(path)?)
}

/// 8-bit PNG of a 1- or 3-channel image with values in [0, 1].
pub fn encode_png(img: &ImageBuf) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::Domain(format!("cannot write a {c}-channel PNG"))),
    };
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        &bytes,
        img.width as u32,
        img.height as u32,
        color,
    )?;
    Ok(out)
}

pub fn write_png(path: &Path, img: &ImageBuf) -> Result<()> {
    atomic_write(path, &encode_png(img)?)
}

/// Reads a PNG as RGB in [0, 1].
pub fn read_png(path: &Path) -> Result<ImageBuf> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    ImageBuf::from_vec(
        w as usize,
        h as usize,
        3,
        img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
    )
}

/// Property names in file order for an SH degree.
pub fn ply_properties(sh_degree: usize) -> Vec<String> {
    let mut p: Vec<String> = ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "scale_2", "opacity"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    p.extend((0..3).map(|i| format!("f_dc_{i}")));
    if sh_degree == 1 {
        p.extend((0..9).map(|i| format!("f_rest_{i}")));
    }
    p
}

/// Binary little-endian PLY; `f_rest` is stored channel-major.
pub fn encode_ply(cloud: &GaussianCloud) -> Result<Vec<u8>> {
    let deg = cloud.sh_degree();
    if cloud.gaussians.iter().any(|g| g.sh_degree() != deg) {
        return Err(Error::Domain("mixed SH degrees in one cloud".into()));
    }
    let props = ply_properties(deg);
    let mut out = Vec::new();
    write!(out, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len())?;
    for p in &props {
        writeln!(out, "property double {p}")?;
    }
    out.extend(b"end_header\n");
    for g in &cloud.gaussians {
        let mut vals: Vec<f64> = Vec::with_capacity(props.len());
        vals.extend(g.center);
        vals.extend(g.rotation.to_array());
        vals.extend(g.log_scale);
        vals.push(g.opacity_logit);
        vals.extend(g.sh[0]);
        if deg == 1 {
            for c in 0..3 {
                for k in 1..4 {
                    vals.push(g.sh[k][c]);
                }
            }
        }
        for v in vals {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_ply(b: &[u8]) -> Result<GaussianCloud> {
    let mut r = b;
    let mut line = String::new();
    let mut next = |r: &mut &[u8]| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("PLY header ended early".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next(&mut r)? != "ply" {
        return Err(Error::Format("not a PLY file".into()));
    }
    if next(&mut r)? != "format binary_little_endian 1.0" {
        return Err(Error::Format("only binary little-endian PLY is supported".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let l = next(&mut r)?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| Error::Format(format!("vertex count: {e}")))?)
            }
            ["property", "double", name] => props.push(name.to_string()),
            ["comment", ..] => {}
            _ => return Err(Error::Format(format!("unexpected PLY header line '{l}'"))),
        }
    }
    let n = count.ok_or_else(|| Error::Format("PLY lacks a vertex element".into()))?;
    let deg = if props.len() == ply_properties(1).len() { 1 } else { 0 };
    let want = ply_properties(deg);
    if props != want {
        let missing: Vec<&String> = want.iter().filter(|p| !props.contains(p)).collect();
        return Err(Error::Format(format!("PLY properties differ from the schema; missing {missing:?}")));
    }
    let stride = props.len();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != n * stride * 8 {
        return Err(Error::Format(format!(
            "PLY payload is {} bytes, expected {}",
            payload.len(),
            n * stride * 8
        )));
    }
    let f = |i: usize| {
        let mut a = [0u8; 8];
        a.copy_from_slice(&payload[8 * i..8 * i + 8]);
        f64::from_le_bytes(a)
    };
    let mut gs = Vec::with_capacity(n);
    for i in 0..n {
        let v: Vec<f64> = (0..stride).map(|k| f(i * stride + k)).collect();
        let mut sh = vec![[v[11], v[12], v[13]]];
        if deg == 1 {
            for k in 1..4 {
                sh.push([v[14 + k - 1], v[17 + k - 1], v[20 + k - 1]]);
            }
        }
        gs.push(Gaussian3D {
            center: [v[0], v[1], v[2]],
            rotation: Quaternion::new(v[3], v[4], v[5], v[6])?,
            log_scale: [v[7], v[8], v[9]],
            opacity_logit: v[10],
            sh,
            confidence: Vec::new(),
        });
    }
    Ok(GaussianCloud::new(gs))
}

pub fn save_cloud(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    atomic_write(path, &encode_ply(cloud)?)
}

pub fn load_cloud(path: &Path) -> Result<GaussianCloud> {
    decode_ply(&fs::read(path)?)
}

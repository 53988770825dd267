//! On-disk formats: PLY point clouds, cut-map and checkpoint containers,
//! pose JSON and PNG images.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use avatar_core::body::Pose;
use avatar_core::cutmap::{CutMap, Label, Render};
use avatar_core::nn::Param;
use avatar_core::trainer::TrainConfig;
use avatar_core::{BaryRecord, PointCloudN, Vec3};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| AppError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| AppError::format(path, e.to_string()))
}

// ---------------------------------------------------------------- PLY

/// Writes a binary little-endian PLY with double-precision positions and,
/// when present, normals.
pub fn write_ply(path: &Path, cloud: &PointCloudN) -> Result<()> {
    let mut out = Vec::with_capacity(64 + cloud.len() * 48);
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len());
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals.is_some() {
        header.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    header.push_str("end_header\n");
    out.extend_from_slice(header.as_bytes());
    for i in 0..cloud.len() {
        for v in cloud.points[i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(n) = &cloud.normals {
            for v in n[i] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    write_bytes(path, &out)
}

#[derive(Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], big: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(&b[..$n]);
                (if big { <$t>::from_be_bytes(a) } else { <$t>::from_le_bytes(a) }) as f64
            }};
        }
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => num!(i16, 2),
            Scalar::U16 => num!(u16, 2),
            Scalar::I32 => num!(i32, 4),
            Scalar::U32 => num!(u32, 4),
            Scalar::F32 => num!(f32, 4),
            Scalar::F64 => num!(f64, 8),
        }
    }
}

/// Reads the vertex element of a PLY file (ASCII or binary). Only scalar
/// vertex properties are supported; `x y z` are required, `nx ny nz` optional.
pub fn read_ply(path: &Path) -> Result<PointCloudN> {
    let file = fs::File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |m: &str| AppError::format(path, m.to_string());
    let mut line = String::new();
    let next_line = |reader: &mut BufReader<fs::File>, line: &mut String| -> Result<()> {
        line.clear();
        if reader.read_line(line).map_err(|e| AppError::io(path, e))? == 0 {
            return Err(AppError::format(path, "truncated PLY header"));
        }
        Ok(())
    };
    next_line(&mut reader, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(bad("missing `ply` magic"));
    }
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    loop {
        next_line(&mut reader, &mut line)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", f, _] => format = Some(f.to_string()),
            ["element", name, n] => {
                let n: usize = n.parse().map_err(|_| bad("bad element count"))?;
                if *name == "vertex" {
                    in_vertex = true;
                    count = Some(n);
                } else {
                    if count.is_none() && n > 0 {
                        return Err(bad("elements before `vertex` are not supported"));
                    }
                    in_vertex = false;
                }
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list properties on vertices are not supported")),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| bad("unknown property type"))?;
                props.push((name.to_string(), s));
            }
            _ => {}
        }
    }
    let n = count.ok_or_else(|| bad("no vertex element"))?;
    let col = |name: &str| props.iter().position(|(p, _)| p == name);
    let (xi, yi, zi) = match (col("x"), col("y"), col("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(bad("vertex element lacks x/y/z")),
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    match format.as_deref() {
        Some("ascii") => {
            for _ in 0..n {
                next_line(&mut reader, &mut line)?;
                let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
                let vals = vals.map_err(|_| bad("bad ASCII vertex row"))?;
                if vals.len() < props.len() {
                    return Err(bad("short ASCII vertex row"));
                }
                rows.push(vals);
            }
        }
        Some(f @ ("binary_little_endian" | "binary_big_endian")) => {
            let big = f == "binary_big_endian";
            let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
            let mut buf = vec![0u8; stride * n];
            reader.read_exact(&mut buf).map_err(|_| bad("truncated PLY body"))?;
            for r in 0..n {
                let mut off = r * stride;
                let mut vals = Vec::with_capacity(props.len());
                for (_, s) in &props {
                    vals.push(s.decode(&buf[off..], big));
                    off += s.size();
                }
                rows.push(vals);
            }
        }
        _ => return Err(bad("unsupported PLY format")),
    }
    let points: Vec<Vec3> = rows.iter().map(|r| [r[xi], r[yi], r[zi]]).collect();
    let normals = normal_cols.map(|(a, b, c)| rows.iter().map(|r| [r[a], r[b], r[c]]).collect());
    let cloud = PointCloudN { points, normals };
    cloud.validate().map_err(|e| AppError::format(path, e.to_string()))?;
    Ok(cloud)
}

// ---------------------------------------------------------------- containers

/// `magic | u64 header length | JSON header | payload`.
fn write_container<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    write_bytes(path, &out)
}

fn read_container<H: for<'de> Deserialize<'de>>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(AppError::format(path, format!("not a {} file", String::from_utf8_lossy(magic).trim())));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + len {
        return Err(AppError::format(path, "truncated header"));
    }
    let header = serde_json::from_slice(&bytes[16..16 + len]).map_err(|e| AppError::format(path, e.to_string()))?;
    Ok((header, bytes[16 + len..].to_vec()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

const CUTMAP_MAGIC: &[u8; 8] = b"AVCUTMAP";

#[derive(Debug, Serialize, Deserialize)]
struct CutMapHeader {
    version: u32,
    samples: usize,
    occluded: usize,
    /// `[unclothed, deformed, generated]`
    counts: [usize; 3],
}

/// Header, then one label byte per sample, then one record per sample
/// (`u32` face, 3×`u32` vertex ids, 3×`f64` weights, little-endian).
pub fn write_cutmap(path: &Path, cut: &CutMap) -> Result<()> {
    cut.validate()?;
    let header = CutMapHeader { version: 1, samples: cut.labels.len(), occluded: cut.occluded, counts: cut.counts() };
    let mut payload: Vec<u8> = cut.labels.iter().map(|l| *l as u8).collect();
    for b in &cut.sample_refs {
        payload.extend_from_slice(&b.face_index.to_le_bytes());
        for v in b.vertex_ids {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        for w in b.weights {
            payload.extend_from_slice(&w.to_le_bytes());
        }
    }
    write_container(path, CUTMAP_MAGIC, &header, &payload)
}

pub fn read_cutmap(path: &Path) -> Result<CutMap> {
    let (h, payload): (CutMapHeader, _) = read_container(path, CUTMAP_MAGIC)?;
    let short = || AppError::format(path, "truncated cut-map payload");
    let mut c = Cursor { bytes: &payload, pos: 0 };
    let raw = c.take(h.samples).ok_or_else(short)?;
    let labels = raw.iter().map(|b| Label::from_u8(*b)).collect::<avatar_core::Result<Vec<_>>>()?;
    let mut sample_refs = Vec::with_capacity(h.samples);
    for _ in 0..h.samples {
        let face_index = c.u32().ok_or_else(short)?;
        let vertex_ids = [c.u32().ok_or_else(short)?, c.u32().ok_or_else(short)?, c.u32().ok_or_else(short)?];
        let weights = [c.f64().ok_or_else(short)?, c.f64().ok_or_else(short)?, c.f64().ok_or_else(short)?];
        sample_refs.push(BaryRecord { face_index, weights, vertex_ids });
    }
    if c.pos != payload.len() {
        return Err(AppError::format(path, "trailing bytes after cut map"));
    }
    let cut = CutMap { labels, sample_refs, occluded: h.occluded };
    cut.validate()?;
    if cut.counts() != h.counts {
        return Err(AppError::format(path, "label counts disagree with the header"));
    }
    Ok(cut)
}

const CKPT_MAGIC: &[u8; 8] = b"AVCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub len: usize,
}

/// Checkpoint header: everything needed to rebuild the model before the
/// tensors are loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub epoch: usize,
    pub step: u64,
    pub config: TrainConfig,
    pub body_vertices: usize,
    /// Label counts of the (unmodified) cut map the model was trained with.
    pub cutmap_counts: [usize; 3],
    pub tensors: Vec<TensorEntry>,
}

/// Tensor payload: value, first and second Adam moments per tensor, as
/// little-endian `f64`.
pub fn write_checkpoint(path: &Path, manifest: &Manifest, params: &[Param]) -> Result<()> {
    let mut payload = Vec::new();
    for p in params {
        for buf in [&p.value, &p.m, &p.v] {
            for v in buf.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    write_container(path, CKPT_MAGIC, manifest, &payload)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(read_container(path, CKPT_MAGIC)?.0)
}

pub fn read_checkpoint(path: &Path) -> Result<(Manifest, Vec<Param>)> {
    let (manifest, payload): (Manifest, _) = read_container(path, CKPT_MAGIC)?;
    let short = || AppError::format(path, "truncated checkpoint payload");
    let mut c = Cursor { bytes: &payload, pos: 0 };
    let mut params = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let read = |c: &mut Cursor| -> Result<Vec<f64>> { (0..t.len).map(|_| c.f64().ok_or_else(short)).collect() };
        let value = read(&mut c)?;
        let m = read(&mut c)?;
        let v = read(&mut c)?;
        let mut p = Param::new(t.name.clone(), t.shape.clone(), value);
        p.m = m;
        p.v = v;
        params.push(p);
    }
    if c.pos != payload.len() {
        return Err(AppError::format(path, "trailing bytes after checkpoint tensors"));
    }
    Ok((manifest, params))
}

pub fn tensor_entries(params: &[Param]) -> Vec<TensorEntry> {
    params.iter().map(|p| TensorEntry { name: p.name.clone(), shape: p.shape.clone(), len: p.len() }).collect()
}

// ---------------------------------------------------------------- poses

/// Pose file: one axis-angle vector per joint plus the root translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub joint_names: Vec<String>,
    pub axis_angles: Vec<Vec3>,
    pub root_translation: Vec3,
}

impl PoseFile {
    pub fn to_pose(&self) -> Pose {
        Pose::from_axis_angle(&self.axis_angles, self.root_translation)
    }

    pub fn from_pose(pose: &Pose, joint_names: &[String]) -> Self {
        PoseFile {
            joint_names: joint_names.to_vec(),
            axis_angles: pose.joint_rotations.iter().map(avatar_core::linalg::matrix_to_axis_angle).collect(),
            root_translation: pose.root_translation,
        }
    }
}

pub fn read_pose(path: &Path, joint_names: &[String]) -> Result<Pose> {
    let f: PoseFile = read_json(path)?;
    if f.joint_names != joint_names || f.axis_angles.len() != joint_names.len() {
        return Err(AppError::format(path, "pose joints do not match the body"));
    }
    let pose = f.to_pose();
    pose.validate(joint_names.len())?;
    Ok(pose)
}

// ---------------------------------------------------------------- images

fn encode_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| AppError::format(path, e.to_string()))?;
        w.write_image_data(data).map_err(|e| AppError::format(path, e.to_string()))?;
    }
    write_bytes(path, &out)
}

/// 1-channel PNG; true pixels are 255.
pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let data: Vec<u8> = mask.iter().map(|m| if *m { 255 } else { 0 }).collect();
    encode_png(path, width, height, png::ColorType::Grayscale, &data)
}

/// Reads a mask PNG; pixels at or above mid-gray (any channel average) are true.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let file = fs::File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| AppError::format(path, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| AppError::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| AppError::format(path, e.to_string()))?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let color_channels = if matches!(info.color_type, png::ColorType::GrayscaleAlpha | png::ColorType::Rgba) { channels - 1 } else { channels };
    let mask = (0..w * h)
        .map(|i| {
            let px = &buf[i * channels..i * channels + color_channels];
            let avg = px.iter().map(|v| *v as u32).sum::<u32>() / color_channels as u32;
            avg >= 128
        })
        .collect();
    Ok((w, h, mask))
}

pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<()> {
    let data: Vec<u8> = rgb.iter().flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)).collect();
    encode_png(path, width, height, png::ColorType::Rgb, &data)
}

pub fn write_render(path: &Path, render: &Render) -> Result<()> {
    write_rgb(path, render.width, render.height, &render.rgb)
}

/// Appends JSON lines to a log file.
pub struct JsonLog {
    file: fs::File,
    path: std::path::PathBuf,
}

impl JsonLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
        let file = fs::File::create(path).map_err(|e| AppError::io(path, e))?;
        Ok(JsonLog { file, path: path.to_path_buf() })
    }

    pub fn append<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let mut line = serde_json::to_vec(value)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| AppError::io(&self.path, e))
    }
}

//! Binary little-endian PLY for Gaussian scenes, plus a small reader for
//! the single-element files this crate emits.

use serde::{Deserialize, Serialize};

use super::{ActivationConfig, GaussianScene, RawGaussian, SceneNormalization};
use crate::error::{Error, Result};
use crate::linalg::Vec3;

const FLOAT_PROPS: [&str; 17] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
    "rot_3", "offset_0", "offset_1", "offset_2",
];

/// JSON sidecar written next to a scene PLY.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub normalization: SceneNormalization,
    pub anchor_count: usize,
    pub gaussians_per_anchor: usize,
    pub activation: ActivationConfig,
    pub anchors: Vec<Vec3>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Parsed vertex element, column-major.
#[derive(Debug, Clone)]
pub struct PlyTable {
    pub comments: Vec<String>,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl PlyTable {
    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::Ply(format!("missing vertex property '{name}'")))
    }
}

/// Parses a binary little-endian PLY containing a single `vertex` element of scalars.
pub fn parse(bytes: &[u8]) -> Result<PlyTable> {
    let end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| Error::Ply("header: missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Ply("header: not UTF-8".into()))?;
    let body = &bytes[end + 11..];
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::Ply("header: missing 'ply' magic".into()));
    }
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut comments = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", other, ..] => return Err(Error::Ply(format!("header: unsupported format '{other}'"))),
            ["comment", ..] => comments.push(line["comment".len()..].trim().to_string()),
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(Error::Ply("header: duplicate vertex element".into()));
                }
                count = Some(n.parse::<usize>().map_err(|_| Error::Ply(format!("header: bad vertex count '{n}'")))?);
            }
            ["element", name, _] => return Err(Error::Ply(format!("header: unexpected element '{name}'"))),
            ["property", "list", ..] => return Err(Error::Ply("header: list properties are not supported".into())),
            ["property", ty, name] => {
                let s = Scalar::parse(ty).ok_or_else(|| Error::Ply(format!("header: unknown type '{ty}' for '{name}'")))?;
                props.push((name.to_string(), s));
            }
            [] => {}
            _ => return Err(Error::Ply(format!("header: cannot parse line '{line}'"))),
        }
    }
    if !format_ok {
        return Err(Error::Ply("header: missing format line".into()));
    }
    let count = count.ok_or_else(|| Error::Ply("header: missing vertex element".into()))?;
    let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
    if body.len() != stride * count {
        return Err(Error::Ply(format!("body: expected {} bytes for {} vertices, found {}", stride * count, count, body.len())));
    }
    let mut columns = vec![Vec::with_capacity(count); props.len()];
    for row in body.chunks_exact(stride.max(1)).take(count) {
        let mut off = 0;
        for (c, (_, s)) in props.iter().enumerate() {
            columns[c].push(s.read(&row[off..]));
            off += s.size();
        }
    }
    Ok(PlyTable { comments, names: props.into_iter().map(|(n, _)| n).collect(), columns })
}

pub fn write_ply(scene: &GaussianScene) -> Result<(Vec<u8>, SceneSidecar)> {
    if scene.num_gs() == 0 {
        return Err(Error::Ply("refusing to write an empty scene".into()));
    }
    let sidecar = SceneSidecar {
        normalization: scene.normalization,
        anchor_count: scene.num_anchors(),
        gaussians_per_anchor: scene.gaussians_per_anchor,
        activation: scene.activation,
        anchors: scene.anchors.clone(),
    };
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!(
        "comment normalization {}\n",
        serde_json::to_string(&scene.normalization).map_err(Error::Json)?
    ));
    header.push_str(&format!("element vertex {}\n", scene.num_gs()));
    for p in FLOAT_PROPS {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("property uint anchor_id\nend_header\n");
    let mut out = header.into_bytes();
    for (g, raw) in scene.gaussians().iter().zip(&scene.raw) {
        let vals = [
            g.mean[0], g.mean[1], g.mean[2], raw.sh[0], raw.sh[1], raw.sh[2], raw.opacity, raw.scale[0], raw.scale[1],
            raw.scale[2], raw.rotation[0], raw.rotation[1], raw.rotation[2], raw.rotation[3], raw.offset[0],
            raw.offset[1], raw.offset[2],
        ];
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(g.anchor_id as u32).to_le_bytes());
    }
    Ok((out, sidecar))
}

pub fn read_ply(bytes: &[u8], sidecar: &SceneSidecar) -> Result<GaussianScene> {
    let table = parse(bytes)?;
    if table.is_empty() {
        return Err(Error::Ply("scene has no vertices".into()));
    }
    let k = sidecar.gaussians_per_anchor;
    if k == 0 || table.len() != sidecar.anchor_count * k || sidecar.anchors.len() != sidecar.anchor_count {
        return Err(Error::Ply(format!(
            "vertex count {} does not match {} anchors x {} gaussians",
            table.len(),
            sidecar.anchor_count,
            k
        )));
    }
    let cols: Vec<&[f64]> = FLOAT_PROPS.iter().map(|p| table.column(p)).collect::<Result<_>>()?;
    let ids = table.column("anchor_id")?;
    let mut raw = Vec::with_capacity(table.len());
    for j in 0..table.len() {
        let v: Vec<f64> = cols.iter().map(|c| c[j]).collect();
        if let Some(p) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::Ply(format!("vertex {j}: non-finite '{}'", FLOAT_PROPS[p])));
        }
        if ids[j] as usize != j / k {
            return Err(Error::Ply(format!("vertex {j}: anchor_id {} breaks anchor-major order", ids[j])));
        }
        raw.push(RawGaussian {
            offset: [v[14], v[15], v[16]],
            opacity: v[6],
            scale: [v[7], v[8], v[9]],
            rotation: [v[10], v[11], v[12], v[13]],
            sh: [v[3], v[4], v[5]],
        });
    }
    GaussianScene::new(sidecar.anchors.clone(), raw, k, sidecar.normalization, sidecar.activation)
}

pub fn save(scene: &GaussianScene, path: &std::path::Path) -> Result<()> {
    let (bytes, sidecar) = write_ply(scene)?;
    std::fs::write(path, bytes)?;
    std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<GaussianScene> {
    let sidecar: SceneSidecar = serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
    read_ply(&std::fs::read(path)?, &sidecar)
}

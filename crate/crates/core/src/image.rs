//! RGB images and depth maps plus their on-disk formats (8-bit PNG, PFM,
//! raw float32 with a JSON sidecar).

use std::io::{BufRead, Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major H×W×3 image with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c];
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        acc.map(|a| a / n)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Shape(format!("{} bytes for a {}x{} RGB image", bytes.len(), width, height)));
        }
        Ok(Self { width, height, data: bytes.iter().map(|&b| b as f64 / 255.0).collect() })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
            writer.write_image_data(&self.to_rgb8()).map_err(|e| Error::Png(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let mut dec = png::Decoder::new(Cursor::new(bytes));
        dec.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let size = reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => return Err(Error::Png("unexpanded palette image".into())),
        };
        let mut rgb = Vec::with_capacity(w * h * 3);
        for px in buf[..w * h * channels].chunks_exact(channels) {
            match channels {
                1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
        Self::from_rgb8(w, h, &rgb)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        Self::decode_png(&std::fs::read(path)?)
    }
}

/// Row-major H×W depth map in world units; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawDepthHeader {
    pub width: usize,
    pub height: usize,
}

impl DepthMap {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        self.data[y * self.width + x] = d;
    }

    /// Little-endian PFM (`Pf`, negative scale), rows stored bottom to top.
    pub fn encode_pfm(&self) -> Vec<u8> {
        let mut out = format!("Pf\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        out.reserve(self.data.len() * 4);
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                out.extend_from_slice(&(self.get(x, y) as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode_pfm(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut line = String::new();
        let mut next_token_line = |cur: &mut Cursor<&[u8]>| -> Result<String> {
            line.clear();
            cur.read_line(&mut line).map_err(|e| Error::Pfm(e.to_string()))?;
            Ok(line.trim().to_string())
        };
        let magic = next_token_line(&mut cur)?;
        if magic != "Pf" {
            return Err(Error::Pfm(format!("expected single-channel 'Pf' header, found {magic:?}")));
        }
        let dims = next_token_line(&mut cur)?;
        let mut it = dims.split_whitespace().map(|t| t.parse::<usize>());
        let (w, h) = match (it.next(), it.next()) {
            (Some(Ok(w)), Some(Ok(h))) => (w, h),
            _ => return Err(Error::Pfm(format!("bad dimensions line {dims:?}"))),
        };
        let scale: f64 = next_token_line(&mut cur)?.parse().map_err(|_| Error::Pfm("bad scale line".into()))?;
        let little = scale < 0.0;
        let mut raw = Vec::new();
        cur.read_to_end(&mut raw)?;
        if raw.len() != w * h * 4 {
            return Err(Error::Pfm(format!("expected {} data bytes, found {}", w * h * 4, raw.len())));
        }
        let mut depth = Self::filled(w, h, 0.0);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            let (x, row) = (i % w, i / w);
            depth.set(x, h - 1 - row, v as f64);
        }
        Ok(depth)
    }

    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_pfm())?;
        Ok(())
    }

    pub fn read_pfm(path: &Path) -> Result<Self> {
        Self::decode_pfm(&std::fs::read(path)?)
    }

    /// Raw little-endian float32, row-major, dimensions in a JSON sidecar.
    pub fn decode_raw(bytes: &[u8], header: &RawDepthHeader) -> Result<Self> {
        let (w, h) = (header.width, header.height);
        if bytes.len() != w * h * 4 {
            return Err(Error::Shape(format!("raw depth has {} bytes, sidecar declares {}x{}", bytes.len(), w, h)));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Self { width: w, height: h, data })
    }

    /// Loads `path` as PFM, or as raw float32 when a `<path>.json` sidecar exists.
    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = path.with_extension(format!(
            "{}.json",
            path.extension().and_then(|e| e.to_str()).unwrap_or("")
        ));
        if path.extension().and_then(|e| e.to_str()) != Some("pfm") && sidecar.exists() {
            let header: RawDepthHeader = serde_json::from_slice(&std::fs::read(&sidecar)?)?;
            return Self::decode_raw(&std::fs::read(path)?, &header);
        }
        Self::read_pfm(path)
    }
}

//! Planar float container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  "PSFLT\0\0\x01"            8 bytes
//! width, height, planes              u32 each
//! tag                                u16 length + UTF-8
//! labels[planes]                     u16 length + UTF-8 each
//! meta count                         u32
//! meta[count]                        u16 length + UTF-8 key, f64 value
//! payload                            f32 × width·height·planes, plane-major, rows top to bottom
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::envlight::{EnvCubeMipmap, FACES};
use crate::polardr::{Component, StokesImage};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PSFLT\0\0\x01";
const CHANNELS: [&str; 3] = ["r", "g", "b"];

/// A stack of equally sized float planes with labels and numeric metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub tag: String,
    pub labels: Vec<String>,
    pub meta: Vec<(String, f64)>,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, tag: &str) -> Self {
        Self {
            width,
            height,
            tag: tag.to_string(),
            labels: Vec::new(),
            meta: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn planes(&self) -> usize {
        self.labels.len()
    }

    fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn push_plane(&mut self, label: &str, values: &[f64]) -> Result<()> {
        if values.len() != self.plane_len() {
            return Err(Error::mismatch(self.plane_len(), values.len()));
        }
        if let Some(i) = values.iter().position(|v| !(*v as f32).is_finite()) {
            return Err(Error::Numeric(format!(
                "plane `{label}` value {} at index {i} is not a finite f32",
                values[i]
            )));
        }
        self.labels.push(label.to_string());
        self.data.extend(values.iter().map(|&v| v as f32));
        Ok(())
    }

    pub fn plane(&self, i: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn plane_by_label(&self, label: &str) -> Result<&[f32]> {
        let i = self
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Format(format!("missing plane `{label}`")))?;
        Ok(self.plane(i))
    }

    pub fn meta_value(&self, key: &str) -> Option<f64> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn set_meta(&mut self, key: &str, value: f64) {
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        if self.data.len() != self.plane_len() * self.planes() {
            return Err(Error::mismatch(self.plane_len() * self.planes(), self.data.len()));
        }
        let mut buf = Vec::with_capacity(64 + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        for v in [self.width, self.height, self.planes()] {
            buf.extend_from_slice(&u32_of(v)?.to_le_bytes());
        }
        put_str(&mut buf, &self.tag)?;
        for l in &self.labels {
            put_str(&mut buf, l)?;
        }
        buf.extend_from_slice(&u32_of(self.meta.len())?.to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut buf, k)?;
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a float image file".into()));
        }
        let width = read_u32(r)? as usize;
        let height = read_u32(r)? as usize;
        let planes = read_u32(r)? as usize;
        let tag = read_str(r)?;
        let labels = (0..planes).map(|_| read_str(r)).collect::<Result<Vec<_>>>()?;
        let count = read_u32(r)? as usize;
        let mut meta = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let k = read_str(r)?;
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            meta.push((k, f64::from_le_bytes(b)));
        }
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(planes))
            .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * 4 {
            return Err(Error::Format(format!(
                "payload is {} bytes, header implies {}",
                bytes.len(),
                n * 4
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("payload holds non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            tag,
            labels,
            meta,
            data,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = Vec::new();
        self.write_to(&mut v)?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Interleave three planes `prefix.r/g/b` into RGB triples.
    pub fn rgb_planes(&self, prefix: &str) -> Result<Vec<[f64; 3]>> {
        let p: Vec<&[f32]> = CHANNELS
            .iter()
            .map(|c| self.plane_by_label(&format!("{prefix}.{c}")))
            .collect::<Result<_>>()?;
        Ok((0..self.plane_len())
            .map(|i| [p[0][i] as f64, p[1][i] as f64, p[2][i] as f64])
            .collect())
    }

    /// Append three planes `prefix.r/g/b`.
    pub fn push_rgb(&mut self, prefix: &str, values: &[[f64; 3]]) -> Result<()> {
        for (c, name) in CHANNELS.iter().enumerate() {
            let plane: Vec<f64> = values.iter().map(|v| v[c]).collect();
            self.push_plane(&format!("{prefix}.{name}"), &plane)?;
        }
        Ok(())
    }
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit the header")))
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Format("header string too long".into()))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    let mut s = vec![0u8; u16::from_le_bytes(b) as usize];
    r.read_exact(&mut s)?;
    String::from_utf8(s).map_err(|_| Error::Format("header string is not UTF-8".into()))
}

/// Stokes image as nine planes `s0.r … s2.b`, tagged with its component.
pub fn stokes_to_file(img: &StokesImage) -> Result<FloatImage> {
    let mut f = FloatImage::new(img.width, img.height, img.component.name());
    f.push_rgb("s0", &img.s0)?;
    f.push_rgb("s1", &img.s1)?;
    f.push_rgb("s2", &img.s2)?;
    Ok(f)
}

pub fn stokes_from_file(f: &FloatImage) -> Result<StokesImage> {
    let component = Component::parse(&f.tag)
        .ok_or_else(|| Error::Format(format!("unknown Stokes component `{}`", f.tag)))?;
    Ok(StokesImage {
        width: f.width,
        height: f.height,
        component,
        s0: f.rgb_planes("s0")?,
        s1: f.rgb_planes("s1")?,
        s2: f.rgb_planes("s2")?,
    })
}

/// Environment latents, one plane per face and channel, with the radiance
/// scale in the metadata.
pub fn env_to_file(env: &EnvCubeMipmap) -> Result<FloatImage> {
    let res = env.base_resolution;
    let mut f = FloatImage::new(res, res, "envmap");
    for face in 0..FACES {
        let span = &env.latents[face * res * res..(face + 1) * res * res];
        f.push_rgb(&format!("face{face}"), span)?;
    }
    f.set_meta("scale", env.scale);
    Ok(f)
}

pub fn env_from_file(f: &FloatImage) -> Result<EnvCubeMipmap> {
    if f.tag != "envmap" || f.width != f.height {
        return Err(Error::Format("not an environment map file".into()));
    }
    let mut latents = Vec::with_capacity(FACES * f.width * f.width);
    for face in 0..FACES {
        latents.extend(f.rgb_planes(&format!("face{face}"))?);
    }
    let scale = f.meta_value("scale").unwrap_or(1.0);
    EnvCubeMipmap::from_latents(f.width, latents, scale)
}

pub fn save_env(env: &EnvCubeMipmap, path: &Path) -> Result<()> {
    env_to_file(env)?.save(path)
}

pub fn load_env(path: &Path) -> Result<EnvCubeMipmap> {
    env_from_file(&FloatImage::load(path)?)
}

pub fn save_stokes(img: &StokesImage, path: &Path) -> Result<()> {
    stokes_to_file(img)?.save(path)
}

pub fn load_stokes(path: &Path) -> Result<StokesImage> {
    stokes_from_file(&FloatImage::load(path)?)
}

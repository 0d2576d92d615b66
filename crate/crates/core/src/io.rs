//! FMAP feature files and binary PPM images.
//!
//! FMAP layout: `b"FMAP"`, version byte `0x01`, little-endian `u32` header
//! length, UTF-8 JSON header `{"dtype":"f32","shape":[H,W,C],"layout":"row-major"}`,
//! then `H·W·C` little-endian `f32` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::FeatureMap;

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u8 = 0x01;

#[derive(Serialize, Deserialize)]
struct FmapHeader {
    dtype: String,
    shape: Vec<i64>,
    layout: String,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

pub fn encode_fmap(map: &FeatureMap) -> Vec<u8> {
    let (h, w, c) = map.shape();
    let header = FmapHeader {
        dtype: "f32".into(),
        shape: vec![h as i64, w as i64, c as i64],
        layout: "row-major".into(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(9 + header.len() + map.data().len() * 4);
    out.extend_from_slice(FMAP_MAGIC);
    out.push(FMAP_VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &v in map.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_fmap(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < 9 || &bytes[..4] != FMAP_MAGIC {
        return format_err("missing FMAP magic");
    }
    if bytes[4] != FMAP_VERSION {
        return format_err(format!("unsupported FMAP version {}", bytes[4]));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let body = &bytes[9..];
    if body.len() < header_len {
        return format_err("truncated FMAP header");
    }
    let header: FmapHeader = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Format(format!("bad FMAP header: {e}")))?;
    if header.dtype != "f32" {
        return format_err(format!("unsupported dtype {:?}", header.dtype));
    }
    if header.layout != "row-major" {
        return format_err(format!("unsupported layout {:?}", header.layout));
    }
    let &[h, w, c] = header.shape.as_slice() else {
        return format_err(format!("shape must have 3 entries, got {:?}", header.shape));
    };
    if h <= 0 || w <= 0 || c <= 0 {
        return format_err(format!("non-positive dimension in shape {:?}", header.shape));
    }
    let count = (h as u64)
        .checked_mul(w as u64)
        .and_then(|n| n.checked_mul(c as u64))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::Format(format!("shape {:?} overflows", header.shape)))?;
    let payload = &body[header_len..];
    if payload.len() != count {
        return format_err(format!(
            "payload has {} bytes, shape requires {count}",
            payload.len()
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    FeatureMap::new(h as usize, w as usize, c as usize, data)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn write_fmap(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    fs::write(path, encode_fmap(map))?;
    Ok(())
}

pub fn read_fmap(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_fmap(&fs::read(path)?)
}

/// Encodes a 3-channel map with values in `[0, 1]` as binary P6 (maxval 255).
/// Values outside the range are clamped.
pub fn encode_ppm(image: &FeatureMap) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!(
            "PPM needs 3 channels, got {}",
            image.channels()
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn decode_ppm(bytes: &[u8]) -> Result<FeatureMap> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return format_err("truncated PPM header");
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return format_err(format!("expected P6 magic, got {:?}", fields[0]));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PPM header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return format_err(format!("only maxval 255 is supported, got {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Format("PPM dimensions overflow".into()))?;
    if bytes.len() < pos + n {
        return format_err("truncated PPM raster");
    }
    let data = bytes[pos..pos + n]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    FeatureMap::new(h, w, 3, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_ppm(path: impl AsRef<Path>, image: &FeatureMap) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_ppm(&bytes)
}

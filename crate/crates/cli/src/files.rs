use std::fs;
use std::io::Write;
use std::path::Path;

use agglo_core::io::{read_fmap, read_ppm, write_fmap, write_ppm};
use agglo_core::{Error, FeatureMap, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn is_ppm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Reads a PPM image or an FMAP feature map, chosen by extension.
pub fn read_map(path: &Path) -> Result<FeatureMap> {
    log::debug!("reading {}", path.display());
    if is_ppm(path) {
        read_ppm(path)
    } else {
        read_fmap(path)
    }
}

pub fn write_map(path: &Path, map: &FeatureMap) -> Result<()> {
    log::debug!("writing {}", path.display());
    if is_ppm(path) {
        write_ppm(path, map)
    } else {
        write_fmap(path, map)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(Error::from)
}

/// Prints a result document on stdout as one line of JSON.
pub fn emit<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string(value)?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

pub fn round_to(v: f64, places: u32) -> f64 {
    if !v.is_finite() {
        return v;
    }
    let k = 10f64.powi(places as i32);
    (v * k).round() / k
}

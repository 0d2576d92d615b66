use std::process::ExitCode;

use agglo_core::{pca_project, FeatureMap, Result};
use serde_json::json;

use crate::cli::VizArgs;
use crate::files::{emit, read_map, write_map};

/// Zero channels appended up to three so the projection always has RGB.
fn pad_channels(map: &FeatureMap) -> Result<FeatureMap> {
    let c = map.channels();
    if c >= 3 {
        return Ok(map.clone());
    }
    log::warn!("{c}-channel map padded with zero channels for a 3-component projection");
    FeatureMap::from_fn(map.height(), map.width(), 3, |y, x, k| if k < c { map.get(y, x, k) } else { 0.0 })
}

fn upscale(map: &FeatureMap, s: usize) -> Result<FeatureMap> {
    if s == 1 {
        return Ok(map.clone());
    }
    FeatureMap::from_fn(map.height() * s, map.width() * s, map.channels(), |y, x, c| {
        map.get(y / s, x / s, c)
    })
}

pub fn run(args: VizArgs) -> Result<ExitCode> {
    let map = pad_channels(&read_map(&args.input)?)?;
    let proj = pca_project(&map, 3)?;
    if proj.degenerate {
        log::warn!("feature map has fewer than three distinct directions; flat components render mid-gray");
    }
    let img = upscale(&proj.map, args.scale as usize)?;
    write_map(&args.out, &img)?;
    emit(&json!({
        "shape": img.shape(),
        "eigenvalues": proj.eigenvalues,
        "degenerate": proj.degenerate,
        "out": args.out,
    }))?;
    Ok(ExitCode::SUCCESS)
}

use std::process::ExitCode;

use agglo_core::{Error, MosaicLayout, Result};
use serde_json::json;

use crate::cli::{LayoutArgs, MosaicCmd};
use crate::files::{create_dir, emit, read_json, read_map, write_json, write_map};

fn layout(a: &LayoutArgs) -> Result<MosaicLayout> {
    let l = MosaicLayout::layout_for(a.res, a.canvas, a.patch)?;
    Ok(match a.jitter_seed {
        Some(s) => l.with_jitter(s),
        None => l,
    })
}

fn describe(l: &MosaicLayout) -> serde_json::Value {
    json!({
        "canvas": l.canvas,
        "patch": l.patch,
        "k": l.k,
        "cell": l.cell,
        "sub": l.sub,
        "pad_before": l.pad_before,
        "pad_after": l.cell - l.sub - l.pad_before,
        "total_padding": l.total_padding(),
        "images_per_canvas": l.images_per_canvas(),
        "teacher_cost_ratio": l.teacher_cost_ratio(),
        "offsets": l.offsets,
    })
}

pub fn run(cmd: MosaicCmd) -> Result<ExitCode> {
    match cmd {
        MosaicCmd::Layout { layout: a, out } => {
            let l = layout(&a)?;
            if let Some(out) = &out {
                write_json(out, &l)?;
            }
            emit(&describe(&l))?;
        }
        MosaicCmd::Pack {
            layout: a,
            inputs,
            pad_value,
            out,
            layout_out,
        } => {
            let l = layout(&a)?;
            let images = inputs.iter().map(|p| read_map(p)).collect::<Result<Vec<_>>>()?;
            let canvas = l.pack(&images, pad_value)?;
            write_map(&out, &canvas)?;
            write_json(&layout_out, &l)?;
            emit(&json!({
                "images": images.len(),
                "shape": canvas.shape(),
                "out": out,
                "layout": layout_out,
            }))?;
        }
        MosaicCmd::Crop {
            features,
            layout: lp,
            count,
            out_dir,
        } => {
            let l: MosaicLayout = read_json(&lp)?;
            l.validate()?;
            let crops = l.unpack_features(&read_map(&features)?)?;
            let n = count.unwrap_or(crops.len());
            if n == 0 || n > crops.len() {
                return Err(Error::InvalidArgument(format!(
                    "--count must be in 1..={}, got {n}",
                    crops.len()
                )));
            }
            create_dir(&out_dir)?;
            let mut written = Vec::new();
            for (i, c) in crops.iter().take(n).enumerate() {
                let path = out_dir.join(format!("crop_{i}.fmap"));
                write_map(&path, c)?;
                written.push(path);
            }
            emit(&json!({ "crops": written, "tokens_per_crop": crops[0].num_tokens() }))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

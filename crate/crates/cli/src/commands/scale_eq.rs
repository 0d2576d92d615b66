use std::path::PathBuf;
use std::process::ExitCode;

use agglo_core::distill::{Teacher, TeacherSpec};
use agglo_core::scale_eq::{equivariance_suite, FeatureGenerator, Ladders, Tiled};
use agglo_core::synth::corpus;
use agglo_core::{scale_variance, Error, FeatureMap, Result};
use serde::Deserialize;
use serde_json::json;

use crate::cli::ScaleEqArgs;
use crate::files::{emit, read_json, read_map};

/// Image files, or a count of procedural images drawn from `--seed`.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Images {
    Count(usize),
    Files(Vec<PathBuf>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Suite {
    teacher: TeacherSpec,
    images: Images,
    /// A single ladder; replaces `ladders` with an empty coarse ladder.
    #[serde(default)]
    resolutions: Option<Vec<usize>>,
    #[serde(default)]
    ladders: Option<Ladders>,
    /// Run the teacher on tiles of this many pixels and stitch the grids.
    #[serde(default)]
    tile: Option<usize>,
}

pub fn run(args: ScaleEqArgs) -> Result<ExitCode> {
    let Some(path) = &args.suite else {
        let maps = args.inputs.iter().map(|p| read_map(p)).collect::<Result<Vec<_>>>()?;
        let v = scale_variance(&maps, args.direction)?;
        emit(&json!({ "scale_variance": v, "maps": maps.len(), "direction": args.direction }))?;
        return Ok(ExitCode::SUCCESS);
    };
    let manifest: Suite = read_json(path)?;
    let ladders = match (manifest.resolutions, manifest.ladders) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidArgument("give either resolutions or ladders, not both".into()));
        }
        (Some(fine), None) => Ladders { fine, coarse: Vec::new() },
        (None, Some(l)) => l,
        (None, None) => Ladders::new(64, 128, 8, 192),
    };
    let teacher = Teacher::new(manifest.teacher)?;
    let patch = |img: &FeatureMap| teacher.features(img).map(|o| o.patch);
    let tiled = manifest.tile.map(|tile| Tiled { inner: patch, tile });
    let generator: &dyn FeatureGenerator = match &tiled {
        Some(t) => t,
        None => &patch,
    };
    let result = match &manifest.images {
        Images::Count(n) => {
            let seed = args
                .seed
                .ok_or_else(|| Error::InvalidArgument("procedural images need --seed".into()))?;
            equivariance_suite(generator, &corpus(seed, *n), &ladders, args.direction)?
        }
        Images::Files(paths) => {
            let images = paths.iter().map(|p| read_map(p)).collect::<Result<Vec<_>>>()?;
            equivariance_suite(generator, &images, &ladders, args.direction)?
        }
    };
    emit(&json!({
        "teacher": teacher.id(),
        "tile": manifest.tile,
        "direction": args.direction,
        "ladders": ladders,
        "result": result,
    }))?;
    Ok(ExitCode::SUCCESS)
}

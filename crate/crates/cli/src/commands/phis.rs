use std::process::ExitCode;

use agglo_core::phis::{fidelity, fidelity_from_mse, fidelity_report};
use agglo_core::{Error, PhiSTransform, Result};
use serde::Deserialize;
use serde_json::json;

use crate::cli::{FidelityArgs, PhisCmd, TransformIo};
use crate::files::{emit, read_json, read_map, round_to, write_json, write_map};

pub fn run(cmd: PhisCmd) -> Result<ExitCode> {
    match cmd {
        PhisCmd::Fit {
            inputs,
            out,
            samples,
            seed,
        } => {
            let maps = inputs.iter().map(|p| read_map(p)).collect::<Result<Vec<_>>>()?;
            let t = match samples {
                Some(n) => PhiSTransform::fit_maps_sampled(&maps, n, seed.unwrap_or_default())?,
                None => PhiSTransform::fit_maps(&maps)?,
            };
            write_json(&out, &t)?;
            emit(&json!({
                "channels": t.channels,
                "phi": t.phi,
                "phi_sq": t.phi_sq(),
                "fitted_on": t.fitted_on,
                "out": out,
            }))?;
        }
        PhisCmd::Apply(io) => transform(io, false)?,
        PhisCmd::Invert(io) => transform(io, true)?,
        PhisCmd::Fidelity(args) => fidelity_cmd(args)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn load_transform(path: &std::path::Path) -> Result<PhiSTransform> {
    PhiSTransform::from_json(&std::fs::read_to_string(path)?)
}

fn transform(io: TransformIo, invert: bool) -> Result<()> {
    let t = load_transform(&io.transform)?;
    let map = read_map(&io.input)?;
    let out = if invert { t.invert(&map)? } else { t.apply(&map)? };
    write_map(&io.out, &out)?;
    emit(&json!({ "shape": out.shape(), "out": io.out }))
}

#[derive(Deserialize)]
struct Row {
    teacher: String,
    phi_sq: f64,
    mse: f64,
}

fn fidelity_cmd(a: FidelityArgs) -> Result<()> {
    let p = a.precision;
    if let Some(table) = &a.table {
        let rows: Vec<Row> = read_json(table)?;
        let report = fidelity_report(rows.into_iter().map(|r| (r.teacher, r.phi_sq, r.mse)))?;
        let per_teacher: Vec<_> = report
            .per_teacher
            .iter()
            .map(|r| {
                json!({
                    "teacher": r.teacher,
                    "phi_sq": r.phi_sq,
                    "mse": r.mse,
                    "fidelity": round_to(r.fidelity, p),
                })
            })
            .collect();
        return emit(&json!({
            "per_teacher": per_teacher,
            "geometric_mean": round_to(report.geometric_mean, p),
        }));
    }
    let phi_sq = match (a.phi_sq, &a.transform) {
        (Some(v), _) => v,
        (None, Some(path)) => load_transform(path)?.phi_sq(),
        (None, None) => {
            return Err(Error::InvalidArgument(
                "fidelity needs --phi-sq or --transform (or --table)".into(),
            ))
        }
    };
    if !(phi_sq > 0.0) {
        return Err(Error::InvalidArgument(format!("phi² must be positive, got {phi_sq}")));
    }
    let f = match (a.mse, &a.student, &a.teacher) {
        (Some(mse), _, _) if mse >= 0.0 => fidelity_from_mse(phi_sq, mse),
        (Some(mse), _, _) => return Err(Error::InvalidArgument(format!("MSE must be non-negative, got {mse}"))),
        (None, Some(s), Some(t)) => fidelity(phi_sq, &read_map(s)?, &read_map(t)?)?,
        _ => return Err(Error::InvalidArgument("fidelity needs --mse or --student with --teacher".into())),
    };
    emit(&json!({ "fidelity": round_to(f, p) }))
}

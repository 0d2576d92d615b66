use std::path::Path;
use std::process::ExitCode;

use agglo_core::tome::{merge, plan, reconstruction_error, stride_for_budget, unmerge};
use agglo_core::{Error, FeatureMap, MergePlan, Result, SinkLayout};
use serde_json::json;

use crate::cli::{MergeArgs, TomeCmd};
use crate::files::{emit, read_json, read_map, write_json, write_map};

fn resolve(m: &MergeArgs, rows: usize, cols: usize) -> Result<(SinkLayout, usize)> {
    let (mut layout, r) = match (m.budget, m.stride, m.r) {
        (Some(b), _, _) => stride_for_budget(rows, cols, b)?,
        (None, Some(s), r) => (SinkLayout::square(s), r.unwrap_or(0)),
        (None, None, _) => {
            return Err(Error::InvalidArgument("give --stride [--r] or --budget".into()));
        }
    };
    if let Some(o) = &m.offset {
        layout.offset_y = o[0];
        layout.offset_x = o[1];
    }
    Ok((layout, r))
}

fn load_plan(path: &Path) -> Result<MergePlan> {
    let p: MergePlan = read_json(path)?;
    p.validate()?;
    Ok(p)
}

fn plan_for(grid: &FeatureMap, criterion: Option<&Path>, m: &MergeArgs) -> Result<MergePlan> {
    let criterion = criterion.map(read_map).transpose()?;
    let (layout, r) = resolve(m, grid.height(), grid.width())?;
    plan(grid, criterion.as_ref(), layout, r)
}

pub fn run(cmd: TomeCmd) -> Result<ExitCode> {
    match cmd {
        TomeCmd::Plan {
            rows,
            cols,
            input,
            criterion,
            merge: m,
            out,
        } => {
            let grid = match (&input, &criterion) {
                (Some(p), _) => read_map(p)?,
                (None, Some(p)) => {
                    let c = read_map(p)?;
                    FeatureMap::zeros(c.height(), c.width(), 1)?
                }
                (None, None) => FeatureMap::zeros(rows.unwrap_or(0), cols.unwrap_or(0), 1)?,
            };
            if let (Some(r), Some(c)) = (rows, cols) {
                if (r, c) != (grid.height(), grid.width()) {
                    return Err(Error::Shape(format!(
                        "--rows/--cols {r}x{c} disagree with the {}x{} token grid",
                        grid.height(),
                        grid.width()
                    )));
                }
            }
            let p = plan_for(&grid, criterion.as_deref(), &m)?;
            if let Some(out) = &out {
                write_json(out, &p)?;
            }
            emit(&json!({
                "rows": p.rows,
                "cols": p.cols,
                "tokens_in": p.num_tokens(),
                "r": p.r,
                "survivors": p.survivors(),
                "layout": p.layout,
                "kept_order": p.kept_order,
                "assignment": p.assignment,
            }))?;
        }
        TomeCmd::Compress {
            input,
            out,
            plan: plan_out,
            criterion,
            merge: m,
        } => {
            let grid = read_map(&input)?;
            let p = plan_for(&grid, criterion.as_deref(), &m)?;
            let c = merge(&grid, &p)?;
            write_map(&out, &c.tokens)?;
            write_json(&plan_out, &p)?;
            emit(&json!({
                "tokens_in": p.num_tokens(),
                "survivors": c.counts.len(),
                "r": p.r,
                "layout": p.layout,
                "counts": c.counts,
                "out": out,
                "plan": plan_out,
            }))?;
        }
        TomeCmd::Reconstruct { input, plan: pp, out } => {
            let p = load_plan(&pp)?;
            let grid = unmerge(&read_map(&input)?, &p)?;
            write_map(&out, &grid)?;
            emit(&json!({ "shape": grid.shape(), "out": out }))?;
        }
        TomeCmd::Error {
            input,
            criterion,
            plan: pp,
            merge: m,
        } => {
            let grid = read_map(&input)?;
            let p = match pp {
                Some(path) => load_plan(&path)?,
                None => plan_for(&grid, criterion.as_deref(), &m)?,
            };
            let e = reconstruction_error(&grid, &p)?;
            emit(&json!({ "error": e, "survivors": p.survivors(), "r": p.r }))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

use std::fs::File;
use std::io::{BufWriter, Write};
use std::process::ExitCode;

use agglo_core::distill::student_grad_check;
use agglo_core::distill::{mode_switch_experiment, LogRecord, ModeSwitchConfig, TrainConfig, Trainer};
use agglo_core::{Error, Result};
use serde_json::{json, Value};

use crate::cli::TrainCmd;
use crate::files::{emit, read_json, write_json};

fn load_config(path: &std::path::Path, seed: u64) -> Result<TrainConfig> {
    let mut config = TrainConfig::from_json(&std::fs::read_to_string(path)?)?;
    config.seed = seed;
    Ok(config)
}

/// Image-weighted mean loss over the partitions of the last iteration.
fn final_loss(records: &[LogRecord]) -> Option<f64> {
    let last = records.last()?;
    let tail = records.iter().filter(|r| r.stage == last.stage && r.iter == last.iter);
    let (sum, n) = tail.fold((0.0, 0.0), |(s, n), r| (s + r.total * r.images as f64, n + r.images as f64));
    Some(sum / n)
}

pub fn run(cmd: TrainCmd) -> Result<ExitCode> {
    match cmd {
        TrainCmd::Run {
            config,
            seed,
            log,
            params_out,
        } => {
            let config = load_config(&config, seed)?;
            let mut trainer = Trainer::new(config)?;
            let mut writer = log.as_ref().map(File::create).transpose()?.map(BufWriter::new);
            let mut write_err = None;
            let mut sink = |r: &LogRecord| {
                if let Some(w) = writer.as_mut() {
                    let line = serde_json::to_string(r).map_err(Error::from).and_then(|s| {
                        writeln!(w, "{s}").map_err(Error::from)
                    });
                    if let Err(e) = line {
                        write_err.get_or_insert(e);
                    }
                }
            };
            let records = trainer.run(&mut sink);
            if let Some(w) = writer.as_mut() {
                w.flush()?;
            }
            let records = records?;
            if let Some(e) = write_err {
                return Err(e);
            }
            if let Some(p) = &params_out {
                write_json(p, &trainer.model().values())?;
            }
            let first = records.first().map(|r| r.total);
            let final_loss = final_loss(&records);
            let fitted: Value = trainer
                .fitted()
                .iter()
                .map(|(id, t)| (id.clone(), json!({ "phi": t.phi, "fitted_on": t.fitted_on })))
                .collect::<serde_json::Map<_, _>>()
                .into();
            emit(&json!({
                "seed": seed,
                "records": records.len(),
                "params": trainer.model().num_params(),
                "first_loss": first,
                "final_loss": final_loss,
                "phis": fitted,
                "log": log,
                "params_out": params_out,
            }))?;
        }
        TrainCmd::GradCheck {
            config,
            seed,
            samples,
            images,
            resolution,
            tolerance,
            mutate,
        } => {
            let config = load_config(&config, seed)?;
            let stage = &config.stages[0];
            let res = resolution.unwrap_or(stage.partitions[0].resolution);
            let teachers: Vec<String> = config.teachers.iter().map(|t| t.id.clone()).collect();
            let trainer = Trainer::new(config)?;
            let data = trainer.data();
            let sources: Vec<_> = (0..images).map(|i| data.held_out(i)).collect();
            let batch = trainer.batch_targets(&teachers, &sources, res)?;
            let report = student_grad_check(
                trainer.model(),
                &batch,
                trainer.standardizers(),
                &trainer.config().weights,
                samples,
                seed,
                mutate,
            )?;
            let pass = report.max_rel_error < tolerance;
            emit(&json!({
                "resolution": res,
                "params": trainer.model().num_params(),
                "report": report,
                "tolerance": tolerance,
                "pass": pass,
            }))?;
            if !pass {
                return Ok(ExitCode::from(2));
            }
        }
        TrainCmd::ModeSwitch {
            seed,
            config,
            iterations,
            high_res_mode,
        } => {
            let mut cfg = match &config {
                Some(p) => {
                    let mut v: Value = read_json(p)?;
                    v.as_object_mut()
                        .ok_or_else(|| Error::InvalidArgument("experiment config must be a JSON object".into()))?
                        .insert("seed".into(), json!(seed));
                    serde_json::from_value::<ModeSwitchConfig>(v)?
                }
                None => ModeSwitchConfig::new(seed),
            };
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if let Some(m) = high_res_mode {
                cfg.high_res_mode = m.into();
            }
            let report = mode_switch_experiment(&cfg)?;
            emit(&report)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

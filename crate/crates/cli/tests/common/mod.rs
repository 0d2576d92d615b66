#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use agglo_core::io::write_fmap;
use agglo_core::FeatureMap;
use serde_json::Value;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.stdout)
            .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {:?}\nstderr: {}", self.stdout, self.stderr))
    }
}

impl From<Output> for Run {
    fn from(o: Output) -> Self {
        Self {
            code: o.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
        }
    }
}

/// Runs the binary inside `dir` so relative paths in its output stay stable.
pub fn agglo(dir: &Path, args: &[&str]) -> Run {
    Command::new(env!("CARGO_BIN_EXE_agglo"))
        .args(args)
        .current_dir(dir)
        .env_remove("AGGLO_LOG")
        .output()
        .expect("spawn agglo")
        .into()
}

/// Runs and insists on exit code 0.
pub fn ok(dir: &Path, args: &[&str]) -> Value {
    let r = agglo(dir, args);
    assert_eq!(r.code, 0, "agglo {args:?} failed: {}", r.stderr);
    r.json()
}

pub fn put(dir: &Path, name: &str, map: &FeatureMap) {
    write_fmap(dir.join(name), map).unwrap();
}

/// Deterministic pseudo-random map with values exactly representable in f32.
pub fn noise_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    FeatureMap::from_fn(h, w, c, |_, _, _| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        ((s >> 40) as f32 / (1u64 << 24) as f32) as f64
    })
    .unwrap()
}

pub const TOY_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.json");

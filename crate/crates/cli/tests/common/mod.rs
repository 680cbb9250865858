#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use canard_core::{State, Trajectory};
use serde_json::Value;

pub fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
    pub elapsed: Duration,
}

impl Run {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("bad stdout ({e}): {}\n{}", self.stdout, self.stderr))
    }
}

pub fn canard(args: &[&str]) -> Run {
    canard_env(args, &[])
}

pub fn canard_env(args: &[&str], env: &[(&str, &str)]) -> Run {
    let start = Instant::now();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_canard"));
    cmd.args(args).env_remove("CANARD_WORKERS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("spawn canard");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        elapsed: start.elapsed(),
    }
}

/// Runs `command` on `config` into `out`.
pub fn run_config(command: &str, config: &Path, out: &Path) -> Run {
    canard(&[command, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

pub fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Loads `t,x,y` of a trajectory CSV.
pub fn read_trajectory(path: &Path) -> Trajectory {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let mut traj = Trajectory::default();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let num = |i: usize| rec[i].parse::<f64>().unwrap();
        traj.times.push(num(0));
        traj.states.push(State::new(num(1), num(2)));
        traj.observations.push(None);
    }
    traj
}

/// Prints one verdict line and returns whether it passed.
pub fn verdict(name: &str, ok: bool, detail: impl std::fmt::Display) -> bool {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/double_integrator.toml")
}

/// One-axis double integrator, N = 10, `|u| ≤ 2`, one chance constraint.
pub const SMALL: &str = r#"
horizon = 10

[system]
dt = 0.2
A = [[1.0, 0.2], [0.0, 1.0]]
B = [[0.02], [0.2]]
D = { blkdiag = [0.01, 0.01] }

[initial]
mu = [-1.0, 0.0]
Sigma = { blkdiag = [0.01, 0.01] }

[terminal]
mu = [0.0, 0.0]
Sigma = { blkdiag = [0.05, 0.05] }

[cost]
Q = { blkdiag = [1.0, 0.1] }
R = [[1.0]]

[[state_constraints]]
alpha = [1.0, 0.0]
beta = 0.5
p = 0.05

[[input_constraints]]
alpha = [1.0]
beta = 2.0

[[input_constraints]]
alpha = [-1.0]
beta = 2.0

[risk]
epsilon = 0.05

[saturation]
sigma_multiplier = 3.0

[rollout]
samples = 2000
seed = 7
retain = 20
"#;

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

pub fn covsteer<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_covsteer")).args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

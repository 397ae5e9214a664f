#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small geometry and short schedules so a full pipeline runs in seconds.
pub const MICRO: &str = "\
# micro run
frames = 4
height = 32
width = 32
patch_t = 2
patch_h = 8
patch_w = 8
dim = 16
depth = 1
heads = 2
decoder_dim = 16
decoder_depth = 1
decoder_heads = 2
videos = 4
phases = 2
clips_min = 1
clips_max = 2
steps = 2
warmup_steps = 1
batch_size = 2
finetune_epochs = 1
finetune_warmup_steps = 0
temporal_epochs = 1
label_fraction = 0.5
test_fraction = 0.25
";

pub fn write_micro(dir: &Path) -> PathBuf {
    let path = dir.join("micro.txt");
    std::fs::write(&path, MICRO).unwrap();
    path
}

pub fn vidmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidmae"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Value of the `run_dir=` line printed by run commands.
pub fn run_dir(o: &Output) -> PathBuf {
    let out = stdout(o);
    let line = out
        .lines()
        .find_map(|l| l.strip_prefix("run_dir="))
        .unwrap_or_else(|| panic!("no run_dir in output:\n{out}\n{}", stderr(o)));
    PathBuf::from(line)
}

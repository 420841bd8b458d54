#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use hierpack::fsutil::sha256_hex;

/// A configuration small enough for a full pipeline in a few seconds.
pub const SMALL: &str = "\
data.videos = 16
data.dim = 16
data.min_segments = 20
data.max_segments = 30
backbone.dim = 16
pretrain.steps = 40
novel.steps = 20
backpack.k = 4
consensus.k = 2
";

pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the command line in process.
pub fn hierpack(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["hierpack"];
    full.extend_from_slice(args);
    let code = hierpack::cli::run(full, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8_lossy(&out).into_owned(),
        stderr: String::from_utf8_lossy(&err).into_owned(),
    }
}

/// Writes `text` as `config.txt` under `root` and returns its path.
pub fn write_config(root: &Path, text: &str) -> PathBuf {
    fs::create_dir_all(root).unwrap();
    let p = root.join("config.txt");
    fs::write(&p, text).unwrap();
    p
}

/// Runs `cmd` with the config and output root, returning the outcome.
pub fn step(root: &Path, config: &Path, cmd: &str, extra: &[&str]) -> Outcome {
    let r = root.to_str().unwrap();
    let c = config.to_str().unwrap();
    let mut args = vec![cmd, "--out", r, "--config", c];
    args.extend_from_slice(extra);
    hierpack(&args)
}

/// Runs commands in order, panicking with the error line on failure.
pub fn pipeline(root: &Path, config: &Path, cmds: &[&str]) {
    for cmd in cmds {
        let o = step(root, config, cmd, &[]);
        assert_eq!(o.code, 0, "{cmd} failed: {}", o.stderr);
    }
}

/// Relative path and sha256 of every file under `dir`, sorted by path.
pub fn tree_hashes(dir: &Path) -> Vec<(String, String)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, String)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/");
                out.push((rel, sha256_hex(&fs::read(&p).unwrap())));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// One digest over a whole tree.
pub fn tree_digest(dir: &Path) -> String {
    let mut text = String::new();
    for (p, h) in tree_hashes(dir) {
        text.push_str(&p);
        text.push('\t');
        text.push_str(&h);
        text.push('\n');
    }
    sha256_hex(text.as_bytes())
}

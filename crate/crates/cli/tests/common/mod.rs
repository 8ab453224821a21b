//! Helpers shared by the command-line test targets.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn gwasv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gwasv"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn run_ok(args: &[&str]) {
    let out = gwasv(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Research, public and calibration datasets in `dir`.
pub fn datasets(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let small = dir.join("small.kv");
    std::fs::write(&small, "m = 2000\nn_associated = 80\n").unwrap();
    let large = dir.join("large.kv");
    std::fs::write(&large, "m = 10000\nn_associated = 400\n").unwrap();
    for (name, cfg, seed) in [("d", &small, "1"), ("e", &small, "2"), ("f", &large, "3")] {
        run_ok(&["synth", "--config", p(cfg), "--seed", seed, "--out", p(&dir.join(name))]);
    }
    (
        dir.join("d/dataset.tsv"),
        dir.join("e/dataset.tsv"),
        dir.join("f/dataset.tsv"),
    )
}

pub fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

/// Output files of one run of every command.
pub type RunOutputs = Vec<Vec<(String, Vec<u8>)>>;

/// Runs every command once with `threads` worker threads, writing under
/// `dir` with names prefixed by `tag`, and returns the files each produced.
pub fn run_every_command(dir: &Path, data: &(PathBuf, PathBuf, PathBuf), tag: &str, threads: &str) -> RunOutputs {
    let (d, e, f) = data;
    let exp_cfg = dir.join("exp.toml");
    std::fs::write(
        &exp_cfg,
        "seeds = 2\ntrials = 2\nexperiments = [\"epsilon\", \"attack\"]\nepsilons = [1.0, 3.0]\n\
         [research]\nm = 1000\nn_associated = 40\n[public]\nm = 1000\nn_associated = 40\n\
         [calibration]\noffsets = [100, 200]\n[calibration.dataset]\nm = 5000\nn_associated = 200\n\
         [attack]\nreference = 200\nrepetitions = 10\naxis = [10, 20]\nepsilons = [3.0]\n\
         [attack.dataset]\nm = 500\n",
    )
    .unwrap();
    let o = |name: &str| dir.join(format!("{tag}-{name}")).to_str().unwrap().to_string();
    let t = ["--threads", threads];
    let commands: Vec<Vec<String>> = vec![
        vec!["synth".into(), "--seed".into(), "9".into(), "--out".into(), o("synth")],
        vec![
            "gwas".into(),
            "--data".into(),
            p(d).into(),
            "--l".into(),
            "50".into(),
            "--out".into(),
            o("gwas"),
        ],
        vec![
            "metadata".into(),
            "--data".into(),
            p(d).into(),
            "--epsilon".into(),
            "3".into(),
            "--l".into(),
            "30".into(),
            "--k".into(),
            "30".into(),
            "--start".into(),
            "60".into(),
            "--scenario".into(),
            "mixed".into(),
            "--offset".into(),
            "50".into(),
            "--seed".into(),
            "4".into(),
            "--out".into(),
            o("meta"),
        ],
        vec![
            "calibrate".into(),
            "--public".into(),
            p(e).into(),
            "--calibration".into(),
            p(f).into(),
            "--epsilon".into(),
            "3".into(),
            "--l".into(),
            "30".into(),
            "--offsets".into(),
            "100,200".into(),
            "--seed".into(),
            "5".into(),
            "--out".into(),
            o("cal"),
        ],
        vec![
            "audit".into(),
            "--data".into(),
            p(d).into(),
            "--l".into(),
            "10,20".into(),
            "--epsilon".into(),
            "3".into(),
            "--hold-out".into(),
            "25,20".into(),
            "--repetitions".into(),
            "5".into(),
            "--seed".into(),
            "6".into(),
            "--out".into(),
            o("audit"),
        ],
        vec![
            "experiment".into(),
            "--config".into(),
            p(&exp_cfg).into(),
            "--seed".into(),
            "7".into(),
            "--out".into(),
            o("exp"),
        ],
    ];
    let mut outputs = Vec::new();
    for cmd in &commands {
        let mut args: Vec<&str> = t.to_vec();
        args.extend(cmd.iter().map(String::as_str));
        run_ok(&args);
        outputs.push(files(Path::new(cmd.last().unwrap())));
    }
    let (bundle, cutoffs, ver) = (
        format!("{}/bundle.json", o("meta")),
        format!("{}/cutoffs.json", o("cal")),
        o("ver"),
    );
    let verify = [
        "--threads",
        threads,
        "verify",
        "--bundle",
        &bundle,
        "--public",
        p(e),
        "--cutoffs",
        &cutoffs,
        "--seed",
        "8",
        "--out",
        &ver,
    ];
    let status = gwasv(&verify).status.code();
    assert!(matches!(status, Some(0) | Some(1)));
    outputs.push(files(Path::new(&ver)));
    outputs
}

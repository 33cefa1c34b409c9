use std::path::Path;
use std::process::{Command, Output};

fn focustrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focustrack")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "seed = 5\n\n[scene]\nn_frames = 6\nwidth = 64\nheight = 48\ntarget_w = 12.0\ntarget_h = 10.0\nk = 4\n\n\
[model]\nd_emb = 8\nhidden = 8\nd_k = 4\n\n[train]\nepochs = 2\n\n[heatmap]\nout_w = 32\nout_h = 18\n";

#[test]
fn usage_and_help_exit_codes() {
    assert_eq!(code(&focustrack(&["--help"])), 0);
    assert_eq!(code(&focustrack(&["--version"])), 0);
    assert_eq!(code(&focustrack(&[])), 1);
    assert_eq!(code(&focustrack(&["eval", "--pred", "x"])), 1);
    assert_eq!(code(&focustrack(&["frobnicate"])), 1);
}

#[test]
fn bad_config_and_missing_input_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[heatmap]\nalpha = 1.5\n").unwrap();
    let o = focustrack(&["--config", p(&cfg), "--out", p(dir.path()), "simulate"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(&cfg, "[heatmap]\nunknown_key = 1\n").unwrap();
    assert_eq!(code(&focustrack(&["--config", p(&cfg), "simulate"])), 1);

    let missing = dir.path().join("nope");
    let o = focustrack(&["--out", p(&dir.path().join("o")), "gen-heatmaps", "--labels", p(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = focustrack(&["--out", p(dir.path()), "grad-check", "--instances", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("gradcheck.csv").is_file());
}

fn pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let cfg = root.join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let c = p(&cfg);
    let run = |args: &[&str]| {
        let o = focustrack(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    let sim = root.join("sim");
    let model = root.join("model");
    let trk = root.join("track");
    let gt = root.join("gt");
    let ev = root.join("eval");
    run(&["--config", c, "--out", p(&sim), "simulate"]);
    run(&["--config", c, "--threads", "2", "--out", p(&model), "train", "--data", p(&sim)]);
    let params = model.join("params.bin");
    run(&["--config", c, "--out", p(&trk), "track", "--data", p(&sim), "--params", p(&params)]);
    run(&["--config", c, "--out", p(&gt), "gen-heatmaps", "--labels", p(&sim.join("labels"))]);
    run(&["--out", p(&ev), "eval", "--pred", p(&trk.join("heatmaps")), "--gt", p(&gt)]);

    let mut files = Vec::new();
    for dir in [&sim, &model, &trk, &gt, &ev] {
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let path = e.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    files.push((rel, std::fs::read(&path).unwrap()));
                }
            }
        }
    }
    files.sort();
    files
}

#[test]
fn end_to_end_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = pipeline(a.path());
    let fb = pipeline(b.path());
    assert!(fa.iter().any(|(n, _)| n.ends_with("metrics.csv")));
    assert!(fa.iter().any(|(n, _)| n.ends_with("track.csv")));
    assert_eq!(fa.len(), fb.len());
    for ((na, da), (nb, db)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between runs");
    }
    let metrics = fa.iter().find(|(n, _)| n.ends_with("metrics.csv")).unwrap();
    let text = String::from_utf8_lossy(&metrics.1);
    assert!(text.lines().last().unwrap().starts_with("all,"));
}

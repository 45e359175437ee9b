use std::path::Path;
use std::process::{Command, Output};

use gsmvs::imageio::{read_pfm, write_pfm};
use gsmvs::tensor::Tensor;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsmvs")).args(args).env("C3GS_THREADS", "2").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_render_and_depth_eval() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let out = dir.path().join("out");
    let o = run(&["synth", "--spec", "plane", "--views", "3", "--out", p(&scene), "--height", "32", "--width", "40"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = dir.path().join("photo.cfg");
    std::fs::write(&cfg, "mode = photometric\n").unwrap();
    let o = run(&["render", "--scene", p(&scene), "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["render.ppm", "depth.pfm", "depth_coarse.pfm", "cloud.gc01", "metrics.txt", "metrics.jsonl"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let line: serde_json::Value = serde_json::from_str(std::fs::read_to_string(out.join("metrics.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(line["view"], "0000");
    assert!(line["psnr_db"].as_f64().unwrap() > 20.0);

    let gt = scene.join("gt").join("depth_0000.pfm");
    let o = run(&["depth-eval", "--pred", p(&gt), "--gt", p(&gt)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("abs_err_mm = 0\n") && stdout(&o).contains("acc_2mm = 1\n"));

    let shifted = dir.path().join("shifted.pfm");
    write_pfm(&shifted, &read_pfm(&gt).unwrap().map(|v| v + 0.05)).unwrap();
    let mask = dir.path().join("mask.pfm");
    write_pfm(&mask, &Tensor::from_fn(&[32, 40], |i| (i % 2) as f32)).unwrap();
    let o = run(&["depth-eval", "--pred", p(&shifted), "--gt", p(&gt), "--mask", p(&mask)]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("acc_2mm = 0\n") && text.contains("acc_10mm = 1\n") && text.contains("valid_pixels = 640\n"), "{text}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["render", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["synth", "--spec", "cube", "--out", p(dir.path())]).status.code(), Some(2));
    let missing = dir.path().join("nope");
    let o = run(&["render", "--scene", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
    let scene = dir.path().join("scene");
    assert_eq!(run(&["synth", "--spec", "sphere", "--out", p(&scene), "--height", "16", "--width", "16"]).status.code(), Some(0));
    // Learned mode without weights is a data error, not a usage error.
    assert_eq!(run(&["render", "--scene", p(&scene), "--out", p(&dir.path().join("o"))]).status.code(), Some(1));
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "mode = photometric\nunknown = 3\n").unwrap();
    let o = run(&["render", "--scene", p(&scene), "--config", p(&bad), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    let o = Command::new(env!("CARGO_BIN_EXE_gsmvs")).args(["gradcheck"]).env("C3GS_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn learned_render_with_initialized_weights() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let weights = dir.path().join("w.ntw");
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, "coarse_hypotheses = 8\nfine_hypotheses = 4\n").unwrap();
    assert_eq!(run(&["synth", "--spec", "two-plane", "--out", p(&scene), "--height", "16", "--width", "24"]).status.code(), Some(0));
    assert_eq!(run(&["init-weights", "--config", p(&cfg), "--out", p(&weights)]).status.code(), Some(0));
    let outs: Vec<_> = (0..2).map(|k| dir.path().join(format!("o{k}"))).collect();
    for o in &outs {
        let r = run(&["render", "--scene", p(&scene), "--config", p(&cfg), "--weights", p(&weights), "--out", p(o), "--views", "2"]);
        assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    }
    for f in ["render.ppm", "depth.pfm", "cloud.gc01"] {
        assert_eq!(std::fs::read(outs[0].join(f)).unwrap(), std::fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
    let o = run(&["render", "--scene", p(&scene), "--config", p(&cfg), "--weights", p(&weights), "--out", p(&outs[0]), "--views", "9"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_and_selftest_subcommands() {
    let o = run(&["gradcheck", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("gradcheck passed"));
    let o = run(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains(", 0 failed"));
}

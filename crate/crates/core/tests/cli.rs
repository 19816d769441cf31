use std::fs;
use std::path::Path;

use sardiff::cli::{main_with_args, DETECTIONS, METRICS, MODEL_CONFIG, OVERLAYS, TRAIN_LOG};

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("sardiff").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    let out = dir.path().join("eval");
    assert_eq!(run(&["gen-data", "--out", s(&data), "--count", "3", "--side", "64"]), 0);

    let cfg = dir.path().join("tiny.cfg");
    fs::write(
        &cfg,
        format!(
            "# smallest useful run\ntrain_data = {0}\ntest_data = {0}\nmambasar = false\nfpn_width = 4\nhidden = 8\ntime_dim = 4\nN = 6\nN_train = 4\ntrain_steps = 3\nlr = 1e-3\n",
            s(&data)
        ),
    )
    .unwrap();
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&model)]), 0);
    assert!(model.join(MODEL_CONFIG).is_file());
    let log = fs::read_to_string(model.join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 4, "header plus one row per step:\n{log}");

    assert_eq!(run(&["eval", "--checkpoint", s(&model), "--out", s(&out)]), 0);
    assert!(out.join(METRICS).is_file());
    let dets = fs::read_to_string(out.join(DETECTIONS)).unwrap();
    assert_eq!(dets.lines().next(), Some("image_id,class,score,cx,cy,w,h"));
    assert_eq!(fs::read_dir(out.join(OVERLAYS)).unwrap().count(), 3);
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(dir.path())]), 1);

    // well-formed but no train_data
    fs::write(&cfg, "N = 4\n").unwrap();
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(dir.path())]), 1);

    // a layout without attention layers needs the override
    fs::write(&cfg, "layers = mamba,mamba,mamba,mamba,mamba,mamba\n").unwrap();
    assert_eq!(run(&["eval", "--config", s(&cfg), "--data", s(dir.path()), "--out", s(dir.path())]), 1);

    assert_eq!(run(&["train", "--config", s(&dir.path().join("missing.cfg")), "--out", s(dir.path())]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn gradcheck_subcommand_passes() {
    assert_eq!(run(&["gradcheck", "--seed", "1"]), 0);
}

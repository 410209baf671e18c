use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 20] = [
    "--set",
    "width=32",
    "--set",
    "height=32",
    "--set",
    "max_disparity=16",
    "--set",
    "window_events=512",
    "--set",
    "feature_channels=16",
    "--set",
    "crop=32",
    "--set",
    "batch_size=1",
    "--set",
    "iterations=3",
    "--set",
    "train_scenes=2",
    "--set",
    "test_scenes=1",
];

fn evstereo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evstereo"))
        .args(args)
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert_eq!(
        out.status.code(),
        Some(0),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn synth_train_eval_infer_viz() {
    let root = tempfile::tempdir().unwrap();
    let (data, run, eval, infer) = (
        root.path().join("data"),
        root.path().join("run"),
        root.path().join("eval"),
        root.path().join("infer"),
    );

    let mut args = vec!["synth", "--seed", "3", "--out-dir", path(&data)];
    args.extend(SMALL);
    ok(&evstereo(&args));
    let scene = data.join("test/scene_0000");
    for f in ["left.evt", "right.evt", "disparity.png"] {
        assert!(scene.join(f).is_file(), "{f}");
    }

    let cfg = data.join("config.txt");
    ok(&evstereo(&[
        "train",
        "--config",
        path(&cfg),
        "--data",
        path(&data),
        "--out-dir",
        path(&run),
        "--log-every",
        "1",
    ]));
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let ckpt = run.join("checkpoint.evsk");
    let stdout = ok(&evstereo(&[
        "eval",
        "--data",
        path(&data),
        "--checkpoint",
        path(&ckpt),
        "--out-dir",
        path(&eval),
    ]));
    let json: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    for key in ["mae", "rmse", "pe1_percent", "pe2_percent", "n_valid"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert!(eval.join("metrics.json").is_file() && eval.join("metrics.txt").is_file());
    for f in [
        "scene_0000.png",
        "scene_0000.f32.evsk",
        "scene_0000_magma.png",
    ] {
        assert!(eval.join("pred").join(f).is_file(), "{f}");
    }

    let (l, r) = (scene.join("left.evt"), scene.join("right.evt"));
    let stdout = ok(&evstereo(&[
        "infer",
        "--left",
        path(&l),
        "--right",
        path(&r),
        "--checkpoint",
        path(&ckpt),
        "--stride-us",
        "1500",
        "--out-dir",
        path(&infer),
    ]));
    let windows = stdout.lines().filter(|l| l.starts_with("disp_")).count();
    assert!(windows >= 2, "{stdout}");
    assert!(infer.join("disp_0000.png").is_file());

    let png = eval.join("pred/scene_0000.png");
    let viz = root.path().join("viz.png");
    ok(&evstereo(&[
        "viz",
        "--input",
        path(&png),
        "--output",
        path(&viz),
    ]));
    let img = std::fs::read(&viz).unwrap();
    assert_eq!(&img[1..4], b"PNG");
}

#[test]
fn gradcheck_reports_a_module() {
    let out = ok(&evstereo(&["gradcheck", "--module", "disparity"]));
    assert!(out.contains("disparity") && !out.contains("FAIL"), "{out}");
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path());
    assert_eq!(
        evstereo(&["synth", "--set", "no_such_key=1", "--out-dir", out])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(evstereo(&["train", "--bogus-flag"]).status.code(), Some(1));
    assert_eq!(
        evstereo(&["gradcheck", "--module", "nonsense"])
            .status
            .code(),
        Some(1)
    );
    let bad = dir.path().join("bad.evt");
    std::fs::write(&bad, b"not an event file").unwrap();
    assert_eq!(
        evstereo(&["viz", "--input", path(&bad), "--out-dir", out])
            .status
            .code(),
        Some(1)
    );
    let missing = dir.path().join("missing.evsk");
    assert_eq!(
        evstereo(&["viz", "--input", path(&missing), "--out-dir", out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(evstereo(&["--help"]).status.code(), Some(0));
}

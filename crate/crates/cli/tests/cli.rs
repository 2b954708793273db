use std::path::Path;
use std::process::{Command, Output};

fn flowsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowsplat")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = flowsplat(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const QUICK: [&str; 8] = [
    "--set",
    "budgets.static_iters=20",
    "--set",
    "budgets.per_frame=5",
    "--set",
    "budgets.coarse=20",
    "--set",
    "budgets.fine=30",
];

#[test]
fn generate_train_render_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let frames = dir.path().join("frames");
    ok(&["generate", "--preset", "moving-blob", "--seed", "3", "--out", s(&data)]);
    assert!(data.join("gt/trajectories.csv").exists());

    let mut args = vec!["train-deform", "--data", s(&data), "--out", s(&run)];
    args.extend(QUICK);
    let msg = ok(&args);
    assert!(msg.contains("trajectory EPE"), "{msg}");
    for f in ["checkpoint.ckpt", "config.cfg", "log.csv", "train_metrics.csv", "canonical.ply"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(run.join("log.csv")).unwrap();
    assert!(log.starts_with("iteration,loss_color,loss_flow,loss_phys,loss_vel,lambda_f,gaussian_count,wall_ms"));

    ok(&["render", "--checkpoint", s(&run.join("checkpoint.ckpt")), "--data", s(&data), "--out", s(&frames)]);
    assert!(frames.join("frames/0/0.png").exists());
    assert!(frames.join("flow/0/0.flo").exists());

    let csv = ok(&["eval", "--pred", s(&frames), "--gt", s(&data)]);
    let mean = csv.lines().find(|l| l.starts_with("mean")).unwrap();
    let psnr: f64 = mean.split(',').nth(2).unwrap().parse().unwrap();
    assert!(psnr > 15.0, "{mean}");

    let png = dir.path().join("flow.png");
    ok(&["flowviz", "--flow", s(&frames.join("flow/0/0.flo")), "--out", s(&png)]);
    assert!(png.exists());
}

#[test]
fn iterative_training_writes_per_frame_states() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["generate", "--preset", "rigid-translation", "--out", s(&data)]);
    let mut args = vec!["train-iter", "--data", s(&data), "--out", s(&run)];
    args.extend(QUICK);
    ok(&args);
    assert!(run.join("states/0.ply").exists());
    assert!(run.join("checkpoint.ckpt").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(flowsplat(&["generate", "--bogus"]).status.code(), Some(2));
    assert_eq!(flowsplat(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowsplat(&["train-deform", "--data", s(&dir.path().join("absent")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: load:"), "{err}");

    let out = flowsplat(&["train-deform", "--data", "x", "--out", "y", "--set", "loss.lambda_c=7"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: config"));
}

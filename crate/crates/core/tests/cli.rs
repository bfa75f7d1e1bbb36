//! End-to-end CLI checks through the built binary: exit codes, render
//! determinism, resume behavior, and failure messages.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bonefield"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("bonefield-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn make_tiny_dataset(dir: &Path) {
    let out = bin()
        .args([
            "make-data",
            "--out",
            dir.to_str().unwrap(),
            "--poses",
            "3",
            "--cameras",
            "2",
            "--res",
            "24x24",
            "--seed",
            "3",
            "--novel-cameras",
            "1",
            "--novel-poses",
            "1",
            "--force",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out));
}

fn text(out: &Output) -> String {
    format!(
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

fn tiny_train_args(data: &Path, ckpt: &Path, steps: &str, seed: &str) -> Vec<String> {
    [
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--steps",
        steps,
        "--rays-per-step",
        "48",
        "--q",
        "12",
        "--h",
        "2",
        "--m",
        "4",
        "--gnn-hidden",
        "8",
        "--field-width",
        "16",
        "--seed",
        seed,
        "--threads",
        "1",
        "--log-every",
        "0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn usage_errors_exit_one() {
    // unknown flag
    let out = bin().args(["train", "--nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
    // bad resolution string prints usage-class error
    let out = bin()
        .args(["make-data", "--out", "/tmp/x-bf", "--res", "64by64"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
    assert!(String::from_utf8_lossy(&out.stderr).contains("resolution"));
    // --help exits 0
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn make_data_refuses_nonempty_without_force() {
    let dir = workdir("nonempty");
    std::fs::write(dir.join("existing.txt"), "x").unwrap();
    let out = bin()
        .args([
            "make-data",
            "--out",
            dir.to_str().unwrap(),
            "--poses",
            "3",
            "--cameras",
            "2",
            "--res",
            "16x16",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_data_dir_fails() {
    let out = bin()
        .args([
            "train",
            "--data",
            "/tmp/definitely-not-a-bonefield-dataset",
            "--out",
            "/tmp/x.ck",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
}

#[test]
fn train_render_eval_roundtrip_with_determinism() {
    let root = workdir("roundtrip");
    let data = root.join("data");
    make_tiny_dataset(&data);
    let ck = root.join("model.ck");
    let out = bin()
        .args(tiny_train_args(&data, &ck, "6", "5"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out));

    // render the novel-view split twice with the same seed: identical bytes
    let r1 = root.join("r1");
    let r2 = root.join("r2");
    for dir in [&r1, &r2] {
        let out = bin()
            .args([
                "render",
                "--ckpt",
                ck.to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--split",
                "novel-view",
                "--out",
                dir.to_str().unwrap(),
                "--seed",
                "9",
                "--threads",
                "1",
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", text(&out));
    }
    let mut checked = 0;
    for entry in std::fs::read_dir(&r1).unwrap() {
        let name = entry.unwrap().file_name();
        if name.to_string_lossy().ends_with(".ppm") {
            let a = std::fs::read(r1.join(&name)).unwrap();
            let b = std::fs::read(r2.join(&name)).unwrap();
            assert_eq!(a, b, "render {name:?} not bit-identical");
            checked += 1;
        }
    }
    assert!(checked > 0);

    // eval writes the fixed CSV schema
    let csv = root.join("eval.csv");
    let out = bin()
        .args([
            "eval",
            "--ckpt",
            ck.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--split",
            "novel-view",
            "--out",
            csv.to_str().unwrap(),
            "--threads",
            "1",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out));
    let body = std::fs::read_to_string(&csv).unwrap();
    assert!(body.starts_with("frame,pose_id,camera_id,psnr,ssim"));
    assert!(body.lines().last().unwrap().starts_with("aggregate"));

    // unknown split fails
    let out = bin()
        .args([
            "eval",
            "--ckpt",
            ck.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--split",
            "nope",
            "--out",
            csv.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn resume_after_zero_steps_equals_original() {
    let root = workdir("resume0");
    let data = root.join("data");
    make_tiny_dataset(&data);
    let ck = root.join("a.ck");
    let out = bin()
        .args(tiny_train_args(&data, &ck, "5", "7"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out));

    // resume with no additional steps: checkpoint unchanged
    let ck2 = root.join("b.ck");
    let mut args = vec![
        "train".to_string(),
        "--data".into(),
        data.to_str().unwrap().into(),
        "--out".into(),
        ck2.to_str().unwrap().into(),
        "--resume".into(),
        ck.to_str().unwrap().into(),
        "--threads".into(),
        "1".into(),
        "--log-every".into(),
        "0".into(),
    ];
    args.push("--stop-after".into());
    args.push("5".into());
    let out = bin().args(&args).output().unwrap();
    assert!(out.status.success(), "{}", text(&out));
    let a = std::fs::read(&ck).unwrap();
    let b = std::fs::read(&ck2).unwrap();
    assert_eq!(a, b, "resume after zero extra steps must be byte-identical");
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn nan_loss_aborts_naming_term() {
    let root = workdir("nan");
    let data = root.join("data");
    make_tiny_dataset(&data);
    let ck = root.join("a.ck");
    let out = bin()
        .args(tiny_train_args(&data, &ck, "2", "1"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out));

    // corrupt the checkpoint: flood a pose-encoder weight with inf
    let mut loaded = bonefield::params::Checkpoint::load(&ck).unwrap();
    for v in loaded
        .params
        .get_mut("gnn.conv1.w")
        .unwrap()
        .data_mut()
    {
        *v = f64::INFINITY;
    }
    let bad = root.join("bad.ck");
    loaded.save(&bad).unwrap();

    let out = bin()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            root.join("c.ck").to_str().unwrap(),
            "--resume",
            bad.to_str().unwrap(),
            "--steps",
            "4",
            "--threads",
            "1",
            "--log-every",
            "0",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("photometric") || err.contains("volume") || err.contains("soft-softmax"),
        "error must name the loss term: {err}"
    );
    assert!(err.contains("step"), "error names the step: {err}");
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn render_pose_json_animation_mode_and_mesh() {
    let root = workdir("anim");
    let data = root.join("data");
    make_tiny_dataset(&data);
    let ck = root.join("m.ck");
    let out = bin()
        .args(tiny_train_args(&data, &ck, "3", "2"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out));

    // pose not in any split + custom camera
    let pose = bonefield::kinematics::Pose::rest();
    let pose_path = root.join("pose.json");
    std::fs::write(&pose_path, serde_json::to_string(&pose).unwrap()).unwrap();
    let cam = bonefield::renderer::Camera::look_at(
        [1.5, 1.4, -2.0],
        [0.0, 0.9, 0.0],
        [0.0, 1.0, 0.0],
        30.0,
        20,
        20,
    );
    let cam_path = root.join("cam.json");
    std::fs::write(&cam_path, serde_json::to_string(&cam).unwrap()).unwrap();
    let rdir = root.join("anim");
    let out = bin()
        .args([
            "render",
            "--ckpt",
            ck.to_str().unwrap(),
            "--pose",
            pose_path.to_str().unwrap(),
            "--camera",
            cam_path.to_str().unwrap(),
            "--out",
            rdir.to_str().unwrap(),
            "--threads",
            "1",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out));
    assert!(rdir.join("frame.ppm").exists());
    assert!(rdir.join("frame_alpha.pgm").exists());

    // mesh extraction at tiny resolution: exit 0 even when empty
    let obj = root.join("mesh.obj");
    let out = bin()
        .args([
            "extract-mesh",
            "--ckpt",
            ck.to_str().unwrap(),
            "--pose",
            pose_path.to_str().unwrap(),
            "--res",
            "2",
            "--iso",
            "1e9",
            "--out",
            obj.to_str().unwrap(),
            "--threads",
            "1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty mesh"));
    assert!(obj.exists());
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn ablate_aggregation_grid_runs_exactly_the_five_strategies() {
    let root = workdir("ablate");
    let data = root.join("data");
    make_tiny_dataset(&data);
    let out = root.join("grid");
    let res = bin()
        .args([
            "ablate",
            "--data",
            data.to_str().unwrap(),
            "--grid",
            "aggregation",
            "--out",
            out.to_str().unwrap(),
            "--steps",
            "2",
            "--rays-per-step",
            "24",
            "--q",
            "8",
            "--h",
            "2",
            "--m",
            "4",
            "--gnn-hidden",
            "8",
            "--field-width",
            "8",
            "--render-chunk",
            "256",
            "--threads",
            "1",
        ])
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", text(&res));
    let csv = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let names: Vec<&str> = csv
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        names,
        ["softmax", "softmax-oob", "sum-oob", "sigmoid-oob", "soft-softmax"],
        "aggregation grid rows"
    );
    // bad grid name is a usage error
    let res = bin()
        .args([
            "ablate",
            "--data",
            data.to_str().unwrap(),
            "--grid",
            "everything",
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn eval_empty_split_fails() {
    let root = workdir("emptysplit");
    let data = root.join("data");
    make_tiny_dataset(&data);
    let ck = root.join("m.ck");
    let out = bin()
        .args(tiny_train_args(&data, &ck, "2", "4"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out));
    // empty the novel-pose split on disk
    let splits_path = data.join("splits.json");
    let mut splits: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&splits_path).unwrap()).unwrap();
    splits["novel_pose"] = serde_json::json!([]);
    std::fs::write(&splits_path, splits.to_string()).unwrap();
    let res = bin()
        .args([
            "eval",
            "--ckpt",
            ck.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--split",
            "novel-pose",
            "--out",
            root.join("e.csv").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2), "{}", text(&res));
    assert!(String::from_utf8_lossy(&res.stderr).contains("empty"));
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn self_test_fault_injection_is_nonzero() {
    // the full clean self-test runs in the acceptance suite; here only the
    // corrupted-gradient fixture path
    let out = bin()
        .args(["self-test", "--inject-fault", "--seed", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("corrupted-exp-fixture"));
}

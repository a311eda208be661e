use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[scene]
boxes = 2
spheres = 1
region = [1.5, 5.5, -3.0, 3.0]
clearance = 1.0
size = [0.2, 0.4]

[rig]
cameras = 2
width = 24
height = 16
fov_x_deg = 80.0
facing = "front"
position = [0.0, 0.0, 0.8]
pitch_deg = 10.0
fan_deg = 40.0
heldout_yaw_deg = [10.0]

[warp.x]
kind = "symmetric"
cells = 16
inner_cells = 6
r_inner = 0.5
r_outer = 1.5

[warp.y]
kind = "symmetric"
cells = 16
inner_cells = 6
r_inner = 0.5
r_outer = 1.5

[warp.z]
kind = "one_sided"
cells = 8
inner_cells = 6
r_inner = 0.25
r_outer = 0.75
ego_min = -0.5

[model]
mode = "direct"

[model.lift]
feature_dim = 6

[model.decoder]
hidden = [8]

[model.render]
samples = 8
t_near = 0.1

[train]
steps = 4
patches = 2
patch_size = 4
eval_every = 2
checkpoint_every = 2

[tokenize]
px = 4
py = 4
pz = 4
d_ar = 8
halfplane = true
"#;

fn triplane(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_triplane")).args(args).output().expect("spawn triplane")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_render_tokenize() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let stdout = ok(&triplane(&["train", "--config", s(&cfg), "--out", s(&run)]));
    assert!(stdout.contains("step"), "{stdout}");
    let ckpt = run.join("checkpoint.ckpt");
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 5);

    let report: serde_json::Value = serde_json::from_str(&ok(&triplane(&["eval", "--ckpt", s(&ckpt), "--json"]))).unwrap();
    assert_eq!(report["cameras"].as_array().unwrap().len(), 3);
    assert!(report["mean_psnr"].as_f64().unwrap() > 0.0);

    let png = dir.path().join("cam0.png");
    let pfm = dir.path().join("cam0.pfm");
    ok(&triplane(&["render", "--ckpt", s(&ckpt), "--camera", "0", "--out", s(&png), "--depth", s(&pfm)]));
    assert!(png.exists() && pfm.exists());

    let tok = dir.path().join("tokens.bin");
    let jsonl = dir.path().join("tokens.jsonl");
    let stdout = ok(&triplane(&[
        "tokenize", "--ckpt", s(&ckpt), "--patch", "4,4,4", "--halfplane", "--out", s(&tok), "--jsonl", s(&jsonl),
    ]));
    // 2*4 + 2*2 + 4*2 tokens with the front half of the xy and xz planes.
    assert!(stdout.starts_with("20 tokens"), "{stdout}");
    // One header line, then one line per token.
    assert_eq!(std::fs::read_to_string(&jsonl).unwrap().lines().count(), 21);
}

#[test]
fn gen_scene_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let imgs = dir.path().join("views");
    let scene: serde_json::Value =
        serde_json::from_str(&ok(&triplane(&["gen-scene", "--seed", "9", "--config", s(&cfg), "--images", s(&imgs)]))).unwrap();
    assert_eq!(scene["primitives"].as_array().unwrap().len(), 3);
    assert_eq!(scene["seed"], 9);
    assert_eq!(std::fs::read_dir(&imgs).unwrap().count(), 2);
}

#[test]
fn profile_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("scaling.csv");
    let stdout = ok(&triplane(&["profile", "--cameras", "1,4", "--frames", "1", "--patch", "8x8x8", "--runs", "3", "--out", s(&csv)]));
    assert!(!stdout.contains("FAIL"), "{stdout}");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().next().unwrap().starts_with("tokenizer,"));
}

#[test]
fn errors_are_structured() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, TINY.replace("cameras = 2", "cameras = 0")).unwrap();
    let out = triplane(&["train", "--config", s(&bad), "--out", s(dir.path())]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: kind=config msg="), "{stderr}");

    let out = triplane(&["eval", "--ckpt", s(&dir.path().join("missing.ckpt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: kind="));

    let out = triplane(&["profile", "--patch", "5x5", "--out", s(&dir.path().join("x.csv"))]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: kind=usage"));
}

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_polypdiff"));
    c.env("RUST_LOG", "warn");
    c
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    format!(
        r#"data_root = "{data}"
test_count = 4
resolution = 16
output_root = "{out}"
run_id = "cli"
seed = 3
generate_count = 8
eval_samples = 4

[mask_diffusion]
timesteps = 8

[image_diffusion]
timesteps = 8
conditioning = "mask_concat"

[mask_train]
total_steps = 10
checkpoint_every = 5
batch_size = 4
base_channels = 4
embed_dim = 8

[image_train]
total_steps = 10
checkpoint_every = 5
batch_size = 4
base_channels = 4
embed_dim = 8

[segmentation]
model = "fpn_small"
encoder_width = 4
epochs = 1
batch_size = 4

[mixing]
real_count = 4
synthetic_counts = [0, 4, 8]
"#,
        data = dir.join("toy").display(),
        out = dir.join("runs").display()
    )
}

#[test]
fn toy_data_then_full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    ok(bin().args(["toy-data", "--count", "16", "--side", "16", "--out"]).arg(&toy).output().unwrap());
    assert_eq!(std::fs::read_dir(toy.join("masks")).unwrap().count(), 16);

    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, tiny_config(dir.path())).unwrap();
    let root = ok(bin().arg("pipeline").arg("--config").arg(&cfg).output().unwrap());
    let run = Path::new(root.trim());
    for f in ["sweep.csv", "three_way.csv", "mask_checkpoints.csv", "masks_gallery.png", "pairs_gallery.png"] {
        assert!(run.join("reports").join(f).is_file(), "missing {f}");
    }
    let sweep = std::fs::read_to_string(run.join("reports/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);

    let sel = ok(bin().arg("select").arg("--records").arg(run.join("reports/mask_checkpoints.json")).output().unwrap());
    assert!(sel.contains("\"id\":\"step-"));

    let re = dir.path().join("re");
    ok(bin().args(["report", "--stem", "sweep", "--input"]).arg(run.join("reports/sweep.json")).arg("--out").arg(&re).output().unwrap());
    assert_eq!(std::fs::read(re.join("sweep.csv")).unwrap(), sweep.as_bytes());

    let seg = dir.path().join("seg");
    let out = ok(bin()
        .args(["train-seg", "--resolution", "16", "--epochs", "1", "--model", "unet_small", "--train"])
        .arg(&toy)
        .arg("--test")
        .arg(&toy)
        .arg("--out")
        .arg(&seg)
        .output()
        .unwrap());
    assert!(out.contains("imagewise"));
    let audit = std::fs::read_to_string(seg.join("audit.csv")).unwrap();
    assert_eq!(audit.lines().count(), 17);
}

#[test]
fn select_reproduces_the_published_choice() {
    let dir = tempfile::tempdir().unwrap();
    let rows = [("0", 140.14), ("50k", 128.95), ("100k", 117.14), ("150k", 105.63), ("200k", 88.41), ("230k", 141.44)];
    let recs: Vec<_> = rows
        .iter()
        .map(|(id, fid)| serde_json::json!({"id": id, "fid": fid, "sim": null, "n_real": 0, "n_generated": 0}))
        .collect();
    let p = dir.path().join("r.json");
    std::fs::write(&p, serde_json::to_string(&recs).unwrap()).unwrap();
    let out = ok(bin().arg("select").arg("--records").arg(&p).output().unwrap());
    assert!(out.contains("\"id\":\"200k\""));
}

#[test]
fn failures_exit_nonzero_with_an_error_code() {
    let out = bin().args(["train-mask", "--config", "/nonexistent/exp.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let line: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii_end()).unwrap();
    assert_eq!(line["error"], "io_failure");

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.json");
    std::fs::write(&p, "[]").unwrap();
    let out = bin().arg("select").arg("--records").arg(&p).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let line: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii_end()).unwrap();
    assert_eq!(line["error"], "empty_list");
}

#[test]
fn default_config_parses_back() {
    let text = ok(bin().arg("default-config").output().unwrap());
    assert!(text.contains("[mixing]"));
    assert!(text.contains("synthetic_counts"));
}

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "seed = 3
resolution = 32
[data]
train_per_task = 1
test_per_task = 1
[recon]
base_width = 4
multipliers = [1, 2, 2, 4, 4]
time_dim = 8
[stage1]
steps = 5
[stage2]
steps = 3
";

fn dmfuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmfuse"))
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("DMFUSE_THREADS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\nbogus = 2\n");
    let o = dmfuse(dir.path(), &["--config", &cfg, "phantom"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config error"), "{}", stderr(&o));

    let o = dmfuse(dir.path(), &["ablate", "--mode", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no-amff"));
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = dmfuse(dir.path(), &["--config", &cfg, "fuse"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("recon.ckpt"));

    assert!(dmfuse(dir.path(), &["--config", &cfg, "phantom"])
        .status
        .success());
    std::fs::create_dir_all(dir.path().join("empty")).unwrap();
    let empty = dir.path().join("empty");
    let o = dmfuse(
        dir.path(),
        &[
            "--config",
            &cfg,
            "eval",
            "--fused-dir",
            empty.to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("mri-ct-test-000"), "{}", stderr(&o));
}

#[test]
fn tiny_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    for args in [
        &["phantom"][..],
        &["train-recon"],
        &["train-fusion"],
        &["fuse"],
        &["eval"],
    ] {
        let mut full = vec!["--config", cfg.as_str()];
        full.extend_from_slice(args);
        let o = dmfuse(dir.path(), &full);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let out = dir.path().join("out");
    for f in [
        "recon.ckpt",
        "fusion.ckpt",
        "recon_loss.csv",
        "fusion_loss.csv",
        "eval/all.csv",
        "eval/table.txt",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let m: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("train-fusion.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(m["command"], "train-fusion");
    assert_eq!(m["seed"], 3);

    // single pair, colour B: output is a colour PNG
    let a = out.join("data/mri-pet/test/mri-pet-test-000_A.png");
    let b = out.join("data/mri-pet/test/mri-pet-test-000_B.png");
    let o = dmfuse(
        dir.path(),
        &[
            "--config",
            &cfg,
            "fuse",
            "--a",
            a.to_str().unwrap(),
            "--b",
            b.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let fused: Vec<_> = std::fs::read_dir(out.join("fused")).unwrap().collect();
    assert!(!fused.is_empty());

    let o = Command::new(env!("CARGO_BIN_EXE_dmfuse"))
        .args(["--config", &cfg, "--out-dir"])
        .arg(&out)
        .arg("eval")
        .env("DMFUSE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("DMFUSE_THREADS"));

    // --seed overrides the config seed and is recorded
    let o = dmfuse(dir.path(), &["--config", &cfg, "--seed", "9", "phantom"]);
    assert!(o.status.success());
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("phantom.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m["seed"], 9);
}

//! End-to-end CLI checks on desk-scale configs: artifact layout, manifest
//! checksums, exit codes, and report output.

use std::path::Path;
use std::process::Command;

fn indlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_indlab"))
}

fn write_tiny_config(dir: &Path, name: &str, recipe: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{name}.json"));
    let body = serde_json::json!({
        "name": name,
        "recipe": recipe,
        "seed": 11,
        "output_dir": dir.join("runs"),
        "model": {
            "vocab": 16, "d_model": 16, "n_layers": 2, "n_heads": 1, "t_max": 16,
            "rope_theta": 10000.0, "use_mlp": false, "mlp_hidden": 16,
            "dropout_rate": 0.1, "final_ln": true, "init_std": 0.05
        },
        "train": {"steps": 40, "eval_every": 20, "ckpt_every": 20, "batch_size": 8},
        "data": {"alpha": 1.0, "l_set": [6], "t_max": 16},
        "measure": {"eval_set_size": 24, "probe_count": 6, "ood_seg_len": 6}
    });
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    path
}

#[test]
fn train_emits_schema_manifest_and_report_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path(), "tiny", "train_dynamics");
    let out = indlab().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let run_dir = dir.path().join("runs/tiny");
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), indlab::measures::CSV_HEADER);
    // step 0 + rows at 20 and 40
    assert_eq!(lines.count(), 3);
    assert!(run_dir.join("ckpt-40/weights.bin").exists());

    // manifest checksums match the emitted files
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    let artifacts = manifest["artifacts"].as_array().unwrap();
    assert!(!artifacts.is_empty());
    let listed: Vec<&str> = artifacts.iter().map(|a| a["path"].as_str().unwrap()).collect();
    assert!(listed.contains(&"metrics.csv"));
    for a in artifacts {
        let path = run_dir.join(a["path"].as_str().unwrap());
        let bytes = std::fs::read(&path).unwrap();
        use sha2::Digest as _;
        let digest = format!("{:x}", sha2::Sha256::digest(&bytes));
        assert_eq!(digest, a["sha256"].as_str().unwrap(), "checksum of {}", path.display());
    }

    // report prints the summary and writes summary.json
    let out = indlab().args(["report", "--run"]).arg(&run_dir).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("transition step"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("summary.json")).unwrap())
            .unwrap();
    assert!(summary["final_report"]["step"].as_u64().unwrap() >= 40);
    // report is idempotent
    let again = indlab().args(["report", "--run"]).arg(&run_dir).output().unwrap();
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn rerunning_train_reproduces_metrics_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path(), "twice", "train_dynamics");
    let run_dir = dir.path().join("runs/twice");
    let run = |_i: u32| {
        let out = indlab().args(["train", "--config"]).arg(&cfg).output().unwrap();
        assert!(out.status.success());
        std::fs::read(run_dir.join("metrics.csv")).unwrap()
    };
    let a = run(1);
    let b = run(2);
    assert_eq!(a, b, "metrics.csv must reproduce bit-exactly");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"name":"x","recipe":"train_dynamics","seed":0,"bogus":1}"#).unwrap();
    let out = indlab().args(["train", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    // wrong recipe for the subcommand is also a config error
    let cfg = write_tiny_config(dir.path(), "t2", "pool_sweep");
    let out = indlab().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn spiked_oracle_recipe_emits_pass_fail_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("spiked.json");
    let body = serde_json::json!({
        "name": "spiked",
        "recipe": "spiked_oracle",
        "seed": 5,
        "output_dir": dir.path().join("runs"),
        "spiked": {"d": 32, "r": 4, "k": 4, "noise_scale": 0.05, "delta": 1.5,
                    "cap": 10, "decoys": 1, "n_seeds": 3, "required_successes": 3}
    });
    std::fs::write(&cfg_path, serde_json::to_string(&body).unwrap()).unwrap();
    let out = indlab().args(["intervene", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS") || stdout.contains("FAIL"));
    let doc: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("runs/spiked/spiked_oracle.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(doc["pipeline"].as_array().unwrap().len(), 3);
}

#[test]
fn measure_subcommand_reports_on_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path(), "m", "train_dynamics");
    let out = indlab().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
    let ckpt = dir.path().join("runs/m/ckpt-40");
    let out = indlab()
        .args(["measure", "--config"])
        .arg(&cfg)
        .arg("--ckpt")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let doc: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(doc["report"]["id_err"].is_number());
    assert!(doc["head_scores"]["scores"].as_array().unwrap().len() == 2);
}

//! Command-line behavior: flag validation, config resolution, exit
//! codes, and artifact handling.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gmic")
}

fn work_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gmic_cli_{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn gen_tiny(dir: &PathBuf, name: &str, seed: u64) {
    let status = Command::new(bin())
        .current_dir(dir)
        .args([
            "gen-data", "--n", "24", "--classes", "3", "--len-v", "3", "--len-s", "3", "--len-t",
            "3", "--dim-v", "5", "--dim-s", "5", "--dim-t", "4", "--seed",
        ])
        .arg(seed.to_string())
        .args(["--out", name])
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn gen_data_is_deterministic_across_invocations() {
    let dir = work_dir("gen_det");
    gen_tiny(&dir, "a.gmic", 5);
    gen_tiny(&dir, "b.gmic", 5);
    let a = std::fs::read(dir.join("a.gmic")).unwrap();
    let b = std::fs::read(dir.join("b.gmic")).unwrap();
    assert_eq!(a, b, "same flags must produce identical files");
}

#[test]
fn gen_data_rejects_single_class() {
    let dir = work_dir("gen_one_class");
    let status = Command::new(bin())
        .current_dir(&dir)
        .args(["gen-data", "--n", "8", "--classes", "1", "--out", "x.gmic"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn zero_epoch_training_saves_init_params_and_writes_no_metrics() {
    let dir = work_dir("zero_epochs");
    gen_tiny(&dir, "d.gmic", 1);
    let out = Command::new(bin())
        .current_dir(&dir)
        .args([
            "train", "--data", "d.gmic", "--epochs", "0", "--d", "8", "--n-heads", "2",
            "--params-out", "p.gmwt", "--metrics-out", "m.jsonl", "--manifest-out", "r.manifest",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.join("m.jsonl")).unwrap();
    assert!(metrics.is_empty(), "no epochs means an empty history");
    assert!(dir.join("p.gmwt").exists(), "params saved at init");
    assert!(dir.join("r.manifest").exists());
}

#[test]
fn unknown_config_key_is_a_hard_error() {
    let dir = work_dir("bad_key");
    gen_tiny(&dir, "d.gmic", 2);
    std::fs::write(dir.join("run.conf"), "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let out = Command::new(bin())
        .current_dir(&dir)
        .args(["train", "--data", "d.gmic", "--config", "run.conf"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate"), "error names the offending key: {err}");
}

#[test]
fn flags_override_config_file_values() {
    let dir = work_dir("resolution");
    gen_tiny(&dir, "d.gmic", 3);
    std::fs::write(dir.join("run.conf"), "epochs = 1\nd = 8\nn_heads = 2\nseed = 5\n").unwrap();
    let out = Command::new(bin())
        .current_dir(&dir)
        .args([
            "train", "--data", "d.gmic", "--config", "run.conf", "--epochs", "2",
            "--manifest-out", "r.manifest",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(dir.join("r.manifest")).unwrap();
    assert!(manifest.contains("epochs = 2"), "flag wins over config file");
    assert!(manifest.contains("d = 8"), "config file wins over default");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with('{')).count(), 2);
}

#[test]
fn manifest_plus_dataset_reproduces_the_metrics() {
    let dir = work_dir("manifest_repro");
    gen_tiny(&dir, "d.gmic", 4);
    let out = Command::new(bin())
        .current_dir(&dir)
        .args([
            "train", "--data", "d.gmic", "--epochs", "3", "--d", "8", "--n-heads", "2", "--seed",
            "11", "--metrics-out", "m1.jsonl", "--manifest-out", "r.manifest",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // rerun from the manifest alone, overriding only the metrics path
    let out = Command::new(bin())
        .current_dir(&dir)
        .args([
            "train", "--manifest", "r.manifest", "--metrics-out", "m2.jsonl", "--manifest-out",
            "r2.manifest",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m1 = std::fs::read(dir.join("m1.jsonl")).unwrap();
    let m2 = std::fs::read(dir.join("m2.jsonl")).unwrap();
    assert_eq!(m1, m2, "a manifest must reproduce its run");
}

#[test]
fn eval_loads_saved_params_and_reports() {
    let dir = work_dir("eval_roundtrip");
    gen_tiny(&dir, "d.gmic", 6);
    let out = Command::new(bin())
        .current_dir(&dir)
        .args([
            "train", "--data", "d.gmic", "--epochs", "2", "--d", "8", "--n-heads", "2",
            "--params-out", "p.gmwt", "--manifest-out", "r.manifest",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for _ in 0..2 {
        let out = Command::new(bin())
            .current_dir(&dir)
            .args([
                "eval", "--data", "d.gmic", "--manifest", "r.manifest", "--params", "p.gmwt",
                "--export-embeddings", "emb.gmic",
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("\"ua\":"));
        assert!(stdout.contains("alignment skl_vs="));
    }
    assert!(dir.join("emb.gmic").exists());
}

#[test]
fn gradcheck_reports_every_group_once_and_fault_injection_fails() {
    let out = Command::new(bin()).args(["gradcheck", "--scale", "tiny"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let group_lines: Vec<&str> = stdout.lines().filter(|l| l.starts_with("group ")).collect();
    assert_eq!(group_lines.len(), 16, "sixteen parameter groups:\n{stdout}");
    let mut names: Vec<&str> = group_lines
        .iter()
        .map(|l| l.split_whitespace().nth(1).unwrap())
        .collect();
    let before = names.len();
    names.sort_unstable();
    names.dedup();
    assert_eq!(before, names.len(), "each group listed exactly once");

    let out = Command::new(bin())
        .args(["gradcheck", "--scale", "tiny", "--inject-fault"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "fault injection must fail with the numerical exit code");
}

#[test]
fn diverging_run_exits_with_the_numerical_code() {
    let dir = work_dir("diverge");
    gen_tiny(&dir, "d.gmic", 8);
    // an absurd learning rate overflows f32 within a couple of steps
    let out = Command::new(bin())
        .current_dir(&dir)
        .args([
            "train", "--data", "d.gmic", "--epochs", "5", "--d", "8", "--n-heads", "2", "--lr",
            "1e18",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("epoch") || err.contains("gradient"),
        "diagnostics name the failing epoch or parameter: {err}"
    );
}

#[test]
fn ablate_emits_four_variant_rows_per_seed_and_medians() {
    let dir = work_dir("ablate");
    gen_tiny(&dir, "d.gmic", 9);
    let out = Command::new(bin())
        .current_dir(&dir)
        .args([
            "ablate", "--data", "d.gmic", "--seeds", "2", "--epochs", "1", "--d", "8", "--n-heads",
            "2", "--folds", "3",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for seed in ["7", "8"] {
        for variant in ["full", "no_msr", "no_mir", "no_mic"] {
            let count = stdout
                .lines()
                .filter(|l| l.starts_with(variant) && l.split_whitespace().nth(1) == Some(seed))
                .count();
            assert_eq!(count, 1, "variant {variant} seed {seed}:\n{stdout}");
        }
    }
    let median_rows = stdout
        .lines()
        .skip_while(|l| !l.starts_with("median"))
        .skip(1)
        .count();
    assert_eq!(median_rows, 4, "one median row per variant:\n{stdout}");
}

#[test]
fn missing_dataset_is_a_data_error() {
    let out = Command::new(bin())
        .args(["train", "--data", "/nonexistent/nowhere.gmic", "--epochs", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

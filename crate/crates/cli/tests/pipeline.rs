//! End-to-end tests of the compiled binary: every subcommand, exit codes,
//! determinism of artifacts, and output-root redirection.

use std::path::Path;
use std::process::{Command, Output};

const RUN_CONFIG: &str = r#"
[model]
backbone_channels = [4, 6, 8]
d_model = 8
encoder_layers = 1
decoder_layers = 1
num_heads = 2
ffn_dim = 16
num_queries = 4
num_object_classes = 2
num_action_classes = 2

[train]
epochs = 2
learning_rate = 1e-3
lr_drop_epoch = 0
batch_size = 2
seed = 7

[finetune]
epochs = 1
learning_rate = 1e-4
lr_drop_epoch = 0
batch_size = 2
seed = 7

[data]
num_images = 4
image_size = 32
num_object_classes = 2
num_action_classes = 2

[reweight]
object_queue = 16
action_queue = 16
"#;

const SCENE_SPEC: &str = r#"
num_images = 4
image_size = 32
num_object_classes = 2
num_action_classes = 2
"#;

fn hoidet(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hoidet"));
    cmd.args(args).env_remove("HOIDET_OUT_ROOT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup_dataset(dir: &Path) -> (String, String) {
    let spec = dir.join("scene.toml");
    std::fs::write(&spec, SCENE_SPEC).unwrap();
    let data = dir.join("data");
    let out = hoidet(
        &[
            "generate-data",
            "--spec",
            spec.to_str().unwrap(),
            "--seed",
            "11",
            "--out",
            data.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&out, "generate-data");
    let config = dir.join("run.toml");
    std::fs::write(&config, RUN_CONFIG).unwrap();
    (
        data.to_str().unwrap().to_string(),
        config.to_str().unwrap().to_string(),
    )
}

#[test]
fn full_pipeline_and_artifact_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup_dataset(dir.path());

    for name in ["annotations.jsonl", "classes.jsonl", "images/img_00000.png"] {
        assert!(Path::new(&data).join(name).exists(), "{name} missing");
    }

    let ckpt_a = dir.path().join("a.ckpt.json");
    let ckpt_b = dir.path().join("b.ckpt.json");
    for ckpt in [&ckpt_a, &ckpt_b] {
        let out = hoidet(
            &[
                "train",
                "--config",
                &config,
                "--data",
                &data,
                "--out",
                ckpt.to_str().unwrap(),
            ],
            &[],
        );
        assert_ok(&out, "train");
    }
    let bytes_a = std::fs::read(&ckpt_a).unwrap();
    let bytes_b = std::fs::read(&ckpt_b).unwrap();
    assert_eq!(bytes_a, bytes_b, "training is not deterministic");

    let tuned = dir.path().join("tuned.ckpt.json");
    let out = hoidet(
        &[
            "finetune-reweight",
            "--config",
            &config,
            "--data",
            &data,
            "--checkpoint",
            ckpt_a.to_str().unwrap(),
            "--out",
            tuned.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&out, "finetune-reweight");

    let preds_a = dir.path().join("preds_a.jsonl");
    let preds_b = dir.path().join("preds_b.jsonl");
    for preds in [&preds_a, &preds_b] {
        let out = hoidet(
            &[
                "infer",
                "--checkpoint",
                tuned.to_str().unwrap(),
                "--images",
                &data,
                "--out",
                preds.to_str().unwrap(),
                "--config",
                &config,
            ],
            &[],
        );
        assert_ok(&out, "infer");
    }
    assert_eq!(
        std::fs::read(&preds_a).unwrap(),
        std::fs::read(&preds_b).unwrap(),
        "inference is not deterministic"
    );

    let report_a = dir.path().join("report_a.txt");
    let report_b = dir.path().join("report_b.txt");
    for (preds, report) in [(&preds_a, &report_a), (&preds_b, &report_b)] {
        let out = hoidet(
            &[
                "eval",
                "--preds",
                preds.to_str().unwrap(),
                "--gt",
                &format!("{data}/annotations.jsonl"),
                "--classes",
                &format!("{data}/classes.jsonl"),
                "--report",
                report.to_str().unwrap(),
            ],
            &[],
        );
        assert_ok(&out, "eval");
        let text = std::fs::read_to_string(report).unwrap();
        assert!(text.contains("mAP full"), "report missing summary: {text}");
    }
    assert_eq!(
        std::fs::read(&report_a).unwrap(),
        std::fs::read(&report_b).unwrap(),
        "evaluation is not deterministic"
    );
}

#[test]
fn resume_continues_and_fingerprint_guard_rejects() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup_dataset(dir.path());

    let ckpt = dir.path().join("main.ckpt.json");
    let out = hoidet(
        &[
            "train",
            "--config",
            &config,
            "--data",
            &data,
            "--out",
            ckpt.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&out, "train");

    // Same config: resuming runs zero additional epochs and succeeds.
    let resumed = dir.path().join("resumed.ckpt.json");
    let out = hoidet(
        &[
            "train",
            "--config",
            &config,
            "--data",
            &data,
            "--out",
            resumed.to_str().unwrap(),
            "--resume",
            ckpt.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&out, "resume");

    // A changed schedule changes the fingerprint and must be refused.
    let other_config = dir.path().join("other.toml");
    std::fs::write(
        &other_config,
        RUN_CONFIG.replace("learning_rate = 1e-3", "learning_rate = 2e-3"),
    )
    .unwrap();
    let out = hoidet(
        &[
            "train",
            "--config",
            other_config.to_str().unwrap(),
            "--data",
            &data,
            "--out",
            resumed.to_str().unwrap(),
            "--resume",
            ckpt.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("different configuration"), "{stderr}");
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "definitely_not_a_key = true\n").unwrap();
    let out = hoidet(
        &[
            "train",
            "--config",
            bad.to_str().unwrap(),
            "--data",
            "nowhere",
            "--out",
            "x.json",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));

    let out = hoidet(
        &[
            "eval",
            "--preds",
            "missing.jsonl",
            "--gt",
            "missing.jsonl",
            "--classes",
            "missing.jsonl",
            "--report",
            "r.txt",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup_dataset(dir.path());

    let ckpt = dir.path().join("main.ckpt.json");
    let out = hoidet(
        &[
            "train",
            "--config",
            &config,
            "--data",
            &data,
            "--out",
            ckpt.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&out, "train");

    // Flood the encoder attention projections with huge values: query-key
    // products overflow to infinity and the softmax turns them into NaN.
    // Rewind the epoch counter so resuming has work left to do.
    let mut ckpt_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&ckpt).unwrap()).unwrap();
    for name in ["encoder.0.attn.wq", "encoder.0.attn.wk"] {
        let data = ckpt_json["params"][name]["data"].as_array_mut().unwrap();
        for entry in data.iter_mut() {
            *entry = serde_json::Value::from(1e308);
        }
    }
    ckpt_json["epochs_completed"] = serde_json::Value::from(0);
    std::fs::write(&ckpt, serde_json::to_string(&ckpt_json).unwrap()).unwrap();

    let out = hoidet(
        &[
            "train",
            "--config",
            &config,
            "--data",
            &data,
            "--out",
            dir.path().join("out.ckpt.json").to_str().unwrap(),
            "--resume",
            ckpt.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn dump_attention_writes_two_normalized_maps() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup_dataset(dir.path());
    let ckpt = dir.path().join("main.ckpt.json");
    let out = hoidet(
        &[
            "train",
            "--config",
            &config,
            "--data",
            &data,
            "--out",
            ckpt.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&out, "train");

    let maps_dir = dir.path().join("maps");
    let out = hoidet(
        &[
            "dump-attention",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            &format!("{data}/images/img_00001.png"),
            "--out",
            maps_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&out, "dump-attention");
    let mut entries: Vec<String> = std::fs::read_dir(&maps_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    entries.sort();
    assert_eq!(entries, vec!["img_00001_action.png", "img_00001_pair.png"]);
}

#[test]
fn out_root_env_redirects_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("scene.toml");
    std::fs::write(&spec, SCENE_SPEC).unwrap();
    let root = dir.path().join("root");
    std::fs::create_dir_all(&root).unwrap();
    let out = hoidet(
        &[
            "generate-data",
            "--spec",
            spec.to_str().unwrap(),
            "--seed",
            "1",
            "--out",
            "nested/data",
        ],
        &[("HOIDET_OUT_ROOT", root.to_str().unwrap())],
    );
    assert_ok(&out, "generate-data under out root");
    assert!(root.join("nested/data/annotations.jsonl").exists());
}

//! End-to-end CLI checks: pipeline subcommands, exit-code contract
//! (0 owned / 2 not owned / 1 error), and the line-protocol remote stub.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use textmark_core::corpus::CorpusFormat;
use textmark_core::model::Arch;
use textmark_core::run::{CorpusSpec, RunConfig};
use textmark_core::training::TrainConfig;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_textmark")
}

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn textmark")
}

fn assert_code(out: &Output, code: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{what}: stdout={} stderr={}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path) -> PathBuf {
    let config = RunConfig {
        created_at: "2026-08-09T00:00:00Z".to_string(),
        corpus: CorpusSpec {
            train_path: "train.jsonl".to_string(),
            test_path: "test.jsonl".to_string(),
            format: CorpusFormat::Jsonl,
            num_classes: 2,
        },
        alt_corpus: None,
        arch: Arch::TextCnn,
        embed_dim: 16,
        hidden_dim: 12,
        max_len: 32,
        vocab_min_freq: 1,
        vocab_max_size: 20000,
        train: TrainConfig {
            epochs: 5,
            ..TrainConfig::desk(5, 11)
        },
        embed: TrainConfig {
            epochs: 10,
            ..TrainConfig::desk(10, 11)
        },
        m_per_class: 2,
        n_auth_pairs: 30,
        wm_rows: 8,
        wm_cols: 2,
        wm_density: 0.5,
        owner_seed: 99,
        kappa1_path: "owner.key".to_string(),
        owner_info: "CLI Test Owner".to_string(),
        output_dir: "run".to_string(),
    };
    let path = dir.join("config.json");
    config.save(&path).unwrap();
    path
}

#[test]
fn full_pipeline_exit_codes_and_remote_stub() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    assert_code(
        &run(
            &[
                "gen-corpus",
                "--kind",
                "sent2",
                "--seed",
                "7",
                "--train",
                "400",
                "--test",
                "80",
                "--out-train",
                "train.jsonl",
                "--out-test",
                "test.jsonl",
            ],
            d,
        ),
        0,
        "gen-corpus",
    );
    assert_code(
        &run(&["gen-key", "--out", "owner.key", "--seed", "5"], d),
        0,
        "gen-key",
    );
    write_config(d);

    assert_code(&run(&["train-clean", "--config", "config.json"], d), 0, "train-clean");
    assert_code(&run(&["gen-material", "--config", "config.json"], d), 0, "gen-material");
    assert_code(&run(&["embed", "--config", "config.json"], d), 0, "embed");

    // Owned: the watermarked checkpoint answers the trigger labels.
    let out = run(
        &[
            "verify",
            "--config",
            "config.json",
            "--suspect",
            "run/checkpoints/watermarked.ckpt",
            "--channel",
            "blackbox",
        ],
        d,
    );
    assert_code(&out, 0, "verify watermarked");

    // Not owned: the clean checkpoint fails the trigger test (exit 2).
    let out = run(
        &[
            "verify",
            "--config",
            "config.json",
            "--suspect",
            "run/checkpoints/clean.ckpt",
            "--channel",
            "blackbox",
        ],
        d,
    );
    assert_code(&out, 2, "verify clean");

    // Whitebox channel produces a report file.
    let out = run(
        &[
            "verify",
            "--config",
            "config.json",
            "--suspect",
            "run/checkpoints/watermarked.ckpt",
            "--channel",
            "whitebox",
        ],
        d,
    );
    assert!(
        matches!(out.status.code(), Some(0) | Some(2)),
        "whitebox verify must decide"
    );
    assert!(d.join("run/reports/verify_whitebox.json").exists());

    // Remote simulation: verify through a spawned label server speaking the
    // line protocol; must agree with the local-checkpoint client.
    let serve_cmd = format!(
        "{} serve --checkpoint run/checkpoints/watermarked.ckpt --vocab run/material/vocab.json --max-len 32",
        bin()
    );
    let out = run(
        &[
            "verify",
            "--config",
            "config.json",
            "--suspect-cmd",
            &serve_cmd,
            "--channel",
            "blackbox",
        ],
        d,
    );
    assert_code(&out, 0, "verify via remote stub");

    // Pruning attack runs and records its report.
    let out = run(
        &["attack", "--config", "config.json", "--attack", "prune"],
        d,
    );
    assert_code(&out, 0, "attack prune");
    assert!(d.join("run/reports/attack_prune_random.json").exists());
    assert!(d.join("run/curves/attack_prune_random.csv").exists());

    // Summary report.
    let out = run(&["report", "--run-dir", "run"], d);
    assert_code(&out, 0, "report");
    assert!(d.join("run/reports/summary.md").exists());
    assert!(d.join("run/reports/summary.json").exists());

    // Errors exit 1, not 2.
    assert_code(
        &run(
            &["verify", "--config", "config.json", "--channel", "bogus"],
            d,
        ),
        1,
        "bad channel",
    );
    assert_code(
        &run(
            &["attack", "--config", "config.json", "--attack", "bogus"],
            d,
        ),
        1,
        "bad attack",
    );
    assert_code(&run(&["definitely-not-a-command"], d), 1, "bad subcommand");
}

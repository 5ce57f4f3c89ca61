use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stk_core::data::synthetic::{recurring_tkg, RecurringConfig};

fn stk(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stk"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn stk")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Writes a small recurring-pair dataset and a config pointing at it.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let (g, split) = recurring_tkg(&RecurringConfig {
        num_entities: 8,
        num_relations: 2,
        num_times: 20,
        ..RecurringConfig::default()
    })
    .unwrap();
    for (name, range) in [("train.txt", split.train), ("valid.txt", split.valid), ("test.txt", split.test)] {
        let mut text = String::new();
        for f in &g.facts()[range] {
            if !g.is_inverse(f.relation) {
                text.push_str(&format!(
                    "{}\t{}\t{}\t{}\n",
                    g.entity_name(f.subject),
                    g.relation_name(f.relation),
                    g.entity_name(f.object),
                    g.raw_times()[f.timestamp as usize]
                ));
            }
        }
        fs::write(dir.path().join(name), text).unwrap();
    }
    let cfg = dir.path().join("stk.toml");
    fs::write(
        &cfg,
        r#"
[data]
train = "train.txt"
valid = "valid.txt"
test = "test.txt"

[rules]
max_events = 3
walks_per_relation = 20
max_body_len = 1

[encoder]
dim = 4
epochs = 1

[backbone]
d_t = 16
n_layers = 2
n_heads = 2
d_ffn = 32
max_seq_len = 64
pretrain_epochs = 1

[adapter]
d_k = 4

[training]
epochs = 1

[inference]
beam_width = 4
"#,
    )
    .unwrap();
    (dir, cfg)
}

fn run_pipeline(dir: &Path, run: &str) -> String {
    for sub in ["ingest", "pretrain-encoder", "mine-rules", "build-instructions", "train", "eval"] {
        let o = stk(dir, &["--config", "stk.toml", "--run", run, sub]);
        assert_eq!(code(&o), 0, "{sub}: {}", String::from_utf8_lossy(&o.stderr));
        let out = String::from_utf8_lossy(&o.stdout);
        assert_eq!(out.lines().count(), 1, "{sub} summary: {out}");
        assert!(out.starts_with(sub));
    }
    fs::read_to_string(dir.join("runs").join(run).join("eval.txt")).unwrap()
}

#[test]
fn full_pipeline_writes_versioned_artifacts_and_repeats() {
    let (dir, _) = workspace();
    let a = run_pipeline(dir.path(), "a");
    let b = run_pipeline(dir.path(), "b");
    assert_eq!(a, b);
    assert!(a.starts_with("# stk eval v1\n"));
    let run = dir.path().join("runs/a");
    assert!(fs::read_to_string(run.join("rules.txt")).unwrap().starts_with("# stk rules v1"));
    assert!(fs::read_to_string(run.join("routing_stats.txt")).unwrap().starts_with("# stk routing v1"));
    assert!(fs::read_to_string(run.join("instructions/train.jsonl")).unwrap().starts_with("{\"format\":\"stk-examples\""));
    assert!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().contains("\"phase\":\"adapter\""));
    assert_eq!(&fs::read(run.join("dataset.bin")).unwrap()[..7], b"STKDATA");
    assert!(run.join("eval.config.toml").exists());
    assert!(!run.join(".lock").exists());

    let o = stk(dir.path(), &["--config", "stk.toml", "--run", "a", "routing-stats"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    // Only the hybrid ranking depends on lambda.
    let o = stk(dir.path(), &["--config", "stk.toml", "--run", "a", "eval", "--lambda", "0"]);
    assert_eq!(code(&o), 0);
    let zero = fs::read_to_string(run.join("eval.txt")).unwrap();
    assert!(zero.contains("lambda\t0\n"));
    let strip = |s: &str| s.lines().filter(|l| !l.starts_with("lambda") && !l.starts_with("hit")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&zero), strip(&a));
}

#[test]
fn ablation_flags_compose() {
    let (dir, _) = workspace();
    run_pipeline(dir.path(), "full");
    let o = stk(
        dir.path(),
        &["--config", "stk.toml", "--run", "full", "train", "--disable-st-moe", "--disable-cma-moe"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echo = fs::read_to_string(dir.path().join("runs/full/train.config.toml")).unwrap();
    assert!(echo.contains("disable_st_moe = true") && echo.contains("disable_cma_moe = true"));
    let o = stk(
        dir.path(),
        &["--config", "stk.toml", "--run", "full", "eval", "--disable-st-moe", "--disable-cma-moe", "--disable-ea-moe"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn error_categories_map_to_exit_codes() {
    let (dir, _) = workspace();
    let p = dir.path();
    // Unknown subcommand.
    assert_eq!(code(&stk(p, &["frobnicate"])), 2);
    // Invalid configuration values and unknown keys.
    assert_eq!(code(&stk(p, &["--config", "stk.toml", "eval", "--lambda", "2"])), 2);
    assert_eq!(code(&stk(p, &["--config", "stk.toml", "--rules.bogus", "1", "ingest"])), 2);
    assert_eq!(code(&stk(p, &["ingest"])), 2);
    // Missing upstream artifacts.
    let o = stk(p, &["--config", "stk.toml", "--run", "m", "build-instructions"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&stk(p, &["--config", "missing.toml", "ingest"])), 3);
    let o = stk(p, &["--config", "stk.toml", "--run", "m", "ingest"]);
    assert_eq!(code(&o), 0);
    let o = stk(p, &["--config", "stk.toml", "--run", "m", "build-instructions"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("rules.txt"));
    // A held lock.
    fs::write(p.join("runs/m/.lock"), "1").unwrap();
    assert_eq!(code(&stk(p, &["--config", "stk.toml", "--run", "m", "mine-rules"])), 1);
}

#[test]
fn non_finite_training_is_a_numerical_failure() {
    let (dir, _) = workspace();
    let p = dir.path();
    for sub in ["ingest", "pretrain-encoder", "mine-rules", "build-instructions"] {
        assert_eq!(code(&stk(p, &["--config", "stk.toml", "--run", "n", sub])), 0);
    }
    let o = stk(p, &["--config", "stk.toml", "--run", "n", "--backbone.pretrain_learning_rate", "1e300", "train"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

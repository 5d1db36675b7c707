use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "numeric_mode = f64
steps = 6
eval_every = 3
eval_batches = 1
eval_batch = 4
batch = 4
model.layout = SMAM
model.d_model = 16
model.n_heads = 2
model.ffn_hidden = 32
task.seq_len = 24
task.n_pairs = 3
task.n_queries = 2
";

fn otce(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otce"))
        .args(args)
        .current_dir(dir)
        .env_remove("OTCE_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), SMALL).unwrap();
    let o = otce(
        &[
            "train",
            "--config",
            "run.cfg",
            "--metrics",
            "m.jsonl",
            "--ckpt",
            "ckpt",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("checkpoint written"));

    let recs =
        otce::harness::read_metrics(&std::fs::read_to_string(dir.path().join("m.jsonl")).unwrap())
            .unwrap();
    assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), [3, 6]);
    assert!(recs.iter().all(|r| r.wall_ms.is_none()));

    let o = otce(
        &[
            "eval",
            "--ckpt",
            "ckpt",
            "--task",
            "mqar:seq_len=24,n_pairs=3,n_queries=2",
            "--batches",
            "1",
            "--batch",
            "4",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // Same weights, eval batches and arithmetic as the final record.
    let loss: f64 = stdout(&o)
        .split_whitespace()
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(
        (loss - recs[1].eval_loss).abs() < 1e-4,
        "{loss} vs {}",
        recs[1].eval_loss
    );

    let o = otce(&["report", "--metrics", "m.jsonl"], dir.path());
    assert!(o.status.success());
    assert!(!stdout(&o).is_empty());
}

#[test]
fn seed_env_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), SMALL).unwrap();
    let run = |seed: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_otce"));
        c.args(["train", "--config", "run.cfg", "--metrics", out])
            .current_dir(dir.path());
        match seed {
            Some(s) => c.env("OTCE_SEED", s),
            None => c.env_remove("OTCE_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let base = run(None, "a.jsonl");
    assert_eq!(base, run(Some("0"), "b.jsonl"));
    assert_ne!(base, run(Some("5"), "c.jsonl"));
}

#[test]
fn bad_inputs_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "model.widht = 3\n").unwrap();
    let o = otce(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("widht"));

    std::fs::write(dir.path().join("layout.cfg"), "model.layout = SMQM\n").unwrap();
    let o = otce(&["train", "--config", "layout.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("position 2"));

    let o = otce(&["verify", "nonsense"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = otce(
        &["ablate", "--axis", "depth", "--config", "bad.cfg"],
        dir.path(),
    );
    assert!(!o.status.success());
}

#[test]
fn verify_suites_print_passing_checks() {
    let dir = tempfile::tempdir().unwrap();
    for suite in ["rope", "cost", "moe"] {
        let o = otce(&["verify", suite], dir.path());
        assert!(o.status.success(), "{}", stdout(&o));
        let text = stdout(&o);
        assert!(text.lines().filter(|l| l.starts_with("[PASS]")).count() >= 1);
        assert!(text.contains("0 failed"));
    }
}

#[test]
fn ablation_ranks_every_rope_mode() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        format!("{SMALL}steps = 2\neval_every = 2\n"),
    )
    .unwrap();
    let o = otce(
        &["ablate", "--axis", "rope_mode", "--config", "run.cfg"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for mode in ["none", "attn", "ssm", "both"] {
        assert!(text.contains(mode), "{text}");
    }
    assert_eq!(text.lines().count(), 5);
}

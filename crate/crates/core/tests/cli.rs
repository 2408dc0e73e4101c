//! End-to-end exercises of the `signfuse` binary: exit codes, output
//! files, and the clobber guard. Exit convention: 0 success, 1 usage
//! error, 2 runtime failure.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

const BIN: &str = env!("CARGO_BIN_EXE_signfuse");

/// Small-but-complete run configuration: every stage finishes in well
/// under a second, and the test split still carries at least three
/// distinct sign tokens so the embedding export has enough labels.
const TINY_CONF: &str = "d_model=8\nn_heads=2\nprompt_len=2\nbase_res=4\nmouth_h=4\nmouth_w=6\n\
                         lora_rank=2\nkernel_width=3\nn_signs=8\nn_pairs=2\nframes_per_sign=2\n\
                         sent_min=2\nsent_max=3\nframe_h=16\nframe_w=16\ntrain_size=6\n\
                         valid_size=2\ntest_size=2\nepochs=2\nbatch_size=3\nlr=1e-3\nseed=11\n";

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn binary")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("binary terminated without an exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    let help = run(&["--help"]);
    assert_eq!(code(&help), 0, "--help: {}", stderr(&help));
    let text = String::from_utf8_lossy(&help.stdout).into_owned();
    for sub in ["generate", "train", "eval", "ablate", "export-emb"] {
        assert!(text.contains(sub), "--help output missing {sub}: {text}");
    }
    assert_eq!(code(&run(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    // No subcommand at all.
    assert_eq!(code(&run(&[])), 1);
    // Unknown subcommand.
    assert_eq!(code(&run(&["frobnicate"])), 1);
    // Known subcommand, missing required flag.
    assert_eq!(code(&run(&["generate"])), 1);
    // Unknown flag.
    assert_eq!(code(&run(&["generate", "--out", "x", "--loud"])), 1);
}

#[test]
fn runtime_failures_exit_two_with_error_line() {
    let dir = tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = run(&[
        "eval",
        "--ckpt",
        missing.to_str().unwrap(),
        "--corpus",
        dir.path().join("nocorpus").to_str().unwrap(),
        "--out",
        dir.path().join("evalout").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).starts_with("error:"), "stderr: {}", stderr(&out));

    // A config file that fails to parse is also a runtime failure.
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "warp_speed=9\n").unwrap();
    let out = run(&[
        "generate",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("corpus").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("warp_speed"), "stderr: {}", stderr(&out));
}

#[test]
fn generate_train_eval_export_round_trip() {
    let dir = tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, TINY_CONF).unwrap();
    let conf = conf.to_str().unwrap();
    let corpus = dir.path().join("corpus");
    let trained = dir.path().join("trained");
    let scored = dir.path().join("scored");
    let emb = dir.path().join("emb.tsv");

    let gen = run(&["generate", "--config", conf, "--out", corpus.to_str().unwrap()]);
    assert_eq!(code(&gen), 0, "generate: {}", stderr(&gen));
    for sub in ["train", "valid", "test"] {
        assert!(corpus.join(sub).join("targets.tsv").is_file(), "missing {sub} targets");
    }
    assert!(corpus.join("corpus.meta").is_file());

    // The clobber guard refuses to overwrite without --force.
    let again = run(&["generate", "--config", conf, "--out", corpus.to_str().unwrap()]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"), "stderr: {}", stderr(&again));
    let forced = run(&[
        "generate", "--config", conf, "--out", corpus.to_str().unwrap(), "--force",
    ]);
    assert_eq!(code(&forced), 0, "forced regenerate: {}", stderr(&forced));

    let train = run(&[
        "train",
        "--config",
        conf,
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        trained.to_str().unwrap(),
    ]);
    assert_eq!(code(&train), 0, "train: {}", stderr(&train));
    assert!(trained.join("model.ckpt").is_file());
    let log = std::fs::read_to_string(trained.join("train_log.tsv")).unwrap();
    assert!(log.starts_with("epoch\t"), "log header: {log}");
    assert_eq!(log.lines().count(), 3, "2 epochs + header: {log}");

    let eval = run(&[
        "eval",
        "--config",
        conf,
        "--ckpt",
        trained.join("model.ckpt").to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        scored.to_str().unwrap(),
    ]);
    assert_eq!(code(&eval), 0, "eval: {}", stderr(&eval));
    let table = std::fs::read_to_string(scored.join("eval.tsv")).unwrap();
    assert!(table.starts_with("metric\tvalue"), "eval table: {table}");
    assert!(scored.join("hypotheses.tsv").is_file());

    let export = run(&[
        "export-emb",
        "--ckpt",
        trained.join("model.ckpt").to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        emb.to_str().unwrap(),
    ]);
    assert_eq!(code(&export), 0, "export-emb: {}", stderr(&export));
    let rows = std::fs::read_to_string(&emb).unwrap();
    assert!(rows.starts_with("token\tx\ty"), "export header: {rows}");
    assert!(rows.lines().count() > 1, "export should include data rows");
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, TINY_CONF).unwrap();
    let conf = conf.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (out, seed) in [(&a, "11"), (&b, "12"), (&c, "12")] {
        let r = run(&[
            "generate", "--config", conf, "--out", out.to_str().unwrap(), "--seed", seed,
        ]);
        assert_eq!(code(&r), 0, "generate seed {seed}: {}", stderr(&r));
    }
    // Same seed → identical metadata; different seed → different corpus.
    let meta = |p: &Path| std::fs::read_to_string(p.join("corpus.meta")).unwrap();
    assert_eq!(meta(&b), meta(&c));
    assert_ne!(meta(&a), meta(&b));
    let video = |p: &Path| {
        let split = p.join("train");
        let mut names: Vec<_> = std::fs::read_dir(&split)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".video"))
            .collect();
        names.sort();
        std::fs::read(split.join(&names[0])).unwrap()
    };
    assert_eq!(video(&b), video(&c));
    assert_ne!(video(&a), video(&b));
}

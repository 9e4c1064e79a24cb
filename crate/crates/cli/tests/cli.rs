use std::path::Path;
use std::process::{Command, Output};

fn hoi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hoi-grpo"))
        .args(args)
        .current_dir(dir)
        .env_remove("HOI_GRPO_JUDGE_ENDPOINT")
        .env_remove("HOI_GRPO_JUDGE_TIMEOUT_MS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_train_eval_ablate() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "n_scenes = 2\niterations = 30\ntemplate_cap = 16\nout_dir = out\n",
    )
    .unwrap();
    let cfg = ["--config", "run.cfg"];

    let o = hoi(dir.path(), &[&cfg[..], &["gen-synthetic"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let data = dir.path().join("out/dataset.jsonl");
    assert!(data.is_file());

    let o = hoi(dir.path(), &[&cfg[..], &["train"]].concat());
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 2);

    let d = data.to_str().unwrap();
    let o = hoi(dir.path(), &[&cfg[..], &["eval", "--dataset", d]].concat());
    assert!(o.status.success());
    assert!(stdout(&o).contains("H-mIOU") || stdout(&o).contains("h_miou"), "{}", stdout(&o));

    let o = hoi(dir.path(), &[&cfg[..], &["--out-dir", "abl", "ablate"]].concat());
    assert!(o.status.success());
    assert!(stdout(&o).contains("W/O CoTR"));
    assert!(dir.path().join("abl/ablation.json").is_file());
}

#[test]
fn seed_flag_changes_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| std::fs::read_to_string(dir.path().join(name).join("dataset.jsonl")).unwrap();
    for (seed, out) in [("1", "a"), ("1", "b"), ("2", "c")] {
        assert!(hoi(dir.path(), &["--seed", seed, "--out-dir", out, "gen-synthetic"]).status.success());
    }
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "group_size = 1\nfoo = 2\n").unwrap();
    let o = hoi(dir.path(), &["--config", "bad.cfg", "train"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("foo") && err.contains("group_size"), "{err}");

    let o = hoi(dir.path(), &["score"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset"));

    let o = hoi(dir.path(), &["--judge", "external", "train"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("endpoint"));
}

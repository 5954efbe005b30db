use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[synth]
n_word_types = 8
n_speakers = 4
speaker_split = [2, 1, 1]
exemplars_per_speaker_per_word = 3
semantic_dim = 16
semantic_cluster_count = 4

[model]
conv_filters = 8
gru_layers = 2
hidden = 16

[train]
epochs = 2
batch_size = 16
"#;

fn awe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_awe"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), format!("{SMALL}{extra}")).unwrap();
    let root = dir.path().to_path_buf();
    let o = awe(&["synth", "--config", "c.toml", "--out", "corpus"], &root);
    assert!(o.status.success(), "{}", stderr(&o));
    (dir, root)
}

#[test]
fn synth_default_preset_is_speaker_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = awe(&["synth", "--out", "corpus", "--seed", "5"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("train\t900\t30\t5"), "{out}");
    assert!(out.contains("valid\t180\t30\t1"), "{out}");
    assert!(out.contains("test\t360\t30\t2"), "{out}");

    let manifest = fs::read_to_string(dir.path().join("corpus/manifest.tsv")).unwrap();
    let mut speakers: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for line in manifest.lines().filter(|l| !l.starts_with("segment_id")) {
        let cols: Vec<&str> = line.split('\t').collect();
        speakers.entry(cols[3].to_string()).or_default().insert(cols[2].to_string());
    }
    assert_eq!(speakers.len(), 3);
    let sets: Vec<_> = speakers.values().collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(sets[i].is_disjoint(sets[j]));
        }
    }
    assert!(dir.path().join("corpus/config.toml").is_file());

    let again = awe(&["synth", "--out", "corpus2", "--seed", "5"], dir.path());
    assert_eq!(stdout(&again), out);
}

#[test]
fn synth_refuses_non_empty_dir_and_bad_config() {
    let (_d, root) = setup("");
    let o = awe(&["synth", "--config", "c.toml", "--out", "corpus"], &root);
    assert_eq!(o.status.code(), Some(2));
    let o = awe(&["synth", "--config", "c.toml", "--out", "corpus", "--force"], &root);
    assert!(o.status.success());

    fs::write(root.join("bad.toml"), "[synth]\nexemplars_per_speaker_per_word = 0\n").unwrap();
    let o = awe(&["synth", "--config", "bad.toml", "--out", "other"], &root);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    fs::write(root.join("typo.toml"), "[synth]\nexemplar = 2\n").unwrap();
    let o = awe(&["synth", "--config", "typo.toml", "--out", "other"], &root);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_eval_with_export() {
    let (_d, root) = setup("");
    let o = awe(&["train", "--config", "c.toml", "--corpus", "corpus", "--run-dir", "run"], &root);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root.join("run/best.ckpt").is_file());
    let csv = fs::read_to_string(root.join("run/epochs.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,phi,lambda,triplet,total,val_map,lr,seconds"));
    assert_eq!(csv.lines().count(), 3);
    let resolved = fs::read_to_string(root.join("run/config.toml")).unwrap();
    assert!(resolved.contains("hidden = 16"));
    assert!(!resolved.contains("phone_inventory_size = 0"));

    // an existing run is protected
    let o = awe(&["train", "--config", "c.toml", "--corpus", "corpus", "--run-dir", "run"], &root);
    assert_eq!(o.status.code(), Some(2));

    let o = awe(
        &["eval", "--config", "c.toml", "--checkpoint", "run/best.ckpt", "--corpus", "corpus", "--export", "emb.tsv", "--run-dir", "run"],
        &root,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["split"], "test");
    assert_eq!(report["n"], 8 * 3);
    let map = report["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert_eq!(fs::read_to_string(root.join("emb.tsv")).unwrap().lines().count(), 24);
    assert!(root.join("run/map_test.json").is_file());
}

#[test]
fn eval_errors() {
    let (_d, root) = setup("");
    let o = awe(&["eval", "--checkpoint", "missing.ckpt", "--corpus", "corpus"], &root);
    assert_eq!(o.status.code(), Some(2));

    let o = awe(&["train", "--config", "c.toml", "--corpus", "corpus", "--run-dir", "run", "--epochs", "1"], &root);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(root.join("wide.toml"), SMALL.replace("hidden = 16", "hidden = 24")).unwrap();
    let o = awe(&["eval", "--config", "wide.toml", "--checkpoint", "run/best.ckpt", "--corpus", "corpus"], &root);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("architecture mismatch"));

    let o = awe(&["eval", "--checkpoint", "run/best.ckpt", "--corpus", "corpus", "--split", "nowhere"], &root);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn contrastive_on_singleton_corpus_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("exemplars_per_speaker_per_word = 3", "exemplars_per_speaker_per_word = 1")
        .replace("n_speakers = 4", "n_speakers = 3")
        .replace("speaker_split = [2, 1, 1]", "speaker_split = [1, 1, 1]");
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    assert!(awe(&["synth", "--config", "c.toml", "--out", "corpus"], dir.path()).status.success());
    let o = awe(
        &["train", "--config", "c.toml", "--corpus", "corpus", "--run-dir", "run", "--loss-mode", "contrastive"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no positive pairs"), "{}", stderr(&o));
}

#[test]
fn four_loss_modes_give_distinct_logs() {
    let (_d, root) = setup("");
    let mut logs = Vec::new();
    for mode in ["form_only", "meaning_only", "form_meaning", "contrastive"] {
        let run = format!("run_{mode}");
        let o = awe(
            &["train", "--config", "c.toml", "--corpus", "corpus", "--run-dir", &run, "--loss-mode", mode, "--deterministic"],
            &root,
        );
        assert!(o.status.success(), "{mode}: {}", stderr(&o));
        logs.push(fs::read_to_string(root.join(&run).join("epochs.csv")).unwrap());
    }
    let distinct: BTreeSet<&String> = logs.iter().collect();
    assert_eq!(distinct.len(), 4);
    // single-branch modes leave the other column at zero
    let row = |s: &str| s.lines().nth(1).unwrap().split(',').map(str::to_string).collect::<Vec<_>>();
    assert_eq!(row(&logs[0])[2], "0");
    assert_eq!(row(&logs[1])[1], "0");
    assert_ne!(row(&logs[3])[3], "0");
}

#[test]
fn deterministic_runs_are_bitwise_identical() {
    let (_d, root) = setup("");
    for run in ["a", "b"] {
        let o = awe(
            &["train", "--config", "c.toml", "--corpus", "corpus", "--run-dir", run, "--deterministic", "--seed", "9"],
            &root,
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(root.join("a/epochs.csv")).unwrap(), fs::read(root.join("b/epochs.csv")).unwrap());
}

#[test]
fn check_grad_pass_fail_and_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = awe(&["check-grad"], dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.contains("\tok\t")).count(), 4);

    let o = awe(&["check-grad", "--inject-fault", "sigmoid-sign"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));

    let o = awe(&["check-grad", "--eps", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = awe(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_split_scores_at_least_test_split_on_average() {
    let (_d, root) = setup("");
    let (mut train_sum, mut test_sum) = (0.0, 0.0);
    for seed in ["1", "2", "3"] {
        let run = format!("run{seed}");
        let o = awe(
            &["train", "--config", "c.toml", "--corpus", "corpus", "--run-dir", &run, "--seed", seed, "--epochs", "25"],
            &root,
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let ckpt = format!("{run}/best.ckpt");
        for (split, sum) in [("train", &mut train_sum), ("test", &mut test_sum)] {
            let o = awe(&["eval", "--checkpoint", &ckpt, "--corpus", "corpus", "--split", split], &root);
            assert!(o.status.success(), "{}", stderr(&o));
            let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
            *sum += v["map"].as_f64().unwrap();
        }
    }
    assert!(train_sum >= test_sum, "train {train_sum} test {test_sum}");
}

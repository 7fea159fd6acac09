use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn replik(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_replik"))
        .args(args)
        .env_remove("REPLIK_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "n_pos_bags = 12
n_neg_bags = 12
seqs_per_bag = 30
seq_len_min = 6
seq_len_max = 9
witness_rate_pos = 0.2
contamination_rate_neg = 0.02
freq_law = 0
seed = 4
";

fn small_dataset(dir: &Path) -> PathBuf {
    let conf = dir.join("synth.conf");
    fs::write(&conf, SMALL).unwrap();
    let data = dir.join("data");
    ok(replik(&["synth", "--config", p(&conf), "--out", p(&data)]));
    data
}

fn resolved(dir: &Path) -> String {
    fs::read_to_string(dir.join("resolved_config")).unwrap()
}

fn has_line(text: &str, line: &str) -> bool {
    text.lines().any(|l| l == line)
}

fn train_small(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--data", p(data), "--out", p(out), "--profile", "custom", "--seed", "3",
        "--set", "token_dim=8", "--set", "max_epochs=6", "--set", "folds=3",
    ];
    args.extend_from_slice(extra);
    replik(&args)
}

#[test]
fn synth_writes_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_dataset(dir.path());
    let n_files = fs::read_dir(a.join("repertoires")).unwrap().count();
    assert_eq!(n_files, 24);
    let b = dir.path().join("again");
    ok(replik(&["synth", "--config", p(&dir.path().join("synth.conf")), "--out", p(&b)]));
    for name in ["metadata.tsv", "genes.json", "ground_truth.tsv", "known_set.tsv", "manifest.json", "resolved_config"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    for entry in fs::read_dir(a.join("repertoires")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(a.join("repertoires").join(&name)).unwrap(),
            fs::read(b.join("repertoires").join(&name)).unwrap()
        );
    }
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = replik(&["synth", "--set", "seq_len_min=3", "--set", "seq_len_max=5", "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("motif"));
    let out = replik(&["cv", "--data", p(&dir.path().join("missing")), "--out", p(&dir.path().join("y"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = replik(&["synth", "--set", "no_such_key=1", "--out", p(&dir.path().join("z"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = replik(&["train", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = replik(&["--threads", "0", "synth", "--out", p(&dir.path().join("w"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn paper_profiles_resolve() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cmv = dir.path().join("cmv");
    ok(replik(&[
        "train", "--data", p(&data), "--out", p(&cmv), "--profile", "cmv", "--set", "max_epochs=16", "--set", "folds=3",
        "--set", "patience=1",
    ]));
    let text = resolved(&cmv);
    for line in ["alpha = 0.99", "beta = 0.7", "warmup_epochs = 15", "token_dim = 16"] {
        assert!(has_line(&text, line), "{line} missing from\n{text}");
    }

    let cancer = dir.path().join("cancer");
    ok(replik(&[
        "train", "--data", p(&data), "--out", p(&cancer), "--profile", "cancer", "--set", "max_epochs=9", "--set", "folds=3",
        "--set", "patience=1",
    ]));
    let text = resolved(&cancer);
    for line in ["alpha = 0.95", "beta = 0.4", "warmup_epochs = 8", "token_dim = 192"] {
        assert!(has_line(&text, line), "{line} missing from\n{text}");
    }
}

#[test]
fn erm_flags_train_a_single_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = dir.path().join("erm");
    ok(train_small(&data, &out, &["--no-asa", "--no-cotrain"]));
    let text = resolved(&out);
    assert!(has_line(&text, "asa = false") && has_line(&text, "cotrain = false"));
    assert!(out.join("model_a.json").exists());
    assert!(!out.join("model_b.json").exists());
    let summary = fs::read_to_string(out.join("training.json")).unwrap();
    assert!(summary.contains("\"cotrained\": false"));
}

#[test]
fn train_eval_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let model = dir.path().join("model");
    ok(train_small(&data, &model, &[]));
    for f in ["model_a.json", "model_b.json", "history.csv", "split.tsv", "training.json"] {
        assert!(model.join(f).exists(), "{f}");
    }

    // Re-running from the resolved config reproduces the models byte for byte.
    let again = dir.path().join("again");
    ok(replik(&[
        "train", "--data", p(&data), "--out", p(&again), "--config", p(&model.join("resolved_config")),
    ]));
    for f in ["model_a.json", "model_b.json", "history.csv", "training.json", "resolved_config"] {
        assert_eq!(fs::read(model.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let eval_a = dir.path().join("eval_a");
    let known = data.join("known_set.tsv");
    ok(replik(&[
        "eval", "--model", p(&model), "--data", p(&data), "--known", p(&known), "--role", "test", "--out", p(&eval_a),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_a.join("report.json")).unwrap()).unwrap();
    for field in ["repertoire_auc", "f1", "accuracy", "threshold", "sequence_auc"] {
        assert!(report[field].is_number(), "{field}: {report}");
    }
    assert!(report["n_repertoires"].as_u64().unwrap() > 0);
    let roc = fs::read_to_string(eval_a.join("roc_points.csv")).unwrap();
    assert!(roc.starts_with("fpr,tpr,threshold"));

    let eval_b = dir.path().join("eval_b");
    ok(replik(&["eval", "--model", p(&model), "--data", p(&data), "--out", p(&eval_b)]));
    let report_b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_b.join("report.json")).unwrap()).unwrap();
    assert!(report_b["sequence_auc"].is_null());
    let eval_c = dir.path().join("eval_c");
    ok(replik(&["eval", "--model", p(&model), "--data", p(&data), "--out", p(&eval_c)]));
    assert_eq!(fs::read(eval_b.join("report.json")).unwrap(), fs::read(eval_c.join("report.json")).unwrap());

    // Single-sequence file, plus an unknown V gene that must still score.
    let rep = dir.path().join("one.tsv");
    fs::write(&rep, "cdr3\tv_gene\td_gene\tj_gene\tfrequency\nCASSLGW\tNOT_A_GENE\t\tTCRBJ01\t0.25\n").unwrap();
    let out = ok(replik(&["predict", "--model", p(&model), "--repertoire", p(&rep)]));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    assert_eq!(lines[0], "cdr3\tv_gene\td_gene\tj_gene\tfrequency\tscore");
    let f: f64 = lines[1].split('\t').nth(5).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&f));
    let score: f64 = lines[2].strip_prefix("repertoire_score = ").unwrap().parse().unwrap();
    assert!((score - 0.25 * f).abs() < 1e-6, "{score} vs {}", 0.25 * f);

    let bad = dir.path().join("bad.tsv");
    fs::write(&bad, "amino_acid\tv\n").unwrap();
    let out = replik(&["predict", "--model", p(&model), "--repertoire", p(&bad)]);
    assert!(!out.status.success());
}

#[test]
fn cv_and_ablation_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let common = [
        "--profile", "custom", "--set", "token_dim=8", "--set", "max_epochs=5", "--set", "warmup_epochs=2",
        "--set", "rotations=0,1", "--set", "folds=3",
    ];
    let cv = dir.path().join("cv");
    let mut args = vec!["cv", "--data", p(&data), "--out", p(&cv), "--known"];
    let known = data.join("known_set.tsv");
    args.push(p(&known));
    args.extend_from_slice(&common);
    ok(Command::new(env!("CARGO_BIN_EXE_replik"))
        .args(&args)
        .env("REPLIK_THREADS", "1")
        .output()
        .unwrap());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cv.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 2);
    assert!(cv.join("fold0/history.csv").exists() && cv.join("fold1/confidence.csv").exists());

    let ab = dir.path().join("ablate");
    let mut args = vec!["ablate", "--data", p(&data), "--out", p(&ab), "--set", "seeds=0,1"];
    args.extend_from_slice(&common);
    ok(replik(&args));
    let csv = fs::read_to_string(ab.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 5, "{csv}");
    for (row, mode) in rows[1..].iter().zip(["full", "no_asa", "no_cotrain", "erm"]) {
        assert!(row.starts_with(mode), "{row}");
    }
    let ab2 = dir.path().join("ablate2");
    let mut args = vec!["ablate", "--data", p(&data), "--out", p(&ab2), "--set", "seeds=0,1"];
    args.extend_from_slice(&common);
    ok(replik(&args));
    assert_eq!(fs::read(ab.join("ablation.csv")).unwrap(), fs::read(ab2.join("ablation.csv")).unwrap());
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fcggnn::synthetic::shape_corpus;

fn fcggnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcggnn"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write_dataset(root: &Path) {
    let corpus = shape_corpus(17, 18, 6, 9, 5, 10);
    for (split, samples) in [
        ("train", &corpus.train),
        ("val", &corpus.val),
        ("test", &corpus.test),
    ] {
        for (i, s) in samples.iter().enumerate() {
            let dir = root.join(split).join(&corpus.class_names[s.label]);
            fs::create_dir_all(&dir).unwrap();
            fs::write(dir.join(format!("{i:03}.edgelist")), s.graph.to_edge_list()).unwrap();
        }
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn featurize_two_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("c2.edgelist");
    fs::write(&g, "# two functions calling each other\n0 1\n1 0\n").unwrap();
    let out = fcggnn(&["featurize", "--graph", p(&g)]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), "0.5 1 1 0\n0.5 1 1 0\n");
}

#[test]
fn usage_errors_exit_2() {
    let out = fcggnn(&["train", "--data", ".", "--lr", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--allow-any-lr"));
    assert_eq!(
        fcggnn(&["featurize", "--graph", "x", "--bogus"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(fcggnn(&[]).status.code(), Some(2));
    assert_eq!(
        fcggnn(&["train", "--data", ".", "--model", "gat-jk"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        fcggnn(&["train", "--data", ".", "--lr", "-1", "--allow-any-lr"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn runtime_errors_exit_1_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.edgelist");
    let out = fcggnn(&["featurize", "--graph", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr(&out).lines().count(), 1);

    let bad = dir.path().join("bad.edgelist");
    fs::write(&bad, "0 1\nmain -> helper\n").unwrap();
    let out = fcggnn(&["featurize", "--graph", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    let junk = dir.path().join("model.bin");
    fs::write(&junk, b"not a model").unwrap();
    let g = dir.path().join("g.edgelist");
    fs::write(&g, "0 1\n").unwrap();
    let out = fcggnn(&["predict", "--model", p(&junk), "--graph", p(&g)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("magic"));
}

#[test]
fn train_eval_predict_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data);
    let model = dir.path().join("model.bin");
    let out = fcggnn(&[
        "train",
        "--data",
        p(&data),
        "--model",
        "sage-jk",
        "--layers",
        "2",
        "--hidden",
        "8",
        "--epochs",
        "3",
        "--batch-size",
        "4",
        "--seed",
        "1",
        "--out",
        p(&model),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = stdout(&out);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch ")).count(), 3);
    assert!(log.contains("val_weighted_f1"));
    assert_eq!(stderr(&out).lines().count(), 1);

    let out = fcggnn(&[
        "eval",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--split",
        "test",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let block: Vec<&str> = text.split("---\n").nth(1).unwrap().lines().collect();
    for key in [
        "accuracy",
        "weighted_precision",
        "weighted_recall",
        "weighted_f1",
    ] {
        let line = block
            .iter()
            .find(|l| l.starts_with(&format!("{key}\t")))
            .unwrap();
        let v: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(block.contains(&"samples\t9"));

    let graph = data.join("test/star/001.edgelist");
    let out = fcggnn(&["predict", "--model", p(&model), "--graph", p(&graph)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let mut lines = text.lines();
    let predicted = lines.next().unwrap();
    assert!(["cycle", "star", "tree"].contains(&predicted));
    let probs: Vec<f64> = lines
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(probs.len(), 3);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);

    let emb = dir.path().join("emb.tsv");
    let out = fcggnn(&[
        "export-embeddings",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--out",
        p(&emb),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let tsv = fs::read_to_string(&emb).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 18 + 6 + 9);
    assert!(tsv.lines().all(|l| l.split('\t').count() == 3 + 8));
}

#[test]
fn manifest_input_matches_directory_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data);
    let mut manifest = String::from("path,label,split\n");
    let mut rows = Vec::new();
    for split in ["train", "val", "test"] {
        for class in fs::read_dir(data.join(split)).unwrap() {
            let class = class.unwrap();
            for file in fs::read_dir(class.path()).unwrap() {
                let file = file.unwrap().path();
                let rel = file
                    .strip_prefix(dir.path())
                    .unwrap()
                    .to_str()
                    .unwrap()
                    .to_string();
                rows.push(format!(
                    "{rel},{},{split}\n",
                    class.file_name().to_str().unwrap()
                ));
            }
        }
    }
    rows.sort();
    manifest.extend(rows);
    let manifest_path = dir.path().join("manifest.csv");
    fs::write(&manifest_path, manifest).unwrap();

    let model = dir.path().join("m.bin");
    let out = fcggnn(&[
        "train",
        "--data",
        p(&data),
        "--model",
        "gcn-jk",
        "--layers",
        "2",
        "--hidden",
        "8",
        "--epochs",
        "1",
        "--out",
        p(&model),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let by_dir = fcggnn(&["eval", "--model", p(&model), "--data", p(&data)]);
    let by_manifest = fcggnn(&["eval", "--model", p(&model), "--data", p(&manifest_path)]);
    assert!(by_manifest.status.success(), "{}", stderr(&by_manifest));
    assert_eq!(stdout(&by_dir), stdout(&by_manifest));
}

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

fn simat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simat"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = simat(args);
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, &["--seed", "7", "--sigma", "0.2"]);
    synth(&b, &["--seed", "7", "--sigma", "0.2"]);
    let names: BTreeSet<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(names.len() >= 11);
    for name in &names {
        let (x, y) = (std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
        // The manifest records the output path, everything else is identical.
        if name != "manifest.json" {
            assert_eq!(x, y, "{:?} differs", name);
        }
    }
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 7);
    assert_eq!(m["timestamp"], 1700000000u64);
    assert_eq!(m["outputs"].as_object().unwrap().len(), names.len() - 1);
}

#[test]
fn noiseless_world_scores_full_marks() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    for (strategy, out) in [("delta", "d"), ("t2i", "t"), ("i2t2i", "i")] {
        let out = tmp.path().join(out);
        let stdout = ok(&["eval", "--data", p(&data), "--strategy", strategy, "--out", p(&out), "--breakdown"]);
        assert!(stdout.contains(": 100.0"), "{}", stdout);
        assert_eq!(report(&out)["score"], 100.0);
        assert!(out.join("report.csv").exists());
        assert!(out.join("breakdown.csv").exists());
    }
}

#[test]
fn dev_and_test_partition_the_queries() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let ids = |split: &str| -> BTreeSet<String> {
        let out = tmp.path().join(split);
        ok(&["eval", "--data", p(&data), "--split", split, "--out", p(&out)]);
        report(&out)["outcomes"]
            .as_array()
            .unwrap()
            .iter()
            .map(|o| o["query_id"].as_str().unwrap().to_string())
            .collect()
    };
    let (all, dev, test) = (ids("all"), ids("dev"), ids("test"));
    assert!(!dev.is_empty() && !test.is_empty());
    assert!(dev.is_disjoint(&test));
    assert_eq!(dev.union(&test).cloned().collect::<BTreeSet<_>>(), all);
}

#[test]
fn missing_allowlist_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let graph = tmp.path().join("graph.tsv");
    std::fs::write(&graph, "image_id\tsubject\trelation\tobject\n").unwrap();
    let missing = tmp.path().join("nope.txt");
    let out = simat(&[
        "build", "--scene-graph", p(&graph), "--subjects", p(&missing), "--relations", p(&missing),
        "--out", p(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.txt"));
}

fn toy_inputs(dir: &Path) {
    let rows = [
        ("a1", "man", "riding", "horse"),
        ("a2", "man", "riding", "horse"),
        ("b1", "man", "feeding", "horse"),
        ("b2", "man", "feeding", "horse"),
        ("c1", "woman", "riding", "horse"),
        ("c2", "woman", "riding", "horse"),
    ];
    let mut text = String::from("image_id\tsubject\trelation\tobject\n");
    for (i, s, r, o) in rows {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", i, s, r, o));
    }
    std::fs::write(dir.join("graph.tsv"), text).unwrap();
    std::fs::write(dir.join("subjects.txt"), "man\nwoman\n").unwrap();
    std::fs::write(dir.join("relations.txt"), "# verbs\nriding\nfeeding\n").unwrap();
}

#[test]
fn build_without_oracle_is_marked_unfiltered() {
    let tmp = tempfile::tempdir().unwrap();
    toy_inputs(tmp.path());
    let out = tmp.path().join("bundle");
    let d = tmp.path();
    ok(&[
        "build", "--scene-graph", p(&d.join("graph.tsv")), "--subjects", p(&d.join("subjects.txt")),
        "--relations", p(&d.join("relations.txt")), "--oracle", "none", "--out", p(&out),
    ]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["notes"]["filtered"], false);
    assert_eq!(m["notes"]["oracle"], "none");
    for f in ["images.tsv", "captions.tsv", "queries.tsv", "words.tsv"] {
        assert!(out.join(f).exists(), "{}", f);
    }
    // man-riding images have two alternatives, the other four have one.
    let queries = std::fs::read_to_string(out.join("queries.tsv")).unwrap();
    assert_eq!(queries.lines().count(), 1 + 2 * 2 + 4);
}

#[test]
fn coverage_gaps_exit_with_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--num-subjects", "2", "--num-relations", "1", "--num-objects", "2", "--density", "1"]);
    let table = tmp.path().join("table.tsv");
    std::fs::write(&table, "image_id\tcaption_id\tprobability\nimg0000\tc0000\t0.9\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = simat(&["eval", "--data", p(&data), "--oracle-table", p(&table), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let missing = std::fs::read_to_string(out_dir.join("missing_pairs.tsv")).unwrap();
    assert!(missing.starts_with("image_id\tcaption_id\n"));
    assert!(missing.lines().count() > 1);
}

#[test]
fn unknown_token_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let out = simat(&["transform", "--data", p(&data), "--image", "img0000", "--from", "s0", "--to", "zebra"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn transform_prints_ranked_hits() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--density", "1"]);
    let stdout = ok(&["transform", "--data", p(&data), "--image", "img0000", "--from", "o0", "--to", "o1", "--topn", "3"]);
    assert!(stdout.contains("  1  "), "{}", stdout);
    assert!(stdout.contains("s0 r0 o1") || stdout.contains("(s0, r0, o1)"), "{}", stdout);
}

#[test]
fn sweep_writes_csv_and_svg() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--sigma", "0.3"]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["sweep", "--data", p(&data), "--lambdas", "0,1", "--out", p(&a)]);
    ok(&["sweep", "--data", p(&data), "--lambdas", "0,1", "--out", p(&b)]);
    let csv = std::fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{}", csv);
    let svg = std::fs::read_to_string(a.join("sweep.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert_eq!(svg, std::fs::read_to_string(b.join("sweep.svg")).unwrap());
    assert!(a.join("sweep_optima.csv").exists());
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck", "--batches", "5"]);
    assert!(stdout.contains("max relative error"));
}

#[test]
fn config_file_fills_unset_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "lambda = 0\nstrategy = delta\nsplit = dev\n").unwrap();
    let out = tmp.path().join("o");
    ok(&["eval", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    let r = report(&out);
    assert_eq!(r["lambda"], 0.0);
    assert_eq!(r["split"], "dev");
    assert_eq!(r["score"], 0.0);
    let out2 = tmp.path().join("o2");
    ok(&["eval", "--config", p(&cfg), "--lambda", "1", "--data", p(&data), "--out", p(&out2)]);
    assert_eq!(report(&out2)["lambda"], 1.0);
    assert_eq!(report(&out2)["score"], 100.0);
}

#[test]
fn train_writes_heads_usable_by_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let heads = tmp.path().join("heads");
    ok(&["train", "--alignable-pairs", "200", "--alignable-dim", "16", "--out-dim", "16", "--epochs", "5", "--out", p(&heads)]);
    for f in ["image_head.smhd", "text_head.smhd", "loss_history.csv", "manifest.json"] {
        assert!(heads.join(f).exists(), "{}", f);
    }
    let history = std::fs::read_to_string(heads.join("loss_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 6);

    let data = tmp.path().join("data");
    synth(&data, &[]);
    let out = tmp.path().join("o");
    ok(&["eval", "--data", p(&data), "--heads", p(&heads), "--out", p(&out)]);
    let score = report(&out)["score"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&score));
}

#[test]
fn bad_usage_exits_two() {
    assert_eq!(simat(&["sweep", "--data", "x", "--out", "y", "--lambdas", ""]).status.code(), Some(2));
    assert_eq!(simat(&["eval", "--data", "/nonexistent/bundle", "--out", "/tmp/x"]).status.code(), Some(2));
}

#[test]
fn train_accepts_many_images_per_caption() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--num-subjects", "2", "--num-relations", "1", "--num-objects", "2", "--density", "1"]);
    // Every image pairs with the caption of its own triplet.
    let captions = std::fs::read_to_string(data.join("captions.tsv")).unwrap();
    let caption_of: std::collections::HashMap<String, String> = captions
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split('\t').collect();
            (c[1..4].join(" "), c[0].to_string())
        })
        .collect();
    let mut pairs = String::from("image_id\ttext_id\n");
    for l in std::fs::read_to_string(data.join("images.tsv")).unwrap().lines().skip(1) {
        let c: Vec<&str> = l.split('\t').collect();
        pairs.push_str(&format!("{}\t{}\n", c[0], caption_of[&c[1..4].join(" ")]));
    }
    let pairs_path = tmp.path().join("pairs.tsv");
    std::fs::write(&pairs_path, pairs).unwrap();
    let heads = tmp.path().join("heads");
    ok(&[
        "train", "--images", p(&data.join("images.smat")), "--texts", p(&data.join("captions.smat")),
        "--pairs", p(&pairs_path), "--out-dim", "8", "--epochs", "2", "--out", p(&heads),
    ]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(heads.join("manifest.json")).unwrap()).unwrap();
    assert!(m["notes"]["train_recall_at_1"].is_null());
}

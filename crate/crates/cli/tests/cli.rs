use std::path::Path;

use rearec_cli::run;

fn rearec(args: &[&str]) -> i32 {
    run(std::iter::once("rearec").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert_eq!(rearec(&["synth", "--seed", "7", "--users", "40", "--items", "30", "--out-dir", s(out)]), 0);
    }
    let fa = std::fs::read(a.join("interactions.tsv")).unwrap();
    let fb = std::fs::read(b.join("interactions.tsv")).unwrap();
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
}

#[test]
fn prepare_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(rearec(&["synth", "--users", "60", "--items", "30", "--out-dir", s(out)]), 0);
    let tsv = out.join("interactions.tsv");
    assert_eq!(rearec(&["prepare", "--input", s(&tsv), "--k-core", "2", "--n-max", "20", "--out-dir", s(out)]), 0);
    let ds = out.join("dataset.json");
    assert!(ds.exists());

    let cfg = out.join("run.cfg");
    std::fs::write(&cfg, "# small model\nd = 16\nlayers = 1\nk_max = 3\nobjective = prl\nk = 2\n").unwrap();
    let code = rearec(&[
        "train", "--config", s(&cfg), "--dataset", s(&ds), "--max-epochs", "2", "--batch-size", "32", "--out-dir", s(out),
    ]);
    assert_eq!(code, 0);
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let ckpt = out.join("model.ckpt");
    assert_eq!(rearec(&["eval", "--checkpoint", s(&ckpt), "--steps", "0,1,2", "--out-dir", s(out)]), 0);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows[0], "split,step,group,metric,value,count");
    assert_eq!(rows.len(), 1 + 3 * 4);
    assert!(out.join("metrics.json").exists());

    assert_eq!(rearec(&["oracle", "--checkpoint", s(&ckpt), "--out-dir", s(out)]), 0);
    let oracle = std::fs::read_to_string(out.join("oracle.csv")).unwrap();
    assert!(oracle.contains(",oracle,"));

    assert_eq!(rearec(&["groups", "--checkpoint", s(&ckpt), "--kind", "item", "--steps", "0,2", "--out-dir", s(out)]), 0);
    assert!(out.join("groups.csv").exists());

    assert_eq!(rearec(&["trace", "--checkpoint", s(&ckpt), "--k", "2", "--out-dir", s(out)]), 0);
    let trace = std::fs::read_to_string(out.join("trajectories.csv")).unwrap();
    assert_eq!((trace.lines().count() - 1) % 3, 0);

    assert_eq!(rearec(&["similarity", "--checkpoint", s(&ckpt), "--k", "2", "--out-dir", s(out)]), 0);
    let sim = std::fs::read_to_string(out.join("similarity.csv")).unwrap();
    assert_eq!((sim.lines().count() - 1) % 9, 0);

    assert_eq!(rearec(&["bench", "--checkpoint", s(&ckpt), "--steps", "0,1", "--out-dir", s(out)]), 0);
    let latency = std::fs::read_to_string(out.join("latency.csv")).unwrap();
    assert_eq!(latency.lines().count(), 1 + 4);

    // More steps than the model supports is a usage error.
    assert_eq!(rearec(&["eval", "--checkpoint", s(&ckpt), "--steps", "4", "--out-dir", s(out)]), 1);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rearec(&["frobnicate"]), 1);
    assert_eq!(rearec(&["synth", "--users", "many"]), 1);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rat = 0.1\n").unwrap();
    assert_eq!(rearec(&["train", "--config", s(&cfg), "--out-dir", s(dir.path())]), 1);
    assert_eq!(rearec(&["train", "--out-dir", s(dir.path())]), 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("bad.tsv");
    std::fs::write(&tsv, "u1\ti1\t5\t100\nu1\ti2\tfive\t200\n").unwrap();
    assert_eq!(rearec(&["prepare", "--input", s(&tsv), "--out-dir", s(dir.path())]), 2);
    let missing = dir.path().join("missing.tsv");
    assert_eq!(rearec(&["prepare", "--input", s(&missing), "--out-dir", s(dir.path())]), 2);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(rearec(&["eval", "--checkpoint", s(&junk), "--out-dir", s(dir.path())]), 2);
}

#[test]
fn help_exits_zero() {
    assert_eq!(rearec(&["--help"]), 0);
    assert_eq!(rearec(&["train", "--help"]), 0);
}

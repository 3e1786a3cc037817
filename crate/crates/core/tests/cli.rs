use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn uqlora(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uqlora"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "[data]\nn_proteins = 30\nn_pairs = 60\n[train]\nepochs = 1\n[run]\nseeds = 0,1\n";

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(uqlora(&["no-such-verb"], dir.path()).status.code(), Some(1));
    assert_eq!(uqlora(&["train"], dir.path()).status.code(), Some(1));
    assert_eq!(uqlora(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn config_errors_exit_with_one_and_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "[model]\nrank = 8\nranks = 4\n").unwrap();
    let o = uqlora(&["run", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn missing_files_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = uqlora(&["reliability", "--dump", "absent.tsv", "--out", "r.csv"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn malformed_dataset_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("pairs.tsv"),
        "protein_a\tprotein_b\tlabel\nAB_1\tAB_1\t1\n",
    )
    .unwrap();
    let o = uqlora(&["train", "--data", "pairs.tsv", "--out", "m.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn component_verbs_compose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.cfg"), SMALL).unwrap();
    let gen = uqlora(
        &[
            "gen-data",
            "--n-proteins",
            "30",
            "--n-pairs",
            "60",
            "--seed",
            "3",
            "--out",
            "pairs.tsv",
        ],
        d,
    );
    assert!(gen.status.success(), "{gen:?}");
    let base = ["--config", "small.cfg", "--data", "pairs.tsv"];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };

    let mut args = vec!["train".to_string()];
    args.extend(with(&["--out", "model.json", "--loss-log", "loss.csv"]));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(uqlora(&refs, d).status.success());
    assert!(fs::read_to_string(d.join("loss.csv"))
        .unwrap()
        .starts_with("epoch,step,loss\n"));

    let mut args = vec!["laplace-fit".to_string()];
    args.extend(with(&["--model", "model.json", "--out", "posterior.json"]));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(uqlora(&refs, d).status.success());

    let mut args = vec!["evaluate".to_string()];
    args.extend(with(&[
        "--model",
        "model.json",
        "--posterior",
        "posterior.json",
        "--out",
        "eval",
    ]));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let eval = uqlora(&refs, d);
    assert!(eval.status.success(), "{eval:?}");
    assert!(stdout(&eval).contains("ece="));
    let dump = fs::read_to_string(d.join("eval/predictions.tsv")).unwrap();
    assert!(dump.lines().nth(1).unwrap().ends_with("\tNA"));

    let rel = uqlora(
        &["reliability", "--dump", "eval/predictions.tsv", "--out", "rel.csv"],
        d,
    );
    assert!(rel.status.success());
    let report = fs::read_to_string(d.join("eval/report.txt")).unwrap();
    let ece_line = report.lines().find(|l| l.starts_with("ece=")).unwrap();
    assert!(stdout(&rel).starts_with(ece_line), "{} vs {ece_line}", stdout(&rel));

    let mut args = vec!["train-ensemble".to_string()];
    args.extend(with(&[
        "--set",
        "ensemble.members=2",
        "--out",
        "ens.json",
        "--loss-dir",
        "logs",
    ]));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(uqlora(&refs, d).status.success());
    assert!(d.join("logs/loss-member1.csv").exists());
    let mut args = vec!["evaluate".to_string()];
    args.extend(with(&["--ensemble", "ens.json", "--out", "eval-ens"]));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(uqlora(&refs, d).status.success());
}

#[test]
fn run_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.cfg"), SMALL).unwrap();
    for method in ["single", "ensemble"] {
        let o = uqlora(
            &["run", "--config", "small.cfg", "--method", method, "--out-dir", "runs"],
            d,
        );
        assert!(o.status.success(), "{o:?}");
        assert!(stdout(&o).contains("acc\t"));
    }
    let mut summaries: Vec<_> = fs::read_dir(d.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path().join("summary.txt"))
        .collect();
    summaries.sort();
    assert_eq!(summaries.len(), 2);
    let a = summaries[0].to_string_lossy().into_owned();
    let b = summaries[1].to_string_lossy().into_owned();
    let o = uqlora(
        &[
            "compare",
            "--a",
            &a,
            "--b",
            &b,
            "--metric",
            "nll",
            "--direction",
            "less",
        ],
        d,
    );
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("significant="));

    fs::write(d.join("one.cfg"), SMALL.replace("0,1", "0")).unwrap();
    let o = uqlora(&["run", "--config", "one.cfg", "--out-dir", "solo"], d);
    assert!(o.status.success());
    let solo = fs::read_dir(d.join("solo"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path()
        .join("summary.txt");
    let o = uqlora(&["compare", "--a", &a, "--b", &solo.to_string_lossy()], d);
    assert_eq!(o.status.code(), Some(1));
}

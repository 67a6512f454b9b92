use std::path::Path;
use std::process::{Command, Output};

fn gsps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsps"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_fit_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.csv");
    let model = dir.path().join("model.json");
    let query = dir.path().join("query.csv");
    let preds = dir.path().join("pred.csv");

    let sim = gsps(&["simulate", "--n", "15", "--d", "2", "--p", "2", "-N", "5", "--theta", "0.5,0.8", "--gamma", "1,0.6;0.6,1", "--seed", "3", "--out", path(&data)]);
    assert!(sim.status.success(), "{}", stderr(&sim));
    let text = std::fs::read_to_string(&data).unwrap();
    assert!(text.starts_with("rep,x1,x2,y1,y2"));
    assert_eq!(text.lines().count(), 1 + 15 * 5);
    let truth: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(data.with_extension("json")).unwrap()).unwrap();
    assert_eq!(truth["seed"], 3);

    let fit = gsps(&["fit", "--data", path(&data), "--multistart", "3", "--out", path(&model)]);
    assert!(fit.status.success(), "{}", stderr(&fit));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(json["method"], "gsps");
    assert_eq!(json["theta_hat"].as_array().unwrap().len(), 2);

    std::fs::write(&query, "x1,x2\n0.5,0.5\n3.0,7.5\n").unwrap();
    let pred = gsps(&["predict", "--model", path(&model), "--data", path(&data), "--query", path(&query), "--cov", "--out", path(&preds)]);
    assert!(pred.status.success(), "{}", stderr(&pred));
    let out = std::fs::read_to_string(&preds).unwrap();
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), "x1,x2,yhat1,yhat2,cov_1_1,cov_1_2,cov_2_2");
    assert_eq!(lines.count(), 2);
}

#[test]
fn simulation_is_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = gsps(&["simulate", "--n", "8", "--d", "1", "--p", "2", "-N", "2", "--seed", "11", "--out", path(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gsps.toml");
    std::fs::write(&cfg, "[simulate]\nn = 6\nd = 1\np = 1\nnum-realizations = 2\nseed = 5\n").unwrap();
    let from_file = dir.path().join("file.csv");
    let from_flag = dir.path().join("flag.csv");
    let o = gsps(&["--config", path(&cfg), "simulate", "--out", path(&from_file)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = gsps(&["--config", path(&cfg), "simulate", "--n", "9", "--out", path(&from_flag)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&from_file).unwrap().lines().count(), 1 + 6 * 2);
    assert_eq!(std::fs::read_to_string(&from_flag).unwrap().lines().count(), 1 + 9 * 2);

    std::fs::write(&cfg, "[simulate]\nbogus = 1\n").unwrap();
    let o = gsps(&["--config", path(&cfg), "simulate", "--n", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn stage1_only_reports_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let dump = dir.path().join("p.txt");
    let o = gsps(&["simulate", "--n", "10", "--d", "2", "--p", "1", "-N", "4", "--seed", "1", "--out", path(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = gsps(&["fit", "--data", path(&data), "--stage1-only", "--dump-matrix", path(&dump)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let block = &report[0];
    assert_eq!(block["size"], 10);
    assert!(!block["trace"].as_array().unwrap().is_empty());
    let rows = std::fs::read_to_string(&dump).unwrap();
    assert_eq!(rows.lines().count(), 10);
    assert!(rows.lines().all(|l| l.split_whitespace().count() == 10));
}

#[test]
fn exit_codes() {
    let help = gsps(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert_eq!(gsps(&["fit", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(gsps(&["fit", "--data", "/nonexistent/x.csv"]).status.code(), Some(1));
    assert_eq!(gsps(&["fit"]).status.code(), Some(1));

    // all-zero responses leave the likelihood without a finite optimum
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("zero.csv");
    let mut csv = String::from("rep,x1,y1\n");
    for rep in 0..2 {
        for i in 0..4 {
            csv.push_str(&format!("{rep},{i},0\n"));
        }
    }
    std::fs::write(&data, csv).unwrap();
    let o = gsps(&["fit", "--data", path(&data), "--method", "mle"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn tiny_experiment_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("summary.csv");
    let o = gsps(&["experiment", "--n", "10", "-N", "3", "--reps", "2", "--methods", "gsps,independent", "--n-test", "5", "--multistart", "2", "--csv", path(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("gsps") && table.contains("independent"));
    assert!(std::fs::read_to_string(&csv).unwrap().lines().count() >= 3);
}

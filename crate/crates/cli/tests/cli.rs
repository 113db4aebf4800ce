use std::path::Path;
use std::process::{Command, Output};

fn warpfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warpfit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn smape_of(o: &Output) -> f64 {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("smape = "))
        .expect("smape line")
        .parse()
        .unwrap()
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let task = dir.path().join("task");
    let o = warpfit(&[
        "--seed",
        "3",
        "make-target",
        "--source-size",
        "200",
        "--transfer-size",
        "20",
        "--out-dir",
        p(&task),
    ]);
    assert!(o.status.success(), "{o:?}");
    for f in ["source.csv", "transfer.csv", "test.csv", "generator.json"] {
        assert!(task.join(f).exists(), "{f}");
    }

    let model = dir.path().join("model.json");
    let o = warpfit(&[
        "--seed",
        "3",
        "fit-source",
        "--data",
        p(&task.join("source.csv")),
        "--out",
        p(&model),
        "--cube",
        "-5,5",
    ]);
    assert!(o.status.success(), "{o:?}");

    let params = dir.path().join("params.json");
    let o = warpfit(&[
        "--seed",
        "3",
        "transfer",
        "--model",
        p(&model),
        "--data",
        p(&task.join("transfer.csv")),
        "--out",
        p(&params),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).starts_with("best loss"));

    let test = task.join("test.csv");
    let plain = warpfit(&["eval", "--model", p(&model), "--test", p(&test)]);
    let fitted = warpfit(&["eval", "--model", p(&model), "--params", p(&params), "--test", p(&test)]);
    assert!(plain.status.success() && fitted.status.success());
    assert!(
        smape_of(&fitted) < smape_of(&plain),
        "{} vs {}",
        stdout(&fitted),
        stdout(&plain)
    );

    // Re-running with the same seed reproduces the fitted map exactly.
    let again = dir.path().join("again.json");
    warpfit(&[
        "--seed",
        "3",
        "transfer",
        "--model",
        p(&model),
        "--data",
        p(&task.join("transfer.csv")),
        "--out",
        p(&again),
    ]);
    assert_eq!(std::fs::read(&params).unwrap(), std::fs::read(&again).unwrap());

    let o = warpfit(&[
        "--seed",
        "4",
        "transfer",
        "--fitter",
        "cmaes",
        "--model",
        p(&model),
        "--data",
        p(&task.join("transfer.csv")),
        "--out",
        p(&dir.path().join("cma.json")),
    ]);
    assert!(o.status.success(), "{o:?}");
}

#[test]
fn holdout_drops_shared_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    std::fs::write(&data, "x1,y\n0,1\n1,2\n2,5\n3,10\n").unwrap();
    let transfer = dir.path().join("t.csv");
    std::fs::write(&transfer, "x1,y\n1,2\n3,10\n").unwrap();
    let model = dir.path().join("m.json");
    assert!(
        warpfit(&["fit-source", "--kind", "forest", "--data", p(&data), "--out", p(&model)])
            .status
            .success()
    );
    let all = warpfit(&["eval", "--model", p(&model), "--test", p(&data)]);
    assert!(stdout(&all).starts_with("n = 4"));
    let held = warpfit(&[
        "eval",
        "--model",
        p(&model),
        "--test",
        p(&data),
        "--transfer",
        p(&transfer),
        "--holdout",
    ]);
    assert!(stdout(&held).starts_with("n = 2"), "{held:?}");
}

#[test]
fn gen_config_round_trips_through_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    assert!(warpfit(&["gen-config", "--out", p(&cfg)]).status.success());
    let text = std::fs::read_to_string(&cfg).unwrap();
    assert!(text.contains("functions = sphere"));
    let small = text
        .replace("sizes = 20", "sizes = 6")
        .replace("repetitions = 10", "repetitions = 2")
        .replace("source_multiplier = 400", "source_multiplier = 20")
        .replace("test_multiplier = 250", "test_multiplier = 10")
        .replace("restarts = 5", "restarts = 1");
    std::fs::write(&cfg, small).unwrap();
    let out = dir.path().join("res/results.csv");
    let o = warpfit(&["--seed", "9", "experiment", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",ok")));
    let first = csv.clone();
    warpfit(&["--seed", "9", "experiment", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), first);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "repetitions = 0\n").unwrap();
    assert_eq!(warpfit(&["experiment", "--config", p(&cfg)]).status.code(), Some(1));
    std::fs::write(&cfg, "nonsense line\n").unwrap();
    let o = warpfit(&["experiment", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    assert_eq!(warpfit(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        warpfit(&["make-target", "--function", "nope", "--out-dir", p(dir.path())])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        warpfit(&[
            "eval",
            "--model",
            p(&dir.path().join("missing.json")),
            "--test",
            p(&cfg)
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(warpfit(&["--help"]).status.code(), Some(0));
}

#[test]
fn forest_with_gradient_fitter_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    std::fs::write(&data, "x1,x2,y\n0,0,1\n1,0,2\n0,1,3\n1,1,4\n0.5,0.5,2\n").unwrap();
    let model = dir.path().join("m.json");
    assert!(
        warpfit(&["fit-source", "--kind", "forest", "--data", p(&data), "--out", p(&model)])
            .status
            .success()
    );
    let o = warpfit(&[
        "transfer",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("x.json")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn write_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    std::fs::write(&data, "x1,y\n0,1\n1,2\n2,5\n").unwrap();
    let o = warpfit(&[
        "fit-source",
        "--kind",
        "forest",
        "--data",
        p(&data),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

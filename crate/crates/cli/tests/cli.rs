use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_causal-bounds"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A sweep small enough for a test: tiny data, short training, few rounds.
fn quick_flags(dir: &Path) -> Vec<String> {
    [
        "--n=300",
        "--support=20",
        "--grid-points=2",
        "--seeds=0",
        "--outer-rounds=4",
        "--inner-steps=5",
        "--mc-batch=50",
        "--regressor-epochs=5",
        "--flow-epochs=5",
        "--basis-epochs=5",
        "--flow=affine",
        "--workers=1",
        "--timing=false",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("--output={}", dir.display())])
    .collect()
}

#[test]
fn generate_writes_a_csv_with_a_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let o = cli(&["generate", "--dataset", "IV-lin-2d-weak", "--n", "50", "--output", path.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("z1,z2,x1,x2,y"));
    assert_eq!(text.lines().count(), 51);
}

#[test]
fn oracle_prints_the_true_effect() {
    let o = cli(&["oracle", "--dataset", "IV-lin-1d-weak-add", "--grid-start", "-1", "--grid-end", "1", "--grid-points", "3"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines, ["x_star_1,true_effect", "-1,-1", "0,0", "1,1"]);
}

#[test]
fn config_errors_exit_with_one() {
    assert_eq!(cli(&["bounds", "--dataset", "no-such-data"]).status.code(), Some(1));
    assert_eq!(cli(&["bounds", "--dataset", "IV-lin-2d-weak", "--grid-coordinate", "3"]).status.code(), Some(1));
    assert_eq!(cli(&["bounds", "--dataset", "IV-lin-2d-weak", "--seeds", "4-1"]).status.code(), Some(1));
    assert_eq!(cli(&["bounds", "--dataset", "IV-lin-2d-weak", "--variant", "LM"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "dataset = IV-lin-2d-weak\nbogus = 1\n").unwrap();
    assert_eq!(cli(&["bounds", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn bounds_writes_every_output_and_plot_rerenders() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("run.cfg");
    // The flag overrides the file's epsilon.
    std::fs::write(&cfg, "# quick run\ndataset = IV-lin-1d-weak-add\nepsilon = 0.001\n").unwrap();
    let mut args = vec!["bounds".to_string(), format!("--config={}", cfg.display()), "--epsilon=5".into()];
    args.extend(quick_flags(&out));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = cli(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["bounds.csv", "summary.json", "trace.csv", "config.txt", "bounds.svg"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("bounds.csv")).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("x_star_1,direction,seed,bound,converged,max_violation,wall_time_s")
    );
    assert_eq!(csv.lines().count(), 5);
    assert!(std::fs::read_to_string(out.join("config.txt")).unwrap().contains("epsilon = 5\n"));

    let svg = dir.path().join("again.svg");
    let o = cli(&["plot", "--summary", out.join("summary.json").to_str().unwrap(), "--output", svg.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&svg).unwrap(), std::fs::read(out.join("bounds.svg")).unwrap());
}

#[test]
fn total_infeasibility_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["bounds".to_string(), "--dataset=IV-lin-2d-weak".into(), "--epsilon=1e-9".into()];
    args.extend(quick_flags(dir.path()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = cli(&args);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("bounds.csv").is_file());
}

#[test]
fn csv_datasets_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    assert!(cli(&["generate", "--dataset", "LM-lin1-2d", "--n", "300", "--output", data.to_str().unwrap()])
        .status
        .success());
    let mut args = vec!["bounds".to_string(), format!("--dataset={}", data.display()), "--epsilon=5".into()];
    args.extend(quick_flags(&dir.path().join("out")));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = cli(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(dir.path().join("out/summary.json")).unwrap();
    assert!(summary.contains("\"valid\": null"));
}

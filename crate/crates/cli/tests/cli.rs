use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fireflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fireflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = fireflow(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_TRAIN: [&str; 6] = [
    "--iterations",
    "200",
    "--hidden",
    "16,16",
    "--batch-size",
    "64",
];

fn train_small(out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--out", s(out)];
    args.extend_from_slice(&SMALL_TRAIN);
    args.extend_from_slice(extra);
    run_ok(&args);
}

#[test]
fn train_is_reproducible_and_creates_nested_output() {
    let tmp = TempDir::new().unwrap();
    let a = p(&tmp, "a/deeper/run");
    let b = p(&tmp, "b");
    train_small(&a, &[]);
    train_small(&b, &[]);
    assert_eq!(
        fs::read(a.join("model.json")).unwrap(),
        fs::read(b.join("model.json")).unwrap()
    );
    assert_eq!(csv_files(&a), csv_files(&b));
    let loss = csv_rows(&a.join("loss.csv"));
    assert_eq!(loss.len(), 200);
    assert_eq!(loss[0][0], "0");
}

#[test]
fn reflow_flag_runs_the_two_stage_pipeline() {
    let tmp = TempDir::new().unwrap();
    let out = p(&tmp, "rf");
    train_small(&out, &["--reflow", "--reflow-pairs", "300"]);
    for f in [
        "model_1rf.json",
        "loss_1rf.csv",
        "coupling.csv",
        "model.json",
        "loss.csv",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let coupling = fs::read_to_string(out.join("coupling.csv")).unwrap();
    assert!(coupling.starts_with("x0_0,x0_1,x1_0,x1_1\n"));
    assert_eq!(coupling.lines().count(), 301);
    assert_eq!(summary(&out)["metrics"]["coupling_pairs"], 300);
    assert_ne!(
        fs::read(out.join("model.json")).unwrap(),
        fs::read(out.join("model_1rf.json")).unwrap()
    );
}

#[test]
fn convergence_report_on_linear_field() {
    let tmp = TempDir::new().unwrap();
    let out = p(&tmp, "c");
    run_ok(&["convergence", "--field", "linear:-1", "--out", s(&out)]);
    let rows = csv_rows(&out.join("order.csv"));
    assert_eq!(rows.iter().filter(|r| r[0] == "euler").count(), 6);
    let sum = summary(&out);
    let ff = sum["metrics"]["order"]
        .as_array()
        .unwrap()
        .iter()
        .find(|o| o["solver"] == "fireflow")
        .unwrap();
    assert!((ff["slope"].as_f64().unwrap() - 2.0).abs() <= 0.2);

    let out = p(&tmp, "c10");
    run_ok(&[
        "convergence",
        "--field",
        "linear:-1",
        "--steps",
        "5,10,20,40",
        "--solver",
        "fireflow",
        "--out",
        s(&out),
    ]);
    let rows = csv_rows(&out.join("order.csv"));
    let n10 = rows.iter().find(|r| r[1] == "10").unwrap();
    assert_eq!(n10[4], "11");
}

#[test]
fn convergence_matches_golden_file() {
    let tmp = TempDir::new().unwrap();
    let out = p(&tmp, "g");
    run_ok(&[
        "convergence",
        "--field",
        "linear:-1",
        "--steps",
        "4,8,16",
        "--out",
        s(&out),
    ]);
    let golden = include_str!("golden/order_linear.csv");
    assert_eq!(fs::read_to_string(out.join("order.csv")).unwrap(), golden);
}

#[test]
fn reconstruct_rows_and_constant_field() {
    let tmp = TempDir::new().unwrap();
    let out = p(&tmp, "r");
    run_ok(&[
        "reconstruct",
        "--field",
        "constant:1,-0.5",
        "--samples",
        "50",
        "--out",
        s(&out),
    ]);
    let rows = csv_rows(&out.join("recon.csv"));
    assert_eq!(rows.len(), 20);
    for r in &rows {
        assert!(r[3].parse::<f64>().unwrap() <= 1e-12, "{r:?}");
    }
    let ff8 = rows
        .iter()
        .find(|r| r[0] == "fireflow" && r[1] == "8")
        .unwrap();
    assert_eq!(ff8[2], "18");

    let out = p(&tmp, "lin");
    run_ok(&[
        "reconstruct",
        "--field",
        "linear:1",
        "--samples",
        "50",
        "--steps",
        "8",
        "--out",
        s(&out),
    ]);
    let parity = csv_rows(&out.join("parity.csv"));
    assert_eq!(parity[0][..2], ["18".to_string(), "8".to_string()]);
    assert_eq!(parity[0][3], "9");
    assert!(parity[0][2].parse::<f64>().unwrap() < parity[0][4].parse::<f64>().unwrap());
}

#[test]
fn reconstruct_on_trained_model_prefers_fireflow() {
    let tmp = TempDir::new().unwrap();
    let model = p(&tmp, "m");
    train_small(&model, &[]);
    let out = p(&tmp, "r");
    let ckpt = model.join("model.json");
    run_ok(&[
        "reconstruct",
        "--checkpoint",
        s(&ckpt),
        "--samples",
        "100",
        "--steps",
        "8",
        "--out",
        s(&out),
    ]);
    for row in csv_rows(&out.join("parity.csv")) {
        assert!(
            row[2].parse::<f64>().unwrap() < row[4].parse::<f64>().unwrap(),
            "{row:?}"
        );
    }
}

#[test]
fn velocity_error_emits_two_panels() {
    let tmp = TempDir::new().unwrap();
    let out = p(&tmp, "v");
    run_ok(&[
        "velocity-error",
        "--field",
        "linear:-1",
        "--x0",
        "1",
        "--out",
        s(&out),
    ]);
    let rows = csv_rows(&out.join("velocity_error.csv"));
    assert_eq!(rows.iter().filter(|r| r[0] == "10").count(), 9);
    assert_eq!(rows.iter().filter(|r| r[0] == "20").count(), 19);
    assert!(rows
        .iter()
        .filter(|r| r[0] == "10")
        .all(|r| (r[4].parse::<f64>().unwrap() - 0.1).abs() < 1e-15));
    let svg = fs::read_to_string(out.join("velocity_error.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("g")).count(), 2);
    let dashed = doc
        .descendants()
        .filter(|n| n.has_tag_name("polyline") && n.attribute("stroke-dasharray").is_some())
        .count();
    assert_eq!(dashed, 2);
}

#[test]
fn straightness_of_collinear_paths_is_zero() {
    let tmp = TempDir::new().unwrap();
    let out = p(&tmp, "s");
    run_ok(&[
        "straightness",
        "--field",
        "constant:3,1",
        "--samples",
        "20",
        "--out",
        s(&out),
    ]);
    let rows = csv_rows(&out.join("straightness.csv"));
    assert_eq!(rows.len(), 80);
    assert!(rows.iter().all(|r| r[4].parse::<f64>().unwrap() < 1e-12));
}

#[test]
fn perturb_reports_contraction_and_flags_expansion() {
    let tmp = TempDir::new().unwrap();
    let out = p(&tmp, "p");
    run_ok(&[
        "perturb",
        "--field",
        "linear:1",
        "--horizon",
        "1",
        "--delta",
        "0.1",
        "--out",
        s(&out),
    ]);
    let m = &summary(&out)["metrics"];
    let d0 = m["delta_0_norm"].as_f64().unwrap();
    assert!((d0 - 0.03679).abs() <= 0.01 * 0.03679);
    assert_eq!(m["satisfied"], true);
    let last = csv_rows(&out.join("perturb.csv")).pop().unwrap();
    assert_eq!(last[0], "0");
    assert!(last[1].starts_with("0.03678"));

    let out = p(&tmp, "q");
    let res = fireflow(&[
        "perturb",
        "--field",
        "linear:-1",
        "--delta",
        "0.1",
        "--out",
        s(&out),
    ]);
    assert!(res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("exceeds"));
    assert_eq!(summary(&out)["metrics"]["satisfied"], false);
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let tmp = TempDir::new().unwrap();
    let model = p(&tmp, "m");
    train_small(&model, &[]);
    let ckpt = model.join("model.json");
    for cmd in ["reconstruct", "energy", "straightness", "velocity-error"] {
        let one = p(&tmp, &format!("{cmd}1"));
        let many = p(&tmp, &format!("{cmd}3"));
        let common = [
            "--checkpoint",
            s(&ckpt),
            "--samples",
            "64",
            "--seeds",
            "2",
            "--steps",
            "4,8",
        ];
        let mut a = vec![cmd, "--workers", "1", "--out", s(&one)];
        a.extend_from_slice(&common);
        let mut b = vec![cmd, "--workers", "3", "--out", s(&many)];
        b.extend_from_slice(&common);
        run_ok(&a);
        run_ok(&b);
        let (fa, fb) = (csv_files(&one), csv_files(&many));
        assert!(!fa.is_empty());
        assert_eq!(fa, fb, "{cmd}");
    }
}

#[test]
fn config_echo_round_trips() {
    let tmp = TempDir::new().unwrap();
    let out = p(&tmp, "e");
    run_ok(&[
        "energy",
        "--field",
        "linear:0.5",
        "--samples",
        "100",
        "--seeds",
        "2",
        "--solver",
        "fireflow",
        "--out",
        s(&out),
    ]);
    let config = fs::read_to_string(out.join("config.toml")).unwrap();
    let csvs = csv_files(&out);

    let cfg = p(&tmp, "copy.toml");
    fs::copy(out.join("config.toml"), &cfg).unwrap();
    run_ok(&["energy", "--config", s(&cfg)]);
    assert_eq!(fs::read_to_string(out.join("config.toml")).unwrap(), config);
    assert_eq!(csv_files(&out), csvs);

    // Flags win over the file.
    let other = p(&tmp, "f");
    run_ok(&[
        "energy",
        "--config",
        s(&cfg),
        "--seeds",
        "1",
        "--out",
        s(&other),
    ]);
    assert_eq!(csv_rows(&other.join("energy.csv")).len(), 1);
}

#[test]
fn every_svg_is_valid_xml_and_listed_in_summary() {
    let tmp = TempDir::new().unwrap();
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("convergence", vec!["--field", "time:0,2,-3"]),
        (
            "reconstruct",
            vec!["--field", "linear:1", "--samples", "20"],
        ),
        (
            "velocity-error",
            vec!["--field", "linear:1", "--samples", "10"],
        ),
        (
            "straightness",
            vec!["--field", "linear:1", "--samples", "10"],
        ),
        ("perturb", vec!["--field", "linear:1"]),
        (
            "energy",
            vec!["--field", "linear:1", "--samples", "50", "--seeds", "1"],
        ),
    ];
    for (cmd, extra) in runs {
        let out = p(&tmp, cmd);
        let mut args = vec![cmd, "--out", s(&out)];
        args.extend(extra);
        run_ok(&args);
        let sum = summary(&out);
        let svgs = sum["svg"].as_array().unwrap();
        assert!(!svgs.is_empty(), "{cmd}");
        for name in svgs {
            let text = fs::read_to_string(out.join(name.as_str().unwrap())).unwrap();
            let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{cmd}: {e}"));
            assert_eq!(doc.root_element().tag_name().name(), "svg");
        }
        for name in sum["csv"].as_array().unwrap() {
            assert!(out.join(name.as_str().unwrap()).exists());
        }
    }
}

#[test]
fn recon_plot_draws_exactly_the_csv_rows() {
    let tmp = TempDir::new().unwrap();
    let out = p(&tmp, "r");
    run_ok(&[
        "reconstruct",
        "--field",
        "linear:1",
        "--samples",
        "20",
        "--steps",
        "2,4,8",
        "--out",
        s(&out),
    ]);
    let svg = fs::read_to_string(out.join("recon.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let lines: Vec<_> = doc
        .descendants()
        .filter(|n| n.has_tag_name("polyline"))
        .collect();
    assert_eq!(lines.len(), 4);
    for l in lines {
        assert_eq!(l.attribute("points").unwrap().split(' ').count(), 3);
    }
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let tmp = TempDir::new().unwrap();
    let out = p(&tmp, "x");
    for args in [
        vec!["reconstruct", "--out", s(&out)],
        vec!["convergence", "--field", "linear:nope", "--out", s(&out)],
        vec![
            "perturb",
            "--checkpoint",
            "/nonexistent/model.json",
            "--out",
            s(&out),
        ],
        vec![
            "train",
            "--learning-rate",
            "1e300",
            "--iterations",
            "50",
            "--hidden",
            "4",
            "--batch-size",
            "8",
            "--out",
            s(&out),
        ],
    ] {
        let res = fireflow(&args);
        assert!(!res.status.success(), "{args:?}");
        assert!(
            String::from_utf8_lossy(&res.stderr).starts_with("error:"),
            "{args:?}"
        );
    }
}

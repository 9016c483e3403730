use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use detnas::cli::sha256_hex;
use detnas::netgraph::{decode_arch, flops, flops_breakdown};
use detnas::search::read_trajectory;
use serde_json::{json, Value};

fn tiny_config(seed: u64, iterations: usize) -> Value {
    json!({
        "seed": seed,
        "dataset": { "n_scenes": 8, "val_scenes": 6, "resolutions": [32, 48] },
        "space": {
            "depths": [[1, 2], [1, 1], [1, 2], [1, 1]],
            "coeffs": [1.0, 1.5],
            "resolutions": [32, 48],
            "base_widths": [3, 4, 4, 5],
            "stem_width": 3,
            "base_neck": 4
        },
        "ips": { "epochs": [1, 1, 1], "batch_size": 2, "scenes_per_epoch": 4 },
        "base": { "arch": "[(3, 3)], [(4, 4)], [(4, 4)], [(5, 5)]; stem: 3; neck: 4", "epochs": 1, "batch_size": 2 },
        "search": {
            "iterations": iterations,
            "patience": 0,
            "p_student": 0.7,
            "resolutions": [32, 48],
            "fast_eval": { "epochs": 1, "batch_size": 2, "scenes_per_epoch": 4 }
        },
        "ablate": {
            "seeds": [0, 1],
            "epochs": 1,
            "batch_size": 2,
            "eval_resolution": 32,
            "dkd_panel": 2,
            "prune_fractions": [0.0, 0.3]
        }
    })
}

fn tmp(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn detnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_detnas")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = detnas(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A pool, a base student and a 6-iteration search shared by several tests.
struct Run {
    dir: PathBuf,
    config: PathBuf,
}

fn shared_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tmp("shared");
        let config = write_config(&dir, &tiny_config(5, 6));
        let pool = dir.join("pool");
        ok(&["etp-train", "--config", s(&config), "--out", s(&pool)]);
        let search = dir.join("search");
        ok(&["search", "--config", s(&config), "--out", s(&search), "--pool", s(&pool.join("supernet.ckpt"))]);
        Run { dir, config }
    })
}

fn trajectory(dir: &Path) -> Vec<detnas::search::TrajectoryRow> {
    read_trajectory(std::fs::File::open(dir.join("trajectory.csv")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn missing_field_exits_2_naming_it() {
    let dir = tmp("missing");
    let mut cfg = tiny_config(0, 1);
    cfg["dataset"].as_object_mut().unwrap().remove("n_scenes");
    let config = write_config(&dir, &cfg);
    let o = detnas(&["etp-train", "--config", s(&config), "--out", s(&dir.join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("n_scenes"), "{err}");
}

#[test]
fn unknown_field_and_bad_value_exit_2() {
    let dir = tmp("unknown");
    let mut cfg = tiny_config(0, 1);
    cfg["search"]["iteratoins"] = json!(3);
    let config = write_config(&dir, &cfg);
    let o = detnas(&["etp-train", "--config", s(&config), "--out", s(&dir.join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("search"));

    let mut cfg = tiny_config(0, 1);
    cfg["space"]["coeffs"] = json!([]);
    let config = write_config(&dir, &cfg);
    assert_eq!(detnas(&["etp-train", "--config", s(&config), "--out", s(&dir.join("o"))]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(detnas(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(detnas(&["search", "--config", "x.json"]).status.code(), Some(2));
    assert_eq!(detnas(&["eval", "--checkpoint", "/nonexistent", "--config", "/nonexistent", "--resolution", "32"]).status.code(), Some(2));
    assert!(detnas(&["--help"]).status.success());
}

#[test]
fn etp_train_is_bitwise_reproducible() {
    let dir = tmp("repro");
    let config = write_config(&dir, &tiny_config(9, 0));
    ok(&["etp-train", "--config", s(&config), "--out", s(&dir.join("a"))]);
    ok(&["etp-train", "--config", s(&config), "--out", s(&dir.join("b"))]);
    let a = std::fs::read(dir.join("a/supernet.ckpt")).unwrap();
    let b = std::fs::read(dir.join("b/supernet.ckpt")).unwrap();
    assert_eq!(a, b);
    let (header, rows) = csv_rows(&dir.join("a/etp_history.csv"));
    assert!(!header.is_empty());
    assert_eq!(rows.len(), 3, "one row per epoch");
}

#[test]
fn zero_iterations_write_only_the_initial_row() {
    let run = shared_run();
    let dir = tmp("zero");
    let config = write_config(&dir, &tiny_config(5, 0));
    ok(&[
        "search",
        "--config",
        s(&config),
        "--out",
        s(&dir),
        "--pool",
        s(&run.dir.join("pool/supernet.ckpt")),
        "--base",
        s(&run.dir.join("search/base_student.ckpt")),
    ]);
    let rows = trajectory(&dir);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].iteration, 0);
    assert!(dir.join("best_student.ckpt").exists());
}

#[test]
fn search_trajectory_and_manifest() {
    let run = shared_run();
    let dir = run.dir.join("search");
    let rows = trajectory(&dir);
    assert_eq!(rows.len(), 7);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.iteration, i);
    }
    for w in rows.windows(2) {
        assert!(w[1].best_score >= w[0].best_score);
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let text = std::fs::read(&run.config).unwrap();
    assert_eq!(manifest["config_sha256"], json!(sha256_hex(&text)));
    assert_eq!(manifest["seed"], json!(5));
    assert_eq!(manifest["iterations_run"], json!(6));
    let best = rows.iter().map(|r| r.score).filter(|x| x.is_finite()).fold(f64::MIN, f64::max);
    assert!((manifest["best"]["score"].as_f64().unwrap() - best).abs() < 1e-12);
}

#[test]
fn eval_reproduces_the_best_row() {
    let run = shared_run();
    let dir = run.dir.join("search");
    let rows = trajectory(&dir);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let it = manifest["best"]["iteration"].as_u64().unwrap() as usize;
    let row = &rows[it];
    let res = row.resolution.unwrap();
    let o = ok(&[
        "eval",
        "--checkpoint",
        s(&dir.join("best_student.ckpt")),
        "--config",
        s(&run.config),
        "--resolution",
        &res.to_string(),
    ]);
    let rec: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rec["arch"], json!(row.arch_encoding));
    assert!((rec["map"].as_f64().unwrap() - row.map).abs() <= 0.002, "{} vs {}", rec["map"], row.map);
    let arch = decode_arch(&row.arch_encoding).unwrap();
    assert_eq!(rec["flops"].as_f64().unwrap(), flops(&arch, (res, res)).unwrap());

    let bad = detnas(&[
        "eval",
        "--checkpoint",
        s(&dir.join("best_student.ckpt")),
        "--config",
        s(&run.config),
        "--resolution",
        "50",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn report_tables() {
    let run = shared_run();
    let out = run.dir.join("report");
    ok(&["report", "--trajectory", s(&run.dir.join("search/trajectory.csv")), "--out", s(&out)]);
    let rows = trajectory(&run.dir.join("search"));

    let (_, actions) = csv_rows(&out.join("report_actions.csv"));
    let total: f64 = actions.iter().map(|a| a[3].parse::<f64>().unwrap()).sum();
    let expect = rows.last().unwrap().best_score - rows[0].best_score;
    assert!((total - expect).abs() <= 1e-9, "{total} vs {expect}");
    let count: usize = actions.iter().map(|a| a[1].parse::<usize>().unwrap()).sum();
    assert_eq!(count, rows.len() - 1);

    let (_, teacher) = csv_rows(&out.join("report_teacher.csv"));
    assert_eq!(teacher.len(), rows.len());
    assert_eq!(teacher[0].last().unwrap(), "true", "the initial row is an ancestor of every row");

    let (_, alloc) = csv_rows(&out.join("report_allocation.csv"));
    let (parts, total) = alloc.split_at(alloc.len() - 1);
    for col in [1, 2] {
        let sum: f64 = parts.iter().map(|p| p[col].parse::<f64>().unwrap()).sum();
        let backbone: f64 = total[0][col].parse().unwrap();
        assert!((sum - backbone).abs() <= 1e-9 * backbone);
    }
    let first = decode_arch(&rows[0].arch_encoding).unwrap();
    let r0 = rows[0].resolution.unwrap();
    let b = flops_breakdown(&first, (r0, r0)).unwrap();
    assert_eq!(total[0][1].parse::<f64>().unwrap(), b.backbone());
}

#[test]
fn report_of_a_single_row_has_headers_only() {
    let run = shared_run();
    let dir = tmp("single");
    let text = std::fs::read_to_string(run.dir.join("search/trajectory.csv")).unwrap();
    let two: Vec<&str> = text.lines().take(2).collect();
    std::fs::write(dir.join("t.csv"), two.join("\n") + "\n").unwrap();
    ok(&["report", "--trajectory", s(&dir.join("t.csv")), "--out", s(&dir.join("r"))]);
    let (header, rows) = csv_rows(&dir.join("r/report_actions.csv"));
    assert_eq!(header, ["action", "count", "improvements", "score_increment"]);
    assert!(rows.is_empty());

    std::fs::write(dir.join("empty.csv"), "").unwrap();
    let o = detnas(&["report", "--trajectory", s(&dir.join("empty.csv")), "--out", s(&dir.join("r2"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_trajectory_names_the_line() {
    let run = shared_run();
    let dir = tmp("malformed");
    let text = std::fs::read_to_string(run.dir.join("search/trajectory.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[3] = lines[3].replacen(",", ",notanumber,", 1);
    std::fs::write(dir.join("t.csv"), lines.join("\n") + "\n").unwrap();
    let o = detnas(&["report", "--trajectory", s(&dir.join("t.csv")), "--out", s(&dir.join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn ablations_write_their_tables() {
    let run = shared_run();
    let pool = run.dir.join("pool/supernet.ckpt");
    let base = run.dir.join("search/base_student.ckpt");

    let out = run.dir.join("dkd");
    let o = ok(&["ablate", "dkd-vs-ckd", "--config", s(&run.config), "--out", s(&out), "--pool", s(&pool)]);
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(summary["dkd_at_least_ckd"].is_boolean());
    let (header, rows) = csv_rows(&out.join("report_dkd_vs_ckd.csv"));
    assert_eq!(header, ["epoch", "ckd_map", "dkd_map", "ckd_loss", "dkd_loss"]);
    assert_eq!(rows.len(), 1);

    let out = run.dir.join("prune");
    ok(&["ablate", "prune-sweep", "--config", s(&run.config), "--out", s(&out), "--base", s(&base)]);
    let (_, rows) = csv_rows(&out.join("report_prune_sweep.csv"));
    assert_eq!(rows.len(), 4, "two fractions, two seeds");
    let f0: f64 = rows[0][2].parse().unwrap();
    let f3: f64 = rows[2][2].parse().unwrap();
    assert!(f3 < f0);
    assert_eq!(rows[0][3], rows[1][3], "the zero-fraction point is the base itself");

    let out = run.dir.join("kd");
    let o = ok(&["ablate", "kd-matrix", "--config", s(&run.config), "--out", s(&out), "--pool", s(&pool)]);
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["cells"], json!(2));
    let (_, rows) = csv_rows(&out.join("report_kd_matrix.csv"));
    for r in &rows {
        let gain: f64 = r[6].parse().unwrap();
        let d: f64 = r[5].parse::<f64>().unwrap() - r[4].parse::<f64>().unwrap();
        assert!((gain - d).abs() < 1e-12);
    }

    let o = detnas(&["ablate", "kd-matrix", "--config", s(&run.config), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "kd-matrix without --pool");
}

//! The `detnas` command line: pool training, search, evaluation, reports
//! and ablations. Every command writes fixed file names under `--out`.
//!
//! Exit codes: 0 success, 2 bad input or configuration, 3 numeric failure.

mod ablate;
mod config;
mod report;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

pub use ablate::{dkd_vs_ckd, kd_matrix, median, prune_sweep, CurvePoint, KdCell, PrunePoint, DKD_FILE, KD_MATRIX_FILE, PRUNE_FILE};
pub use config::{sha256_hex, AblateConfig, BaseConfig, DatasetConfig, IpsRunConfig, RunConfig};
pub use report::{
    action_increments, allocation, best_path, best_row, write_actions, write_allocation, write_teacher_trace, ActionIncrement,
    ACTIONS_FILE, ALLOCATION_FILE, TEACHER_FILE,
};

use crate::etp::{ips_train, SupernetParams};
use crate::microdet::{evaluate_calibrated, train_distilled, Dataset, EvalSpec, Teachers};
use crate::morph::StudentState;
use crate::netgraph::{encode_arch, flops, load_checkpoint, save_checkpoint, Checkpoint, Detector, Metadata};
use crate::search::{cost, hill_climb, read_trajectory, score, SearchContext, TrajectoryWriter};
use crate::{Error, Result};

pub const SUPERNET_FILE: &str = "supernet.ckpt";
pub const BASE_FILE: &str = "base_student.ckpt";
pub const BEST_FILE: &str = "best_student.ckpt";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ETP_HISTORY_FILE: &str = "etp_history.csv";
pub const BASE_HISTORY_FILE: &str = "base_history.csv";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "detnas", version, about = "Detector search with pruning and dynamic distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trains the base student from scratch.
    TrainBase(Common),
    /// Trains the teacher pool with progressive shrinking.
    EtpTrain(Common),
    /// Runs the joint student/teacher hill climb.
    Search {
        #[command(flatten)]
        common: Common,
        /// Teacher pool checkpoint.
        #[arg(long)]
        pool: PathBuf,
        /// Starting student; trained per the config when omitted.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Prints mAP, FLOPS and score of a checkpoint as one JSON line.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resolution: usize,
    },
    /// Derives the analysis tables from a trajectory.
    Report {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs an ablation study.
    Ablate {
        #[arg(value_enum)]
        mode: AblateMode,
        #[command(flatten)]
        common: Common,
        /// Teacher pool; needed by dkd-vs-ckd and kd-matrix.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Student to prune in prune-sweep; trained per the config when omitted.
        #[arg(long)]
        base: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateMode {
    DkdVsCkd,
    PruneSweep,
    KdMatrix,
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_INPUT
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainBase(c) => cmd_train_base(&c),
        Command::EtpTrain(c) => cmd_etp_train(&c),
        Command::Search { common, pool, base, workers } => cmd_search(&common, &pool, base.as_deref(), workers),
        Command::Eval { checkpoint, config, resolution } => cmd_eval(&checkpoint, &config, resolution),
        Command::Report { trajectory, out } => cmd_report(&trajectory, &out),
        Command::Ablate { mode, common, pool, base } => cmd_ablate(mode, &common, pool.as_deref(), base.as_deref()),
    }
}

struct Setup {
    cfg: RunConfig,
    config_sha256: String,
    train: Dataset,
    val: Dataset,
}

fn setup(c: &Common) -> Result<Setup> {
    let (cfg, config_sha256) = RunConfig::load(&c.config)?;
    let cfg = cfg.with_seed(c.seed);
    std::fs::create_dir_all(&c.out)?;
    let (train, val) = (cfg.dataset.train(), cfg.dataset.val());
    Ok(Setup { cfg, config_sha256, train, val })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn save(dir: &Path, name: &str, ck: &Checkpoint) -> Result<()> {
    Ok(save_checkpoint(&dir.join(name), ck)?)
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).map_err(|e| Error::input(format!("checkpoint {}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> Error {
    Error::input(format!("csv: {e}"))
}

/// Trains the base student per `cfg` and writes its checkpoint and history.
pub fn train_base(cfg: &RunConfig, train: &Dataset, val: &Dataset, out: &Path) -> Result<Detector> {
    let mut det = Detector::fresh(cfg.base_arch()?, cfg.seed)?.without_adapter();
    let tc = cfg.base_train_config();
    let monitor = EvalSpec { data: val, res: cfg.ablate.eval_resolution };
    let hist = train_distilled(&mut det, Teachers::None, train, &tc, Some(monitor))?;
    let mut w = csv::Writer::from_writer(create(out, BASE_HISTORY_FILE)?);
    w.write_record(["epoch", "loss", "det_loss", "map"]).map_err(csv_err)?;
    for h in &hist {
        eprintln!("base epoch {} loss {:.4} mAP@{} {:.4}", h.epoch, h.loss, monitor.res, h.map.unwrap_or(f64::NAN));
        w.write_record([h.epoch.to_string(), h.loss.to_string(), h.det_loss.to_string(), h.map.unwrap_or(f64::NAN).to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    let meta = Metadata { seed: cfg.seed, epoch: tc.epochs as u64, resolutions: tc.resolutions.clone(), ..Metadata::default() };
    save(out, BASE_FILE, &Checkpoint::from_detector(&det, meta))?;
    Ok(det)
}

fn cmd_train_base(c: &Common) -> Result<()> {
    let s = setup(c)?;
    train_base(&s.cfg, &s.train, &s.val, &c.out)?;
    Ok(())
}

fn cmd_etp_train(c: &Common) -> Result<()> {
    let s = setup(c)?;
    let (pool, hist) = ips_train(&s.cfg.ips_schedule(), &s.train, &s.cfg.ips_config())?;
    let mut w = csv::Writer::from_writer(create(&c.out, ETP_HISTORY_FILE)?);
    w.write_record(["phase", "epoch", "loss", "det_loss", "kd_loss"]).map_err(csv_err)?;
    for h in &hist {
        w.write_record([h.phase, h.epoch].map(|v| v.to_string()).into_iter().chain([h.loss, h.det_loss, h.kd_loss].map(|v| v.to_string())))
            .map_err(csv_err)?;
    }
    w.flush()?;
    let epochs: usize = s.cfg.ips_schedule().phases.iter().map(|p| p.epochs).sum();
    let meta = Metadata { seed: s.cfg.seed, epoch: epochs as u64, resolutions: s.cfg.dataset.resolutions.clone(), ..Metadata::default() };
    save(&c.out, SUPERNET_FILE, &pool.to_checkpoint(meta))
}

fn load_pool(path: &Path) -> Result<SupernetParams> {
    SupernetParams::from_checkpoint(&load(path)?)
}

fn base_student(s: &Setup, base: Option<&Path>, out: &Path) -> Result<Detector> {
    match base {
        Some(p) => Ok(load(p)?.to_detector().map_err(|e| Error::input(format!("checkpoint {}: {e}", p.display())))?),
        None => train_base(&s.cfg, &s.train, &s.val, out),
    }
}

fn cmd_search(c: &Common, pool: &Path, base: Option<&Path>, workers: usize) -> Result<()> {
    let s = setup(c)?;
    let pool = load_pool(pool)?;
    let base = base_student(&s, base, &c.out)?;
    let ctx = SearchContext::new(&pool, &s.train, &s.val, &s.cfg.search, &base.arch)?;
    let mut writer = TrajectoryWriter::new(create(&c.out, TRAJECTORY_FILE)?)?;
    let outcome = hill_climb(StudentState::new(base), &ctx, workers, &mut |row| {
        eprintln!(
            "iter {:>3} {:<18} mAP {:.4} flops {:.0} score {:.4} best {:.4}",
            row.iteration,
            row.action.label(),
            row.map,
            row.flops,
            row.score,
            row.best_score
        );
        writer.append(row)
    })?;
    let best = outcome.top_k.best().expect("the initial pair always scores");
    let e = best.best_eval().expect("ranked pairs are evaluated");
    let det = best.student.detector()?.without_adapter();
    let mut meta = Metadata { seed: s.cfg.seed, resolutions: vec![e.resolution], score: Some(e.score), ..Metadata::default() };
    meta.extra.insert("iteration".into(), json!(best.id));
    meta.extra.insert("map".into(), json!(e.map));
    meta.extra.insert("teacher".into(), json!(best.teacher));
    save(&c.out, BEST_FILE, &Checkpoint::from_detector(&det, meta))?;
    let summary = |p: &crate::search::CandidatePair| {
        let e = p.best_eval();
        json!({
            "iteration": p.id,
            "arch": encode_arch(&p.student.arch),
            "resolution": e.map(|e| e.resolution),
            "map": e.map(|e| e.map),
            "flops": e.map(|e| e.flops),
            "score": e.map(|e| e.score),
            "teacher": p.teacher,
        })
    };
    let manifest = json!({
        "command": "search",
        "config_sha256": s.config_sha256,
        "config": s.cfg,
        "seed": s.cfg.seed,
        "workers": workers,
        "score_params": ctx.score,
        "iterations_run": outcome.trajectory.len() - 1,
        "stopped_early": outcome.stopped_early,
        "initial": summary(&outcome.initial),
        "best": summary(best),
        "artifacts": [TRAJECTORY_FILE, BEST_FILE],
    });
    std::fs::write(c.out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest).expect("serializable") + "\n")?;
    Ok(())
}

/// The JSON record `eval` prints.
pub fn eval_record(ck: &Checkpoint, cfg: &RunConfig, train: &Dataset, val: &Dataset, resolution: usize) -> Result<serde_json::Value> {
    let det = ck.to_detector().map_err(|e| Error::input(format!("checkpoint: {e}")))?;
    det.arch.check_resolution(resolution, resolution)?;
    if !cfg.dataset.resolutions.contains(&resolution) {
        return Err(Error::input(format!("resolution {resolution} is not rendered by the dataset {:?}", cfg.dataset.resolutions)));
    }
    let map = evaluate_calibrated(&det, train, val, resolution)?;
    let f = flops(&det.arch, (resolution, resolution))?;
    let params = cfg.search.score_params(&cfg.base_arch()?)?;
    let c = cost(&det.arch, resolution, cfg.search.flops_scope)?;
    Ok(json!({
        "arch": encode_arch(&det.arch),
        "resolution": resolution,
        "map": map,
        "flops": f,
        "score": score(map, c, resolution as f64, &params),
    }))
}

fn cmd_eval(checkpoint: &Path, config: &Path, resolution: usize) -> Result<()> {
    let (cfg, _) = RunConfig::load(config)?;
    let ck = load(checkpoint)?;
    let rec = eval_record(&ck, &cfg, &cfg.dataset.train(), &cfg.dataset.val(), resolution)?;
    println!("{rec}");
    Ok(())
}

fn cmd_report(trajectory: &Path, out: &Path) -> Result<()> {
    let f = File::open(trajectory).map_err(|e| Error::input(format!("cannot open {}: {e}", trajectory.display())))?;
    let rows = read_trajectory(f)?;
    std::fs::create_dir_all(out)?;
    write_actions(create(out, ACTIONS_FILE)?, &rows)?;
    write_teacher_trace(create(out, TEACHER_FILE)?, &rows)?;
    write_allocation(create(out, ALLOCATION_FILE)?, &rows)
}

fn cmd_ablate(mode: AblateMode, c: &Common, pool: Option<&Path>, base: Option<&Path>) -> Result<()> {
    let s = setup(c)?;
    let need_pool = || pool.ok_or_else(|| Error::input("this ablation needs --pool")).and_then(load_pool);
    let summary = match mode {
        AblateMode::DkdVsCkd => {
            let pts = dkd_vs_ckd(&s.cfg, &need_pool()?, &s.train, &s.val)?;
            ablate::write_curves(create(&c.out, DKD_FILE)?, &pts)?;
            let last = pts.last().expect("at least one epoch");
            json!({ "mode": "dkd-vs-ckd", "final_ckd_map": last.ckd_map, "final_dkd_map": last.dkd_map, "dkd_at_least_ckd": last.dkd_map >= last.ckd_map })
        }
        AblateMode::PruneSweep => {
            let base = base_student(&s, base, &c.out)?;
            let pts = prune_sweep(&s.cfg, &base, &s.train, &s.val)?;
            ablate::write_prune(create(&c.out, PRUNE_FILE)?, &pts)?;
            json!({ "mode": "prune-sweep", "points": pts.len() })
        }
        AblateMode::KdMatrix => {
            let cells = kd_matrix(&s.cfg, &need_pool()?, &s.train, &s.val)?;
            ablate::write_kd(create(&c.out, KD_MATRIX_FILE)?, &cells)?;
            let mut gains: Vec<f64> = cells.iter().map(KdCell::gain).collect();
            json!({ "mode": "kd-matrix", "cells": cells.len(), "median_gain": median(&mut gains) })
        }
    };
    println!("{summary}");
    Ok(())
}

//! Ablation studies: dynamic vs fixed teacher, a pruning sweep and a
//! student/teacher distillation matrix.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use crate::etp::{extract_subnet, sample_subnet, SubnetChoice, SupernetParams};
use crate::microdet::{calibrated_teachers, evaluate_calibrated, train_distilled, Dataset, EvalSpec, Teachers};
use crate::morph::{f_evolve, Action, StudentState};
use crate::netgraph::{decode_arch, encode_arch, flops, ArchSpec, Detector};
use crate::{Error, Result};

pub const DKD_FILE: &str = "report_dkd_vs_ckd.csv";
pub const PRUNE_FILE: &str = "report_prune_sweep.csv";
pub const KD_MATRIX_FILE: &str = "report_kd_matrix.csv";

/// One epoch of both learning curves.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub ckd_map: f64,
    pub dkd_map: f64,
    pub ckd_loss: f64,
    pub dkd_loss: f64,
}

/// Trains the same fresh student twice: once distilled from the pool's
/// maximal subnet (conventional KD), once from a teacher drawn every
/// iteration out of a panel of pool subnets (dynamic KD). Batches and
/// resolutions are identical between the two runs.
pub fn dkd_vs_ckd(cfg: &RunConfig, pool: &SupernetParams, train: &Dataset, val: &Dataset) -> Result<Vec<CurvePoint>> {
    let a = &cfg.ablate;
    let res = &cfg.dataset.resolutions;
    let student = Detector::fresh(cfg.base_arch()?, cfg.seed)?;
    let tc = cfg.ablate_train_config(cfg.seed, true);
    let monitor = Some(EvalSpec { data: val, res: a.eval_resolution });

    let max = calibrated_teachers(&extract_subnet(pool, &pool.space.max_choice())?, train, res)?;
    let mut ckd = student.clone();
    let ckd_hist = train_distilled(&mut ckd, Teachers::PerResolution(&max), train, &tc, monitor)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd4d);
    let panel = (0..a.dkd_panel)
        .map(|_| calibrated_teachers(&extract_subnet(pool, &sample_subnet(&pool.space, &mut rng))?, train, res))
        .collect::<Result<Vec<_>>>()?;
    let mut dkd = student;
    let dkd_hist = train_distilled(&mut dkd, Teachers::Panel(&panel), train, &tc, monitor)?;

    Ok(ckd_hist
        .iter()
        .zip(&dkd_hist)
        .map(|(c, d)| CurvePoint {
            epoch: c.epoch + 1,
            ckd_map: c.map.expect("monitored"),
            dkd_map: d.map.expect("monitored"),
            ckd_loss: c.loss,
            dkd_loss: d.loss,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrunePoint {
    pub fraction: f64,
    pub seed: u64,
    pub flops: f64,
    /// Right after pruning, BN recalibrated.
    pub map_pruned: f64,
    /// After fine-tuning without distillation.
    pub map_finetuned: f64,
}

/// Prunes `base` by each configured fraction (BN-scale ranking, one shot),
/// then fine-tunes once per seed. Fraction 0 leaves the network untouched.
pub fn prune_sweep(cfg: &RunConfig, base: &Detector, train: &Dataset, val: &Dataset) -> Result<Vec<PrunePoint>> {
    let a = &cfg.ablate;
    let r = a.eval_resolution;
    let mut out = Vec::new();
    for &fraction in &a.prune_fractions {
        let state = StudentState::new(base.clone());
        let pruned = if fraction == 0.0 { state } else { f_evolve(&state, Action::ChannelPrune { fraction })? };
        let det = pruned.detector()?;
        let map_pruned = evaluate_calibrated(&det, train, val, r)?;
        for &seed in &a.seeds {
            let mut tuned = det.clone();
            let map_finetuned = if a.prune_finetune_epochs == 0 {
                map_pruned
            } else {
                let mut tc = cfg.ablate_train_config(seed, false);
                tc.epochs = a.prune_finetune_epochs;
                train_distilled(&mut tuned, Teachers::None, train, &tc, None)?;
                evaluate_calibrated(&tuned, train, val, r)?
            };
            out.push(PrunePoint { fraction, seed, flops: flops(&det.arch, (r, r))?, map_pruned, map_finetuned });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KdCell {
    pub student: String,
    pub teacher: SubnetChoice,
    pub teacher_flops: f64,
    pub seed: u64,
    pub map_no_kd: f64,
    pub map_kd: f64,
}

impl KdCell {
    pub fn gain(&self) -> f64 {
        self.map_kd - self.map_no_kd
    }
}

/// Trains every configured (student, teacher) pair from scratch with and
/// without distillation, once per seed. The no-KD twin is shared by all
/// teachers of a student.
pub fn kd_matrix(cfg: &RunConfig, pool: &SupernetParams, train: &Dataset, val: &Dataset) -> Result<Vec<KdCell>> {
    let a = &cfg.ablate;
    let r = a.eval_resolution;
    let students: Vec<ArchSpec> = if a.kd_students.is_empty() {
        vec![cfg.base_arch()?]
    } else {
        a.kd_students
            .iter()
            .map(|s| decode_arch(s).map_err(|e| Error::input(format!("config field `ablate.kd_students`: {e}"))))
            .collect::<Result<_>>()?
    };
    let teachers = if a.kd_teachers.is_empty() { vec![pool.space.max_choice()] } else { a.kd_teachers.clone() };
    let mut calibrated = Vec::with_capacity(teachers.len());
    for t in &teachers {
        pool.space.check(t).map_err(|e| Error::input(format!("config field `ablate.kd_teachers`: {e}")))?;
        calibrated.push(calibrated_teachers(&extract_subnet(pool, t)?, train, &cfg.dataset.resolutions)?);
    }
    let mut out = Vec::new();
    for arch in &students {
        for &seed in &a.seeds {
            let fresh = Detector::fresh(arch.clone(), seed)?;
            let mut plain = fresh.clone();
            train_distilled(&mut plain, Teachers::None, train, &cfg.ablate_train_config(seed, false), None)?;
            let map_no_kd = evaluate_calibrated(&plain, train, val, r)?;
            for (t, cal) in teachers.iter().zip(&calibrated) {
                let mut kd = fresh.clone();
                train_distilled(&mut kd, Teachers::PerResolution(cal), train, &cfg.ablate_train_config(seed, true), None)?;
                out.push(KdCell {
                    student: encode_arch(arch),
                    teacher: t.clone(),
                    teacher_flops: flops(&pool.space.arch(t), (r, r))?,
                    seed,
                    map_no_kd,
                    map_kd: evaluate_calibrated(&kd, train, val, r)?,
                });
            }
        }
    }
    Ok(out)
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn write_curves<W: Write>(w: W, pts: &[CurvePoint]) -> Result<()> {
    write_rows(w, pts)
}

pub fn write_prune<W: Write>(w: W, pts: &[PrunePoint]) -> Result<()> {
    write_rows(w, pts)
}

pub fn write_kd<W: Write>(w: W, cells: &[KdCell]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::input(format!("csv: {e}"));
    out.write_record(["student", "teacher_json", "teacher_flops", "seed", "map_no_kd", "map_kd", "gain"]).map_err(err)?;
    for c in cells {
        out.write_record([
            c.student.clone(),
            serde_json::to_string(&c.teacher).expect("serializable"),
            c.teacher_flops.to_string(),
            c.seed.to_string(),
            c.map_no_kd.to_string(),
            c.map_kd.to_string(),
            c.gain().to_string(),
        ])
        .map_err(err)?;
    }
    out.flush()?;
    Ok(())
}

fn write_rows<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::input(format!("csv: {e}")))?;
    }
    out.flush()?;
    Ok(())
}

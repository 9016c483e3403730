use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{det_loss, evaluate_calibrated, Dataset, HeadVars, Scene};
use crate::distill::{bn_reg_loss, cls_kd_loss, feat_loss, loc_kd_loss, share_proposals, total_loss, LossConfig, LossTerms};
use crate::netgraph::Detector;
use crate::tensor::{BnBatchStats, Gradients, Graph, Mode, Sgd, Tensor, BN_MOMENTUM};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Half-cosine decay from `lr0` to zero over all iterations.
    Cosine { lr0: f64 },
}

impl LrSchedule {
    pub fn at(&self, iteration: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { lr0 } => {
                let t = iteration as f64 / total.max(1) as f64;
                0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn initial(&self) -> f64 {
        self.at(0, 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Scenes drawn per epoch; `None` uses the whole dataset.
    #[serde(default)]
    pub scenes_per_epoch: Option<usize>,
    pub lr: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub resolutions: Vec<usize>,
    #[serde(default)]
    pub loss: LossConfig,
    pub seed: u64,
    #[serde(default = "default_shuffle")]
    pub shuffle: bool,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_shuffle() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::input("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::input("batch_size must be >= 1"));
        }
        if self.resolutions.is_empty() {
            return Err(Error::input("resolution set is empty"));
        }
        self.loss.validate()
    }

    fn iterations_per_epoch(&self, n: usize) -> usize {
        let scenes = self.scenes_per_epoch.unwrap_or(n).min(n);
        (scenes / self.batch_size).max(1)
    }
}

/// Held-out set monitored after every epoch, with BN recalibrated on the
/// training set.
#[derive(Clone, Copy)]
pub struct EvalSpec<'a> {
    pub data: &'a Dataset,
    pub res: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean total loss over the epoch's iterations.
    pub loss: f64,
    pub det_loss: f64,
    pub kd_loss: f64,
    pub map: Option<f64>,
    /// Resolution used by each iteration.
    pub resolutions: Vec<usize>,
}

/// Values of one step's loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub det: f64,
    pub kd: f64,
}

/// Forward and backward of one batch. Returns parameter gradients, the BN
/// batch statistics to fold into running stats, and the loss values.
pub fn compute_step(
    student: &Detector,
    teacher: Option<&Detector>,
    images: Tensor,
    scenes: &[Scene],
    loss: &LossConfig,
) -> Result<(Gradients, Vec<BnBatchStats>, StepLosses)> {
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let mut g = Graph::new(Mode::Train);
    let x = g.input(images.clone());
    let out = student.forward(&mut g, x)?;
    let head = HeadVars::new(&mut g, &out, h, w)?;
    let det = det_loss(&mut g, &head, scenes)?;
    let bn = bn_reg_loss(&mut g, &student.params)?;
    let mut terms = LossTerms { det, feat: None, cls_kd: None, loc_kd: None, bn };
    if let Some(t) = teacher.filter(|_| loss.w_feat > 0.0 || loss.w_pred > 0.0) {
        let (pred, feat) = share_proposals(&mut g, &head, t, &images)?;
        if loss.w_feat > 0.0 {
            terms.feat = Some(feat_loss(&mut g, &student.params, &feat)?);
        }
        if loss.w_pred > 0.0 {
            terms.cls_kd = Some(cls_kd_loss(&mut g, &pred)?);
            terms.loc_kd = Some(loc_kd_loss(&mut g, &pred)?);
        }
    }
    let total = total_loss(&mut g, &terms, loss)?;
    let val = |v: Option<crate::tensor::Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
    let losses = StepLosses {
        total: val(Some(total)),
        det: val(Some(terms.det)),
        kd: loss.w_feat * val(terms.feat) + loss.w_pred * (val(terms.cls_kd) + val(terms.loc_kd)),
    };
    let grads = g.backward(total)?;
    Ok((grads, g.bn_stats().to_vec(), losses))
}

/// Names the optimizer updates: all trainable parameters, minus the
/// adapter when there is nothing to distill from.
pub fn optimized_names(student: &Detector, distilling: bool) -> Vec<String> {
    student.params.trainable_names().into_iter().filter(|n| distilling || !n.starts_with("adapter.")).collect()
}

fn numeric(e: Error, epoch: usize, it: usize) -> Error {
    if e.is_numeric() {
        Error::Numeric(format!("diverged at epoch {epoch}, iteration {it}: {e}"))
    } else {
        e
    }
}

/// Frozen distillation teachers.
#[derive(Clone, Copy, Debug)]
pub enum Teachers<'a> {
    None,
    Fixed(&'a Detector),
    /// One teacher per training resolution, each with BN statistics
    /// calibrated at that resolution.
    PerResolution(&'a BTreeMap<usize, Detector>),
    /// Several per-resolution teachers; every iteration draws one uniformly.
    Panel(&'a [BTreeMap<usize, Detector>]),
}

impl<'a> Teachers<'a> {
    /// Teacher for an iteration at `res`. Only [`Teachers::Panel`] draws
    /// from `rng`.
    pub fn pick<R: Rng + ?Sized>(&self, res: usize, rng: &mut R) -> Result<Option<&'a Detector>> {
        let lookup = |m: &'a BTreeMap<usize, Detector>| {
            m.get(&res).map(Some).ok_or_else(|| Error::input(format!("no teacher calibrated for resolution {res}")))
        };
        match *self {
            Teachers::None => Ok(None),
            Teachers::Fixed(t) => Ok(Some(t)),
            Teachers::PerResolution(m) => lookup(m),
            Teachers::Panel([]) => Err(Error::input("empty teacher panel")),
            Teachers::Panel(p) => lookup(&p[rng.random_range(0..p.len())]),
        }
    }

    fn is_some(&self) -> bool {
        !matches!(self, Teachers::None)
    }
}

impl<'a> From<Option<&'a Detector>> for Teachers<'a> {
    fn from(t: Option<&'a Detector>) -> Self {
        t.map_or(Teachers::None, Teachers::Fixed)
    }
}

/// Trains `student` (optionally distilled from a frozen `teacher`) with
/// momentum SGD, sampling one resolution per iteration.
pub fn train_epochs(
    student: &mut Detector,
    teacher: Option<&Detector>,
    data: &Dataset,
    cfg: &TrainConfig,
    monitor: Option<EvalSpec<'_>>,
) -> Result<Vec<EpochStats>> {
    train_distilled(student, teacher.into(), data, cfg, monitor)
}

/// [`train_epochs`] with a teacher chosen per iteration resolution.
pub fn train_distilled(
    student: &mut Detector,
    teachers: Teachers<'_>,
    data: &Dataset,
    cfg: &TrainConfig,
    monitor: Option<EvalSpec<'_>>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::input("empty training set"));
    }
    for &r in &cfg.resolutions {
        student.arch.check_resolution(r, r)?;
    }
    let distilling = teachers.is_some() && (cfg.loss.w_feat > 0.0 || cfg.loss.w_pred > 0.0);
    if distilling {
        student.ensure_adapter(cfg.seed);
    }
    let mut opt = Sgd::new(optimized_names(student, distilling), cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // separate stream, so batches and resolutions do not depend on the teachers
    let mut teacher_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7eac);
    let per_epoch = cfg.iterations_per_epoch(data.len());
    let total_iters = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sums = StepLosses::default();
        let mut used = Vec::with_capacity(per_epoch);
        for it in 0..per_epoch {
            let start = (it * cfg.batch_size) % data.len();
            let idx: Vec<usize> = (0..cfg.batch_size).map(|k| order[(start + k) % data.len()]).collect();
            let res = cfg.resolutions[rng.random_range(0..cfg.resolutions.len())];
            used.push(res);
            let (images, scenes) = data.batch(&idx, res);
            let step = epoch * per_epoch + it;
            let (grads, stats, l) =
                compute_step(student, teachers.pick(res, &mut teacher_rng)?, images, &scenes, &cfg.loss).map_err(|e| numeric(e, epoch, it))?;
            opt.step(&mut student.params, &grads, cfg.lr.at(step, total_iters))?;
            student.params.update_bn_stats(&stats, BN_MOMENTUM)?;
            sums.total += l.total;
            sums.det += l.det;
            sums.kd += l.kd;
        }
        let n = per_epoch as f64;
        let map = match monitor {
            Some(m) => Some(evaluate_calibrated(student, data, m.data, m.res)?),
            None => None,
        };
        history.push(EpochStats {
            epoch,
            loss: sums.total / n,
            det_loss: sums.det / n,
            kd_loss: sums.kd / n,
            map,
            resolutions: used,
        });
    }
    Ok(history)
}

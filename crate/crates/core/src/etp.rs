//! The elastic teacher pool: a weight-sharing super-network over stage
//! depths and width coefficients, its phased shrinking training, subnet
//! sampling and extraction, and BN recalibration.
//!
//! Subnets take the first `d` blocks of every stage and the first
//! `ceil(c · W)` channels of every layer. BN layers inside the stages keep a
//! separate record per width coefficient, stored as `<prefix>@<coef>.*`.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::LossConfig;
use crate::microdet::{calibrated_teachers, compute_step, Dataset, LrSchedule, RESOLUTIONS};
use crate::netgraph::{
    encode_arch, param_shapes, ArchSpec, Checkpoint, Detector, Metadata, NetError, BASE_NECK, BASE_STEM, BASE_WIDTHS,
    NUM_STAGES,
};
use crate::tensor::{Gradients, ParamStore, Sgd, Tensor, BN_MOMENTUM};
use crate::{Error, Result};

pub const WIDTH_COEFFS: [f64; 3] = [1.0, 1.25, 1.5];
/// Feature-imitation weight used when distilling subnets. The neck features
/// are unnormalized, and at weight 1 the term outweighs the detection loss
/// by two orders of magnitude and diverges at the phase 2 learning rate.
pub const DESK_W_FEAT: f64 = 0.01;
const SPACE_KEY: &str = "subnet_space";

/// Channels of a layer of base width `base` at coefficient `c`.
pub fn scaled_width(base: usize, c: f64) -> usize {
    // the epsilon keeps exact products such as 1.25 * 16 from rounding up
    ((base as f64 * c) - 1e-9).ceil().max(1.0) as usize
}

/// Bounds of a set of subnets: inclusive depth ranges, the admissible width
/// coefficients (shared by every stage and the neck), and resolutions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetSpace {
    pub depths: [(usize, usize); NUM_STAGES],
    pub coeffs: Vec<f64>,
    pub resolutions: Vec<usize>,
    #[serde(default = "default_widths")]
    pub base_widths: [usize; NUM_STAGES],
    #[serde(default = "default_stem")]
    pub stem_width: usize,
    #[serde(default = "default_neck")]
    pub base_neck: usize,
}

fn default_widths() -> [usize; NUM_STAGES] {
    BASE_WIDTHS
}

fn default_stem() -> usize {
    BASE_STEM
}

fn default_neck() -> usize {
    BASE_NECK
}

/// One point of a [`SubnetSpace`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetChoice {
    pub depths: [usize; NUM_STAGES],
    pub stage_coeffs: [f64; NUM_STAGES],
    pub neck_coeff: f64,
    pub resolution: usize,
}

impl SubnetSpace {
    /// The desk-scale pool space.
    pub fn desk() -> Self {
        Self {
            depths: [(1, 2), (1, 2), (1, 3), (1, 2)],
            coeffs: WIDTH_COEFFS.to_vec(),
            resolutions: RESOLUTIONS.to_vec(),
            base_widths: BASE_WIDTHS,
            stem_width: BASE_STEM,
            base_neck: BASE_NECK,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (s, &(lo, hi)) in self.depths.iter().enumerate() {
            if lo == 0 || lo > hi {
                return Err(Error::input(format!("stage {s} depth range {lo}..{hi} is empty or starts at 0")));
            }
        }
        if self.coeffs.is_empty() || self.resolutions.is_empty() {
            return Err(Error::input("space needs at least one width coefficient and one resolution"));
        }
        for w in self.coeffs.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::input(format!("width coefficients must be strictly increasing: {:?}", self.coeffs)));
            }
        }
        if let Some(c) = self.coeffs.iter().find(|c| !(1.0..=1.5).contains(*c)) {
            return Err(Error::input(format!("width coefficient {c} outside [1.0, 1.5]")));
        }
        for &r in &self.resolutions {
            self.max_arch().check_resolution(r, r)?;
        }
        Ok(())
    }

    /// Number of subnets: depth tuples × coefficient tuples × resolutions.
    pub fn size(&self) -> u128 {
        let depths: u128 = self.depths.iter().map(|(lo, hi)| (hi - lo + 1) as u128).product();
        depths * (self.coeffs.len() as u128).pow(NUM_STAGES as u32 + 1) * self.resolutions.len() as u128
    }

    pub fn max_coeff(&self) -> f64 {
        *self.coeffs.last().expect("validated space")
    }

    /// The super-net: maximal depths and widths, at the largest resolution.
    pub fn max_choice(&self) -> SubnetChoice {
        let c = self.max_coeff();
        SubnetChoice {
            depths: self.depths.map(|(_, hi)| hi),
            stage_coeffs: [c; NUM_STAGES],
            neck_coeff: c,
            resolution: *self.resolutions.iter().max().expect("validated space"),
        }
    }

    pub fn min_choice(&self) -> SubnetChoice {
        let c = self.coeffs[0];
        SubnetChoice {
            depths: self.depths.map(|(lo, _)| lo),
            stage_coeffs: [c; NUM_STAGES],
            neck_coeff: c,
            resolution: *self.resolutions.iter().min().expect("validated space"),
        }
    }

    pub fn max_arch(&self) -> ArchSpec {
        self.arch(&self.max_choice())
    }

    /// Architecture of `c` (its resolution does not matter).
    pub fn arch(&self, c: &SubnetChoice) -> ArchSpec {
        let widths = std::array::from_fn(|s| scaled_width(self.base_widths[s], c.stage_coeffs[s]));
        ArchSpec::basic(c.depths, widths, self.stem_width, scaled_width(self.base_neck, c.neck_coeff))
    }

    pub fn contains(&self, c: &SubnetChoice) -> bool {
        self.check(c).is_ok()
    }

    pub fn check(&self, c: &SubnetChoice) -> Result<()> {
        for s in 0..NUM_STAGES {
            let (lo, hi) = self.depths[s];
            if !(lo..=hi).contains(&c.depths[s]) {
                return Err(Error::input(format!("stage {s} depth {} outside {lo}..{hi}", c.depths[s])));
            }
            if !self.coeffs.contains(&c.stage_coeffs[s]) {
                return Err(Error::input(format!("stage {s} coefficient {} not in {:?}", c.stage_coeffs[s], self.coeffs)));
            }
        }
        if !self.coeffs.contains(&c.neck_coeff) {
            return Err(Error::input(format!("neck coefficient {} not in {:?}", c.neck_coeff, self.coeffs)));
        }
        if !self.resolutions.contains(&c.resolution) {
            return Err(Error::input(format!("resolution {} not in {:?}", c.resolution, self.resolutions)));
        }
        Ok(())
    }

    /// Whether every subnet of `self` lies in `other`; the error names the
    /// first violation.
    pub fn check_subset_of(&self, other: &SubnetSpace) -> std::result::Result<(), String> {
        if (self.base_widths, self.stem_width, self.base_neck) != (other.base_widths, other.stem_width, other.base_neck) {
            return Err("base widths differ".into());
        }
        for s in 0..NUM_STAGES {
            let ((a, b), (c, d)) = (self.depths[s], other.depths[s]);
            if a < c || b > d {
                return Err(format!("stage {s} depths {a}..{b} not within {c}..{d}"));
            }
        }
        if let Some(c) = self.coeffs.iter().find(|c| !other.coeffs.contains(c)) {
            return Err(format!("coefficient {c} not in {:?}", other.coeffs));
        }
        if let Some(r) = self.resolutions.iter().find(|r| !other.resolutions.contains(r)) {
            return Err(format!("resolution {r} not in {:?}", other.resolutions));
        }
        Ok(())
    }

    /// Every subnet, in lexicographic (depths, coefficients, resolution) order.
    pub fn enumerate(&self) -> Vec<SubnetChoice> {
        let mut out = Vec::new();
        let depth_sets: Vec<Vec<usize>> = self.depths.iter().map(|&(lo, hi)| (lo..=hi).collect()).collect();
        let coeff_sets = vec![self.coeffs.clone(); NUM_STAGES + 1];
        for d in cartesian(&depth_sets) {
            for c in cartesian(&coeff_sets) {
                for &resolution in &self.resolutions {
                    out.push(SubnetChoice {
                        depths: [d[0], d[1], d[2], d[3]],
                        stage_coeffs: [c[0], c[1], c[2], c[3]],
                        neck_coeff: c[4],
                        resolution,
                    });
                }
            }
        }
        out
    }
}

fn cartesian<T: Copy>(sets: &[Vec<T>]) -> Vec<Vec<T>> {
    sets.iter().fold(vec![Vec::new()], |acc, set| {
        acc.iter()
            .flat_map(|prefix| {
                set.iter().map(move |&x| {
                    let mut v = prefix.clone();
                    v.push(x);
                    v
                })
            })
            .collect()
    })
}

/// Uniform draw over `space`: depths, stage coefficients, neck coefficient,
/// then resolution.
pub fn sample_subnet<R: Rng + ?Sized>(space: &SubnetSpace, rng: &mut R) -> SubnetChoice {
    let depths = space.depths.map(|(lo, hi)| rng.random_range(lo..=hi));
    let stage_coeffs = std::array::from_fn(|_| *space.coeffs.choose(rng).expect("validated space"));
    let neck_coeff = *space.coeffs.choose(rng).expect("validated space");
    let resolution = *space.resolutions.choose(rng).expect("validated space");
    SubnetChoice { depths, stage_coeffs, neck_coeff, resolution }
}

/// Count of subnets in `space`.
pub fn space_size(space: &SubnetSpace) -> u128 {
    space.size()
}

// ---- super-net parameters ----------------------------------------------------

/// Super-net weights sized for the space's maximal subnet, with one BN
/// record per width coefficient inside the stages. Includes the feature
/// adapter used when subnets are distilled from the super-net.
#[derive(Clone, Debug, PartialEq)]
pub struct SupernetParams {
    pub space: SubnetSpace,
    pub params: ParamStore,
}

/// Splits a stage BN tensor name into `(prefix, field)`, e.g.
/// `s1.b0.proj_bn.gamma` into `("s1.b0.proj_bn", "gamma")`.
fn stage_bn(name: &str) -> Option<(&str, &str)> {
    if !name.starts_with('s') || name.starts_with("stem.") {
        return None;
    }
    let (prefix, field) = name.rsplit_once('.')?;
    let layer = prefix.rsplit('.').next()?;
    (layer.starts_with("bn") || layer == "proj_bn").then_some((prefix, field))
}

fn stage_of(name: &str) -> usize {
    name[1..name.find('.').expect("stage tensor name")].parse().expect("stage index")
}

fn switchable(prefix: &str, coeff: f64, field: &str) -> String {
    format!("{prefix}@{coeff}.{field}")
}

/// Sets a `[out, in, k, k]` kernel to pass input channel `i` through to
/// output `i`. The maximal subnet then starts with zero feature loss
/// against the super-net it is a copy of.
fn dirac_adapter(w: &mut Tensor) {
    let s = w.shape().to_vec();
    let (c_in, k) = (s[1], s[2]);
    let data = w.data_mut();
    data.fill(0.0);
    for i in 0..s[0].min(c_in) {
        data[((i * c_in + i) * k + k / 2) * k + k / 2] = 1.0;
    }
}

impl SupernetParams {
    pub fn fresh(space: SubnetSpace, seed: u64) -> Result<Self> {
        space.validate()?;
        let max = Detector::fresh(space.max_arch(), seed)?;
        let mut params = ParamStore::new();
        for (name, t) in max.params.iter() {
            match stage_bn(name) {
                Some((prefix, field)) => {
                    let stage = stage_of(name);
                    for &c in &space.coeffs {
                        let w = scaled_width(space.base_widths[stage], c);
                        params.insert(switchable(prefix, c, field), t.prefix(&[w])?);
                    }
                }
                None => params.insert(name.clone(), t.clone()),
            }
        }
        dirac_adapter(params.get_mut("adapter.w").expect("super-net has an adapter"));
        Ok(Self { space, params })
    }

    /// Super-net name holding the (prefix of the) subnet tensor `name` of `c`.
    fn source_name(&self, name: &str, c: &SubnetChoice) -> String {
        match stage_bn(name) {
            Some((prefix, field)) => switchable(prefix, c.stage_coeffs[stage_of(name)], field),
            None => name.to_string(),
        }
    }

    /// Value copy of subnet `c`, optionally with the adapter.
    pub fn extract_with(&self, c: &SubnetChoice, with_adapter: bool) -> Result<Detector> {
        self.space.check(c)?;
        let arch = self.space.arch(c);
        let mut params = ParamStore::new();
        for (name, shape) in param_shapes(&arch, with_adapter) {
            let src = self.params.require(&self.source_name(&name, c))?;
            params.insert(name, src.prefix(&shape)?);
        }
        Ok(Detector::from_params(arch, params)?)
    }

    /// Adds subnet gradients into full-size super-net gradients.
    fn lift_grads(&self, grads: &Gradients, c: &SubnetChoice, sub: &Detector) -> Result<Gradients> {
        let mut out = Gradients::new();
        for (name, g) in grads {
            let src = self.source_name(name, c);
            let full_shape = self.params.require(&src)?.shape().to_vec();
            let mut full = Tensor::zeros(&full_shape);
            let sub_shape = sub.params.require(name)?.shape().to_vec();
            full.add_prefix(&Tensor::new(sub_shape, g.clone())?)?;
            out.insert(src, full.into_data());
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, mut metadata: Metadata) -> Checkpoint {
        metadata.extra.insert(SPACE_KEY.into(), serde_json::to_value(&self.space).expect("space serializes"));
        Checkpoint { arch_encoding: encode_arch(&self.space.max_arch()), tensors: self.params.clone(), metadata }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let space: SubnetSpace = match ck.metadata.extra.get(SPACE_KEY) {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::input(format!("bad subnet space in checkpoint: {e}")))?,
            None => return Err(Error::input("checkpoint carries no subnet space; not a super-net")),
        };
        space.validate()?;
        let expect = SupernetParams::fresh(space.clone(), 0)?;
        let mut problems = Vec::new();
        for (name, t) in expect.params.iter() {
            match ck.tensors.get(name) {
                None => problems.push(format!("  missing {name}")),
                Some(u) if u.shape() != t.shape() => problems.push(format!("  {name}: {:?} vs {:?}", u.shape(), t.shape())),
                _ => {}
            }
        }
        if ck.tensors.len() != expect.params.len() {
            problems.push(format!("  {} tensors, expected {}", ck.tensors.len(), expect.params.len()));
        }
        if !problems.is_empty() {
            return Err(NetError::ParamMismatch(problems.join("\n")).into());
        }
        Ok(Self { space, params: ck.tensors.clone() })
    }
}

/// Value copy of subnet `c` of the pool, ready for evaluation after
/// [`recalibrate_bn`].
pub fn extract_subnet(sp: &SupernetParams, c: &SubnetChoice) -> Result<Detector> {
    sp.extract_with(c, false)
}

/// Resets the teacher's BN running statistics to the batch statistics of
/// `batch`.
pub fn recalibrate_bn(teacher: &mut Detector, batch: &Tensor) -> Result<()> {
    if batch.shape().first().is_none_or(|&n| n == 0) {
        return Err(Error::input("calibration batch is empty"));
    }
    Ok(teacher.recalibrate_bn(batch)?)
}

// ---- phased training ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IpsPhase {
    pub space: SubnetSpace,
    pub lr: f64,
    pub epochs: usize,
}

/// Training phases, each admitting a superset of the previous phase's
/// subnets; the first trains the super-net alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IpsSchedule {
    pub phases: Vec<IpsPhase>,
}

impl IpsSchedule {
    /// Three phases over `space`: the super-net alone, then the top two
    /// depths and coefficients, then everything.
    pub fn three_phase(space: &SubnetSpace, lrs: [f64; 3], epochs: [usize; 3]) -> Self {
        let top = space.max_coeff();
        let mut only_max = space.clone();
        only_max.depths = space.depths.map(|(_, hi)| (hi, hi));
        only_max.coeffs = vec![top];
        let mut partial = space.clone();
        partial.depths = space.depths.map(|(lo, hi)| (hi.saturating_sub(1).max(lo), hi));
        partial.coeffs = space.coeffs[space.coeffs.len().saturating_sub(2)..].to_vec();
        let spaces = [only_max, partial, space.clone()];
        let phases = (0..3).map(|i| IpsPhase { space: spaces[i].clone(), lr: lrs[i], epochs: epochs[i] }).collect();
        Self { phases }
    }

    /// Desk-scale schedule.
    pub fn desk(space: &SubnetSpace) -> Self {
        Self::three_phase(space, [0.01, 0.004, 0.004], [12, 6, 6])
    }

    /// The full-size schedule: initial lrs 0.12 / 0.04 / 0.04 and 48 / 24 / 36
    /// epochs. Kept for reference; far beyond desk compute.
    pub fn full_scale(space: &SubnetSpace) -> Self {
        Self::three_phase(space, [0.12, 0.04, 0.04], [48, 24, 36])
    }

    pub fn final_space(&self) -> &SubnetSpace {
        &self.phases.last().expect("validated schedule").space
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.phases.first() else {
            return Err(Error::input("schedule has no phases"));
        };
        for (i, p) in self.phases.iter().enumerate() {
            p.space.validate().map_err(|e| Error::input(format!("phase {}: {e}", i + 1)))?;
            if !(p.lr.is_finite() && p.lr >= 0.0) {
                return Err(Error::input(format!("phase {}: lr {} must be finite and >= 0", i + 1, p.lr)));
            }
        }
        let s = &first.space;
        if s.depths.iter().any(|(lo, hi)| lo != hi) || s.coeffs.len() != 1 {
            return Err(Error::input("phase 1 must admit only the super-net (one depth per stage, one coefficient)"));
        }
        for (i, w) in self.phases.windows(2).enumerate() {
            w[0].space
                .check_subset_of(&w[1].space)
                .map_err(|m| Error::input(format!("phase {} space is not contained in phase {}: {m}", i + 1, i + 2)))?;
        }
        let fin = self.final_space();
        if first.space.max_choice().depths != fin.max_choice().depths || first.space.max_coeff() != fin.max_coeff() {
            return Err(Error::input("phase 1 must train the final space's maximal subnet"));
        }
        Ok(())
    }

    /// A subnet drawn from phase `phase`'s space (zero-based).
    pub fn sample<R: Rng + ?Sized>(&self, phase: usize, rng: &mut R) -> SubnetChoice {
        sample_subnet(&self.phases[phase].space, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IpsConfig {
    pub batch_size: usize,
    /// Scenes per epoch; `None` uses the whole dataset.
    #[serde(default)]
    pub scenes_per_epoch: Option<usize>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables it.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Loss weights for the distillation phases; `lambda_bn` is ignored.
    #[serde(default = "default_loss")]
    pub loss: LossConfig,
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_wd() -> f64 {
    1e-4
}

fn default_loss() -> LossConfig {
    LossConfig { w_feat: DESK_W_FEAT, ..LossConfig::default() }
}

impl Default for IpsConfig {
    fn default() -> Self {
        Self { batch_size: 4, scenes_per_epoch: None, momentum: 0.9, weight_decay: 1e-4, grad_clip: None, loss: default_loss(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IpsEpochStats {
    /// One-based phase number.
    pub phase: usize,
    pub epoch: usize,
    pub loss: f64,
    pub det_loss: f64,
    pub kd_loss: f64,
}

/// Trains a fresh super-net through every phase of `schedule`.
///
/// Phase 1 trains the super-net on the detection loss. Later phases sample
/// one subnet per iteration and train it on the detection loss plus
/// distillation from a snapshot of the super-net taken when phase 1 ends,
/// run in eval mode with BN calibrated per resolution. Distilling from the
/// live weights instead lets student and teacher drift together toward
/// flat predictions. The BN sparsity term is off: teachers are never
/// pruned. Every iteration draws its resolution from the phase's space.
pub fn ips_train(schedule: &IpsSchedule, data: &Dataset, cfg: &IpsConfig) -> Result<(SupernetParams, Vec<IpsEpochStats>)> {
    schedule.validate()?;
    cfg.loss.validate()?;
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::input("ips training needs scenes and a positive batch size"));
    }
    let mut sp = SupernetParams::fresh(schedule.final_space().clone(), cfg.seed)?;
    let trainable = sp.params.trainable_names();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1b5);
    let per_epoch = (cfg.scenes_per_epoch.unwrap_or(data.len()).min(data.len()) / cfg.batch_size).max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    // the super-net as it stands after phase 1, frozen for later phases
    let mut teachers: Option<BTreeMap<usize, Detector>> = None;
    for (pi, phase) in schedule.phases.iter().enumerate() {
        // fresh momentum per phase, as each phase restarts its lr schedule
        let mut opt = Sgd::new(trainable.clone(), cfg.momentum, cfg.weight_decay).with_clip(cfg.grad_clip);
        let lr = LrSchedule::Cosine { lr0: phase.lr };
        let total = per_epoch * phase.epochs;
        let distill = pi > 0;
        if distill && teachers.is_none() {
            let snapshot = sp.extract_with(&sp.space.max_choice(), false)?;
            teachers = Some(calibrated_teachers(&snapshot, data, &sp.space.resolutions)?);
        }
        let loss = LossConfig { lambda_bn: 0.0, ..if distill { cfg.loss.clone() } else { cfg.loss.without_kd() } };
        for epoch in 0..phase.epochs {
            order.shuffle(&mut rng);
            let mut sums = [0.0; 3];
            for it in 0..per_epoch {
                let idx: Vec<usize> = (0..cfg.batch_size).map(|k| order[(it * cfg.batch_size + k) % data.len()]).collect();
                let choice = sample_subnet(&phase.space, &mut rng);
                let (images, scenes) = data.batch(&idx, choice.resolution);
                let student = sp.extract_with(&choice, distill)?;
                let teacher = match &teachers {
                    Some(t) => Some(t.get(&choice.resolution).ok_or_else(|| {
                        Error::input(format!("phase {} resolution {} was not in phase 1", pi + 1, choice.resolution))
                    })?),
                    None => None,
                };
                let (grads, stats, l) = compute_step(&student, teacher, images, &scenes, &loss).map_err(|e| {
                    if e.is_numeric() {
                        Error::Numeric(format!("phase {}, epoch {epoch}, iteration {it}: {e}", pi + 1))
                    } else {
                        e
                    }
                })?;
                let lifted = sp.lift_grads(&grads, &choice, &student)?;
                opt.step_present(&mut sp.params, &lifted, lr.at(epoch * per_epoch + it, total))?;
                for s in &stats {
                    let stage_prefix = s.prefix.starts_with('s') && !s.prefix.starts_with("stem");
                    let name = if stage_prefix {
                        format!("{}@{}", s.prefix, choice.stage_coeffs[stage_of(&s.prefix)])
                    } else {
                        s.prefix.clone()
                    };
                    let mut lifted = s.clone();
                    lifted.prefix = name;
                    sp.params.update_bn_stats(std::slice::from_ref(&lifted), BN_MOMENTUM)?;
                }
                sums[0] += l.total;
                sums[1] += l.det;
                sums[2] += l.kd;
            }
            let n = per_epoch as f64;
            history.push(IpsEpochStats { phase: pi + 1, epoch, loss: sums[0] / n, det_loss: sums[1] / n, kd_loss: sums[2] / n });
        }
    }
    Ok((sp, history))
}

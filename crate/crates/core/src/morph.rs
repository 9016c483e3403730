//! Student morphism: the four backbone actions and weight inheritance.
//!
//! Every action maps a [`StudentState`] to a new one whose surviving
//! parameters are copied from their old positions. Stage indices are
//! zero-based.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::netgraph::{ArchSpec, BlockKind, BlockSpec, Detector, NUM_STAGES};
use crate::tensor::{ParamStore, Tensor};
use crate::{Error, Result};

/// Largest fraction a single ChannelPrune may remove.
pub const MAX_PRUNE_FRACTION: f64 = 0.5;
/// ChannelPrune fraction used by the search.
pub const DEFAULT_PRUNE_FRACTION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// The stage's first interior block moves to the end of the previous stage.
    Head,
    /// The stage's last block moves to the front interior of the next stage.
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    ChannelPrune { fraction: f64 },
    LayerPrune,
    AddLayer { stage: usize },
    Rearrange { stage: usize, direction: Direction },
}

impl Action {
    /// Every action with a fixed locus, plus ChannelPrune at `fraction`.
    pub fn all(fraction: f64) -> Vec<Action> {
        let mut v = vec![Action::ChannelPrune { fraction }, Action::LayerPrune];
        v.extend((0..NUM_STAGES).map(|stage| Action::AddLayer { stage }));
        for stage in 0..NUM_STAGES {
            for direction in [Direction::Head, Direction::Tail] {
                v.push(Action::Rearrange { stage, direction });
            }
        }
        v
    }

    /// Checks the action against `arch` without applying it. ChannelPrune is
    /// only checked for its fraction here; emptied layers are detected when
    /// it is applied.
    pub fn check(&self, arch: &ArchSpec) -> Result<()> {
        let reject = |m: String| Err(Error::input(format!("inapplicable action {self:?}: {m}")));
        let depths = arch.depths();
        match *self {
            Action::ChannelPrune { fraction } => {
                if !(fraction > 0.0 && fraction <= MAX_PRUNE_FRACTION) {
                    return reject(format!("fraction must be in (0, {MAX_PRUNE_FRACTION}]"));
                }
            }
            Action::LayerPrune => {
                if depths.iter().all(|&d| d < 2) {
                    return reject("no stage has a removable block".into());
                }
            }
            Action::AddLayer { stage } => {
                if stage >= NUM_STAGES {
                    return reject(format!("stage {stage} out of range"));
                }
            }
            Action::Rearrange { stage, direction } => {
                if stage >= NUM_STAGES {
                    return reject(format!("stage {stage} out of range"));
                }
                if depths[stage] < 2 {
                    return reject(format!("stage {stage} has depth {}", depths[stage]));
                }
                match direction {
                    Direction::Head if stage == 0 => return reject("stage 0 has no previous stage".into()),
                    Direction::Tail if stage == NUM_STAGES - 1 => return reject("last stage has no next stage".into()),
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// A student architecture with its inherited weights.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentState {
    pub arch: ArchSpec,
    pub params: ParamStore,
    pub generation: usize,
}

impl StudentState {
    pub fn new(det: Detector) -> Self {
        Self { arch: det.arch, params: det.params, generation: 0 }
    }

    pub fn detector(&self) -> Result<Detector> {
        Ok(Detector::from_params(self.arch.clone(), self.params.clone())?)
    }
}

/// Applies `a` to `s`, inheriting every surviving weight.
pub fn f_evolve(s: &StudentState, a: Action) -> Result<StudentState> {
    a.check(&s.arch)?;
    let mut next = match a {
        Action::ChannelPrune { fraction } => apply_channel_prune(s, fraction)?,
        Action::LayerPrune => {
            let (stage, block) = layer_importance(&s.params, &s.arch)[0].0;
            remove_block(s, stage, block)?
        }
        Action::AddLayer { stage } => add_layer(s, stage)?,
        Action::Rearrange { stage, direction } => rearrange(s, stage, direction)?,
    };
    next.arch.validate()?;
    next.generation = s.generation + 1;
    Ok(next)
}

// ---- channel importance -------------------------------------------------

/// A set of channels that must be pruned together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChannelGroup {
    /// Stem output channels.
    Stem,
    /// Output of a non-final conv inside a block.
    Inner { stage: usize, block: usize, conv: usize },
    /// The stage output width shared by every block of the stage, ranked by
    /// the first block's projection BN.
    StageOut { stage: usize },
}

impl ChannelGroup {
    /// Name of the BN layer whose scale ranks this group.
    pub fn ranking_bn(&self) -> String {
        match *self {
            ChannelGroup::Stem => "stem.bn".into(),
            ChannelGroup::Inner { stage, block, conv } => format!("s{stage}.b{block}.bn{conv}"),
            ChannelGroup::StageOut { stage } => format!("s{stage}.b0.proj_bn"),
        }
    }

    /// Tie-break position: (stage, block, conv) with the stem before stage 0
    /// and a stage's output group after the first block's inner convs.
    fn order(&self, arch: &ArchSpec) -> (usize, usize, usize) {
        match *self {
            ChannelGroup::Stem => (0, 0, 0),
            ChannelGroup::Inner { stage, block, conv } => (stage + 1, block, conv),
            ChannelGroup::StageOut { stage } => (stage + 1, 0, arch.stages[stage][0].channels.len() - 1),
        }
    }

    fn width(&self, arch: &ArchSpec) -> usize {
        match *self {
            ChannelGroup::Stem => arch.stem_width,
            ChannelGroup::Inner { stage, block, conv } => arch.stages[stage][block].channels[conv],
            ChannelGroup::StageOut { stage } => arch.stage_width(stage),
        }
    }
}

/// Every prunable channel group of `arch`, in tie-break order.
pub fn channel_groups(arch: &ArchSpec) -> Vec<ChannelGroup> {
    let mut v = vec![ChannelGroup::Stem];
    for (stage, blocks) in arch.stages.iter().enumerate() {
        for (block, spec) in blocks.iter().enumerate() {
            for conv in 0..spec.channels.len() - 1 {
                v.push(ChannelGroup::Inner { stage, block, conv });
            }
            if block == 0 {
                v.push(ChannelGroup::StageOut { stage });
            }
        }
    }
    v.sort_by_key(|g| g.order(arch));
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedChannel {
    pub group: ChannelGroup,
    pub channel: usize,
    pub importance: f64,
}

/// All prunable channels, least important first: ascending `|γ|`, ties by
/// (stage, block, conv, channel).
pub fn channel_importance(p: &ParamStore, arch: &ArchSpec) -> Result<Vec<RankedChannel>> {
    let mut v = Vec::new();
    for group in channel_groups(arch) {
        let name = format!("{}.gamma", group.ranking_bn());
        let gamma = p.require(&name)?;
        if gamma.numel() != group.width(arch) {
            return Err(Error::input(format!("{name} has {} entries for width {}", gamma.numel(), group.width(arch))));
        }
        v.extend(gamma.data().iter().enumerate().map(|(channel, g)| RankedChannel { group, channel, importance: g.abs() }));
    }
    v.sort_by(|a, b| {
        a.importance
            .total_cmp(&b.importance)
            .then_with(|| a.group.order(arch).cmp(&b.group.order(arch)))
            .then(a.channel.cmp(&b.channel))
    });
    Ok(v)
}

/// Removes the `floor(fraction · total)` least important channels.
pub fn apply_channel_prune(s: &StudentState, fraction: f64) -> Result<StudentState> {
    if !(0.0..=MAX_PRUNE_FRACTION).contains(&fraction) {
        return Err(Error::input(format!("prune fraction {fraction} outside [0, {MAX_PRUNE_FRACTION}]")));
    }
    let ranked = channel_importance(&s.params, &s.arch)?;
    let count = (fraction * ranked.len() as f64).floor() as usize;
    let mut next = s.clone();
    for group in channel_groups(&s.arch) {
        let drop: BTreeSet<usize> = ranked[..count].iter().filter(|r| r.group == group).map(|r| r.channel).collect();
        if drop.is_empty() {
            continue;
        }
        let width = group.width(&s.arch);
        if drop.len() == width {
            return Err(Error::input(format!("pruning would empty {}", group.ranking_bn())));
        }
        let keep: Vec<usize> = (0..width).filter(|c| !drop.contains(c)).collect();
        prune_group(&mut next, group, &keep)?;
    }
    Ok(next)
}

fn prune_group(s: &mut StudentState, group: ChannelGroup, keep: &[usize]) -> Result<()> {
    let n = keep.len();
    let mut producers: Vec<String> = Vec::new();
    let mut bns: Vec<String> = Vec::new();
    let mut consumers: Vec<String> = Vec::new();
    match group {
        ChannelGroup::Stem => {
            producers.push("stem.conv.w".into());
            bns.push("stem.bn".into());
            consumers.extend(stage_inputs(0));
            s.arch.stem_width = n;
        }
        ChannelGroup::Inner { stage, block, conv } => {
            let p = format!("s{stage}.b{block}");
            producers.push(format!("{p}.conv{conv}.w"));
            bns.push(format!("{p}.bn{conv}"));
            consumers.push(format!("{p}.conv{}.w", conv + 1));
            s.arch.stages[stage][block].channels[conv] = n;
        }
        ChannelGroup::StageOut { stage } => {
            for (b, spec) in s.arch.stages[stage].iter_mut().enumerate() {
                let last = spec.channels.len() - 1;
                producers.push(format!("s{stage}.b{b}.conv{last}.w"));
                bns.push(format!("s{stage}.b{b}.bn{last}"));
                if b > 0 {
                    consumers.push(format!("s{stage}.b{b}.conv0.w"));
                }
                spec.channels[last] = n;
            }
            producers.push(format!("s{stage}.b0.proj.w"));
            bns.push(format!("s{stage}.b0.proj_bn"));
            if stage + 1 < NUM_STAGES {
                consumers.extend(stage_inputs(stage + 1));
            }
            consumers.push(format!("neck.{stage}.w"));
        }
    }
    for name in producers {
        map_tensor(&mut s.params, &name, |t| select(t, 0, keep))?;
    }
    for prefix in bns {
        for field in ["gamma", "beta", "running_mean", "running_var"] {
            map_tensor(&mut s.params, &format!("{prefix}.{field}"), |t| select(t, 0, keep))?;
        }
    }
    for name in consumers {
        map_tensor(&mut s.params, &name, |t| select(t, 1, keep))?;
    }
    Ok(())
}

/// Weights reading the input of `stage`'s first block.
fn stage_inputs(stage: usize) -> [String; 2] {
    [format!("s{stage}.b0.conv0.w"), format!("s{stage}.b0.proj.w")]
}

fn map_tensor(p: &mut ParamStore, name: &str, f: impl FnOnce(&Tensor) -> Tensor) -> Result<()> {
    let t = f(p.require(name)?);
    p.insert(name, t);
    Ok(())
}

/// Keeps the listed indices along `dim` (0 or 1).
fn select(t: &Tensor, dim: usize, keep: &[usize]) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..dim].iter().product();
    let inner: usize = shape[dim + 1..].iter().product();
    let len = shape[dim];
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            let start = (o * len + k) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[dim] = keep.len();
    Tensor::new(new_shape, data).expect("selected shape")
}

/// Copies the overlapping leading corner of `t` into a zero tensor of `shape`.
fn resize(t: &Tensor, shape: &[usize]) -> Tensor {
    let common: Vec<usize> = t.shape().iter().zip(shape).map(|(a, b)| *a.min(b)).collect();
    let mut out = Tensor::zeros(shape);
    out.add_prefix(&t.prefix(&common).expect("corner fits")).expect("corner fits");
    out
}

// ---- layer importance -----------------------------------------------------

/// Removable blocks (never a stage's first) by ascending L1 norm of their
/// trainable parameters; ties by (stage, block).
pub fn layer_importance(p: &ParamStore, arch: &ArchSpec) -> Vec<((usize, usize), f64)> {
    let mut v = Vec::new();
    for (stage, blocks) in arch.stages.iter().enumerate() {
        for block in 1..blocks.len() {
            let prefix = format!("s{stage}.b{block}.");
            let l1: f64 = p
                .iter()
                .filter(|(n, _)| n.starts_with(&prefix) && !ParamStore::is_buffer(n))
                .map(|(_, t)| t.data().iter().map(|x| x.abs()).sum::<f64>())
                .sum();
            v.push(((stage, block), l1));
        }
    }
    v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    v
}

// ---- block moves ----------------------------------------------------------

/// Parameters of block `(stage, block)`, keyed by name with the block
/// prefix stripped.
fn take_block(p: &mut ParamStore, stage: usize, block: usize) -> Vec<(String, Tensor)> {
    let prefix = format!("s{stage}.b{block}.");
    let names: Vec<String> = p.names().filter(|n| n.starts_with(&prefix)).cloned().collect();
    names.into_iter().map(|n| (n[prefix.len()..].to_string(), p.remove(&n).expect("listed"))).collect()
}

fn put_block(p: &mut ParamStore, stage: usize, block: usize, tensors: Vec<(String, Tensor)>) {
    for (suffix, t) in tensors {
        p.insert(format!("s{stage}.b{block}.{suffix}"), t);
    }
}

/// Renumbers blocks `from..` of `stage` by `shift` (±1).
fn shift_blocks(p: &mut ParamStore, stage: usize, from: usize, depth: usize, shift: isize) {
    let order: Vec<usize> = if shift > 0 { (from..depth).rev().collect() } else { (from..depth).collect() };
    for b in order {
        let t = take_block(p, stage, b);
        put_block(p, stage, (b as isize + shift) as usize, t);
    }
}

fn remove_block(s: &StudentState, stage: usize, block: usize) -> Result<StudentState> {
    if block == 0 || block >= s.arch.stages[stage].len() {
        return Err(Error::input(format!("block {block} of stage {stage} cannot be removed")));
    }
    let mut next = s.clone();
    let depth = next.arch.stages[stage].len();
    take_block(&mut next.params, stage, block);
    shift_blocks(&mut next.params, stage, block + 1, depth, -1);
    next.arch.stages[stage].remove(block);
    Ok(next)
}

/// Appends an identity block to `stage`: Dirac-initialized convs and a
/// zeroed last BN, so the block's residual branch outputs exactly zero.
fn add_layer(s: &StudentState, stage: usize) -> Result<StudentState> {
    let mut next = s.clone();
    let width = s.arch.stage_width(stage);
    let kind = s.arch.stages[stage][0].kind;
    let channels = match kind {
        BlockKind::Basic => vec![width; 2],
        BlockKind::Bottleneck => {
            let first = &s.arch.stages[stage][0].channels;
            vec![first[0], first[1], width]
        }
    };
    let b = s.arch.stages[stage].len();
    let spec = BlockSpec::at(kind, channels.clone(), stage, b);
    let last = channels.len() - 1;
    let mut c_in = width;
    for (i, &co) in channels.iter().enumerate() {
        let k = if kind == BlockKind::Bottleneck && i != 1 { 1 } else { 3 };
        next.params.insert(format!("s{stage}.b{b}.conv{i}.w"), dirac(co, c_in, k));
        let gamma = if i == last { 0.0 } else { 1.0 };
        let prefix = format!("s{stage}.b{b}.bn{i}");
        next.params.insert(format!("{prefix}.gamma"), Tensor::full(&[co], gamma));
        next.params.insert(format!("{prefix}.beta"), Tensor::zeros(&[co]));
        next.params.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[co]));
        next.params.insert(format!("{prefix}.running_var"), Tensor::full(&[co], 1.0));
        c_in = co;
    }
    next.arch.stages[stage].push(spec);
    Ok(next)
}

/// `[c_out, c_in, k, k]` kernel passing channel `i` to output `i`.
fn dirac(c_out: usize, c_in: usize, k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[c_out, c_in, k, k]);
    let centre = (k / 2) * k + k / 2;
    for i in 0..c_out.min(c_in) {
        t.data_mut()[(i * c_in + i) * k * k + centre] = 1.0;
    }
    t
}

/// Moves one interior block across a stage boundary, adapting its input and
/// output widths to the receiving stage. Overlapping weights are copied;
/// new entries are zero, and new output channels get a zero BN scale so
/// they start inactive.
fn rearrange(s: &StudentState, stage: usize, direction: Direction) -> Result<StudentState> {
    let mut next = s.clone();
    let (src_block, dst_stage, dst_block) = match direction {
        Direction::Tail => (s.arch.stages[stage].len() - 1, stage + 1, 1),
        Direction::Head => (1, stage - 1, s.arch.stages[stage - 1].len()),
    };
    let src_depth = s.arch.stages[stage].len();
    let dst_depth = s.arch.stages[dst_stage].len();
    let dst_width = s.arch.stage_width(dst_stage);
    let mut spec = next.arch.stages[stage].remove(src_block);
    let mut moved = take_block(&mut next.params, stage, src_block);
    shift_blocks(&mut next.params, stage, src_block + 1, src_depth, -1);
    shift_blocks(&mut next.params, dst_stage, dst_block, dst_depth, 1);

    let last = spec.channels.len() - 1;
    let src_width = spec.out_width();
    spec.channels[last] = dst_width;
    spec.stride = 1;
    for (suffix, t) in moved.iter_mut() {
        let mut shape = t.shape().to_vec();
        if suffix == "conv0.w" {
            shape[1] = dst_width;
        }
        let is_last = suffix.starts_with(&format!("conv{last}.")) || suffix.starts_with(&format!("bn{last}."));
        if is_last {
            shape[0] = dst_width;
        }
        if shape != t.shape() {
            let mut r = resize(t, &shape);
            if suffix.ends_with(".running_var") {
                r.data_mut()[src_width.min(dst_width)..].iter_mut().for_each(|v| *v = 1.0);
            }
            *t = r;
        }
    }
    put_block(&mut next.params, dst_stage, dst_block, moved);
    next.arch.stages[dst_stage].insert(dst_block, spec);
    Ok(next)
}

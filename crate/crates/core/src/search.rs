//! Hill-climbing search over (student, teacher) pairs.
//!
//! Each iteration picks a pair from the top-k list, mutates either the
//! student (a morph action with weight inheritance) or the teacher (one step
//! in the pool's subnet space), trains the student briefly under
//! distillation from that teacher, and scores it at every resolution.

use std::io::Write;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::LossConfig;
use crate::etp::{extract_subnet, SubnetChoice, SubnetSpace, SupernetParams, DESK_W_FEAT};
use crate::microdet::{calibrated_teachers, evaluate_calibrated, train_distilled, Dataset, LrSchedule, Teachers, TrainConfig, RESOLUTIONS};
use crate::morph::{f_evolve, Action, StudentState, DEFAULT_PRUNE_FRACTION};
use crate::netgraph::{encode_arch, flops_breakdown, ArchSpec};
use crate::{Error, Result};

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_ALPHA: f64 = 0.4;
pub const DEFAULT_BETA: f64 = 0.8;
/// Iterations at the start of a search that may only move the teacher.
pub const TEACHER_ONLY_ITERATIONS: usize = 5;

// ---- score ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreParams {
    pub c_base: f64,
    pub r_base: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl ScoreParams {
    pub fn new(c_base: f64, r_base: f64) -> Self {
        Self { c_base, r_base, alpha: DEFAULT_ALPHA, beta: DEFAULT_BETA }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_base > 0.0 && self.r_base > 0.0 && self.c_base.is_finite() && self.r_base.is_finite()) {
            return Err(Error::input(format!("C_base and R_base must be positive, got {} and {}", self.c_base, self.r_base)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::input(format!("alpha and beta must be >= 0, got {} and {}", self.alpha, self.beta)));
        }
        Ok(())
    }
}

/// `mAP · [(C / C_base) · (R / R_base)^β]^(−α)`.
pub fn score(map: f64, c: f64, r: f64, p: &ScoreParams) -> f64 {
    map * ((c / p.c_base) * (r / p.r_base).powf(p.beta)).powf(-p.alpha)
}

/// Which convs count towards the cost term of the score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopsScope {
    /// Stem, stages and neck.
    #[default]
    Total,
    /// Stem and stages.
    Backbone,
}

pub fn cost(arch: &ArchSpec, res: usize, scope: FlopsScope) -> Result<f64> {
    let b = flops_breakdown(arch, (res, res))?;
    Ok(match scope {
        FlopsScope::Total => b.total(),
        FlopsScope::Backbone => b.backbone(),
    })
}

// ---- teacher mutation --------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherCoord {
    Depth { stage: usize },
    Width { stage: usize },
    Neck,
}

/// One step of one teacher coordinate; `step` is +1 or −1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherMove {
    pub coord: TeacherCoord,
    pub step: i32,
}

fn coeff_index(space: &SubnetSpace, c: f64) -> usize {
    space.coeffs.iter().position(|&x| x == c).expect("choice checked against space")
}

/// Every legal single-step move of `c` within `space`.
pub fn teacher_moves(c: &SubnetChoice, space: &SubnetSpace) -> Vec<TeacherMove> {
    let mut out = Vec::new();
    let mut both = |coord, value: usize, lo: usize, hi: usize| {
        if value > lo {
            out.push(TeacherMove { coord, step: -1 });
        }
        if value < hi {
            out.push(TeacherMove { coord, step: 1 });
        }
    };
    let top = space.coeffs.len() - 1;
    for s in 0..c.depths.len() {
        both(TeacherCoord::Depth { stage: s }, c.depths[s], space.depths[s].0, space.depths[s].1);
        both(TeacherCoord::Width { stage: s }, coeff_index(space, c.stage_coeffs[s]), 0, top);
    }
    both(TeacherCoord::Neck, coeff_index(space, c.neck_coeff), 0, top);
    out
}

pub fn apply_teacher_move(c: &SubnetChoice, m: TeacherMove, space: &SubnetSpace) -> SubnetChoice {
    let mut out = c.clone();
    let shift = |v: usize| v.checked_add_signed(m.step as isize).expect("legal move");
    match m.coord {
        TeacherCoord::Depth { stage } => out.depths[stage] = shift(c.depths[stage]),
        TeacherCoord::Width { stage } => out.stage_coeffs[stage] = space.coeffs[shift(coeff_index(space, c.stage_coeffs[stage]))],
        TeacherCoord::Neck => out.neck_coeff = space.coeffs[shift(coeff_index(space, c.neck_coeff))],
    }
    out
}

/// Moves exactly one coordinate of `c` by one step, uniformly over the legal
/// moves. Returns `c` unchanged and `None` when no move is legal.
pub fn mutate_teacher<R: Rng + ?Sized>(
    c: &SubnetChoice,
    rng: &mut R,
    space: &SubnetSpace,
) -> Result<(SubnetChoice, Option<TeacherMove>)> {
    space.check(c)?;
    Ok(match teacher_moves(c, space).choose(rng) {
        Some(&m) => (apply_teacher_move(c, m, space), Some(m)),
        None => (c.clone(), None),
    })
}

// ---- candidates and the top-k list -------------------------------------------

/// What produced a candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchAction {
    Init,
    Student(Action),
    Teacher(TeacherMove),
    /// Neither side could move; the parent is trained further.
    Retrain,
}

impl SearchAction {
    /// Short label used to group actions in reports.
    pub fn label(&self) -> String {
        match self {
            SearchAction::Init => "init".into(),
            SearchAction::Student(a) => match a {
                Action::ChannelPrune { .. } => "channel_prune".into(),
                Action::LayerPrune => "layer_prune".into(),
                Action::AddLayer { .. } => "add_layer".into(),
                Action::Rearrange { .. } => "rearrange".into(),
            },
            SearchAction::Teacher(m) => match m.coord {
                TeacherCoord::Depth { .. } => "teacher_depth".into(),
                TeacherCoord::Width { .. } => "teacher_width".into(),
                TeacherCoord::Neck => "teacher_neck".into(),
            },
            SearchAction::Retrain => "retrain".into(),
        }
    }

    pub fn is_student(&self) -> bool {
        matches!(self, SearchAction::Student(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionEval {
    pub resolution: usize,
    pub map: f64,
    pub flops: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePair {
    /// Iteration that produced the pair.
    pub id: usize,
    pub student: StudentState,
    pub teacher: SubnetChoice,
    pub evals: Vec<ResolutionEval>,
    /// Index into `evals` of the best score; `None` when training diverged.
    pub best: Option<usize>,
    pub history: Vec<SearchAction>,
}

impl CandidatePair {
    pub fn score(&self) -> f64 {
        self.best.map_or(f64::NEG_INFINITY, |i| self.evals[i].score)
    }

    pub fn best_eval(&self) -> Option<&ResolutionEval> {
        self.best.map(|i| &self.evals[i])
    }

    pub fn best_resolution(&self) -> Option<usize> {
        self.best_eval().map(|e| e.resolution)
    }
}

/// The `k` best pairs by score, best first. Ties keep the earlier entry
/// ahead.
#[derive(Clone, Debug)]
pub struct TopKList {
    pub capacity: usize,
    entries: Vec<CandidatePair>,
}

impl TopKList {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "top-k capacity must be positive");
        Self { capacity, entries: Vec::new() }
    }

    /// Inserts `p` if its score is finite and it ranks within the top `k`.
    /// Returns whether it was kept.
    pub fn insert(&mut self, p: CandidatePair) -> bool {
        let s = p.score();
        if !s.is_finite() {
            return false;
        }
        let pos = self.entries.iter().position(|e| e.score() < s).unwrap_or(self.entries.len());
        if pos >= self.capacity {
            return false;
        }
        self.entries.insert(pos, p);
        self.entries.truncate(self.capacity);
        true
    }

    pub fn entries(&self) -> &[CandidatePair] {
        &self.entries
    }

    pub fn best(&self) -> Option<&CandidatePair> {
        self.entries.first()
    }

    pub fn best_score(&self) -> f64 {
        self.best().map_or(f64::NEG_INFINITY, CandidatePair::score)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// How a parent is drawn from the top-k list.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParentSampling {
    #[default]
    Uniform,
    /// Entry at rank `i` (0 = best) drawn with weight `len − i`.
    RankWeighted,
}

/// Index of a parent drawn from the non-empty `list`.
pub fn sample_parent<R: Rng + ?Sized>(list: &TopKList, how: ParentSampling, rng: &mut R) -> usize {
    let n = list.len();
    match how {
        ParentSampling::Uniform => rng.random_range(0..n),
        ParentSampling::RankWeighted => {
            let mut t = rng.random_range(0..n * (n + 1) / 2);
            for i in 0..n {
                let w = n - i;
                if t < w {
                    return i;
                }
                t -= w;
            }
            unreachable!("weights cover the draw")
        }
    }
}

// ---- configuration -------------------------------------------------------------

/// Student training inside one fast evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FastEvalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Scenes per epoch; `None` uses the whole training set.
    pub scenes_per_epoch: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
}

impl Default for FastEvalConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            lr: 0.01,
            batch_size: 4,
            scenes_per_epoch: Some(200),
            momentum: 0.9,
            weight_decay: 1e-4,
            loss: LossConfig { w_feat: DESK_W_FEAT, ..LossConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub iterations: usize,
    pub top_k: usize,
    pub p_student: f64,
    /// Stop after this many iterations without a new best score; 0 disables.
    pub patience: usize,
    pub prune_fraction: f64,
    pub teacher_only_iterations: usize,
    pub parent_sampling: ParentSampling,
    pub resolutions: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    /// Defaults to the base student's cost at `r_base`.
    pub c_base: Option<f64>,
    /// Defaults to the largest search resolution.
    pub r_base: Option<f64>,
    pub flops_scope: FlopsScope,
    pub fast_eval: FastEvalConfig,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            top_k: DEFAULT_TOP_K,
            p_student: 0.5,
            patience: 15,
            prune_fraction: DEFAULT_PRUNE_FRACTION,
            teacher_only_iterations: TEACHER_ONLY_ITERATIONS,
            parent_sampling: ParentSampling::Uniform,
            resolutions: RESOLUTIONS.to_vec(),
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            c_base: None,
            r_base: None,
            flops_scope: FlopsScope::Total,
            fast_eval: FastEvalConfig::default(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::input("top_k must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_student) {
            return Err(Error::input(format!("p_student must lie in [0, 1], got {}", self.p_student)));
        }
        if self.resolutions.is_empty() {
            return Err(Error::input("search needs at least one resolution"));
        }
        let f = &self.fast_eval;
        if f.epochs == 0 || f.batch_size == 0 || !(f.lr.is_finite() && f.lr >= 0.0) {
            return Err(Error::input("fast_eval needs epochs >= 1, batch_size >= 1 and a finite lr >= 0"));
        }
        f.loss.validate()
    }

    /// Score parameters for a search starting from `base`.
    pub fn score_params(&self, base: &ArchSpec) -> Result<ScoreParams> {
        let r_base = self.r_base.unwrap_or_else(|| *self.resolutions.iter().max().expect("validated") as f64);
        let c_base = match self.c_base {
            Some(c) => c,
            None => cost(base, r_base as usize, self.flops_scope)?,
        };
        let p = ScoreParams { c_base, r_base, alpha: self.alpha, beta: self.beta };
        p.validate()?;
        Ok(p)
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        let f = &self.fast_eval;
        TrainConfig {
            epochs: f.epochs,
            batch_size: f.batch_size,
            scenes_per_epoch: f.scenes_per_epoch,
            lr: LrSchedule::Cosine { lr0: f.lr },
            momentum: f.momentum,
            weight_decay: f.weight_decay,
            resolutions: self.resolutions.clone(),
            loss: f.loss.clone(),
            seed,
            shuffle: true,
        }
    }
}

/// Everything a fast evaluation reads.
pub struct SearchContext<'a> {
    pub pool: &'a SupernetParams,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub cfg: &'a SearchConfig,
    pub score: ScoreParams,
}

impl<'a> SearchContext<'a> {
    pub fn new(pool: &'a SupernetParams, train: &'a Dataset, val: &'a Dataset, cfg: &'a SearchConfig, base: &ArchSpec) -> Result<Self> {
        cfg.validate()?;
        for &r in &cfg.resolutions {
            if !pool.space.resolutions.contains(&r) {
                return Err(Error::input(format!("search resolution {r} is not in the pool's space {:?}", pool.space.resolutions)));
            }
        }
        Ok(Self { pool, train, val, cfg, score: cfg.score_params(base)? })
    }

    /// Scores `student` at every search resolution, BN recalibrated on the
    /// training set. Returns the evaluations and the index of the best.
    pub fn evaluate(&self, student: &StudentState) -> Result<(Vec<ResolutionEval>, usize)> {
        let det = student.detector()?;
        let mut evals = Vec::with_capacity(self.cfg.resolutions.len());
        for &r in &self.cfg.resolutions {
            let map = evaluate_calibrated(&det, self.train, self.val, r)?;
            let flops = cost(&student.arch, r, self.cfg.flops_scope)?;
            evals.push(ResolutionEval { resolution: r, map, flops, score: score(map, flops, r as f64, &self.score) });
        }
        // first maximum wins ties
        let best = (0..evals.len()).fold(0, |b, i| if evals[i].score > evals[b].score { i } else { b });
        Ok((evals, best))
    }
}

/// Trains the pair's student for a few epochs under distillation from its
/// teacher (extracted from the pool, BN calibrated per resolution), then
/// scores it. The trained weights stay in the pair. Divergence leaves the
/// pair with score −∞ rather than failing.
pub fn fast_eval(pair: &mut CandidatePair, ctx: &SearchContext<'_>, seed: u64) -> Result<()> {
    let teacher = extract_subnet(ctx.pool, &pair.teacher)?;
    let teachers = calibrated_teachers(&teacher, ctx.train, &ctx.cfg.resolutions)?;
    let mut det = pair.student.detector()?;
    match train_distilled(&mut det, Teachers::PerResolution(&teachers), ctx.train, &ctx.cfg.train_config(seed), None) {
        Ok(_) => {}
        Err(e) if e.is_numeric() => {
            pair.evals.clear();
            pair.best = None;
            return Ok(());
        }
        Err(e) => return Err(e),
    }
    pair.student.params = det.params;
    let (evals, best) = ctx.evaluate(&pair.student)?;
    pair.evals = evals;
    pair.best = Some(best);
    Ok(())
}

// ---- the search loop ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub iteration: usize,
    /// Iteration of the pair this one was derived from.
    pub parent: Option<usize>,
    pub action: SearchAction,
    pub teacher: SubnetChoice,
    pub arch_encoding: String,
    /// Best-scoring resolution; `None` if training diverged.
    pub resolution: Option<usize>,
    pub map: f64,
    pub flops: f64,
    pub score: f64,
    /// Best score in the top-k list after this row.
    pub best_score: f64,
    pub wall_seconds: f64,
}

pub const TRAJECTORY_HEADER: [&str; 12] = [
    "iteration",
    "parent",
    "action_json",
    "teacher_choice_json",
    "arch_encoding",
    "resolution",
    "mAP",
    "flops",
    "score",
    "best_score",
    "status",
    "wall_seconds",
];

fn float_field(v: f64) -> String {
    // Display is the shortest representation that parses back exactly
    if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

fn parse_float(s: &str) -> std::result::Result<f64, String> {
    match s {
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s.parse().map_err(|e| format!("bad number `{s}`: {e}")),
    }
}

impl TrajectoryRow {
    pub fn diverged(&self) -> bool {
        self.resolution.is_none()
    }

    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.iteration.to_string(),
            self.parent.map_or(String::new(), |p| p.to_string()),
            serde_json::to_string(&self.action).expect("action serializes"),
            serde_json::to_string(&self.teacher).expect("choice serializes"),
            self.arch_encoding.clone(),
            self.resolution.map_or(String::new(), |r| r.to_string()),
            float_field(self.map),
            float_field(self.flops),
            float_field(self.score),
            float_field(self.best_score),
            if self.diverged() { "diverged".into() } else { "ok".into() },
            format!("{:.3}", self.wall_seconds),
        ]
    }

    pub fn from_record(r: &csv::StringRecord) -> std::result::Result<Self, String> {
        if r.len() != TRAJECTORY_HEADER.len() {
            return Err(format!("expected {} fields, found {}", TRAJECTORY_HEADER.len(), r.len()));
        }
        let opt = |s: &str| -> std::result::Result<Option<usize>, String> {
            if s.is_empty() { Ok(None) } else { s.parse().map(Some).map_err(|e| format!("bad integer `{s}`: {e}")) }
        };
        Ok(Self {
            iteration: r[0].parse().map_err(|e| format!("bad iteration `{}`: {e}", &r[0]))?,
            parent: opt(&r[1])?,
            action: serde_json::from_str(&r[2]).map_err(|e| format!("bad action_json: {e}"))?,
            teacher: serde_json::from_str(&r[3]).map_err(|e| format!("bad teacher_choice_json: {e}"))?,
            arch_encoding: r[4].to_string(),
            resolution: opt(&r[5])?,
            map: parse_float(&r[6])?,
            flops: parse_float(&r[7])?,
            score: parse_float(&r[8])?,
            best_score: parse_float(&r[9])?,
            wall_seconds: parse_float(&r[11])?,
        })
    }
}

/// Writes trajectory rows as CSV, flushing after each.
pub struct TrajectoryWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(TRAJECTORY_HEADER).map_err(csv_err)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn append(&mut self, row: &TrajectoryRow) -> Result<()> {
        self.inner.write_record(row.to_record()).map_err(csv_err)?;
        Ok(self.inner.flush()?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Parses a trajectory CSV. Errors name the 1-based line.
pub fn read_trajectory<R: std::io::Read>(r: R) -> Result<Vec<TrajectoryRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(|e| Error::input(format!("trajectory header: {e}")))?;
    if header.iter().ne(TRAJECTORY_HEADER) {
        return Err(Error::input(format!("unexpected trajectory header: {header:?}")));
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::input(format!("trajectory line {line}: {e}")))?;
        out.push(TrajectoryRow::from_record(&rec).map_err(|e| Error::input(format!("trajectory line {line}: {e}")))?);
    }
    Ok(out)
}

pub struct SearchOutcome {
    pub top_k: TopKList,
    pub trajectory: Vec<TrajectoryRow>,
    /// The pair scored first: the base student with the super-net teacher.
    pub initial: CandidatePair,
    pub stopped_early: bool,
}

fn derive_seed(seed: u64, iteration: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(iteration as u64 + 1);
    r.random()
}

/// Builds iteration `it`'s candidate from a parent in `list`; returns it
/// with the parent's id.
fn propose(list: &TopKList, ctx: &SearchContext<'_>, it: usize) -> Result<(CandidatePair, usize)> {
    let cfg = ctx.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, it));
    let parent = &list.entries()[sample_parent(list, cfg.parent_sampling, &mut rng)];
    let student_allowed = it > cfg.teacher_only_iterations;
    let want_student = student_allowed && rng.random_bool(cfg.p_student);
    let try_student = |rng: &mut ChaCha8Rng| -> Option<(Action, StudentState)> {
        let mut actions = Action::all(cfg.prune_fraction);
        actions.shuffle(rng);
        actions.into_iter().find_map(|a| f_evolve(&parent.student, a).ok().map(|s| (a, s)))
    };
    let mut student = parent.student.clone();
    let mut teacher = parent.teacher.clone();
    let mut action = SearchAction::Retrain;
    let moved = if want_student {
        try_student(&mut rng).map(|(a, s)| {
            student = s;
            action = SearchAction::Student(a);
        })
    } else {
        None
    };
    if moved.is_none() {
        let (t, m) = mutate_teacher(&parent.teacher, &mut rng, &ctx.pool.space)?;
        match m {
            Some(m) => {
                teacher = t;
                action = SearchAction::Teacher(m);
            }
            None if student_allowed && !want_student => {
                if let Some((a, s)) = try_student(&mut rng) {
                    student = s;
                    action = SearchAction::Student(a);
                }
            }
            None => {}
        }
    }
    let mut history = parent.history.clone();
    history.push(action);
    Ok((CandidatePair { id: it, student, teacher, evals: Vec::new(), best: None, history }, parent.id))
}

fn evaluate_candidate(mut p: CandidatePair, ctx: &SearchContext<'_>) -> Result<CandidatePair> {
    let seed = derive_seed(ctx.cfg.seed ^ 0xfa57, p.id);
    fast_eval(&mut p, ctx, seed)?;
    Ok(p)
}

fn row_for(p: &CandidatePair, parent: Option<usize>, best_score: f64, t0: Instant) -> TrajectoryRow {
    let e = p.best_eval();
    TrajectoryRow {
        iteration: p.id,
        parent,
        action: p.history.last().cloned().unwrap_or(SearchAction::Init),
        teacher: p.teacher.clone(),
        arch_encoding: encode_arch(&p.student.arch),
        resolution: e.map(|e| e.resolution),
        map: e.map_or(0.0, |e| e.map),
        flops: e.map_or(0.0, |e| e.flops),
        score: p.score(),
        best_score,
        wall_seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Runs the search from `base`, whose weights are scored as they are (no
/// extra training) together with the super-net teacher.
///
/// Iterations are processed in rounds of `workers` candidates proposed from
/// the same top-k list and evaluated concurrently; rows are emitted in
/// iteration order, so a run is reproducible for a fixed worker count and
/// `workers = 1` is the plain sequential loop.
pub fn hill_climb(
    base: StudentState,
    ctx: &SearchContext<'_>,
    workers: usize,
    on_row: &mut dyn FnMut(&TrajectoryRow) -> Result<()>,
) -> Result<SearchOutcome> {
    let cfg = ctx.cfg;
    let t0 = Instant::now();
    let mut initial = CandidatePair {
        id: 0,
        student: base,
        teacher: ctx.pool.space.max_choice(),
        evals: Vec::new(),
        best: None,
        history: vec![SearchAction::Init],
    };
    let (evals, best) = ctx.evaluate(&initial.student)?;
    initial.evals = evals;
    initial.best = Some(best);
    let mut list = TopKList::new(cfg.top_k);
    list.insert(initial.clone());
    let mut trajectory = vec![row_for(&initial, None, list.best_score(), t0)];
    on_row(&trajectory[0])?;

    let workers = workers.max(1);
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut it = 1;
    while it <= cfg.iterations {
        let round: Vec<usize> = (it..=cfg.iterations.min(it + workers - 1)).collect();
        let (proposals, parents): (Vec<CandidatePair>, Vec<usize>) =
            round.iter().map(|&i| propose(&list, ctx, i)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
        let evaluated: Vec<Result<CandidatePair>> = if proposals.len() == 1 {
            proposals.into_iter().map(|p| evaluate_candidate(p, ctx)).collect()
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = proposals
                    .into_iter()
                    .map(|p| s.spawn(move || evaluate_candidate(p, ctx)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("fast-eval worker panicked")).collect()
            })
        };
        for (p, parent) in evaluated.into_iter().zip(parents) {
            let p = p?;
            let before = list.best_score();
            list.insert(p.clone());
            if list.best_score() > before {
                since_best = 0;
            } else {
                since_best += 1;
            }
            let row = row_for(&p, Some(parent), list.best_score(), t0);
            on_row(&row)?;
            trajectory.push(row);
        }
        it += round.len();
        if cfg.patience > 0 && since_best >= cfg.patience && it <= cfg.iterations {
            stopped_early = true;
            break;
        }
    }
    Ok(SearchOutcome { top_k: list, trajectory, initial, stopped_early })
}

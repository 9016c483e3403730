//! Distillation losses: proposal-feature imitation through an adapter,
//! soft cross-entropy on class scores, score-weighted class-aware
//! regression, the BN-scale sparsity term, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::microdet::HeadVars;
use crate::netgraph::{Detector, ADAPTER_DIM, NUM_CLASSES};
use crate::tensor::{Graph, Mode, ParamStore, Tensor, Var};
use crate::{Error, Result};

pub const LAMBDA_BN: f64 = 1e-5;
/// Floor applied to student probabilities before the log.
pub const PROB_FLOOR: f64 = 1e-12;
const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_bn: f64,
    pub w_det: f64,
    pub w_feat: f64,
    pub w_pred: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_bn: LAMBDA_BN, w_det: 1.0, w_feat: 1.0, w_pred: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_bn", self.lambda_bn), ("w_det", self.w_det), ("w_feat", self.w_feat), ("w_pred", self.w_pred)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::input(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Same weights with distillation switched off.
    pub fn without_kd(&self) -> Self {
        Self { w_feat: 0.0, w_pred: 0.0, ..self.clone() }
    }
}

/// Student proposal features and the matching teacher features.
pub struct FeatureDistillBatch {
    /// `[P, C_s, h, w]` on the student graph.
    pub f_s: Var,
    /// `[P, C_t, h, w]`, `C_t <= ADAPTER_DIM`; zero-padded to the adapter width.
    pub f_t: Tensor,
    /// Number of distilled positions.
    pub n_p: usize,
}

/// Student and teacher predictions at shared proposals.
pub struct PredDistillBatch {
    /// `[N, NUM_CLASSES + 1]` student probabilities.
    pub p_s: Var,
    /// `[N, NUM_CLASSES + 1]` teacher probabilities.
    pub p_t: Tensor,
    /// `[N, 4·NUM_CLASSES]` student regression, four values per class.
    pub reg_s: Var,
    pub reg_t: Tensor,
    /// `[N, NUM_CLASSES]` teacher foreground scores weighting the regression.
    pub weights: Tensor,
}

fn zero(g: &mut Graph) -> Var {
    g.input(Tensor::scalar(0.0))
}

impl FeatureDistillBatch {
    pub fn validate(&self, g: &Graph) -> Result<()> {
        let s = g.shape(self.f_s);
        let t = self.f_t.shape();
        if s.len() != 4 || t.len() != 4 || s[0] != t[0] || s[2..] != t[2..] {
            return Err(Error::input(format!("feature batch shapes differ: student {s:?}, teacher {t:?}")));
        }
        if t[1] > ADAPTER_DIM {
            return Err(Error::input(format!("teacher has {} channels, adapter gives {ADAPTER_DIM}", t[1])));
        }
        Ok(())
    }
}

/// `(1/N_p) Σ (f_adap(F_S) − F_T)²` with a 3×3 adapter conv read from
/// `adapter.w` / `adapter.b` in `params`.
pub fn feat_loss(g: &mut Graph, params: &ParamStore, b: &FeatureDistillBatch) -> Result<Var> {
    b.validate(g)?;
    if b.n_p == 0 {
        return Ok(zero(g));
    }
    let w = params.bind(g, "adapter.w")?;
    let bias = params.bind(g, "adapter.b")?;
    let adapted = g.conv2d(b.f_s, w, Some(bias), 1, 1)?;
    let target = g.input(pad_channels(&b.f_t, ADAPTER_DIM));
    let diff = g.sub(adapted, target)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, 1.0 / b.n_p as f64)?)
}

/// Zero-pads `[N, C, h, w]` to `[N, c_out, h, w]`.
pub fn pad_channels(t: &Tensor, c_out: usize) -> Tensor {
    let [n, c, h, w] = t.shape().try_into().expect("NCHW tensor");
    let hw = h * w;
    let mut out = vec![0.0; n * c_out * hw];
    for b in 0..n {
        out[b * c_out * hw..b * c_out * hw + c * hw].copy_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
    }
    Tensor::new(vec![n, c_out, h, w], out).expect("consistent shape")
}

impl PredDistillBatch {
    pub fn validate(&self, g: &Graph) -> Result<()> {
        let n = self.p_t.shape()[0];
        let expect = [
            ("p_s", g.shape(self.p_s).to_vec(), vec![n, NUM_CLASSES + 1]),
            ("p_t", self.p_t.shape().to_vec(), vec![n, NUM_CLASSES + 1]),
            ("reg_s", g.shape(self.reg_s).to_vec(), vec![n, 4 * NUM_CLASSES]),
            ("reg_t", self.reg_t.shape().to_vec(), vec![n, 4 * NUM_CLASSES]),
            ("weights", self.weights.shape().to_vec(), vec![n, NUM_CLASSES]),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::input(format!("{name} has shape {got:?}, expected {want:?}")));
            }
        }
        for (name, data) in [("p_s", g.value(self.p_s).data()), ("p_t", self.p_t.data())] {
            for (i, row) in data.chunks_exact(NUM_CLASSES + 1).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::input(format!("{name} row {i} is not a distribution (sum {s})")));
                }
            }
        }
        Ok(())
    }
}

/// `−(1/N) Σ_n Σ_c P_t[n,c] · ln max(P_s[n,c], 1e-12)`.
pub fn cls_kd_loss(g: &mut Graph, b: &PredDistillBatch) -> Result<Var> {
    b.validate(g)?;
    let n = b.p_t.shape()[0];
    let logp = g.log_clamp(b.p_s, PROB_FLOOR)?;
    let pt = g.input(b.p_t.clone());
    let prod = g.mul(logp, pt)?;
    let s = g.sum(prod)?;
    Ok(g.scale(s, -1.0 / n as f64)?)
}

/// `(1/N) Σ_n Σ_k |Σ_i p_t[n,i] · (reg_t[n,i,k] − reg_s[n,i,k])|`: the
/// absolute value is taken per coordinate after the class sum.
pub fn loc_kd_loss(g: &mut Graph, b: &PredDistillBatch) -> Result<Var> {
    b.validate(g)?;
    let n = b.p_t.shape()[0];
    let rc = 4 * NUM_CLASSES;
    let mut w = vec![0.0; n * rc];
    for (row, weights) in b.weights.data().chunks_exact(NUM_CLASSES).enumerate() {
        for (i, &p) in weights.iter().enumerate() {
            w[row * rc + 4 * i..row * rc + 4 * i + 4].iter_mut().for_each(|v| *v = p);
        }
    }
    // sums the class blocks coordinate-wise
    let mut fold = vec![0.0; rc * 4];
    for i in 0..NUM_CLASSES {
        for k in 0..4 {
            fold[(4 * i + k) * 4 + k] = 1.0;
        }
    }
    let reg_t = g.input(b.reg_t.clone());
    let diff = g.sub(reg_t, b.reg_s)?;
    let w = g.input(Tensor::new(vec![n, rc], w)?);
    let weighted = g.mul(diff, w)?;
    let fold = g.input(Tensor::new(vec![rc, 4], fold)?);
    let summed = g.matmul(weighted, fold)?;
    let a = g.abs(summed)?;
    let s = g.sum(a)?;
    Ok(g.scale(s, 1.0 / n as f64)?)
}

/// Names of the backbone BN scale parameters (stem and stages; neck and
/// head carry no BN).
pub fn backbone_gammas(p: &ParamStore) -> Vec<String> {
    p.names()
        .filter(|n| n.ends_with(".gamma") && (n.starts_with("stem.") || is_stage_param(n)))
        .cloned()
        .collect()
}

fn is_stage_param(name: &str) -> bool {
    name.strip_prefix('s').and_then(|r| r.split('.').next()).is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
}

/// `Σ |γ|` over backbone BN layers, on the graph.
pub fn bn_reg_loss(g: &mut Graph, p: &ParamStore) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for name in backbone_gammas(p) {
        let v = p.bind(g, &name)?;
        let a = g.abs(v)?;
        let s = g.sum(a)?;
        acc = Some(match acc {
            Some(x) => g.add(x, s)?,
            None => s,
        });
    }
    Ok(acc.unwrap_or_else(|| zero(g)))
}

/// `Σ |γ|` over backbone BN layers, as a plain value.
pub fn bn_l1(p: &ParamStore) -> f64 {
    backbone_gammas(p).iter().map(|n| p.get(n).expect("listed").data().iter().map(|v| v.abs()).sum::<f64>()).sum()
}

/// The loss terms of one step, as graph nodes.
pub struct LossTerms {
    pub det: Var,
    pub feat: Option<Var>,
    pub cls_kd: Option<Var>,
    pub loc_kd: Option<Var>,
    pub bn: Var,
}

/// `w_det·L_det + w_feat·L_feat + w_pred·(L_cls + L_reg) + λ·L_BN`; absent
/// distillation terms count as zero.
pub fn total_loss(g: &mut Graph, t: &LossTerms, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let named = [("det", Some(t.det)), ("feat", t.feat), ("cls_kd", t.cls_kd), ("loc_kd", t.loc_kd), ("bn", Some(t.bn))];
    for (name, v) in named {
        if let Some(v) = v {
            let x = g.value(v).data()[0];
            if !x.is_finite() {
                return Err(Error::Numeric(format!("loss term {name} is {x}")));
            }
        }
    }
    let mut total = g.scale(t.det, cfg.w_det)?;
    let weighted = [(t.feat, cfg.w_feat), (t.cls_kd, cfg.w_pred), (t.loc_kd, cfg.w_pred), (Some(t.bn), cfg.lambda_bn)];
    for (v, w) in weighted {
        if let Some(v) = v {
            if w != 0.0 {
                let s = g.scale(v, w)?;
                total = g.add(total, s)?;
            }
        }
    }
    Ok(total)
}

/// Teacher values gathered at a set of proposal rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherView {
    pub rows: Vec<usize>,
    /// `[P, NUM_CLASSES + 1]`
    pub probs: Tensor,
    /// `[P, 4·NUM_CLASSES]`
    pub reg: Tensor,
    /// `[P, C_t, 1, 1]`
    pub feat: Tensor,
}

/// Runs `teacher` in eval mode on `images` and reads its head and neck
/// features at `rows` (batch-major cell rows, as in [`HeadVars::row`]).
pub fn teacher_view(teacher: &Detector, images: &Tensor, rows: &[usize]) -> Result<TeacherView> {
    let mut g = Graph::new(Mode::Eval);
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let x = g.input(images.clone());
    let out = teacher.forward(&mut g, x)?;
    let head = HeadVars::new(&mut g, &out, h, w)?;
    let gather = |g: &Graph, v: Var| {
        let c = g.shape(v)[1];
        let d = g.value(v).data();
        let data: Vec<f64> = rows.iter().flat_map(|&r| d[r * c..(r + 1) * c].iter().copied()).collect();
        (c, data)
    };
    let (cc, logits) = gather(&g, head.cls_rows);
    let probs: Vec<f64> = logits.chunks_exact(cc).flat_map(crate::microdet::softmax_row).collect();
    let (rc, reg) = gather(&g, head.reg_rows);
    let (fc, feat) = gather(&g, head.feat_rows);
    let p = rows.len();
    Ok(TeacherView {
        rows: rows.to_vec(),
        probs: Tensor::new(vec![p, cc], probs)?,
        reg: Tensor::new(vec![p, rc], reg)?,
        feat: Tensor::new(vec![p, fc, 1, 1], feat)?,
    })
}

/// Student-side rows of every image's proposals, in proposal order.
pub fn proposal_rows(head: &HeadVars, proposals: &[Vec<usize>]) -> Vec<usize> {
    proposals.iter().enumerate().flat_map(|(b, cells)| cells.iter().map(move |&c| head.row(b, c))).collect()
}

/// Builds both distillation batches from the student's head and a teacher
/// view taken at the student's own proposals. A view taken at any other
/// rows is rejected.
pub fn assemble_batches(
    g: &mut Graph,
    head: &HeadVars,
    student_rows: &[usize],
    view: &TeacherView,
) -> Result<(PredDistillBatch, FeatureDistillBatch)> {
    if view.rows != student_rows {
        return Err(Error::input("teacher view was not taken at the student's proposals"));
    }
    let p = student_rows.len();
    let cls = g.gather_rows(head.cls_rows, student_rows)?;
    let p_s = g.softmax(cls)?;
    let reg_s = g.gather_rows(head.reg_rows, student_rows)?;
    let feat = g.gather_rows(head.feat_rows, student_rows)?;
    let c_s = g.shape(feat)[1];
    let f_s = g.reshape(feat, &[p, c_s, 1, 1])?;
    let weights: Vec<f64> =
        view.probs.data().chunks_exact(NUM_CLASSES + 1).flat_map(|r| r[..NUM_CLASSES].iter().copied()).collect();
    let pred = PredDistillBatch {
        p_s,
        p_t: view.probs.clone(),
        reg_s,
        reg_t: view.reg.clone(),
        weights: Tensor::new(vec![p, NUM_CLASSES], weights)?,
    };
    pred.validate(g)?;
    let feat = FeatureDistillBatch { f_s, f_t: view.feat.clone(), n_p: p };
    feat.validate(g)?;
    Ok((pred, feat))
}

/// Proposal sharing in one call: selects the student's proposals, runs the
/// teacher at the same resolution and assembles both batches.
pub fn share_proposals(
    g: &mut Graph,
    head: &HeadVars,
    teacher: &Detector,
    images: &Tensor,
) -> Result<(PredDistillBatch, FeatureDistillBatch)> {
    let (h, w) = (images.shape()[2], images.shape()[3]);
    if (h, w) != (head.grid.h, head.grid.w) || images.shape()[0] != head.n {
        return Err(Error::input(format!(
            "teacher images {:?} do not match the student's {}x{} batch of {}",
            images.shape(),
            head.grid.h,
            head.grid.w,
            head.n
        )));
    }
    let proposals: Vec<Vec<usize>> = head.outputs(g).into_iter().map(|o| o.proposal_cells).collect();
    let rows = proposal_rows(head, &proposals);
    let view = teacher_view(teacher, images, &rows)?;
    assemble_batches(g, head, &rows, &view)
}

/// Entropy `−Σ p ln p` of a distribution.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

//! The synthetic detection task: scene generation, the grid head's
//! proposals and box decoding, the supervised loss, mAP and training.

mod dataset;
mod eval;
mod train;

pub use dataset::{gen_dataset, Dataset, Layout, LayoutObject, Scene, Shape, MAX_OBJECTS, MIN_OBJECTS, SIZE_RANGE};
pub use eval::{
    average_precision, calibrated_teachers, calibration_batch, eval_map, evaluate, evaluate_calibrated, predict, CALIBRATION_SCENES,
    IOU_THRESHOLDS,
};
pub use train::{
    compute_step, optimized_names, train_distilled, train_epochs, EpochStats, EvalSpec, LrSchedule, StepLosses, Teachers, TrainConfig,
};

use serde::{Deserialize, Serialize};

use crate::netgraph::{DetectorOutput, HEAD_STRIDE, NUM_CLASSES};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Proposals kept per image.
pub const NUM_PROPOSALS: usize = 16;
/// Anchor side as a fraction of the image side.
pub const ANCHOR_SCALE: f64 = 0.275;
pub const SCORE_THRESHOLD: f64 = 0.05;
/// Default evaluation and base resolution.
pub const R_BASE: usize = 64;
pub const RESOLUTIONS: [usize; 3] = [32, 48, 64];
const MAX_LOG_SCALE: f64 = 4.0;

/// Axis-aligned box `(x1, y1, x2, y2)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.0;
        (x2 - x1).max(0.0) * (y2 - y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        let [x1, y1, x2, y2] = self.0;
        ((x1 + x2) / 2.0, (y1 + y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        let [x1, y1, x2, y2] = self.0;
        self.0.iter().all(|v| v.is_finite()) && x2 > x1 && y2 > y1
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.0;
    let [bx1, by1, bx2, by2] = b.0;
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Cell grid of the head for an `h`×`w` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub gh: usize,
    pub gw: usize,
}

impl Grid {
    pub fn for_image(h: usize, w: usize) -> Self {
        Self { h, w, gh: h / HEAD_STRIDE, gw: w / HEAD_STRIDE }
    }

    pub fn cells(&self) -> usize {
        self.gh * self.gw
    }

    pub fn anchor(&self, cell: usize) -> BBox {
        let (row, col) = (cell / self.gw, cell % self.gw);
        let cw = self.w as f64 / self.gw as f64;
        let ch = self.h as f64 / self.gh as f64;
        let (cx, cy) = ((col as f64 + 0.5) * cw, (row as f64 + 0.5) * ch);
        let (aw, ah) = (ANCHOR_SCALE * self.w as f64, ANCHOR_SCALE * self.h as f64);
        BBox([cx - aw / 2.0, cy - ah / 2.0, cx + aw / 2.0, cy + ah / 2.0])
    }

    /// Cell containing point `(x, y)`, clamped to the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> usize {
        let col = ((x / self.w as f64 * self.gw as f64).floor().max(0.0) as usize).min(self.gw - 1);
        let row = ((y / self.h as f64 * self.gh as f64).floor().max(0.0) as usize).min(self.gh - 1);
        row * self.gw + col
    }
}

/// Regression target of `gt` relative to `anchor`: centre offsets in anchor
/// units and log size ratios.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.0[2] - anchor.0[0], anchor.0[3] - anchor.0[1]);
    let (gw, gh) = (gt.0[2] - gt.0[0], gt.0[3] - gt.0[1]);
    [(gcx - acx) / aw, (gcy - acy) / ah, (gw / aw).ln(), (gh / ah).ln()]
}

pub fn decode_box(anchor: &BBox, off: &[f64]) -> BBox {
    let (aw, ah) = (anchor.0[2] - anchor.0[0], anchor.0[3] - anchor.0[1]);
    let (dx, dy) = (off[0] * aw, off[1] * ah);
    // half the size change on each side; zero offsets reproduce the anchor exactly
    let sx = (aw - aw * off[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp()) / 2.0;
    let sy = (ah - ah * off[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp()) / 2.0;
    let [x1, y1, x2, y2] = anchor.0;
    BBox([x1 + dx + sx, y1 + dy + sy, x2 + dx - sx, y2 + dy - sy])
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Per-image head values.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub grid: Grid,
    /// `[cells, NUM_CLASSES + 1]`
    pub cls_logits: Tensor,
    /// `[cells, 4 * NUM_CLASSES]`
    pub reg: Tensor,
    pub proposal_cells: Vec<usize>,
}

impl HeadOutput {
    pub fn new(grid: Grid, cls_logits: Tensor, reg: Tensor) -> Result<Self> {
        if cls_logits.shape() != [grid.cells(), NUM_CLASSES + 1] || reg.shape() != [grid.cells(), 4 * NUM_CLASSES] {
            return Err(Error::input(format!(
                "head shapes {:?} / {:?} do not fit a {}x{} grid",
                cls_logits.shape(),
                reg.shape(),
                grid.gh,
                grid.gw
            )));
        }
        let proposal_cells = select_proposals(&cls_logits, NUM_PROPOSALS);
        Ok(Self { grid, cls_logits, reg, proposal_cells })
    }

    pub fn probs(&self, cell: usize) -> Vec<f64> {
        let c = NUM_CLASSES + 1;
        softmax_row(&self.cls_logits.data()[cell * c..(cell + 1) * c])
    }

    pub fn reg_of(&self, cell: usize, class_id: usize) -> &[f64] {
        let base = cell * 4 * NUM_CLASSES + 4 * class_id;
        &self.reg.data()[base..base + 4]
    }

    /// Decoded detections of every proposal above `threshold`, clipped to
    /// the image.
    pub fn detections(&self, threshold: f64) -> Vec<Detection> {
        let (w, h) = (self.grid.w as f64, self.grid.h as f64);
        self.proposal_cells
            .iter()
            .filter_map(|&cell| {
                let p = self.probs(cell);
                let (class_id, &score) = p[..NUM_CLASSES]
                    .iter()
                    .enumerate()
                    .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
                if score < threshold {
                    return None;
                }
                let b = decode_box(&self.grid.anchor(cell), self.reg_of(cell, class_id));
                let [x1, y1, x2, y2] = b.0;
                let bbox = BBox([x1.clamp(0.0, w), y1.clamp(0.0, h), x2.clamp(0.0, w), y2.clamp(0.0, h)]);
                bbox.is_valid().then_some(Detection { class_id, score, bbox })
            })
            .collect()
    }
}

/// Maximum foreground probability per cell.
pub fn foreground_scores(cls_logits: &Tensor) -> Vec<f64> {
    let c = NUM_CLASSES + 1;
    cls_logits
        .data()
        .chunks_exact(c)
        .map(|row| softmax_row(row)[..NUM_CLASSES].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// The `k` cells with the highest foreground score, best first; ties go to
/// the lower cell index.
pub fn select_proposals(cls_logits: &Tensor, k: usize) -> Vec<usize> {
    let scores = foreground_scores(cls_logits);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Head outputs of a batch flattened to one row per cell.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[N·cells, NUM_CLASSES + 1]`
    pub cls_rows: Var,
    /// `[N·cells, 4·NUM_CLASSES]`
    pub reg_rows: Var,
    /// `[N·cells, neck_width]`
    pub feat_rows: Var,
    pub n: usize,
    pub grid: Grid,
}

impl HeadVars {
    pub fn new(g: &mut Graph, out: &DetectorOutput, image_h: usize, image_w: usize) -> Result<Self> {
        let n = g.shape(out.cls)[0];
        let grid = Grid::for_image(image_h, image_w);
        let cls_rows = g.nchw_to_rows(out.cls)?;
        let reg_rows = g.nchw_to_rows(out.reg)?;
        let feat_rows = g.nchw_to_rows(out.neck)?;
        Ok(Self { cls_rows, reg_rows, feat_rows, n, grid })
    }

    /// Row of `cell` in image `b`.
    pub fn row(&self, b: usize, cell: usize) -> usize {
        b * self.grid.cells() + cell
    }

    /// Per-image values, with proposals selected.
    pub fn outputs(&self, g: &Graph) -> Vec<HeadOutput> {
        let cells = self.grid.cells();
        let (cc, rc) = (NUM_CLASSES + 1, 4 * NUM_CLASSES);
        let cls = g.value(self.cls_rows).data();
        let reg = g.value(self.reg_rows).data();
        (0..self.n)
            .map(|b| {
                let logits = Tensor::new(vec![cells, cc], cls[b * cells * cc..(b + 1) * cells * cc].to_vec());
                let r = Tensor::new(vec![cells, rc], reg[b * cells * rc..(b + 1) * cells * rc].to_vec());
                HeadOutput::new(self.grid, logits.expect("row slice"), r.expect("row slice")).expect("grid shapes")
            })
            .collect()
    }
}

/// Cell-level training targets of one scene: the class of every cell
/// (background unless an object's centre falls in it; the larger object
/// wins a shared cell) and the regression target of positive cells.
pub fn cell_targets(grid: &Grid, objects: &[Object]) -> (Vec<usize>, Vec<Option<[f64; 4]>>) {
    let mut cls = vec![NUM_CLASSES; grid.cells()];
    let mut reg = vec![None; grid.cells()];
    let mut owner_area = vec![0.0; grid.cells()];
    for o in objects {
        let (cx, cy) = o.bbox.center();
        let cell = grid.cell_of(cx, cy);
        if o.bbox.area() > owner_area[cell] {
            owner_area[cell] = o.bbox.area();
            cls[cell] = o.class_id;
            reg[cell] = Some(encode_box(&grid.anchor(cell), &o.bbox));
        }
    }
    (cls, reg)
}

/// Supervised loss: mean cross-entropy over all cells plus smooth-L1 on the
/// true-class regression of positive cells, averaged over positives.
pub fn det_loss(g: &mut Graph, head: &HeadVars, truths: &[Scene]) -> Result<Var> {
    if truths.len() != head.n {
        return Err(Error::input(format!("{} truths for a batch of {}", truths.len(), head.n)));
    }
    let cells = head.grid.cells();
    let (cc, rc) = (NUM_CLASSES + 1, 4 * NUM_CLASSES);
    let rows = head.n * cells;
    let mut onehot = vec![0.0; rows * cc];
    let mut reg_target = vec![0.0; rows * rc];
    let mut reg_mask = vec![0.0; rows * rc];
    let mut positives = 0usize;
    for (b, scene) in truths.iter().enumerate() {
        if scene.size() != (head.grid.h, head.grid.w) {
            return Err(Error::input(format!(
                "scene {b} is {:?}, head was run at {}x{}",
                scene.size(),
                head.grid.h,
                head.grid.w
            )));
        }
        let (cls, reg) = cell_targets(&head.grid, &scene.objects);
        for cell in 0..cells {
            let r = head.row(b, cell);
            onehot[r * cc + cls[cell]] = 1.0;
            if let Some(t) = reg[cell] {
                positives += 1;
                let base = r * rc + 4 * cls[cell];
                reg_target[base..base + 4].copy_from_slice(&t);
                reg_mask[base..base + 4].iter_mut().for_each(|m| *m = 1.0);
            }
        }
    }
    let logp = g.log_softmax(head.cls_rows)?;
    let onehot = g.input(Tensor::new(vec![rows, cc], onehot)?);
    let picked = g.mul(logp, onehot)?;
    let ce = g.sum(picked)?;
    let ce = g.scale(ce, -1.0 / rows as f64)?;

    let target = g.input(Tensor::new(vec![rows, rc], reg_target)?);
    let mask = g.input(Tensor::new(vec![rows, rc], reg_mask)?);
    let diff = g.sub(head.reg_rows, target)?;
    let diff = g.mul(diff, mask)?;
    let sl1 = g.smooth_l1(diff)?;
    let sl1 = g.sum(sl1)?;
    let sl1 = g.scale(sl1, 1.0 / positives.max(1) as f64)?;
    Ok(g.add(ce, sl1)?)
}

//! Reference implementations and random fixtures shared by the suites.

use detnas::etp::{SubnetSpace, SupernetParams};
use detnas::microdet::{BBox, Detection, Object};
use detnas::morph::ChannelGroup;
use detnas::netgraph::{ArchSpec, BlockKind, BlockSpec, Detector, NUM_CLASSES};
use detnas::tensor::{Graph, Mode, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.0[2].min(b.0[2]) - a.0[0].max(b.0[0])).max(0.0);
    let iy = (a.0[3].min(b.0[3]) - a.0[1].max(b.0[1])).max(0.0);
    let inter = ix * iy;
    let area = |x: &BBox| (x.0[2] - x.0[0]) * (x.0[3] - x.0[1]);
    inter / (area(a) + area(b) - inter)
}

/// Exhaustive reference: quadratic matching and a per-point max over the
/// whole precision/recall curve.
pub fn oracle_map(preds: &[Vec<Detection>], truths: &[Vec<Object>]) -> f64 {
    let mut aps = Vec::new();
    for c in 0..NUM_CLASSES {
        let total = truths.iter().flatten().filter(|o| o.class_id == c).count();
        if total == 0 {
            continue;
        }
        let mut dets: Vec<(usize, usize, &Detection)> = Vec::new();
        for (s, p) in preds.iter().enumerate() {
            for (i, d) in p.iter().enumerate() {
                if d.class_id == c {
                    dets.push((s, i, d));
                }
            }
        }
        // selection sort by score, earliest first on ties
        let mut sorted = Vec::new();
        while !dets.is_empty() {
            let mut best = 0;
            for k in 1..dets.len() {
                if dets[k].2.score > dets[best].2.score {
                    best = k;
                }
            }
            sorted.push(dets.remove(best));
        }
        for t in 0..10 {
            let thr = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95][t];
            let mut taken: Vec<(usize, usize)> = Vec::new();
            let mut curve = Vec::new();
            let mut tp = 0.0;
            for (k, &(s, _, d)) in sorted.iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                for (j, o) in truths[s].iter().enumerate() {
                    if o.class_id != c || taken.contains(&(s, j)) {
                        continue;
                    }
                    let v = oracle_iou(&d.bbox, &o.bbox);
                    if v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                        best = Some((j, v));
                    }
                }
                if let Some((j, _)) = best {
                    taken.push((s, j));
                    tp += 1.0;
                }
                curve.push((tp / total as f64, tp / (k + 1) as f64));
            }
            let mut ap = 0.0;
            for r in 0..=100 {
                let target = r as f64 / 100.0;
                ap += curve.iter().filter(|(rc, _)| *rc >= target).map(|(_, p)| *p).fold(0.0, f64::max);
            }
            aps.push(ap / 101.0);
        }
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

pub fn random_map_case(r: &mut ChaCha8Rng, n_scenes: usize) -> (Vec<Vec<Detection>>, Vec<Vec<Object>>) {
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for _ in 0..n_scenes {
        let t: Vec<Object> = (0..r.random_range(0..=5))
            .map(|_| {
                let x = r.random_range(0.0..40.0);
                let y = r.random_range(0.0..40.0);
                let s = r.random_range(6.0..20.0);
                Object { class_id: r.random_range(0..NUM_CLASSES), bbox: BBox([x, y, x + s, y + s]) }
            })
            .collect();
        let mut p = Vec::new();
        for _ in 0..r.random_range(0..=8) {
            let (class_id, bbox) = if !t.is_empty() && r.random_bool(0.7) {
                let o = &t[r.random_range(0..t.len())];
                let j = |r: &mut ChaCha8Rng| r.random_range(-2.5..2.5);
                let b = o.bbox.0;
                let cls = if r.random_bool(0.85) { o.class_id } else { r.random_range(0..NUM_CLASSES) };
                (cls, BBox([b[0] + j(r), b[1] + j(r), b[2] + j(r), b[3] + j(r)]))
            } else {
                let x = r.random_range(0.0..40.0);
                let y = r.random_range(0.0..40.0);
                (r.random_range(0..NUM_CLASSES), BBox([x, y, x + 10.0, y + 10.0]))
            };
            // coarse scores create ties
            let score = (r.random_range(1..=10) as f64) / 10.0;
            p.push(Detection { class_id, score, bbox });
        }
        preds.push(p);
        truths.push(t);
    }
    (preds, truths)
}

pub fn random_arch(r: &mut ChaCha8Rng) -> ArchSpec {
    let kind = if r.random_bool(0.3) { BlockKind::Bottleneck } else { BlockKind::Basic };
    let stages = (0..4)
        .map(|s| {
            let width = r.random_range(2..7);
            let mid: Vec<usize> = (0..kind.convs() - 1).map(|_| r.random_range(2..6)).collect();
            (0..r.random_range(1..4))
                .map(|b| {
                    let mut ch = mid.clone();
                    ch.push(width);
                    BlockSpec::at(kind, ch, s, b)
                })
                .collect()
        })
        .collect();
    ArchSpec { stages, neck_width: r.random_range(2..6), stem_width: r.random_range(2..6) }
}

/// Fresh weights with every BN layer given random affine and running
/// statistics, so eval-mode BN is not the identity.
pub fn random_detector(arch: ArchSpec, r: &mut ChaCha8Rng) -> Detector {
    let mut d = Detector::fresh_with(arch, r.random(), false).unwrap();
    let names: Vec<String> = d.params.names().cloned().collect();
    for n in names {
        let t = d.params.get_mut(&n).unwrap();
        let range = if n.ends_with(".running_var") || n.ends_with(".gamma") { 0.5..1.5 } else if n.contains("bn") { -0.5..0.5 } else { continue };
        t.data_mut().iter_mut().for_each(|v| *v = r.random_range(range.clone()));
    }
    d
}

pub fn outputs(d: &Detector, x: &Tensor) -> Vec<f64> {
    outputs_in(d, x, Mode::Eval)
}

pub fn outputs_in(d: &Detector, x: &Tensor, mode: Mode) -> Vec<f64> {
    let mut g = Graph::new(mode);
    let xv = g.input(x.clone());
    let o = d.forward(&mut g, xv).unwrap();
    let mut v = g.value(o.cls).data().to_vec();
    v.extend_from_slice(g.value(o.reg).data());
    v.extend_from_slice(g.value(o.neck).data());
    v
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn image(r: &mut ChaCha8Rng, res: usize) -> Tensor {
    Tensor::new(vec![1, 3, res, res], (0..3 * res * res).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn images(r: &mut ChaCha8Rng, n: usize, res: usize) -> Tensor {
    Tensor::new(vec![n, 3, res, res], (0..n * 3 * res * res).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

/// Zeroes every BN layer touching `channel` of `group`, making the channel
/// contribute nothing downstream.
pub fn silence(p: &mut ParamStore, arch: &ArchSpec, group: ChannelGroup, channel: usize) {
    let mut bns = vec![group.ranking_bn()];
    if let ChannelGroup::StageOut { stage } = group {
        for (b, spec) in arch.stages[stage].iter().enumerate() {
            bns.push(format!("s{stage}.b{b}.bn{}", spec.channels.len() - 1));
        }
    }
    for bn in bns {
        for f in ["gamma", "beta"] {
            p.get_mut(&format!("{bn}.{f}")).unwrap().data_mut()[channel] = 0.0;
        }
    }
}

/// Supernet with every tensor, BN records included, set to random values.
pub fn randomized(space: SubnetSpace, seed: u64) -> SupernetParams {
    let mut sp = SupernetParams::fresh(space, seed).unwrap();
    let mut r = rng(seed ^ 77);
    let names: Vec<String> = sp.params.names().cloned().collect();
    for n in names {
        let t = sp.params.get_mut(&n).unwrap();
        let range = if n.ends_with(".running_var") || n.ends_with(".gamma") { 0.5..1.5 } else { -0.5..0.5 };
        t.data_mut().iter_mut().for_each(|v| *v = r.random_range(range.clone()));
    }
    sp
}

/// Whether `small` is the leading corner of `big`, checked index by index.
pub fn is_prefix(small: &Tensor, big: &Tensor) -> bool {
    let (ss, bs) = (small.shape(), big.shape());
    if ss.len() != bs.len() || ss.iter().zip(bs).any(|(a, b)| a > b) {
        return false;
    }
    let mut idx = vec![0; ss.len()];
    for &v in small.data() {
        let mut off = 0;
        for (i, &k) in idx.iter().enumerate() {
            off = off * bs[i] + k;
        }
        if v.to_bits() != big.data()[off].to_bits() {
            return false;
        }
        for d in (0..ss.len()).rev() {
            idx[d] += 1;
            if idx[d] < ss[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    true
}

/// The super-net as a plain detector: the top-coefficient BN records under
/// their ordinary names.
pub fn supernet_as_detector(sp: &SupernetParams) -> Detector {
    let top = format!("@{}.", sp.space.max_coeff());
    let mut p = ParamStore::new();
    for (name, t) in sp.params.iter() {
        if name.starts_with("adapter.") {
            continue;
        }
        match name.split_once('@') {
            Some(_) if !name.contains(&top) => {}
            Some(_) => p.insert(name.replace(&top, "."), t.clone()),
            None => p.insert(name.clone(), t.clone()),
        }
    }
    Detector::from_params(sp.space.max_arch(), p).unwrap()
}

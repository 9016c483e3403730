mod common;

use common::gradcheck::{check, uniform, REL_TOL};
use common::oracles::{oracle_map, random_map_case};
use detnas::microdet::*;
use detnas::netgraph::{ArchSpec, Detector, NUM_CLASSES};
use detnas::tensor::{Graph, Mode, Tensor, TensorError};
use detnas::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn same_seed_same_pixels() {
    let a = gen_dataset(5, 8, &RESOLUTIONS);
    let b = gen_dataset(5, 8, &RESOLUTIONS);
    assert_eq!(a, b);
    for i in 0..8 {
        assert_eq!(a.scene(i, 48), b.scene(i, 48));
    }
    assert_ne!(gen_dataset(6, 8, &RESOLUTIONS).scene(0, 32), a.scene(0, 32));
}

#[test]
fn generated_scenes_satisfy_contract() {
    let data = gen_dataset(11, 1000, &RESOLUTIONS);
    for i in 0..data.len() {
        let res = RESOLUTIONS[i % 3];
        let s = data.scene(i, res);
        assert_eq!(s.image.shape(), &[3, res, res]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((MIN_OBJECTS..=MAX_OBJECTS).contains(&s.objects.len()));
        for o in &s.objects {
            let [x1, y1, x2, y2] = o.bbox.0;
            assert!(o.class_id < NUM_CLASSES);
            assert!(0.0 <= x1 && x1 < x2 && x2 <= res as f64, "{:?}", o.bbox);
            assert!(0.0 <= y1 && y1 < y2 && y2 <= res as f64, "{:?}", o.bbox);
        }
    }
}

#[test]
fn class_histogram_is_uniform() {
    let data = gen_dataset(12, 10_000, &RESOLUTIONS);
    let mut counts = [0usize; NUM_CLASSES];
    for l in &data.layouts {
        for o in &l.objects {
            counts[o.class_id] += 1;
        }
    }
    let mean = counts.iter().sum::<usize>() as f64 / NUM_CLASSES as f64;
    for c in counts {
        assert!((c as f64 - mean).abs() / mean <= 0.05, "{counts:?}");
    }
}

fn head_with(grid: Grid, logits: Vec<f64>, reg: Vec<f64>) -> HeadOutput {
    let cells = grid.cells();
    HeadOutput::new(
        grid,
        Tensor::new(vec![cells, NUM_CLASSES + 1], logits).unwrap(),
        Tensor::new(vec![cells, 4 * NUM_CLASSES], reg).unwrap(),
    )
    .unwrap()
}

#[test]
fn background_head_detects_nothing() {
    let grid = Grid::for_image(64, 64);
    let mut logits = vec![0.0; grid.cells() * 4];
    for cell in 0..grid.cells() {
        logits[cell * 4 + NUM_CLASSES] = 20.0;
    }
    let h = head_with(grid, logits, vec![0.3; grid.cells() * 12]);
    assert!(h.detections(SCORE_THRESHOLD).is_empty());
}

#[test]
fn zero_offsets_decode_to_anchor() {
    let grid = Grid::for_image(48, 48);
    for cell in 0..grid.cells() {
        let a = grid.anchor(cell);
        assert_eq!(decode_box(&a, &[0.0; 4]), a);
    }
    let a = grid.anchor(13);
    let (cx, cy) = a.center();
    assert_eq!((cx, cy), (12.0, 20.0));
    assert!((a.0[2] - a.0[0] - 0.275 * 48.0).abs() < 1e-12);
}

#[test]
fn encode_decode_box_inverse() {
    let grid = Grid::for_image(64, 64);
    let gt = BBox([10.0, 12.5, 30.0, 27.0]);
    let a = grid.anchor(grid.cell_of(20.0, 19.75));
    let d = decode_box(&a, &encode_box(&a, &gt));
    for k in 0..4 {
        assert!((d.0[k] - gt.0[k]).abs() < 1e-12);
    }
}

#[test]
fn proposals_match_brute_force_sort() {
    let mut r = rng(3);
    for trial in 0..50 {
        let res = RESOLUTIONS[trial % 3];
        let grid = Grid::for_image(res, res);
        let cells = grid.cells();
        // coarse values make ties likely
        let logits: Vec<f64> = (0..cells * 4).map(|_| r.random_range(0..4) as f64).collect();
        let h = head_with(grid, logits.clone(), vec![0.0; cells * 12]);
        let scores = foreground_scores(&Tensor::new(vec![cells, 4], logits.clone()).unwrap());
        let mut scored: Vec<(f64, usize)> = scores.into_iter().zip(0..cells).collect();
        // exhaustive selection: repeatedly take the best remaining
        let mut expect = Vec::new();
        while expect.len() < NUM_PROPOSALS.min(cells) {
            let mut best = 0;
            for i in 1..scored.len() {
                let (s, c) = scored[i];
                let (bs, bc) = scored[best];
                if s > bs || (s == bs && c < bc) {
                    best = i;
                }
            }
            expect.push(scored.remove(best).1);
        }
        assert_eq!(h.proposal_cells, expect);
    }
}

fn head_vars_from(g: &mut Graph, grid: Grid, n: usize, logits: Tensor, reg: Tensor) -> HeadVars {
    let cls_rows = g.leaf(logits);
    let reg_rows = g.leaf(reg);
    let feat_rows = g.input(Tensor::zeros(&[n * grid.cells(), 1]));
    HeadVars { cls_rows, reg_rows, feat_rows, n, grid }
}

fn scene_at(res: usize, objects: Vec<Object>) -> Scene {
    Scene { image: Tensor::zeros(&[3, res, res]), objects }
}

#[test]
fn perfect_head_has_zero_loss() {
    let grid = Grid::for_image(32, 32);
    let objects = vec![
        Object { class_id: 0, bbox: BBox([2.0, 3.0, 12.0, 13.0]) },
        Object { class_id: 2, bbox: BBox([17.0, 15.0, 29.0, 31.0]) },
    ];
    let (cls, reg) = cell_targets(&grid, &objects);
    let mut logits = vec![0.0; grid.cells() * 4];
    let mut regv = vec![0.0; grid.cells() * 12];
    for cell in 0..grid.cells() {
        logits[cell * 4 + cls[cell]] = 40.0;
        if let Some(t) = reg[cell] {
            regv[cell * 12 + 4 * cls[cell]..cell * 12 + 4 * cls[cell] + 4].copy_from_slice(&t);
        }
    }
    let mut g = Graph::new(Mode::Train);
    let hv = head_vars_from(
        &mut g,
        grid,
        1,
        Tensor::new(vec![16, 4], logits).unwrap(),
        Tensor::new(vec![16, 12], regv).unwrap(),
    );
    let l = det_loss(&mut g, &hv, &[scene_at(32, objects)]).unwrap();
    assert!(g.value(l).data()[0] < 1e-6);
}

fn random_scene(res: usize, r: &mut ChaCha8Rng) -> Scene {
    let n = r.random_range(1..=5);
    let objects = (0..n)
        .map(|_| {
            let s = r.random_range(0.15..0.4) * res as f64;
            let x = r.random_range(0.0..res as f64 - s);
            let y = r.random_range(0.0..res as f64 - s);
            Object { class_id: r.random_range(0..NUM_CLASSES), bbox: BBox([x, y, x + s, y + s]) }
        })
        .collect();
    scene_at(res, objects)
}

#[test]
fn det_loss_is_non_negative() {
    let mut r = rng(4);
    let grid = Grid::for_image(32, 32);
    for _ in 0..10_000 {
        let scene = random_scene(32, &mut r);
        let mut g = Graph::new(Mode::Eval);
        let logits = uniform(&[16, 4], -5.0, 5.0, &mut r);
        let reg = uniform(&[16, 12], -3.0, 3.0, &mut r);
        let cls_rows = g.input(logits);
        let reg_rows = g.input(reg);
        let feat_rows = g.input(Tensor::zeros(&[16, 1]));
        let hv = HeadVars { cls_rows, reg_rows, feat_rows, n: 1, grid };
        let l = det_loss(&mut g, &hv, &[scene]).unwrap();
        let v = g.value(l).data()[0];
        assert!(v.is_finite() && v >= 0.0);
    }
}

#[test]
fn det_loss_gradients_match_finite_differences() {
    let mut r = rng(5);
    let grid = Grid::for_image(32, 32);
    let scenes = vec![random_scene(32, &mut r), random_scene(32, &mut r)];
    let (cls, reg) = (0..2).fold((Vec::new(), Vec::new()), |(mut c, mut t), b| {
        let (cc, rr) = cell_targets(&grid, &scenes[b].objects);
        c.extend(cc);
        t.extend(rr);
        (c, t)
    });
    let logits = uniform(&[32, 4], -2.0, 2.0, &mut r);
    // keep every regression residual clear of smooth-L1's kinks at ±1
    let mut regv = uniform(&[32, 12], -0.4, 0.4, &mut r);
    for (row, t) in reg.iter().enumerate() {
        if let Some(t) = t {
            for k in 0..4 {
                let i = row * 12 + 4 * cls[row] + k;
                let off = regv.data()[i];
                regv.data_mut()[i] = t[k] + if off.abs() < 0.05 { 0.3 } else { off };
            }
        }
    }
    let err = check(&[logits, regv], 6, 200, |g, v| {
        let hv = HeadVars { cls_rows: v[0], reg_rows: v[1], feat_rows: v[0], n: 2, grid };
        det_loss(g, &hv, &scenes).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => TensorError::Usage(other.to_string()),
        })
    });
    assert!(err < REL_TOL, "worst relative error {err}");
}

#[test]
fn det_loss_rejects_resolution_mismatch() {
    let grid = Grid::for_image(32, 32);
    let mut g = Graph::new(Mode::Eval);
    let hv = head_vars_from(&mut g, grid, 1, Tensor::zeros(&[16, 4]), Tensor::zeros(&[16, 12]));
    let s = scene_at(48, vec![]);
    assert!(det_loss(&mut g, &hv, &[s]).is_err());
}

// ---- mAP -------------------------------------------------------------------

#[test]
fn map_matches_exhaustive_oracle() {
    let mut r = rng(7);
    for _ in 0..200 {
        let (p, t) = random_map_case(&mut r, 3);
        let got = eval_map(&p, &t).unwrap();
        let want = oracle_map(&p, &t);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
    let (p, t) = random_map_case(&mut r, 20);
    assert!((eval_map(&p, &t).unwrap() - oracle_map(&p, &t)).abs() < 1e-9);
}

#[test]
fn map_extremes() {
    let mut r = rng(8);
    let (_, truths) = random_map_case(&mut r, 10);
    let perfect: Vec<Vec<Detection>> = truths
        .iter()
        .map(|t| t.iter().map(|o| Detection { class_id: o.class_id, score: 1.0, bbox: o.bbox }).collect())
        .collect();
    assert_eq!(eval_map(&perfect, &truths).unwrap(), 1.0);
    let empty = vec![Vec::new(); truths.len()];
    assert_eq!(eval_map(&empty, &truths).unwrap(), 0.0);
    assert!(eval_map(&empty[..3], &truths).is_err());
}

#[test]
fn map_depends_only_on_score_ranking() {
    let mut r = rng(9);
    for _ in 0..50 {
        let (p, t) = random_map_case(&mut r, 4);
        let squashed: Vec<Vec<Detection>> = p
            .iter()
            .map(|ds| ds.iter().map(|d| Detection { score: (3.0 * d.score).tanh() * 0.5, ..d.clone() }).collect())
            .collect();
        assert_eq!(eval_map(&p, &t).unwrap(), eval_map(&squashed, &t).unwrap());
    }
}

// ---- training ------------------------------------------------------------

fn small_cfg(epochs: usize, lr: f64, resolutions: Vec<usize>) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        scenes_per_epoch: None,
        lr: LrSchedule::Constant { lr },
        momentum: 0.9,
        weight_decay: 1e-4,
        resolutions,
        loss: Default::default(),
        seed: 1,
        shuffle: true,
    }
}

#[test]
fn singleton_resolution_is_always_used() {
    let data = gen_dataset(20, 16, &RESOLUTIONS);
    let mut d = Detector::fresh(ArchSpec::desk_base(), 0).unwrap();
    let h = train_epochs(&mut d, None, &data, &small_cfg(2, 0.01, vec![48]), None).unwrap();
    assert!(h.iter().all(|e| e.resolutions.len() == 4 && e.resolutions.iter().all(|&r| r == 48)));
    let h = train_epochs(&mut d, None, &data, &small_cfg(3, 0.01, RESOLUTIONS.to_vec()), None).unwrap();
    let mut seen: Vec<usize> = h.iter().flat_map(|e| e.resolutions.clone()).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen, RESOLUTIONS.to_vec());
}

#[test]
fn zero_lr_leaves_weights_and_history_flat() {
    let data = gen_dataset(21, 8, &RESOLUTIONS);
    let mut d = Detector::fresh(ArchSpec::desk_base(), 0).unwrap();
    let before = d.clone();
    let mut cfg = small_cfg(3, 0.0, vec![32]);
    cfg.shuffle = false;
    let h = train_epochs(&mut d, None, &data, &cfg, None).unwrap();
    for name in before.params.trainable_names() {
        assert_eq!(before.params.get(&name), d.params.get(&name), "{name}");
    }
    assert!(h.windows(2).all(|w| w[0].loss == w[1].loss));
}

#[test]
fn divergence_is_reported() {
    let data = gen_dataset(22, 8, &RESOLUTIONS);
    let mut d = Detector::fresh(ArchSpec::desk_base(), 0).unwrap();
    let err = train_epochs(&mut d, None, &data, &small_cfg(5, 1e150, vec![32]), None).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert!(err.to_string().contains("epoch"), "{err}");
}

#[test]
fn det_loss_falls_over_first_epochs() {
    let data = gen_dataset(23, 96, &RESOLUTIONS);
    let mut drops = Vec::new();
    for seed in 0..3 {
        let mut d = Detector::fresh(ArchSpec::desk_base(), seed).unwrap();
        let mut cfg = small_cfg(3, 0.01, vec![32]);
        cfg.seed = seed;
        let h = train_epochs(&mut d, None, &data, &cfg, None).unwrap();
        drops.push((h[0].det_loss > h[1].det_loss, h[1].det_loss > h[2].det_loss));
    }
    let count = |f: fn(&(bool, bool)) -> bool| drops.iter().filter(|d| f(d)).count();
    assert!(count(|d| d.0) >= 2 && count(|d| d.1) >= 2, "{drops:?}");
}

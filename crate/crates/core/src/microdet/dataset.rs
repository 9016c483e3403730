use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BBox, Object};
use crate::netgraph::NUM_CLASSES;
use crate::tensor::Tensor;

pub const MIN_OBJECTS: usize = 1;
pub const MAX_OBJECTS: usize = 5;
/// Object side length as a fraction of the image side.
pub const SIZE_RANGE: (f64, f64) = (0.15, 0.4);
const NOISE_STD: f64 = 0.04;
const MAX_IOU: f64 = 0.3;
/// Objects get distinct cells on this grid, the coarsest head grid.
const PLACEMENT_GRID: f64 = 4.0;
const PLACEMENT_TRIES: usize = 50;
const SUPERSAMPLE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Disk,
    Triangle,
}

impl Shape {
    pub fn from_class(c: usize) -> Self {
        [Shape::Square, Shape::Disk, Shape::Triangle][c]
    }

    /// Whether normalized point (u, v) in the unit box is inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v),
            Shape::Disk => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            // apex at top centre, base along the bottom edge
            Shape::Triangle => (0.0..=1.0).contains(&v) && (u - 0.5).abs() <= 0.5 * v,
        }
    }
}

/// Resolution-free scene description in unit coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub background: [f64; 3],
    pub objects: Vec<LayoutObject>,
    noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutObject {
    pub class_id: usize,
    /// (x1, y1, x2, y2) in [0, 1].
    pub bbox: [f64; 4],
    pub color: [f64; 3],
}

/// A rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`, values in [0, 1].
    pub image: Tensor,
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

/// Seeded synthetic detection dataset. Scenes are stored as layouts and
/// rendered at whatever resolution is asked for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub seed: u64,
    pub resolutions: Vec<usize>,
    pub layouts: Vec<Layout>,
}

pub fn gen_dataset(seed: u64, n_scenes: usize, resolutions: &[usize]) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layouts = (0..n_scenes).map(|_| gen_layout(&mut rng)).collect();
    Dataset { seed, resolutions: resolutions.to_vec(), layouts }
}

fn gen_layout(rng: &mut ChaCha8Rng) -> Layout {
    let background = [0; 3].map(|_| rng.random_range(0.0..0.45));
    let n = rng.random_range(MIN_OBJECTS..=MAX_OBJECTS);
    let mut objects: Vec<LayoutObject> = Vec::with_capacity(n);
    while objects.len() < n {
        let class_id = rng.random_range(0..NUM_CLASSES);
        let side = rng.random_range(SIZE_RANGE.0..SIZE_RANGE.1);
        let color = [0; 3].map(|_| rng.random_range(0.55..1.0));
        // Placement never looks at the class, so class frequencies stay uniform.
        let fits = |bbox: &[f64; 4]| {
            let cell = |b: &[f64; 4]| {
                (((b[0] + b[2]) / 2.0 * PLACEMENT_GRID) as usize, ((b[1] + b[3]) / 2.0 * PLACEMENT_GRID) as usize)
            };
            objects.iter().all(|o| cell(&o.bbox) != cell(bbox) && iou(&o.bbox, bbox) <= MAX_IOU)
        };
        let placed = (0..PLACEMENT_TRIES).find_map(|_| {
            let x1 = rng.random_range(0.0..1.0 - side);
            let y1 = rng.random_range(0.0..1.0 - side);
            let bbox = [x1, y1, x1 + side, y1 + side];
            fits(&bbox).then_some(bbox)
        });
        match placed {
            Some(bbox) => objects.push(LayoutObject { class_id, bbox, color }),
            None => break,
        }
    }
    Layout { background, objects, noise_seed: rng.random() }
}

fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    super::iou(&BBox(*a), &BBox(*b))
}

impl Layout {
    pub fn render(&self, res: usize) -> Scene {
        let mut img = vec![0.0; 3 * res * res];
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed ^ (res as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
        let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for y in 0..res {
            for x in 0..res {
                let mut px = self.background;
                for o in &self.objects {
                    let [x1, y1, x2, y2] = o.bbox.map(|v| v * res as f64);
                    if (x as f64) + 1.0 <= x1 || (x as f64) >= x2 || (y as f64) + 1.0 <= y1 || (y as f64) >= y2 {
                        continue;
                    }
                    let shape = Shape::from_class(o.class_id);
                    let mut hits = 0;
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let fx = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                            let fy = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                            if shape.contains((fx - x1) / (x2 - x1), (fy - y1) / (y2 - y1)) {
                                hits += 1;
                            }
                        }
                    }
                    let a = hits as f64 * inv;
                    for c in 0..3 {
                        px[c] = (1.0 - a) * px[c] + a * o.color[c];
                    }
                }
                for (c, v) in px.iter().enumerate() {
                    let n: f64 = noise.sample(&mut rng);
                    img[(c * res + y) * res + x] = (v + n).clamp(0.0, 1.0);
                }
            }
        }
        Scene { image: Tensor::new(vec![3, res, res], img).expect("consistent shape"), objects: self.objects_at(res) }
    }

    /// Ground truth in pixels at `res`, without rendering.
    pub fn objects_at(&self, res: usize) -> Vec<Object> {
        self.objects
            .iter()
            .map(|o| Object { class_id: o.class_id, bbox: BBox(o.bbox.map(|v| v * res as f64)) })
            .collect()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.layouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layouts.is_empty()
    }

    pub fn scene(&self, i: usize, res: usize) -> Scene {
        self.layouts[i].render(res)
    }

    /// Stacks scenes `idx` at `res` into a `[N, 3, res, res]` batch.
    pub fn batch(&self, idx: &[usize], res: usize) -> (Tensor, Vec<Scene>) {
        let scenes: Vec<Scene> = idx.iter().map(|&i| self.scene(i, res)).collect();
        let mut data = Vec::with_capacity(idx.len() * 3 * res * res);
        for s in &scenes {
            data.extend_from_slice(s.image.data());
        }
        (Tensor::new(vec![idx.len(), 3, res, res], data).expect("consistent shape"), scenes)
    }

    /// Writes every scene at `res` as raw little-endian f64 images plus a
    /// JSON annotation file, for debugging.
    pub fn dump(&self, dir: &Path, res: usize) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut annotations = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let s = self.scene(i, res);
            let bytes: Vec<u8> = s.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            std::fs::write(dir.join(format!("scene_{i:05}.f64")), bytes)?;
            annotations.push(serde_json::json!({
                "index": i,
                "shape": [3, res, res],
                "objects": s.objects.iter().map(|o| serde_json::json!({"class_id": o.class_id, "bbox": o.bbox.0})).collect::<Vec<_>>(),
            }));
        }
        std::fs::write(dir.join("annotations.json"), serde_json::to_vec_pretty(&annotations)?)?;
        Ok(())
    }
}

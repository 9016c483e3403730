use detnas::tensor::{Graph, Mode, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;

/// Relative error with an absolute floor: differences below `ABS_FLOOR`
/// count as exact.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < ABS_FLOOR {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Compares analytic gradients of `Σ wᵢ·outᵢ` (random fixed `w`) against
/// central differences for up to `max_coords` coordinates per input.
/// Returns the worst relative error seen.
pub fn check<F>(inputs: &[Tensor], seed: u64, max_coords: usize, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe_shape = {
        let mut g = Graph::new(Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.value(out).shape().to_vec()
    };
    let n: usize = probe_shape.iter().product();
    let weights = Tensor::new(probe_shape.clone(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

    let loss_of = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new(Mode::Train);
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::new(Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let w = g.input(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let numel = inputs[k].numel();
        let coords: Vec<usize> = if numel <= max_coords {
            (0..numel).collect()
        } else {
            (0..max_coords).map(|_| rng.random_range(0..numel)).collect()
        };
        for i in coords {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Random tensor whose entries stay at least `gap` away from zero, so kinks
/// at 0 (relu, abs, smooth-l1's sign) are not straddled by the FD step.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

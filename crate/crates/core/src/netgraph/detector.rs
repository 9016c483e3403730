use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{stage_output_stride, ArchSpec, BlockKind, NetError, HEAD_STRIDE, NUM_CLASSES, STEM_STRIDE};
use crate::tensor::{Graph, Mode, ParamStore, Tensor, Var, BN_EPS};

/// Output channels of the student's feature adapter.
pub const ADAPTER_DIM: usize = 256;

const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    He,
    Small,
    Zeros,
    Ones,
}

/// A detector: architecture plus a matching parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub arch: ArchSpec,
    pub params: ParamStore,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct DetectorOutput {
    /// Output of every stage, finest first.
    pub stages: Vec<Var>,
    /// Fused neck map on the head grid, `[N, neck_width, H/8, W/8]`.
    pub neck: Var,
    /// `[N, NUM_CLASSES + 1, H/8, W/8]`
    pub cls: Var,
    /// `[N, 4 * NUM_CLASSES, H/8, W/8]`, four channels per class.
    pub reg: Var,
}

fn layout(a: &ArchSpec, with_adapter: bool) -> Vec<(String, Vec<usize>, Init)> {
    let mut v = Vec::new();
    let bn = |v: &mut Vec<_>, p: &str, c: usize| {
        v.push((format!("{p}.gamma"), vec![c], Init::Ones));
        v.push((format!("{p}.beta"), vec![c], Init::Zeros));
        v.push((format!("{p}.running_mean"), vec![c], Init::Zeros));
        v.push((format!("{p}.running_var"), vec![c], Init::Ones));
    };
    v.push(("stem.conv.w".into(), vec![a.stem_width, 3, 3, 3], Init::He));
    bn(&mut v, "stem.bn", a.stem_width);
    for (s, stage) in a.stages.iter().enumerate() {
        for (b, block) in stage.iter().enumerate() {
            let c_in = a.block_in_width(s, b);
            let mut c = c_in;
            for (i, &co) in block.channels.iter().enumerate() {
                let k = conv_kernel(block.kind, i);
                v.push((format!("s{s}.b{b}.conv{i}.w"), vec![co, c, k, k], Init::He));
                bn(&mut v, &format!("s{s}.b{b}.bn{i}"), co);
                c = co;
            }
            if block.has_projection {
                v.push((format!("s{s}.b{b}.proj.w"), vec![c, c_in, 1, 1], Init::He));
                bn(&mut v, &format!("s{s}.b{b}.proj_bn"), c);
            }
        }
    }
    let n = a.neck_width;
    for s in 0..a.stages.len() {
        v.push((format!("neck.{s}.w"), vec![n, a.stage_width(s), 1, 1], Init::He));
        v.push((format!("neck.{s}.b"), vec![n], Init::Zeros));
    }
    v.push(("head.conv.w".into(), vec![n, n, 3, 3], Init::He));
    v.push(("head.conv.b".into(), vec![n], Init::Zeros));
    v.push(("head.cls.w".into(), vec![NUM_CLASSES + 1, n, 1, 1], Init::Small));
    v.push(("head.cls.b".into(), vec![NUM_CLASSES + 1], Init::Zeros));
    v.push(("head.reg.w".into(), vec![4 * NUM_CLASSES, n, 1, 1], Init::Small));
    v.push(("head.reg.b".into(), vec![4 * NUM_CLASSES], Init::Zeros));
    if with_adapter {
        v.push(("adapter.w".into(), vec![ADAPTER_DIM, n, 3, 3], Init::He));
        v.push(("adapter.b".into(), vec![ADAPTER_DIM], Init::Zeros));
    }
    v
}

/// Name and shape of every parameter of a detector for `a`, in
/// initialization order.
pub fn param_shapes(a: &ArchSpec, with_adapter: bool) -> Vec<(String, Vec<usize>)> {
    layout(a, with_adapter).into_iter().map(|(n, s, _)| (n, s)).collect()
}

pub(crate) fn conv_kernel(kind: BlockKind, i: usize) -> usize {
    match (kind, i) {
        (BlockKind::Bottleneck, 0 | 2) => 1,
        _ => 3,
    }
}

impl Detector {
    /// Fresh He-initialized detector, including the feature adapter.
    pub fn fresh(arch: ArchSpec, seed: u64) -> Result<Self, NetError> {
        Self::fresh_with(arch, seed, true)
    }

    pub fn fresh_with(arch: ArchSpec, seed: u64, with_adapter: bool) -> Result<Self, NetError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(&arch, with_adapter)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::He => Tensor::he_normal(&shape, &mut rng),
                    Init::Small => Tensor::randn(&shape, HEAD_INIT_STD, &mut rng),
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::full(&shape, 1.0),
                };
                (name, t)
            })
            .collect();
        Ok(Self { arch, params })
    }

    /// Wraps existing parameters after checking them against the layout.
    /// The adapter is optional; anything else must match exactly.
    pub fn from_params(arch: ArchSpec, params: ParamStore) -> Result<Self, NetError> {
        arch.validate()?;
        let mut problems = Vec::new();
        let expected = layout(&arch, false);
        for (name, shape, _) in &expected {
            match params.get(name) {
                None => problems.push(format!("  missing {name} {shape:?}")),
                Some(t) if t.shape() != shape.as_slice() => {
                    problems.push(format!("  {name}: expected {shape:?}, found {:?}", t.shape()))
                }
                _ => {}
            }
        }
        let adapter = &layout(&arch, true)[expected.len()..];
        for (name, t) in params.iter() {
            if expected.iter().any(|(n, _, _)| n == name) {
                continue;
            }
            match adapter.iter().find(|(n, _, _)| n == name) {
                Some((_, shape, _)) if t.shape() != shape.as_slice() => {
                    problems.push(format!("  {name}: expected {shape:?}, found {:?}", t.shape()))
                }
                Some(_) => {}
                None => problems.push(format!("  unexpected {name} {:?}", t.shape())),
            }
        }
        if !problems.is_empty() {
            return Err(NetError::ParamMismatch(problems.join("\n")));
        }
        Ok(Self { arch, params })
    }

    pub fn has_adapter(&self) -> bool {
        self.params.contains("adapter.w")
    }

    /// Adds a freshly initialized adapter if the store has none.
    pub fn ensure_adapter(&mut self, seed: u64) {
        if self.has_adapter() {
            return;
        }
        let fresh = Self::fresh_with(self.arch.clone(), seed, true).expect("arch already validated");
        for name in ["adapter.w", "adapter.b"] {
            self.params.insert(name, fresh.params.get(name).expect("adapter in layout").clone());
        }
    }

    /// Drops parameters that only matter for distillation.
    pub fn without_adapter(mut self) -> Self {
        self.params.remove("adapter.w");
        self.params.remove("adapter.b");
        self
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str, bias: bool, stride: usize) -> Result<Var, NetError> {
        let w = self.params.bind(g, &format!("{name}.w"))?;
        let b = if bias { Some(self.params.bind(g, &format!("{name}.b"))?) } else { None };
        let k = g.shape(w)[2];
        Ok(g.conv2d(x, w, b, stride, k / 2)?)
    }

    fn bn(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var, NetError> {
        Ok(self.params.batch_norm(g, x, prefix, BN_EPS)?)
    }

    pub fn stem_forward(&self, g: &mut Graph, x: Var) -> Result<Var, NetError> {
        let y = self.conv(g, x, "stem.conv", false, STEM_STRIDE)?;
        let y = self.bn(g, y, "stem.bn")?;
        Ok(g.relu(y)?)
    }

    /// One residual block: `relu(F(x) + shortcut(x))`.
    pub fn block_forward(&self, g: &mut Graph, x: Var, stage: usize, block: usize) -> Result<Var, NetError> {
        let spec = &self.arch.stages[stage][block];
        let p = format!("s{stage}.b{block}");
        let mut y = x;
        let last = spec.channels.len() - 1;
        for i in 0..=last {
            let stride = if i == spec.strided_conv() { spec.stride } else { 1 };
            y = self.conv(g, y, &format!("{p}.conv{i}"), false, stride)?;
            y = self.bn(g, y, &format!("{p}.bn{i}"))?;
            if i < last {
                y = g.relu(y)?;
            }
        }
        let shortcut = if spec.has_projection {
            let s = self.conv(g, x, &format!("{p}.proj"), false, spec.stride)?;
            self.bn(g, s, &format!("{p}.proj_bn"))?
        } else {
            x
        };
        let sum = g.add(y, shortcut)?;
        Ok(g.relu(sum)?)
    }

    /// Replaces every BN layer's running statistics with the batch
    /// statistics of one train-mode forward pass over `images`.
    pub fn recalibrate_bn(&mut self, images: &Tensor) -> Result<(), NetError> {
        let mut g = Graph::new(Mode::Train);
        let x = g.input(images.clone());
        self.forward(&mut g, x)?;
        self.params.update_bn_stats(g.bn_stats(), 1.0)?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, images: Var) -> Result<DetectorOutput, NetError> {
        let shape = g.shape(images).to_vec();
        let (h, w) = match shape[..] {
            [_, 3, h, w] => (h, w),
            _ => {
                return Err(NetError::Tensor(crate::tensor::TensorError::Shape {
                    op: "detector",
                    detail: format!("expected [N, 3, H, W] images, got {shape:?}"),
                }))
            }
        };
        self.arch.check_resolution(h, w)?;
        let mut x = self.stem_forward(g, images)?;
        let mut stages = Vec::with_capacity(self.arch.stages.len());
        for s in 0..self.arch.stages.len() {
            for b in 0..self.arch.stages[s].len() {
                x = self.block_forward(g, x, s, b)?;
            }
            stages.push(x);
        }
        let mut neck: Option<Var> = None;
        for (s, &feat) in stages.iter().enumerate() {
            let y = self.conv(g, feat, &format!("neck.{s}"), true, 1)?;
            let st = stage_output_stride(s);
            let y = if st < HEAD_STRIDE {
                g.avg_pool(y, HEAD_STRIDE / st)?
            } else if st > HEAD_STRIDE {
                g.upsample(y, st / HEAD_STRIDE)?
            } else {
                y
            };
            neck = Some(match neck {
                Some(acc) => g.add(acc, y)?,
                None => y,
            });
        }
        let neck = neck.ok_or_else(|| NetError::InvalidArch("no stages".into()))?;
        let hidden = self.conv(g, neck, "head.conv", true, 1)?;
        let hidden = g.relu(hidden)?;
        let cls = self.conv(g, hidden, "head.cls", true, 1)?;
        let reg = self.conv(g, hidden, "head.reg", true, 1)?;
        Ok(DetectorOutput { stages, neck, cls, reg })
    }
}

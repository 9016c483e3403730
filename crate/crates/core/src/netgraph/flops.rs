use super::detector::conv_kernel;
use super::{stage_output_stride, ArchSpec, NetError, HEAD_STRIDE, NUM_CLASSES, STEM_STRIDE};

/// Where a conv sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Stem,
    Stage(usize),
    Neck,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub part: Part,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvLayer {
    /// 2 FLOPs per multiply-add.
    pub fn flops(&self) -> f64 {
        2.0 * (self.k * self.k * self.c_in * self.c_out * self.out_h * self.out_w) as f64
    }
}

/// Every conv of the network at an `h`×`w` input, in forward order.
///
/// Structural only: stages may be missing (a stem-only arch is allowed).
pub fn conv_layers(a: &ArchSpec, h: usize, w: usize) -> Result<Vec<ConvLayer>, NetError> {
    a.check_resolution(h, w)?;
    let mut out = Vec::new();
    let mut push = |name: String, part, c_in, c_out, k, stride: usize| {
        out.push(ConvLayer { name, part, c_in, c_out, k, out_h: h / stride, out_w: w / stride });
    };
    push("stem.conv".into(), Part::Stem, 3, a.stem_width, 3, STEM_STRIDE);
    let mut c_in = a.stem_width;
    for (s, stage) in a.stages.iter().enumerate() {
        let out_stride = stage_output_stride(s);
        for (b, block) in stage.iter().enumerate() {
            let p = format!("s{s}.b{b}");
            let mut c = c_in;
            for (i, &co) in block.channels.iter().enumerate() {
                let k = conv_kernel(block.kind, i);
                // convs before the strided one still run at the input stride
                let stride = if i < block.strided_conv() { out_stride / block.stride } else { out_stride };
                push(format!("{p}.conv{i}"), Part::Stage(s), c, co, k, stride);
                c = co;
            }
            if block.has_projection {
                push(format!("{p}.proj"), Part::Stage(s), c_in, block.out_width(), 1, out_stride);
            }
            c_in = block.out_width();
        }
        push(format!("neck.{s}"), Part::Neck, c_in, a.neck_width, 1, out_stride);
    }
    let n = a.neck_width;
    push("head.conv".into(), Part::Head, n, n, 3, HEAD_STRIDE);
    push("head.cls".into(), Part::Head, n, NUM_CLASSES + 1, 1, HEAD_STRIDE);
    push("head.reg".into(), Part::Head, n, 4 * NUM_CLASSES, 1, HEAD_STRIDE);
    Ok(out)
}

/// FLOPS of the stem, all backbone convs including projections, and the
/// neck. The detection head is reported separately by [`flops_breakdown`].
pub fn flops(a: &ArchSpec, resolution: (usize, usize)) -> Result<f64, NetError> {
    Ok(flops_breakdown(a, resolution)?.total())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsBreakdown {
    pub stem: f64,
    pub stages: Vec<f64>,
    pub neck: f64,
    pub head: f64,
}

impl FlopsBreakdown {
    /// Stem plus all stages.
    pub fn backbone(&self) -> f64 {
        self.stem + self.stages.iter().sum::<f64>()
    }

    pub fn total(&self) -> f64 {
        self.backbone() + self.neck
    }
}

pub fn flops_breakdown(a: &ArchSpec, (h, w): (usize, usize)) -> Result<FlopsBreakdown, NetError> {
    let mut r = FlopsBreakdown { stem: 0.0, stages: vec![0.0; a.stages.len()], neck: 0.0, head: 0.0 };
    for l in conv_layers(a, h, w)? {
        let f = l.flops();
        match l.part {
            Part::Stem => r.stem += f,
            Part::Stage(s) => r.stages[s] += f,
            Part::Neck => r.neck += f,
            Part::Head => r.head += f,
        }
    }
    Ok(r)
}

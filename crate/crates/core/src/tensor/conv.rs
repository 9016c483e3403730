//! im2col convolution kernels on top of `matrixmultiply::dgemm`.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Some(Self { c_in, h, w, c_out, k, stride, pad, h_out, w_out })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let p = g.col_cols();
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let p = g.col_cols();
    for c in 0..g.c_in {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// C (m×n, row-major) = alpha·A·B + beta·C with A given by (rsa, csa) strides
/// and B by (rsb, csb).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        } else {
            c[..m * n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: the caller provides slices covering every index reachable via
    // the given dimensions and strides; all strides are positive.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution over a batch. `x` is `[n, c_in, h, w]`, `w` is
/// `[c_out, c_in, k, k]`, output `[n, c_out, h_out, w_out]`.
pub(crate) fn conv_forward(g: &ConvGeom, n: usize, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let kk = g.col_rows();
    let p = g.col_cols();
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut out = vec![0.0; n * out_sz];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
    for b in 0..n {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let colb: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        gemm(g.c_out, kk, p, w, kk as isize, 1, colb, p as isize, 1, 0.0, ob);
        if let Some(bias) = bias {
            for (co, bv) in bias.iter().enumerate() {
                ob[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Backward convolution. Accumulates into whichever gradient buffers are
/// given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    g: &ConvGeom,
    n: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let kk = g.col_rows();
    let p = g.col_cols();
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let pointwise = g.is_pointwise();
    let mut col = if pointwise || dw.is_none() { Vec::new() } else { vec![0.0; kk * p] };
    let mut dcol = if dx.is_some() && !pointwise { vec![0.0; kk * p] } else { Vec::new() };
    for b in 0..n {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let dyb = &dy[b * out_sz..(b + 1) * out_sz];
        if let Some(dw) = dw.as_deref_mut() {
            let colb: &[f64] = if pointwise {
                xb
            } else {
                im2col(g, xb, &mut col);
                &col
            };
            // dW[c_out, kk] += dY[c_out, p] · colᵀ[p, kk]
            gemm(g.c_out, p, kk, dyb, p as isize, 1, colb, 1, p as isize, 1.0, dw);
        }
        if let Some(db) = db.as_deref_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dyb[co * p..(co + 1) * p].iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
            if pointwise {
                // dX[c_in, p] += Wᵀ[c_in, c_out] · dY[c_out, p]
                gemm(kk, g.c_out, p, w, 1, kk as isize, dyb, p as isize, 1, 1.0, dxb);
            } else {
                gemm(kk, g.c_out, p, w, 1, kk as isize, dyb, p as isize, 1, 0.0, &mut dcol);
                col2im(g, &dcol, dxb);
            }
        }
    }
}

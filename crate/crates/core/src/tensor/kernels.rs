//! Raw convolution, pooling and matrix kernels on row-major slices.

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k_w) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// `c = a · b + beta · c` where `a` is `m×k` and `b` is `k×n`, either
/// optionally stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths are asserted above and strides describe exactly those
    // row-major (or transposed) layouts.
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

/// Unfolds input patches into a `patch × (batch·positions)` matrix.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let np = g.batch * g.positions();
    let mut cols = vec![0.0; g.patch() * np];
    for c in 0..g.in_ch {
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_ch + c) * g.in_h * g.in_w..];
                    for y in 0..oh {
                        let iy = (y * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let base = n * oh * ow + y * ow;
                        let srow = &src[iy as usize * g.in_w..];
                        for xo in 0..ow {
                            let ix = (xo * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[base + xo] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Inverse of [`im2col`], accumulating overlapping patches into `dx`.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let np = g.batch * g.positions();
    for c in 0..g.in_ch {
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..g.batch {
                    let dst = &mut dx[(n * g.in_ch + c) * g.in_h * g.in_w..];
                    for y in 0..oh {
                        let iy = (y * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let base = n * oh * ow + y * ow;
                        for xo in 0..ow {
                            let ix = (xo * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[iy as usize * g.in_w + ix as usize] += src[base + xo];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward pass; returns an NCHW output buffer.
pub fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let np = g.batch * g.positions();
    let mut mat = vec![0.0; g.out_ch * np];
    gemm(g.out_ch, g.patch(), np, w, false, &cols, false, 0.0, &mut mat);
    let p = g.positions();
    let mut out = vec![0.0; g.batch * g.out_ch * p];
    for co in 0..g.out_ch {
        let bias = b.map_or(0.0, |b| b[co]);
        let row = &mat[co * np..(co + 1) * np];
        for n in 0..g.batch {
            let dst = &mut out[(n * g.out_ch + co) * p..(n * g.out_ch + co + 1) * p];
            for (d, s) in dst.iter_mut().zip(&row[n * p..(n + 1) * p]) {
                *d = s + bias;
            }
        }
    }
    out
}

/// Gradients of a convolution: `(dx, dw, db)`, each only when requested.
pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let p = g.positions();
    let np = g.batch * p;
    // dout NCHW -> [out_ch, batch·positions]
    let mut dmat = vec![0.0; g.out_ch * np];
    for n in 0..g.batch {
        for co in 0..g.out_ch {
            let src = &dout[(n * g.out_ch + co) * p..(n * g.out_ch + co + 1) * p];
            dmat[co * np + n * p..co * np + (n + 1) * p].copy_from_slice(src);
        }
    }
    let db = need.2.then(|| {
        (0..g.out_ch)
            .map(|co| dmat[co * np..(co + 1) * np].iter().sum())
            .collect()
    });
    let dw = need.1.then(|| {
        let cols = im2col(x, g);
        let mut dw = vec![0.0; g.out_ch * g.patch()];
        gemm(g.out_ch, np, g.patch(), &dmat, false, &cols, true, 0.0, &mut dw);
        dw
    });
    let dx = need.0.then(|| {
        let mut dcols = vec![0.0; g.patch() * np];
        gemm(g.patch(), g.out_ch, np, w, true, &dmat, false, 0.0, &mut dcols);
        let mut dx = vec![0.0; x.len()];
        col2im(&dcols, g, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Max pooling over NCHW planes. Returns outputs and the flat input index of
/// each window's maximum (first occurrence wins on ties).
pub fn max_pool2d_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for i in 0..k {
                    for j in 0..k {
                        let idx = base + (y * stride + i) * w + xo * stride + j;
                        if x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg, oh, ow)
}

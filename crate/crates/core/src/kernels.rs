//! Raw numeric kernels behind the graph primitives.

use rayon::prelude::*;

/// `c = op(a) * op(b) + beta * c` for row-major matrices, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`. With `trans_a` the buffer `a` holds a
/// `k x m` matrix; likewise `trans_b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: slice lengths were checked against the logical shapes and
    // strides above, so every access stays inside the buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
    fn cg(&self) -> usize {
        self.c_in / self.groups
    }
    fn og(&self) -> usize {
        self.c_out / self.groups
    }
    fn col_rows(&self) -> usize {
        self.cg() * self.kh * self.kw
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one group of one image into a `(cg*kh*kw) x (ho*wo)` matrix.
fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let plane = ho * wo;
    for c in 0..g.cg() {
        let src = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_line = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src_line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let plane = ho * wo;
    for c in 0..g.cg() {
        let dst = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[iy as usize * g.w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let plane = ho * wo;
    let img_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * plane;
    let wg_len = g.og() * g.col_rows();
    let mut out = vec![0.0; g.n * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(img_len))
        .for_each(|(o, img)| {
            let mut cols = if g.is_pointwise() {
                Vec::new()
            } else {
                vec![0.0; g.col_rows() * plane]
            };
            for gi in 0..g.groups {
                let gimg = &img[gi * g.cg() * g.h * g.w..(gi + 1) * g.cg() * g.h * g.w];
                let b_mat: &[f64] = if g.is_pointwise() {
                    gimg
                } else {
                    im2col(g, gimg, &mut cols);
                    &cols
                };
                let o_g = &mut o[gi * g.og() * plane..(gi + 1) * g.og() * plane];
                if let Some(b) = bias {
                    for (oc, row) in o_g.chunks_mut(plane).enumerate() {
                        row.fill(b[gi * g.og() + oc]);
                    }
                }
                gemm(
                    g.og(),
                    g.col_rows(),
                    plane,
                    &w[gi * wg_len..(gi + 1) * wg_len],
                    false,
                    b_mat,
                    false,
                    o_g,
                    1.0,
                );
            }
        });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let (ho, wo) = (g.h_out(), g.w_out());
    let plane = ho * wo;
    let img_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * plane;
    let wg_len = g.og() * g.col_rows();
    let rows = g.col_rows();

    // Per-image partials, reduced in image order so results do not depend on
    // thread scheduling.
    let partials: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..g.n)
        .into_par_iter()
        .map(|i| {
            let img = &x[i * img_len..(i + 1) * img_len];
            let d = &dout[i * out_len..(i + 1) * out_len];
            let mut dx = need_dx.then(|| vec![0.0; img_len]);
            let mut dw = need_dw.then(|| vec![0.0; w.len()]);
            let mut cols = vec![0.0; rows * plane];
            for gi in 0..g.groups {
                let gsl = gi * g.cg() * g.h * g.w..(gi + 1) * g.cg() * g.h * g.w;
                let d_g = &d[gi * g.og() * plane..(gi + 1) * g.og() * plane];
                let w_g = &w[gi * wg_len..(gi + 1) * wg_len];
                if let Some(dw) = dw.as_mut() {
                    let b_mat: &[f64] = if g.is_pointwise() {
                        &img[gsl.clone()]
                    } else {
                        im2col(g, &img[gsl.clone()], &mut cols);
                        &cols
                    };
                    gemm(
                        g.og(),
                        plane,
                        rows,
                        d_g,
                        false,
                        b_mat,
                        true,
                        &mut dw[gi * wg_len..(gi + 1) * wg_len],
                        1.0,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    if g.is_pointwise() {
                        gemm(rows, g.og(), plane, w_g, true, d_g, false, &mut dx[gsl], 1.0);
                    } else {
                        gemm(rows, g.og(), plane, w_g, true, d_g, false, &mut cols, 0.0);
                        col2im(g, &cols, &mut dx[gsl]);
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let mut dx = need_dx.then(|| Vec::with_capacity(x.len()));
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    for (pdx, pdw) in partials {
        if let (Some(acc), Some(p)) = (dx.as_mut(), pdx) {
            acc.extend_from_slice(&p);
        }
        if let (Some(acc), Some(p)) = (dw.as_mut(), pdw) {
            acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![0.0; g.c_out];
        for i in 0..g.n {
            for (oc, acc) in db.iter_mut().enumerate() {
                let s = (i * g.c_out + oc) * plane;
                *acc += dout[s..s + plane].iter().sum::<f64>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

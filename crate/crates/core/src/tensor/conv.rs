//! im2col cross-correlation backed by a single-threaded SGEMM.

use matrixmultiply::sgemm;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(g: &ConvGeom, x: &[f32], cols: &mut [f32]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f32], dx: &mut [f32]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            line[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns (output, im2col buffers for all batch items).
pub(crate) fn forward(
    g: &ConvGeom,
    x: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
) -> (Vec<f32>, Vec<f32>) {
    let (k, p) = (g.k(), g.p());
    let in_stride = g.c * g.h * g.w;
    let out_stride = g.out_c * p;
    let mut out = vec![0.0f32; g.n * out_stride];
    let mut cols = vec![0.0f32; g.n * k * p];
    for b in 0..g.n {
        let col = &mut cols[b * k * p..(b + 1) * k * p];
        im2col(g, &x[b * in_stride..(b + 1) * in_stride], col);
        let dst = &mut out[b * out_stride..(b + 1) * out_stride];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        // SAFETY: every pointer covers the row-major extents passed alongside it.
        unsafe {
            sgemm(
                g.out_c,
                k,
                p,
                1.0,
                weight.as_ptr(),
                k as isize,
                1,
                col.as_ptr(),
                p as isize,
                1,
                1.0,
                dst.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub(crate) fn backward(
    g: &ConvGeom,
    grad_out: &[f32],
    weight: &[f32],
    cols: &[f32],
    want: (bool, bool, bool),
) -> ConvGrads {
    let (k, p) = (g.k(), g.p());
    let in_stride = g.c * g.h * g.w;
    let out_stride = g.out_c * p;
    let mut dx = want.0.then(|| vec![0.0f32; g.n * in_stride]);
    let mut dw = want.1.then(|| vec![0.0f32; g.out_c * k]);
    let mut db = want.2.then(|| vec![0.0f32; g.out_c]);
    let mut dcols = if want.0 {
        vec![0.0f32; k * p]
    } else {
        Vec::new()
    };
    for b in 0..g.n {
        let go = &grad_out[b * out_stride..(b + 1) * out_stride];
        let col = &cols[b * k * p..(b + 1) * k * p];
        if let Some(dw) = dw.as_mut() {
            // dW (O x K) += dOut (O x P) * colsT (P x K)
            unsafe {
                sgemm(
                    g.out_c,
                    p,
                    k,
                    1.0,
                    go.as_ptr(),
                    p as isize,
                    1,
                    col.as_ptr(),
                    1,
                    p as isize,
                    1.0,
                    dw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
        if let Some(db) = db.as_mut() {
            for (o, chunk) in go.chunks(p).enumerate() {
                db[o] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dCols (K x P) = WT (K x O) * dOut (O x P)
            unsafe {
                sgemm(
                    k,
                    g.out_c,
                    p,
                    1.0,
                    weight.as_ptr(),
                    1,
                    k as isize,
                    go.as_ptr(),
                    p as isize,
                    1,
                    0.0,
                    dcols.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            col2im(g, &dcols, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
    }
    ConvGrads { dx, dw, db }
}

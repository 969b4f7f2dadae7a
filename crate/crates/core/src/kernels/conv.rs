//! 2D convolution through im2col and GEMM.
//!
//! Samples are processed in chunks: the chunk's patches are unrolled into one
//! `K × (chunk·Ho·Wo)` column matrix (`K = Cin·kH·kW`) so that a single GEMM
//! covers the chunk. Summation order depends only on the shapes, never on
//! scheduling, so results are bit-reproducible.

use crate::tensor::Element;

/// Upper bound on column-matrix elements per chunk.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn chunk(&self) -> usize {
        let per_sample = self.k() * self.out_h() * self.out_w();
        (COL_BUDGET / per_sample.max(1)).clamp(1, self.n)
    }
}

fn im2col<T: Element>(g: &ConvGeom, x: &[T], s0: usize, nb: usize, col: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw_out = ho * wo;
    let cols = nb * hw_out;
    let img = g.c_in * g.h * g.w;
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for s in 0..nb {
                    let src = &x[(s0 + s) * img + c * g.h * g.w..][..g.h * g.w];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        let d = &mut dst[s * hw_out + oh * wo..][..wo];
                        if ih < 0 || ih >= g.h as isize {
                            d.fill(T::zero());
                            continue;
                        }
                        let srow = &src[ih as usize * g.w..][..g.w];
                        for (ow, dv) in d.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            *dv = if iw < 0 || iw >= g.w as isize {
                                T::zero()
                            } else {
                                srow[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeom, col: &[T], s0: usize, nb: usize, dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw_out = ho * wo;
    let cols = nb * hw_out;
    let img = g.c_in * g.h * g.w;
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for s in 0..nb {
                    let dst = &mut dx[(s0 + s) * img + c * g.h * g.w..][..g.h * g.w];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[ih as usize * g.w..][..g.w];
                        let srow = &src[s * hw_out + oh * wo..][..wo];
                        for (ow, &v) in srow.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                drow[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `x` is N×Cin×H×W, `w` is Cout×Cin×kH×kW.
pub fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw_out = ho * wo;
    let k = g.k();
    let chunk = g.chunk();
    let mut out = vec![T::zero(); g.n * g.c_out * hw_out];
    let mut col = vec![T::zero(); k * chunk * hw_out];
    let mut tmp = vec![T::zero(); g.c_out * chunk * hw_out];
    let mut s0 = 0;
    while s0 < g.n {
        let nb = chunk.min(g.n - s0);
        let cols = nb * hw_out;
        im2col(g, x, s0, nb, &mut col[..k * cols]);
        T::gemm(
            g.c_out,
            k,
            cols,
            T::one(),
            w,
            k as isize,
            1,
            &col[..k * cols],
            cols as isize,
            1,
            T::zero(),
            &mut tmp[..g.c_out * cols],
            cols as isize,
            1,
        );
        for s in 0..nb {
            for co in 0..g.c_out {
                let dst = &mut out[((s0 + s) * g.c_out + co) * hw_out..][..hw_out];
                let src = &tmp[co * cols + s * hw_out..][..hw_out];
                match bias {
                    Some(b) => {
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = v + b[co];
                        }
                    }
                    None => dst.copy_from_slice(src),
                }
            }
        }
        s0 += nb;
    }
    out
}

/// Gradients of a convolution with respect to the input, weight and bias.
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw_out = ho * wo;
    let k = g.k();
    let chunk = g.chunk();
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let db = need_db.then(|| {
        (0..g.c_out)
            .map(|co| {
                let mut acc = T::zero();
                for s in 0..g.n {
                    for &v in &dy[(s * g.c_out + co) * hw_out..][..hw_out] {
                        acc += v;
                    }
                }
                acc
            })
            .collect()
    });
    if !need_dx && !need_dw {
        return ConvGrads { dx, dw, db };
    }
    let mut col = vec![T::zero(); k * chunk * hw_out];
    let mut dy_mat = vec![T::zero(); g.c_out * chunk * hw_out];
    let mut s0 = 0;
    while s0 < g.n {
        let nb = chunk.min(g.n - s0);
        let cols = nb * hw_out;
        for s in 0..nb {
            for co in 0..g.c_out {
                dy_mat[co * cols + s * hw_out..][..hw_out]
                    .copy_from_slice(&dy[((s0 + s) * g.c_out + co) * hw_out..][..hw_out]);
            }
        }
        let dy_chunk = &dy_mat[..g.c_out * cols];
        if let Some(dw) = dw.as_mut() {
            im2col(g, x, s0, nb, &mut col[..k * cols]);
            // dW[Cout,K] += dY[Cout,J] · colᵀ[J,K]
            T::gemm(
                g.c_out,
                cols,
                k,
                T::one(),
                dy_chunk,
                cols as isize,
                1,
                &col[..k * cols],
                1,
                cols as isize,
                T::one(),
                dw,
                k as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[K,J] = Wᵀ[K,Cout] · dY[Cout,J]
            T::gemm(
                k,
                g.c_out,
                cols,
                T::one(),
                w,
                1,
                k as isize,
                dy_chunk,
                cols as isize,
                1,
                T::zero(),
                &mut col[..k * cols],
                cols as isize,
                1,
            );
            col2im(g, &col[..k * cols], s0, nb, dx);
        }
        s0 += nb;
    }
    ConvGrads { dx, dw, db }
}

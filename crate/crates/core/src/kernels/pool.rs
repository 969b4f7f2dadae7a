use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// Max pooling with implicit `-inf` padding. Returns the output and, for each
/// output element, the flat input index it was taken from (first maximum wins).
pub fn max_pool_forward<T: Element>(g: &PoolGeom, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = Vec::with_capacity(g.n * g.c * ho * wo);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..g.k {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.k {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        let i = base + ih as usize * g.w + iw as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<T: Element>(input_len: usize, arg: &[usize], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &g) in arg.iter().zip(dy) {
        dx[i] += g;
    }
    dx
}

/// Average pooling; padded positions count toward the divisor.
pub fn avg_pool_forward<T: Element>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let inv = T::one() / T::from_usize(g.k * g.k).unwrap();
    let mut out = Vec::with_capacity(g.n * g.c * ho * wo);
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = T::zero();
                for ki in 0..g.k {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.k {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            acc += x[base + ih as usize * g.w + iw as usize];
                        }
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Element>(g: &PoolGeom, dy: &[T]) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let inv = T::one() / T::from_usize(g.k * g.k).unwrap();
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oh in 0..ho {
            for ow in 0..wo {
                let gv = dy[(plane * ho + oh) * wo + ow] * inv;
                for ki in 0..g.k {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.k {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dx[base + ih as usize * g.w + iw as usize] += gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

//! Batch and layer normalization kernels. Statistics accumulate in `f64`
//! regardless of the element type.

#![allow(clippy::too_many_arguments)]

use crate::tensor::Element;

/// Per-channel batch statistics of an N×C×(spatial) tensor.
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (divides by the element count).
    pub var: Vec<f64>,
    pub count: usize,
}

pub fn batch_stats<T: Element>(x: &[T], n: usize, c: usize, spatial: usize) -> BatchStats {
    let count = n * spatial;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            for &v in &x[(b * c + ch) * spatial..][..spatial] {
                s += v.as_f64();
            }
        }
        let m = s / count as f64;
        let mut ss = 0.0;
        for b in 0..n {
            for &v in &x[(b * c + ch) * spatial..][..spatial] {
                let d = v.as_f64() - m;
                ss += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = ss / count as f64;
    }
    BatchStats { mean, var, count }
}

/// `y = gamma * (x - mean) * invstd + beta`, per channel.
pub fn channel_affine<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    spatial: usize,
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * spatial;
            let (m, is, g, bt) = (mean[ch], invstd[ch], gamma[ch], beta[ch]);
            for (o, &v) in y[off..off + spatial].iter_mut().zip(&x[off..off + spatial]) {
                *o = g * ((v - m) * is) + bt;
            }
        }
    }
    y
}

pub struct AffineGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

/// Backward of training-mode batch normalization (statistics depend on x).
pub fn batch_norm_train_backward<T: Element>(
    x: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    spatial: usize,
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
) -> AffineGrads<T> {
    let count = T::from_usize(n * spatial).unwrap();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (m, is) = (mean[ch], invstd[ch]);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            for (&v, &g) in x[off..off + spatial].iter().zip(&dy[off..off + spatial]) {
                let xhat = (v - m) * is;
                sum_dy += g.as_f64();
                sum_dy_xhat += (g * xhat).as_f64();
            }
        }
        let sum_dy = T::from_f64_lossy(sum_dy);
        let sum_dy_xhat = T::from_f64_lossy(sum_dy_xhat);
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * is / count;
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            for i in off..off + spatial {
                let xhat = (x[i] - m) * is;
                dx[i] = scale * (count * dy[i] - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    AffineGrads { dx, dgamma, dbeta }
}

/// Backward of an affine per-channel normalization with constant statistics
/// (batch norm in eval mode).
pub fn channel_affine_backward<T: Element>(
    x: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    spatial: usize,
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
) -> AffineGrads<T> {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (m, is, g) = (mean[ch], invstd[ch], gamma[ch]);
        let mut sg = 0.0;
        let mut sb = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            for i in off..off + spatial {
                sg += (dy[i] * ((x[i] - m) * is)).as_f64();
                sb += dy[i].as_f64();
                dx[i] = dy[i] * g * is;
            }
        }
        dgamma[ch] = T::from_f64_lossy(sg);
        dbeta[ch] = T::from_f64_lossy(sb);
    }
    AffineGrads { dx, dgamma, dbeta }
}

/// Layer normalization over the middle factor of an `outer × norm × inner`
/// decomposition. Returns the output with per-group mean and inverse std
/// (groups ordered `outer`-major, `inner`-minor).
pub fn layer_norm_forward<T: Element>(
    x: &[T],
    outer: usize,
    norm: usize,
    inner: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(outer * inner);
    let mut invstds = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * norm + j) * inner + i;
            let mut s = 0.0;
            for j in 0..norm {
                s += x[at(j)].as_f64();
            }
            let m = s / norm as f64;
            let mut ss = 0.0;
            for j in 0..norm {
                let d = x[at(j)].as_f64() - m;
                ss += d * d;
            }
            let is = 1.0 / (ss / norm as f64 + eps).sqrt();
            let (mt, ist) = (T::from_f64_lossy(m), T::from_f64_lossy(is));
            for j in 0..norm {
                y[at(j)] = gamma[j] * ((x[at(j)] - mt) * ist) + beta[j];
            }
            means.push(mt);
            invstds.push(ist);
        }
    }
    (y, means, invstds)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Element>(
    x: &[T],
    dy: &[T],
    outer: usize,
    norm: usize,
    inner: usize,
    gamma: &[T],
    means: &[T],
    invstds: &[T],
) -> AffineGrads<T> {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![0.0f64; norm];
    let mut dbeta = vec![0.0f64; norm];
    let m_t = T::from_usize(norm).unwrap();
    for o in 0..outer {
        for i in 0..inner {
            let gidx = o * inner + i;
            let (m, is) = (means[gidx], invstds[gidx]);
            let at = |j: usize| (o * norm + j) * inner + i;
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for j in 0..norm {
                let xh = (x[at(j)] - m) * is;
                let g = dy[at(j)];
                dgamma[j] += (g * xh).as_f64();
                dbeta[j] += g.as_f64();
                let dxh = g * gamma[j];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
            }
            for j in 0..norm {
                let xh = (x[at(j)] - m) * is;
                let dxh = dy[at(j)] * gamma[j];
                dx[at(j)] = is / m_t * (m_t * dxh - sum_dxh - xh * sum_dxh_xh);
            }
        }
    }
    AffineGrads {
        dx,
        dgamma: dgamma.into_iter().map(T::from_f64_lossy).collect(),
        dbeta: dbeta.into_iter().map(T::from_f64_lossy).collect(),
    }
}

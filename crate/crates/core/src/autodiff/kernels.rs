//! Forward and backward kernels on flat row-major buffers.

use crate::tensor::{c, Real};

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`
pub fn matmul_a_bt_acc<T: Real>(g: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
pub fn matmul_at_b_acc<T: Real>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    x * c::<T>(0.5) * (T::one() + (x * c(INV_SQRT_2)).erf())
}

/// `d/dx x·Φ(x) = Φ(x) + x·φ(x)`
#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = c::<T>(0.5) * (T::one() + (x * c(INV_SQRT_2)).erf());
    let pdf = c::<T>(INV_SQRT_2PI) * (-(x * x) * c(0.5)).exp();
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Stable `-[y·ln σ(z) + (1-y)·ln(1-σ(z))]`.
#[inline]
pub fn bce_logit<T: Real>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

/// Row-wise layer normalisation. Returns `(out, xhat, rstd)`.
pub fn layer_norm<T: Real>(x: &[T], gamma: &[T], beta: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (out, xhat, rstd)
}

/// Scaled dot-product attention over `heads` independent heads.
/// Returns `(out[h,nq,dh], probs[h,nq,nk])`.
pub fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    heads: usize,
    nq: usize,
    nk: usize,
    dh: usize,
) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut probs = vec![T::zero(); heads * nq * nk];
    let mut out = vec![T::zero(); heads * nq * dh];
    for h in 0..heads {
        let qh = &q[h * nq * dh..(h + 1) * nq * dh];
        let kh = &k[h * nk * dh..(h + 1) * nk * dh];
        let vh = &v[h * nk * dh..(h + 1) * nk * dh];
        let ph = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        matmul_a_bt_acc(qh, kh, ph, nq, dh, nk);
        for row in ph.chunks_exact_mut(nk) {
            let mut mx = T::neg_infinity();
            for s in row.iter_mut() {
                *s *= scale;
                mx = mx.max(*s);
            }
            let mut z = T::zero();
            for s in row.iter_mut() {
                *s = (*s - mx).exp();
                z += *s;
            }
            let inv = T::one() / z;
            for s in row.iter_mut() {
                *s *= inv;
            }
        }
        matmul_acc(ph, vh, &mut out[h * nq * dh..(h + 1) * nq * dh], nq, nk, dh);
    }
    (out, probs)
}

/// One output coordinate of align-corners-false 2× bilinear resampling:
/// the two source taps and their weights.
#[derive(Clone, Copy, Debug)]
pub struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: T,
    pub w_hi: T,
}

pub fn upsample_taps<T: Real>(n: usize) -> Vec<Tap<T>> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: c(1.0 - frac),
                w_hi: c(frac),
            }
        })
        .collect()
}

pub fn upsample2x<T: Real>(x: &[T], h: usize, w: usize) -> Vec<T> {
    let rt = upsample_taps::<T>(h);
    let ct = upsample_taps::<T>(w);
    let ow = 2 * w;
    let mut out = vec![T::zero(); 4 * h * w];
    for (oi, r) in rt.iter().enumerate() {
        for (oj, cc) in ct.iter().enumerate() {
            let top = x[r.lo * w + cc.lo] * cc.w_lo + x[r.lo * w + cc.hi] * cc.w_hi;
            let bot = x[r.hi * w + cc.lo] * cc.w_lo + x[r.hi * w + cc.hi] * cc.w_hi;
            out[oi * ow + oj] = top * r.w_lo + bot * r.w_hi;
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(g: &[T], h: usize, w: usize, dx: &mut [T]) {
    let rt = upsample_taps::<T>(h);
    let ct = upsample_taps::<T>(w);
    let ow = 2 * w;
    for (oi, r) in rt.iter().enumerate() {
        for (oj, cc) in ct.iter().enumerate() {
            let gv = g[oi * ow + oj];
            let gt = gv * r.w_lo;
            let gb = gv * r.w_hi;
            dx[r.lo * w + cc.lo] += gt * cc.w_lo;
            dx[r.lo * w + cc.hi] += gt * cc.w_hi;
            dx[r.hi * w + cc.lo] += gb * cc.w_lo;
            dx[r.hi * w + cc.hi] += gb * cc.w_hi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_weights_sum_to_one() {
        for t in upsample_taps::<f64>(5) {
            assert!((t.w_lo + t.w_hi - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-6);
        assert!(gelu(-10.0f64).abs() < 1e-6);
        // Φ(1) = 0.841344746...
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}

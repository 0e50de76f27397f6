//! Dense inner loops shared by the forward and backward passes.
//!
//! All reductions run in a fixed order so results are bit-identical across runs.

use crate::scalar::Scalar;

/// `out[m,n] += a[m,k] · b[k,n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (orow, arow) in out.chunks_mut(n.max(1)).zip(a.chunks(k.max(1))).take(m) {
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`.
///
/// `b` is transposed once so the inner loop runs over contiguous rows.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if k == 0 {
        return;
    }
    let mut bt = vec![T::zero(); k * n];
    for (j, brow) in b.chunks(k).enumerate() {
        for (p, &v) in brow.iter().enumerate() {
            bt[p * n + j] = v;
        }
    }
    matmul(a, &bt, m, k, n, out);
}

/// `out[m,n] += a[p,m]ᵀ · b[p,n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], p: usize, m: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    for r in 0..p {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for (orow, &av) in out.chunks_mut(n.max(1)).zip(arow) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with eight fixed accumulation lanes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut lanes = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            lanes[l] += ac[l] * bc[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// `y += alpha · x`.
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += alpha * v;
    }
}

#[inline]
pub fn sq_norm<T: Scalar>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |acc, &v| acc + v * v)
}

/// `(len, cin, cout, kernel, stride)`
pub type ConvDims = (usize, usize, usize, usize, usize);

/// `out[l·s + t, co] += x[l, ci] · w[ci, co, t]`.
pub fn conv_transpose_1d<T: Scalar>(x: &[T], w: &[T], dims: ConvDims, out: &mut [T]) {
    let (len, cin, cout, k, stride) = dims;
    for l in 0..len {
        for ci in 0..cin {
            let xv = x[l * cin + ci];
            for co in 0..cout {
                let wrow = &w[(ci * cout + co) * k..(ci * cout + co + 1) * k];
                for (t, &wv) in wrow.iter().enumerate() {
                    out[(l * stride + t) * cout + co] += xv * wv;
                }
            }
        }
    }
}

pub fn conv_transpose_1d_grad_input<T: Scalar>(g: &[T], w: &[T], dims: ConvDims, gx: &mut [T]) {
    let (len, cin, cout, k, stride) = dims;
    for l in 0..len {
        for ci in 0..cin {
            let mut acc = T::zero();
            for co in 0..cout {
                let wrow = &w[(ci * cout + co) * k..(ci * cout + co + 1) * k];
                for (t, &wv) in wrow.iter().enumerate() {
                    acc += g[(l * stride + t) * cout + co] * wv;
                }
            }
            gx[l * cin + ci] += acc;
        }
    }
}

pub fn conv_transpose_1d_grad_weight<T: Scalar>(g: &[T], x: &[T], dims: ConvDims, gw: &mut [T]) {
    let (len, cin, cout, k, stride) = dims;
    for l in 0..len {
        for ci in 0..cin {
            let xv = x[l * cin + ci];
            for co in 0..cout {
                let wrow = &mut gw[(ci * cout + co) * k..(ci * cout + co + 1) * k];
                for (t, d) in wrow.iter_mut().enumerate() {
                    *d += xv * g[(l * stride + t) * cout + co];
                }
            }
        }
    }
}

#[inline]
fn sinusoid_freq<T: Scalar>(pair: usize, channels: usize) -> T {
    T::of(10000f64.powf(-(2.0 * pair as f64) / channels as f64))
}

/// Fills `row` with interleaved `(sin, cos)` of `p · 10000^(-2k/C)`.
pub fn sinusoidal_row<T: Scalar>(p: T, row: &mut [T]) {
    let c = row.len();
    for (k, pair) in row.chunks_mut(2).enumerate() {
        let theta = p * sinusoid_freq::<T>(k, c);
        pair[0] = theta.sin();
        pair[1] = theta.cos();
    }
}

pub fn sinusoidal_row_grad<T: Scalar>(p: T, g: &[T]) -> T {
    let c = g.len();
    let mut acc = T::zero();
    for (k, pair) in g.chunks(2).enumerate() {
        let f = sinusoid_freq::<T>(k, c);
        let theta = p * f;
        acc += f * (theta.cos() * pair[0] - theta.sin() * pair[1]);
    }
    acc
}

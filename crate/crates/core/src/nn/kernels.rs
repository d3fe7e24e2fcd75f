//! Dense inner loops. Accumulation order is fixed so results are
//! reproducible bit for bit.

use crate::scalar::Real;

/// `y += a * x`
#[inline]
pub(crate) fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
pub(crate) fn add_assign<T: Real>(x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + xi;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); 4];
    let xc = x.chunks_exact(4);
    let yc = y.chunks_exact(4);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        acc[0] = acc[0] + a[0] * b[0];
        acc[1] = acc[1] + a[1] * b[1];
        acc[2] = acc[2] + a[2] * b[2];
        acc[3] = acc[3] + a[3] * b[3];
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail = tail + a * b;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Batched `x W + b` for a dense block laid out as `W (inputs x outputs)` then `b`.
pub(crate) fn dense_forward<T: Real>(x: &[T], n: usize, inputs: usize, outputs: usize, block: &[T]) -> Vec<T> {
    let (w, b) = block.split_at(inputs * outputs);
    let mut out = Vec::with_capacity(n * outputs);
    for s in 0..n {
        out.extend_from_slice(b);
        let row = &mut out[s * outputs..(s + 1) * outputs];
        for (i, &xi) in x[s * inputs..(s + 1) * inputs].iter().enumerate() {
            if xi != T::zero() {
                axpy(xi, &w[i * outputs..(i + 1) * outputs], row);
            }
        }
    }
    out
}

/// Gradient of a dense block given its input and the output delta.
pub(crate) fn dense_param_grad<T: Real>(x: &[T], delta: &[T], n: usize, inputs: usize, outputs: usize) -> Vec<T> {
    let mut g = vec![T::zero(); inputs * outputs + outputs];
    let (gw, gb) = g.split_at_mut(inputs * outputs);
    for s in 0..n {
        let d = &delta[s * outputs..(s + 1) * outputs];
        for (i, &xi) in x[s * inputs..(s + 1) * inputs].iter().enumerate() {
            if xi != T::zero() {
                axpy(xi, d, &mut gw[i * outputs..(i + 1) * outputs]);
            }
        }
        add_assign(d, gb);
    }
    g
}

/// Delta with respect to a dense block's input.
pub(crate) fn dense_input_grad<T: Real>(block: &[T], delta: &[T], n: usize, inputs: usize, outputs: usize) -> Vec<T> {
    let w = &block[..inputs * outputs];
    let mut out = Vec::with_capacity(n * inputs);
    for s in 0..n {
        let d = &delta[s * outputs..(s + 1) * outputs];
        out.extend((0..inputs).map(|i| dot(&w[i * outputs..(i + 1) * outputs], d)));
    }
    out
}

/// Geometry of a valid `k x k` convolution with stride 1.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub side: usize,
}

impl ConvShape {
    pub fn out_side(&self) -> usize {
        self.side - self.k + 1
    }
    pub fn positions(&self) -> usize {
        self.out_side() * self.out_side()
    }
    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
    pub fn input_len(&self) -> usize {
        self.cin * self.side * self.side
    }
}

/// Column matrix stored patch-major: `col[q * P + pos]`.
pub(crate) fn im2col<T: Real>(sh: ConvShape, input: &[T], col: &mut [T]) {
    let (ho, p, s, k) = (sh.out_side(), sh.positions(), sh.side, sh.k);
    for ci in 0..sh.cin {
        for ki in 0..k {
            for kj in 0..k {
                let q = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let src = ci * s * s + (oi + ki) * s + kj;
                    col[q * p + oi * ho..q * p + oi * ho + ho].copy_from_slice(&input[src..src + ho]);
                }
            }
        }
    }
}

pub(crate) fn col2im_add<T: Real>(sh: ConvShape, col: &[T], input_grad: &mut [T]) {
    let (ho, p, s, k) = (sh.out_side(), sh.positions(), sh.side, sh.k);
    for ci in 0..sh.cin {
        for ki in 0..k {
            for kj in 0..k {
                let q = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let dst = ci * s * s + (oi + ki) * s + kj;
                    add_assign(&col[q * p + oi * ho..q * p + oi * ho + ho], &mut input_grad[dst..dst + ho]);
                }
            }
        }
    }
}

/// One sample: `out[co * P + pos] = b[co] + sum_q W[co][q] col[q][pos]`.
pub(crate) fn conv_forward<T: Real>(sh: ConvShape, block: &[T], col: &[T], out: &mut [T]) {
    let (p, q_len) = (sh.positions(), sh.patch());
    let (w, b) = block.split_at(sh.cout * q_len);
    for co in 0..sh.cout {
        let o = &mut out[co * p..(co + 1) * p];
        o.fill(b[co]);
        for q in 0..q_len {
            axpy(w[co * q_len + q], &col[q * p..(q + 1) * p], o);
        }
    }
}

/// Accumulates one sample's contribution to the conv block gradient.
pub(crate) fn conv_param_grad_add<T: Real>(sh: ConvShape, col: &[T], delta: &[T], grad: &mut [T]) {
    let (p, q_len) = (sh.positions(), sh.patch());
    let (gw, gb) = grad.split_at_mut(sh.cout * q_len);
    for co in 0..sh.cout {
        let d = &delta[co * p..(co + 1) * p];
        for q in 0..q_len {
            gw[co * q_len + q] = gw[co * q_len + q] + dot(d, &col[q * p..(q + 1) * p]);
        }
        gb[co] = gb[co] + d.iter().copied().sum::<T>();
    }
}

/// Delta with respect to the column matrix of one sample.
pub(crate) fn conv_col_grad<T: Real>(sh: ConvShape, block: &[T], delta: &[T], col_grad: &mut [T]) {
    let (p, q_len) = (sh.positions(), sh.patch());
    col_grad.fill(T::zero());
    for co in 0..sh.cout {
        let d = &delta[co * p..(co + 1) * p];
        for q in 0..q_len {
            axpy(block[co * q_len + q], d, &mut col_grad[q * p..(q + 1) * p]);
        }
    }
}

/// 2x2 max pooling with stride 2 over `channels x side x side`; records the
/// flat index of each window's (first) maximum.
pub(crate) fn max_pool<T: Real>(channels: usize, side: usize, input: &[T], out: &mut [T], arg: &mut [u32]) {
    let ps = side / 2;
    for c in 0..channels {
        for pi in 0..ps {
            for pj in 0..ps {
                let mut best = c * side * side + 2 * pi * side + 2 * pj;
                for (a, b) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = c * side * side + (2 * pi + a) * side + 2 * pj + b;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let o = c * ps * ps + pi * ps + pj;
                out[o] = input[best];
                arg[o] = best as u32;
            }
        }
    }
}

pub(crate) fn max_pool_backward<T: Real>(delta: &[T], arg: &[u32], input_grad: &mut [T]) {
    input_grad.fill(T::zero());
    for (&d, &a) in delta.iter().zip(arg) {
        input_grad[a as usize] = input_grad[a as usize] + d;
    }
}

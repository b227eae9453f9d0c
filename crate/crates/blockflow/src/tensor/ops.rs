//! Raw f32 kernels shared by the forward and backward passes.

use super::macs;

/// c[m,n] += a[m,k] * b[k,n]
pub fn matmul_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    macs::add((m * k * n) as u64);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += a_ip * brow[j];
            }
        }
    }
}

/// c[m,k] += g[m,n] * b[k,n]^T   (g * b-transposed)
pub fn matmul_nt(g: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, k: usize) {
    macs::add((m * n * k) as u64);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0f32;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            crow[p] += acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * g[m,n]   (a-transposed * g)
pub fn matmul_tn(a: &[f32], g: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    macs::add((m * k * n) as u64);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += a_ip * grow[j];
            }
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// Numerically stable log(1 + exp(x)).
pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-major lane walker: visits every lane along `axis`, calling `f` with
/// a closure that maps a lane-local index to the flat index.
pub fn for_each_lane(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(&dyn Fn(usize) -> usize, usize),
) {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let index = move |j: usize| base + j * inner;
            f(&index, axis_len);
        }
    }
}

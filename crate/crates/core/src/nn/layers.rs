//! Layer kernels with explicit backward passes, all on `C×N×H×W` tensors.

use super::scalar::gemm_ld;
use super::tensor::Tensor;
use super::{gemm, Scalar};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Unfold the 3×3 neighbourhoods (zero padded) of batch element `b` into a
/// `(C·9)×(H·W)` matrix.
fn im2col<T: Scalar>(x: &Tensor<T>, b: usize, cols: &mut [T]) {
    let (c, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    cols.fill(T::zero());
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &x.data[x.idx(ci, b, sy as usize, 0)..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulated into batch element `b` of `dx`.
fn col2im<T: Scalar>(cols: &[T], dx: &mut Tensor<T>, b: usize) {
    let (c, h, w) = (dx.c, dx.h, dx.w);
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let start = dx.idx(ci, b, sy as usize, 0);
                    let dst = &mut dx.data[start..][..w];
                    let src = &row[y * w..][..w];
                    let (d, s) = match kx {
                        0 => (&mut dst[..w - 1], &src[1..]),
                        1 => (&mut dst[..], src),
                        _ => (&mut dst[1..], &src[..w - 1]),
                    };
                    for (a, &v) in d.iter_mut().zip(s) {
                        *a = *a + v;
                    }
                }
            }
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// `c[i][j] (+)= a_i · b_j` for row-major `a` (`m` rows, stride `lda`) and
/// `b` (`n` rows, stride `ldb`), each row `len` long. Weight gradients
/// contract over whole activation planes, a shape general-purpose GEMM
/// handles poorly.
#[allow(clippy::too_many_arguments)]
fn gemm_abt<T: Scalar>(
    m: usize,
    n: usize,
    len: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    accumulate: bool,
) {
    for i in 0..m {
        let ai = &a[i * lda..][..len];
        for j in 0..n {
            let v = dot(ai, &b[j * ldb..][..len]);
            let slot = &mut c[i * n + j];
            *slot = if accumulate { *slot + v } else { v };
        }
    }
}

/// 3×3 same-padded convolution without bias. `w` is `cout×cin×3×3`.
pub(crate) fn conv3x3_forward<T: Scalar>(x: &Tensor<T>, w: &[T], cout: usize) -> Tensor<T> {
    let (k, hw, p) = (x.c * 9, x.h * x.w, x.plane());
    let mut cols = vec![T::zero(); k * hw];
    let mut y = Tensor::zeros(cout, x.n, x.h, x.w);
    for b in 0..x.n {
        im2col(x, b, &mut cols);
        gemm_ld(
            cout,
            hw,
            k,
            (w, k, false),
            (&cols, hw, false),
            (&mut y.data[b * hw..], p),
            T::zero(),
        );
    }
    y
}

/// Writes the kernel gradient into `dw`; returns the input gradient when
/// requested.
pub(crate) fn conv3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    dy: &Tensor<T>,
    dw: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (cout, k, hw, p) = (dy.c, x.c * 9, x.h * x.w, x.plane());
    let mut cols = vec![T::zero(); k * hw];
    let mut dx = need_dx.then(|| Tensor::zeros(x.c, x.n, x.h, x.w));
    for b in 0..x.n {
        im2col(x, b, &mut cols);
        gemm_abt(cout, k, hw, &dy.data[b * hw..], p, &cols, hw, dw, b > 0);
        if let Some(dx) = dx.as_mut() {
            gemm_ld(
                k,
                hw,
                cout,
                (w, k, true),
                (&dy.data[b * hw..], p, false),
                (&mut cols, hw),
                T::zero(),
            );
            col2im(&cols, dx, b);
        }
    }
    dx
}

/// Saved state of a training-mode normalization.
#[derive(Debug, Clone)]
pub(crate) struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased (divide by `M`) batch variance.
    pub var: Vec<f64>,
    pub count: usize,
    /// Offsets of the running statistics this layer feeds.
    pub running: (usize, usize),
}

/// Per-channel batch normalization with batch statistics. `gb` holds the
/// scales followed by the shifts.
pub(crate) fn norm_train_forward<T: Scalar>(
    mut z: Tensor<T>,
    gb: &[T],
    running: (usize, usize),
) -> (Tensor<T>, NormCache<T>) {
    let c = z.c;
    let m = z.plane();
    let mut y = Tensor::zeros(c, z.n, z.h, z.w);
    let (mut means, mut vars, mut inv) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    for ch in 0..c {
        let plane = z.channel_mut(ch);
        let mean = plane.iter().map(|v| v.f64()).sum::<f64>() / m as f64;
        let var = plane.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / m as f64;
        let inv_std = 1.0 / (var + NORM_EPS).sqrt();
        let (tm, ti) = (T::of(mean), T::of(inv_std));
        for v in plane.iter_mut() {
            *v = (*v - tm) * ti;
        }
        let (g, b) = (gb[ch], gb[c + ch]);
        for (o, &xh) in y.channel_mut(ch).iter_mut().zip(z.channel(ch)) {
            *o = g * xh + b;
        }
        means[ch] = mean;
        vars[ch] = var;
        inv[ch] = inv_std;
    }
    (
        y,
        NormCache {
            xhat: z,
            inv_std: inv,
            mean: means,
            var: vars,
            count: m,
            running,
        },
    )
}

/// Normalization with running statistics, in place.
pub(crate) fn norm_eval_forward<T: Scalar>(z: &mut Tensor<T>, gb: &[T], rmean: &[T], rvar: &[T]) {
    let c = z.c;
    for ch in 0..c {
        let inv = T::one() / (rvar[ch] + T::of(NORM_EPS)).sqrt();
        let scale = gb[ch] * inv;
        let shift = gb[c + ch] - rmean[ch] * scale;
        for v in z.channel_mut(ch) {
            *v = *v * scale + shift;
        }
    }
}

/// Returns the pre-normalization gradient; writes scale and shift
/// gradients into `dgb` (scales then shifts).
pub(crate) fn norm_backward<T: Scalar>(
    mut dy: Tensor<T>,
    cache: &NormCache<T>,
    gb: &[T],
    dgb: &mut [T],
) -> Tensor<T> {
    let c = dy.c;
    let m = cache.count as f64;
    for ch in 0..c {
        let xh = cache.xhat.channel(ch);
        let d = dy.channel_mut(ch);
        let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
        for (&g, &x) in d.iter().zip(xh) {
            sum_dy += g.f64();
            sum_dy_xh += g.f64() * x.f64();
        }
        dgb[ch] = T::of(sum_dy_xh);
        dgb[c + ch] = T::of(sum_dy);
        let k = gb[ch].f64() * cache.inv_std[ch] / m;
        let (tk, tm, tsum, tsumx) = (T::of(k), T::of(m), T::of(sum_dy), T::of(sum_dy_xh));
        for (g, &x) in d.iter_mut().zip(xh) {
            *g = tk * (tm * *g - tsum - x * tsumx);
        }
    }
    dy
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Mask `dy` by the positive part of the forward output.
pub(crate) fn relu_backward<T: Scalar>(dy: &mut Tensor<T>, out: &Tensor<T>) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 stride-2 max pooling; also returns the winning offset (0..4) of each
/// window, first maximum on ties.
pub(crate) fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.c, x.n, oh, ow);
    let mut arg = vec![0u8; y.data.len()];
    let mut o = 0;
    for c in 0..x.c {
        for b in 0..x.n {
            for i in 0..oh {
                let r0 = x.idx(c, b, 2 * i, 0);
                let r1 = r0 + x.w;
                for j in 0..ow {
                    let cand = [
                        x.data[r0 + 2 * j],
                        x.data[r0 + 2 * j + 1],
                        x.data[r1 + 2 * j],
                        x.data[r1 + 2 * j + 1],
                    ];
                    let mut best = 0;
                    for k in 1..4 {
                        if cand[k] > cand[best] {
                            best = k;
                        }
                    }
                    y.data[o] = cand[best];
                    arg[o] = best as u8;
                    o += 1;
                }
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward<T: Scalar>(
    dy: &Tensor<T>,
    arg: &[u8],
    h: usize,
    w: usize,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.c, dy.n, h, w);
    let mut o = 0;
    for c in 0..dy.c {
        for b in 0..dy.n {
            for i in 0..dy.h {
                for j in 0..dy.w {
                    let a = arg[o] as usize;
                    let idx = dx.idx(c, b, 2 * i + a / 2, 2 * j + a % 2);
                    dx.data[idx] = dy.data[o];
                    o += 1;
                }
            }
        }
    }
    dx
}

/// 2×2 stride-2 transposed convolution. `w` is `cin×cout×2×2`, `b` is `cout`.
pub(crate) fn upconv_forward<T: Scalar>(x: &Tensor<T>, w: &[T], b: &[T], cout: usize) -> Tensor<T> {
    let p = x.plane();
    let mut cols = vec![T::zero(); cout * 4 * p];
    gemm(
        cout * 4,
        p,
        x.c,
        w,
        true,
        &x.data,
        false,
        &mut cols,
        T::zero(),
    );
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(cout, x.n, oh, ow);
    for co in 0..cout {
        for k in 0..4 {
            let (a, bb) = (k / 2, k % 2);
            let row = &cols[(co * 4 + k) * p..][..p];
            for n in 0..x.n {
                for i in 0..x.h {
                    let src = &row[(n * x.h + i) * x.w..][..x.w];
                    let base = y.idx(co, n, 2 * i + a, bb);
                    for (j, &v) in src.iter().enumerate() {
                        y.data[base + 2 * j] = v + b[co];
                    }
                }
            }
        }
    }
    y
}

/// Writes kernel and bias gradients; returns the input gradient.
pub(crate) fn upconv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    dy: &Tensor<T>,
    dw: &mut [T],
    db: &mut [T],
) -> Tensor<T> {
    let cout = dy.c;
    let p = x.plane();
    let mut cols = vec![T::zero(); cout * 4 * p];
    for co in 0..cout {
        for k in 0..4 {
            let (a, bb) = (k / 2, k % 2);
            let row = &mut cols[(co * 4 + k) * p..][..p];
            for n in 0..x.n {
                for i in 0..x.h {
                    let dst = &mut row[(n * x.h + i) * x.w..][..x.w];
                    let base = dy.idx(co, n, 2 * i + a, bb);
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = dy.data[base + 2 * j];
                    }
                }
            }
        }
        db[co] = T::of(dy.channel(co).iter().map(|v| v.f64()).sum());
    }
    gemm_abt(x.c, cout * 4, p, &x.data, p, &cols, p, dw, false);
    let mut dx = Tensor::zeros(x.c, x.n, x.h, x.w);
    gemm(
        x.c,
        p,
        cout * 4,
        w,
        false,
        &cols,
        false,
        &mut dx.data,
        T::zero(),
    );
    dx
}

/// 1×1 convolution with bias. `w` is `cout×cin`.
pub(crate) fn pointwise_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    b: &[T],
    cout: usize,
) -> Tensor<T> {
    let mut y = Tensor::zeros(cout, x.n, x.h, x.w);
    let p = x.plane();
    gemm(
        cout,
        p,
        x.c,
        w,
        false,
        &x.data,
        false,
        &mut y.data,
        T::zero(),
    );
    for (co, &bias) in b.iter().enumerate().take(cout) {
        for v in y.channel_mut(co) {
            *v = *v + bias;
        }
    }
    y
}

pub(crate) fn pointwise_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    dy: &Tensor<T>,
    dw: &mut [T],
    db: &mut [T],
) -> Tensor<T> {
    let (cout, p) = (dy.c, x.plane());
    gemm_abt(cout, x.c, p, &dy.data, p, &x.data, p, dw, false);
    for (co, d) in db.iter_mut().enumerate().take(cout) {
        *d = T::of(dy.channel(co).iter().map(|v| v.f64()).sum());
    }
    let mut dx = Tensor::zeros(x.c, x.n, x.h, x.w);
    gemm(
        x.c,
        p,
        cout,
        w,
        true,
        &dy.data,
        false,
        &mut dx.data,
        T::zero(),
    );
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(c: usize, n: usize, h: usize, w: usize, k: f64) -> Tensor<f64> {
        let mut t = Tensor::zeros(c, n, h, w);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = ((i as f64 + 1.0) * k).sin();
        }
        t
    }

    /// Direct 3×3 convolution by definition.
    fn conv_naive(x: &Tensor<f64>, w: &[f64], cout: usize) -> Tensor<f64> {
        let mut y = Tensor::zeros(cout, x.n, x.h, x.w);
        for co in 0..cout {
            for b in 0..x.n {
                for i in 0..x.h as isize {
                    for j in 0..x.w as isize {
                        let mut acc = 0.0;
                        for ci in 0..x.c {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (yy, xx) = (i + ky - 1, j + kx - 1);
                                    if yy < 0 || xx < 0 || yy >= x.h as isize || xx >= x.w as isize
                                    {
                                        continue;
                                    }
                                    acc += w[((co * x.c + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * x.data[x.idx(ci, b, yy as usize, xx as usize)];
                                }
                            }
                        }
                        let o = y.idx(co, b, i as usize, j as usize);
                        y.data[o] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_definition() {
        let x = seq(2, 2, 5, 6, 0.3);
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| (i as f64 * 0.7).cos()).collect();
        let fast = conv3x3_forward(&x, &w, 3);
        let slow = conv_naive(&x, &w, 3);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let x = seq(2, 2, 4, 5, 0.21);
        let mut back = Tensor::zeros(2, 2, 4, 5);
        let mut lhs = 0.0;
        for b in 0..2 {
            let mut cols = vec![0.0; 2 * 9 * 20];
            im2col(&x, b, &mut cols);
            let c: Vec<f64> = (0..cols.len())
                .map(|i| ((i + 7 * b) as f64 * 0.13).cos())
                .collect();
            lhs += cols.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
            col2im(&c, &mut back, b);
        }
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let mut x = Tensor::<f64>::zeros(1, 1, 2, 2);
        x.data = vec![0.1, 0.9, 0.3, 0.2];
        let (y, arg) = maxpool_forward(&x);
        assert_eq!(y.data, vec![0.9]);
        let mut dy = Tensor::zeros(1, 1, 1, 1);
        dy.data[0] = 2.0;
        let dx = maxpool_backward(&dy, &arg, 2, 2);
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn upconv_places_each_tap() {
        let mut x = Tensor::<f64>::zeros(1, 1, 1, 1);
        x.data[0] = 2.0;
        let w = [1.0, 2.0, 3.0, 4.0];
        let y = upconv_forward(&x, &w, &[0.5], 1);
        assert_eq!(y.data, vec![2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn normalized_output_has_zero_mean_unit_variance() {
        let z = seq(3, 2, 4, 4, 0.9);
        let gb = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let (y, cache) = norm_train_forward(z, &gb, (0, 0));
        for ch in 0..3 {
            let p = y.channel(ch);
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var * (cache.var[ch] + NORM_EPS) / cache.var[ch] - 1.0).abs() < 1e-9);
        }
    }
}

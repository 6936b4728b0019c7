//! Forward and backward kernels shared by the tape and by tape-free callers.
//!
//! All spatial ops use "same" geometry: an odd `k×k` kernel with `k/2`
//! padding keeps `H×W`. Cross-correlation convention (kernel not flipped).
//! Accumulation happens in `f64`.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Border handling for spatial convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Padding {
    Zero,
    #[default]
    Replicate,
}

struct Padded {
    data: Vec<f64>,
    hp: usize,
    wp: usize,
}

impl Padded {
    fn new<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, p: usize, mode: Padding) -> Self {
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let mut data = vec![0.0; c * hp * wp];
        for ch in 0..c {
            let src = &x[ch * h * w..(ch + 1) * h * w];
            let dst = &mut data[ch * hp * wp..(ch + 1) * hp * wp];
            for yp in 0..hp {
                let y = match mode {
                    Padding::Zero if yp < p || yp >= h + p => continue,
                    _ => yp.saturating_sub(p).min(h - 1),
                };
                for xp in 0..wp {
                    let xx = match mode {
                        Padding::Zero if xp < p || xp >= w + p => continue,
                        _ => xp.saturating_sub(p).min(w - 1),
                    };
                    dst[yp * wp + xp] = src[y * w + xx].widen();
                }
            }
        }
        Self { data, hp, wp }
    }

    #[inline]
    fn row(&self, c: usize, y: usize, x0: usize, len: usize) -> &[f64] {
        let start = c * self.hp * self.wp + y * self.wp + x0;
        &self.data[start..start + len]
    }
}

/// Sums a padded-geometry gradient back onto the unpadded input.
fn fold_padding(gp: &[f64], c: usize, h: usize, w: usize, p: usize, mode: Padding) -> Vec<f64> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &gp[ch * hp * wp..(ch + 1) * hp * wp];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for yp in 0..hp {
            let inside_y = yp >= p && yp < h + p;
            if mode == Padding::Zero && !inside_y {
                continue;
            }
            let y = yp.saturating_sub(p).min(h - 1);
            for xp in 0..wp {
                let inside_x = xp >= p && xp < w + p;
                if mode == Padding::Zero && !inside_x {
                    continue;
                }
                let x = xp.saturating_sub(p).min(w - 1);
                dst[y * w + x] += src[yp * wp + xp];
            }
        }
    }
    out
}

#[inline]
fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Eight interleaved partial sums so the loop vectorizes; the summation
/// order is fixed, so results do not depend on the target features.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn widen<T: Scalar>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.widen()).collect()
}

fn narrow<T: Scalar>(shape: &[usize], x: Vec<f64>) -> Tensor<T> {
    Tensor::new(shape.to_vec(), x.into_iter().map(T::cast).collect()).expect("kernel output shape")
}

/// `c ← alpha·A·B + beta·c` on row-major `f64` buffers. `A` is `m×k`
/// (stored `k×m` when `a_t`), `B` is `k×n` (stored `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer sizes");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe in-bounds views of `a`, `b` and `c`
    // (checked by the assert above) and `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn odd_square(op: &'static str, kh: usize, kw: usize) -> Result<usize> {
    if kh != kw || kh % 2 == 0 {
        return Err(TensorError::shape(op, format!("kernel must be odd and square, got {kh}x{kw}")));
    }
    Ok(kh)
}

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, h, wd) = x.dims3("conv2d")?;
    let [o, ci, kh, kw] = w.shape()[..] else {
        return Err(TensorError::shape("conv2d", format!("weight must be rank 4, got {:?}", w.shape())));
    };
    if ci != c {
        return Err(TensorError::shape(
            "conv2d",
            format!("input has {c} channels, weight expects {ci}"),
        ));
    }
    let k = odd_square("conv2d", kh, kw)?;
    Ok((o, c, h, wd, k))
}

/// Unfolds the padded input into `(C·k·k)×(H·W)` columns; row
/// `(c·k + ky)·k + kx` holds the input shifted by `(ky, kx)`.
fn im2col(xp: &Padded, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ic in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ic * k + ky) * k + kx;
                for y in 0..h {
                    cols[r * hw + y * w..r * hw + (y + 1) * w].copy_from_slice(xp.row(ic, y + ky, kx, w));
                }
            }
        }
    }
    cols
}

/// `input: C×H×W`, `weight: O×C×k×k` → `O×H×W`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, pad: Padding) -> Result<Tensor<T>> {
    let (o, c, h, wd, k) = conv_dims(x, w)?;
    let xp = Padded::new(x.data(), c, h, wd, k / 2, pad);
    let cols = im2col(&xp, c, h, wd, k);
    let mut out = vec![0.0; o * h * wd];
    gemm(o, c * k * k, h * wd, 1.0, &widen(w.data()), false, &cols, false, 0.0, &mut out);
    Ok(narrow(&[o, h, wd], out))
}

/// Gradients of [`conv2d`] w.r.t. input and weight.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pad: Padding,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (o, c, h, wd, k) = conv_dims(x, w)?;
    if grad_out.shape() != [o, h, wd] {
        return Err(TensorError::shape("conv2d_backward", format!("grad {:?}", grad_out.shape())));
    }
    let p = k / 2;
    let (hp, wp, hw, ckk) = (h + 2 * p, wd + 2 * p, h * wd, c * k * k);
    let go = widen(grad_out.data());

    let gx = need_input.then(|| {
        let mut gcols = vec![0.0; ckk * hw];
        gemm(ckk, o, hw, 1.0, &widen(w.data()), true, &go, false, 0.0, &mut gcols);
        let mut gp = vec![0.0; c * hp * wp];
        for ic in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ic * k + ky) * k + kx;
                    for y in 0..h {
                        let start = ic * hp * wp + (y + ky) * wp + kx;
                        for (d, s) in gp[start..start + wd].iter_mut().zip(&gcols[r * hw + y * wd..r * hw + (y + 1) * wd]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        narrow(&[c, h, wd], fold_padding(&gp, c, h, wd, p, pad))
    });

    let gw = need_weight.then(|| {
        let xp = Padded::new(x.data(), c, h, wd, p, pad);
        let cols = im2col(&xp, c, h, wd, k);
        let mut gw = vec![0.0; o * ckk];
        gemm(o, hw, ckk, 1.0, &go, false, &cols, true, 0.0, &mut gw);
        narrow(w.shape(), gw)
    });
    Ok((gx, gw))
}

fn depthwise_dims<T: Scalar>(x: &Tensor<T>, kern: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (c, h, w) = x.dims3("depthwise_conv2d")?;
    let [kc, kh, kw] = kern.shape()[..] else {
        return Err(TensorError::shape(
            "depthwise_conv2d",
            format!("kernel must be rank 3, got {:?}", kern.shape()),
        ));
    };
    if kc != c {
        return Err(TensorError::shape(
            "depthwise_conv2d",
            format!("input has {c} channels, kernel has {kc}"),
        ));
    }
    let k = odd_square("depthwise_conv2d", kh, kw)?;
    Ok((c, h, w, k))
}

/// `input: C×H×W`, `kernel: C×k×k` → `C×H×W`, no cross-channel mixing.
pub fn depthwise_conv2d<T: Scalar>(x: &Tensor<T>, kern: &Tensor<T>, pad: Padding) -> Result<Tensor<T>> {
    let (c, h, w, k) = depthwise_dims(x, kern)?;
    let p = k / 2;
    let xp = Padded::new(x.data(), c, h, w, p, pad);
    let kt = kern.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let acc = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let kv = kt[(ch * k + ky) * k + kx].widen();
                for y in 0..h {
                    axpy(&mut acc[y * w..(y + 1) * w], kv, xp.row(ch, y + ky, kx, w));
                }
            }
        }
    }
    Ok(narrow(&[c, h, w], out))
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kern: &Tensor<T>,
    pad: Padding,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (c, h, w, k) = depthwise_dims(x, kern)?;
    let p = k / 2;
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let go = widen(grad_out.data());
    let kt = kern.data();

    let gx = need_input.then(|| {
        let mut gp = vec![0.0; c * hp * wp];
        for ch in 0..c {
            let g = &go[ch * h * w..(ch + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let kv = kt[(ch * k + ky) * k + kx].widen();
                    for y in 0..h {
                        let start = ch * hp * wp + (y + ky) * wp + kx;
                        axpy(&mut gp[start..start + w], kv, &g[y * w..(y + 1) * w]);
                    }
                }
            }
        }
        narrow(&[c, h, w], fold_padding(&gp, c, h, w, p, pad))
    });

    let gk = need_kernel.then(|| {
        let xp = Padded::new(x.data(), c, h, w, p, pad);
        let mut gk = vec![0.0; c * k * k];
        for ch in 0..c {
            let g = &go[ch * h * w..(ch + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    gk[(ch * k + ky) * k + kx] =
                        (0..h).map(|y| dot(&g[y * w..(y + 1) * w], xp.row(ch, y + ky, kx, w))).sum();
                }
            }
        }
        narrow(kern.shape(), gk)
    });
    Ok((gx, gk))
}

/// Start offsets of an adaptive partition of `n` cells into `parts` groups:
/// group `i` covers `⌊i·n/parts⌋ .. ⌊(i+1)·n/parts⌋ - 1`.
pub fn partition(n: usize, parts: usize) -> Vec<usize> {
    (0..=parts).map(|i| i * n / parts).collect()
}

/// `C×H×W` → `C×oh×ow`, each output cell the mean of its partition block.
pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("adaptive_avg_pool")?;
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(TensorError::shape(
            "adaptive_avg_pool",
            format!("output {oh}x{ow} must be within input {h}x{w}"),
        ));
    }
    let (rows, cols) = (partition(h, oh), partition(w, ow));
    let xd = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for y in rows[i]..rows[i + 1] {
                    for xx in cols[j]..cols[j + 1] {
                        s += xd[(ch * h + y) * w + xx].widen();
                    }
                }
                let n = ((rows[i + 1] - rows[i]) * (cols[j + 1] - cols[j])) as f64;
                out[(ch * oh + i) * ow + j] = s / n;
            }
        }
    }
    Ok(narrow(&[c, oh, ow], out))
}

pub fn adaptive_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (c, oh, ow) = grad_out.dims3("adaptive_avg_pool")?;
    let (rows, cols) = (partition(h, oh), partition(w, ow));
    let g = grad_out.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let n = ((rows[i + 1] - rows[i]) * (cols[j + 1] - cols[j])) as f64;
                let v = g[(ch * oh + i) * ow + j].widen() / n;
                for y in rows[i]..rows[i + 1] {
                    for xx in cols[j]..cols[j + 1] {
                        out[(ch * h + y) * w + xx] = v;
                    }
                }
            }
        }
    }
    Ok(narrow(&[c, h, w], out))
}

/// Inverse of the adaptive partition: output pixel `(y, x)` copies the cell
/// of `C×h×w` whose block contains it.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("upsample_nearest")?;
    if h > oh || w > ow {
        return Err(TensorError::shape(
            "upsample_nearest",
            format!("target {oh}x{ow} smaller than input {h}x{w}"),
        ));
    }
    let (rmap, cmap) = (cell_of(oh, h), cell_of(ow, w));
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for &i in &rmap {
            for &j in &cmap {
                out.push(xd[(ch * h + i) * w + j]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn upsample_nearest_backward<T: Scalar>(grad_out: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (c, oh, ow) = grad_out.dims3("upsample_nearest")?;
    let (rmap, cmap) = (cell_of(oh, h), cell_of(ow, w));
    let g = grad_out.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for (y, &i) in rmap.iter().enumerate() {
            for (xx, &j) in cmap.iter().enumerate() {
                out[(ch * h + i) * w + j] += g[(ch * oh + y) * ow + xx].widen();
            }
        }
    }
    Ok(narrow(&[c, h, w], out))
}

fn cell_of(n: usize, parts: usize) -> Vec<usize> {
    let starts = partition(n, parts);
    let mut map = Vec::with_capacity(n);
    for i in 0..parts {
        map.extend(std::iter::repeat(i).take(starts[i + 1] - starts[i]));
    }
    map
}

/// `a: N×K`, `b: K×M` → `N×M`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = a.dims2("matmul")?;
    let (k2, m) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::shape("matmul", format!("{n}x{k} @ {k2}x{m}")));
    }
    let mut out = vec![0.0; n * m];
    gemm(n, k, m, 1.0, &widen(a.data()), false, &widen(b.data()), false, 0.0, &mut out);
    Ok(narrow(&[n, m], out))
}

pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, k) = a.dims2("matmul")?;
    let (_, m) = b.dims2("matmul")?;
    if grad_out.shape() != [n, m] {
        return Err(TensorError::shape("matmul_backward", format!("grad {:?}", grad_out.shape())));
    }
    let go = widen(grad_out.data());
    let ga = need_a.then(|| {
        let mut ga = vec![0.0; n * k];
        gemm(n, m, k, 1.0, &go, false, &widen(b.data()), true, 0.0, &mut ga);
        narrow(&[n, k], ga)
    });
    let gb = need_b.then(|| {
        let mut gb = vec![0.0; k * m];
        gemm(k, n, m, 1.0, &widen(a.data()), true, &go, false, 0.0, &mut gb);
        narrow(&[k, m], gb)
    });
    Ok((ga, gb))
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2("transpose")?;
    let d = a.data();
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(d[i * c + j]);
        }
    }
    Tensor::new(vec![c, r], out)
}

fn attention_dims<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (n, d) = q.dims2("attention")?;
    let (m, dk) = k.dims2("attention")?;
    let (mv, dv) = v.dims2("attention")?;
    if d != dk || m != mv {
        return Err(TensorError::shape(
            "attention",
            format!("Q {n}x{d}, K {m}x{dk}, V {mv}x{dv}"),
        ));
    }
    Ok((n, m, d, dv))
}

/// `softmax(Q·Kᵀ/√d)·V`. Returns the output and the row-stochastic weights.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, m, d, dv) = attention_dims(q, k, v)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![0.0; n * m];
    gemm(n, d, m, scale, &widen(q.data()), false, &widen(k.data()), true, 0.0, &mut probs);
    for row in probs.chunks_mut(m.max(1)) {
        softmax_in_place(row);
    }
    let mut out = vec![0.0; n * dv];
    gemm(n, m, dv, 1.0, &probs, false, &widen(v.data()), false, 0.0, &mut out);
    Ok((narrow(&[n, dv], out), narrow(&[n, m], probs)))
}

/// Row softmax with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for r in row.iter_mut() {
        *r = (*r - max).exp();
        z += *r;
    }
    let inv = 1.0 / z;
    for r in row.iter_mut() {
        *r *= inv;
    }
}

/// Gradients of [`attention`] w.r.t. Q, K and V given the saved weights.
pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, m, d, dv) = attention_dims(q, k, v)?;
    if probs.shape() != [n, m] || grad_out.shape() != [n, dv] {
        return Err(TensorError::shape(
            "attention_backward",
            format!("probs {:?}, grad {:?}", probs.shape(), grad_out.shape()),
        ));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let go = widen(grad_out.data());
    let p = widen(probs.data());
    let mut gv = vec![0.0; m * dv];
    gemm(m, n, dv, 1.0, &p, true, &go, false, 0.0, &mut gv);
    // dp: gradient w.r.t. the weights, then w.r.t. the scaled logits
    let mut dp = vec![0.0; n * m];
    gemm(n, dv, m, 1.0, &go, false, &widen(v.data()), true, 0.0, &mut dp);
    for (g, pr) in dp.chunks_mut(m.max(1)).zip(p.chunks(m.max(1))) {
        let inner = dot(pr, g);
        for (gj, &pj) in g.iter_mut().zip(pr) {
            *gj = pj * (*gj - inner) * scale;
        }
    }
    let mut gq = vec![0.0; n * d];
    gemm(n, m, d, 1.0, &dp, false, &widen(k.data()), false, 0.0, &mut gq);
    let mut gk = vec![0.0; m * d];
    gemm(m, n, d, 1.0, &dp, true, &widen(q.data()), false, 0.0, &mut gk);
    Ok((narrow(&[n, d], gq), narrow(&[m, d], gk), narrow(&[m, dv], gv)))
}

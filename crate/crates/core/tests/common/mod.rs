//! Reference implementations and generators shared by the integration
//! tests. The references are plain loops written without the library.
#![allow(dead_code)]

use picat_core::image::SrgbImage;
use rand::Rng;

pub fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn sample(x: &[f64], h: usize, w: usize, c: usize, y: isize, xx: isize, replicate: bool) -> f64 {
    let inside = y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w;
    if !inside && !replicate {
        return 0.0;
    }
    x[c * h * w + clamp_idx(y, h) * w + clamp_idx(xx, w)]
}

/// Cross-correlation, `wt` laid out `o×c×k×k`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], o: usize, k: usize, replicate: bool) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let v = sample(x, h, w, ic, y as isize + ky as isize - p, xx as isize + kx as isize - p, replicate);
                            s += wt[((oc * c + ic) * k + ky) * k + kx] * v;
                        }
                    }
                }
                out[(oc * h + y) * w + xx] = s;
            }
        }
    }
    out
}

pub fn depthwise_ref(x: &[f64], c: usize, h: usize, w: usize, kern: &[f64], k: usize, replicate: bool) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let v = sample(x, h, w, ch, y as isize + ky as isize - p, xx as isize + kx as isize - p, replicate);
                        s += kern[(ch * k + ky) * k + kx] * v;
                    }
                }
                out[(ch * h + y) * w + xx] = s;
            }
        }
    }
    out
}

/// `softmax(QKᵀ/√d)V` with an explicit exp and normalization.
pub fn attention_ref(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, d: usize, dv: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let logits: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for t in 0..dv {
            out[i * dv + t] = (0..m).map(|j| e[j] / z * v[j * dv + t]).sum();
        }
    }
    out
}

/// Each of `planes` (3 ratio maps, `h×w` each) correlated with each kernel
/// under replicate padding; channel order kernel-major.
pub fn kernel_features_ref(planes: &[f64], h: usize, w: usize, kernels: &[(usize, Vec<f64>)]) -> Vec<f64> {
    let mut out = Vec::new();
    for (k, kern) in kernels {
        let p = (*k / 2) as isize;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for ky in 0..*k {
                        for kx in 0..*k {
                            let yy = clamp_idx(y as isize + ky as isize - p, h);
                            let xx = clamp_idx(x as isize + kx as isize - p, w);
                            s += kern[ky * k + kx] * planes[c * h * w + yy * w + xx];
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

pub fn random_image<R: Rng>(h: usize, w: usize, lo: f64, hi: f64, rng: &mut R) -> SrgbImage<f64> {
    SrgbImage::from_fn(h, w, |_, _| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)])
}

/// Smooth positive field: a random low-frequency cosine mix in `[lo, hi]`.
pub fn smooth_field<R: Rng>(h: usize, w: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    let terms: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.0..2.0),
                rng.gen_range(0.0..2.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.2..1.0),
            )
        })
        .collect();
    let norm: f64 = terms.iter().map(|t| t.3).sum();
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            let s: f64 = terms.iter().map(|(fy, fx, ph, a)| a * (std::f64::consts::PI * (fy * y + fx * x) + ph).cos()).sum();
            lo + (hi - lo) * 0.5 * (1.0 + s / norm)
        })
        .collect()
}

/// `img` with pixel `(y,x)` scaled by `field[y*w+x]` in every channel.
pub fn illuminate(img: &SrgbImage<f64>, field: &[f64]) -> SrgbImage<f64> {
    let w = img.width();
    SrgbImage::from_fn(img.height(), w, |y, x| img.pixel(y, x).map(|v| v * field[y * w + x]))
}

pub fn gain(img: &SrgbImage<f64>, g: [f64; 3]) -> SrgbImage<f64> {
    SrgbImage::from_fn(img.height(), img.width(), |y, x| {
        let p = img.pixel(y, x);
        [p[0] * g[0], p[1] * g[1], p[2] * g[2]]
    })
}

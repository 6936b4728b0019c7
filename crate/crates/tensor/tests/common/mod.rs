//! Nested-loop reference implementations, written independently of the
//! kernels they check.
#![allow(dead_code)]

pub fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Sample `x[c][y][x]` with zero or replicate borders.
pub fn sample(x: &[f64], h: usize, w: usize, c: usize, y: isize, xx: isize, replicate: bool) -> f64 {
    let inside = y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w;
    if !inside && !replicate {
        return 0.0;
    }
    x[c * h * w + clamp_idx(y, h) * w + clamp_idx(xx, w)]
}

pub fn conv2d_ref(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    o: usize,
    k: usize,
    replicate: bool,
) -> Vec<f64> {
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

pub fn attention_ref(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, d: usize, dv: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let logits: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let e: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
        let z: f64 = e.iter().sum();
        for t in 0..dv {
            out[i * dv + t] = (0..m).map(|j| e[j] / z * v[j * dv + t]).sum();
        }
    }
    out
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

//! PSNR and SSIM.

use picat_tensor::Scalar;

use crate::error::{Error, Result};
use crate::image::SrgbImage;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn check_dims<T: Scalar>(a: &SrgbImage<T>, b: &SrgbImage<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &SrgbImage<T>, b: &SrgbImage<T>) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.widen() - y.widen()).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10·log10(1/MSE)` with peak 1.0, capped at 100 dB once MSE < 1e-10.
pub fn psnr<T: Scalar>(a: &SrgbImage<T>, b: &SrgbImage<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        -10.0 * mse.log10()
    }
}

fn luminance<T: Scalar>(img: &SrgbImage<T>) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| (p[0].widen() + p[1].widen() + p[2].widen()) / 3.0)
        .collect()
}

fn gaussian_1d() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over valid windows only.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = g.iter().zip(&x[y * w + xo..y * w + xo + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for (t, gv) in g.iter().enumerate() {
            let src = &rows[(yo + t) * ow..(yo + t + 1) * ow];
            for (o, s) in out[yo * ow..(yo + 1) * ow].iter_mut().zip(src) {
                *o += gv * s;
            }
        }
    }
    out
}

/// Mean SSIM of the RGB-mean luminance over all valid 11×11 Gaussian
/// windows (σ = 1.5, C1 = 0.01², C2 = 0.03²).
pub fn ssim<T: Scalar>(a: &SrgbImage<T>, b: &SrgbImage<T>) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_1d();
    let (la, lb) = (luminance(a), luminance(b));
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(&la, h, w, &g);
    let mu_b = filter_valid(&lb, h, w, &g);
    let e_aa = filter_valid(&prod(&la, &la), h, w, &g);
    let e_bb = filter_valid(&prod(&lb, &lb), h, w, &g);
    let e_ab = filter_valid(&prod(&la, &lb), h, w, &g);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = SrgbImage::<f64>::filled(4, 4, [0.3; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let z = SrgbImage::<f64>::filled(4, 4, [0.0; 3]);
        let h = SrgbImage::<f64>::filled(4, 4, [0.5; 3]);
        assert!((psnr(&z, &h).unwrap() - 6.020599913279624).abs() < 1e-9);
        assert!(psnr(&z, &SrgbImage::filled(4, 5, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_of_constants() {
        let a = SrgbImage::<f64>::filled(16, 16, [0.2; 3]);
        let b = SrgbImage::<f64>::filled(16, 16, [0.8; 3]);
        let want = (2.0 * 0.16 + SSIM_C1) / (0.04 + 0.64 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-9);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(ssim(&a, &SrgbImage::filled(10, 16, [0.2; 3])).is_err());
    }

    #[test]
    fn gaussian_is_normalized() {
        assert!((gaussian_1d().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}

//! Test-time disturbances: i.i.d. spatial noise and conjugate-symmetric
//! noise in the orthonormal 2-D Fourier domain.

use std::str::FromStr;

use picat_tensor::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::SrgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    /// `sigma` on the 0–255 scale.
    Spatial,
    /// `sigma` per real/imaginary component of orthonormal DFT coefficients.
    Frequency,
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Self::Spatial),
            "frequency" => Ok(Self::Frequency),
            other => Err(Error::Config(format!("unknown perturbation kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Spatial => "spatial",
            Self::Frequency => "frequency",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    pub sigma: f64,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("perturbation sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

pub fn perturb<T: Scalar>(img: &SrgbImage<T>, spec: &PerturbSpec) -> Result<SrgbImage<T>> {
    Ok(perturb_with_residue(img, spec)?.0)
}

/// Like [`perturb`], also returning the largest imaginary magnitude left
/// by the inverse transform (always 0 in spatial mode).
pub fn perturb_with_residue<T: Scalar>(img: &SrgbImage<T>, spec: &PerturbSpec) -> Result<(SrgbImage<T>, f64)> {
    spec.validate()?;
    if spec.sigma == 0.0 {
        return Ok((img.clone(), 0.0));
    }
    let (h, w) = img.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (noise, residue) = match spec.kind {
        PerturbKind::Spatial => {
            let normal = Normal::new(0.0, spec.sigma / 255.0).expect("validated sigma");
            ((0..h * w * 3).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>(), 0.0)
        }
        PerturbKind::Frequency => {
            let mut noise = vec![0.0; h * w * 3];
            let mut residue = 0.0f64;
            for c in 0..3 {
                let (field, r) = spectral_noise(h, w, spec.sigma, &mut rng);
                residue = residue.max(r);
                for (p, v) in field.into_iter().enumerate() {
                    noise[p * 3 + c] = v;
                }
            }
            (noise, residue)
        }
    };
    let data = img.data().iter().zip(&noise).map(|(v, n)| (v.widen() + n).clamp(0.0, 1.0));
    Ok((SrgbImage::new(h, w, data.map(T::cast).collect())?, residue))
}

/// Spatial-domain image of conjugate-symmetric complex noise added to
/// orthonormal DFT coefficients. Returns the real field and the largest
/// imaginary magnitude of the inverse.
pub fn spectral_noise(h: usize, w: usize, sigma: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let mut spec = vec![Complex::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let (cu, cv) = ((h - u) % h, (w - v) % w);
            let (i, j) = (u * w + v, cu * w + cv);
            if i == j {
                spec[i] = Complex::new(normal.sample(rng), 0.0);
            } else if i < j {
                let z = Complex::new(normal.sample(rng), normal.sample(rng));
                spec[i] = z;
                spec[j] = z.conj();
            }
        }
    }
    // the noise is added to the coefficients of an orthonormal DFT, so its
    // spatial contribution is its orthonormal inverse
    fft2(&mut spec, h, w, true);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let residue = spec.iter().map(|z| (z.im * scale).abs()).fold(0.0, f64::max);
    (spec.iter().map(|z| z.re * scale).collect(), residue)
}

/// Unnormalized 2-D DFT in place (row transforms, then column transforms).
pub fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row.process(buf);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

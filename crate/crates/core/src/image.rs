//! Floating-point RGB images, PNG I/O, cropping and synthetic degradation.

use std::path::Path;

use image::{DynamicImage, ImageReader, RgbImage};
use picat_tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `H×W×3` image, channel order R, G, B, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SrgbImage<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> SrgbImage<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{height}x{width}x3 image with {} values",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < T::zero() || **v > T::one()) {
            return Err(Error::Dimension(format!("value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from `f(y, x) -> [r, g, b]`, clamping into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|v| T::cast(clamp01(*v))));
            }
        }
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Applies `f` to every value and clamps the result into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| T::cast(clamp01(f(v.widen())))).collect(),
        }
    }

    /// Planar `3×H×W` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        Tensor::from_fn(&[3, self.height, self.width], |i| self.data[(i % hw) * 3 + i / hw])
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); values are clamped.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.dims3("from_tensor")?;
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
        }
        let hw = h * w;
        Ok(Self::from_fn(h, w, |y, x| {
            let p = y * w + x;
            [t[p].widen(), t[hw + p].widen(), t[2 * hw + p].widen()]
        }))
    }

    pub fn cast<U: Scalar>(&self) -> SrgbImage<U> {
        SrgbImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::cast(v.widen())).collect(),
        }
    }

    /// `x^2.2` approximation of sRGB decoding.
    pub fn linearized(&self) -> Self {
        self.map(|v| v.powf(2.2))
    }

    pub fn crop(&self, patch: &PatchSpec) -> Result<Self> {
        patch.check(self.height, self.width)?;
        let mut data = Vec::with_capacity(patch.size * patch.size * 3);
        for y in patch.top..patch.top + patch.size {
            let start = (y * self.width + patch.left) * 3;
            data.extend_from_slice(&self.data[start..start + patch.size * 3]);
        }
        Ok(Self {
            height: patch.size,
            width: patch.size,
            data,
        })
    }
}

fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Per-pixel maximum over R, G, B.
#[derive(Clone, Debug, PartialEq)]
pub struct LuminanceMap<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

pub fn intensity_max<T: Scalar>(img: &SrgbImage<T>) -> LuminanceMap<T> {
    LuminanceMap {
        height: img.height,
        width: img.width,
        data: img.data.chunks_exact(3).map(|p| p[0].max(p[1]).max(p[2])).collect(),
    }
}

pub fn load_png<T: Scalar>(path: impl AsRef<Path>) -> Result<SrgbImage<T>> {
    let path = path.as_ref();
    let image_err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    let decoded = ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(image_err)?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<T> = match &decoded {
        DynamicImage::ImageRgb8(buf) => buf.as_raw().iter().map(|&v| T::cast(v as f64 / 255.0)).collect(),
        DynamicImage::ImageRgba8(buf) => rgb_of_rgba(buf.as_raw(), 255.0),
        DynamicImage::ImageRgb16(buf) => buf.as_raw().iter().map(|&v| T::cast(v as f64 / 65535.0)).collect(),
        DynamicImage::ImageRgba16(buf) => rgb_of_rgba(buf.as_raw(), 65535.0),
        other => {
            return Err(Error::UnsupportedColorType {
                path: path.to_path_buf(),
                color: format!("{:?}", other.color()),
            })
        }
    };
    SrgbImage::new(h, w, data)
}

fn rgb_of_rgba<T: Scalar, V: Copy + Into<f64>>(raw: &[V], full: f64) -> Vec<T> {
    raw.chunks_exact(4)
        .flat_map(|p| p[..3].iter().map(move |&v| T::cast(v.into() / full)))
        .collect()
}

/// Quantizes a value to 8 bits: clamp, scale, round half to even.
pub fn quantize(v: f64) -> u8 {
    (clamp01(v) * 255.0).round_ties_even() as u8
}

/// Writes an 8-bit RGB PNG.
pub fn save_png<T: Scalar>(img: &SrgbImage<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = img.data.iter().map(|v| quantize(v.widen())).collect();
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer sized from image");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Square patch position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl PatchSpec {
    pub fn random<R: Rng + ?Sized>(height: usize, width: usize, size: usize, rng: &mut R) -> Result<Self> {
        if size == 0 || size > height || size > width {
            return Err(Error::Dimension(format!("patch {size} does not fit {height}x{width}")));
        }
        Ok(Self {
            top: rng.gen_range(0..=height - size),
            left: rng.gen_range(0..=width - size),
            size,
        })
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.size == 0 || self.top + self.size > height || self.left + self.size > width {
            return Err(Error::Dimension(format!("{self:?} outside {height}x{width}")));
        }
        Ok(())
    }
}

/// Crops a random `size×size` patch; the returned spec reproduces it on a
/// paired image.
pub fn random_crop<T: Scalar>(img: &SrgbImage<T>, size: usize, seed: u64) -> Result<(SrgbImage<T>, PatchSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = PatchSpec::random(img.height, img.width, size, &mut rng)?;
    Ok((img.crop(&spec)?, spec))
}

/// Synthetic low-light model: `clamp(gain · x^gamma + N(0, noise_std²), 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    pub gain: f64,
    pub gamma: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gain <= 1.0) || self.gamma <= 0.0 || self.noise_std < 0.0 {
            return Err(Error::Config(format!("invalid degradation {self:?}")));
        }
        Ok(())
    }
}

pub fn degrade<T: Scalar>(img: &SrgbImage<T>, spec: &DegradeSpec) -> Result<SrgbImage<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise_std).expect("validated std");
    let data = img
        .data
        .iter()
        .map(|v| {
            let mut out = spec.gain * v.widen().powf(spec.gamma);
            if spec.noise_std > 0.0 {
                out += normal.sample(&mut rng);
            }
            T::cast(clamp01(out))
        })
        .collect();
    Ok(SrgbImage {
        height: img.height,
        width: img.width,
        data,
    })
}

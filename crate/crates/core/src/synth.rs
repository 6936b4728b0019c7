//! Procedural scenes and synthetic low/normal-light pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use picat_tensor::Scalar;

use crate::dataset::{Pair, PairedDataset};
use crate::error::{Error, Result};
use crate::image::{degrade, DegradeSpec, SrgbImage};

/// A smooth two-color gradient with a few flat-colored rectangles and
/// ellipses, a soft shading field and a faint texture.
pub fn scene<T: Scalar, R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> SrgbImage<T> {
    let color = |rng: &mut R| [rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0)];
    let (c0, c1) = (color(rng), color(rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let shapes: Vec<(bool, [f64; 4], [f64; 3])> = (0..rng.gen_range(3..7))
        .map(|_| {
            let cy = rng.gen_range(0.0..1.0);
            let cx = rng.gen_range(0.0..1.0);
            let ry = rng.gen_range(0.08..0.35);
            let rx = rng.gen_range(0.08..0.35);
            (rng.gen_bool(0.5), [cy, cx, ry, rx], color(rng))
        })
        .collect();
    let freq = rng.gen_range(4.0..14.0);
    let amp = rng.gen_range(0.0..0.06);
    let light = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    SrgbImage::from_fn(height, width, |y, x| {
        let v = y as f64 / height.max(2) as f64;
        let u = x as f64 / width.max(2) as f64;
        let t = (0.5 + 0.5 * ((u - 0.5) * ca + (v - 0.5) * sa)).clamp(0.0, 1.0);
        let mut rgb = [0.0; 3];
        for c in 0..3 {
            rgb[c] = c0[c] * (1.0 - t) + c1[c] * t;
        }
        for (rect, [cy, cx, ry, rx], col) in &shapes {
            let (dy, dx) = ((v - cy) / ry, (u - cx) / rx);
            let inside = if *rect { dy.abs() <= 1.0 && dx.abs() <= 1.0 } else { dy * dy + dx * dx <= 1.0 };
            if inside {
                rgb = *col;
            }
        }
        let d2 = (v - light.0).powi(2) + (u - light.1).powi(2);
        let shade = 0.65 + 0.35 * (-2.0 * d2).exp();
        let tex = 1.0 + amp * (freq * u * std::f64::consts::TAU).sin() * (freq * v * std::f64::consts::TAU).cos();
        rgb.map(|c| c * shade * tex)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub count: usize,
    pub size: usize,
    pub gain: f64,
    pub gamma: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 200,
            size: 64,
            gain: 0.25,
            gamma: 1.2,
            noise_std: 0.03,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn degrade_spec(&self, i: usize) -> DegradeSpec {
        DegradeSpec {
            gain: self.gain,
            gamma: self.gamma,
            noise_std: self.noise_std,
            seed: pair_seed(self.seed ^ 0x5eed_de9a, i),
        }
    }
}

fn pair_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64).rotate_left(17) ^ i as u64
}

/// `count` scenes, each degraded with its own noise seed. Deterministic in
/// `spec` regardless of the worker count.
pub fn synthetic_pairs<T: Scalar>(spec: &SynthSpec) -> Result<PairedDataset<T>> {
    if spec.count == 0 || spec.size == 0 {
        return Err(Error::EmptyDataset(format!("synthetic spec {spec:?}")));
    }
    spec.degrade_spec(0).validate()?;
    let pairs = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(spec.seed, i));
            let high: SrgbImage<T> = scene(spec.size, spec.size, &mut rng);
            let low = degrade(&high, &spec.degrade_spec(i))?;
            Ok(Pair {
                name: format!("synth_{i:04}"),
                low,
                high,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PairedDataset::new(pairs)
}

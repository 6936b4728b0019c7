//! Toy stand-in for the downstream restoration network, and the loss.
//!
//! `enhanced = x̃ + out(blocks(lrelu(in(x̃))))`, each block
//! `f ← f + post(a + CA(a))` with `a = lrelu(pre(f))` and `CA` attention
//! across channels.

use picat_tensor::{ParamSet, Scalar, Session, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, Init};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub dim: usize,
    pub blocks: usize,
    pub conv_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            blocks: 2,
            conv_size: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.conv_size % 2 == 0 {
            return Err(Error::Config(format!("invalid backbone config {self:?}")));
        }
        Ok(())
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, ps: &mut ParamSet<T>, rng: &mut R, zero: Init) {
        let (d, k) = (self.dim, self.conv_size);
        layers::init_conv(ps, rng, "backbone.in", 3, d, k, Init::He);
        for i in 0..self.blocks {
            layers::init_conv(ps, rng, &format!("backbone.{i}.pre"), d, d, k, Init::He);
            layers::init_attention(ps, rng, &format!("backbone.{i}.attn"), d);
            if zero != Init::Zero {
                layers::init_linear(ps, rng, &format!("backbone.{i}.attn.out"), d, d, zero);
            }
            layers::init_conv(ps, rng, &format!("backbone.{i}.post"), d, d, k, Init::Lecun);
        }
        layers::init_conv(ps, rng, "backbone.out", d, 3, k, zero);
    }
}

pub fn forward<T: Scalar>(s: &mut Session<'_, T>, cfg: &BackboneConfig, x_tilde: Var) -> Result<Var> {
    if s.shape(x_tilde).len() != 3 || s.shape(x_tilde)[0] != 3 {
        return Err(Error::Dimension(format!("backbone input {:?}, expected 3×H×W", s.shape(x_tilde))));
    }
    let f = layers::conv(s, "backbone.in", x_tilde)?;
    let mut f = layers::lrelu(s, f)?;
    for i in 0..cfg.blocks {
        let a = layers::conv(s, &format!("backbone.{i}.pre"), f)?;
        let a = layers::lrelu(s, a)?;
        let att = layers::channel_attention(s, &format!("backbone.{i}.attn"), a)?;
        let a = s.add(a, att)?;
        let p = layers::conv(s, &format!("backbone.{i}.post"), a)?;
        f = s.add(f, p)?;
    }
    let out = layers::conv(s, "backbone.out", f)?;
    Ok(s.add(x_tilde, out)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rec: f64,
    pub noise: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rec: 1.0, noise: 0.01 }
    }
}

/// `λ_rec·mean|enhanced − target| + λ_noise·mean(noise²)`.
pub fn loss<T: Scalar>(
    s: &mut Session<'_, T>,
    enhanced: Var,
    target: Var,
    noise: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    if s.shape(enhanced) != s.shape(target) {
        return Err(Error::Dimension(format!(
            "loss: enhanced {:?} vs target {:?}",
            s.shape(enhanced),
            s.shape(target)
        )));
    }
    let d = s.sub(enhanced, target)?;
    let rec = s.mean_abs(d)?;
    let mut total = s.scale(rec, w.rec)?;
    if let Some(n) = noise {
        let e = s.mean_square(n)?;
        let e = s.scale(e, w.noise)?;
        total = s.add(total, e)?;
    }
    Ok(total)
}

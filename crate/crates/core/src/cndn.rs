//! Content-noise decomposition.
//!
//! `x′ = embed_x(x)`, `y′ = embed_y(y)`, `x″ = x′ + CA(x′, y′)`,
//! `y″ = y′ + SA(y′)`, `x̃ = x + fuse_out(x″ + y″)`, `n = noise_out(y′ − y″)`.

use picat_tensor::{ParamSet, Scalar, Session, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, Init};

pub const MAX_TOKENS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CndnConfig {
    pub dim: usize,
    pub conv_size: usize,
    /// Attention runs on a grid of at most this many pixels.
    pub max_tokens: usize,
}

impl Default for CndnConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            conv_size: 3,
            max_tokens: MAX_TOKENS,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CndnOutput {
    pub x_tilde: Var,
    pub noise: Var,
}

impl CndnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.conv_size % 2 == 0 || self.max_tokens == 0 {
            return Err(Error::Config(format!("invalid CNDN config {self:?}")));
        }
        Ok(())
    }

    /// `zero` is the initializer for layers that start at zero in a fresh model.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, ps: &mut ParamSet<T>, rng: &mut R, desc_channels: usize, zero: Init) {
        self.init_embed(ps, rng, "cndn.embed_x", 3);
        self.init_embed(ps, rng, "cndn.embed_y", desc_channels);
        for name in ["cndn.cross", "cndn.self"] {
            layers::init_attention(ps, rng, name, self.dim);
            if zero != Init::Zero {
                layers::init_linear(ps, rng, &format!("{name}.out"), self.dim, self.dim, zero);
            }
        }
        layers::init_conv(ps, rng, "cndn.fuse_out", self.dim, 3, self.conv_size, zero);
        layers::init_conv(ps, rng, "cndn.noise_out", self.dim, self.dim, self.conv_size, Init::Lecun);
    }

    pub fn init_embed<T: Scalar, R: Rng + ?Sized>(&self, ps: &mut ParamSet<T>, rng: &mut R, prefix: &str, cin: usize) {
        layers::init_conv(ps, rng, &format!("{prefix}.0"), cin, self.dim, self.conv_size, Init::He);
        layers::init_conv(ps, rng, &format!("{prefix}.1"), self.dim, self.dim, self.conv_size, Init::Lecun);
    }
}

/// conv → leaky-ReLU(0.2) → conv.
pub fn embed<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let h = layers::conv(s, &format!("{prefix}.0"), x)?;
    let h = layers::lrelu(s, h)?;
    layers::conv(s, &format!("{prefix}.1"), h)
}

fn check_aligned<T: Scalar>(s: &Session<'_, T>, a: Var, b: Var, op: &str) -> Result<()> {
    let (sa, sb) = (s.shape(a), s.shape(b));
    if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
        return Err(Error::Dimension(format!("{op}: spatial mismatch {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// `x″ = x′ + Attn(Q(x′), K(y′), V(y′))`.
pub fn cross_attend<T: Scalar>(s: &mut Session<'_, T>, cfg: &CndnConfig, xp: Var, yp: Var) -> Result<Var> {
    check_aligned(s, xp, yp, "cross_attend")?;
    let a = layers::spatial_attention(s, "cndn.cross", xp, yp, cfg.max_tokens)?;
    Ok(s.add(xp, a)?)
}

/// `y″ = y′ + Attn(Q(y′), K(y′), V(y′))`.
pub fn self_attend<T: Scalar>(s: &mut Session<'_, T>, cfg: &CndnConfig, yp: Var) -> Result<Var> {
    let a = layers::spatial_attention(s, "cndn.self", yp, yp, cfg.max_tokens)?;
    Ok(s.add(yp, a)?)
}

/// Splits the descriptor `y` into content merged into the image `x` and a
/// noise estimate.
pub fn decompose<T: Scalar>(s: &mut Session<'_, T>, cfg: &CndnConfig, x: Var, y: Var) -> Result<CndnOutput> {
    check_aligned(s, x, y, "decompose")?;
    let xp = embed(s, "cndn.embed_x", x)?;
    let yp = embed(s, "cndn.embed_y", y)?;
    let x2 = cross_attend(s, cfg, xp, yp)?;
    let y2 = self_attend(s, cfg, yp)?;
    let sum = s.add(x2, y2)?;
    let content = layers::conv(s, "cndn.fuse_out", sum)?;
    let x_tilde = s.add(x, content)?;
    let diff = s.sub(yp, y2)?;
    let noise = layers::conv(s, "cndn.noise_out", diff)?;
    Ok(CndnOutput { x_tilde, noise })
}

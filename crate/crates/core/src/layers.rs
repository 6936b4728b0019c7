//! Learned building blocks shared by the CAT, CNDN and backbone stages.
//!
//! Parameters live in a flat [`ParamSet`] under dotted names; a layer is a
//! name prefix plus the function that reads `{prefix}.w` / `{prefix}.b`.

use picat_tensor::{Padding, ParamSet, Scalar, Session, Tensor, Var};
use rand::Rng;

use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `N(0, 2/fan_in)`, for layers followed by a rectifier.
    He,
    /// `N(0, 1/fan_in)`.
    Lecun,
    /// All zeros, so a residual branch starts as the identity.
    Zero,
}

impl Init {
    fn tensor<T: Scalar, R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
        match self {
            Init::He => Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng),
            Init::Lecun => Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), rng),
            Init::Zero => Tensor::zeros(shape),
        }
    }
}

/// `{prefix}.w: cout×cin×k×k`, `{prefix}.b: cout`.
pub fn init_conv<T: Scalar, R: Rng + ?Sized>(
    ps: &mut ParamSet<T>,
    rng: &mut R,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    init: Init,
) {
    ps.insert(format!("{prefix}.w"), init.tensor(&[cout, cin, k, k], cin * k * k, rng));
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

/// `{prefix}.w: din×dout`, `{prefix}.b: dout`.
pub fn init_linear<T: Scalar, R: Rng + ?Sized>(
    ps: &mut ParamSet<T>,
    rng: &mut R,
    prefix: &str,
    din: usize,
    dout: usize,
    init: Init,
) {
    ps.insert(format!("{prefix}.w"), init.tensor(&[din, dout], din, rng));
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[dout]));
}

/// Same-size convolution with replicate padding, plus bias.
pub fn conv<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let w = s.param(&format!("{prefix}.w"))?;
    let b = s.param(&format!("{prefix}.b"))?;
    let y = s.conv2d(x, w, Padding::Replicate)?;
    Ok(s.add_bias(y, b)?)
}

/// Token-wise affine map on an `N×din` matrix.
pub fn linear<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let w = s.param(&format!("{prefix}.w"))?;
    let b = s.param(&format!("{prefix}.b"))?;
    let y = s.matmul(x, w)?;
    Ok(s.add_bias(y, b)?)
}

pub fn lrelu<T: Scalar>(s: &mut Session<'_, T>, x: Var) -> Result<Var> {
    Ok(s.leaky_relu(x, LEAKY_SLOPE)?)
}

/// Token grid for pixel attention: the map is halved (rounding up) until
/// it holds at most `max_tokens` positions.
pub fn token_grid(h: usize, w: usize, max_tokens: usize) -> (usize, usize) {
    let (mut gh, mut gw) = (h, w);
    while gh * gw > max_tokens.max(1) && (gh > 1 || gw > 1) {
        gh = gh.div_ceil(2);
        gw = gw.div_ceil(2);
    }
    (gh, gw)
}

/// Parameters of one attention block: query/key/value and output maps.
pub fn init_attention<T: Scalar, R: Rng + ?Sized>(ps: &mut ParamSet<T>, rng: &mut R, prefix: &str, dim: usize) {
    for p in ["q", "k", "v"] {
        init_linear(ps, rng, &format!("{prefix}.{p}"), dim, dim, Init::Lecun);
    }
    init_linear(ps, rng, &format!("{prefix}.out"), dim, dim, Init::Zero);
}

/// Rows rescaled to norm `to`.
fn qk_norm<T: Scalar>(s: &mut Session<'_, T>, v: Var, to: f64) -> Result<Var> {
    let n = s.normalize_rows(v)?;
    Ok(s.scale(n, to)?)
}

/// Pixel attention of `x` (queries) over `y` (keys, values), both `C×H×W`.
/// Runs on the [`token_grid`] and is upsampled back to `H×W`. Queries and keys
/// are rescaled to norm `√D` per token, so logits are `√D·cos`. Returns the
/// branch output only; callers add the residual.
pub fn spatial_attention<T: Scalar>(
    s: &mut Session<'_, T>,
    prefix: &str,
    x: Var,
    y: Var,
    max_tokens: usize,
) -> Result<Var> {
    let (_, h, w) = s.value(x).dims3("spatial_attention")?;
    let (gh, gw) = token_grid(h, w, max_tokens);
    let down = |s: &mut Session<'_, T>, v: Var| -> Result<Var> {
        if (gh, gw) == (h, w) {
            Ok(v)
        } else {
            Ok(s.adaptive_avg_pool(v, gh, gw)?)
        }
    };
    let xd = down(s, x)?;
    let yd = if x == y { xd } else { down(s, y)? };
    let xt = s.to_tokens(xd)?;
    let yt = if x == y { xt } else { s.to_tokens(yd)? };
    let q = linear(s, &format!("{prefix}.q"), xt)?;
    let k = linear(s, &format!("{prefix}.k"), yt)?;
    let v = linear(s, &format!("{prefix}.v"), yt)?;
    let d = s.shape(q)[1] as f64;
    let q = qk_norm(s, q, d.sqrt())?;
    let k = qk_norm(s, k, d.sqrt())?;
    let a = s.attention(q, k, v)?;
    let o = linear(s, &format!("{prefix}.out"), a)?;
    let o = s.from_tokens(o, gh, gw)?;
    if (gh, gw) == (h, w) {
        Ok(o)
    } else {
        Ok(s.upsample_nearest(o, h, w)?)
    }
}

/// Channel attention: every channel is a token whose features are the
/// `H·W` pixel values, so the cost is linear in the pixel count.
pub fn channel_attention<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let (_, h, w) = s.value(x).dims3("channel_attention")?;
    let t = s.to_tokens(x)?;
    let q = linear(s, &format!("{prefix}.q"), t)?;
    let k = linear(s, &format!("{prefix}.k"), t)?;
    let v = linear(s, &format!("{prefix}.v"), t)?;
    let (qt, kt, vt) = (s.transpose(q)?, s.transpose(k)?, s.transpose(v)?);
    // cosine logits: pixel-length rows would otherwise saturate the softmax
    let qt = qk_norm(s, qt, ((h * w) as f64).sqrt())?;
    let kt = s.normalize_rows(kt)?;
    let a = s.attention(qt, kt, vt)?;
    let a = s.transpose(a)?;
    let o = linear(s, &format!("{prefix}.out"), a)?;
    Ok(s.from_tokens(o, h, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_halves_until_small_enough() {
        assert_eq!(token_grid(16, 16, 1024), (16, 16));
        assert_eq!(token_grid(64, 64, 1024), (32, 32));
        assert_eq!(token_grid(65, 33, 1024), (33, 17));
        assert_eq!(token_grid(128, 96, 1024), (32, 24));
        assert_eq!(token_grid(5, 5, 1), (1, 1));
    }

    #[test]
    fn zero_output_map_gives_zero_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::<f64>::new();
        init_attention(&mut ps, &mut rng, "a", 4);
        let x = Tensor::randn(&[4, 40, 40], 1.0, &mut rng);
        let mut s = Session::new(&ps);
        let xv = s.constant(x).unwrap();
        let o = spatial_attention(&mut s, "a", xv, xv, 64).unwrap();
        assert_eq!(s.shape(o), &[4, 40, 40]);
        assert!(s.value(o).data().iter().all(|&v| v == 0.0));
        let c = channel_attention(&mut s, "a", xv).unwrap();
        assert!(s.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn he_init_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::<f64>::new();
        init_conv(&mut ps, &mut rng, "c", 16, 64, 3, Init::He);
        let w = ps.get("c.w").unwrap();
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.numel() as f64;
        assert!((var - 2.0 / 144.0).abs() < 0.15 * 2.0 / 144.0, "{var}");
    }
}

//! Color-aware transform.
//!
//! Per-pixel channel ratios cancel any positive factor shared by the three
//! channels of a pixel (shading, exposure). Cross color ratios between two
//! pixels additionally cancel per-channel illuminant gains. The descriptor
//! is density-scaled by `S_k = (sin(π·I_max/2) + τ)^(1/k)`, filtered by a
//! fixed kernel bank and then by a dynamic color-aware filter (DCAF) whose
//! depthwise kernel is pooled from the descriptor itself.

use std::f64::consts::PI;

use picat_tensor::{kernels, Padding, ParamSet, Scalar, Session, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{intensity_max, LuminanceMap, SrgbImage};
use crate::layers;

pub const DEFAULT_EPS: f64 = 1e-8;
/// Ratio eps used inside the trained model. Clipped-dark pixels otherwise
/// produce ratios near `1/DEFAULT_EPS` that swamp the first optimizer steps.
pub const MODEL_EPS: f64 = 1e-2;
pub const TAU: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RatioDomain {
    #[default]
    Linear,
    Log,
}

/// Three ratio maps in the order `rg, rb, gb`, stored planar.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioDescriptor<T> {
    pub height: usize,
    pub width: usize,
    pub domain: RatioDomain,
    pub data: Vec<T>,
}

impl<T: Scalar> RatioDescriptor<T> {
    pub fn channel(&self, c: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![3, self.height, self.width], self.data.clone()).expect("descriptor shape")
    }
}

/// `(num + eps) / (den + eps)` for the pairs R/G, R/B, G/B.
pub fn channel_ratios<T: Scalar>(img: &SrgbImage<T>, eps: f64, domain: RatioDomain) -> RatioDescriptor<T> {
    let (h, w) = img.dims();
    let hw = h * w;
    let mut data = vec![T::zero(); 3 * hw];
    for (p, px) in img.data().chunks_exact(3).enumerate() {
        let [r, g, b] = [px[0].widen(), px[1].widen(), px[2].widen()];
        for (c, (num, den)) in [(r, g), (r, b), (g, b)].into_iter().enumerate() {
            let ratio = (num + eps) / (den + eps);
            data[c * hw + p] = T::cast(match domain {
                RatioDomain::Linear => ratio,
                RatioDomain::Log => ratio.ln(),
            });
        }
    }
    RatioDescriptor {
        height: h,
        width: w,
        domain,
        data,
    }
}

/// Cross color ratios `(M_rg, M_rb, M_gb)` between pixels `p1` and `p2`,
/// e.g. `M_rg = (R₁·G₂ + eps) / (R₂·G₁ + eps)`. Coordinates are `(y, x)`.
pub fn cross_color_ratio<T: Scalar>(
    img: &SrgbImage<T>,
    p1: (usize, usize),
    p2: (usize, usize),
    eps: f64,
) -> Result<[f64; 3]> {
    let (h, w) = img.dims();
    for p in [p1, p2] {
        if p.0 >= h || p.1 >= w {
            return Err(Error::OutOfBounds(p, h, w));
        }
    }
    let a = img.pixel(p1.0, p1.1).map(Scalar::widen);
    let b = img.pixel(p2.0, p2.1).map(Scalar::widen);
    let m = |i: usize, j: usize| (a[i] * b[j] + eps) / (b[i] * a[j] + eps);
    Ok([m(0, 1), m(0, 2), m(1, 2)])
}

/// Color-density parameters. `k = exp(kappa)` stays positive under any
/// update of the unconstrained `kappa`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityParams {
    pub kappa: f64,
    pub tau: f64,
}

impl DensityParams {
    pub fn with_k(k: f64) -> Result<Self> {
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::Config(format!("density k must be positive, got {k}")));
        }
        Ok(Self { kappa: k.ln(), tau: TAU })
    }

    pub fn k(&self) -> f64 {
        self.kappa.exp()
    }
}

/// `sin(π·I_max/2) + τ`, the base raised to `1/k`.
pub fn density_base(i_max: f64, tau: f64) -> f64 {
    (PI * i_max / 2.0).sin() + tau
}

/// `S_k = (sin(π·I_max/2) + τ)^(1/k)`.
pub fn density_factor(i_max: f64, params: &DensityParams) -> f64 {
    density_base(i_max, params.tau).powf(1.0 / params.k())
}

/// Multiplies every ratio channel by `S_k` of its pixel (the `C_map`).
pub fn density_scale<T: Scalar>(
    ratios: &RatioDescriptor<T>,
    i_max: &LuminanceMap<T>,
    params: &DensityParams,
) -> Result<RatioDescriptor<T>> {
    if ratios.domain != RatioDomain::Linear {
        return Err(Error::Config("density scaling needs linear-domain ratios".into()));
    }
    if (ratios.height, ratios.width) != (i_max.height, i_max.width) {
        return Err(Error::Dimension(format!(
            "ratios {}x{} vs intensity {}x{}",
            ratios.height, ratios.width, i_max.height, i_max.width
        )));
    }
    let hw = ratios.height * ratios.width;
    let s: Vec<f64> = i_max.data.iter().map(|v| density_factor(v.widen(), params)).collect();
    let data = ratios
        .data
        .iter()
        .enumerate()
        .map(|(i, r)| T::cast(r.widen() * s[i % hw]))
        .collect();
    Ok(RatioDescriptor {
        data,
        ..ratios.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// Entries sum to one.
    Smoothing,
    /// Entries sum to zero.
    Differential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub name: String,
    pub size: usize,
    pub kind: KernelKind,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn new(name: impl Into<String>, size: usize, kind: KernelKind, weights: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if size % 2 == 0 || weights.len() != size * size {
            return Err(Error::Config(format!("kernel `{name}` must be odd-sided and {size}x{size}")));
        }
        let target = match kind {
            KernelKind::Smoothing => 1.0,
            KernelKind::Differential => 0.0,
        };
        let sum: f64 = weights.iter().sum();
        if (sum - target).abs() >= 1e-12 {
            return Err(Error::Config(format!("kernel `{name}` sums to {sum}, expected {target}")));
        }
        Ok(Self { name, size, kind, weights })
    }

    /// Normalized `size×size` Gaussian.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        let c = (size / 2) as f64;
        let mut w: Vec<f64> = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
                (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        Self::new(format!("gaussian{size}"), size, KernelKind::Smoothing, w)
    }

    /// 4-neighbour Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]`.
    pub fn laplacian() -> Self {
        Self::new(
            "laplacian",
            3,
            KernelKind::Differential,
            vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
        )
        .expect("valid laplacian")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "gaussian" | "gaussian3" => Self::gaussian(3, 1.0),
            "laplacian" => Ok(Self::laplacian()),
            other => Err(Error::Config(format!("unknown kernel `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    kernels: Vec<Kernel>,
}

impl Default for KernelBank {
    /// 3×3 Gaussian (σ = 1) and the 3×3 Laplacian.
    fn default() -> Self {
        Self::new(vec![Kernel::gaussian(3, 1.0).expect("valid gaussian"), Kernel::laplacian()])
            .expect("non-empty")
    }
}

impl KernelBank {
    pub fn new(kernels: Vec<Kernel>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::Config("kernel bank is empty".into()));
        }
        // re-validate, deserialized kernels bypass `Kernel::new`
        let kernels = kernels
            .into_iter()
            .map(|k| Kernel::new(k.name, k.size, k.kind, k.weights))
            .collect::<Result<_>>()?;
        Ok(Self { kernels })
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    pub fn max_size(&self) -> usize {
        self.kernels.iter().map(|k| k.size).max().unwrap_or(1)
    }

    /// Number of output channels for a 3-channel descriptor.
    pub fn out_channels(&self) -> usize {
        3 * self.kernels.len()
    }

    /// Convolution weight `(3·B)×3×K×K`: output channel `3·b + c` applies
    /// kernel `b` to descriptor channel `c`. Smaller kernels are zero-padded
    /// to the largest size, which leaves the result unchanged.
    pub fn weight<T: Scalar>(&self) -> Tensor<T> {
        let k = self.max_size();
        let mut w = Tensor::zeros(&[self.out_channels(), 3, k, k]);
        for (b, kern) in self.kernels.iter().enumerate() {
            let off = (k - kern.size) / 2;
            for c in 0..3 {
                let oc = 3 * b + c;
                for y in 0..kern.size {
                    for x in 0..kern.size {
                        w[((oc * 3 + c) * k + y + off) * k + x + off] = T::cast(kern.weights[y * kern.size + x]);
                    }
                }
            }
        }
        w
    }
}

/// Applies every kernel of the bank to each ratio channel (replicate
/// padding, unflipped kernels). Output is `(3·|bank|)×H×W`.
pub fn kernel_features<T: Scalar>(desc: &RatioDescriptor<T>, bank: &KernelBank) -> Result<Tensor<T>> {
    check_kernel_fits(bank, desc.height, desc.width)?;
    Ok(kernels::conv2d(&desc.to_tensor(), &bank.weight(), Padding::Replicate)?)
}

fn check_kernel_fits(bank: &KernelBank, h: usize, w: usize) -> Result<()> {
    if bank.max_size() > h.min(w) {
        return Err(Error::Dimension(format!(
            "kernel of size {} larger than {h}x{w} image",
            bank.max_size()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcafConfig {
    pub in_channels: usize,
    pub channels: usize,
    /// Side of the pooled dynamic kernel.
    pub kernel_size: usize,
    /// Side of the `f` and `h` convolutions.
    pub conv_size: usize,
}

impl Default for DcafConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            channels: 8,
            kernel_size: 3,
            conv_size: 3,
        }
    }
}

impl DcafConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 || self.conv_size % 2 == 0 {
            return Err(Error::Config(format!("DCAF kernel sizes must be odd: {self:?}")));
        }
        if self.channels == 0 || self.in_channels == 0 {
            return Err(Error::Config(format!("DCAF channel counts must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, ps: &mut ParamSet<T>, rng: &mut R) {
        for branch in ["f", "h"] {
            layers::init_conv(
                ps,
                rng,
                &format!("cat.dcaf.{branch}"),
                self.in_channels,
                self.channels,
                self.conv_size,
                layers::Init::Lecun,
            );
        }
    }
}

/// Dynamic color-aware filter: `g = pool(f(C))` to `k×k` per channel, then
/// the depthwise convolution of `h(C)` with `g / k²`. The tap-count scaling
/// makes an all-ones kernel a local mean, so the output stays at the scale of
/// its inputs instead of their product summed over `k²` taps.
pub fn dcaf_forward<T: Scalar>(s: &mut Session<'_, T>, c_map: Var, cfg: &DcafConfig) -> Result<Var> {
    let (_, h, w) = s.value(c_map).dims3("dcaf_forward")?;
    if h < cfg.kernel_size || w < cfg.kernel_size {
        return Err(Error::Dimension(format!(
            "DCAF input {h}x{w} smaller than kernel {}",
            cfg.kernel_size
        )));
    }
    let f = layers::conv(s, "cat.dcaf.f", c_map)?;
    let g = s.adaptive_avg_pool(f, cfg.kernel_size, cfg.kernel_size)?;
    let g = s.scale(g, 1.0 / (cfg.kernel_size * cfg.kernel_size) as f64)?;
    let hx = layers::conv(s, "cat.dcaf.h", c_map)?;
    Ok(s.depthwise_conv2d(hx, g, Padding::Replicate)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatConfig {
    pub eps: f64,
    pub domain: RatioDomain,
    /// Decode with `x^2.2` before taking ratios.
    pub linearize: bool,
    pub init_k: f64,
    pub bank: KernelBank,
    pub dcaf: DcafConfig,
}

impl Default for CatConfig {
    fn default() -> Self {
        Self {
            eps: MODEL_EPS,
            domain: RatioDomain::Linear,
            linearize: false,
            init_k: 2.0,
            bank: KernelBank::default(),
            dcaf: DcafConfig::default(),
        }
    }
}

impl CatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("ratio eps must be positive, got {}", self.eps)));
        }
        DensityParams::with_k(self.init_k)?;
        self.dcaf.validate()?;
        if self.dcaf.in_channels != self.bank.out_channels() {
            return Err(Error::Config(format!(
                "DCAF expects {} input channels but the kernel bank yields {}",
                self.dcaf.in_channels,
                self.bank.out_channels()
            )));
        }
        Ok(())
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, ps: &mut ParamSet<T>, rng: &mut R, with_dcaf: bool) {
        ps.insert("cat.kappa", Tensor::scalar(T::cast(self.init_k.ln())));
        if with_dcaf {
            self.dcaf.init(ps, rng);
        }
    }
}

/// Descriptor before DCAF: ratios, density scaling (linear domain only;
/// the log domain feeds the ratios straight to the kernel bank), then the
/// kernel bank. Uses the `cat.kappa` parameter.
pub fn cat_features<T: Scalar>(s: &mut Session<'_, T>, img: &SrgbImage<T>, cfg: &CatConfig) -> Result<Var> {
    let (h, w) = img.dims();
    check_kernel_fits(&cfg.bank, h, w)?;
    let src;
    let img = if cfg.linearize {
        src = img.linearized();
        &src
    } else {
        img
    };
    let ratios = channel_ratios(img, cfg.eps, cfg.domain);
    let r = s.constant(ratios.to_tensor())?;
    let desc = match cfg.domain {
        RatioDomain::Linear => {
            let imax = intensity_max(img);
            let base = Tensor::new(
                vec![h, w],
                imax.data.iter().map(|v| T::cast(density_base(v.widen(), TAU))).collect(),
            )?;
            let kappa = s.param("cat.kappa")?;
            s.density_scale(r, base, kappa)?
        }
        RatioDomain::Log => r,
    };
    let bank = s.constant(cfg.bank.weight())?;
    Ok(s.conv2d(desc, bank, Padding::Replicate)?)
}

/// Full transform: [`cat_features`], `asinh` range compression, then
/// [`dcaf_forward`]. Linear ratios against a clipped channel reach `1/eps`,
/// which no learned filter can take raw.
pub fn cat_pipeline<T: Scalar>(s: &mut Session<'_, T>, img: &SrgbImage<T>, cfg: &CatConfig) -> Result<Var> {
    let feats = cat_features(s, img, cfg)?;
    let feats = s.asinh(feats)?;
    dcaf_forward(s, feats, &cfg.dcaf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn px(r: f64, g: f64, b: f64) -> SrgbImage<f64> {
        SrgbImage::filled(1, 1, [r, g, b])
    }

    #[test]
    fn ratios_of_a_pixel() {
        let d = channel_ratios(&px(0.8, 0.4, 0.2), DEFAULT_EPS, RatioDomain::Linear);
        for (got, want) in d.data.iter().zip([2.0, 4.0, 2.0]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn gray_maps_to_identity() {
        let img = SrgbImage::<f64>::from_fn(4, 4, |y, x| {
            let v = (y * 4 + x) as f64 / 15.0;
            [v, v, v]
        });
        assert!(channel_ratios(&img, DEFAULT_EPS, RatioDomain::Linear).data.iter().all(|&v| v == 1.0));
        assert!(channel_ratios(&img, DEFAULT_EPS, RatioDomain::Log).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn halving_illumination_keeps_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = SrgbImage::<f64>::from_fn(8, 8, |_, _| [rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0)]);
        let a = channel_ratios(&img, DEFAULT_EPS, RatioDomain::Linear);
        let b = channel_ratios(&img.map(|v| 0.5 * v), DEFAULT_EPS, RatioDomain::Linear);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() / x.abs() < 1e-6);
        }
    }

    #[test]
    fn cross_ratio_cases() {
        let img = SrgbImage::<f64>::new(1, 2, vec![0.8, 0.4, 0.3, 0.4, 0.4, 0.6]).unwrap();
        assert_eq!(cross_color_ratio(&img, (0, 1), (0, 1), DEFAULT_EPS).unwrap(), [1.0, 1.0, 1.0]);
        let m = cross_color_ratio(&img, (0, 0), (0, 1), DEFAULT_EPS).unwrap();
        assert!((m[0] - 2.0).abs() < 1e-6);
        assert!(matches!(cross_color_ratio(&img, (0, 0), (1, 0), DEFAULT_EPS), Err(Error::OutOfBounds(..))));
    }

    #[test]
    fn density_closed_forms() {
        let one = DensityParams::with_k(1.0).unwrap();
        let two = DensityParams::with_k(2.0).unwrap();
        assert!((density_factor(1.0, &one) - (1.0 + 1e-8)).abs() < 1e-12);
        assert!((density_factor(0.0, &two) - 1e-4).abs() < 1e-12);
        assert!((density_factor(1.0 / 3.0, &one) - (0.5 + 1e-8)).abs() < 1e-12);
        assert!(DensityParams::with_k(0.0).is_err());
    }

    #[test]
    fn density_scale_rejects_log_and_mismatch() {
        let img = px(0.2, 0.3, 0.4);
        let p = DensityParams::with_k(2.0).unwrap();
        let log = channel_ratios(&img, DEFAULT_EPS, RatioDomain::Log);
        assert!(density_scale(&log, &intensity_max(&img), &p).is_err());
        let lin = channel_ratios(&img, DEFAULT_EPS, RatioDomain::Linear);
        let other = intensity_max(&SrgbImage::<f64>::filled(2, 1, [0.1; 3]));
        assert!(density_scale(&lin, &other, &p).is_err());
    }

    #[test]
    fn kernel_validation() {
        assert!(Kernel::new("bad", 3, KernelKind::Smoothing, vec![0.1; 9]).is_err());
        assert!(Kernel::new("even", 2, KernelKind::Differential, vec![0.0; 4]).is_err());
        let g = Kernel::gaussian(3, 1.0).unwrap();
        assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(KernelBank::new(vec![]).is_err());
    }

    #[test]
    fn smoothing_preserves_constants() {
        let img = px(0.6, 0.3, 0.2);
        let big = SrgbImage::<f64>::filled(6, 5, img.pixel(0, 0).map(|v| v));
        let d = channel_ratios(&big, DEFAULT_EPS, RatioDomain::Linear);
        let bank = KernelBank::new(vec![Kernel::gaussian(3, 1.0).unwrap()]).unwrap();
        let f = kernel_features(&d, &bank).unwrap();
        for c in 0..3 {
            let want = d.channel(c)[0];
            assert!(f.data()[c * 30..(c + 1) * 30].iter().all(|v| (v - want).abs() < 1e-12));
        }
    }

    #[test]
    fn kernel_larger_than_image_is_an_error() {
        let d = channel_ratios(&SrgbImage::<f64>::filled(2, 5, [0.5; 3]), DEFAULT_EPS, RatioDomain::Linear);
        assert!(kernel_features(&d, &KernelBank::default()).is_err());
    }
}

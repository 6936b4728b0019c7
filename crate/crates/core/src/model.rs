//! The assembled model: CAT descriptor → CNDN → backbone.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use picat_tensor::{ParamSet, Scalar, Session, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, LossWeights};
use crate::cat::{self, CatConfig};
use crate::cndn::{self, CndnConfig};
use crate::error::{Error, Result};
use crate::image::SrgbImage;
use crate::layers::{self, Init};

/// Which stages are active. With CST off the descriptor branch sees the
/// raw image; with CNDN off but CST on the descriptor is merged through a
/// plain conv stack (`fuse.*`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Variant {
    pub cst: bool,
    pub dcaf: bool,
    pub cndn: bool,
}

impl Variant {
    pub const BASELINE: Self = Self::new(false, false, false);
    pub const CST: Self = Self::new(true, false, false);
    pub const CST_DCAF: Self = Self::new(true, true, false);
    pub const FULL: Self = Self::new(true, true, true);
    /// CNDN fed with the raw image instead of the CAT descriptor.
    pub const NO_CST: Self = Self::new(false, false, true);

    pub const fn new(cst: bool, dcaf: bool, cndn: bool) -> Self {
        Self { cst, dcaf, cndn }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dcaf && !self.cst {
            return Err(Error::Config("DCAF requires CST".into()));
        }
        Ok(())
    }

    /// Rows of the break-down ablation, weakest first.
    pub fn ablation_ladder() -> [Self; 4] {
        [Self::BASELINE, Self::CST, Self::CST_DCAF, Self::FULL]
    }
}

impl Default for Variant {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match (self.cst, self.dcaf, self.cndn) {
            (false, false, false) => "baseline",
            (true, false, false) => "cst",
            (true, true, false) => "cst+dcaf",
            (true, true, true) => "full",
            (false, false, true) => "no-cst",
            (true, false, true) => "cst+cndn",
            _ => "invalid",
        };
        f.write_str(name)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v = match s {
            "baseline" => Self::BASELINE,
            "cst" => Self::CST,
            "cst+dcaf" => Self::CST_DCAF,
            "full" => Self::FULL,
            "no-cst" => Self::NO_CST,
            "cst+cndn" => Self::new(true, false, true),
            other => return Err(Error::Config(format!("unknown variant `{other}`"))),
        };
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitMode {
    /// Output projections of residual branches start at zero, so the
    /// untrained model is the identity.
    #[default]
    Standard,
    /// Every tensor random; used by gradient checks so no path is dead.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub cat: CatConfig,
    pub cndn: CndnConfig,
    pub backbone: BackboneConfig,
    pub loss: LossWeights,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        self.cat.validate()?;
        self.cndn.validate()?;
        self.backbone.validate()
    }

    /// Channel count of the descriptor handed to CNDN / the fuse stack.
    pub fn descriptor_channels(&self) -> usize {
        match (self.variant.cst, self.variant.dcaf) {
            (false, _) => 3,
            (true, false) => self.cat.bank.out_channels(),
            (true, true) => self.cat.dcaf.channels,
        }
    }
}

/// Handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub input: Var,
    pub x_tilde: Var,
    pub enhanced: Var,
    pub noise: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct PiCat<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> PiCat<T> {
    pub fn new(config: ModelConfig, seed: u64, mode: InitMode) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zero = match mode {
            InitMode::Standard => Init::Zero,
            InitMode::Random => Init::Lecun,
        };
        let mut ps = ParamSet::new();
        let v = config.variant;
        if v.cst {
            config.cat.init(&mut ps, &mut rng, v.dcaf);
        }
        let dc = config.descriptor_channels();
        if v.cndn {
            config.cndn.init(&mut ps, &mut rng, dc, zero);
        } else if v.cst {
            config.cndn.init_embed(&mut ps, &mut rng, "fuse.embed", dc);
            layers::init_conv(&mut ps, &mut rng, "fuse.out", config.cndn.dim, 3, config.cndn.conv_size, zero);
        }
        config.backbone.init(&mut ps, &mut rng, zero);
        Ok(Self { config, params: ps })
    }

    pub fn with_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let fresh = Self::new(config, 0, InitMode::Standard)?;
        let expected: Vec<(&str, &[usize])> = fresh.params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        if expected != got {
            let missing: Vec<_> = expected.iter().filter(|e| !got.contains(e)).map(|e| e.0).collect();
            let extra: Vec<_> = got.iter().filter(|e| !expected.contains(e)).map(|e| e.0).collect();
            return Err(Error::Config(format!(
                "checkpoint does not match the {} model: missing or reshaped {missing:?}, unexpected {extra:?}",
                fresh.config.variant
            )));
        }
        Ok(Self { config: fresh.config, params })
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        Self::with_params(config, ParamSet::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.params.save(path)?)
    }

    pub fn session(&self) -> Session<'_, T> {
        Session::new(&self.params)
    }

    /// Descriptor `y` fed to CNDN (or the fuse stack); `None` for the baseline.
    pub fn descriptor(&self, s: &mut Session<'_, T>, img: &SrgbImage<T>, x: Var) -> Result<Option<Var>> {
        let v = self.config.variant;
        Ok(match (v.cst, v.dcaf, v.cndn) {
            (false, _, false) => None,
            (false, _, true) => Some(x),
            (true, false, _) => {
                let f = cat::cat_features(s, img, &self.config.cat)?;
                Some(s.asinh(f)?)
            }
            (true, true, _) => Some(cat::cat_pipeline(s, img, &self.config.cat)?),
        })
    }

    pub fn forward(&self, s: &mut Session<'_, T>, img: &SrgbImage<T>) -> Result<Forward> {
        let x = s.constant(img.to_tensor())?;
        let y = self.descriptor(s, img, x)?;
        let (x_tilde, noise) = match y {
            None => (x, None),
            Some(y) if self.config.variant.cndn => {
                let out = cndn::decompose(s, &self.config.cndn, x, y)?;
                (out.x_tilde, Some(out.noise))
            }
            Some(y) => {
                let e = cndn::embed(s, "fuse.embed", y)?;
                let c = layers::conv(s, "fuse.out", e)?;
                (s.add(x, c)?, None)
            }
        };
        let enhanced = backbone::forward(s, &self.config.backbone, x_tilde)?;
        Ok(Forward {
            input: x,
            x_tilde,
            enhanced,
            noise,
        })
    }

    /// Training objective for one pair.
    pub fn loss(&self, s: &mut Session<'_, T>, low: &SrgbImage<T>, high: &SrgbImage<T>) -> Result<Var> {
        if low.dims() != high.dims() {
            return Err(Error::Dimension(format!("pair dims {:?} vs {:?}", low.dims(), high.dims())));
        }
        let f = self.forward(s, low)?;
        let t = s.constant(high.to_tensor())?;
        backbone::loss(s, f.enhanced, t, f.noise, &self.config.loss)
    }

    /// Enhanced image, clamped to `[0,1]` on export.
    pub fn enhance(&self, img: &SrgbImage<T>) -> Result<SrgbImage<T>> {
        let mut s = self.session();
        let f = self.forward(&mut s, img)?;
        SrgbImage::from_tensor(s.value(f.enhanced))
    }
}

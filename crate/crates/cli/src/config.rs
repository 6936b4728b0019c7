//! Resolved per-command configuration: defaults ← JSON file ← flags.

use std::path::{Path, PathBuf};

use picat_core::cat::{CatConfig, DEFAULT_EPS, Kernel, KernelBank, RatioDomain};
use picat_core::model::{ModelConfig, Variant};
use picat_core::perturb::PerturbKind;
use picat_core::synth::SynthSpec;
use picat_core::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::{self, Domain, Kind};
use crate::error::CliError;

/// Reads `path` into `C`, starting from `C::default()` for missing keys.
/// Unknown keys are usage errors.
pub fn load<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C, CliError> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn domain(d: Domain) -> RatioDomain {
    match d {
        Domain::Linear => RatioDomain::Linear,
        Domain::Log => RatioDomain::Log,
    }
}

pub fn kind(k: Kind) -> PerturbKind {
    match k {
        Kind::Spatial => PerturbKind::Spatial,
        Kind::Frequency => PerturbKind::Frequency,
    }
}

fn apply_model_flags(m: &mut ModelConfig, f: &args::ModelFlags) -> Result<(), CliError> {
    if let Some(v) = &f.variant {
        m.variant = v.parse::<Variant>().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(d) = f.domain {
        m.cat.domain = domain(d);
    }
    if f.linearize {
        m.cat.linearize = true;
    }
    m.validate().map_err(|e| CliError::Usage(e.to_string()))
}

fn out_or(out: &Option<PathBuf>, current: &mut PathBuf) {
    if let Some(o) = out {
        *current = o.clone();
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfig {
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    pub cat: CatConfig,
    pub checkpoint: Option<PathBuf>,
    pub heatmaps: bool,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            input: None,
            out: "runs/transform".into(),
            cat: CatConfig { eps: DEFAULT_EPS, ..CatConfig::default() },
            checkpoint: None,
            heatmaps: true,
        }
    }
}

impl TransformConfig {
    pub fn resolve(a: &args::TransformArgs) -> Result<Self, CliError> {
        let mut c: Self = load(a.common.config.as_deref())?;
        out_or(&a.common.out, &mut c.out);
        if a.input.is_some() {
            c.input = a.input.clone();
        }
        if let Some(d) = a.domain {
            c.cat.domain = domain(d);
        }
        if !a.kernels.is_empty() {
            let kernels = a
                .kernels
                .iter()
                .map(|k| Kernel::by_name(k))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            c.cat.bank = KernelBank::new(kernels).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        if let Some(eps) = a.eps {
            c.cat.eps = eps;
        }
        if let Some(k) = a.k {
            c.cat.init_k = k;
        }
        if a.linearize {
            c.cat.linearize = true;
        }
        if a.checkpoint.is_some() {
            c.checkpoint = a.checkpoint.clone();
        }
        if c.input.is_none() {
            return Err(CliError::Usage("transform needs --input".into()));
        }
        if !(c.cat.eps > 0.0) || !(c.cat.init_k > 0.0) {
            return Err(CliError::Usage("eps and k must be positive".into()));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub synth: SynthSpec,
    pub val_synth: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Required validation gain over the degraded inputs.
    pub min_gain_db: f64,
    pub strict: bool,
}

pub fn default_val_synth() -> SynthSpec {
    SynthSpec {
        count: 24,
        seed: 1000,
        ..SynthSpec::default()
    }
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            out: "runs/train".into(),
            data: None,
            val_data: None,
            synth: SynthSpec::default(),
            val_synth: default_val_synth(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            min_gain_db: 3.0,
            strict: false,
        }
    }
}

impl TrainRunConfig {
    pub fn resolve(a: &args::TrainArgs) -> Result<Self, CliError> {
        let mut c: Self = load(a.common.config.as_deref())?;
        out_or(&a.common.out, &mut c.out);
        if let Some(d) = &a.data {
            c.data = Some(d.clone());
        }
        if let Some(n) = a.synth {
            c.synth.count = n;
            c.data = None;
        }
        if let Some(s) = a.common.seed {
            c.train.seed = s;
            c.synth.seed = s;
        }
        if let Some(v) = a.steps {
            c.train.total_steps = v;
        }
        if let Some(v) = a.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = a.patch_size {
            c.train.patch_size = v;
        }
        if let Some(v) = a.lr {
            c.train.lr = v;
        }
        if a.train_noise.is_some() {
            c.train.train_noise = a.train_noise;
        }
        if let Some(n) = a.val_count {
            c.val_synth.count = n;
        }
        if a.strict {
            c.strict = true;
        }
        apply_model_flags(&mut c.model, &a.model)?;
        c.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhanceConfig {
    pub checkpoint: Option<PathBuf>,
    pub model_config: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            model_config: None,
            input: None,
            out: "runs/enhance".into(),
        }
    }
}

impl EnhanceConfig {
    pub fn resolve(a: &args::EnhanceArgs) -> Result<Self, CliError> {
        let mut c: Self = load(a.common.config.as_deref())?;
        out_or(&a.common.out, &mut c.out);
        if a.checkpoint.is_some() {
            c.checkpoint = a.checkpoint.clone();
        }
        if a.model_config.is_some() {
            c.model_config = a.model_config.clone();
        }
        if a.input.is_some() {
            c.input = a.input.clone();
        }
        if c.checkpoint.is_none() || c.input.is_none() {
            return Err(CliError::Usage("enhance needs --checkpoint and --input".into()));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub model_config: Option<PathBuf>,
    pub identity: bool,
    pub data: Option<PathBuf>,
    pub synth: SynthSpec,
    pub sweep: Vec<f64>,
    pub kind: PerturbKind,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            model_config: None,
            identity: false,
            data: None,
            synth: default_val_synth(),
            sweep: Vec::new(),
            kind: PerturbKind::Spatial,
            seed: 7,
            out: "runs/eval".into(),
        }
    }
}

impl EvalConfig {
    pub fn resolve(a: &args::EvalArgs) -> Result<Self, CliError> {
        let mut c: Self = load(a.common.config.as_deref())?;
        out_or(&a.common.out, &mut c.out);
        if a.checkpoint.is_some() {
            c.checkpoint = a.checkpoint.clone();
        }
        if a.model_config.is_some() {
            c.model_config = a.model_config.clone();
        }
        if a.identity {
            c.identity = true;
        }
        if let Some(d) = &a.data {
            c.data = Some(d.clone());
        }
        if let Some(n) = a.synth {
            c.synth.count = n;
            c.data = None;
        }
        if let Some(s) = &a.sweep {
            c.sweep = s.clone();
        }
        if let Some(k) = a.kind {
            c.kind = kind(k);
        }
        if let Some(s) = a.common.seed {
            c.seed = s;
        }
        if c.identity == c.checkpoint.is_some() {
            return Err(CliError::Usage("eval needs exactly one of --checkpoint or --identity".into()));
        }
        if c.sweep.iter().any(|s| !(*s >= 0.0)) {
            return Err(CliError::Usage("sweep levels must be >= 0".into()));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    pub kind: PerturbKind,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            input: None,
            out: "runs/perturb".into(),
            kind: PerturbKind::Spatial,
            sigma: 15.0,
            seed: 7,
        }
    }
}

impl PerturbConfig {
    pub fn resolve(a: &args::PerturbArgs) -> Result<Self, CliError> {
        let mut c: Self = load(a.common.config.as_deref())?;
        out_or(&a.common.out, &mut c.out);
        if a.input.is_some() {
            c.input = a.input.clone();
        }
        if let Some(k) = a.kind {
            c.kind = kind(k);
        }
        if let Some(s) = a.sigma {
            c.sigma = s;
        }
        if let Some(s) = a.common.seed {
            c.seed = s;
        }
        if c.input.is_none() {
            return Err(CliError::Usage("perturb needs --input".into()));
        }
        if !(c.sigma >= 0.0) {
            return Err(CliError::Usage(format!("sigma must be >= 0, got {}", c.sigma)));
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckModule {
    Cat,
    Dcaf,
    Cndn,
    Backbone,
    All,
}

impl CheckModule {
    pub fn selects(self, name: &str) -> bool {
        match self {
            Self::Cat => name.starts_with("cat."),
            Self::Dcaf => name.starts_with("cat.dcaf."),
            Self::Cndn => name.starts_with("cndn.") || name.starts_with("fuse."),
            Self::Backbone => name.starts_with("backbone."),
            Self::All => true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub module: CheckModule,
    pub model: ModelConfig,
    pub size: usize,
    pub seed: u64,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub out: PathBuf,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            module: CheckModule::All,
            model: ModelConfig::default(),
            size: 16,
            seed: 1,
            step: 1e-3,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
            out: "runs/gradcheck".into(),
        }
    }
}

impl GradcheckConfig {
    pub fn resolve(a: &args::GradcheckArgs) -> Result<Self, CliError> {
        let mut c: Self = load(a.common.config.as_deref())?;
        out_or(&a.common.out, &mut c.out);
        if let Some(m) = a.module {
            c.module = match m {
                args::Module::Cat => CheckModule::Cat,
                args::Module::Dcaf => CheckModule::Dcaf,
                args::Module::Cndn => CheckModule::Cndn,
                args::Module::Backbone => CheckModule::Backbone,
                args::Module::All => CheckModule::All,
            };
        }
        if let Some(s) = a.size {
            c.size = s;
        }
        if let Some(s) = a.common.seed {
            c.seed = s;
        }
        if let Some(s) = a.step {
            c.step = s;
        }
        c.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if c.size < 3 || !(c.step > 0.0) {
            return Err(CliError::Usage("gradcheck needs --size >= 3 and a positive step".into()));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            out: "runs/report".into(),
        }
    }
}

impl ReportConfig {
    pub fn resolve(a: &args::ReportArgs) -> Result<Self, CliError> {
        let mut c: Self = load(a.common.config.as_deref())?;
        out_or(&a.common.out, &mut c.out);
        if !a.inputs.is_empty() {
            c.inputs = a.inputs.clone();
        }
        if c.inputs.is_empty() {
            return Err(CliError::Usage("report needs at least one manifest path".into()));
        }
        Ok(c)
    }
}

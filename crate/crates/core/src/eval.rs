//! Evaluation: per-image PSNR/SSIM, perturbation sweeps, ablation runs and
//! report emission.

use std::fmt::Write as _;

use picat_tensor::Scalar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PairedDataset;
use crate::error::{Error, Result};
use crate::image::SrgbImage;
use crate::metrics::{psnr, ssim};
use crate::model::{InitMode, ModelConfig, PiCat, Variant};
use crate::perturb::{perturb, PerturbKind, PerturbSpec};
use crate::train::{self, TrainConfig, TrainReport};

/// Anything that maps a low-light image to an enhanced one.
pub trait Enhancer<T: Scalar>: Sync {
    fn enhance(&self, img: &SrgbImage<T>) -> Result<SrgbImage<T>>;
}

impl<T: Scalar> Enhancer<T> for PiCat<T> {
    fn enhance(&self, img: &SrgbImage<T>) -> Result<SrgbImage<T>> {
        PiCat::enhance(self, img)
    }
}

/// Returns its input.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl<T: Scalar> Enhancer<T> for Identity {
    fn enhance(&self, img: &SrgbImage<T>) -> Result<SrgbImage<T>> {
        Ok(img.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
    /// `None` for clean inputs.
    pub sigma: Option<f64>,
    pub kind: Option<PerturbKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean_psnr_db: f64,
    pub std_psnr_db: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
}

impl Aggregate {
    pub fn of(records: &[&Record]) -> Self {
        let n = records.len();
        let stats = |f: &dyn Fn(&Record) -> f64| {
            if n == 0 {
                return (f64::NAN, f64::NAN);
            }
            let mean = records.iter().map(|r| f(r)).sum::<f64>() / n as f64;
            let var = records.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, var.sqrt())
        };
        let (mean_psnr_db, std_psnr_db) = stats(&|r| r.psnr_db);
        let (mean_ssim, std_ssim) = stats(&|r| r.ssim);
        Self {
            count: n,
            mean_psnr_db,
            std_psnr_db,
            mean_ssim,
            std_ssim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: PerturbKind,
    pub sigma: f64,
    pub aggregate: Aggregate,
    /// `(clean − noisy) / clean` mean PSNR, in percent.
    pub relative_drop_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub records: Vec<Record>,
    pub clean: Aggregate,
    pub sweep: Vec<SweepRow>,
}

impl EvalReport {
    fn assemble(model: String, records: Vec<Record>, specs: &[PerturbSpec]) -> Self {
        let clean = Aggregate::of(&records.iter().filter(|r| r.sigma.is_none()).collect::<Vec<_>>());
        let sweep = specs
            .iter()
            .map(|s| {
                let rows: Vec<&Record> = records
                    .iter()
                    .filter(|r| r.sigma == Some(s.sigma) && r.kind == Some(s.kind))
                    .collect();
                let aggregate = Aggregate::of(&rows);
                SweepRow {
                    kind: s.kind,
                    sigma: s.sigma,
                    relative_drop_pct: relative_drop_pct(clean.mean_psnr_db, aggregate.mean_psnr_db),
                    aggregate,
                }
            })
            .collect();
        Self {
            model,
            records,
            clean,
            sweep,
        }
    }

    /// Recomputes every aggregate from the records and compares.
    pub fn verify(&self) -> Result<()> {
        let specs: Vec<PerturbSpec> = self
            .sweep
            .iter()
            .map(|r| PerturbSpec {
                kind: r.kind,
                sigma: r.sigma,
                seed: 0,
            })
            .collect();
        let again = Self::assemble(self.model.clone(), self.records.clone(), &specs);
        if again != *self {
            return Err(Error::Config("report aggregates do not match their records".into()));
        }
        Ok(())
    }

    pub fn relative_drop_pct(&self, kind: PerturbKind, sigma: f64) -> Option<f64> {
        self.sweep
            .iter()
            .find(|r| r.kind == kind && r.sigma == sigma)
            .map(|r| r.relative_drop_pct)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-image rows: `image,psnr_db,ssim,sigma,kind`.
    pub fn records_csv(&self) -> String {
        let rows = self.records.iter().map(|r| {
            [
                r.image.clone(),
                format!("{:.4}", r.psnr_db),
                format!("{:.6}", r.ssim),
                r.sigma.map(|s| format!("{s}")).unwrap_or_else(|| "0".into()),
                r.kind.map(|k| k.to_string()).unwrap_or_else(|| "clean".into()),
            ]
        });
        aligned_csv(rows)
    }

    /// One `mean` row for the clean set and one per perturbation level.
    pub fn sweep_csv(&self) -> String {
        let clean = [
            "mean".to_string(),
            format!("{:.4}", self.clean.mean_psnr_db),
            format!("{:.6}", self.clean.mean_ssim),
            "0".into(),
            "clean".into(),
        ];
        let rows = std::iter::once(clean).chain(self.sweep.iter().map(|r| {
            [
                "mean".to_string(),
                format!("{:.4}", r.aggregate.mean_psnr_db),
                format!("{:.6}", r.aggregate.mean_ssim),
                format!("{}", r.sigma),
                r.kind.to_string(),
            ]
        }));
        aligned_csv(rows)
    }
}

pub const CSV_HEADER: [&str; 5] = ["image", "psnr_db", "ssim", "sigma", "kind"];

/// Comma-separated with every field right-aligned to its column width.
fn aligned_csv(rows: impl Iterator<Item = [String; 5]>) -> String {
    let mut all: Vec<[String; 5]> = vec![CSV_HEADER.map(String::from)];
    all.extend(rows);
    let mut widths = [0; 5];
    for r in &all {
        for (w, f) in widths.iter_mut().zip(r) {
            *w = (*w).max(f.len());
        }
    }
    let mut out = String::new();
    for r in &all {
        let line: Vec<String> = r.iter().zip(widths).map(|(f, w)| format!("{f:>w$}")).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

pub fn relative_drop_pct(clean_db: f64, noisy_db: f64) -> f64 {
    100.0 * (clean_db - noisy_db) / clean_db
}

/// Perturbation seed for image `i`, so images get independent noise.
fn image_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Enhances every low image (clean, then once per perturbation) and scores
/// it against its high partner. Images are processed in parallel; records
/// come out in dataset order.
pub fn evaluate<T: Scalar, E: Enhancer<T>>(
    model: &E,
    name: &str,
    data: &PairedDataset<T>,
    perturbations: &[PerturbSpec],
) -> Result<EvalReport> {
    for p in perturbations {
        p.validate()?;
    }
    let levels: Vec<Option<PerturbSpec>> = std::iter::once(None).chain(perturbations.iter().copied().map(Some)).collect();
    let jobs: Vec<(Option<PerturbSpec>, usize)> = levels
        .iter()
        .flat_map(|l| (0..data.len()).map(move |i| (*l, i)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(level, i)| {
            let pair = &data.pairs()[i];
            let input = match level {
                None => pair.low.clone(),
                Some(spec) => perturb(
                    &pair.low,
                    &PerturbSpec {
                        seed: image_seed(spec.seed, i),
                        ..spec
                    },
                )?,
            };
            let out = model.enhance(&input)?;
            if out.dims() != pair.high.dims() {
                return Err(Error::Dimension(format!("{}: output {:?}", pair.name, out.dims())));
            }
            Ok(Record {
                image: pair.name.clone(),
                psnr_db: psnr(&out, &pair.high)?,
                ssim: ssim(&out, &pair.high)?,
                sigma: level.map(|s| s.sigma),
                kind: level.map(|s| s.kind),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::assemble(name.to_owned(), records, perturbations);
    report.verify()?;
    Ok(report)
}

/// Degraded inputs scored against targets.
pub fn input_aggregate<T: Scalar>(data: &PairedDataset<T>) -> Result<Aggregate> {
    Ok(evaluate(&Identity, "input", data, &[])?.clean)
}

pub fn enhance_aggregate<T: Scalar>(model: &PiCat<T>, data: &PairedDataset<T>) -> Result<Aggregate> {
    Ok(evaluate(model, "model", data, &[])?.clean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub cst: bool,
    pub dcaf: bool,
    pub cndn: bool,
    pub params: usize,
    pub final_psnr_db: f64,
    pub final_ssim: f64,
    pub input_psnr_db: f64,
    pub smoothed_start: f64,
    pub smoothed_end: f64,
}

/// Trains every variant from the same seed and schedule and scores it on
/// `val`. Invalid variants are rejected before any training starts.
pub fn ablation_run<T: Scalar>(
    variants: &[Variant],
    base: &ModelConfig,
    cfg: &TrainConfig,
    data: &PairedDataset<T>,
    val: &PairedDataset<T>,
) -> Result<Vec<(AblationRow, PiCat<T>, TrainReport)>> {
    for v in variants {
        v.validate()?;
    }
    variants
        .iter()
        .map(|&variant| {
            let config = ModelConfig { variant, ..base.clone() };
            let (model, report) = train_variant(config, cfg, data, val)?;
            let out = report.output.clone().expect("validation set given");
            let row = AblationRow {
                variant: variant.to_string(),
                cst: variant.cst,
                dcaf: variant.dcaf,
                cndn: variant.cndn,
                params: model.params.numel(),
                final_psnr_db: out.mean_psnr_db,
                final_ssim: out.mean_ssim,
                input_psnr_db: report.input.as_ref().map_or(f64::NAN, |a| a.mean_psnr_db),
                smoothed_start: report.smoothed_start,
                smoothed_end: report.smoothed_end,
            };
            Ok((row, model, report))
        })
        .collect()
}

/// Fresh model seeded by `cfg.seed`, trained on `data`, validated on `val`.
pub fn train_variant<T: Scalar>(
    config: ModelConfig,
    cfg: &TrainConfig,
    data: &PairedDataset<T>,
    val: &PairedDataset<T>,
) -> Result<(PiCat<T>, TrainReport)> {
    let mut model = PiCat::new(config, cfg.seed, InitMode::Standard)?;
    let report = train::train(&mut model, data, Some(val), cfg, |_| {})?;
    Ok((model, report))
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,cst,dcaf,cndn,params,psnr_db,ssim,input_psnr_db\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.4},{:.6},{:.4}",
            r.variant, r.cst, r.dcaf, r.cndn, r.params, r.final_psnr_db, r.final_ssim, r.input_psnr_db
        );
    }
    out
}

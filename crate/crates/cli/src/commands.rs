//! Subcommand bodies. Each takes its resolved config and the run manifest
//! to fill in.

use std::path::{Path, PathBuf};

use picat_core::cat::{self, DensityParams, RatioDomain};
use picat_core::eval::{self, Enhancer, EvalReport, Identity};
use picat_core::image::{intensity_max, load_png, save_png, SrgbImage};
use picat_core::manifest::{RunManifest, RunStatus};
use picat_core::model::{InitMode, ModelConfig, PiCat};
use picat_core::perturb::{perturb, PerturbSpec};
use picat_core::synth::synthetic_pairs;
use picat_core::train::{self, StepLog};
use picat_core::{Dataset, Image};
use picat_tensor::{grad_check_where, GradCheckConfig, ParamSet, Session, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::config::*;
use crate::error::CliError;

/// PNG files named by `input`: the file itself, or a directory's `*.png`
/// sorted by name.
pub fn list_pngs(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_owned()]);
    }
    if !input.is_dir() {
        return Err(CliError::Runtime(format!("{}: no such file or directory", input.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Runtime(format!("{}: no PNG files", input.display())));
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

/// Single-channel map rendered gray, min-max normalized. A flat map
/// renders black. Diagnostic only.
fn heatmap(values: &[f32], h: usize, w: usize) -> Image {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo) as f64;
    Image::from_fn(h, w, |y, x| {
        let v = if span > 0.0 { (values[y * w + x] - lo) as f64 / span } else { 0.0 };
        [v; 3]
    })
}

pub fn transform(c: &TransformConfig, m: &mut RunManifest) -> Result<(), CliError> {
    let files = list_pngs(c.input.as_deref().expect("resolved"))?;
    std::fs::create_dir_all(&c.out)?;
    let ckpt = c.checkpoint.as_deref().map(ParamSet::<f32>::load).transpose()?;
    let kappa = match &ckpt {
        Some(ps) => ps.get("cat.kappa")?.item() as f64,
        None => c.cat.init_k.ln(),
    };
    let density = DensityParams { kappa, tau: cat::TAU };
    let outputs = files
        .par_iter()
        .map(|path| -> Result<String, CliError> {
            let mut img: Image = load_png(path)?;
            if c.cat.linearize {
                img = img.linearized();
            }
            let (h, w) = img.dims();
            let ratios = cat::channel_ratios(&img, c.cat.eps, c.cat.domain);
            let c_map = match c.cat.domain {
                RatioDomain::Linear => cat::density_scale(&ratios, &intensity_max(&img), &density)?,
                RatioDomain::Log => ratios.clone(),
            };
            let features = cat::kernel_features(&c_map, &c.cat.bank)?;
            let mut dump = ParamSet::<f32>::new();
            dump.insert("ratios", ratios.to_tensor());
            dump.insert("c_map", c_map.to_tensor());
            if let Some(ps) = &ckpt {
                let mut s = Session::new(ps);
                let f = s.constant(features.clone())?;
                let f = s.asinh(f)?;
                let out = cat::dcaf_forward(&mut s, f, &c.cat.dcaf)?;
                dump.insert("dcaf", s.value(out).clone());
            }
            dump.insert("features", features);
            let name = stem(path);
            dump.save(&c.out.join(format!("{name}.pict")))?;
            if c.heatmaps {
                for (i, tag) in ["rg", "rb", "gb"].iter().enumerate() {
                    save_png(&heatmap(c_map.channel(i), h, w), c.out.join(format!("{name}_cmap_{tag}.png")))?;
                }
            }
            Ok(name)
        })
        .collect::<Result<Vec<_>, _>>()?;
    m.metrics = json!({ "images": outputs });
    Ok(())
}

fn load_data(dir: &Option<PathBuf>, synth: &picat_core::synth::SynthSpec) -> Result<Dataset, CliError> {
    Ok(match dir {
        Some(d) => Dataset::load_dir(d)?,
        None => synthetic_pairs(synth)?,
    })
}

pub fn train(c: &TrainRunConfig, m: &mut RunManifest) -> Result<(), CliError> {
    let data = load_data(&c.data, &c.synth)?;
    let val = match (&c.val_data, &c.data) {
        (Some(v), _) => Dataset::load_dir(v)?,
        (None, None) => synthetic_pairs(&c.val_synth)?,
        (None, Some(_)) => data.clone(),
    };
    std::fs::create_dir_all(&c.out)?;
    let mut model = PiCat::<f32>::new(c.model.clone(), c.train.seed, InitMode::Standard)?;
    std::fs::write(c.out.join("model.json"), serde_json::to_string_pretty(&c.model)? + "\n")?;
    let mut log: Vec<StepLog> = Vec::new();
    let report = train::train(&mut model, &data, Some(&val), &c.train, |s| {
        if s.step % 50 == 0 {
            eprintln!("step {:>5}  loss {:.5}  lr {:.3e}", s.step, s.loss, s.lr);
        }
        log.push(*s);
    })?;
    model.save(&c.out.join("checkpoint.pict"))?;
    let mut csv = String::from("step,loss,lr\n");
    for s in &log {
        csv.push_str(&format!("{},{:.8},{:.6e}\n", s.step, s.loss, s.lr));
    }
    std::fs::write(c.out.join("losses.csv"), csv)?;

    let gain = report.psnr_gain_db().unwrap_or(f64::NAN);
    m.check("psnr_gain_db", gain, c.min_gain_db, gain >= c.min_gain_db);
    let delta = report.smoothed_end - report.smoothed_start;
    m.check("smoothed_loss_change", delta, 0.0, delta < 0.0);
    m.metrics = json!({
        "params": model.params.numel(),
        "smoothed_loss_start": report.smoothed_start,
        "smoothed_loss_end": report.smoothed_end,
        "input": report.input,
        "output": report.output,
        "validation": report.validation,
        "train_secs": report.elapsed_secs,
    });
    if c.strict && !m.checks_passed() {
        return Err(CliError::Check("training checks failed".into()));
    }
    Ok(())
}

fn load_model(checkpoint: &Path, model_config: &Option<PathBuf>) -> Result<PiCat<f32>, CliError> {
    let cfg_path = model_config
        .clone()
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("model.json"));
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| CliError::Runtime(format!("{}: {e}", cfg_path.display())))?;
    let config: ModelConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", cfg_path.display())))?;
    Ok(PiCat::load(config, checkpoint)?)
}

pub fn enhance(c: &EnhanceConfig, m: &mut RunManifest) -> Result<(), CliError> {
    let model = load_model(c.checkpoint.as_deref().expect("resolved"), &c.model_config)?;
    let files = list_pngs(c.input.as_deref().expect("resolved"))?;
    std::fs::create_dir_all(&c.out)?;
    let names = files
        .par_iter()
        .map(|path| -> Result<String, CliError> {
            let img: Image = load_png(path)?;
            let out = model.enhance(&img)?;
            let name = format!("{}.png", stem(path));
            save_png(&out, c.out.join(&name))?;
            Ok(name)
        })
        .collect::<Result<Vec<_>, _>>()?;
    m.metrics = json!({ "outputs": names });
    Ok(())
}

pub fn eval(c: &EvalConfig, m: &mut RunManifest) -> Result<(), CliError> {
    let data = load_data(&c.data, &c.synth)?;
    let specs: Vec<PerturbSpec> = c
        .sweep
        .iter()
        .map(|&sigma| PerturbSpec {
            kind: c.kind,
            sigma,
            seed: c.seed,
        })
        .collect();
    let report: EvalReport = match &c.checkpoint {
        Some(ckpt) => {
            let model = load_model(ckpt, &c.model_config)?;
            run_eval(&model, &model.config.variant.to_string(), &data, &specs)?
        }
        None => run_eval(&Identity, "identity", &data, &specs)?,
    };
    std::fs::create_dir_all(&c.out)?;
    let id = &m.run_id;
    std::fs::write(c.out.join(format!("eval_{id}.json")), report.to_json()? + "\n")?;
    std::fs::write(c.out.join(format!("eval_{id}.csv")), report.records_csv())?;
    if !specs.is_empty() {
        let levels: Vec<String> = c.sweep.iter().map(|s| s.to_string()).collect();
        let name = format!("sweep_{id}_{}_{}.csv", c.kind, levels.join("-"));
        std::fs::write(c.out.join(name), report.sweep_csv())?;
    }
    let consistent = report.verify().is_ok();
    m.check("aggregates_recomputable", consistent as u8 as f64, 1.0, consistent);
    m.metrics = json!({ "clean": report.clean, "sweep": report.sweep });
    if !consistent {
        return Err(CliError::Check("report aggregates differ from their records".into()));
    }
    Ok(())
}

fn run_eval<E: Enhancer<f32>>(model: &E, name: &str, data: &Dataset, specs: &[PerturbSpec]) -> Result<EvalReport, CliError> {
    Ok(eval::evaluate(model, name, data, specs)?)
}

pub fn perturb_cmd(c: &PerturbConfig, m: &mut RunManifest) -> Result<(), CliError> {
    let files = list_pngs(c.input.as_deref().expect("resolved"))?;
    std::fs::create_dir_all(&c.out)?;
    let names = files
        .par_iter()
        .enumerate()
        .map(|(i, path)| -> Result<String, CliError> {
            let img: Image = load_png(path)?;
            let spec = PerturbSpec {
                kind: c.kind,
                sigma: c.sigma,
                seed: c.seed.wrapping_add(i as u64),
            };
            let name = format!("{}.png", stem(path));
            save_png(&perturb(&img, &spec)?, c.out.join(&name))?;
            Ok(name)
        })
        .collect::<Result<Vec<_>, _>>()?;
    m.metrics = json!({ "outputs": names });
    Ok(())
}

pub fn gradcheck(c: &GradcheckConfig, m: &mut RunManifest) -> Result<(), CliError> {
    let model = PiCat::<f64>::new(c.model.clone(), c.seed, InitMode::Random)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0x67c4);
    let img = SrgbImage::<f64>::from_tensor(&Tensor::uniform(&[3, c.size, c.size], 0.05, 0.95, &mut rng))?;
    let target = SrgbImage::<f64>::from_tensor(&Tensor::uniform(&[3, c.size, c.size], 0.0, 1.0, &mut rng))?;
    let cfg = GradCheckConfig {
        step: c.step,
        rel_tol: c.rel_tol,
        abs_tol: c.abs_tol,
        ..GradCheckConfig::default()
    };
    let module = c.module;
    let report = grad_check_where(&model.params, cfg, |n| module.selects(n), |s| {
        model.loss(s, &img, &target).map_err(|e| match e {
            picat_core::Error::Tensor(t) => t,
            other => picat_tensor::TensorError::Invalid(other.to_string()),
        })
    })?;
    if report.params.is_empty() {
        return Err(CliError::Usage(format!("no {:?} parameters in the {} model", c.module, c.model.variant)));
    }
    let rows: Vec<_> = report
        .params
        .iter()
        .map(|p| {
            json!({
                "name": p.name, "entries": p.entries, "max_rel_error": p.max_error,
                "max_abs_diff": p.max_abs_diff, "failures": p.failures,
                "refined": p.refined, "unresolved": p.unresolved,
            })
        })
        .collect();
    std::fs::create_dir_all(&c.out)?;
    let body = json!({ "passed": report.passed(), "max_rel_error": report.max_error(), "params": rows });
    std::fs::write(c.out.join(format!("gradcheck_{}.json", m.run_id)), serde_json::to_string_pretty(&body)? + "\n")?;
    m.check("max_rel_error", report.max_error(), c.rel_tol, report.passed());
    m.metrics = json!({
        "entries": report.entries(),
        "max_rel_error": report.max_error(),
        "params": report.params.len(),
    });
    if !report.passed() {
        return Err(CliError::Check(format!("gradient check failed, max rel error {:.3e}", report.max_error())));
    }
    eprintln!("gradcheck: {} entries, max rel error {:.3e}", report.entries(), report.max_error());
    Ok(())
}

pub fn report(c: &ReportConfig, m: &mut RunManifest) -> Result<(), CliError> {
    let mut rows = vec![["run_id", "command", "status", "checks", "elapsed_s"].map(String::from)];
    for input in &c.inputs {
        let path = if input.is_dir() { input.join("manifest.json") } else { input.clone() };
        let r = RunManifest::read(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let passed = r.checks.iter().filter(|k| k.passed).count();
        rows.push([
            r.run_id,
            r.command,
            match r.status {
                RunStatus::Ok => "ok",
                RunStatus::CheckFailed => "check-failed",
                RunStatus::Error => "error",
            }
            .into(),
            format!("{passed}/{}", r.checks.len()),
            format!("{:.2}", r.elapsed_secs),
        ]);
    }
    let mut widths = [0usize; 5];
    for r in &rows {
        for (w, f) in widths.iter_mut().zip(r) {
            *w = (*w).max(f.len());
        }
    }
    let mut table = String::new();
    let mut csv = String::new();
    for r in &rows {
        let cells: Vec<String> = r.iter().zip(widths).map(|(f, w)| format!("{f:<w$}")).collect();
        table.push_str(cells.join("  ").trim_end());
        table.push('\n');
        csv.push_str(&r.join(","));
        csv.push('\n');
    }
    print!("{table}");
    std::fs::create_dir_all(&c.out)?;
    std::fs::write(c.out.join("report.csv"), csv)?;
    m.metrics = json!({ "runs": rows.len() - 1 });
    Ok(())
}

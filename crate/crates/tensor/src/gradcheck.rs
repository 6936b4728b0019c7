//! Central finite-difference verification of tape gradients.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::Result;
use crate::params::{ParamSet, Session};
use crate::scalar::Scalar;
use crate::tape::{Replay, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Number of times the step is divided by ten when a finite difference
    /// straddles a kink of a non-smooth op.
    pub max_refinements: u32,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
            max_refinements: 4,
        }
    }
}

impl GradCheckConfig {
    /// `|a - n| / max(|a|, |n|, abs_tol/rel_tol)`; an entry passes when this
    /// is at most `rel_tol`, i.e. when it is within the relative tolerance or
    /// the absolute floor.
    pub fn error(&self, analytic: f64, numeric: f64) -> f64 {
        let floor = self.abs_tol / self.rel_tol;
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_error: f64,
    pub max_abs_diff: f64,
    pub failures: usize,
    /// Entries whose difference needed a smaller step to avoid a kink.
    pub refined: usize,
    /// Entries that still straddled a kink at the smallest step; excluded
    /// from `max_error`.
    pub unresolved: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failures == 0 && p.unresolved == 0)
    }

    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_error).fold(0.0, f64::max)
    }

    pub fn entries(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }
}

fn evaluate<T, F>(params: &ParamSet<T>, replay: &Arc<Replay<T>>, perturbed: usize, f: &F) -> Result<(f64, u64)>
where
    T: Scalar,
    F: Fn(&mut Session<'_, T>) -> Result<Var>,
{
    let mut s = Session::replaying(params, Arc::clone(replay), perturbed);
    let loss = f(&mut s)?;
    Ok((s.value(loss).item().widen(), s.kink_signature()))
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences for every entry of every parameter. `f` must build the same
/// graph on every call; re-evaluations recompute only what depends on the
/// perturbed parameter.
pub fn grad_check<T, F>(params: &ParamSet<T>, config: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Session<'_, T>) -> Result<Var> + Sync,
{
    grad_check_where(params, config, |_| true, f)
}

/// [`grad_check`] restricted to the parameters whose name passes `select`.
/// The others still take part in the computation, unperturbed.
pub fn grad_check_where<T, S, F>(params: &ParamSet<T>, config: GradCheckConfig, select: S, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    S: Fn(&str) -> bool,
    F: Fn(&mut Session<'_, T>) -> Result<Var> + Sync,
{
    let chosen: Vec<bool> = params.names().map(&select).collect();
    let mut s = Session::new(params);
    let loss = f(&mut s)?;
    let base_sig = s.kink_signature();
    let replay = Arc::new(s.snapshot());
    let analytic = s.backward(loss)?;

    let coords: Vec<(usize, usize)> = (0..params.len())
        .filter(|&i| chosen[i])
        .flat_map(|i| (0..params.value_at(i).numel()).map(move |j| (i, j)))
        .collect();

    let numeric: Vec<Result<(f64, bool, bool)>> = coords
        .par_iter()
        .map(|&(i, j)| {
            let mut local = params.clone();
            let orig = local.value_at(i)[j].widen();
            let mut h = config.step;
            let mut refined = false;
            for _ in 0..=config.max_refinements {
                local.value_at_mut(i)[j] = T::cast(orig + h);
                let (up, sig_up) = evaluate(&local, &replay, i, &f)?;
                local.value_at_mut(i)[j] = T::cast(orig - h);
                let (down, sig_down) = evaluate(&local, &replay, i, &f)?;
                if sig_up == base_sig && sig_down == base_sig {
                    return Ok(((up - down) / (2.0 * h), refined, true));
                }
                refined = true;
                h /= 10.0;
            }
            Ok((0.0, refined, false))
        })
        .collect();

    let mut report = Vec::with_capacity(params.len());
    let mut k = 0;
    for (i, (name, p)) in params.iter().enumerate() {
        if !chosen[i] {
            continue;
        }
        let mut pc = ParamCheck {
            name: name.to_string(),
            entries: p.value.numel(),
            max_error: 0.0,
            max_abs_diff: 0.0,
            failures: 0,
            refined: 0,
            unresolved: 0,
        };
        for j in 0..p.value.numel() {
            let (num, refined, resolved) = match &numeric[k] {
                Ok(v) => *v,
                Err(e) => return Err(crate::error::TensorError::Invalid(format!("{name}[{j}]: {e}"))),
            };
            k += 1;
            pc.refined += refined as usize;
            if !resolved {
                pc.unresolved += 1;
                continue;
            }
            let a = analytic.get(i)[j].widen();
            let err = config.error(a, num);
            pc.max_error = pc.max_error.max(err);
            pc.max_abs_diff = pc.max_abs_diff.max((a - num).abs());
            if err > config.rel_tol || !err.is_finite() {
                pc.failures += 1;
            }
        }
        report.push(pc);
    }
    Ok(GradCheckReport {
        config,
        params: report,
    })
}

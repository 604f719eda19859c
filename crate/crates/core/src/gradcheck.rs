//! Central finite-difference checks of tape gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const FD_EPS: f64 = 1e-5;

/// Entries whose one-sided slopes at [`FD_EPS`] disagree straddle a kink
/// (e.g. a ReLU switching inside the step) and are re-measured at this
/// smaller step.
pub const FD_EPS_REFINED: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    /// Entries whose absolute error is below this pass regardless of `rel`.
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rel: 1e-4, abs: 1e-7 }
    }
}

/// Which input coordinates to perturb.
#[derive(Debug, Clone)]
pub enum Coords {
    All,
    /// Up to `n` random coordinates per input tensor.
    Sample {
        per_input: usize,
        seed: u64,
    },
    /// Explicit flat indices per input (empty lists skip the input).
    Explicit(Vec<Vec<usize>>),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub failures: usize,
    /// Entries re-measured at [`FD_EPS_REFINED`] because the objective was
    /// not smooth within [`FD_EPS`] of the point.
    pub refined: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over entries
    /// whose magnitude exceeds `abs / rel`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} entries, {} failures, max rel err {:.3e}, max abs err {:.3e}",
            self.name, self.checked, self.failures, self.max_rel_err, self.max_abs_err
        )?;
        if self.refined > 0 {
            write!(f, ", {} refined", self.refined)?;
        }
        if let Some((t, i, a, n)) = self.worst {
            write!(f, " (worst input {t}[{i}]: analytic {a:.9e}, numeric {n:.9e})")?;
        }
        Ok(())
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&tape, &vars)?;
    let v = out.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("gradcheck objective".into()));
    }
    Ok(v)
}

/// Compares the tape gradient of `f` with respect to each input against
/// central differences with step [`FD_EPS`].
pub fn check_gradients<F>(
    name: &str,
    inputs: &[Tensor],
    coords: &Coords,
    tol: Tolerance,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&tape, &vars)?;
        tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let mut jobs: Vec<(usize, usize)> = Vec::new();
    match coords {
        Coords::All => {
            for (t, x) in inputs.iter().enumerate() {
                jobs.extend((0..x.numel()).map(|i| (t, i)));
            }
        }
        Coords::Sample { per_input, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for (t, x) in inputs.iter().enumerate() {
                let n = (*per_input).min(x.numel());
                let mut picked = sample(&mut rng, x.numel(), n).into_vec();
                picked.sort_unstable();
                jobs.extend(picked.into_iter().map(|i| (t, i)));
            }
        }
        Coords::Explicit(lists) => {
            for (t, list) in lists.iter().enumerate() {
                jobs.extend(list.iter().map(|&i| (t, i)));
            }
        }
    }

    let f0 = evaluate(&f, inputs)?;
    let allowed = |a: f64, n: f64| (tol.rel * a.abs().max(n.abs())).max(tol.abs);
    let numeric: Vec<Result<(f64, bool)>> = jobs
        .par_iter()
        .map(|&(t, i)| {
            let probe = |eps: f64| -> Result<(f64, f64)> {
                let mut plus = inputs.to_vec();
                plus[t].data_mut()[i] += eps;
                let mut minus = inputs.to_vec();
                minus[t].data_mut()[i] -= eps;
                Ok((evaluate(&f, &plus)?, evaluate(&f, &minus)?))
            };
            let (fp, fm) = probe(FD_EPS)?;
            let central = (fp - fm) / (2.0 * FD_EPS);
            let a = analytic[t].data()[i];
            if (a - central).abs() <= allowed(a, central) {
                return Ok((central, false));
            }
            let (fwd, bwd) = ((fp - f0) / FD_EPS, (f0 - fm) / FD_EPS);
            if (fwd - bwd).abs() <= allowed(fwd, bwd) {
                return Ok((central, false));
            }
            let (fp, fm) = probe(FD_EPS_REFINED)?;
            Ok(((fp - fm) / (2.0 * FD_EPS_REFINED), true))
        })
        .collect();

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        failures: 0,
        refined: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
    };
    let mut worst_score = 0.0;
    for (&(t, i), n) in jobs.iter().zip(numeric) {
        let (n, refined) = n?;
        report.refined += usize::from(refined);
        let a = analytic[t].data()[i];
        let abs = (a - n).abs();
        let mag = a.abs().max(n.abs());
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max(abs);
        if mag * tol.rel > tol.abs {
            report.max_rel_err = report.max_rel_err.max(abs / mag);
        }
        let allowed = allowed(a, n);
        if !(abs <= allowed) {
            report.failures += 1;
        }
        let score = abs / allowed;
        if score > worst_score || report.worst.is_none() {
            worst_score = score;
            report.worst = Some((t, i, a, n));
        }
    }
    Ok(report)
}

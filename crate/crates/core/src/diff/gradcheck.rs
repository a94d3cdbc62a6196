//! Central-difference verification of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{NeatError, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Upper bound on checked coordinates across all parameters.
    pub max_coords: usize,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: 64,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordError {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordError>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Pick up to `max` (param, index) coordinates, uniformly without replacement.
fn select_coords(params: &[Tensor], max: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    if all.len() > max {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        all.truncate(max);
        all.sort_unstable();
    }
    all
}

/// Compare supplied analytic gradients against central differences of `eval`.
pub fn grad_check_against<F>(
    eval: F,
    params: &[Tensor],
    analytic: &[Tensor],
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(NeatError::invalid("one analytic gradient per parameter required"));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0_f64;
    let mut worst = None;
    let coords = select_coords(params, opts.max_coords, opts.seed);
    for &(p, i) in &coords {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + opts.step;
        let plus = eval(&work)?;
        work[p].data_mut()[i] = orig - opts.step;
        let minus = eval(&work)?;
        work[p].data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NeatError::NonFinite(format!(
                "objective while perturbing parameter {p}[{i}]"
            )));
        }
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[p].data()[i];
        let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel || worst.is_none() {
            max_rel = max_rel.max(rel);
            worst = Some(CoordError {
                param: p,
                index: i,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(GradCheckReport {
        checked: coords.len(),
        max_rel_error: max_rel,
        worst,
        tolerance,
        passed: max_rel < tolerance,
    })
}

/// Build `f` on a fresh tape with every parameter as a gradient leaf, run the
/// reverse pass, and check it against central differences.
pub fn grad_check<F>(f: F, params: &[Tensor], tolerance: f64, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), with_grad)).collect();
        let out = f(&mut tape, &vars)?;
        tape.check_finite()?;
        if tape.value(out).len() != 1 {
            return Err(NeatError::invalid("grad_check objective must be a scalar"));
        }
        let value = tape.value(out).item();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(out)?;
        let gs = vars.iter().map(|&v| grads.get_or_zeros(v)).collect::<Vec<_>>();
        if let Some(bad) = gs.iter().position(|g| !g.all_finite()) {
            return Err(NeatError::NonFinite(format!("gradient of parameter {bad}")));
        }
        Ok((value, gs))
    };
    let (_, analytic) = run(params, true)?;
    grad_check_against(|p| run(p, false).map(|r| r.0), params, &analytic, tolerance, opts)
}

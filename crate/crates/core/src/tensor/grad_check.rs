use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Parameter, Var};
use crate::error::{contract, Result};

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Upper bound on checked coordinates; all are checked when fewer exist.
    pub max_coords: usize,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-5,
            max_coords: 200,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub failures: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn bind_all(g: &mut Graph, params: &[Parameter]) -> Vec<Var> {
    params
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.requires_grad = true;
            g.param(&p)
        })
        .collect()
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences on a seeded sample of coordinates.
///
/// `params` are bound by name before `f` runs, so `f` can fetch them with
/// [`Graph::bound`] or by calling [`Graph::param`] with a parameter of the
/// same name.
pub fn grad_check<F>(mut f: F, params: &[Parameter], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    if cfg.step <= 0.0 {
        return Err(contract("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let vars = bind_all(&mut g, params);
    let loss = f(&mut g)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |j| (pi, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= cfg.max_coords {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picked: Vec<usize> = sample(&mut rng, coords.len(), cfg.max_coords).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| coords[i]).collect()
    };

    let mut eval = |perturbed: &[Parameter]| -> Result<f64> {
        let mut g = Graph::new();
        bind_all(&mut g, perturbed);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };

    let mut work: Vec<Parameter> = params.to_vec();
    let mut report = GradCheckReport {
        checked: chosen.len(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        tolerance: cfg.tolerance,
        failures: Vec::new(),
    };
    for (pi, j) in chosen {
        let orig = work[pi].value.data()[j];
        work[pi].value.data_mut()[j] = orig + cfg.step;
        let plus = eval(&work)?;
        work[pi].value.data_mut()[j] = orig - cfg.step;
        let minus = eval(&work)?;
        work[pi].value.data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[pi][j];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(cfg.abs_floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
        if rel >= cfg.tolerance {
            report.failures.push(CoordCheck {
                param: params[pi].name.clone(),
                index: j,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}

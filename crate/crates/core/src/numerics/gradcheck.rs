//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{GradMap, ParamStore};
use super::{Matrix, NumericsError};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, max_coords_per_tensor: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub checked: usize,
    /// (tensor index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Compares `analytic` against central differences of `f` around `point`.
pub fn grad_check<F>(
    mut f: F,
    point: &[Matrix],
    analytic: &[Matrix],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&[Matrix]) -> f64,
{
    if point.len() != analytic.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "grad_check tensor count",
            left: vec![point.len()],
            right: vec![analytic.len()],
        });
    }
    let mut non_finite = Vec::new();
    for (t, (p, a)) in point.iter().zip(analytic).enumerate() {
        if p.dim() != a.dim() {
            return Err(NumericsError::ShapeMismatch {
                op: "grad_check tensor shape",
                left: vec![p.nrows(), p.ncols()],
                right: vec![a.nrows(), a.ncols()],
            });
        }
        non_finite.extend(a.iter().enumerate().filter(|(_, v)| !v.is_finite()).map(|(i, _)| (t, i)));
    }
    if !non_finite.is_empty() {
        return Err(NumericsError::NonFiniteGradient(non_finite));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Matrix> = point.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    for t in 0..work.len() {
        let n = work[t].len();
        let coords: Vec<usize> = match cfg.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = flat(&work[t], i);
            set_flat(&mut work[t], i, orig + cfg.step);
            let plus = f(&work);
            set_flat(&mut work[t], i, orig - cfg.step);
            let minus = f(&work);
            set_flat(&mut work[t], i, orig);
            let numeric = (plus - minus) / (2.0 * cfg.step);
            if !numeric.is_finite() {
                return Err(NumericsError::NonFiniteGradient(vec![(t, i)]));
            }
            let err = (flat(&analytic[t], i) - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((t, i));
            }
        }
    }
    Ok(report)
}

/// [`grad_check`] over named entries of a parameter store.
pub fn grad_check_params<F>(
    store: &ParamStore,
    names: &[String],
    analytic: &GradMap,
    mut loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut point = Vec::with_capacity(names.len());
    let mut grads = Vec::with_capacity(names.len());
    for name in names {
        point.push(store.value(name)?.clone());
        grads.push(
            analytic
                .get(name)
                .cloned()
                .ok_or_else(|| NumericsError::MissingParam(name.clone()))?,
        );
    }
    let mut scratch = store.clone();
    grad_check(
        |values| {
            for (name, v) in names.iter().zip(values) {
                scratch.value_mut(name).expect("name came from store").assign(v);
            }
            loss(&scratch)
        },
        &point,
        &grads,
        cfg,
    )
}

fn flat(m: &Matrix, i: usize) -> f64 {
    m[[i / m.ncols(), i % m.ncols()]]
}

fn set_flat(m: &mut Matrix, i: usize, v: f64) {
    let c = m.ncols();
    m[[i / c, i % c]] = v;
}

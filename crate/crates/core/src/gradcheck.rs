//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: (String, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the gradients returned by `f` against central differences with
/// step `eps` on up to `probes` randomly chosen elements of each named
/// parameter. `f` returns the loss and the gradient map at the given point.
pub fn grad_check<F>(
    mut f: F,
    params: &ParameterSet<f64>,
    names: &[String],
    eps: f64,
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterSet<f64>) -> Result<(f64, BTreeMap<String, Tensor<f64>>)>,
{
    let (loss0, grads) = f(params)?;
    let (loss1, _) = f(params)?;
    if loss0.to_bits() != loss1.to_bits() {
        return Err(Error::NonDeterministic);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        analytic: 0.0,
        numeric: 0.0,
        probes: 0,
    };
    let mut point = params.clone();
    for name in names {
        let len = params.get(name)?.len();
        let analytic = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.get(name).unwrap().shape()));
        let picks = sample(&mut rng, len, probes.min(len)).into_vec();
        for idx in picks {
            let orig = params.get(name)?.data()[idx];
            point.get_mut(name)?.data_mut()[idx] = orig + eps;
            let (plus, _) = f(&point)?;
            point.get_mut(name)?.data_mut()[idx] = orig - eps;
            let (minus, _) = f(&point)?;
            point.get_mut(name)?.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric);
            report.probes += 1;
            if report.worst.0.is_empty() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (name.clone(), idx);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

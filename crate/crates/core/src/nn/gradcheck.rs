use crate::error::{Error, Result};

use super::{Gradients, Parameterized};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<WorstEntry>,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn nudge(params: &mut (impl Parameterized + ?Sized), target: &str, index: usize, value: Option<f64>) -> f64 {
    let mut old = f64::NAN;
    params.visit_params_mut(&mut |name, m| {
        if name == target {
            let slot = &mut m.data_mut()[index];
            old = *slot;
            if let Some(v) = value {
                *slot = v;
            }
        }
    });
    old
}

/// Compares `analytic` against central differences of `loss` over every
/// entry of every parameter. Parameters missing from `analytic` count as
/// having zero gradient. `loss` must be deterministic.
pub fn grad_check<P, F>(params: &mut P, loss: F, analytic: &Gradients, eps: f64) -> Result<GradCheckReport>
where
    P: Parameterized + ?Sized,
    F: Fn(&P) -> Result<f64>,
{
    grad_check_terms(params, |p| loss(p).map(|v| vec![v]), analytic, eps)
}

/// [`grad_check`] for a loss given as a list of terms whose sum is the
/// loss. Differences are taken term by term and accumulated with
/// compensated summation, so terms a perturbation leaves untouched cancel
/// exactly instead of contributing the rounding error of the full sum.
/// `terms` must return the same number of terms on every call.
pub fn grad_check_terms<P, F>(params: &mut P, terms: F, analytic: &Gradients, eps: f64) -> Result<GradCheckReport>
where
    P: Parameterized + ?Sized,
    F: Fn(&P) -> Result<Vec<f64>>,
{
    let mut layout = Vec::new();
    params.visit_params(&mut |name, m| layout.push((name.to_string(), m.len())));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (name, len) in layout {
        let grad = analytic.get(&name);
        if let Some(g) = grad {
            if g.len() != len {
                return Err(Error::Invalid(format!(
                    "gradient for {name} has {} entries, parameter has {len}",
                    g.len()
                )));
            }
        }
        for i in 0..len {
            let original = nudge(params, &name, i, None);
            nudge(params, &name, i, Some(original + eps));
            let up = terms(params);
            nudge(params, &name, i, Some(original - eps));
            let down = terms(params);
            nudge(params, &name, i, Some(original));
            let (up, down) = (up?, down?);
            if up.len() != down.len() {
                return Err(Error::Invalid(format!(
                    "loss produced {} and {} terms",
                    up.len(),
                    down.len()
                )));
            }
            let numeric = neumaier_sum(up.iter().zip(&down).map(|(u, d)| u - d)) / (2.0 * eps);
            let a = grad.map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some(WorstEntry {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

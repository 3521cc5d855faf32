//! Central-difference verification of reverse-mode gradients.

use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Worst disagreement found for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    /// `max |analytic - numeric| / max(1, |numeric|)` over the entries.
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientReport {
    pub params: Vec<ParamCheck>,
}

impl GradientReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Compares the backward pass of `loss_fn` against central differences with
/// the given `step`, for every entry of every parameter in `store`.
///
/// `loss_fn` must rebuild the loss from the store it is handed; it is called
/// twice up front on identical inputs and must agree bit-for-bit. The
/// perturbed losses are obtained by [`Graph::replay`] on the recorded graph,
/// so the ops `loss_fn` records must not depend on parameter values. The
/// first entry of every parameter is also evaluated from scratch and must
/// match its replay exactly.
pub fn gradient_check<F>(store: &ParamStore<f64>, step: f64, loss_fn: F) -> Result<GradientReport>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(NumericsError::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    if store.is_empty() {
        return Ok(GradientReport::default());
    }

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(s, &mut g)?;
        g.scalar_value(l)
    };

    let mut g = Graph::new();
    let loss = loss_fn(store, &mut g)?;
    let first = g.scalar_value(loss)?;
    let analytic = g.backward(loss)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumericsError::NonDeterministic { first, second });
    }

    let mut work = store.clone();
    let mut report = GradientReport::default();
    for (id, p) in store.iter() {
        let n = p.value.numel();
        let mut check = ParamCheck {
            name: p.name.clone(),
            entries: n,
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        let mut probe = p.value.clone();
        for i in 0..n {
            let orig = p.value.data()[i];
            probe.data_mut()[i] = orig + step;
            let plus = g.replay(loss, id, &probe)?.item()?;
            if i == 0 {
                work.get_mut(id).value.data_mut()[i] = orig + step;
                let fresh = eval(&work)?;
                work.get_mut(id).value.data_mut()[i] = orig;
                if fresh.to_bits() != plus.to_bits() {
                    return Err(NumericsError::NonDeterministic { first: fresh, second: plus });
                }
            }
            probe.data_mut()[i] = orig - step;
            let minus = g.replay(loss, id, &probe)?.item()?;
            probe.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[i]);
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > check.max_rel_error || i == 0 {
                check.max_rel_error = rel;
                check.worst_entry = i;
                check.analytic_at_worst = a;
                check.numeric_at_worst = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

//! Central finite-difference checks against tape gradients.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = format!("{} analytic={analytic:.6e} numeric={numeric:.6e}", label());
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

fn coords(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        // evenly strided subset, always including both ends
        (0..max).map(|i| i * (n - 1) / (max - 1)).collect()
    }
}

/// Checks `f` with respect to free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'static>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt(v).unwrap().to_vec()).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss)[0])
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(|| format!("input{i}[{j}]"), a[j], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks a store-backed scalar function against every parameter, sampling
/// at most `max_coords` coordinates per parameter.
pub fn check_params<F>(store: &ParamStore, step: f64, max_coords: usize, f: F) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Tape<'p>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let loss = f(&mut tape)?;
    let grads = tape.backward(loss)?.dense(store);
    drop(tape);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss)[0])
    };

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for (id, g) in ids.into_iter().zip(&grads) {
        for j in coords(g.len(), max_coords) {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig;
            report.record(
                || format!("{}[{j}]", store.name(id)),
                g[j],
                (plus - minus) / (2.0 * step),
            );
        }
    }
    Ok(report)
}

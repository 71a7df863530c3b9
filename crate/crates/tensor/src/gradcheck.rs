//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    /// Multiplies every analytic gradient before comparison; a harness
    /// sensitivity hook.
    pub corrupt: Option<f64>,
    /// Extra attempts, each with a tenfold smaller step, for entries that
    /// disagree. A piecewise-linear op whose kink lies within one step of the
    /// evaluation point spoils the central difference but not a smaller one;
    /// a wrong gradient disagrees at every step.
    pub refinements: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            rel_tol: 1e-4,
            corrupt: None,
            refinements: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a−n| / max(|a|, |n|, 1e-8)` over all checked entries.
    pub max_rel_error: f64,
    pub worst: Option<WorstEntry>,
    pub checked: usize,
    /// Value of the checked scalar at the unperturbed point.
    pub loss: f64,
    /// Largest `|a−n|`.
    pub max_abs_error: f64,
    /// Entries that agreed only after shrinking the step.
    pub refined: usize,
    pub non_finite: bool,
    pub passed: bool,
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, perturbing every trainable entry of `store` in turn.
///
/// `f` must be deterministic and must not depend on anything but `store`.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    store.zero_grad();
    let (g, loss) = f(store)?;
    let loss_value = g.item(loss);
    let mut non_finite = !loss_value.is_finite();
    g.backward_into(loss, store)?;
    drop(g);

    let ids: Vec<_> = store.trainable().collect();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    let mut max_abs = 0.0f64;
    let mut refined = 0;
    for id in ids {
        let n = store.get(id).numel();
        let analytic: Vec<f64> = store
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n])
            .into_iter()
            .map(|a| a * opts.corrupt.unwrap_or(1.0))
            .collect();
        for i in 0..n {
            let a = analytic[i];
            checked += 1;
            let mut step = opts.step;
            let mut best: Option<(f64, f64)> = None;
            for attempt in 0..=opts.refinements {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + step;
                let (gp, lp) = f(store)?;
                let plus = gp.item(lp);
                store.get_mut(id).data_mut()[i] = orig - step;
                let (gm, lm) = f(store)?;
                let minus = gm.item(lm);
                store.get_mut(id).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                if !numeric.is_finite() || !a.is_finite() {
                    non_finite = true;
                    break;
                }
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                if best.is_none_or(|(r, _)| rel < r) {
                    best = Some((rel, numeric));
                }
                if rel < opts.rel_tol {
                    refined += usize::from(attempt > 0);
                    break;
                }
                step /= 10.0;
            }
            let Some((rel, numeric)) = best else { continue };
            max_abs = max_abs.max((a - numeric).abs());
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some(WorstEntry {
                    param: store.name(id).to_string(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    store.zero_grad();
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        checked,
        loss: loss_value,
        max_abs_error: max_abs,
        refined,
        non_finite,
        passed: !non_finite && max_rel < opts.rel_tol,
    })
}

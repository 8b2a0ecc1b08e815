//! Finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so near-zero gradients compare absolutely.
    pub floor: f64,
    /// Entries worse than `retry_above` are re-measured with steps shrunk by 10x
    /// this many times; the best agreement is kept. A stencil that straddles a
    /// ReLU or min kink disagrees at one step but not at a smaller one.
    pub refinements: usize,
    pub retry_above: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            refinements: 2,
            retry_above: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
    /// Entries that only agreed at a refined step.
    pub refined: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Reverse-mode gradients of the scalar built by `loss_fn`.
pub fn analytic_gradients<T, F>(store: &ParamStore<T>, loss_fn: &F) -> Result<Gradients<T>>
where
    T: Real,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = loss_fn(&mut g)?;
    g.backward(loss)
}

fn loss_value<T, F>(store: &ParamStore<T>, loss_fn: &F) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = loss_fn(&mut g)?;
    Ok(g.value(loss).item().to_f64_lossy())
}

/// Compares `analytic` against central differences for every entry of `params`
/// (all parameters when `None`).
pub fn compare_with_finite_differences<T, F>(
    store: &ParamStore<T>,
    analytic: &Gradients<T>,
    params: Option<&[ParamId]>,
    loss_fn: &F,
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let ids: Vec<ParamId> = match params {
        Some(p) => p.to_vec(),
        None => store.ids().collect(),
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
        refined: 0,
    };
    for id in ids {
        let n = work.value(id).data().len();
        for e in 0..n {
            let ana = analytic.get(id).map_or(0.0, |g| g.data()[e].to_f64_lossy());
            let mut step = config.step;
            let (mut numeric, mut rel) = (0.0, f64::INFINITY);
            for attempt in 0..=config.refinements {
                let num = central_difference(&mut work, id, e, step, loss_fn)?;
                let r = (ana - num).abs() / ana.abs().max(num.abs()).max(config.floor);
                if r < rel || attempt == 0 {
                    (numeric, rel) = (num, r);
                    if attempt > 0 && r <= config.retry_above {
                        report.refined += 1;
                    }
                }
                if rel <= config.retry_above {
                    break;
                }
                step /= 10.0;
            }
            report.entries_checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_param = store.name(id).to_string();
                report.worst_index = e;
                report.analytic = ana;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn central_difference<T, F>(work: &mut ParamStore<T>, id: ParamId, e: usize, step: f64, loss_fn: &F) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let h = T::from_f64_lossy(step);
    let orig = work.value(id).data()[e];
    work.value_mut(id).data_mut()[e] = orig + h;
    let plus = loss_value(work, loss_fn)?;
    work.value_mut(id).data_mut()[e] = orig - h;
    let minus = loss_value(work, loss_fn)?;
    work.value_mut(id).data_mut()[e] = orig;
    let width = (orig + h).to_f64_lossy() - (orig - h).to_f64_lossy();
    Ok((plus - minus) / width)
}

/// Maximum relative error between reverse-mode and central-difference gradients.
pub fn grad_check<T, F>(
    store: &ParamStore<T>,
    params: Option<&[ParamId]>,
    loss_fn: F,
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &loss_fn)?;
    compare_with_finite_differences(store, &analytic, params, &loss_fn, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor2;

    fn linear_loss(store: &mut ParamStore<f64>) -> (ParamId, impl Fn(&mut Graph<'_, f64>) -> Result<Var>) {
        let w = store.add("w", Tensor2::from_vec(1, 3, vec![0.01, -0.02, 0.03]).unwrap());
        let c = Tensor2::from_vec(1, 3, vec![1.5, -0.5, 4.0]).unwrap();
        let f = move |g: &mut Graph<'_, f64>| {
            let wv = g.param(w);
            let cv = g.constant(c.clone());
            let m = g.mul(wv, cv)?;
            Ok(g.sum(m))
        };
        (w, f)
    }

    #[test]
    fn linear_loss_is_exact() {
        let mut store = ParamStore::new();
        let (_, f) = linear_loss(&mut store);
        let r = grad_check(&store, None, f, GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.entries_checked, 3);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let mut store = ParamStore::new();
        let (w, f) = linear_loss(&mut store);
        let mut grads = analytic_gradients(&store, &f).unwrap();
        grads.get_mut(w).unwrap().data_mut()[1] += 0.5;
        let r = compare_with_finite_differences(&store, &grads, None, &f, GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error > 1e-2);
        assert_eq!((r.worst_param.as_str(), r.worst_index), ("w", 1));
    }
}

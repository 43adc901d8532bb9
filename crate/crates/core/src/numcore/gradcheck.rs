use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many randomly chosen entries per parameter tensor.
    pub max_entries_per_param: Option<usize>,
    /// Denominator floor of the relative error, so entries whose gradients
    /// are both near zero are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries_per_param: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares analytic gradients of every trainable parameter against central
/// finite differences of `loss_fn`.
///
/// `loss_fn` must be deterministic: no dropout, and batch norm either in
/// inference mode or on a fixed batch.
pub fn grad_check<F>(
    store: &mut ParamStore,
    opts: &GradCheckOptions,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &mut ParamStore) -> Result<Var>,
{
    // Running statistics are restored after every evaluation so training-mode
    // batch norm does not drift between the perturbed evaluations.
    let snapshot = store.clone();
    store.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss)?;
    store.accumulate_grads(&g);
    let analytic: Vec<Option<Vec<f64>>> = store
        .iter()
        .map(|(_, p)| p.grad.as_ref().map(|t| t.data().to_vec()))
        .collect();
    restore_buffers(store, &snapshot);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let n = store.value(id).len();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => {
                let mut v = index::sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in entries {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.step;
            let lp = eval(store, &mut loss_fn)?;
            restore_buffers(store, &snapshot);
            store.value_mut(id).data_mut()[i] = orig - opts.step;
            let lm = eval(store, &mut loss_fn)?;
            restore_buffers(store, &snapshot);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * opts.step);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn eval<F>(store: &mut ParamStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &mut ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    Ok(g.value(loss).item())
}

fn restore_buffers(store: &mut ParamStore, snapshot: &ParamStore) {
    for (p, s) in store.iter_mut().zip(snapshot.iter()) {
        if !p.trainable {
            p.value = s.1.value.clone();
        }
    }
}

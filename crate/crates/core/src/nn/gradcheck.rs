//! Central-finite-difference verification of analytic gradients.
//!
//! Runs in `f64`: analytic gradients come from one backward pass, the
//! numeric side re-evaluates the loss at `theta +/- eps` per sampled
//! element. Forward passes must be side-effect free, so callers should
//! disable running-statistic updates (`Mode::Train { update_stats:
//! false }`).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore};

pub struct CheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl CheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares `analytic` gradients against central differences on a random
/// sample of parameter elements.
///
/// `sample_frac` of all elements of each listed parameter is checked
/// (at least one element per parameter). An element passes when
/// `|a - n| <= tol * max(|a|, |n|) + atol`; the absolute floor covers
/// structurally zero gradients.
#[allow(clippy::too_many_arguments)]
pub fn check_against_fd(
    store: &mut ParamStore<f64>,
    param_ids: &[ParamId],
    analytic: &BTreeMap<ParamId, ndarray::ArrayD<f64>>,
    mut loss: impl FnMut(&mut ParamStore<f64>) -> f64,
    sample_frac: f64,
    tol: f64,
    atol: f64,
    rng: &mut ChaCha8Rng,
) -> CheckReport {
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    let mut failures = Vec::new();
    for &pid in param_ids {
        let n = store.entry(pid).value.len();
        let name = store.entry(pid).name.clone();
        let take = ((n as f64 * sample_frac).ceil() as usize).clamp(1, n);
        let mut idxs: Vec<usize> = (0..take).map(|_| rng.random_range(0..n)).collect();
        idxs.sort_unstable();
        idxs.dedup();
        for idx in idxs {
            let theta = store.value(pid).as_slice().unwrap()[idx];
            let eps = 1e-5 * theta.abs().max(1.0);
            set_elem(store, pid, idx, theta + eps);
            let lp = loss(store);
            set_elem(store, pid, idx, theta - eps);
            let lm = loss(store);
            set_elem(store, pid, idx, theta);
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic.get(&pid).map(|g| g.as_slice().unwrap()[idx]).unwrap_or(0.0);
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 0.0 { diff / scale } else { 0.0 };
            if diff > tol * scale + atol {
                failures.push(format!(
                    "{name}[{idx}]: analytic {a:.6e} vs numeric {numeric:.6e} (rel {rel:.3e})"
                ));
            }
            if scale > atol {
                max_rel = max_rel.max(rel);
            }
            checked += 1;
        }
    }
    CheckReport { checked, max_rel_err: max_rel, failures }
}

fn set_elem(store: &mut ParamStore<f64>, pid: ParamId, idx: usize, v: f64) {
    store.value_mut(pid).as_slice_mut().unwrap()[idx] = v;
}

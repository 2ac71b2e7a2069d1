//! Central finite-difference verification of tape gradients.
//!
//! The loss closure is re-evaluated with single coordinates nudged by
//! `±eps`; any stochastic choices inside it (dropout masks, sampled
//! negatives) must be replayed identically on every call, which the callers
//! arrange by reseeding their forward context per invocation.

use super::ParamStore;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub passed: usize,
    pub worst_rel: f64,
    pub worst_coord: Option<(String, usize)>,
    pub failures: Vec<(String, usize, f64, f64, f64)>,
}

impl GradReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Check analytic gradients for every trainable parameter in `store`.
///
/// `eval_loss` runs a full forward pass and returns the scalar loss; when
/// its second argument is true it must also run backward so gradients land
/// in the store. At most `probes_per_param` coordinates are sampled per
/// parameter (0 means all). A coordinate passes when
/// `|fd - ad| / max(|fd|, |ad|) <= rel_tol`, or when both magnitudes are
/// below 1e-8.
pub fn check_params<F>(
    store: &mut ParamStore,
    eps: f64,
    rel_tol: f64,
    probes_per_param: usize,
    rng: &mut ChaCha8Rng,
    mut eval_loss: F,
) -> GradReport
where
    F: FnMut(&mut ParamStore, bool) -> f64,
{
    store.zero_grads();
    let _ = eval_loss(store, true);
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.grad.iter().copied().collect()))
        .collect();

    let mut report = GradReport {
        checked: 0,
        passed: 0,
        worst_rel: 0.0,
        worst_coord: None,
        failures: Vec::new(),
    };

    let ids: Vec<_> = store.ids().collect();
    for (slot, id) in ids.into_iter().enumerate() {
        let (name, trainable, len) = {
            let p = store.get(id);
            (p.name.clone(), p.trainable && !p.frozen, p.value.len())
        };
        if !trainable || len == 0 {
            continue;
        }
        let coords: Vec<usize> = if probes_per_param == 0 || probes_per_param >= len {
            (0..len).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < probes_per_param {
                picked.insert(rng.gen_range(0..len));
            }
            picked.into_iter().collect()
        };
        for ci in coords {
            let orig = store.get(id).value.as_slice().unwrap()[ci];
            store.get_mut(id).value.as_slice_mut().unwrap()[ci] = orig + eps;
            let plus = eval_loss(store, false);
            store.get_mut(id).value.as_slice_mut().unwrap()[ci] = orig - eps;
            let minus = eval_loss(store, false);
            store.get_mut(id).value.as_slice_mut().unwrap()[ci] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[slot].1[ci];
            let denom = fd.abs().max(ad.abs());
            let rel = if denom < 1e-8 {
                0.0
            } else {
                (fd - ad).abs() / denom
            };
            report.checked += 1;
            if rel <= rel_tol {
                report.passed += 1;
            } else if report.failures.len() < 32 {
                report.failures.push((name.clone(), ci, fd, ad, rel));
            }
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_coord = Some((name.clone(), ci));
            }
        }
    }
    report
}

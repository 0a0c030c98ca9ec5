//! Finite-difference gradient checking over a [`ParamSet`].

use super::optim::ParamSet;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Compare analytic gradients against central finite differences.
///
/// `loss_and_grad` must evaluate the loss at the current parameter values and,
/// when `accumulate` is true, add analytic gradients into the set. The loss
/// must be deterministic; two evaluations at the same point are compared and
/// any disagreement is reported as an error.
///
/// Returns the maximum relative error over `probe_count` randomly chosen
/// scalar parameters, with an absolute floor of 1e-8 in the denominator.
pub fn check_gradients<F>(
    set: &mut ParamSet,
    mut loss_and_grad: F,
    probe_count: usize,
    eps: f64,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&mut ParamSet, bool) -> f64,
{
    set.zero_grads();
    let l0 = loss_and_grad(set, true);
    let l1 = loss_and_grad(set, false);
    if l0 != l1 {
        return Err(Error::Determinism(l0, l1));
    }

    let analytic: Vec<Vec<f64>> = set.tensors.iter().map(|t| t.grad.data.clone()).collect();
    set.zero_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = set.tensors.iter().map(|t| t.value.data.len()).collect();
    let total: usize = sizes.iter().sum();

    let mut max_rel = 0.0f64;
    for _ in 0..probe_count {
        let mut flat = rng.gen_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let orig = set.tensors[ti].value.data[flat];
        set.tensors[ti].value.data[flat] = orig + eps;
        let fp = loss_and_grad(set, false);
        set.tensors[ti].value.data[flat] = orig - eps;
        let fm = loss_and_grad(set, false);
        set.tensors[ti].value.data[flat] = orig;

        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[ti][flat];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

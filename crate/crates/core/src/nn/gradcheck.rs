//! Finite-difference validation of the analytic gradients.

use crate::error::{Error, Result};
use crate::nn::{backward_flat, cross_entropy, forward_cache, Network};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How many parameters are probed per check.
const SUBSET: usize = 64;

/// Compares analytic cross-entropy gradients against central finite
/// differences over a fixed random parameter subset and returns the worst
/// relative error `|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-3)`.
///
/// The comparison runs at `f64` on a converted copy of the network, so the
/// finite-difference quotient itself is accurate to well below the reported
/// error for any sane `eps`.
pub fn grad_check(net: &Network, x: &Tensor, label: usize, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig("eps must be positive".into()));
    }
    if label < 1 || label > net.num_classes() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: net.num_classes(),
        });
    }
    let mut net64: Network<f64> = net.cast();
    let x64: Tensor<f64> = x.cast();

    let cache = forward_cache(&net64, &x64)?;
    let (loss, d_logits) = cross_entropy(cache.last().unwrap().data(), label);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let analytic = backward_flat(&net64, &x64, &cache, d_logits, None);

    let base = net64.flatten_params();
    let n = base.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let picks = rand::seq::index::sample(&mut rng, n, n.min(SUBSET));

    let mut loss_at = |params: &[f64]| -> Result<f64> {
        net64.assign_params(params);
        let cache = forward_cache(&net64, &x64)?;
        let (loss, _) = cross_entropy(cache.last().unwrap().data(), label);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(loss)
    };

    let mut probe = base.clone();
    let mut worst = 0.0f64;
    for i in picks {
        probe[i] = base[i] + eps;
        let plus = loss_at(&probe)?;
        probe[i] = base[i] - eps;
        let minus = loss_at(&probe)?;
        probe[i] = base[i];
        let fd = (plus - minus) / (2.0 * eps);
        let ga = analytic[i];
        let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-3);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

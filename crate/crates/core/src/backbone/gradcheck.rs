//! Central-difference check of [`loss_and_grads`](super::loss_and_grads).

use serde::Serialize;

use super::{loss_and_grads, trainable_parameters_mut, vit_forward, Adapters, Regime, ViTModel};
use crate::alore::{AloreBank, ExpertMask};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real, Rng};
use crate::train::cross_entropy;

/// Entries whose analytic and numeric gradients are both below this are compared
/// in absolute rather than relative terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Agreement between analytic and numeric gradients of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    /// `max |a − n| / max(|a|, |n|, REL_ERR_FLOOR)` over entries.
    pub max_rel_err: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over the whole tensor.
    pub norm_rel_err: f64,
    pub grad_norm: f64,
}

fn adapters<'a, T: Real>(
    bank: Option<&'a AloreBank<T>>,
    mask: Option<&'a ExpertMask>,
) -> Result<Option<Adapters<'a, T>>> {
    match (bank, mask) {
        (Some(b), Some(m)) => Ok(Some(Adapters::new(b, m)?)),
        _ => Ok(None),
    }
}

/// Returns entry `e` of the `k`-th trainable tensor, then overwrites it with `value` if given.
fn set_entry<T: Real>(
    model: &mut ViTModel<T>,
    bank: Option<&mut AloreBank<T>>,
    regime: Regime,
    k: usize,
    e: usize,
    value: Option<T>,
) -> T {
    let mut params = trainable_parameters_mut(model, bank, regime);
    let slot = &mut params[k].1.data_mut()[e];
    let old = *slot;
    if let Some(v) = value {
        *slot = v;
    }
    old
}

/// Compares every gradient `regime` trains against `(L(θ+ε) − L(θ−ε)) / 2ε`.
///
/// When the bank has dropout, the check runs in train mode with every loss
/// evaluation replaying the same masks from `seed`.
pub fn grad_check<T: Real>(
    model: &ViTModel<T>,
    bank: Option<&AloreBank<T>>,
    images: &Matrix<T>,
    labels: &[usize],
    regime: Regime,
    eps: f64,
    seed: u64,
) -> Result<Vec<TensorCheck>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mask = bank.map(|b| ExpertMask::full(b.config().n));
    let train_mode = bank.is_some_and(|b| b.config().dropout_p > 0.0);
    let loss = |m: &ViTModel<T>, b: Option<&AloreBank<T>>| -> Result<f64> {
        let logits = vit_forward(m, images, adapters(b, mask.as_ref())?, train_mode, &mut Rng::new(seed))?;
        Ok(cross_entropy(&logits, labels)?.0.to_f64().unwrap_or(f64::NAN))
    };

    let attached = adapters(bank, mask.as_ref())?;
    let (_, grads) = loss_and_grads(model, attached, images, labels, regime, train_mode, &mut Rng::new(seed))?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .trainable(regime)
        .into_iter()
        .map(|(n, g)| (n, g.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()))
        .collect();

    let mut m = model.clone();
    let mut b = bank.cloned();
    let h = T::of(eps);
    let mut out = Vec::with_capacity(analytic.len());
    for (k, (name, a)) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for e in 0..a.len() {
            let orig = set_entry(&mut m, b.as_mut(), regime, k, e, None);
            set_entry(&mut m, b.as_mut(), regime, k, e, Some(orig + h));
            let plus = loss(&m, b.as_ref())?;
            set_entry(&mut m, b.as_mut(), regime, k, e, Some(orig - h));
            let minus = loss(&m, b.as_ref())?;
            set_entry(&mut m, b.as_mut(), regime, k, e, Some(orig));
            numeric.push((plus - minus) / (2.0 * eps));
        }
        let (mut max_rel, mut diff2, mut a2, mut n2) = (0.0f64, 0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(&numeric) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR);
            max_rel = if rel.is_nan() { f64::INFINITY } else { max_rel.max(rel) };
            diff2 += (x - y) * (x - y);
            a2 += x * x;
            n2 += y * y;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        out.push(TensorCheck {
            name: name.clone(),
            entries: a.len(),
            max_rel_err: max_rel,
            norm_rel_err: if denom > 0.0 {
                diff2.sqrt() / denom
            } else {
                diff2.sqrt()
            },
            grad_norm: a2.sqrt(),
        });
    }
    Ok(out)
}

/// Largest [`TensorCheck::max_rel_err`] in `checks` (0 when empty).
pub fn worst(checks: &[TensorCheck]) -> f64 {
    checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
}

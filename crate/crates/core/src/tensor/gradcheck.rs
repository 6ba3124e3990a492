//! Central-difference verification of reverse-mode gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Builds `f` over a fresh graph seeded with `x`, runs the reverse sweep, and
/// compares the analytic gradient against central differences with step
/// `eps`. Returns the worst per-coordinate relative error
/// `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)`.
///
/// `f` must produce a scalar and must be a pure function of its input.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::contract("gradient_check", "eps must be positive and finite"));
    }

    let tracked = x.clone().requires_grad(true);
    let mut g = Graph::new();
    let xv = g.leaf(&tracked);
    let loss = f(&mut g, xv)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::contract(
            "gradient_check",
            format!("objective must be scalar, got shape {:?}", g.value(loss).shape()),
        ));
    }
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .ok_or_else(|| Error::contract("gradient_check", "objective ignores its input"))?
        .to_vec();

    let eval = |values: &[f64]| -> Result<f64> {
        let t = Tensor::new(x.shape().to_vec(), values.to_vec())?;
        let mut g = Graph::new();
        let v = g.constant(&t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut probe = x.values().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = eval(&probe)?;
        probe[i] = orig - eps;
        let down = eval(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / (1e-12f64).max(analytic[i].abs() + numeric.abs());
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
